//! Closed-form parameter accounting.

use super::{Architecture, ModelConfig};

fn block_params(d: usize) -> usize {
    // ln_1, qkv, proj, ln_2, fc, fc2
    2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (4 * d * d + 4 * d) + (4 * d * d + d)
}

/// Exact number of scalar weights of a model built from `cfg`.
pub fn count_params(cfg: &ModelConfig, arch: Architecture) -> usize {
    let d = cfg.embed_dim;
    let k = cfg.num_senses;
    let embeddings = cfg.vocab_size * d + cfg.context_length * d;
    let blocks = cfg.blocks(arch) * block_params(d);
    let head = match arch {
        Architecture::Baseline => 2 * d,
        Architecture::Backpack => {
            let contextualization = 2 * d + 2 * d * d;
            let sense_ff = 2 * d + (4 * d * d + 4 * d) + (4 * d * d + d);
            let projection = k * d * d + k * d;
            contextualization + sense_ff + projection
        }
    };
    embeddings + blocks + head
}

/// Weights held in the square-ish core matrices only (no embeddings,
/// biases or norm parameters): 12d² per block, plus for the Backpack
/// 2d² for K/Q, 8d² for the sense feed-forward and k·d² for the sense
/// projection.
pub fn core_matrix_params(cfg: &ModelConfig, arch: Architecture) -> usize {
    let d2 = cfg.embed_dim * cfg.embed_dim;
    let blocks = cfg.blocks(arch) * 12 * d2;
    match arch {
        Architecture::Baseline => blocks,
        Architecture::Backpack => blocks + (2 + 8 + cfg.num_senses) * d2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_config_difference() {
        let cfg = ModelConfig::small(21128);
        let diff = core_matrix_params(&cfg, Architecture::Backpack) as i64
            - core_matrix_params(&cfg, Architecture::Baseline) as i64;
        assert_eq!(diff, 8_257_536);
        assert_eq!(diff, 14 * 768 * 768);
    }

    #[test]
    fn two_senses_cancel_the_removed_block() {
        let mut cfg = ModelConfig::small(1000);
        cfg.num_senses = 2;
        assert_eq!(
            core_matrix_params(&cfg, Architecture::Backpack),
            core_matrix_params(&cfg, Architecture::Baseline)
        );
    }
}
