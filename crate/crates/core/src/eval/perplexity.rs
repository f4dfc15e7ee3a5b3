use crate::corpus::{training_pair, Blocks};
use crate::error::{Error, Result};
use crate::model::{LanguageModel, TokenId};
use crate::scalar::Scalar;
use crate::tensor::kernels::log_softmax_row;

/// Summed next-token negative log-likelihood of `targets` given `inputs`.
pub fn sequence_nll<T: Scalar, M: LanguageModel<T> + ?Sized>(
    model: &M,
    inputs: &[TokenId],
    targets: &[TokenId],
) -> Result<f64> {
    if inputs.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let logits = model.logits(inputs)?;
    let mut nll = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let lp = log_softmax_row(logits.row(i));
        let v = lp.get(t as usize).ok_or(Error::Index {
            index: t as usize,
            bound: lp.len(),
        })?;
        nll -= v;
    }
    Ok(nll)
}

/// Mean per-token NLL over `blocks`, each scored behind a BOS token.
pub fn mean_block_loss<T: Scalar, M: LanguageModel<T> + ?Sized>(model: &M, blocks: &Blocks) -> Result<f64> {
    if blocks.is_empty() {
        return Err(Error::Eval("no blocks to evaluate".into()));
    }
    let mut total = 0.0;
    for b in &blocks.blocks {
        let (inputs, targets) = training_pair(b);
        total += sequence_nll(model, &inputs, &targets)?;
    }
    Ok(total / blocks.num_tokens() as f64)
}

pub fn perplexity<T: Scalar, M: LanguageModel<T> + ?Sized>(model: &M, blocks: &Blocks) -> Result<f64> {
    Ok(mean_block_loss(model, blocks)?.exp())
}
