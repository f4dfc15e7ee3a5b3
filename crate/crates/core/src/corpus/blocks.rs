use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::BOS;
use crate::error::{Error, Result};
use crate::model::TokenId;

const MAGIC: &[u8; 4] = b"BLKS";
const VERSION: u32 = 1;

/// Fixed-length token blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Blocks {
    pub block_size: usize,
    pub blocks: Vec<Vec<TokenId>>,
}

/// Cuts `ids` into `len / block_size` contiguous blocks, drops the tail and
/// shuffles block order with `seed`.
pub fn pack_blocks(ids: &[TokenId], block_size: usize, seed: u64) -> Result<Blocks> {
    if block_size == 0 {
        return Err(Error::Corpus("block size must be >= 1".into()));
    }
    if ids.len() < block_size {
        return Err(Error::Corpus(format!(
            "stream of {} tokens is shorter than one block of {block_size}",
            ids.len()
        )));
    }
    let mut blocks: Vec<Vec<TokenId>> = ids.chunks_exact(block_size).map(<[_]>::to_vec).collect();
    blocks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Blocks { block_size, blocks })
}

/// Model inputs and targets for one block: the block shifted right behind
/// a BOS token, predicting every token of the block.
pub fn training_pair(block: &[TokenId]) -> (Vec<TokenId>, Vec<TokenId>) {
    let mut inputs = Vec::with_capacity(block.len());
    inputs.push(BOS);
    inputs.extend_from_slice(&block[..block.len().saturating_sub(1)]);
    (inputs, block.to_vec())
}

impl Blocks {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.blocks.len() * self.block_size
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.block_size as u32).to_le_bytes())?;
        w.write_all(&(self.blocks.len() as u64).to_le_bytes())?;
        for b in &self.blocks {
            for &t in b {
                w.write_all(&t.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 20];
        r.read_exact(&mut header)
            .map_err(|_| Error::Corpus("block file truncated in header".into()))?;
        if &header[..4] != MAGIC {
            return Err(Error::Corpus("not a block file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Corpus(format!("unsupported block file version {version}")));
        }
        let block_size = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
        if block_size == 0 {
            return Err(Error::Corpus("block file declares block size 0".into()));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let expected = count
            .checked_mul(block_size)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corpus("block file header overflows".into()))?;
        if bytes.len() != expected {
            return Err(Error::Corpus(format!(
                "block file payload is {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let ids: Vec<TokenId> = bytes
            .chunks_exact(4)
            .map(|c| TokenId::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            block_size,
            blocks: ids.chunks_exact(block_size).map(<[_]>::to_vec).collect(),
        })
    }
}

/// Dev and test shares; train receives the rest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { dev: 0.005, test: 0.01 }
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Blocks,
    pub dev: Blocks,
    pub test: Blocks,
}

/// Splits already-shuffled blocks: dev first, then test, then train. Each
/// split receives at least one block.
pub fn split_blocks(blocks: Blocks, fractions: SplitFractions) -> Result<Splits> {
    let SplitFractions { dev, test } = fractions;
    if !(dev >= 0.0 && test >= 0.0 && dev + test < 1.0) {
        return Err(Error::Corpus(format!("invalid split fractions dev={dev} test={test}")));
    }
    let n = blocks.len();
    let n_dev = ((n as f64 * dev).round() as usize).max(1);
    let n_test = ((n as f64 * test).round() as usize).max(1);
    if n_dev + n_test >= n {
        return Err(Error::Corpus(format!(
            "{n} blocks cannot fill train, dev ({n_dev}) and test ({n_test})"
        )));
    }
    let size = blocks.block_size;
    let mut rest = blocks.blocks;
    let train = rest.split_off(n_dev + n_test);
    let test_blocks = rest.split_off(n_dev);
    let wrap = |blocks| Blocks { block_size: size, blocks };
    Ok(Splits {
        train: wrap(train),
        dev: wrap(rest),
        test: wrap(test_blocks),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packs_and_drops_tail() {
        let ids: Vec<TokenId> = (0..10).collect();
        let b = pack_blocks(&ids, 3, 7).unwrap();
        assert_eq!(b.len(), 3);
        let mut flat: Vec<_> = b.blocks.concat();
        flat.sort();
        assert_eq!(flat, (0..9).collect::<Vec<_>>());
        for block in &b.blocks {
            assert_eq!(block[1], block[0] + 1);
        }
        assert_eq!(b, pack_blocks(&ids, 3, 7).unwrap());
    }

    #[test]
    fn short_stream_is_an_error() {
        assert!(pack_blocks(&[1, 2], 3, 0).is_err());
        assert!(pack_blocks(&[1, 2], 0, 0).is_err());
    }

    #[test]
    fn file_roundtrip_and_rejections() {
        let ids: Vec<TokenId> = (0..40).collect();
        let b = pack_blocks(&ids, 4, 1).unwrap();
        let mut buf = Vec::new();
        b.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"BLKS");
        assert_eq!(Blocks::read_from(&buf[..]).unwrap(), b);
        assert!(Blocks::read_from(&buf[..buf.len() - 2]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Blocks::read_from(&bad[..]).is_err());
        let mut bad = buf;
        bad[4] = 2;
        assert!(Blocks::read_from(&bad[..]).is_err());
    }

    #[test]
    fn split_sizes() {
        let ids: Vec<TokenId> = (0..2000).collect();
        let s = split_blocks(pack_blocks(&ids, 1, 3).unwrap(), SplitFractions::default()).unwrap();
        assert_eq!((s.dev.len(), s.test.len(), s.train.len()), (10, 20, 1970));
        let s = split_blocks(pack_blocks(&ids[..5], 1, 3).unwrap(), SplitFractions::default()).unwrap();
        assert_eq!((s.dev.len(), s.test.len(), s.train.len()), (1, 1, 3));
        assert!(split_blocks(pack_blocks(&ids[..2], 1, 3).unwrap(), SplitFractions::default()).is_err());
    }

    #[test]
    fn pair_is_shifted() {
        let (i, t) = training_pair(&[5, 6, 7]);
        assert_eq!(i, vec![BOS, 5, 6]);
        assert_eq!(t, vec![5, 6, 7]);
    }
}
