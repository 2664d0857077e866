//! Labeled random streams derived from one root seed.
//!
//! Every consumer of randomness (initialization, split, per-epoch shuffle,
//! dropout) gets its own ChaCha stream keyed by `(root, stream)`, so a single
//! seed reproduces a whole run regardless of the order consumers run in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Split,
    Shuffle { epoch: usize },
    Dropout { epoch: usize, batch: usize, chunk: usize },
}

impl Stream {
    fn words(self) -> [u64; 3] {
        match self {
            Stream::Init => [1, 0, 0],
            Stream::Split => [2, 0, 0],
            Stream::Shuffle { epoch } => [3, epoch as u64, 0],
            Stream::Dropout { epoch, batch, chunk } => [4 | ((chunk as u64) << 8), epoch as u64, batch as u64],
        }
    }
}

pub fn rng_for(root: u64, stream: Stream) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&root.to_le_bytes());
    for (slot, word) in seed[8..].chunks_exact_mut(8).zip(stream.words()) {
        slot.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
