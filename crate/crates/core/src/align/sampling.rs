use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Admissible chunk lengths in slices.
pub const CHUNK_LENGTHS: [usize; 3] = [32, 64, 128];

/// A window `[start, start + len)` along z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkSpec {
    pub start: usize,
    pub len: usize,
}

impl ChunkSpec {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn overlaps(&self, other: &ChunkSpec) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

/// Draws `len` uniformly from the admissible lengths not exceeding `slices`,
/// then `start` uniformly from `0..=slices - len`. Volumes shorter than the
/// smallest length yield one full-volume window (the caller pads it).
pub fn sample_chunk<R: Rng + ?Sized>(slices: usize, rng: &mut R) -> Result<ChunkSpec> {
    if slices == 0 {
        return Err(Error::contract("cannot sample a chunk from an empty volume"));
    }
    let admissible = CHUNK_LENGTHS.iter().filter(|&&l| l <= slices).count();
    if admissible == 0 {
        return Ok(ChunkSpec { start: 0, len: slices });
    }
    let len = CHUNK_LENGTHS[rng.random_range(0..admissible)];
    let start = rng.random_range(0..=slices - len);
    Ok(ChunkSpec { start, len })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn exact_fit_has_one_outcome() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_chunk(32, &mut rng).unwrap(), ChunkSpec { start: 0, len: 32 });
        }
    }

    #[test]
    fn short_volume_is_one_full_chunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_chunk(7, &mut rng).unwrap(), ChunkSpec { start: 0, len: 7 });
        assert!(sample_chunk(0, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_chunk() {
        let a = sample_chunk(300, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_chunk(300, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn windows_stay_in_bounds(t in 1usize..1000, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = sample_chunk(t, &mut rng).unwrap();
            prop_assert!(c.end() <= t);
            prop_assert!(c.len == t.min(c.len));
            prop_assert!(t < 32 || CHUNK_LENGTHS.contains(&c.len));
        }
    }
}
