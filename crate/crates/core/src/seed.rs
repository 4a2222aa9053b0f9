//! Splittable deterministic seeding.
//!
//! Every random stage in the pipeline draws from a `ChaCha8Rng` seeded by
//! mixing the master seed with a path of tags (stage id, trial index, ...)
//! through SplitMix64. Streams for different paths are independent, so adding
//! trials or stages never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags for [`derive`]. Keep values stable: they are part of the
/// reproducibility contract for saved experiments.
pub mod stage {
    pub const SCENE: u64 = 0x01;
    pub const SPLIT: u64 = 0x02;
    pub const SOM: u64 = 0x03;
    pub const SIGMOID: u64 = 0x04;
    pub const GAN_INIT: u64 = 0x05;
    pub const GAN_TRAIN: u64 = 0x06;
    pub const EVAL: u64 = 0x07;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and a tag path.
///
/// `derive(m, &[a, b])` differs from `derive(m, &[a])` and from
/// `derive(m, &[b, a])`; each tag is folded in through one SplitMix64 round.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(master);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// A deterministic RNG for the stream identified by `(master, tags)`.
pub fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derive_is_deterministic() {
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
    }

    #[test]
    fn derive_depends_on_path_and_order() {
        let base = derive(7, &[1, 2]);
        assert_ne!(base, derive(7, &[2, 1]));
        assert_ne!(base, derive(7, &[1]));
        assert_ne!(base, derive(8, &[1, 2]));
    }

    #[test]
    fn streams_are_independent_per_tag() {
        let a: f64 = stream(42, &[stage::SOM, 0]).random();
        let b: f64 = stream(42, &[stage::SOM, 1]).random();
        assert_ne!(a, b);
        // same path replays the same stream
        let a2: f64 = stream(42, &[stage::SOM, 0]).random();
        assert_eq!(a, a2);
    }
}
