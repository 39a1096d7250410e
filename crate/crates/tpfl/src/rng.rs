//! Deterministic, splittable random streams.
//!
//! Every source of randomness in the simulator draws from its own named
//! stream, derived statelessly from the master seed. That way adding a draw
//! in one place (say, an extra client sampled this round) cannot shift the
//! values any other place sees, and runs replay bit-for-bit from the seed
//! alone. Stream names in use: `"data"` (class prototypes and per-sample
//! noise, with split/class/sample indices), `"partition"` (label-skew
//! assignment), `"init"` (encoder weights, class embeddings, prompt
//! initialization), `"sampling"` (per-round client selection and mini-batch
//! shuffling), `"patch"` (random patch placement), `"noise"` (spare).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Finalizer from the splitmix64 generator; breaks up the linear structure
/// that FNV alone would leave in nearby seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from the master seed, a stream name, and any number
/// of integer indices (client id, round, class, ...). Pure function of its
/// arguments; stable across platforms and releases.
pub fn derive_seed(master: u64, name: &str, indices: &[u64]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &master.to_le_bytes());
    h = fnv1a(h, name.as_bytes());
    for &ix in indices {
        h = fnv1a(h, &ix.to_le_bytes());
    }
    splitmix64(h)
}

/// RNG seeded for one named stream.
pub fn stream(master: u64, name: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, name, indices))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_deterministic() {
        assert_eq!(
            derive_seed(42, "data", &[1, 2]),
            derive_seed(42, "data", &[1, 2])
        );
    }

    #[test]
    fn streams_differ_by_name_master_and_index() {
        let base = derive_seed(42, "data", &[0]);
        assert_ne!(base, derive_seed(42, "init", &[0]));
        assert_ne!(base, derive_seed(43, "data", &[0]));
        assert_ne!(base, derive_seed(42, "data", &[1]));
        // Index list boundaries matter: [1, 2] is not [12] or [1] then [2].
        assert_ne!(derive_seed(42, "x", &[1, 2]), derive_seed(42, "x", &[12]));
    }

    #[test]
    fn same_stream_replays_identically() {
        let a: Vec<f64> = stream(7, "sampling", &[3]).random_iter().take(8).collect();
        let b: Vec<f64> = stream(7, "sampling", &[3]).random_iter().take(8).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn pinned_value_guards_cross_version_stability() {
        // If this changes, previously recorded runs no longer replay; treat
        // any failure here as a breaking change to the on-disk format.
        assert_eq!(derive_seed(0, "data", &[]), 0x37ba166840a81256);
    }
}
