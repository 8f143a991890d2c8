//! Seed derivation.
//!
//! Every stochastic component draws from its own stream, obtained by hashing
//! the component name into the root seed. Adding a new component therefore
//! never shifts the random numbers seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the named component under `root`.
pub fn derive(root: u64, component: &str) -> u64 {
    splitmix64(root ^ fnv1a(component.as_bytes()))
}

/// Seed for the `index`-th job of a named component (fold, trial, grid point).
pub fn derive_indexed(root: u64, component: &str, index: u64) -> u64 {
    splitmix64(derive(root, component) ^ splitmix64(index))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
