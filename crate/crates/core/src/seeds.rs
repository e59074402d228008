use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates structured seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed from a base seed and a path of tags.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}

// Tags naming the independent random streams of a run.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_STAGE1: u64 = 2;
pub(crate) const TAG_STAGE2: u64 = 3;
pub(crate) const TAG_DATA: u64 = 4;
pub(crate) const TAG_SUBSET: u64 = 5;
pub(crate) const TAG_META: u64 = 6;
pub(crate) const TAG_STREAM: u64 = 7;
pub(crate) const TAG_ORDER: u64 = u64::MAX;
