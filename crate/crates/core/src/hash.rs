// 64-bit FNV-1a. Stable across platforms and toolchains, unlike std's hasher.

const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = OFFSET ^ seed.wrapping_mul(PRIME);
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

pub(crate) fn fnv1a_u64s(seed: u64, values: impl IntoIterator<Item = u64>) -> u64 {
    let mut h = OFFSET ^ seed.wrapping_mul(PRIME);
    for v in values {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}
