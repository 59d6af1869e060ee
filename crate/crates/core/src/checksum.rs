//! FNV-1a over the IEEE-754 bit patterns of `f64` slices. Two slices hash
//! equal iff they are bitwise identical (barring collisions).

const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a_bytes(seed: u64, bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(seed, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

pub fn fnv1a_f64(values: &[f64]) -> u64 {
    values
        .iter()
        .fold(OFFSET, |h, v| fnv1a_bytes(h, &v.to_bits().to_le_bytes()))
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_bytes(OFFSET, bytes)
}
