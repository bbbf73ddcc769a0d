//! Mask encodings: plain bitsets (LSB-first) and 16-bit run lengths.

use crate::error::{Error, Result};

pub fn bitset_len(dim: usize) -> usize {
    dim.div_ceil(8)
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bitset_len(bits.len())];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub fn unpack_bits(bytes: &[u8], dim: usize) -> Result<Vec<bool>> {
    if bytes.len() != bitset_len(dim) {
        return Err(Error::format(format!("bitset of {} bytes for {dim} bits", bytes.len())));
    }
    let bits: Vec<bool> = (0..dim).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
    let padding = bytes.len() * 8 - dim;
    if padding > 0 && bytes[bytes.len() - 1] >> (8 - padding) != 0 {
        return Err(Error::format("bitset has non-zero padding bits"));
    }
    Ok(bits)
}

/// Alternating run lengths starting with a run of zeros (possibly empty).
/// Runs longer than `u16::MAX` are split with empty runs of the other bit.
pub fn rle_encode(bits: &[bool]) -> Vec<u16> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    let flush = |runs: &mut Vec<u16>, mut len: usize| {
        while len > u16::MAX as usize {
            runs.push(u16::MAX);
            runs.push(0);
            len -= u16::MAX as usize;
        }
        runs.push(len as u16);
    };
    for &b in bits {
        if b != current {
            flush(&mut runs, len);
            current = b;
            len = 0;
        }
        len += 1;
    }
    if len > 0 || runs.is_empty() {
        flush(&mut runs, len);
    }
    runs
}

pub fn rle_decode(runs: &[u16], dim: usize) -> Result<Vec<bool>> {
    let mut bits = Vec::with_capacity(dim);
    for (i, &r) in runs.iter().enumerate() {
        if bits.len() + r as usize > dim {
            return Err(Error::format(format!("run-length mask overflows {dim} bits")));
        }
        bits.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
    }
    if bits.len() != dim {
        return Err(Error::format(format!("run-length mask covers {} of {dim} bits", bits.len())));
    }
    Ok(bits)
}

/// Serialized size of one mask.
pub fn mask_bytes(bits: &[bool], rle: bool) -> usize {
    if rle {
        2 + 2 * rle_encode(bits).len()
    } else {
        bitset_len(bits.len())
    }
}
