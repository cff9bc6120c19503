//! Entropy coding backend: a range coder over 16-bit cumulative tables
//! and an order-0 Exp-Golomb code for values outside any table.

mod golomb;
mod range;

pub use golomb::{decode_expgolomb, encode_expgolomb, EXPGOLOMB_MAX, BitReader, BitSink, BitSource, BitWriter};
pub use range::{CdfTable, RangeDecoder, RangeEncoder};

/// Ideal code length of a symbol with frequency `freq` out of 2^16.
pub fn ideal_bits(freq: u32) -> f64 {
    16.0 - (freq as f64).log2()
}
