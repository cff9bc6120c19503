use super::range::{RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};

/// Destination for raw bits, most significant first.
pub trait BitSink {
    /// Append the low `n` bits of `value` (`n ≤ 32`).
    fn put_bits(&mut self, value: u32, n: u32);
}

pub trait BitSource {
    fn get_bits(&mut self, n: u32) -> Result<u32>;
}

/// Plain MSB-first bit packer.
#[derive(Clone, Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    bits: usize,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bit_len(&self) -> usize {
        self.bits
    }

    /// The bits written so far as `'0'`/`'1'` characters.
    pub fn to_bit_string(&self) -> String {
        (0..self.bits).map(|i| if self.bytes[i / 8] >> (7 - i % 8) & 1 == 1 { '1' } else { '0' }).collect()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

impl BitSink for BitWriter {
    fn put_bits(&mut self, value: u32, n: u32) {
        for i in (0..n).rev() {
            if self.bits % 8 == 0 {
                self.bytes.push(0);
            }
            if value >> i & 1 == 1 {
                *self.bytes.last_mut().unwrap() |= 0x80 >> (self.bits % 8);
            }
            self.bits += 1;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        BitReader { bytes, pos: 0 }
    }
}

impl BitSource for BitReader<'_> {
    fn get_bits(&mut self, n: u32) -> Result<u32> {
        let mut v = 0u32;
        for _ in 0..n {
            let byte = self.bytes.get(self.pos / 8).ok_or_else(|| Error::Truncated("bit reader exhausted".into()))?;
            v = (v << 1) | (byte >> (7 - self.pos % 8) & 1) as u32;
            self.pos += 1;
        }
        Ok(v)
    }
}

impl BitSink for RangeEncoder {
    fn put_bits(&mut self, value: u32, n: u32) {
        let mut left = n;
        while left > 0 {
            let take = left.min(16);
            left -= take;
            self.encode_bits((value >> left) & ((1u32 << take) - 1), take);
        }
    }
}

impl BitSource for RangeDecoder<'_> {
    fn get_bits(&mut self, n: u32) -> Result<u32> {
        let mut v = 0u32;
        let mut left = n;
        while left > 0 {
            let take = left.min(16);
            left -= take;
            v = (v << take) | self.decode_bits(take)?;
        }
        Ok(v)
    }
}

/// Largest value the code accepts.
pub const EXPGOLOMB_MAX: u64 = (1u64 << 62) - 2;

/// Order-0 Exp-Golomb: `n − 1` zeros, then the `n` bits of `v + 1`.
///
/// Prefix bits and the suffix are written with the same call sequence the
/// decoder reads them with, so arithmetic-coded sinks stay in step.
pub fn encode_expgolomb(sink: &mut impl BitSink, v: u64) {
    assert!(v <= EXPGOLOMB_MAX, "exp-golomb value {} too large", v);
    let x = v + 1;
    let zeros = 63 - x.leading_zeros();
    for _ in 0..zeros {
        sink.put_bits(0, 1);
    }
    sink.put_bits(1, 1);
    if zeros > 32 {
        sink.put_bits((x >> 32) as u32 & ((1u32 << (zeros - 32)) - 1), zeros - 32);
        sink.put_bits(x as u32, 32);
    } else if zeros > 0 {
        sink.put_bits(x as u32 & (u32::MAX >> (32 - zeros)), zeros);
    }
}

pub fn decode_expgolomb(source: &mut impl BitSource) -> Result<u64> {
    let mut zeros = 0u32;
    while source.get_bits(1)? == 0 {
        zeros += 1;
        if zeros > 61 {
            return Err(Error::Corrupt("exp-golomb prefix too long".into()));
        }
    }
    let rest = if zeros > 32 {
        let hi = source.get_bits(zeros - 32)? as u64;
        (hi << 32) | source.get_bits(32)? as u64
    } else {
        source.get_bits(zeros)? as u64
    };
    Ok(((1u64 << zeros) | rest) - 1)
}
