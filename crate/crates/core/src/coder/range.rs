use crate::error::{Error, Result};
use crate::prob::{PROB_BITS, PROB_TOTAL};

/// Renormalise once the range drops below this.
const TOP: u64 = 1 << 56;
const LOW_MASK: u128 = (1u128 << 56) - 1;
/// Flushed tail bytes that may be dropped when zero.
const MAX_STRIPPED: usize = 8;

/// Validated cumulative table: `cum[0] = 0`, `cum[n] = 2^16`, strictly
/// increasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    cum: Vec<u32>,
}

impl CdfTable {
    pub fn new(cum: Vec<u32>) -> Result<Self> {
        if cum.len() < 2 || cum[0] != 0 || *cum.last().unwrap() != PROB_TOTAL {
            return Err(Error::Config("cumulative table must run from 0 to 65536".into()));
        }
        if cum.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("cumulative table is not strictly increasing".into()));
        }
        Ok(CdfTable { cum })
    }

    pub fn from_freqs(freqs: &[u32]) -> Result<Self> {
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in freqs {
            acc = acc.saturating_add(f);
            cum.push(acc);
        }
        Self::new(cum)
    }

    pub fn symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn cum(&self) -> &[u32] {
        &self.cum
    }
}

/// Carry-propagating range encoder with a 64-bit range.
#[derive(Clone, Debug)]
pub struct RangeEncoder {
    low: u128,
    range: u64,
    cache: u8,
    pending: u64,
    skip_first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u64::MAX, cache: 0, pending: 1, skip_first: true, out: Vec::new() }
    }

    fn emit(&mut self, byte: u8) {
        if self.skip_first {
            // The very first cached byte is always zero and carries nothing.
            self.skip_first = false;
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        if self.low < (0xFFu128 << 56) || self.low >= (1u128 << 64) {
            let carry = (self.low >> 64) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 56) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & LOW_MASK) << 8;
    }

    #[inline]
    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Code symbol `sym` of the table given as cumulative counts.
    #[inline]
    pub fn encode(&mut self, cum: &[u32], sym: usize) {
        let lo = cum[sym];
        let hi = cum[sym + 1];
        debug_assert!(hi > lo && *cum.last().unwrap() == PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low += r as u128 * lo as u128;
        self.range = r * (hi - lo) as u64;
        self.normalize();
    }

    pub fn encode_symbol(&mut self, table: &CdfTable, sym: usize) -> Result<()> {
        if sym >= table.symbols() {
            return Err(Error::Config(format!("symbol {} outside table of {}", sym, table.symbols())));
        }
        self.encode(&table.cum, sym);
        Ok(())
    }

    /// `nbits` (at most 16) equiprobable bits.
    #[inline]
    pub fn encode_bits(&mut self, value: u32, nbits: u32) {
        debug_assert!(nbits <= 16 && (nbits == 32 || value >> nbits == 0));
        let r = self.range >> nbits;
        self.low += r as u128 * value as u128;
        self.range = r;
        self.normalize();
    }

    /// Bytes emitted so far, excluding what is still held in the state.
    pub fn bytes_so_far(&self) -> usize {
        self.out.len()
    }

    pub fn finish(mut self) -> Vec<u8> {
        // Any value in [low, low + range) decodes identically; pick the one
        // with the most trailing zero bytes.
        let mask = (1u128 << 56) - 1;
        self.low = (self.low + mask) & !mask;
        for _ in 0..9 {
            self.shift_low();
        }
        let mut stripped = 0;
        while stripped < MAX_STRIPPED && self.out.last() == Some(&0) {
            self.out.pop();
            stripped += 1;
        }
        self.out
    }
}

/// Decoder for [`RangeEncoder`] streams.
#[derive(Clone, Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u64,
    range: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder { data, pos: 0, code: 0, range: u64::MAX };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte()? as u64;
        }
        Ok(d)
    }

    #[inline]
    fn next_byte(&mut self) -> Result<u8> {
        let b = self.data.get(self.pos).copied();
        self.pos += 1;
        match b {
            Some(b) => Ok(b),
            None if self.pos - self.data.len() <= MAX_STRIPPED => Ok(0),
            None => Err(Error::Truncated(format!("range decoder read past byte {}", self.data.len()))),
        }
    }

    #[inline]
    fn normalize(&mut self) -> Result<()> {
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u64;
        }
        Ok(())
    }

    #[inline]
    pub fn decode(&mut self, cum: &[u32]) -> Result<usize> {
        let r = self.range >> PROB_BITS;
        let v = self.code / r;
        if v >= PROB_TOTAL as u64 {
            return Err(Error::Corrupt("range decoder value outside table".into()));
        }
        let v = v as u32;
        let sym = cum.partition_point(|&c| c <= v) - 1;
        let (lo, hi) = (cum[sym], cum[sym + 1]);
        self.code -= r * lo as u64;
        self.range = r * (hi - lo) as u64;
        self.normalize()?;
        Ok(sym)
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<usize> {
        self.decode(&table.cum)
    }

    #[inline]
    pub fn decode_bits(&mut self, nbits: u32) -> Result<u32> {
        let r = self.range >> nbits;
        let v = self.code / r;
        if v >> nbits != 0 {
            return Err(Error::Corrupt("bypass value out of range".into()));
        }
        self.code -= v * r;
        self.range = r;
        self.normalize()?;
        Ok(v as u32)
    }

    /// Bytes consumed, counting virtual zero padding.
    pub fn position(&self) -> usize {
        self.pos
    }
}
