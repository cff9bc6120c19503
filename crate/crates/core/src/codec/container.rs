use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HPAC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 33;

pub const FLAG_ADAPTERS: u8 = 1;
pub const FLAG_FAST: u8 = 2;

/// Fixed-size stream header; all integers little-endian.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub flags: u8,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub bit_depth: u8,
    pub patch: u8,
    pub delta: u8,
    pub mixtures: u8,
    /// Nominal coding window; at least `2^b` means the whole alphabet.
    pub range: u16,
    pub model_hash: u64,
    pub adapter_len: u32,
}

impl Header {
    pub fn has_adapters(&self) -> bool {
        self.flags & FLAG_ADAPTERS != 0
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.flags);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&[self.channels, self.bit_depth, self.patch, self.delta, self.mixtures]);
        out.extend_from_slice(&self.range.to_le_bytes());
        out.extend_from_slice(&self.model_hash.to_le_bytes());
        out.extend_from_slice(&self.adapter_len.to_le_bytes());
    }

    /// Parse the header and split off `(adapter bytes, image bytes)`.
    pub fn read(bytes: &[u8]) -> Result<(Header, &[u8], &[u8])> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("container header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated("container header".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Version(bytes[4]));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let h = Header {
            flags: bytes[5],
            width: u32_at(6),
            height: u32_at(10),
            channels: bytes[14],
            bit_depth: bytes[15],
            patch: bytes[16],
            delta: bytes[17],
            mixtures: bytes[18],
            range: u16::from_le_bytes([bytes[19], bytes[20]]),
            model_hash: u64::from_le_bytes(bytes[21..29].try_into().unwrap()),
            adapter_len: u32_at(29),
        };
        if h.flags & !(FLAG_ADAPTERS | FLAG_FAST) != 0 {
            return Err(Error::Corrupt(format!("unknown flags {:#04x}", h.flags)));
        }
        if !h.has_adapters() && h.adapter_len != 0 {
            return Err(Error::Corrupt("adapter bytes without the adapter flag".into()));
        }
        let rest = &bytes[HEADER_LEN..];
        let n = h.adapter_len as usize;
        if rest.len() < n {
            return Err(Error::Truncated("adapter payload".into()));
        }
        let (adapters, image) = rest.split_at(n);
        Ok((h, adapters, image))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Header {
        Header {
            flags: FLAG_ADAPTERS,
            width: 97,
            height: 61,
            channels: 1,
            bit_depth: 16,
            patch: 32,
            delta: 2,
            mixtures: 5,
            range: 1024,
            model_hash: 0x0123_4567_89ab_cdef,
            adapter_len: 3,
        }
    }

    #[test]
    fn header_roundtrip_and_layout() {
        let mut out = Vec::new();
        sample().write(&mut out);
        assert_eq!(out.len(), HEADER_LEN);
        assert_eq!(&out[..6], b"HPAC\x01\x01");
        assert_eq!(&out[6..10], &97u32.to_le_bytes());
        out.extend([1, 2, 3, 9, 9]);
        let (h, a, i) = Header::read(&out).unwrap();
        assert_eq!(h, sample());
        assert_eq!((a, i), (&[1u8, 2, 3][..], &[9u8, 9][..]));
    }

    #[test]
    fn header_errors() {
        let mut out = Vec::new();
        sample().write(&mut out);
        assert!(matches!(Header::read(b"JPEG...."), Err(Error::BadMagic)));
        assert!(matches!(Header::read(&out[..20]), Err(Error::Truncated(_))));
        assert!(matches!(Header::read(&out), Err(Error::Truncated(_))));
        let mut v = out.clone();
        v[4] = 7;
        assert!(matches!(Header::read(&v), Err(Error::Version(7))));
        let mut v = out.clone();
        v[5] = 0x80;
        assert!(Header::read(&v).is_err());
    }
}
