//! Integer image buffers and their on-disk forms: binary PGM/PPM and raw
//! little-endian 16-bit samples with a text sidecar holding the geometry.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::PixelBatch;

/// Row-major, channel-interleaved samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub bit_depth: u8,
    pub data: Vec<u16>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, bit_depth: u8, data: Vec<u16>) -> Result<Self> {
        if !(1..=16).contains(&bit_depth) {
            return Err(Error::UnsupportedBitDepth(bit_depth));
        }
        if width == 0 || height == 0 {
            return Err(Error::Image("empty image".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!("{} channels; only 1 or 3 are supported", channels)));
        }
        if data.len() != width * height * channels {
            return Err(Error::Image(format!("{} samples for {}x{}x{}", data.len(), width, height, channels)));
        }
        let max = ((1u32 << bit_depth) - 1) as u16;
        if let Some(&v) = data.iter().find(|&&v| v > max) {
            return Err(Error::PixelRange { value: v as u32, bit_depth });
        }
        Ok(ImageBuffer { width, height, channels, bit_depth, data })
    }

    pub fn samples(&self) -> usize {
        self.data.len()
    }

    /// The image in a zero-padded frame of whole `patch × patch` tiles.
    pub fn to_padded(&self, patch: usize) -> Result<PixelBatch> {
        let h = self.height.div_ceil(patch) * patch;
        let w = self.width.div_ceil(patch) * patch;
        let c = self.channels;
        let mut data = vec![0u32; h * w * c];
        for y in 0..self.height {
            for (i, &v) in self.data[y * self.width * c..(y + 1) * self.width * c].iter().enumerate() {
                data[y * w * c + i] = v as u32;
            }
        }
        PixelBatch::new(1, h, w, c, data, vec![(self.height, self.width)])
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".dims");
    PathBuf::from(s)
}

/// Load by extension: `.raw` uses the sidecar, anything else is PNM.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    if path.extension().is_some_and(|e| e == "raw") {
        load_raw(path)
    } else {
        decode_pnm(&fs::read(path)?)
    }
}

pub fn save_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    if path.extension().is_some_and(|e| e == "raw") {
        save_raw(path, img)
    } else {
        fs::write(path, encode_pnm(img)?)?;
        Ok(())
    }
}

/// Binary PGM (1 channel) or PPM (3 channels) with maxval `2^b − 1`.
pub fn encode_pnm(img: &ImageBuffer) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Image(format!("cannot store {} channels as PNM", c))),
    };
    let maxval = (1u32 << img.bit_depth) - 1;
    let mut out = format!("{}\n{} {}\n{}\n", magic, img.width, img.height, maxval).into_bytes();
    if maxval > 255 {
        for &v in &img.data {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(img.data.iter().map(|&v| v as u8));
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Image("malformed PNM header".into()))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Image("not a PNM file".into()));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        b'2' | b'3' => return Err(Error::Image("ASCII PNM (P2/P3) is not supported; use binary P5/P6".into())),
        _ => return Err(Error::Image(format!("unsupported PNM type P{}", bytes[1] as char))),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number()?;
    let height = h.number()?;
    let maxval = h.number()?;
    if !(1..=65535).contains(&maxval) {
        return Err(Error::Image(format!("PNM maxval {} out of range", maxval)));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(Error::Image("malformed PNM header".into()));
    }
    let raster = &bytes[h.pos + 1..];
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Image("PNM dimensions overflow".into()))?;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    if raster.len() < need {
        return Err(Error::Image(format!("PNM raster has {} bytes, expected {}", raster.len(), need)));
    }
    let data: Vec<u16> = if wide {
        raster[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        raster[..n].iter().map(|&v| v as u16).collect()
    };
    let bit_depth = (usize::BITS - maxval.leading_zeros()) as u8;
    if let Some(&v) = data.iter().find(|&&v| v as usize > maxval) {
        return Err(Error::Image(format!("sample {} exceeds maxval {}", v, maxval)));
    }
    ImageBuffer::new(width, height, channels, bit_depth, data)
}

/// Samples as little-endian u16; geometry goes to `<path>.dims` as
/// `width height channels bit_depth`.
pub fn save_raw(path: &Path, img: &ImageBuffer) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.data.len() * 2);
    for &v in &img.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    fs::write(sidecar(path), format!("{} {} {} {}\n", img.width, img.height, img.channels, img.bit_depth))?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<ImageBuffer> {
    let dims = fs::read_to_string(sidecar(path))?;
    let f: Vec<usize> = dims
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Image(format!("bad sidecar field {:?}", t))))
        .collect::<Result<_>>()?;
    let [width, height, channels, bits] = f[..] else {
        return Err(Error::Image("sidecar needs width height channels bit_depth".into()));
    };
    let bytes = fs::read(path)?;
    if bytes.len() != width * height * channels * 2 {
        return Err(Error::Image(format!("raw file has {} bytes for {}x{}x{}", bytes.len(), width, height, channels)));
    }
    let data = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    ImageBuffer::new(width, height, channels, u8::try_from(bits).unwrap_or(0), data)
}
