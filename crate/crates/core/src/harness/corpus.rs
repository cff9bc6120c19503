//! Synthetic images: smooth gradients, multi-octave value noise and
//! text-like glyph rasters, plus an out-of-distribution inverted-text set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::ImageBuffer;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Gradient,
    Noise,
    Glyphs,
    /// Light strokes on a dark dithered ground; absent from training data.
    InvertedGlyphs,
}

impl Kind {
    pub const TRAINING: [Kind; 3] = [Kind::Gradient, Kind::Noise, Kind::Glyphs];
}

/// Float canvas in `[0, 1]`, one plane per channel.
struct Canvas {
    w: usize,
    h: usize,
    c: usize,
    v: Vec<f64>,
}

impl Canvas {
    fn new(w: usize, h: usize, c: usize) -> Self {
        Canvas { w, h, c, v: vec![0.0; w * h * c] }
    }

    fn set(&mut self, x: usize, y: usize, ch: usize, v: f64) {
        self.v[(y * self.w + x) * self.c + ch] = v;
    }

    fn quantize(self, bits: u8, rng: &mut ChaCha8Rng, noise: f64) -> Result<ImageBuffer> {
        let max = ((1u32 << bits) - 1) as f64;
        let data = self
            .v
            .iter()
            .map(|&v| {
                let n = if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 };
                ((v + n).clamp(0.0, 1.0) * max).round() as u16
            })
            .collect();
        ImageBuffer::new(self.w, self.h, self.c, bits, data)
    }
}

fn tint(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    (0..c).map(|_| if c == 1 { 1.0 } else { rng.gen_range(0.7..1.0) }).collect()
}

fn gradient(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Canvas {
    let mut cv = Canvas::new(w, h, c);
    let planes: Vec<[f64; 3]> = (0..c)
        .map(|_| [rng.gen_range(0.1..0.9), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)])
        .collect();
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            for (ch, p) in planes.iter().enumerate() {
                cv.set(x, y, ch, p[0] + p[1] * (u - 0.5) + p[2] * (v - 0.5));
            }
        }
    }
    cv
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinear value noise summed over octaves.
fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Canvas {
    let mut cv = Canvas::new(w, h, c);
    let base = rng.gen_range(8.0..32.0);
    let t = tint(rng, c);
    let mut amp = 0.5;
    let mut cell = base;
    let mut total = 0.0;
    let mut acc = vec![0.0; w * h];
    for _ in 0..3 {
        let gw = (w as f64 / cell) as usize + 2;
        let gh = (h as f64 / cell) as usize + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
        for y in 0..h {
            for x in 0..w {
                let (fx, fy) = (x as f64 / cell, y as f64 / cell);
                let (ix, iy) = (fx as usize, fy as usize);
                let (sx, sy) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
                let l = |i: usize, j: usize| lattice[j * gw + i];
                let top = l(ix, iy) * (1.0 - sx) + l(ix + 1, iy) * sx;
                let bot = l(ix, iy + 1) * (1.0 - sx) + l(ix + 1, iy + 1) * sx;
                acc[y * w + x] += amp * (top * (1.0 - sy) + bot * sy);
            }
        }
        total += amp;
        amp *= 0.5;
        cell = (cell / 2.0).max(2.0);
    }
    for y in 0..h {
        for x in 0..w {
            for (ch, &k) in t.iter().enumerate() {
                cv.set(x, y, ch, k * acc[y * w + x] / total);
            }
        }
    }
    cv
}

/// A fixed set of 5×7 glyph bitmaps shared by every text image.
fn font() -> Vec<[u8; 7]> {
    let mut r = ChaCha8Rng::seed_from_u64(0x666f_6e74);
    (0..48)
        .map(|_| {
            let mut g = [0u8; 7];
            for row in &mut g {
                *row = r.gen_range(0..32u8);
            }
            g
        })
        .collect()
}

/// Lines of random glyphs. Returns ink coverage per pixel in `[0, 1]`.
fn text_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, scale: usize) -> Vec<f64> {
    let font = font();
    let mut m = vec![0.0; w * h];
    let (gw, gh) = (6 * scale, 9 * scale);
    let mut y0 = rng.gen_range(0..gh);
    while y0 + 7 * scale <= h {
        let mut x0 = rng.gen_range(0..gw);
        while x0 + 5 * scale <= w {
            if rng.gen_bool(0.15) {
                x0 += gw;
                continue;
            }
            let g = font[rng.gen_range(0..font.len())];
            for (gy, row) in g.iter().enumerate() {
                for gx in 0..5 {
                    if row >> (4 - gx) & 1 == 1 {
                        for dy in 0..scale {
                            for dx in 0..scale {
                                m[(y0 + gy * scale + dy) * w + x0 + gx * scale + dx] = 1.0;
                            }
                        }
                    }
                }
            }
            x0 += gw;
        }
        y0 += gh + rng.gen_range(0..scale * 3);
    }
    m
}

fn glyphs(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Canvas {
    let mut cv = Canvas::new(w, h, c);
    let scale = rng.gen_range(1..=2);
    let m = text_mask(rng, w, h, scale);
    let paper = rng.gen_range(0.75..0.95);
    let ink = rng.gen_range(0.05..0.3);
    let t = tint(rng, c);
    for y in 0..h {
        for x in 0..w {
            let v = paper + (ink - paper) * m[y * w + x];
            for (ch, &k) in t.iter().enumerate() {
                cv.set(x, y, ch, v * k);
            }
        }
    }
    cv
}

fn inverted_glyphs(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> Canvas {
    let mut cv = Canvas::new(w, h, c);
    let scale = rng.gen_range(2..=3);
    let m = text_mask(rng, w, h, scale);
    let ground = rng.gen_range(0.05..0.2);
    let ink = rng.gen_range(0.8..1.0);
    let dither = rng.gen_range(0.08..0.15);
    for y in 0..h {
        for x in 0..w {
            let checker = if (x + y) % 2 == 0 { dither } else { 0.0 };
            let v = if m[y * w + x] > 0.0 { ink } else { ground + checker };
            for ch in 0..c {
                cv.set(x, y, ch, v);
            }
        }
    }
    cv
}

/// One image of the given kind.
pub fn generate(kind: Kind, width: usize, height: usize, channels: usize, bits: u8, seed: u64) -> Result<ImageBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cv, noise) = match kind {
        Kind::Gradient => (gradient(&mut rng, width, height, channels), 0.01),
        Kind::Noise => (value_noise(&mut rng, width, height, channels), 0.005),
        Kind::Glyphs => (glyphs(&mut rng, width, height, channels), 0.01),
        Kind::InvertedGlyphs => (inverted_glyphs(&mut rng, width, height, channels), 0.0),
    };
    cv.quantize(bits, &mut rng, noise)
}

/// `count` training-style images cycling through the three kinds.
pub fn training_set(count: usize, size: usize, channels: usize, bits: u8, seed: u64) -> Result<Vec<ImageBuffer>> {
    (0..count)
        .map(|i| generate(Kind::TRAINING[i % 3], size, size, channels, bits, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect()
}

pub fn ood_set(count: usize, size: usize, channels: usize, bits: u8, seed: u64) -> Result<Vec<ImageBuffer>> {
    (0..count)
        .map(|i| generate(Kind::InvertedGlyphs, size, size, channels, bits, seed.wrapping_mul(7_919).wrapping_add(i as u64)))
        .collect()
}
