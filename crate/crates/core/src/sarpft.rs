//! Rate-guided progressive fine-tuning of adapters on a single image.
//!
//! A per-patch rate map from one forward pass picks, at every step, the
//! rectangle of patches with the most bits at the current target area.
//! The area grows along a smoothstep curve until the whole image is used.
//! The objective is image bits (quantized adapters, straight-through)
//! plus parameter bits (noisy adapters), both per image subpixel.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::{noise_sample, param_bits_surrogate, AdapterSet};
use crate::error::{Error, Result};
use crate::model::{forward, loss_and_grad, nll, ModelWeights, PixelBatch};
use crate::numerics::{adam_step, AdamConfig, AdamState};
use crate::prob::Alphabet;

/// Area schedule `α_t = b + (1−b)·s(t′)^e`, `t′ = t / (T·(1−d))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub b: f64,
    pub d: f64,
    pub e: f64,
    pub steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule { b: 0.2, d: 0.1, e: 1.0, steps: 50 }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.b) || !(0.0..1.0).contains(&self.d) || self.e.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!("bad schedule b={} d={} e={}", self.b, self.d, self.e)));
        }
        Ok(())
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

pub fn schedule_alpha(t: f64, s: &Schedule) -> f64 {
    let tp = t / (s.steps as f64 * (1.0 - s.d));
    (s.b + (1.0 - s.b) * smoothstep(tp).powf(s.e)).min(1.0)
}

/// Bits per patch, `G_h × G_w`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RateMap {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<f64>,
}

impl RateMap {
    pub fn total(&self) -> f64 {
        self.bits.iter().sum()
    }

    /// Aggregate `[H, W]` pixel bits (padded frame) into patches.
    pub fn from_pixel_bits(pixel_bits: &[f64], height: usize, width: usize, patch: usize) -> Result<Self> {
        if height % patch != 0 || width % patch != 0 || pixel_bits.len() < height * width {
            return Err(Error::shape("rate map needs a patch-padded frame"));
        }
        let (rows, cols) = (height / patch, width / patch);
        let mut bits = vec![0.0; rows * cols];
        for y in 0..height {
            for x in 0..width {
                bits[(y / patch) * cols + x / patch] += pixel_bits[y * width + x];
            }
        }
        Ok(RateMap { rows, cols, bits })
    }
}

/// Summed-area table with one row and column of leading zeros.
#[derive(Clone, Debug)]
pub struct IntegralImage {
    pub rows: usize,
    pub cols: usize,
    sums: Vec<f64>,
}

impl IntegralImage {
    pub fn new(map: &RateMap) -> Self {
        let (r, c) = (map.rows, map.cols);
        let mut sums = vec![0.0; (r + 1) * (c + 1)];
        for i in 0..r {
            let mut row = 0.0;
            for j in 0..c {
                row += map.bits[i * c + j];
                sums[(i + 1) * (c + 1) + j + 1] = sums[i * (c + 1) + j + 1] + row;
            }
        }
        IntegralImage { rows: r, cols: c, sums }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.sums[i * (self.cols + 1) + j]
    }

    /// Sum over rows `r1..r2`, columns `c1..c2` (half-open).
    #[inline]
    pub fn rect_sum(&self, r1: usize, c1: usize, r2: usize, c2: usize) -> f64 {
        self.at(r2, c2) - self.at(r1, c2) - self.at(r2, c1) + self.at(r1, c1)
    }
}

/// Top-left patch of the `h × w` rectangle with the largest sum; ties go to
/// the smallest row, then column. Sizes are clamped to the grid.
pub fn find_region(ii: &IntegralImage, h: usize, w: usize) -> (usize, usize) {
    let h = h.clamp(1, ii.rows.max(1));
    let w = w.clamp(1, ii.cols.max(1));
    let mut best = (0, 0);
    let mut best_sum = f64::NEG_INFINITY;
    for i in 0..=ii.rows.saturating_sub(h) {
        for j in 0..=ii.cols.saturating_sub(w) {
            let s = ii.rect_sum(i, j, i + h, j + w);
            if s > best_sum {
                best_sum = s;
                best = (i, j);
            }
        }
    }
    best
}

/// Rectangle of about `α·G_h·G_w` patches with the grid's aspect ratio.
pub fn target_shape(alpha: f64, rows: usize, cols: usize) -> (usize, usize) {
    let n = alpha * (rows * cols) as f64;
    let h = ((n * rows as f64 / cols as f64).sqrt().round() as usize).clamp(1, rows);
    let w = ((n / h as f64).round() as usize).clamp(1, cols);
    (h, w)
}

/// How each step's training region is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Highest-rate rectangle at the scheduled area.
    RateGuided,
    /// Uniformly placed rectangle at the scheduled area.
    Random,
    /// The whole image every step.
    FullImage,
}

#[derive(Clone, Debug)]
pub struct FtOptions {
    pub schedule: Schedule,
    pub lr: f64,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for FtOptions {
    fn default() -> Self {
        FtOptions { schedule: Schedule::default(), lr: 1e-2, strategy: Strategy::RateGuided, seed: 0 }
    }
}

/// Patch rectangle `(row, col, height, width)`.
pub type Region = (usize, usize, usize, usize);

#[derive(Clone, Debug)]
pub struct StepLog {
    pub step: usize,
    pub region: Region,
    /// Objective in bits per subpixel (surrogate parameter rate).
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct FtOutcome {
    pub adapters: AdapterSet,
    pub log: Vec<StepLog>,
    /// Image bits of the base model.
    pub base_bits: f64,
    /// Image bits with the quantized adapters merged.
    pub image_bits: f64,
    /// Exact parameter bits of the quantized adapters.
    pub param_bits: f64,
    pub elapsed: Duration,
}

impl FtOutcome {
    pub fn total_bits(&self) -> f64 {
        self.image_bits + self.param_bits
    }
}

/// Per-pixel bits of a single image under `weights`.
pub fn image_bits(weights: &ModelWeights<f32>, pixels: &PixelBatch, alphabet: &Alphabet) -> Result<(f64, Vec<f64>)> {
    let input = pixels.normalize::<f32>(alphabet)?;
    let (head, _) = forward(weights, &input, false)?;
    let n = nll(&head, pixels, &weights.config, alphabet, None)?;
    Ok((n.bits, n.pixel_bits))
}

pub fn rate_map(weights: &ModelWeights<f32>, pixels: &PixelBatch, alphabet: &Alphabet) -> Result<RateMap> {
    if pixels.batch != 1 {
        return Err(Error::shape("rate map takes one image"));
    }
    let (_, pb) = image_bits(weights, pixels, alphabet)?;
    RateMap::from_pixel_bits(&pb, pixels.height, pixels.width, weights.config.patch)
}

/// Patches `region` of a single padded image, keeping the real extent.
pub fn crop_patches(pixels: &PixelBatch, patch: usize, region: Region) -> Result<PixelBatch> {
    let (i, j, h, w) = region;
    let (y0, x0, hh, ww) = (i * patch, j * patch, h * patch, w * patch);
    if y0 + hh > pixels.height || x0 + ww > pixels.width {
        return Err(Error::shape("region outside the image"));
    }
    let c = pixels.channels;
    let mut data = Vec::with_capacity(hh * ww * c);
    for y in y0..y0 + hh {
        let s = (y * pixels.width + x0) * c;
        data.extend_from_slice(&pixels.data[s..s + ww * c]);
    }
    let (rh, rw) = pixels.real[0];
    let real = (rh.saturating_sub(y0).min(hh), rw.saturating_sub(x0).min(ww));
    PixelBatch::new(1, hh, ww, c, data, vec![real])
}

/// Fine-tune `adapters` on one patch-padded image with the base weights
/// frozen.
pub fn sarpft_run(
    base: &ModelWeights<f32>,
    pixels: &PixelBatch,
    alphabet: &Alphabet,
    mut adapters: AdapterSet,
    opts: &FtOptions,
) -> Result<FtOutcome> {
    opts.schedule.validate()?;
    let start = Instant::now();
    let p = base.config.patch;
    let n_total = pixels.real_samples().max(1) as f64;
    let init = adapters.merge(base, &adapters.quantized())?;
    let (base_bits, pb) = image_bits(&init, pixels, alphabet)?;
    let map = RateMap::from_pixel_bits(&pb, pixels.height, pixels.width, p)?;
    let ii = IntegralImage::new(&map);
    let (gh, gw) = (map.rows, map.cols);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = AdamState::new(adapters.len());
    let cfg = AdamConfig::with_lr(opts.lr);
    let (w, s) = (adapters.config.step, adapters.config.prior_scale);
    let mut log = Vec::with_capacity(opts.schedule.steps);
    for t in 1..=opts.schedule.steps {
        let region = match opts.strategy {
            Strategy::FullImage => (0, 0, gh, gw),
            strat => {
                let (h, wd) = target_shape(schedule_alpha(t as f64, &opts.schedule), gh, gw);
                let (i, j) = if strat == Strategy::RateGuided {
                    find_region(&ii, h, wd)
                } else {
                    (rng.gen_range(0..=gh - h), rng.gen_range(0..=gw - wd))
                };
                (i, j, h, wd)
            }
        };
        let crop = if region == (0, 0, gh, gw) { pixels.clone() } else { crop_patches(pixels, p, region)? };
        let q = adapters.quantized();
        let merged = adapters.merge(base, &q)?;
        let (img_bits, wgrad) = loss_and_grad(&merged, &crop, alphabet, 1.0 / n_total)?;
        let mut grad = adapters.factor_grads(&q, &wgrad);
        let noisy = noise_sample(&adapters.params, w, &mut rng);
        let (rate, rgrad) = param_bits_surrogate(&noisy, w, s);
        for (g, r) in grad.iter_mut().zip(&rgrad) {
            *g += *r / n_total as f32;
        }
        let loss = (img_bits + rate) / n_total;
        if !loss.is_finite() {
            return Err(Error::Diverged { step: t, loss });
        }
        adam_step(&mut adapters.params, &grad, &mut adam, &cfg)?;
        log.push(StepLog { step: t, region, loss });
    }
    let merged = adapters.merge(base, &adapters.quantized())?;
    let (image_bits, _) = image_bits(&merged, pixels, alphabet)?;
    let param_bits = adapters.exact_bits();
    Ok(FtOutcome { adapters, log, base_bits, image_bits, param_bits, elapsed: start.elapsed() })
}
