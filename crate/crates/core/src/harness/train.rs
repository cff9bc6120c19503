//! Desk-scale pre-training with Adam and a warmed-up cosine schedule.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::ImageBuffer;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, ModelConfig, ModelWeights, PixelBatch};
use crate::numerics::{adam_step, AdamConfig, AdamState};
use crate::sarpft::image_bits;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    /// Linear warmup, then cosine decay to zero.
    Cosine,
    /// Linear warmup, then flat.
    Constant,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Square crop side; a multiple of the patch size.
    pub crop: usize,
    pub peak_lr: f64,
    /// Capped at a quarter of `steps`.
    pub warmup: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 2000, batch: 8, crop: 64, peak_lr: 1e-3, warmup: 500, schedule: LrSchedule::Cosine, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch == 0 || self.crop == 0 || self.crop % model.patch != 0 {
            return Err(Error::Config(format!(
                "batch must be positive and crop {} a multiple of patch {}",
                self.crop, model.patch
            )));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config("peak learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn effective_warmup(&self) -> usize {
        self.warmup.min(self.steps / 4)
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.effective_warmup();
        if step < warm {
            return self.peak_lr * (step + 1) as f64 / warm as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.peak_lr,
            LrSchedule::Cosine => {
                let span = (self.steps - warm).max(1) as f64;
                let t = ((step - warm) as f64 / span).min(1.0);
                0.5 * self.peak_lr * (1.0 + (PI * t).cos())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepInfo {
    pub step: usize,
    pub lr: f64,
    /// Batch loss in bits per subpixel.
    pub bpsp: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub weights: ModelWeights<f32>,
    pub log: Vec<StepInfo>,
    pub initial_heldout: f64,
    pub final_heldout: f64,
    pub elapsed: Duration,
}

/// Bits per subpixel of `images` under `weights`, from the likelihood.
pub fn heldout_bpsp(weights: &ModelWeights<f32>, images: &[ImageBuffer]) -> Result<f64> {
    let cfg = &weights.config;
    let per: Vec<(f64, usize)> = images
        .par_iter()
        .map(|img| {
            let alphabet = cfg.clone().with_bit_depth(img.bit_depth).alphabet()?;
            let (bits, _) = image_bits(weights, &img.to_padded(cfg.patch)?, &alphabet)?;
            Ok((bits, img.samples()))
        })
        .collect::<Result<_>>()?;
    let (bits, n) = per.iter().fold((0.0, 0), |(b, n), &(bi, ni)| (b + bi, n + ni));
    Ok(bits / n.max(1) as f64)
}

/// A `crop × crop` window at a random spot, zero-padded where the image
/// is smaller.
fn random_crop(img: &ImageBuffer, crop: usize, rng: &mut ChaCha8Rng) -> (Vec<u32>, (usize, usize)) {
    let c = img.channels;
    let y0 = rng.gen_range(0..=img.height.saturating_sub(crop));
    let x0 = rng.gen_range(0..=img.width.saturating_sub(crop));
    let (rh, rw) = (crop.min(img.height), crop.min(img.width));
    let mut data = vec![0u32; crop * crop * c];
    for y in 0..rh {
        let src = ((y0 + y) * img.width + x0) * c;
        for (d, &s) in data[y * crop * c..].iter_mut().zip(&img.data[src..src + rw * c]) {
            *d = s as u32;
        }
    }
    (data, (rh, rw))
}

fn add_into(acc: &mut ModelWeights<f32>, g: &ModelWeights<f32>) {
    for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += *y;
        }
    }
}

/// Train from a seeded initialization. `on_step` sees every step.
pub fn train(
    model: &ModelConfig,
    corpus: &[ImageBuffer],
    heldout: &[ImageBuffer],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepInfo),
) -> Result<TrainReport> {
    model.validate()?;
    cfg.validate(model)?;
    if corpus.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    if let Some(img) = corpus.iter().find(|i| i.channels != model.channels_in || i.bit_depth != model.bit_depth) {
        return Err(Error::Config(format!(
            "corpus image is {}-channel {}-bit, model expects {}-channel {}-bit",
            img.channels, img.bit_depth, model.channels_in, model.bit_depth
        )));
    }
    let start = Instant::now();
    let mut weights = ModelWeights::<f32>::init(model, cfg.seed)?;
    let alphabet = model.alphabet()?;
    let initial_heldout = if heldout.is_empty() { f64::NAN } else { heldout_bpsp(&weights, heldout)? };
    let mut states: Vec<AdamState> = weights.tensors().iter().map(|t| AdamState::new(t.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_6e64);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        // Crops are drawn sequentially so the stream does not depend on
        // the thread count.
        let items: Vec<PixelBatch> = (0..cfg.batch)
            .map(|_| {
                let img = &corpus[rng.gen_range(0..corpus.len())];
                let (data, real) = random_crop(img, cfg.crop, &mut rng);
                PixelBatch::new(1, cfg.crop, cfg.crop, img.channels, data, vec![real])
            })
            .collect::<Result<_>>()?;
        let total: usize = items.iter().map(|p| p.real_samples()).sum();
        let scale = 1.0 / total.max(1) as f64;
        let parts: Vec<(f64, ModelWeights<f32>)> =
            items.par_iter().map(|p| loss_and_grad(&weights, p, &alphabet, scale)).collect::<Result<_>>()?;
        let mut bits = 0.0;
        let mut grads: Option<ModelWeights<f32>> = None;
        for (b, g) in parts {
            bits += b;
            match grads.as_mut() {
                Some(acc) => add_into(acc, &g),
                None => grads = Some(g),
            }
        }
        let bpsp = bits * scale;
        if !bpsp.is_finite() {
            return Err(Error::Diverged { step, loss: bpsp });
        }
        let lr = cfg.lr_at(step);
        let adam = AdamConfig::with_lr(lr);
        let grads = grads.expect("batch is non-empty");
        for ((p, g), st) in weights.tensors_mut().into_iter().zip(grads.tensors()).zip(&mut states) {
            adam_step(p.data_mut(), g.data(), st, &adam)?;
        }
        let info = StepInfo { step, lr, bpsp };
        on_step(&info);
        log.push(info);
    }
    weights.check_finite()?;
    let final_heldout = if heldout.is_empty() { f64::NAN } else { heldout_bpsp(&weights, heldout)? };
    Ok(TrainReport { weights, log, initial_heldout, final_heldout, elapsed: start.elapsed() })
}
