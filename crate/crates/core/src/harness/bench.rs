//! Ablation sweeps and fine-tuning benchmarks, reported as CSV.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapt::{AdapterConfig, AdapterSet};
use crate::codec::{decode, encode, EncodeOptions, ImageBuffer};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::sarpft::{image_bits, sarpft_run, FtOptions, Strategy};
use crate::scan::num_groups;

use super::train::{train, TrainConfig};

#[derive(Clone, Debug)]
pub struct SweepGrid {
    pub deltas: Vec<usize>,
    pub patches: Vec<usize>,
    pub ranges: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub patch: usize,
    pub delta: usize,
    pub range: usize,
    pub groups: usize,
    pub train_steps: usize,
    pub bpsp: f64,
    pub encode_ms: f64,
    pub decode_ms: f64,
}

pub const SWEEP_HEADER: &str = "patch,delta,range,groups,train_steps,bpsp,encode_ms,decode_ms";

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.5},{:.2},{:.2}",
            self.patch, self.delta, self.range, self.groups, self.train_steps, self.bpsp, self.encode_ms, self.decode_ms
        )
    }
}

/// Encode and decode every image, checking the roundtrip. Returns
/// `(bpsp, encode ms, decode ms)` over the whole set.
pub fn measure(weights: &ModelWeights<f32>, images: &[ImageBuffer], opts: &EncodeOptions) -> Result<(f64, f64, f64)> {
    let (mut bits, mut n, mut enc_ms, mut dec_ms) = (0.0, 0, 0.0, 0.0);
    for img in images {
        let t = Instant::now();
        let e = encode(img, weights, opts)?;
        enc_ms += t.elapsed().as_secs_f64() * 1e3;
        let t = Instant::now();
        let back = decode(&e.bytes, weights)?;
        dec_ms += t.elapsed().as_secs_f64() * 1e3;
        if &back != img {
            return Err(Error::Corrupt("sweep roundtrip mismatch".into()));
        }
        bits += (e.bytes.len() * 8) as f64;
        n += img.samples();
    }
    Ok((bits / n.max(1) as f64, enc_ms, dec_ms))
}

/// One row per grid point. Each `(patch, delta)` pair gets its own model,
/// trained for `train_cfg.steps` steps (zero keeps the seeded init).
pub fn sweep(
    base: &ModelConfig,
    grid: &SweepGrid,
    corpus: &[ImageBuffer],
    eval: &[ImageBuffer],
    train_cfg: &TrainConfig,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &patch in &grid.patches {
        for &delta in &grid.deltas {
            let cfg = ModelConfig { patch, delta, ..base.clone() };
            cfg.validate()?;
            let weights = if train_cfg.steps == 0 {
                ModelWeights::init(&cfg, train_cfg.seed)?
            } else {
                let tc = TrainConfig { crop: train_cfg.crop.div_ceil(patch) * patch, ..train_cfg.clone() };
                train(&cfg, corpus, &[], &tc, |_| {})?.weights
            };
            for &range in &grid.ranges {
                let (bpsp, encode_ms, decode_ms) = measure(&weights, eval, &EncodeOptions { range, fine_tune: None })?;
                let row = SweepRow {
                    patch,
                    delta,
                    range,
                    groups: num_groups(patch, delta),
                    train_steps: train_cfg.steps,
                    bpsp,
                    encode_ms,
                    decode_ms,
                };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct FtBenchRow {
    pub image: usize,
    pub strategy: Strategy,
    pub samples: usize,
    pub base_bits: f64,
    pub image_bits: f64,
    pub param_bits: f64,
    pub seconds: f64,
}

impl FtBenchRow {
    pub fn total_bits(&self) -> f64 {
        self.image_bits + self.param_bits
    }

    pub fn improved(&self) -> bool {
        self.total_bits() < self.base_bits
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{:.1},{:.1},{:.1},{:.1},{:.4},{:.4},{:.3}",
            self.image,
            strategy_name(self.strategy),
            self.samples,
            self.base_bits,
            self.image_bits,
            self.param_bits,
            self.total_bits(),
            self.base_bits / self.samples as f64,
            self.total_bits() / self.samples as f64,
            self.seconds
        )
    }
}

pub const FT_HEADER: &str = "image,strategy,samples,base_bits,image_bits,param_bits,total_bits,base_bpsp,total_bpsp,seconds";

pub fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::RateGuided => "rate-guided",
        Strategy::Random => "random",
        Strategy::FullImage => "full-image",
    }
}

pub fn parse_strategy(s: &str) -> Result<Strategy> {
    match s {
        "rate-guided" | "sarp" => Ok(Strategy::RateGuided),
        "random" => Ok(Strategy::Random),
        "full-image" | "full" => Ok(Strategy::FullImage),
        _ => Err(Error::Config(format!("unknown strategy {:?}", s))),
    }
}

/// Fine-tune every image under each strategy from the same adapter init.
pub fn finetune_bench(
    weights: &ModelWeights<f32>,
    images: &[ImageBuffer],
    adapters: &AdapterConfig,
    opts: &FtOptions,
    strategies: &[Strategy],
    mut on_row: impl FnMut(&FtBenchRow),
) -> Result<Vec<FtBenchRow>> {
    let cfg = &weights.config;
    let mut rows = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let alphabet = cfg.clone().with_bit_depth(img.bit_depth).alphabet()?;
        let px = img.to_padded(cfg.patch)?;
        let (base_bits, _) = image_bits(weights, &px, &alphabet)?;
        for &strategy in strategies {
            let init = AdapterSet::new(cfg, adapters.clone(), &mut ChaCha8Rng::seed_from_u64(opts.seed))?;
            let o = FtOptions { strategy, ..opts.clone() };
            let out = sarpft_run(weights, &px, &alphabet, init, &o)?;
            let row = FtBenchRow {
                image: i,
                strategy,
                samples: img.samples(),
                base_bits,
                image_bits: out.image_bits,
                param_bits: out.param_bits,
                seconds: out.elapsed.as_secs_f64(),
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_csv<'a>(mut out: impl Write, header: &str, lines: impl IntoIterator<Item = &'a str>) -> Result<()> {
    writeln!(out, "{}", header)?;
    for l in lines {
        writeln!(out, "{}", l)?;
    }
    Ok(())
}
