//! Fast self-checks of the codec's core properties on a built binary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::{AdapterConfig, AdapterSet};
use crate::codec::{decode, encode, EncodeOptions, ImageBuffer};
use crate::coder::{RangeDecoder, RangeEncoder};
use crate::csi::replay;
use crate::error::Result;
use crate::model::{forward, ModelConfig, ModelWeights};
use crate::prob::{escape_map, escape_unmap, CodingWindow, Mixture, PROB_TOTAL};
use crate::scan::{build_schedule, num_groups, ScanSpec};

use super::corpus::{generate, Kind};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: format!("error: {}", e) },
    }
}

fn scan_checks() -> Result<(bool, String)> {
    if num_groups(32, 2) != 94 {
        return Ok((false, format!("num_groups(32, 2) = {}", num_groups(32, 2))));
    }
    for p in 1..=12 {
        for d in 0..=4 {
            let s = build_schedule(ScanSpec::new(p, d)?);
            let mut seen = vec![0u8; p * p];
            for g in &s.groups {
                for &(r, c) in &g.pixels {
                    seen[r * p + c] += 1;
                }
            }
            if seen.iter().any(|&n| n != 1) {
                return Ok((false, format!("P={} δ={} is not a partition", p, d)));
            }
        }
    }
    Ok((true, "94 groups at P=32 δ=2; schedules partition the grid".into()))
}

fn coder_checks(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    for case in 0..300 {
        let n = rng.gen_range(2..300);
        let mut cum = vec![0u32];
        let weights: Vec<u32> = (0..n).map(|_| rng.gen_range(1..100)).collect();
        let total: u32 = weights.iter().sum();
        // Spread PROB_TOTAL proportionally, every symbol at least 1.
        let mut acc = 0u64;
        for (i, &w) in weights.iter().enumerate() {
            acc += w as u64;
            let v = (acc * (PROB_TOTAL - n as u32) as u64 / total as u64) as u32 + i as u32 + 1;
            cum.push(v);
        }
        let syms: Vec<usize> = (0..rng.gen_range(1..200)).map(|_| rng.gen_range(0..n)).collect();
        let mut enc = RangeEncoder::new();
        for &s in &syms {
            enc.encode(&cum, s);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes)?;
        for &s in &syms {
            if dec.decode(&cum)? != s {
                return Ok((false, format!("case {} decoded a different symbol", case)));
            }
        }
    }
    Ok((true, "300 random tables roundtrip".into()))
}

fn afc_checks(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let alphabet = ModelConfig::default().with_bit_depth(16).alphabet()?;
    let mut w = CodingWindow::default();
    for _ in 0..200 {
        let logits: Vec<f32> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let means: Vec<f32> = (0..3).map(|_| rng.gen_range(-1.2..1.2)).collect();
        let scales: Vec<f32> = (0..3).map(|_| rng.gen_range(1e-4..0.5)).collect();
        w.rebuild(&Mixture::new(&logits, &means, &scales)?, 1024, &alphabet)?;
        let sum: u64 = w.freqs.iter().map(|&f| f as u64).sum();
        if sum != PROB_TOTAL as u64 || w.freqs.iter().any(|&f| f == 0) {
            return Ok((false, format!("window table sums to {}", sum)));
        }
    }
    for s in -2000i64..2000 {
        if (0..700).contains(&s) {
            continue;
        }
        if escape_unmap(escape_map(s, 700)?, 700) != s {
            return Ok((false, format!("escape map not invertible at {}", s)));
        }
    }
    Ok((true, "200 window tables sum to 2^16; escape map invertible".into()))
}

fn csi_checks() -> Result<(bool, String)> {
    let cfg = ModelConfig::tiny().with_channels_in(1);
    let w = ModelWeights::<f32>::init_with_scale(&cfg, 11, 0.3)?;
    let img = generate(Kind::Noise, 32, 32, 1, 8, 3)?;
    let px = img.to_padded(cfg.patch)?;
    let alphabet = cfg.alphabet()?;
    let (oracle, _) = forward(&w, &px.normalize::<f32>(&alphabet)?, false)?;
    let fast = replay(&w, alphabet, &px)?;
    let d = oracle.max_abs_diff(&fast);
    Ok((d <= 1e-4, format!("max |Δ| = {:.2e}", d)))
}

fn adapter_checks(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let cfg = ModelConfig::tiny().with_channels_in(1);
    let base = ModelWeights::<f32>::init(&cfg, 5)?;
    let zero = AdapterSet::zeros(&cfg, AdapterConfig::default())?;
    let merged = zero.merge(&base, &zero.params)?;
    if merged.hash() != base.hash() {
        return Ok((false, "zero adapters changed the weights".into()));
    }
    let mut set = AdapterSet::new(&cfg, AdapterConfig::default(), rng)?;
    set.snap();
    let back = AdapterSet::decode_payload(&set.encode_payload()?, &cfg)?;
    if back.params != set.params {
        return Ok((false, "adapter payload did not roundtrip".into()));
    }
    Ok((true, "zero adapters are the identity; payload roundtrips".into()))
}

fn codec_checks() -> Result<(bool, String)> {
    let mut n = 0;
    for (c, bits, w, h) in [(1, 8, 1, 1), (1, 8, 37, 21), (3, 8, 20, 17), (1, 12, 19, 33), (3, 16, 9, 9)] {
        let cfg = ModelConfig::tiny().with_channels_in(c);
        let weights = ModelWeights::<f32>::init_with_scale(&cfg, 7, 0.3)?;
        let img: ImageBuffer = generate(Kind::Glyphs, w, h, c, bits, n as u64)?;
        let e = encode(&img, &weights, &EncodeOptions::default())?;
        if decode(&e.bytes, &weights)? != img {
            return Ok((false, format!("{}x{}x{} {}-bit did not roundtrip", w, h, c, bits)));
        }
        n += 1;
    }
    Ok((true, format!("{} images roundtrip losslessly", n)))
}

/// Run every check; order is fixed.
pub fn run_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        check("scan", scan_checks),
        check("coder", || coder_checks(&mut rng)),
        check("afc", || afc_checks(&mut ChaCha8Rng::seed_from_u64(seed + 1))),
        check("csi", csi_checks),
        check("adapters", || adapter_checks(&mut ChaCha8Rng::seed_from_u64(seed + 2))),
        check("codec", codec_checks),
    ]
}
