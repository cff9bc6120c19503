//! Whole-image encode and decode.
//!
//! Stream layout: a fixed [`Header`], the adapter payload (when present),
//! then one range-coded image stream. Samples are coded in ascending
//! group order, patch raster order within a group, the group's pixels in
//! scan order, and channels last. Padded pixels are never coded.

mod container;
mod image;

pub use container::{Header, FLAG_ADAPTERS, FLAG_FAST, HEADER_LEN, MAGIC, VERSION};
pub use image::{decode_pnm, encode_pnm, load_image, load_raw, save_image, save_raw, ImageBuffer};

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapt::{AdapterConfig, AdapterSet};
use crate::coder::{decode_expgolomb, encode_expgolomb, RangeDecoder, RangeEncoder};
use crate::csi::CsiEngine;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::prob::{escape_map, escape_unmap, scale_from_raw, Alphabet, CodingWindow, Mixture, MAX_WINDOW};
use crate::sarpft::{sarpft_run, FtOptions};

/// Default nominal coding window.
pub const DEFAULT_RANGE: usize = 1024;
/// Decoder refuses frames larger than this many pixels.
pub const MAX_PIXELS: u64 = 1 << 26;

#[derive(Clone, Debug)]
pub struct FineTune {
    pub adapters: AdapterConfig,
    pub options: FtOptions,
    /// Keep the adapters even when they do not pay for themselves.
    pub keep_if_worse: bool,
}

impl Default for FineTune {
    fn default() -> Self {
        FineTune { adapters: AdapterConfig::default(), options: FtOptions::default(), keep_if_worse: false }
    }
}

#[derive(Clone, Debug)]
pub struct EncodeOptions {
    pub range: usize,
    pub fine_tune: Option<FineTune>,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions { range: DEFAULT_RANGE, fine_tune: None }
    }
}

/// What happened during fine-tuning.
#[derive(Clone, Debug)]
pub struct FtSummary {
    pub base_bits: f64,
    pub image_bits: f64,
    pub param_bits: f64,
    pub payload_bytes: usize,
    pub kept: bool,
    pub elapsed: Duration,
}

#[derive(Clone, Debug, Default)]
pub struct EncodeStats {
    pub header_bytes: usize,
    pub adapter_bytes: usize,
    pub image_bytes: usize,
    pub samples: usize,
    pub escapes: usize,
    /// Largest coding table buffer held at any time, in entries.
    pub peak_table: usize,
    pub fine_tune: Option<FtSummary>,
}

impl EncodeStats {
    pub fn total_bytes(&self) -> usize {
        self.header_bytes + self.adapter_bytes + self.image_bytes
    }

    /// Whole stream in bits per subpixel.
    pub fn bpsp(&self) -> f64 {
        self.total_bytes() as f64 * 8.0 / self.samples.max(1) as f64
    }

    /// Adapter and image payload bits per subpixel.
    pub fn payload_bpsp(&self) -> f64 {
        (self.adapter_bytes + self.image_bytes) as f64 * 8.0 / self.samples.max(1) as f64
    }
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub stats: EncodeStats,
}

fn is_fast(cfg: &ModelConfig) -> bool {
    let f = ModelConfig::fast();
    (cfg.depth, cfg.channels, cfg.mixtures, cfg.patch, cfg.delta) == (f.depth, f.channels, f.mixtures, f.patch, f.delta)
}

fn check_range(range: usize, alphabet: &Alphabet) -> Result<()> {
    if range < 2 || range > u16::MAX as usize {
        return Err(Error::Config(format!("window size {} outside 2..=65535", range)));
    }
    if range < alphabet.size() as usize && range > MAX_WINDOW {
        return Err(Error::Config(format!("window size {} above {}", range, MAX_WINDOW)));
    }
    Ok(())
}

/// Per-sample window construction with reused buffers.
struct SampleModel {
    k: usize,
    range: usize,
    alphabet: Alphabet,
    scales: Vec<f32>,
    window: CodingWindow,
    peak: usize,
}

impl SampleModel {
    fn new(k: usize, range: usize, alphabet: Alphabet) -> Self {
        SampleModel { k, range, alphabet, scales: vec![0.0; k], window: CodingWindow::default(), peak: 0 }
    }

    /// Window for channel `ch` of one head row.
    fn window(&mut self, row: &[f32], ch: usize) -> Result<&CodingWindow> {
        let k = self.k;
        let base = ch * 3 * k;
        for (s, &r) in self.scales.iter_mut().zip(&row[base + 2 * k..base + 3 * k]) {
            *s = scale_from_raw(r);
        }
        let m = Mixture::new(&row[base..base + k], &row[base + k..base + 2 * k], &self.scales)?;
        self.window.rebuild(&m, self.range, &self.alphabet)?;
        self.peak = self.peak.max(self.window.capacity());
        Ok(&self.window)
    }
}

/// Encode `img` with `weights`, optionally fine-tuning adapters first.
pub fn encode(img: &ImageBuffer, weights: &ModelWeights<f32>, opts: &EncodeOptions) -> Result<Encoded> {
    let cfg = &weights.config;
    if img.channels != cfg.channels_in {
        return Err(Error::Config(format!("model codes {} channels, image has {}", cfg.channels_in, img.channels)));
    }
    let alphabet = Alphabet::new(img.bit_depth, cfg.v_min as f64, cfg.v_max as f64)?;
    check_range(opts.range, &alphabet)?;
    let padded = img.to_padded(cfg.patch)?;

    let mut adapter_bytes = Vec::new();
    let mut summary = None;
    let mut merged = None;
    if let Some(ft) = &opts.fine_tune {
        let mut rng = ChaCha8Rng::seed_from_u64(ft.options.seed);
        let init = AdapterSet::new(cfg, ft.adapters.clone(), &mut rng)?;
        let out = sarpft_run(weights, &padded, &alphabet, init, &ft.options)?;
        let payload = out.adapters.encode_payload()?;
        let kept = ft.keep_if_worse || out.image_bits + ((payload.len() * 8) as f64) < out.base_bits;
        summary = Some(FtSummary {
            base_bits: out.base_bits,
            image_bits: out.image_bits,
            param_bits: out.param_bits,
            payload_bytes: payload.len(),
            kept,
            elapsed: out.elapsed,
        });
        if kept {
            merged = Some(out.adapters.merge(weights, &out.adapters.quantized())?);
            adapter_bytes = payload;
        }
    }
    let model = merged.as_ref().unwrap_or(weights);

    let mut enc = RangeEncoder::new();
    let mut sm = SampleModel::new(cfg.mixtures, opts.range, alphabet);
    let mut escapes = 0;
    let c = img.channels;
    let mut engine = CsiEngine::new(model, alphabet, img.height, img.width)?;
    let wp = engine.padded_size().1;
    let o = cfg.head_outputs();
    let mut samples = Vec::new();
    for step in 0..engine.steps() {
        let pred = engine.predict(step)?;
        samples.clear();
        for (i, &p) in engine.positions(step).iter().enumerate() {
            if !engine.is_real(p) {
                samples.extend(std::iter::repeat(0).take(c));
                continue;
            }
            let (y, x) = (p / wp, p % wp);
            let row = &pred.data()[i * o..(i + 1) * o];
            for ch in 0..c {
                let v = img.data[(y * img.width + x) * c + ch] as u32;
                let win = sm.window(row, ch)?;
                match win.local(v) {
                    Some(s) => enc.encode(&win.cum, s),
                    None => {
                        enc.encode(&win.cum, win.sentinel());
                        let r = escape_map(v as i64 - win.x_lo as i64, win.len() as i64)?;
                        encode_expgolomb(&mut enc, r);
                        escapes += 1;
                    }
                }
                samples.push(v);
            }
        }
        engine.commit(step, &samples)?;
    }
    let image_bytes = enc.finish();

    let mut flags = 0;
    if !adapter_bytes.is_empty() {
        flags |= FLAG_ADAPTERS;
    }
    if is_fast(cfg) {
        flags |= FLAG_FAST;
    }
    let header = Header {
        flags,
        width: img.width as u32,
        height: img.height as u32,
        channels: c as u8,
        bit_depth: img.bit_depth,
        patch: cfg.patch as u8,
        delta: cfg.delta as u8,
        mixtures: cfg.mixtures as u8,
        range: opts.range as u16,
        model_hash: weights.hash(),
        adapter_len: adapter_bytes.len() as u32,
    };
    let mut bytes = Vec::with_capacity(HEADER_LEN + adapter_bytes.len() + image_bytes.len());
    header.write(&mut bytes);
    bytes.extend_from_slice(&adapter_bytes);
    bytes.extend_from_slice(&image_bytes);
    let stats = EncodeStats {
        header_bytes: HEADER_LEN,
        adapter_bytes: adapter_bytes.len(),
        image_bytes: image_bytes.len(),
        samples: img.samples(),
        escapes,
        peak_table: sm.peak,
        fine_tune: summary,
    };
    Ok(Encoded { bytes, stats })
}

/// Reconstruct the image; `weights` must be the model the stream names.
pub fn decode(bytes: &[u8], weights: &ModelWeights<f32>) -> Result<ImageBuffer> {
    let (h, adapter_bytes, image_bytes) = Header::read(bytes)?;
    let cfg = &weights.config;
    let actual = weights.hash();
    if h.model_hash != actual {
        return Err(Error::HashMismatch { expected: h.model_hash, actual });
    }
    if (h.patch as usize, h.delta as usize, h.mixtures as usize) != (cfg.patch, cfg.delta, cfg.mixtures)
        || h.channels as usize != cfg.channels_in
        || (h.flags & FLAG_FAST != 0) != is_fast(cfg)
    {
        return Err(Error::Config("stream geometry does not match the model".into()));
    }
    let (width, height, c) = (h.width as usize, h.height as usize, h.channels as usize);
    if width == 0 || height == 0 || (width as u64) * (height as u64) > MAX_PIXELS {
        return Err(Error::Corrupt(format!("implausible size {}x{}", width, height)));
    }
    let alphabet = Alphabet::new(h.bit_depth, cfg.v_min as f64, cfg.v_max as f64)?;
    check_range(h.range as usize, &alphabet).map_err(|e| Error::Corrupt(e.to_string()))?;

    let merged = if h.has_adapters() {
        let set = AdapterSet::decode_payload(adapter_bytes, cfg)?;
        Some(set.merge(weights, &set.params)?)
    } else {
        None
    };
    let model = merged.as_ref().unwrap_or(weights);

    let mut dec = RangeDecoder::new(image_bytes)?;
    let mut sm = SampleModel::new(cfg.mixtures, h.range as usize, alphabet);
    let mut out = vec![0u16; width * height * c];
    let mut engine = CsiEngine::new(model, alphabet, height, width)?;
    let wp = engine.padded_size().1;
    let o = cfg.head_outputs();
    let top = alphabet.max_value() as i64;
    let mut samples = Vec::new();
    for step in 0..engine.steps() {
        let pred = engine.predict(step)?;
        samples.clear();
        for (i, &p) in engine.positions(step).iter().enumerate() {
            if !engine.is_real(p) {
                samples.extend(std::iter::repeat(0).take(c));
                continue;
            }
            let (y, x) = (p / wp, p % wp);
            let row = &pred.data()[i * o..(i + 1) * o];
            for ch in 0..c {
                let win = sm.window(row, ch)?;
                let sym = dec.decode(&win.cum)?;
                let v = if sym == win.sentinel() {
                    let s = escape_unmap(decode_expgolomb(&mut dec)?, win.len() as i64);
                    let v = win.x_lo as i64 + s;
                    if (0..win.len() as i64).contains(&s) || v < 0 || v > top {
                        return Err(Error::Corrupt(format!("escaped sample {} out of range", v)));
                    }
                    v as u32
                } else {
                    win.x_lo + sym as u32
                };
                out[(y * width + x) * c + ch] = v as u16;
                samples.push(v);
            }
        }
        engine.commit(step, &samples)?;
    }
    ImageBuffer::new(width, height, c, h.bit_depth, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PixelBatch;
    use crate::sarpft::{image_bits, Schedule};
    use rand::Rng;

    fn model(cfg: &ModelConfig, seed: u64) -> ModelWeights<f32> {
        ModelWeights::init_with_scale(cfg, seed, 0.3).unwrap()
    }

    fn smooth(w: usize, h: usize, c: usize, bits: u8, seed: u64) -> ImageBuffer {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let max = (1u32 << bits) - 1;
        let data = (0..h)
            .flat_map(|y| (0..w).flat_map(move |x| (0..c).map(move |ch| (x, y, ch))))
            .map(|(x, y, ch)| {
                let base = (x * 3 + y * 2 + ch * 17) as f64 / (w + h + 40) as f64;
                let v = base * max as f64 + r.gen_range(-2.0..2.0) * (max as f64 / 255.0);
                v.clamp(0.0, max as f64) as u16
            })
            .collect();
        ImageBuffer::new(w, h, c, bits, data).unwrap()
    }

    fn roundtrip(img: &ImageBuffer, w: &ModelWeights<f32>, opts: &EncodeOptions) -> Encoded {
        let e = encode(img, w, opts).unwrap();
        assert_eq!(&decode(&e.bytes, w).unwrap(), img);
        e
    }

    #[test]
    fn one_pixel_image() {
        let cfg = ModelConfig::tiny();
        let w = model(&cfg, 1);
        let img = ImageBuffer::new(1, 1, 3, 8, vec![12, 200, 77]).unwrap();
        let e = roundtrip(&img, &w, &EncodeOptions::default());
        assert_eq!(e.stats.adapter_bytes, 0);
        assert_eq!(e.bytes[5] & FLAG_ADAPTERS, 0);
    }

    #[test]
    fn high_bit_depth_with_outliers() {
        let cfg = ModelConfig::tiny().with_channels_in(1);
        let w = model(&cfg, 2);
        let mut img = smooth(97, 61, 1, 16, 3);
        for (i, v) in [0u16, 65535, 1, 65534, 30000].into_iter().enumerate() {
            img.data[i * 997 + 13] = v;
        }
        let e = roundtrip(&img, &w, &EncodeOptions::default());
        assert!(e.stats.escapes > 0);
        assert!(e.stats.peak_table <= 2 * DEFAULT_RANGE, "table held {} entries", e.stats.peak_table);
    }

    #[test]
    fn twelve_bit_rgb_fast_config() {
        let cfg = ModelConfig::fast();
        let w = ModelWeights::init(&cfg, 4).unwrap();
        let img = smooth(20, 35, 3, 12, 5);
        let e = roundtrip(&img, &w, &EncodeOptions { range: 256, ..EncodeOptions::default() });
        assert_eq!(e.bytes[5] & FLAG_FAST, FLAG_FAST);
    }

    #[test]
    fn payload_matches_likelihood_estimate() {
        let cfg = ModelConfig::tiny().with_channels_in(1);
        let w = model(&cfg, 6);
        let img = smooth(64, 48, 1, 8, 7);
        let e = roundtrip(&img, &w, &EncodeOptions::default());
        let px = img.to_padded(cfg.patch).unwrap();
        let (bits, _) = image_bits(&w, &px, &cfg.alphabet().unwrap()).unwrap();
        let coded = (e.stats.image_bytes * 8) as f64;
        assert!((coded - bits).abs() <= 0.01 * bits + 8.0 * HEADER_LEN as f64, "coded {coded}, model {bits}");
    }

    #[test]
    fn adapters_roundtrip() {
        let cfg = ModelConfig::tiny().with_channels_in(1);
        let w = model(&cfg, 8);
        let img = smooth(40, 33, 1, 8, 9);
        let ft = FineTune {
            options: FtOptions { schedule: Schedule { steps: 3, ..Schedule::default() }, ..FtOptions::default() },
            keep_if_worse: true,
            ..FineTune::default()
        };
        let opts = EncodeOptions { fine_tune: Some(ft), ..EncodeOptions::default() };
        let e = roundtrip(&img, &w, &opts);
        assert!(e.stats.adapter_bytes > 0);
        assert_eq!(e.bytes[5] & FLAG_ADAPTERS, FLAG_ADAPTERS);
        // Same seed, same stream.
        assert_eq!(encode(&img, &w, &opts).unwrap().bytes, e.bytes);
    }

    #[test]
    fn rejects_wrong_model_and_options() {
        let cfg = ModelConfig::tiny().with_channels_in(1);
        let w = model(&cfg, 10);
        let img = smooth(16, 16, 1, 8, 11);
        let e = encode(&img, &w, &EncodeOptions::default()).unwrap();
        let other = model(&cfg, 12);
        assert!(matches!(decode(&e.bytes, &other), Err(Error::HashMismatch { .. })));
        let rgb = smooth(4, 4, 3, 8, 1);
        assert!(encode(&rgb, &w, &EncodeOptions::default()).is_err());
        let hbd = smooth(4, 4, 1, 16, 1);
        assert!(encode(&hbd, &w, &EncodeOptions { range: 20000, ..EncodeOptions::default() }).is_err());
        assert!(encode(&img, &w, &EncodeOptions { range: 1, ..EncodeOptions::default() }).is_err());
    }

    #[test]
    fn corrupted_payload_never_panics() {
        let cfg = ModelConfig::tiny().with_channels_in(1);
        let w = model(&cfg, 13);
        let img = smooth(24, 20, 1, 8, 14);
        let e = encode(&img, &w, &EncodeOptions::default()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..40 {
            let mut b = e.bytes.clone();
            let i = r.gen_range(HEADER_LEN..b.len());
            b[i] ^= 1 << r.gen_range(0..8);
            if let Ok(back) = decode(&b, &w) {
                assert_eq!((back.width, back.height), (img.width, img.height));
            }
        }
        assert!(decode(&e.bytes[..HEADER_LEN + 2], &w).map(|d| d != img).unwrap_or(true));
    }

    #[test]
    fn padded_pixels_cost_nothing() {
        // A 17×17 image codes the same bits whether or not the model would
        // have been asked about the padding: compare against the estimate
        // over real pixels only.
        let cfg = ModelConfig::tiny().with_channels_in(1);
        let w = model(&cfg, 16);
        let img = smooth(17, 17, 1, 8, 17);
        let e = roundtrip(&img, &w, &EncodeOptions::default());
        let px: PixelBatch = img.to_padded(cfg.patch).unwrap();
        let (bits, per) = image_bits(&w, &px, &cfg.alphabet().unwrap()).unwrap();
        let padded: f64 = (0..px.height * px.width).filter(|&p| p / px.width >= 17 || p % px.width >= 17).map(|p| per[p]).sum();
        assert_eq!(padded, 0.0);
        assert!(((e.stats.image_bytes * 8) as f64 - bits).abs() <= 0.01 * bits + 64.0);
    }
}
