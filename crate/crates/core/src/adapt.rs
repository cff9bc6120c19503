//! Low-rank weight increments for per-image fine-tuning.
//!
//! Linear sites get `ΔW = A·B`. Depthwise kernels get a CP sum of rank-1
//! kernel terms, `ΔW[m,0,i,j] = Σ_t A[m,t]·C[i,t]·D[j,t]` with
//! `t < r′ = min(r, k)`. All factors live in one flat parameter vector so
//! the optimizer, quantizer and rate model can treat them uniformly.
//!
//! Payload layout (little-endian): version u8, rank u8, step f32,
//! prior scale f32, site mask u8, then one range-coded stream holding
//! every quantized index in block order, site order ([`Site::ALL`]),
//! factor order (A, B or A, C, D), row-major.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::coder::{decode_expgolomb, EXPGOLOMB_MAX, encode_expgolomb, CdfTable, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights, Site};
use crate::numerics::{sigmoid, Tensor};
use crate::prob::{escape_map, escape_unmap, quantize_pmf, QuantScratch, PROB_TOTAL};

pub const PAYLOAD_VERSION: u8 = 1;
const MIN_PROB: f64 = 1.0 / PROB_TOTAL as f64;
/// Bounds the coded index window at a few thousand entries.
const MAX_SCALE_RATIO: f64 = 256.0;

/// Adapter hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Quantization step `w`.
    pub step: f64,
    /// Scale of the zero-mean logistic prior over parameter values.
    pub prior_scale: f64,
    pub sites: Vec<Site>,
    /// Half-width of the uniform init of first factors.
    pub init_scale: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { rank: 8, step: 0.05, prior_scale: 0.05, sites: Site::ALL.to_vec(), init_scale: 0.1 }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.rank > 255 {
            return Err(Error::Config(format!("adapter rank {} outside 1..=255", self.rank)));
        }
        if !(self.step > 0.0 && self.step.is_finite() && self.prior_scale > 0.0 && self.prior_scale.is_finite()) {
            return Err(Error::Config("quantization step and prior scale must be positive".into()));
        }
        if self.prior_scale / self.step > MAX_SCALE_RATIO {
            return Err(Error::Config(format!("prior scale {} too wide for step {}", self.prior_scale, self.step)));
        }
        Ok(())
    }

    fn site_mask(&self) -> u8 {
        Site::ALL
            .iter()
            .enumerate()
            .filter(|(_, s)| self.sites.contains(s))
            .fold(0, |m, (i, _)| m | (1 << i))
    }

    /// Half-width of the coded index window.
    pub fn index_window(&self) -> i64 {
        16.max((12.0 * self.prior_scale / self.step).ceil() as i64)
    }
}

/// Where one site's factors sit in the flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteLayout {
    pub block: usize,
    pub site: Site,
    /// Output rows `m`.
    pub rows: usize,
    /// Input width `n` for linear sites, kernel side `k` for depthwise.
    pub cols: usize,
    /// Number of rank-1 terms: `r`, or `r′` for depthwise sites.
    pub rank: usize,
    pub offset: usize,
}

impl SiteLayout {
    pub fn len(&self) -> usize {
        if self.site.is_depthwise() {
            self.rank * (self.rows + 2 * self.cols)
        } else {
            self.rank * (self.rows + self.cols)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lengths of the factors in payload order.
    fn factor_lens(&self) -> Vec<usize> {
        if self.site.is_depthwise() {
            vec![self.rows * self.rank, self.cols * self.rank, self.cols * self.rank]
        } else {
            vec![self.rows * self.rank, self.rank * self.cols]
        }
    }

    /// First-factor (randomly initialized) span.
    fn first_len(&self) -> usize {
        self.rows * self.rank
    }
}

/// Increment of one site computed from factor values (in f64, with a
/// fixed loop order so every machine merges identical weights).
pub fn delta_linear(a: &[f32], b: &[f32], m: usize, r: usize, n: usize) -> Result<Vec<f64>> {
    if r == 0 {
        return Err(Error::Config("adapter rank 0".into()));
    }
    if a.len() != m * r || b.len() != r * n {
        return Err(Error::shape("linear adapter factors"));
    }
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for t in 0..r {
            let av = a[i * r + t] as f64;
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(&b[t * n..(t + 1) * n]) {
                *o += av * bv as f64;
            }
        }
    }
    Ok(out)
}

/// `ΔW_dw[m,0,i,j] = Σ_t A[m,t]·C[i,t]·D[j,t]`.
pub fn delta_depthwise(a: &[f32], c: &[f32], d: &[f32], m: usize, k: usize, r: usize) -> Result<Vec<f64>> {
    if r == 0 {
        return Err(Error::Config("adapter rank 0".into()));
    }
    if a.len() != m * r || c.len() != k * r || d.len() != k * r {
        return Err(Error::shape("depthwise adapter factors"));
    }
    let mut kern = vec![0.0f64; r * k * k];
    for t in 0..r {
        for i in 0..k {
            for j in 0..k {
                kern[(t * k + i) * k + j] = c[i * r + t] as f64 * d[j * r + t] as f64;
            }
        }
    }
    let mut out = vec![0.0f64; m * k * k];
    for ch in 0..m {
        for t in 0..r {
            let av = a[ch * r + t] as f64;
            if av == 0.0 {
                continue;
            }
            for (o, &kv) in out[ch * k * k..(ch + 1) * k * k].iter_mut().zip(&kern[t * k * k..(t + 1) * k * k]) {
                *o += av * kv;
            }
        }
    }
    Ok(out)
}

/// `round(φ/w)·w`. Used with the straight-through convention: the caller
/// treats its gradient as the identity.
pub fn quantize_ste(values: &[f32], step: f64) -> Vec<f32> {
    values.iter().map(|&v| ((v as f64 / step).round() * step) as f32).collect()
}

pub fn quantize_indices(values: &[f32], step: f64) -> Vec<i64> {
    values.iter().map(|&v| (v as f64 / step).round() as i64).collect()
}

/// `φ + U(−w/2, w/2)`.
pub fn noise_sample(values: &[f32], step: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let h = step / 2.0;
    values.iter().map(|&v| (v as f64 + rng.gen_range(-h..h)) as f32).collect()
}

/// Prior probability of index `q`: the logistic mass of its bin, floored.
pub fn index_prob(q: i64, step: f64, prior_scale: f64) -> f64 {
    // Evaluate on the non-positive side, where the CDF difference does not
    // cancel.
    let q = -(q.abs()) as f64;
    let hi = sigmoid((q * step + step / 2.0) / prior_scale);
    let lo = sigmoid((q * step - step / 2.0) / prior_scale);
    (hi - lo).max(MIN_PROB)
}

/// Bits of the quantized indices under the discretized prior.
pub fn param_bits_exact(indices: &[i64], step: f64, prior_scale: f64) -> f64 {
    indices.iter().map(|&q| -index_prob(q, step, prior_scale).log2()).sum()
}

/// Differentiable rate of noisy parameters:
/// `−log2(λ(φ̃/s)·w/s)`, returned with its gradient.
pub fn param_bits_surrogate(noisy: &[f32], step: f64, prior_scale: f64) -> (f64, Vec<f32>) {
    let ln2 = std::f64::consts::LN_2;
    let base = -(step / prior_scale).log2();
    let mut total = 0.0;
    let grad = noisy
        .iter()
        .map(|&v| {
            let x = v as f64 / prior_scale;
            // −ln λ(x) = |x| + 2·ln(1 + e^−|x|)
            let ax = x.abs();
            total += (ax + 2.0 * (-ax).exp().ln_1p()) / ln2 + base;
            ((2.0 * sigmoid(x) - 1.0) / (prior_scale * ln2)) as f32
        })
        .collect();
    (total, grad)
}

/// Quantizable adapters for a whole model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub config: AdapterConfig,
    pub layout: Vec<SiteLayout>,
    pub params: Vec<f32>,
}

impl AdapterSet {
    /// Zero-increment adapters: first factors uniform, second factors zero.
    pub fn new(model: &ModelConfig, config: AdapterConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut set = Self::zeros(model, config)?;
        let s = set.config.init_scale;
        for l in &set.layout {
            if l.site.is_depthwise() {
                // A and C random, D zero.
                let end = l.offset + l.rank * (l.rows + l.cols);
                for v in &mut set.params[l.offset..end] {
                    *v = rng.gen_range(-s..s) as f32;
                }
            } else {
                for v in &mut set.params[l.offset..l.offset + l.first_len()] {
                    *v = rng.gen_range(-s..s) as f32;
                }
            }
        }
        Ok(set)
    }

    /// All-zero factors.
    pub fn zeros(model: &ModelConfig, mut config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        // The payload stores both as f32; use exactly those values.
        config.step = config.step as f32 as f64;
        config.prior_scale = config.prior_scale as f32 as f64;
        let mut layout = Vec::new();
        let mut offset = 0;
        for block in 0..model.depth {
            for site in Site::ALL {
                if !config.sites.contains(&site) {
                    continue;
                }
                let (rows, cols, rank) = match site {
                    Site::LcmDw => (model.channels, model.block_kernel, config.rank.min(model.block_kernel)),
                    Site::SpmDw => (model.channels, model.spm_kernel, config.rank.min(model.spm_kernel)),
                    Site::MlpUp => (model.hidden(), model.channels, config.rank),
                    _ => (model.channels, model.channels, config.rank),
                };
                let l = SiteLayout { block, site, rows, cols, rank, offset };
                offset += l.len();
                layout.push(l);
            }
        }
        Ok(AdapterSet { config, layout, params: vec![0.0; offset] })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn quantized(&self) -> Vec<f32> {
        quantize_ste(&self.params, self.config.step)
    }

    pub fn indices(&self) -> Vec<i64> {
        quantize_indices(&self.params, self.config.step)
    }

    /// Replace the parameters by their quantized values.
    pub fn snap(&mut self) {
        self.params = self.quantized();
    }

    pub fn exact_bits(&self) -> f64 {
        param_bits_exact(&self.indices(), self.config.step, self.config.prior_scale)
    }

    fn site_delta(&self, l: &SiteLayout, values: &[f32]) -> Result<Vec<f64>> {
        let v = &values[l.offset..l.offset + l.len()];
        let lens = l.factor_lens();
        let (a, rest) = v.split_at(lens[0]);
        if l.site.is_depthwise() {
            let (c, d) = rest.split_at(lens[1]);
            delta_depthwise(a, c, d, l.rows, l.cols, l.rank)
        } else {
            delta_linear(a, rest, l.rows, l.rank, l.cols)
        }
    }

    /// `θ + Δ(values)` for every adapted site. `values` is a vector laid out
    /// like `params` (usually the quantized one).
    pub fn merge(&self, base: &ModelWeights<f32>, values: &[f32]) -> Result<ModelWeights<f32>> {
        if values.len() != self.params.len() {
            return Err(Error::shape("adapter values"));
        }
        if base.blocks.len() < self.layout.iter().map(|l| l.block + 1).max().unwrap_or(0) {
            return Err(Error::shape("adapters address more blocks than the model has"));
        }
        let mut out = base.clone();
        for l in &self.layout {
            let delta = self.site_delta(l, values)?;
            let t = out.site_mut(l.block, l.site);
            if t.len() != delta.len() {
                return Err(Error::shape(format!("adapter for {} does not fit the model", l.site.name())));
            }
            for (w, d) in t.data_mut().iter_mut().zip(delta) {
                *w = (*w as f64 + d) as f32;
            }
        }
        Ok(out)
    }

    /// Gradient with respect to the factors given gradients of the merged
    /// weights, evaluated at factor values `values`.
    pub fn factor_grads(&self, values: &[f32], weight_grads: &ModelWeights<f32>) -> Vec<f32> {
        let mut g = vec![0.0f32; self.params.len()];
        for l in &self.layout {
            let dw = weight_grads.site(l.block, l.site).data();
            let v = &values[l.offset..l.offset + l.len()];
            let out = &mut g[l.offset..l.offset + l.len()];
            let (m, n, r) = (l.rows, l.cols, l.rank);
            if l.site.is_depthwise() {
                let k = n;
                let (a, rest) = v.split_at(m * r);
                let (c, d) = rest.split_at(k * r);
                let (ga, rest) = out.split_at_mut(m * r);
                let (gc, gd) = rest.split_at_mut(k * r);
                for ch in 0..m {
                    for i in 0..k {
                        for j in 0..k {
                            let gw = dw[(ch * k + i) * k + j];
                            if gw == 0.0 {
                                continue;
                            }
                            for t in 0..r {
                                let (av, cv, dv) = (a[ch * r + t], c[i * r + t], d[j * r + t]);
                                ga[ch * r + t] += gw * cv * dv;
                                gc[i * r + t] += gw * av * dv;
                                gd[j * r + t] += gw * av * cv;
                            }
                        }
                    }
                }
            } else {
                let (a, b) = v.split_at(m * r);
                let (ga, gb) = out.split_at_mut(m * r);
                // dA = dW·Bᵀ, dB = Aᵀ·dW
                for i in 0..m {
                    let row = &dw[i * n..(i + 1) * n];
                    for t in 0..r {
                        let brow = &b[t * n..(t + 1) * n];
                        ga[i * r + t] += row.iter().zip(brow).map(|(x, y)| x * y).sum::<f32>();
                        let av = a[i * r + t];
                        for (o, &x) in gb[t * n..(t + 1) * n].iter_mut().zip(row) {
                            *o += av * x;
                        }
                    }
                }
            }
        }
        g
    }

    /// Serialize the quantized adapters.
    pub fn encode_payload(&self) -> Result<Vec<u8>> {
        let cfg = &self.config;
        let mut out = vec![PAYLOAD_VERSION, cfg.rank as u8];
        out.extend_from_slice(&(cfg.step as f32).to_le_bytes());
        out.extend_from_slice(&(cfg.prior_scale as f32).to_le_bytes());
        out.push(cfg.site_mask());
        let table = index_table(cfg.step, cfg.prior_scale, cfg.index_window())?;
        let q = cfg.index_window();
        let sentinel = (2 * q + 1) as usize;
        let mut enc = RangeEncoder::new();
        for idx in quantize_indices(&self.params, cfg.step) {
            let s = idx + q;
            if (0..=2 * q).contains(&s) {
                enc.encode_symbol(&table, s as usize)?;
            } else {
                let res = escape_map(s, 2 * q + 1)?;
                if res > EXPGOLOMB_MAX {
                    return Err(Error::Config(format!("adapter index {} cannot be coded", idx)));
                }
                enc.encode_symbol(&table, sentinel)?;
                encode_expgolomb(&mut enc, res);
            }
        }
        out.extend(enc.finish());
        Ok(out)
    }

    /// Inverse of [`AdapterSet::encode_payload`]; `params` hold the
    /// quantized values.
    pub fn decode_payload(bytes: &[u8], model: &ModelConfig) -> Result<Self> {
        if bytes.len() < 11 {
            return Err(Error::Truncated("adapter header".into()));
        }
        if bytes[0] != PAYLOAD_VERSION {
            return Err(Error::Version(bytes[0]));
        }
        let f = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as f64;
        let mask = bytes[10];
        if mask >> Site::ALL.len() != 0 {
            return Err(Error::Corrupt(format!("unknown adapter sites {mask:#x}")));
        }
        let config = AdapterConfig {
            rank: bytes[1] as usize,
            step: f(2),
            prior_scale: f(6),
            sites: Site::ALL.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &s)| s).collect(),
            ..AdapterConfig::default()
        };
        config.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        let mut set = Self::zeros(model, config)?;
        let q = set.config.index_window();
        let table = index_table(set.config.step, set.config.prior_scale, q)?;
        let sentinel = (2 * q + 1) as usize;
        let mut dec = RangeDecoder::new(&bytes[11..])?;
        let step = set.config.step;
        for v in set.params.iter_mut() {
            let sym = dec.decode_symbol(&table)?;
            let s = if sym == sentinel { escape_unmap(decode_expgolomb(&mut dec)?, 2 * q + 1) } else { sym as i64 };
            *v = ((s - q) as f64 * step) as f32;
        }
        Ok(set)
    }
}

/// Coding table over indices `−q..=q` plus the escape sentinel.
fn index_table(step: f64, prior_scale: f64, q: i64) -> Result<CdfTable> {
    let mut probs: Vec<f64> = (-q..=q).map(|i| index_prob(i, step, prior_scale)).collect();
    let inside: f64 = probs.iter().sum();
    probs.push((1.0 - inside).max(0.0));
    let mut freqs = Vec::new();
    quantize_pmf(&probs, &mut freqs, &mut QuantScratch::default());
    CdfTable::from_freqs(&freqs)
}

/// Dense views of the factors of one site, for inspection and tests.
pub fn site_factors(set: &AdapterSet, index: usize) -> Vec<Tensor<f32>> {
    let l = &set.layout[index];
    let mut off = l.offset;
    let shapes: Vec<Vec<usize>> = if l.site.is_depthwise() {
        vec![vec![l.rows, l.rank], vec![l.cols, l.rank], vec![l.cols, l.rank]]
    } else {
        vec![vec![l.rows, l.rank], vec![l.rank, l.cols]]
    };
    shapes
        .into_iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::from_vec(&s, set.params[off..off + n].to_vec()).expect("layout");
            off += n;
            t
        })
        .collect()
}
