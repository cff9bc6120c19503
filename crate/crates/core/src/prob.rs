//! Discretized logistic mixtures and the truncated coding window.
//!
//! A pixel value `x ∈ [0, 2^b)` sits in a bin of width `2h` around its
//! normalized value `x̃`; the two extreme bins extend to ±∞ so the
//! alphabet mass sums to one. Coding never materialises a `2^b` table:
//! only the `R` values around the mixture centre get their own entry,
//! everything else goes through a sentinel and a bypass code.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus, Real};

/// Total of every quantized table.
pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
/// Lower bound on component scales, in normalized units.
pub const SCALE_FLOOR: f64 = 1e-3;
/// Largest supported window, so every entry can hold at least one unit.
pub const MAX_WINDOW: usize = 16384;

/// Mapping between integer samples and the model's normalized range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Alphabet {
    pub bits: u8,
    pub v_min: f64,
    pub v_max: f64,
}

impl Alphabet {
    pub fn new(bits: u8, v_min: f64, v_max: f64) -> Result<Self> {
        if bits == 0 || bits > 16 {
            return Err(Error::UnsupportedBitDepth(bits));
        }
        if !(v_max > v_min) || !v_min.is_finite() || !v_max.is_finite() {
            return Err(Error::Config(format!("normalized range [{}, {}]", v_min, v_max)));
        }
        Ok(Alphabet { bits, v_min, v_max })
    }

    pub fn size(&self) -> u32 {
        1u32 << self.bits
    }

    pub fn max_value(&self) -> u32 {
        self.size() - 1
    }

    /// Width of one bin in normalized units.
    pub fn bin_width(&self) -> f64 {
        (self.v_max - self.v_min) / self.size() as f64
    }

    pub fn half_bin(&self) -> f64 {
        0.5 * self.bin_width()
    }

    /// `x / 2^b · (v_max − v_min) + v_min`
    pub fn normalize(&self, x: u32) -> f64 {
        x as f64 * self.bin_width() + self.v_min
    }

    pub fn normalize_checked(&self, x: u32) -> Result<f64> {
        if x > self.max_value() {
            return Err(Error::PixelRange { value: x, bit_depth: self.bits });
        }
        Ok(self.normalize(x))
    }

    /// Inverse of [`normalize`](Self::normalize), unrounded.
    pub fn to_pixel(&self, v: f64) -> f64 {
        (v - self.v_min) / self.bin_width()
    }
}

/// `softplus(raw) + floor`
#[inline]
pub fn scale_from_raw<T: Real>(raw: T) -> T {
    softplus(raw) + T::lit(SCALE_FLOOR)
}

/// One pixel's mixture: `K` logits, means and (already floored) scales.
#[derive(Clone, Copy, Debug)]
pub struct Mixture<'a, T = f32> {
    pub logits: &'a [T],
    pub means: &'a [T],
    pub scales: &'a [T],
}

impl<'a, T: Real> Mixture<'a, T> {
    pub fn new(logits: &'a [T], means: &'a [T], scales: &'a [T]) -> Result<Self> {
        let k = logits.len();
        if k == 0 || means.len() != k || scales.len() != k {
            return Err(Error::shape(format!(
                "mixture with {} logits, {} means, {} scales",
                k,
                means.len(),
                scales.len()
            )));
        }
        Ok(Mixture { logits, means, scales })
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    /// Mixture weights in 64-bit.
    pub fn weights(&self) -> Vec<f64> {
        let m = self.logits.iter().map(|v| v.to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = self.logits.iter().map(|v| (v.to_f64().unwrap() - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }
}

/// Mixture CDF evaluated at a normalized edge.
#[inline]
fn cdf_at(pi: &[f64], mu: &[f64], inv_s: &[f64], edge: f64) -> f64 {
    let mut acc = 0.0;
    for k in 0..pi.len() {
        acc += pi[k] * sigmoid((edge - mu[k]) * inv_s[k]);
    }
    acc
}

struct Prepared {
    pi: Vec<f64>,
    mu: Vec<f64>,
    inv_s: Vec<f64>,
}

fn prepare<T: Real>(m: &Mixture<'_, T>) -> Prepared {
    Prepared {
        pi: m.weights(),
        mu: m.means.iter().map(|v| v.to_f64().unwrap()).collect(),
        inv_s: m.scales.iter().map(|v| 1.0 / v.to_f64().unwrap()).collect(),
    }
}

/// Probability of sample `x` under the discretized mixture, in 64-bit.
pub fn bin_prob<T: Real>(m: &Mixture<'_, T>, x: u32, alphabet: &Alphabet) -> f64 {
    let p = prepare(m);
    let h = alphabet.half_bin();
    let c = alphabet.normalize(x);
    let hi = if x >= alphabet.max_value() { 1.0 } else { cdf_at(&p.pi, &p.mu, &p.inv_s, c + h) };
    let lo = if x == 0 { 0.0 } else { cdf_at(&p.pi, &p.mu, &p.inv_s, c - h) };
    (hi - lo).max(0.0)
}

/// `Σ softmax(w)·μ`, mapped back to pixel units.
pub fn afc_center<T: Real>(m: &Mixture<'_, T>, alphabet: &Alphabet) -> f64 {
    let pi = m.weights();
    let c: f64 = pi.iter().zip(m.means).map(|(p, v)| p * v.to_f64().unwrap()).sum();
    alphabet.to_pixel(c)
}

/// Natural-log bin probability for one component, with derivatives with
/// respect to the mean and scale.
#[inline]
fn component_log_prob<T: Real>(x: u32, xn: T, h: T, mu: T, s: T, top: u32) -> (T, T, T) {
    let inv = T::one() / s;
    let u = (xn + h - mu) * inv;
    let l = (xn - h - mu) * inv;
    if top == 0 {
        return (T::zero(), T::zero(), T::zero());
    }
    if x == 0 {
        let sn = sigmoid(-u);
        (-softplus(-u), -inv * sn, -inv * u * sn)
    } else if x >= top {
        let sl = sigmoid(l);
        (-softplus(l), inv * sl, inv * l * sl)
    } else {
        let delta = (h + h) * inv;
        let su = sigmoid(-u);
        let sl = sigmoid(l);
        let lp = -softplus(-u) - softplus(l) + (-(-delta).exp_m1()).ln();
        let dmu = -inv * (su - sl);
        let ds = -inv * (u * su - l * sl + delta / delta.exp_m1());
        (lp, dmu, ds)
    }
}

/// Gradient buffers for [`mixture_log_prob`], each `K` long. Values are
/// accumulated (`+=`) scaled by `scale`.
pub struct MixtureGrad<'a, T> {
    pub scale: T,
    pub logits: &'a mut [T],
    pub means: &'a mut [T],
    pub raw_scales: &'a mut [T],
}

/// Natural-log probability of `x` given the head's raw outputs
/// (scales pass through [`scale_from_raw`]). Optionally accumulates
/// `scale · ∂ log P / ∂(logits, means, raw scales)`.
pub fn mixture_log_prob<T: Real>(
    logits: &[T],
    means: &[T],
    raw_scales: &[T],
    x: u32,
    alphabet: &Alphabet,
    grad: Option<MixtureGrad<'_, T>>,
) -> T {
    let k = logits.len();
    let xn = T::lit(alphabet.normalize(x));
    let h = T::lit(alphabet.half_bin());
    let top = alphabet.max_value();
    let lmax = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lz = lmax + logits.iter().map(|&w| (w - lmax).exp()).sum::<T>().ln();
    // Up to 16 components on the stack.
    let mut terms = [T::zero(); 16];
    let mut dmu = [T::zero(); 16];
    let mut ds = [T::zero(); 16];
    assert!(k <= 16, "at most 16 mixture components");
    let mut best = T::neg_infinity();
    for j in 0..k {
        let s = scale_from_raw(raw_scales[j]);
        let (lp, a, b) = component_log_prob(x, xn, h, means[j], s, top);
        terms[j] = logits[j] - lz + lp;
        dmu[j] = a;
        ds[j] = b;
        best = best.max(terms[j]);
    }
    let total = best + terms[..k].iter().map(|&t| (t - best).exp()).sum::<T>().ln();
    if let Some(g) = grad {
        for j in 0..k {
            let r = (terms[j] - total).exp();
            let pi = (logits[j] - lz).exp();
            g.logits[j] += g.scale * (r - pi);
            g.means[j] += g.scale * r * dmu[j];
            g.raw_scales[j] += g.scale * r * ds[j] * sigmoid(raw_scales[j]);
        }
    }
    total
}

/// Inclusive sample window `[x_lo, x_hi]` and its quantized table; entry
/// `len()` is the escape sentinel.
#[derive(Clone, Debug, Default)]
pub struct CodingWindow {
    pub x_lo: u32,
    pub x_hi: u32,
    /// Nominal window size the bounds were derived from.
    pub range: usize,
    /// Per-entry frequencies, sentinel last; sums to [`PROB_TOTAL`].
    pub freqs: Vec<u32>,
    /// `cum[i] = Σ freqs[..i]`, length `freqs.len() + 1`.
    pub cum: Vec<u32>,
    /// Model mass outside the window before quantization.
    pub escape_mass: f64,
    cdf: Vec<f64>,
    probs: Vec<f64>,
    scratch: QuantScratch,
}

impl CodingWindow {
    /// Number of in-window samples; also the sentinel's index.
    pub fn len(&self) -> usize {
        (self.x_hi - self.x_lo + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sentinel(&self) -> usize {
        self.len()
    }

    /// Local table index of `x`, or `None` if it needs the escape path.
    pub fn local(&self, x: u32) -> Option<usize> {
        (x >= self.x_lo && x <= self.x_hi).then(|| (x - self.x_lo) as usize)
    }

    /// Largest buffer capacity held, in entries.
    pub fn capacity(&self) -> usize {
        self.freqs.capacity().max(self.cum.capacity()).max(self.cdf.capacity()).max(self.probs.capacity())
    }

    /// Rebuild in place for a new mixture; buffers are reused.
    pub fn rebuild<T: Real>(&mut self, m: &Mixture<'_, T>, range: usize, alphabet: &Alphabet) -> Result<()> {
        if range < 2 {
            return Err(Error::Config(format!("window size {} below 2", range)));
        }
        let top = alphabet.max_value();
        let (lo, hi) = if range as u64 >= alphabet.size() as u64 {
            (0, top)
        } else {
            if range > MAX_WINDOW {
                return Err(Error::Config(format!("window size {} above {}", range, MAX_WINDOW)));
            }
            let mut c = afc_center(m, alphabet);
            if !c.is_finite() {
                c = alphabet.size() as f64 / 2.0;
            }
            let half = range as f64 / 2.0;
            let clampv = |v: f64| v.round().clamp(0.0, top as f64) as u32;
            (clampv(c - half), clampv(c + half))
        };
        self.x_lo = lo;
        self.x_hi = hi;
        self.range = range;
        let n = self.len();
        let p = prepare(m);
        let h = alphabet.half_bin();
        self.cdf.clear();
        for i in 0..=n {
            let x = lo as u64 + i as u64;
            let v = if x == 0 {
                0.0
            } else if x > top as u64 {
                1.0
            } else {
                cdf_at(&p.pi, &p.mu, &p.inv_s, alphabet.normalize(x as u32) - h)
            };
            self.cdf.push(v);
        }
        self.probs.clear();
        for i in 0..n {
            self.probs.push((self.cdf[i + 1] - self.cdf[i]).max(0.0));
        }
        let inside = (self.cdf[n] - self.cdf[0]).clamp(0.0, 1.0);
        self.escape_mass = (1.0 - inside).max(0.0);
        self.probs.push(self.escape_mass);
        quantize_pmf(&self.probs, &mut self.freqs, &mut self.scratch);
        self.cum.clear();
        self.cum.push(0);
        let mut acc = 0u32;
        for &f in &self.freqs {
            acc += f;
            self.cum.push(acc);
        }
        debug_assert_eq!(acc, PROB_TOTAL);
        Ok(())
    }
}

/// Construct a fresh window; see [`CodingWindow::rebuild`].
pub fn afc_window<T: Real>(m: &Mixture<'_, T>, range: usize, alphabet: &Alphabet) -> Result<CodingWindow> {
    let mut w = CodingWindow::default();
    w.rebuild(m, range, alphabet)?;
    Ok(w)
}

#[derive(Clone, Debug, Default)]
pub struct QuantScratch {
    rem: Vec<f64>,
    order: Vec<u32>,
}

/// Integer frequencies summing to exactly [`PROB_TOTAL`], every entry at
/// least one. The spare units are shared in proportion to `probs` by
/// largest remainder, ties going to the lower index.
pub fn quantize_pmf(probs: &[f64], freqs: &mut Vec<u32>, scratch: &mut QuantScratch) {
    let m = probs.len();
    assert!(m >= 1 && m as u32 <= PROB_TOTAL, "table length {} out of range", m);
    let free = (PROB_TOTAL - m as u32) as f64;
    let sum: f64 = probs.iter().filter(|p| p.is_finite() && **p > 0.0).sum();
    freqs.clear();
    scratch.rem.clear();
    let mut used: i64 = 0;
    for &p in probs {
        let share = if sum > 0.0 && p.is_finite() && p > 0.0 { p / sum * free } else if sum > 0.0 { 0.0 } else { free / m as f64 };
        let base = share.floor();
        freqs.push(1 + base as u32);
        scratch.rem.push(share - base);
        used += base as i64;
    }
    let mut left = free as i64 - used;
    while left < 0 {
        // Only reachable through rounding in the shares.
        let (i, _) = freqs.iter().enumerate().max_by_key(|(i, &f)| (f, std::cmp::Reverse(*i))).unwrap();
        freqs[i] -= 1;
        left += 1;
    }
    if left > 0 {
        let left = left as usize;
        scratch.order.clear();
        scratch.order.extend(0..m as u32);
        let rem = &scratch.rem;
        let cmp = |a: &u32, b: &u32| {
            rem[*b as usize]
                .partial_cmp(&rem[*a as usize])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(b))
        };
        if left < m {
            scratch.order.select_nth_unstable_by(left - 1, cmp);
        }
        for &i in scratch.order.iter().take(left) {
            freqs[i as usize] += 1;
        }
        // Shares sum to `free`, so at most m−1 units can be left over.
        debug_assert!(left < m);
    }
}

/// Bijection from an out-of-window local index to a non-negative residual:
/// `2(s − R′)` above the window, `−2s − 1` below it.
pub fn escape_map(s: i64, r_prime: i64) -> Result<u64> {
    if s >= r_prime {
        Ok(2 * (s - r_prime) as u64)
    } else if s < 0 {
        Ok((-2 * s - 1) as u64)
    } else {
        Err(Error::Corrupt(format!("index {} lies inside the window of {}", s, r_prime)))
    }
}

pub fn escape_unmap(res: u64, r_prime: i64) -> i64 {
    if res % 2 == 0 {
        (res / 2) as i64 + r_prime
    } else {
        -(((res + 1) / 2) as i64)
    }
}
