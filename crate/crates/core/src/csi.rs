//! Group-sequential inference with per-layer activation caches.
//!
//! At step `s` only the positions of group `s` (in every patch) are
//! evaluated. Masked convolutions read earlier results from a cache and
//! multiply just the active taps; pointwise layers run on the step's rows
//! directly. The encoder and decoder both drive this engine, so the
//! probabilities they see are bit-identical.

use crate::error::{Error, Result};
use crate::model::{Gate, ModelWeights, PixelBatch};
use crate::numerics::{gelu, gemm, layer_norm, linear, swish, Conv2d, Mat, Tensor};
use crate::prob::Alphabet;
use crate::scan::{build_schedule, GroupSchedule};

/// A masked layer's weights at its active taps only.
#[derive(Clone, Debug)]
pub struct ActiveWeights {
    pub conv: Conv2d,
    /// Active offsets `(dy, dx)` in row-major kernel order.
    pub taps: Vec<(isize, isize)>,
    /// Dense: `[N_A · C_in, C_out]`, row `a·C_in + ci`. Depthwise: `[N_A, C]`.
    pub weights: Vec<f32>,
}

impl ActiveWeights {
    pub fn active_count(&self) -> usize {
        self.taps.len()
    }
}

/// Gather `weight` at the active taps of `conv` (one-time preprocessing).
pub fn extract_active(conv: &Conv2d, weight: &Tensor<f32>) -> Result<ActiveWeights> {
    if weight.shape() != conv.weight_shape() {
        return Err(Error::shape(format!("weight {:?}, expected {:?}", weight.shape(), conv.weight_shape())));
    }
    let kk = conv.kernel * conv.kernel;
    let taps = conv.taps();
    let w = weight.data();
    let (cin, cout) = (conv.in_channels, conv.out_channels);
    let mut out = Vec::with_capacity(taps.len() * if conv.depthwise { cout } else { cin * cout });
    for &(t, _, _) in &taps {
        if conv.depthwise {
            out.extend((0..cout).map(|c| w[c * kk + t]));
        } else {
            for ci in 0..cin {
                out.extend((0..cout).map(|co| w[(co * cin + ci) * kk + t]));
            }
        }
    }
    Ok(ActiveWeights { conv: conv.clone(), taps: taps.iter().map(|&(_, dy, dx)| (dy, dx)).collect(), weights: out })
}

/// Position-major activation map `[H·W, C]`.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureCache {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureCache { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    #[inline]
    pub fn row(&self, pos: usize) -> &[f32] {
        &self.data[pos * self.channels..(pos + 1) * self.channels]
    }

    #[inline]
    pub fn row_mut(&mut self, pos: usize) -> &mut [f32] {
        &mut self.data[pos * self.channels..(pos + 1) * self.channels]
    }
}

/// Which cached positions a gather may touch.
#[derive(Clone, Copy, Debug)]
pub struct ReadCheck<'a> {
    /// Decoding step of every position.
    pub step_of: &'a [u32],
    pub step: u32,
    /// Strict layers may read earlier steps only; others also the current.
    pub strict: bool,
}

impl ReadCheck<'_> {
    #[inline]
    fn allows(&self, pos: usize) -> bool {
        let s = self.step_of[pos];
        if self.strict {
            s < self.step
        } else {
            s <= self.step
        }
    }
}

/// Evaluate a masked layer at `positions`: `Y = X′·W′ (+ bias)` with `X′`
/// gathered from the cache at the active taps. Taps in the zero padding
/// contribute nothing.
///
/// A read the check forbids is an error in debug builds and reads as zero
/// otherwise; correct masks never trigger it.
pub fn gather_multiply(
    cache: &FeatureCache,
    positions: &[usize],
    active: &ActiveWeights,
    bias: Option<&[f32]>,
    check: Option<ReadCheck<'_>>,
) -> Result<Tensor<f32>> {
    let conv = &active.conv;
    let (h, w) = (cache.height, cache.width);
    let (cin, cout) = (conv.in_channels, conv.out_channels);
    if cache.channels != cin {
        return Err(Error::shape(format!("cache has {} channels, layer reads {}", cache.channels, cin)));
    }
    let n = positions.len();
    let na = active.taps.len();
    let mut y = Tensor::zeros(&[n, cout]);
    if let Some(b) = bias {
        for row in y.data_mut().chunks_mut(cout.max(1)) {
            row.copy_from_slice(b);
        }
    }
    let read = |pos: usize| -> Result<Option<&[f32]>> {
        if let Some(c) = check {
            if !c.allows(pos) {
                if cfg!(debug_assertions) {
                    return Err(Error::Mask(format!(
                        "read of position {} (step {}) at step {}",
                        pos, c.step_of[pos], c.step
                    )));
                }
                return Ok(None);
            }
        }
        Ok(Some(cache.row(pos)))
    };
    if conv.depthwise {
        let out = y.data_mut();
        for (i, &p) in positions.iter().enumerate() {
            let (py, px) = (p / w, p % w);
            let row = &mut out[i * cout..(i + 1) * cout];
            let bounds = conv.bounds(h, w, py, px);
            for (a, &(dy, dx)) in active.taps.iter().enumerate() {
                let Some((ny, nx)) = conv.neighbor_within(bounds, py, px, dy, dx) else { continue };
                let Some(src) = read(ny * w + nx)? else { continue };
                let wt = &active.weights[a * cout..(a + 1) * cout];
                for ((o, &s), &k) in row.iter_mut().zip(src).zip(wt) {
                    *o += s * k;
                }
            }
        }
    } else {
        let kdim = na * cin;
        let mut xg = vec![0.0f32; n * kdim];
        for (i, &p) in positions.iter().enumerate() {
            let (py, px) = (p / w, p % w);
            let bounds = conv.bounds(h, w, py, px);
            for (a, &(dy, dx)) in active.taps.iter().enumerate() {
                let Some((ny, nx)) = conv.neighbor_within(bounds, py, px, dy, dx) else { continue };
                let Some(src) = read(ny * w + nx)? else { continue };
                xg[i * kdim + a * cin..i * kdim + (a + 1) * cin].copy_from_slice(src);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(Mat::new(&xg, n, kdim), Mat::new(&active.weights, kdim, cout), y.data_mut(), beta);
    }
    Ok(y)
}

struct BlockState {
    lcm_dw: ActiveWeights,
    spm_dw: ActiveWeights,
    lcm_cache: FeatureCache,
    spm_cache: FeatureCache,
}

/// Per-image inference state.
pub struct CsiEngine<'w> {
    weights: &'w ModelWeights<f32>,
    alphabet: Alphabet,
    schedule: GroupSchedule,
    height: usize,
    width: usize,
    real: (usize, usize),
    embed: ActiveWeights,
    blocks: Vec<BlockState>,
    pixels: FeatureCache,
    step_of: Vec<u32>,
    positions: Vec<Vec<usize>>,
    /// Next step to predict; commits trail predictions by one.
    next: usize,
    committed: usize,
}

impl<'w> CsiEngine<'w> {
    /// Engine for a `real_h × real_w` image, padded up to whole patches.
    pub fn new(weights: &'w ModelWeights<f32>, alphabet: Alphabet, real_h: usize, real_w: usize) -> Result<Self> {
        let cfg = &weights.config;
        cfg.validate()?;
        if real_h == 0 || real_w == 0 {
            return Err(Error::Image("empty image".into()));
        }
        let p = cfg.patch;
        let height = real_h.div_ceil(p) * p;
        let width = real_w.div_ceil(p) * p;
        let layers = cfg.layers()?;
        let schedule = build_schedule(cfg.scan());
        let (gh, gw) = (height / p, width / p);
        let mut step_of = vec![0u32; height * width];
        let mut positions = Vec::with_capacity(schedule.len());
        for (si, g) in schedule.groups.iter().enumerate() {
            let mut list = Vec::with_capacity(gh * gw * g.pixels.len());
            for py in 0..gh {
                for px in 0..gw {
                    for &(r, c) in &g.pixels {
                        let pos = (py * p + r) * width + px * p + c;
                        step_of[pos] = si as u32;
                        list.push(pos);
                    }
                }
            }
            positions.push(list);
        }
        let c = cfg.channels;
        let blocks = weights
            .blocks
            .iter()
            .map(|b| {
                Ok(BlockState {
                    lcm_dw: extract_active(&layers.lcm, &b.lcm.dw)?,
                    spm_dw: extract_active(&layers.spm, &b.spm.dw)?,
                    lcm_cache: FeatureCache::zeros(height, width, c),
                    spm_cache: FeatureCache::zeros(height, width, c),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CsiEngine {
            weights,
            alphabet,
            height,
            width,
            real: (real_h, real_w),
            embed: extract_active(&layers.embed, &weights.embed_w)?,
            blocks,
            pixels: FeatureCache::zeros(height, width, cfg.channels_in),
            step_of,
            positions,
            schedule,
            next: 0,
            committed: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.schedule.len()
    }

    pub fn schedule(&self) -> &GroupSchedule {
        &self.schedule
    }

    pub fn padded_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Positions (`y·W + x` in the padded frame) evaluated at `step`, in
    /// coding order: patch raster, then the group's pixels.
    pub fn positions(&self, step: usize) -> &[usize] {
        &self.positions[step]
    }

    #[inline]
    pub fn is_real(&self, pos: usize) -> bool {
        pos / self.width < self.real.0 && pos % self.width < self.real.1
    }

    /// Head outputs `[N, 3·K·C_in]` for every position of `step`. Steps
    /// must run in order, each after the previous one was committed.
    pub fn predict(&mut self, step: usize) -> Result<Tensor<f32>> {
        if step != self.next || self.committed != step {
            return Err(Error::StepOrder { expected: self.committed.min(self.next), got: step });
        }
        let w = self.weights;
        let cfg = &w.config;
        let pos = &self.positions[step];
        let n = pos.len();
        let c = cfg.channels;
        let s = step as u32;
        let strict = ReadCheck { step_of: &self.step_of, step: s, strict: true };
        let permissive = ReadCheck { step_of: &self.step_of, step: s, strict: false };
        let mut x = gather_multiply(&self.pixels, pos, &self.embed, Some(w.embed_b.data()), Some(strict))?;
        for (b, st) in w.blocks.iter().zip(self.blocks.iter_mut()) {
            gate_step(&b.lcm, &st.lcm_dw, &mut st.lcm_cache, pos, &mut x, permissive)?;
            let m = &b.mlp;
            let (nrm, _) = layer_norm(&x, &m.ln_gain, &m.ln_shift)?;
            let z = gelu(&linear(&nrm, &m.w_up, Some(&m.b_up))?);
            let o = linear(&z, &m.w_down, Some(&m.b_down))?;
            for (row, orow) in x.data_mut().chunks_mut(c).zip(o.data().chunks(c)) {
                for ((xv, &ov), &g) in row.iter_mut().zip(orow).zip(m.gamma.data()) {
                    *xv += g * ov;
                }
            }
            gate_step(&b.spm, &st.spm_dw, &mut st.spm_cache, pos, &mut x, permissive)?;
        }
        let out = linear(&x, &w.head_w, Some(&w.head_b))?;
        debug_assert_eq!(out.rows(), n);
        out.check_finite("step prediction")?;
        self.next += 1;
        Ok(out)
    }

    /// Store the samples of `step` (`N · C_in`, position-major). Values at
    /// padded positions are ignored.
    pub fn commit(&mut self, step: usize, samples: &[u32]) -> Result<()> {
        if step != self.committed || self.next != step + 1 {
            return Err(Error::StepOrder { expected: self.committed, got: step });
        }
        let cin = self.pixels.channels;
        let pos = &self.positions[step];
        if samples.len() != pos.len() * cin {
            return Err(Error::shape(format!("commit of {} samples for {} positions", samples.len(), pos.len())));
        }
        for (i, &p) in pos.iter().enumerate() {
            if !(p / self.width < self.real.0 && p % self.width < self.real.1) {
                continue;
            }
            for ch in 0..cin {
                let v = self.alphabet.normalize_checked(samples[i * cin + ch])?;
                self.pixels.data[p * cin + ch] = v as f32;
            }
        }
        self.committed += 1;
        Ok(())
    }
}

/// One gating layer on the step's rows: project, publish the projection to
/// the cache, then gather the depthwise taps from it.
fn gate_step(
    gate: &Gate<f32>,
    dw: &ActiveWeights,
    cache: &mut FeatureCache,
    pos: &[usize],
    x: &mut Tensor<f32>,
    check: ReadCheck<'_>,
) -> Result<()> {
    let c = gate.gamma.len();
    let (nrm, _) = layer_norm(x, &gate.ln_gain, &gate.ln_shift)?;
    let a = linear(&nrm, &gate.wa, Some(&gate.ba))?;
    for (&p, row) in pos.iter().zip(a.data().chunks(c)) {
        cache.row_mut(p).copy_from_slice(row);
    }
    let s = swish(&gather_multiply(cache, pos, dw, None, Some(check))?);
    let v = linear(&nrm, &gate.wv, Some(&gate.bv))?;
    let g = gate.gamma.data();
    for ((row, srow), vrow) in x.data_mut().chunks_mut(c).zip(s.data().chunks(c)).zip(v.data().chunks(c)) {
        for i in 0..c {
            row[i] += g[i] * (srow[i] * vrow[i]);
        }
    }
    Ok(())
}

/// Run every step over a known image and scatter the predictions into a
/// `[1, H, W, 3·K·C_in]` map, padded frame.
pub fn replay(weights: &ModelWeights<f32>, alphabet: Alphabet, pixels: &PixelBatch) -> Result<Tensor<f32>> {
    if pixels.batch != 1 {
        return Err(Error::shape("replay takes one image"));
    }
    let (rh, rw) = pixels.real[0];
    let mut e = CsiEngine::new(weights, alphabet, rh, rw)?;
    let (h, w) = e.padded_size();
    if (h, w) != (pixels.height, pixels.width) {
        return Err(Error::shape("pixel batch is not padded to whole patches"));
    }
    let o = weights.config.head_outputs();
    let cin = pixels.channels;
    let mut out = Tensor::zeros(&[1, h, w, o]);
    for step in 0..e.steps() {
        let pred = e.predict(step)?;
        let pos = e.positions(step).to_vec();
        let mut samples = Vec::with_capacity(pos.len() * cin);
        for (i, &p) in pos.iter().enumerate() {
            out.data_mut()[p * o..(p + 1) * o].copy_from_slice(&pred.data()[i * o..(i + 1) * o]);
            samples.extend_from_slice(&pixels.data[p * cin..(p + 1) * cin]);
        }
        e.commit(step, &samples)?;
    }
    Ok(out)
}
