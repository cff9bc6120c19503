use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution over channels-last feature maps.
///
/// Covers the three spatial operators the model uses: the dense masked
/// embedding, the masked depthwise convolution restricted to one patch,
/// and the unmasked depthwise convolution over the patch grid (dilation
/// equal to the patch side, so each tap lands on the same relative
/// position of a neighbouring patch).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub depthwise: bool,
    pub dilation: usize,
    /// Taps never cross the border of a `tile × tile` block.
    pub tile: Option<usize>,
    active: Vec<bool>,
}

/// Half-open rectangle `[y0, y1) × [x0, x1)` a tap may read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bounds {
    pub y0: isize,
    pub y1: isize,
    pub x0: isize,
    pub x1: isize,
}

/// Gradients produced by [`Conv2d::backward`].
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Real> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl Conv2d {
    pub fn dense(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel, false)
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Result<Self> {
        Self::new(channels, channels, kernel, true)
    }

    fn new(in_channels: usize, out_channels: usize, kernel: usize, depthwise: bool) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Mask(format!("kernel size {} is not odd", kernel)));
        }
        Ok(Conv2d {
            in_channels,
            out_channels,
            kernel,
            depthwise,
            dilation: 1,
            tile: None,
            active: vec![true; kernel * kernel],
        })
    }

    pub fn with_mask_bits(mut self, bits: &[bool]) -> Result<Self> {
        if bits.len() != self.kernel * self.kernel {
            return Err(Error::Mask(format!(
                "mask has {} taps, kernel needs {}",
                bits.len(),
                self.kernel * self.kernel
            )));
        }
        self.active = bits.to_vec();
        Ok(self)
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation.max(1);
        self
    }

    pub fn with_tile(mut self, tile: usize) -> Self {
        self.tile = Some(tile);
        self
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let cin = if self.depthwise { 1 } else { self.in_channels };
        [self.out_channels, cin, self.kernel, self.kernel]
    }

    /// Active taps as `(tap index, dy, dx)` in row-major order.
    pub fn taps(&self) -> Vec<(usize, isize, isize)> {
        let half = (self.kernel / 2) as isize;
        let k = self.kernel as isize;
        (0..self.kernel * self.kernel)
            .filter(|&t| self.active[t])
            .map(|t| (t, t as isize / k - half, t as isize % k - half))
            .collect()
    }

    /// Readable input rectangle for output `(y, x)`: the frame, further
    /// restricted to the output's tile when one is set.
    #[inline]
    pub fn bounds(&self, h: usize, w: usize, y: usize, x: usize) -> Bounds {
        match self.tile {
            Some(p) => {
                let (ty, tx) = (y - y % p, x - x % p);
                Bounds { y0: ty as isize, y1: (ty + p).min(h) as isize, x0: tx as isize, x1: (tx + p).min(w) as isize }
            }
            None => Bounds { y0: 0, y1: h as isize, x0: 0, x1: w as isize },
        }
    }

    /// Input position read by tap `(dy, dx)` for output `(y, x)` given the
    /// output's [`bounds`](Self::bounds), or `None` in the zero padding.
    #[inline]
    pub fn neighbor_within(&self, b: Bounds, y: usize, x: usize, dy: isize, dx: isize) -> Option<(usize, usize)> {
        let ny = y as isize + dy * self.dilation as isize;
        let nx = x as isize + dx * self.dilation as isize;
        if ny < b.y0 || nx < b.x0 || ny >= b.y1 || nx >= b.x1 {
            return None;
        }
        Some((ny as usize, nx as usize))
    }

    /// Input position read by tap `(dy, dx)` for output `(y, x)`, or `None`
    /// when the tap falls in the zero padding.
    #[inline]
    pub fn neighbor(&self, h: usize, w: usize, y: usize, x: usize, dy: isize, dx: isize) -> Option<(usize, usize)> {
        self.neighbor_within(self.bounds(h, w, y, x), y, x, dy, dx)
    }

    fn check(&self, input: &Tensor<impl Real>, weight: &Tensor<impl Real>) -> Result<[usize; 4]> {
        let dims = input.dims4()?;
        if dims[3] != self.in_channels {
            return Err(Error::shape(format!(
                "conv input has {} channels, expected {}",
                dims[3], self.in_channels
            )));
        }
        if weight.shape() != self.weight_shape() {
            return Err(Error::shape(format!(
                "conv weight {:?}, expected {:?}",
                weight.shape(),
                self.weight_shape()
            )));
        }
        Ok(dims)
    }

    /// Weights re-laid as `[tap][ci][co]` (dense) or `[tap][c]` (depthwise).
    pub fn tap_major<T: Real>(&self, weight: &Tensor<T>) -> Vec<T> {
        let kk = self.kernel * self.kernel;
        let w = weight.data();
        if self.depthwise {
            let c = self.out_channels;
            let mut out = vec![T::zero(); kk * c];
            for ch in 0..c {
                for t in 0..kk {
                    out[t * c + ch] = w[ch * kk + t];
                }
            }
            out
        } else {
            let (ci_n, co_n) = (self.in_channels, self.out_channels);
            let mut out = vec![T::zero(); kk * ci_n * co_n];
            for co in 0..co_n {
                for ci in 0..ci_n {
                    for t in 0..kk {
                        out[(t * ci_n + ci) * co_n + co] = w[(co * ci_n + ci) * kk + t];
                    }
                }
            }
            out
        }
    }

    /// Accumulate the convolution at one output position into `out_row`.
    ///
    /// `read(ny, nx)` returns the input channel vector at a neighbour.
    #[inline]
    pub fn accumulate_at<'a, T: Real>(
        &self,
        taps: &[(usize, isize, isize)],
        tap_weights: &[T],
        h: usize,
        w: usize,
        y: usize,
        x: usize,
        mut read: impl FnMut(usize, usize) -> &'a [T],
        out_row: &mut [T],
    ) {
        let cin = self.in_channels;
        let cout = self.out_channels;
        let bounds = self.bounds(h, w, y, x);
        for &(t, dy, dx) in taps {
            let Some((ny, nx)) = self.neighbor_within(bounds, y, x, dy, dx) else { continue };
            let src = read(ny, nx);
            if self.depthwise {
                let wt = &tap_weights[t * cout..(t + 1) * cout];
                for ((o, &s), &k) in out_row.iter_mut().zip(src).zip(wt) {
                    *o += s * k;
                }
            } else {
                for (ci, &s) in src.iter().enumerate().take(cin) {
                    let wt = &tap_weights[(t * cin + ci) * cout..(t * cin + ci + 1) * cout];
                    for (o, &k) in out_row.iter_mut().zip(wt) {
                        *o += s * k;
                    }
                }
            }
        }
    }

    /// `y = conv(x, weight ⊙ mask) + bias` over `[B, H, W, C_in]`.
    pub fn forward<T: Real>(&self, input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let [b, h, w, cin] = self.check(input, weight)?;
        let cout = self.out_channels;
        if let Some(bias) = bias {
            if bias.len() != cout {
                return Err(Error::shape(format!("conv bias has {} entries, expected {}", bias.len(), cout)));
            }
        }
        let taps = self.taps();
        let tw = self.tap_major(weight);
        let mut out = Tensor::zeros(&[b, h, w, cout]);
        let src = input.data();
        let dst = out.data_mut();
        for bi in 0..b {
            let plane = &src[bi * h * w * cin..(bi + 1) * h * w * cin];
            for y in 0..h {
                for x in 0..w {
                    let o = ((bi * h + y) * w + x) * cout;
                    let row = &mut dst[o..o + cout];
                    if let Some(bias) = bias {
                        row.copy_from_slice(bias.data());
                    }
                    self.accumulate_at(&taps, &tw, h, w, y, x, |ny, nx| {
                        let i = (ny * w + nx) * cin;
                        &plane[i..i + cin]
                    }, row);
                }
            }
        }
        Ok(out)
    }

    /// Gradients of [`forward`](Self::forward) with respect to input,
    /// weight (zero at masked taps) and bias.
    pub fn backward<T: Real>(&self, input: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
        let [b, h, w, cin] = self.check(input, weight)?;
        let cout = self.out_channels;
        if grad_out.shape() != [b, h, w, cout] {
            return Err(Error::shape(format!("conv grad_out {:?}", grad_out.shape())));
        }
        let kk = self.kernel * self.kernel;
        let taps = self.taps();
        let tw = self.tap_major(weight);
        let mut dx = Tensor::zeros(input.shape());
        let mut dtw = vec![T::zero(); tw.len()];
        let mut db = Tensor::zeros(&[cout]);
        let xs = input.data();
        let gs = grad_out.data();
        {
            let dxs = dx.data_mut();
            let dbs = db.data_mut();
            for bi in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        let o = ((bi * h + y) * w + x) * cout;
                        let g = &gs[o..o + cout];
                        for (d, &v) in dbs.iter_mut().zip(g) {
                            *d += v;
                        }
                        let bounds = self.bounds(h, w, y, x);
                        for &(t, dy, dxo) in &taps {
                            let Some((ny, nx)) = self.neighbor_within(bounds, y, x, dy, dxo) else { continue };
                            let i = ((bi * h + ny) * w + nx) * cin;
                            if self.depthwise {
                                let wt = &tw[t * cout..(t + 1) * cout];
                                let dwt = &mut dtw[t * cout..(t + 1) * cout];
                                let src = &xs[i..i + cin];
                                let dsrc = &mut dxs[i..i + cin];
                                for c in 0..cout {
                                    dsrc[c] += wt[c] * g[c];
                                    dwt[c] += src[c] * g[c];
                                }
                            } else {
                                for ci in 0..cin {
                                    let base = (t * cin + ci) * cout;
                                    let wt = &tw[base..base + cout];
                                    let s = xs[i + ci];
                                    let mut acc = T::zero();
                                    for (dw, (&k, &gv)) in dtw[base..base + cout].iter_mut().zip(wt.iter().zip(g)) {
                                        acc += k * gv;
                                        *dw += s * gv;
                                    }
                                    dxs[i + ci] += acc;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut dw = Tensor::zeros(&self.weight_shape());
        let dws = dw.data_mut();
        if self.depthwise {
            for c in 0..cout {
                for t in 0..kk {
                    dws[c * kk + t] = dtw[t * cout + c];
                }
            }
        } else {
            for co in 0..cout {
                for ci in 0..cin {
                    for t in 0..kk {
                        dws[(co * cin + ci) * kk + t] = dtw[(t * cin + ci) * cout + co];
                    }
                }
            }
        }
        Ok(ConvGrads { input: dx, weight: dw, bias: db })
    }
}

fn binary_mask<T: Real>(mask: &[T], k: usize) -> Result<Vec<bool>> {
    if mask.len() != k * k {
        return Err(Error::Mask(format!("mask has {} entries, kernel is {}x{}", mask.len(), k, k)));
    }
    mask.iter()
        .map(|&m| {
            if m == T::one() {
                Ok(true)
            } else if m == T::zero() {
                Ok(false)
            } else {
                Err(Error::Mask(format!("mask value {} is not binary", m)))
            }
        })
        .collect()
}

/// Dense convolution with a binary `k × k` mask broadcast over channels.
/// Input `[B, H, W, C_in]`, weight `[C_out, C_in, k, k]`.
pub fn conv2d_masked<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, mask: &[T], bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [cout, cin, k, k2] = weight.dims4()?;
    if k != k2 {
        return Err(Error::shape("non-square kernel"));
    }
    let bits = binary_mask(mask, k)?;
    Conv2d::dense(cin, cout, k)?.with_mask_bits(&bits)?.forward(input, weight, bias)
}

/// Channel-wise convolution; weight `[C, 1, k, k]`, optional binary mask.
pub fn depthwise_conv2d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, mask: Option<&[T]>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [c, one, k, _] = weight.dims4()?;
    if one != 1 {
        return Err(Error::shape("depthwise weight must be [C, 1, k, k]"));
    }
    let mut conv = Conv2d::depthwise(c, k)?;
    if let Some(m) = mask {
        conv = conv.with_mask_bits(&binary_mask(m, k)?)?;
    }
    conv.forward(input, weight, bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Straightforward NCHW-style convolution used as an oracle.
    fn naive_dense(x: &Tensor<f64>, w: &Tensor<f64>, mask: &[f64]) -> Tensor<f64> {
        let [b, h, wd, cin] = x.dims4().unwrap();
        let [cout, _, k, _] = w.dims4().unwrap();
        let half = (k / 2) as isize;
        let mut out = Tensor::zeros(&[b, h, wd, cout]);
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..wd {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for i in 0..k {
                                for j in 0..k {
                                    let ny = y as isize + i as isize - half;
                                    let nx = xx as isize + j as isize - half;
                                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= wd as isize {
                                        continue;
                                    }
                                    let wv = w.data()[((co * cin + ci) * k + i) * k + j] * mask[i * k + j];
                                    acc += wv * x.data()[((bi * h + ny as usize) * wd + nx as usize) * cin + ci];
                                }
                            }
                        }
                        out.data_mut()[((bi * h + y) * wd + xx) * cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_input_gives_bias() {
        let x = Tensor::<f32>::zeros(&[1, 5, 5, 2]);
        let w = Tensor::full(&[3, 2, 3, 3], 0.7);
        let b = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d_masked(&x, &w, &[1.0; 9], Some(&b)).unwrap();
        for row in y.data().chunks(3) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn all_ones_mask_equals_unmasked_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 6, 5, 3], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let y = conv2d_masked(&x, &w, &[1.0; 9], None).unwrap();
        let oracle = naive_dense(&x, &w, &[1.0; 9]);
        assert!(y.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn strict_delta2_interior_value_is_four() {
        // active offsets (-1,-1), (-1,0), (-1,1), (0,-1)
        let mask = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let x = Tensor::<f32>::full(&[1, 5, 5, 1], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_masked(&x, &w, &mask, None).unwrap();
        assert_eq!(y.data()[2 * 5 + 2], 4.0);
    }

    #[test]
    fn mask_absorption_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 7, 7, 2], &mut rng);
        let w = random(&[3, 2, 5, 5], &mut rng);
        let mask: Vec<f64> = (0..25).map(|i| if (i * 7) % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let masked = conv2d_masked(&x, &w, &mask, None).unwrap();
        let mut wm = w.clone();
        for (i, v) in wm.data_mut().iter_mut().enumerate() {
            *v *= mask[i % 25];
        }
        let absorbed = conv2d_masked(&x, &wm, &[1.0; 25], None).unwrap();
        assert_eq!(masked, absorbed);
        assert!(masked.max_abs_diff(&naive_dense(&x, &w, &mask)) < 1e-12);
    }

    #[test]
    fn non_binary_mask_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 3, 3, 1]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let mut mask = [1.0f32; 9];
        mask[4] = 0.5;
        assert!(matches!(conv2d_masked(&x, &w, &mask, None), Err(Error::Mask(_))));
        assert!(Conv2d::dense(1, 1, 4).is_err());
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 4, 6, 3], &mut rng);
        let mut w = Tensor::zeros(&[3, 1, 3, 3]);
        for c in 0..3 {
            w.data_mut()[c * 9 + 4] = 1.0;
        }
        let permissive = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let y = depthwise_conv2d(&x, &w, Some(&permissive), None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn depthwise_ones_on_constant_interior() {
        let x = Tensor::<f32>::full(&[1, 5, 5, 2], 1.5);
        let w = Tensor::full(&[2, 1, 3, 3], 1.0);
        let y = depthwise_conv2d(&x, &w, None, None).unwrap();
        assert_eq!(y.data()[(2 * 5 + 2) * 2], 13.5);
    }

    #[test]
    fn depthwise_matches_block_diagonal_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = 4;
        let x = random(&[2, 7, 6, c], &mut rng);
        let wdw = random(&[c, 1, 5, 5], &mut rng);
        let mut dense = Tensor::zeros(&[c, c, 5, 5]);
        for ch in 0..c {
            for t in 0..25 {
                dense.data_mut()[(ch * c + ch) * 25 + t] = wdw.data()[ch * 25 + t];
            }
        }
        let a = depthwise_conv2d(&x, &wdw, None, None).unwrap();
        let b = naive_dense(&x, &dense, &[1.0; 25]);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-6 * v.abs().max(1e-12), "{} vs {}", u, v);
        }
    }

    #[test]
    fn masked_taps_get_zero_weight_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 6, 6, 2], &mut rng);
        let w = random(&[2, 2, 3, 3], &mut rng);
        let bits = [true, true, true, true, false, false, false, false, false];
        let conv = Conv2d::dense(2, 2, 3).unwrap().with_mask_bits(&bits).unwrap();
        let g = random(&[1, 6, 6, 2], &mut rng);
        let grads = conv.backward(&x, &w, &g).unwrap();
        for (i, v) in grads.weight.data().iter().enumerate() {
            if !bits[i % 9] {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn tiles_block_cross_border_taps() {
        let conv = Conv2d::depthwise(1, 3).unwrap().with_tile(4);
        assert_eq!(conv.neighbor(8, 8, 3, 3, 1, 0), None);
        assert_eq!(conv.neighbor(8, 8, 3, 3, -1, -1), Some((2, 2)));
        let grid = Conv2d::depthwise(1, 3).unwrap().with_dilation(4);
        assert_eq!(grid.neighbor(8, 8, 1, 2, 1, 0), Some((5, 2)));
        assert_eq!(grid.neighbor(8, 8, 5, 2, 1, 0), None);
    }

    fn fd_check(conv: &Conv2d, x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, rng: &mut ChaCha8Rng) {
        let y = conv.forward(x, w, Some(b)).unwrap();
        let g = random(y.shape(), rng);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let y = conv.forward(x, w, Some(b)).unwrap();
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let grads = conv.backward(x, w, &g).unwrap();
        let h = 1e-5;
        let check = |analytic: f64, numeric: f64| {
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!((analytic - numeric).abs() / denom < 1e-4 || (analytic - numeric).abs() < 1e-9, "{} vs {}", analytic, numeric);
        };
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            check(grads.input.data()[i], (loss(&xp, w, b) - loss(&xm, w, b)) / (2.0 * h));
        }
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.data_mut()[i] += h;
            let mut wm = w.clone();
            wm.data_mut()[i] -= h;
            check(grads.weight.data()[i], (loss(x, &wp, b) - loss(x, &wm, b)) / (2.0 * h));
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp.data_mut()[i] += h;
            let mut bm = b.clone();
            bm.data_mut()[i] -= h;
            check(grads.bias.data()[i], (loss(x, w, &bp) - loss(x, w, &bm)) / (2.0 * h));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bits = [true, true, true, true, true, false, false, false, false];
        let dense = Conv2d::dense(2, 3, 3).unwrap().with_mask_bits(&bits).unwrap().with_tile(4);
        let x = random(&[2, 8, 4, 2], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        fd_check(&dense, &x, &w, &b, &mut rng);

        let dw = Conv2d::depthwise(3, 3).unwrap().with_dilation(2);
        let x = random(&[1, 6, 6, 3], &mut rng);
        let w = random(&[3, 1, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        fd_check(&dw, &x, &w, &b, &mut rng);
    }
}
