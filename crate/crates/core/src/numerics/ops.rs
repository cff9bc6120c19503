use super::{gemm, Mat, Real, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    // Saturates cleanly: e^−x = inf gives 0.
    T::one() / (T::one() + (-x).act_exp())
}

#[inline]
fn tanh<T: Real>(z: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * z).act_exp() + T::one())
}

/// `ln(1 + eˣ)` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_rows<T: Real>(x: &Tensor<T>, channels: usize, what: &str) -> Result<usize> {
    if x.last_dim() != channels {
        return Err(Error::shape(format!(
            "{} expects {} channels, input has shape {:?}",
            what,
            channels,
            x.shape()
        )));
    }
    Ok(x.rows())
}

fn with_last_dim(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    if let Some(l) = s.last_mut() {
        *l = last;
    }
    s
}

/// `y = x Wᵀ + b` on the trailing axis; `w` is `[out, in]`.
pub fn linear<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (out_f, in_f) = match w.shape() {
        &[o, i] => (o, i),
        s => return Err(Error::shape(format!("linear weight must be rank 2, got {:?}", s))),
    };
    let n = check_rows(x, in_f, "linear")?;
    let mut y = Tensor::zeros(&with_last_dim(x.shape(), out_f));
    if let Some(b) = b {
        if b.len() != out_f {
            return Err(Error::shape("linear bias length"));
        }
        for row in y.data_mut().chunks_mut(out_f) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    gemm(Mat::new(x.data(), n, in_f), Mat::new(w.data(), out_f, in_f).t(), y.data_mut(), beta);
    Ok(y)
}

/// Returns `(dx, dw, db)` for [`linear`].
pub fn linear_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (out_f, in_f) = match w.shape() {
        &[o, i] => (o, i),
        s => return Err(Error::shape(format!("linear weight must be rank 2, got {:?}", s))),
    };
    let n = check_rows(x, in_f, "linear backward")?;
    if check_rows(dy, out_f, "linear backward grad")? != n {
        return Err(Error::shape("linear backward row count"));
    }
    let mut dx = Tensor::zeros(x.shape());
    gemm(Mat::new(dy.data(), n, out_f), Mat::new(w.data(), out_f, in_f), dx.data_mut(), T::zero());
    let mut dw = Tensor::zeros(&[out_f, in_f]);
    gemm(Mat::new(dy.data(), n, out_f).t(), Mat::new(x.data(), n, in_f), dw.data_mut(), T::zero());
    let mut db = Tensor::zeros(&[out_f]);
    for row in dy.data().chunks(out_f) {
        for (d, &g) in db.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }
    Ok((dx, dw, db))
}

/// Saved forward state of [`layer_norm`].
#[derive(Clone, Debug)]
pub struct LayerNormSaved<T: Real> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Normalise every row over the channel axis, then apply `gain`/`shift`.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, shift: &Tensor<T>) -> Result<(Tensor<T>, LayerNormSaved<T>)> {
    let c = gain.len();
    let n = check_rows(x, c, "layer_norm")?;
    if shift.len() != c {
        return Err(Error::shape("layer_norm shift length"));
    }
    let eps = T::lit(LN_EPS);
    let cf = T::from_usize(c).unwrap();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(n);
    for ((src, xh), dst) in x
        .data()
        .chunks(c)
        .zip(xhat.data_mut().chunks_mut(c))
        .zip(y.data_mut().chunks_mut(c))
    {
        let mean = src.iter().copied().sum::<T>() / cf;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for i in 0..c {
            let h = (src[i] - mean) * is;
            xh[i] = h;
            dst[i] = h * gain.data()[i] + shift.data()[i];
        }
    }
    Ok((y, LayerNormSaved { xhat, inv_std }))
}

/// Returns `(dx, dgain, dshift)` for [`layer_norm`].
pub fn layer_norm_backward<T: Real>(saved: &LayerNormSaved<T>, gain: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = gain.len();
    let n = check_rows(dy, c, "layer_norm backward")?;
    if saved.inv_std.len() != n {
        return Err(Error::MissingForwardState("layer_norm"));
    }
    let cf = T::from_usize(c).unwrap();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dg = Tensor::zeros(&[c]);
    let mut db = Tensor::zeros(&[c]);
    let mut dxhat = vec![T::zero(); c];
    for (r, ((g, xh), out)) in dy
        .data()
        .chunks(c)
        .zip(saved.xhat.data().chunks(c))
        .zip(dx.data_mut().chunks_mut(c))
        .enumerate()
    {
        let mut sum = T::zero();
        let mut sum_x = T::zero();
        for i in 0..c {
            dg.data_mut()[i] += g[i] * xh[i];
            db.data_mut()[i] += g[i];
            dxhat[i] = g[i] * gain.data()[i];
            sum += dxhat[i];
            sum_x += dxhat[i] * xh[i];
        }
        let scale = saved.inv_std[r] / cf;
        for i in 0..c {
            out[i] = scale * (cf * dxhat[i] - sum - xh[i] * sum_x);
        }
    }
    Ok((dx, dg, db))
}

/// `x · σ(x)`
pub fn swish<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn swish_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let data = x
        .data()
        .iter()
        .map(|&v| half * v * (T::one() + tanh(c * (v + a * v * v * v))))
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub fn gelu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let (c, a, half, three) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5), T::lit(3.0));
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let th = tanh(c * (v + a * v * v * v));
            let d = half * (T::one() + th) + half * v * (T::one() - th * th) * c * (T::one() + three * a * v * v);
            g * d
        })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Softmax over the trailing axis.
pub fn softmax<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let c = x.last_dim().max(1);
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    y
}

/// Per-channel scaling `y = γ ⊙ x`.
pub fn layer_scale<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>) -> Result<Tensor<T>> {
    let c = gamma.len();
    check_rows(x, c, "layer_scale")?;
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(c) {
        for (v, &g) in row.iter_mut().zip(gamma.data()) {
            *v *= g;
        }
    }
    Ok(y)
}

/// Returns `(dx, dγ)` for [`layer_scale`].
pub fn layer_scale_backward<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let c = gamma.len();
    check_rows(x, c, "layer_scale backward")?;
    let dx = layer_scale(dy, gamma)?;
    let mut dg = Tensor::zeros(&[c]);
    for (xr, gr) in x.data().chunks(c).zip(dy.data().chunks(c)) {
        for i in 0..c {
            dg.data_mut()[i] += xr[i] * gr[i];
        }
    }
    Ok((dx, dg))
}
