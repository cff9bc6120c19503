//! Whole-image forward and backward passes, used for training, rate
//! estimation and as the reference for the step-wise inference engine.

use super::config::{Layers, ModelConfig};
use super::weights::{Gate, Mlp, ModelWeights};
use super::PixelBatch;
use crate::error::{Error, Result};
use crate::numerics::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, layer_scale, layer_scale_backward, linear, linear_backward,
    swish, swish_backward, Conv2d, LayerNormSaved, Real, Tensor,
};
use crate::prob::{mixture_log_prob, Alphabet, MixtureGrad};

fn hadamard<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

struct GateSaved<T: Real> {
    ln: LayerNormSaved<T>,
    n: Tensor<T>,
    a: Tensor<T>,
    d: Tensor<T>,
    s: Tensor<T>,
    v: Tensor<T>,
    o: Tensor<T>,
}

struct MlpSaved<T: Real> {
    ln: LayerNormSaved<T>,
    n: Tensor<T>,
    u: Tensor<T>,
    z: Tensor<T>,
    o: Tensor<T>,
}

struct BlockSaved<T: Real> {
    lcm: GateSaved<T>,
    mlp: MlpSaved<T>,
    spm: GateSaved<T>,
}

/// Activations kept by [`forward`] for [`backward`].
pub struct ForwardState<T: Real> {
    input: Tensor<T>,
    blocks: Vec<BlockSaved<T>>,
    features: Tensor<T>,
}

fn gate_forward<T: Real>(g: &Gate<T>, conv: &Conv2d, x: &mut Tensor<T>, keep: bool) -> Result<Option<GateSaved<T>>> {
    let (n, ln) = layer_norm(x, &g.ln_gain, &g.ln_shift)?;
    let a = linear(&n, &g.wa, Some(&g.ba))?;
    let d = conv.forward(&a, &g.dw, None)?;
    let s = swish(&d);
    let v = linear(&n, &g.wv, Some(&g.bv))?;
    let o = hadamard(&s, &v);
    x.add_assign(&layer_scale(&o, &g.gamma)?)?;
    Ok(keep.then_some(GateSaved { ln, n, a, d, s, v, o }))
}

fn gate_backward<T: Real>(g: &Gate<T>, conv: &Conv2d, st: &GateSaved<T>, dx: &mut Tensor<T>, grad: &mut Gate<T>) -> Result<()> {
    let (d_o, dgamma) = layer_scale_backward(&st.o, &g.gamma, dx)?;
    let ds = hadamard(&d_o, &st.v);
    let dv = hadamard(&d_o, &st.s);
    let dd = swish_backward(&st.d, &ds);
    let cg = conv.backward(&st.a, &g.dw, &dd)?;
    let (mut dn, dwa, dba) = linear_backward(&st.n, &g.wa, &cg.input)?;
    let (dn2, dwv, dbv) = linear_backward(&st.n, &g.wv, &dv)?;
    dn.add_assign(&dn2)?;
    let (dxl, dlg, dlb) = layer_norm_backward(&st.ln, &g.ln_gain, &dn)?;
    dx.add_assign(&dxl)?;
    grad.gamma.add_assign(&dgamma)?;
    grad.dw.add_assign(&cg.weight)?;
    grad.wa.add_assign(&dwa)?;
    grad.ba.add_assign(&dba)?;
    grad.wv.add_assign(&dwv)?;
    grad.bv.add_assign(&dbv)?;
    grad.ln_gain.add_assign(&dlg)?;
    grad.ln_shift.add_assign(&dlb)?;
    Ok(())
}

fn mlp_forward<T: Real>(m: &Mlp<T>, x: &mut Tensor<T>, keep: bool) -> Result<Option<MlpSaved<T>>> {
    let (n, ln) = layer_norm(x, &m.ln_gain, &m.ln_shift)?;
    let u = linear(&n, &m.w_up, Some(&m.b_up))?;
    let z = gelu(&u);
    let o = linear(&z, &m.w_down, Some(&m.b_down))?;
    x.add_assign(&layer_scale(&o, &m.gamma)?)?;
    Ok(keep.then_some(MlpSaved { ln, n, u, z, o }))
}

fn mlp_backward<T: Real>(m: &Mlp<T>, st: &MlpSaved<T>, dx: &mut Tensor<T>, grad: &mut Mlp<T>) -> Result<()> {
    let (d_o, dgamma) = layer_scale_backward(&st.o, &m.gamma, dx)?;
    let (dz, dwd, dbd) = linear_backward(&st.z, &m.w_down, &d_o)?;
    let du = gelu_backward(&st.u, &dz);
    let (dn, dwu, dbu) = linear_backward(&st.n, &m.w_up, &du)?;
    let (dxl, dlg, dlb) = layer_norm_backward(&st.ln, &m.ln_gain, &dn)?;
    dx.add_assign(&dxl)?;
    grad.gamma.add_assign(&dgamma)?;
    grad.w_down.add_assign(&dwd)?;
    grad.b_down.add_assign(&dbd)?;
    grad.w_up.add_assign(&dwu)?;
    grad.b_up.add_assign(&dbu)?;
    grad.ln_gain.add_assign(&dlg)?;
    grad.ln_shift.add_assign(&dlb)?;
    Ok(())
}

fn check_input<T: Real>(cfg: &ModelConfig, input: &Tensor<T>) -> Result<()> {
    let [_, h, w, c] = input.dims4()?;
    if c != cfg.channels_in {
        return Err(Error::Config(format!("model expects {} channels, input has {}", cfg.channels_in, c)));
    }
    if h % cfg.patch != 0 || w % cfg.patch != 0 {
        return Err(Error::shape(format!("{}x{} input is not padded to patch {}", h, w, cfg.patch)));
    }
    Ok(())
}

/// Head outputs `[B, H, W, 3·K·C_in]` for a normalized, padded input.
/// With `keep` the activations needed by [`backward`] are returned.
pub fn forward<T: Real>(w: &ModelWeights<T>, input: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, Option<ForwardState<T>>)> {
    let cfg = &w.config;
    check_input(cfg, input)?;
    let layers = cfg.layers()?;
    let mut x = layers.embed.forward(input, &w.embed_w, Some(&w.embed_b))?;
    let mut saved = Vec::new();
    for b in &w.blocks {
        let lcm = gate_forward(&b.lcm, &layers.lcm, &mut x, keep)?;
        let mlp = mlp_forward(&b.mlp, &mut x, keep)?;
        let spm = gate_forward(&b.spm, &layers.spm, &mut x, keep)?;
        if keep {
            saved.push(BlockSaved { lcm: lcm.unwrap(), mlp: mlp.unwrap(), spm: spm.unwrap() });
        }
    }
    let out = linear(&x, &w.head_w, Some(&w.head_b))?;
    out.check_finite("model forward")?;
    let state = keep.then(|| ForwardState { input: input.clone(), blocks: saved, features: x });
    Ok((out, state))
}

/// Gradients of every parameter given `∂L/∂head`.
pub fn backward<T: Real>(w: &ModelWeights<T>, state: &ForwardState<T>, d_head: &Tensor<T>) -> Result<ModelWeights<T>> {
    let layers: Layers = w.config.layers()?;
    let mut grad = w.zeros_like();
    if state.blocks.len() != w.blocks.len() {
        return Err(Error::MissingForwardState("model"));
    }
    let (mut dx, dhw, dhb) = linear_backward(&state.features, &w.head_w, d_head)?;
    grad.head_w = dhw;
    grad.head_b = dhb;
    for (i, b) in w.blocks.iter().enumerate().rev() {
        let st = &state.blocks[i];
        let g = &mut grad.blocks[i];
        gate_backward(&b.spm, &layers.spm, &st.spm, &mut dx, &mut g.spm)?;
        mlp_backward(&b.mlp, &st.mlp, &mut dx, &mut g.mlp)?;
        gate_backward(&b.lcm, &layers.lcm, &st.lcm, &mut dx, &mut g.lcm)?;
    }
    let eg = layers.embed.backward(&state.input, &w.embed_w, &dx)?;
    grad.embed_w = eg.weight;
    grad.embed_b = eg.bias;
    for t in grad.tensors() {
        t.check_finite("model backward")?;
    }
    Ok(grad)
}

/// Code length of a batch under the head outputs.
#[derive(Clone, Debug)]
pub struct Nll<T: Real> {
    /// Total over real samples, in bits.
    pub bits: f64,
    /// `[B, H, W]` bits summed over channels; zero at padding.
    pub pixel_bits: Vec<f64>,
    /// `grad_scale · ∂bits/∂head`, when requested.
    pub grad: Option<Tensor<T>>,
}

/// Negative log2-likelihood of `pixels` under `head`. Only real (unpadded)
/// samples count.
pub fn nll<T: Real>(head: &Tensor<T>, pixels: &PixelBatch, cfg: &ModelConfig, alphabet: &Alphabet, grad_scale: Option<f64>) -> Result<Nll<T>> {
    let [b, h, w, o] = head.dims4()?;
    let cin = cfg.channels_in;
    let k = cfg.mixtures;
    if o != cfg.head_outputs() || pixels.batch != b || pixels.height != h || pixels.width != w || pixels.channels != cin {
        return Err(Error::shape(format!("nll: head {:?} vs pixels {}x{}x{}x{}", head.shape(), pixels.batch, pixels.height, pixels.width, pixels.channels)));
    }
    let ln2 = std::f64::consts::LN_2;
    let mut grad = grad_scale.map(|_| Tensor::<T>::zeros(head.shape()));
    let gscale = T::lit(-grad_scale.unwrap_or(0.0) / ln2);
    let mut pixel_bits = vec![0.0; b * h * w];
    let mut total = 0.0;
    let hd = head.data();
    for bi in 0..b {
        let (rh, rw) = pixels.real[bi];
        for y in 0..rh.min(h) {
            for x in 0..rw.min(w) {
                let pos = (bi * h + y) * w + x;
                let row = &hd[pos * o..(pos + 1) * o];
                let mut pb = 0.0;
                for ch in 0..cin {
                    let base = ch * 3 * k;
                    let v = pixels.data[pos * cin + ch];
                    if v > alphabet.max_value() {
                        return Err(Error::PixelRange { value: v, bit_depth: alphabet.bits });
                    }
                    let g = grad.as_mut().map(|g| {
                        let (lg, rest) = g.data_mut()[pos * o + base..pos * o + base + 3 * k].split_at_mut(k);
                        let (mg, sg) = rest.split_at_mut(k);
                        MixtureGrad { scale: gscale, logits: lg, means: mg, raw_scales: sg }
                    });
                    let lp = mixture_log_prob(&row[base..base + k], &row[base + k..base + 2 * k], &row[base + 2 * k..base + 3 * k], v, alphabet, g);
                    pb -= lp.to_f64().unwrap() / ln2;
                }
                pixel_bits[pos] = pb;
                total += pb;
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("nll".into()));
    }
    Ok(Nll { bits: total, pixel_bits, grad })
}

/// One forward, the likelihood and (optionally) all gradients of
/// `grad_scale · bits`.
pub fn loss_and_grad<T: Real>(w: &ModelWeights<T>, pixels: &PixelBatch, alphabet: &Alphabet, grad_scale: f64) -> Result<(f64, ModelWeights<T>)> {
    let input = pixels.normalize::<T>(alphabet)?;
    let (head, state) = forward(w, &input, true)?;
    let n = nll(&head, pixels, &w.config, alphabet, Some(grad_scale))?;
    let grads = backward(w, state.as_ref().unwrap(), n.grad.as_ref().unwrap())?;
    Ok((n.bits, grads))
}
