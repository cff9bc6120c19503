use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::prob::SCALE_FLOOR;

/// Gated convolution stage: `σ(DW(W_A·LN x)) ⊙ (W_V·LN x)`, scaled by γ
/// and added back to `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gate<T: Real = f32> {
    pub ln_gain: Tensor<T>,
    pub ln_shift: Tensor<T>,
    pub wa: Tensor<T>,
    pub ba: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    /// `[C, 1, k, k]`
    pub dw: Tensor<T>,
    pub gamma: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T: Real = f32> {
    pub ln_gain: Tensor<T>,
    pub ln_shift: Tensor<T>,
    pub w_up: Tensor<T>,
    pub b_up: Tensor<T>,
    pub w_down: Tensor<T>,
    pub b_down: Tensor<T>,
    pub gamma: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T: Real = f32> {
    pub lcm: Gate<T>,
    pub mlp: Mlp<T>,
    pub spm: Gate<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T: Real = f32> {
    pub config: ModelConfig,
    /// `[C, C_in, k0, k0]`
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    /// `[3·K·C_in, C]`
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

/// Weights that receive low-rank increments, in payload order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Site {
    LcmWa,
    LcmWv,
    LcmDw,
    MlpUp,
    SpmWa,
    SpmWv,
    SpmDw,
}

impl Site {
    pub const ALL: [Site; 7] = [Site::LcmWa, Site::LcmWv, Site::LcmDw, Site::MlpUp, Site::SpmWa, Site::SpmWv, Site::SpmDw];

    pub fn is_depthwise(self) -> bool {
        matches!(self, Site::LcmDw | Site::SpmDw)
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::LcmWa => "lcm.wa",
            Site::LcmWv => "lcm.wv",
            Site::LcmDw => "lcm.dw",
            Site::MlpUp => "mlp.w_up",
            Site::SpmWa => "spm.wa",
            Site::SpmWv => "spm.wv",
            Site::SpmDw => "spm.dw",
        }
    }
}

fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

impl<T: Real> Gate<T> {
    fn init(c: usize, k: usize, layer_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let lin = 1.0 / (c as f64).sqrt();
        Gate {
            ln_gain: Tensor::full(&[c], T::one()),
            ln_shift: Tensor::zeros(&[c]),
            wa: uniform(&[c, c], lin, rng),
            ba: Tensor::zeros(&[c]),
            wv: uniform(&[c, c], lin, rng),
            bv: Tensor::zeros(&[c]),
            dw: uniform(&[c, 1, k, k], 1.0 / k as f64, rng),
            gamma: Tensor::full(&[c], T::lit(layer_scale)),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 8] {
        [&self.ln_gain, &self.ln_shift, &self.wa, &self.ba, &self.wv, &self.bv, &self.dw, &self.gamma]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.ln_gain,
            &mut self.ln_shift,
            &mut self.wa,
            &mut self.ba,
            &mut self.wv,
            &mut self.bv,
            &mut self.dw,
            &mut self.gamma,
        ]
    }
}

impl<T: Real> Mlp<T> {
    fn init(c: usize, hidden: usize, layer_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            ln_gain: Tensor::full(&[c], T::one()),
            ln_shift: Tensor::zeros(&[c]),
            w_up: uniform(&[hidden, c], 1.0 / (c as f64).sqrt(), rng),
            b_up: Tensor::zeros(&[hidden]),
            w_down: uniform(&[c, hidden], 1.0 / (hidden as f64).sqrt(), rng),
            b_down: Tensor::zeros(&[c]),
            gamma: Tensor::full(&[c], T::lit(layer_scale)),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 7] {
        [&self.ln_gain, &self.ln_shift, &self.w_up, &self.b_up, &self.w_down, &self.b_down, &self.gamma]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 7] {
        [
            &mut self.ln_gain,
            &mut self.ln_shift,
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_down,
            &mut self.b_down,
            &mut self.gamma,
        ]
    }
}

/// Default LayerScale initial value.
pub const LAYER_SCALE_INIT: f64 = 1e-2;

impl<T: Real> ModelWeights<T> {
    /// Seeded random initialisation.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_scale(config, seed, LAYER_SCALE_INIT)
    }

    pub fn init_with_scale(config: &ModelConfig, seed: u64, layer_scale: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let k0 = config.embed_kernel;
        let cin = config.channels_in;
        let embed_w = uniform(&[c, cin, k0, k0], 1.0 / ((cin * k0 * k0) as f64).sqrt(), &mut rng);
        let blocks = (0..config.depth)
            .map(|_| Block {
                lcm: Gate::init(c, config.block_kernel, layer_scale, &mut rng),
                mlp: Mlp::init(c, config.hidden(), layer_scale, &mut rng),
                spm: Gate::init(c, config.spm_kernel, layer_scale, &mut rng),
            })
            .collect();
        let k = config.mixtures;
        let out = config.head_outputs();
        let head_w = uniform(&[out, c], 0.1 / (c as f64).sqrt(), &mut rng);
        // Means spread over the normalized range, scales start near 0.1.
        let raw_scale = ((0.1 - SCALE_FLOOR).exp_m1()).ln();
        let mut hb = vec![T::zero(); out];
        for ch in 0..cin {
            for j in 0..k {
                let span = (config.v_max - config.v_min) as f64;
                hb[ch * 3 * k + k + j] = T::lit(config.v_min as f64 + span * (j as f64 + 0.5) / k as f64);
                hb[ch * 3 * k + 2 * k + j] = T::lit(raw_scale);
            }
        }
        Ok(ModelWeights {
            config: config.clone(),
            embed_w,
            embed_b: Tensor::zeros(&[c]),
            blocks,
            head_w,
            head_b: Tensor::from_vec(&[out], hb)?,
        })
    }

    /// Every tensor in a fixed order (also the weight-file order).
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.embed_w, &self.embed_b];
        for b in &self.blocks {
            v.extend(b.lcm.tensors());
            v.extend(b.mlp.tensors());
            v.extend(b.spm.tensors());
        }
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.embed_w, &mut self.embed_b];
        for b in &mut self.blocks {
            v.extend(b.lcm.tensors_mut());
            v.extend(b.mlp.tensors_mut());
            v.extend(b.spm.tensors_mut());
        }
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    /// Same structure, all zeros; used for gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn site(&self, block: usize, site: Site) -> &Tensor<T> {
        let b = &self.blocks[block];
        match site {
            Site::LcmWa => &b.lcm.wa,
            Site::LcmWv => &b.lcm.wv,
            Site::LcmDw => &b.lcm.dw,
            Site::MlpUp => &b.mlp.w_up,
            Site::SpmWa => &b.spm.wa,
            Site::SpmWv => &b.spm.wv,
            Site::SpmDw => &b.spm.dw,
        }
    }

    pub fn site_mut(&mut self, block: usize, site: Site) -> &mut Tensor<T> {
        let b = &mut self.blocks[block];
        match site {
            Site::LcmWa => &mut b.lcm.wa,
            Site::LcmWv => &mut b.lcm.wv,
            Site::LcmDw => &mut b.lcm.dw,
            Site::MlpUp => &mut b.mlp.w_up,
            Site::SpmWa => &mut b.spm.wa,
            Site::SpmWv => &mut b.spm.wv,
            Site::SpmDw => &mut b.spm.dw,
        }
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        let cg = |g: &Gate<T>| Gate {
            ln_gain: g.ln_gain.cast(),
            ln_shift: g.ln_shift.cast(),
            wa: g.wa.cast(),
            ba: g.ba.cast(),
            wv: g.wv.cast(),
            bv: g.bv.cast(),
            dw: g.dw.cast(),
            gamma: g.gamma.cast(),
        };
        ModelWeights {
            config: self.config.clone(),
            embed_w: self.embed_w.cast(),
            embed_b: self.embed_b.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    lcm: cg(&b.lcm),
                    mlp: Mlp {
                        ln_gain: b.mlp.ln_gain.cast(),
                        ln_shift: b.mlp.ln_shift.cast(),
                        w_up: b.mlp.w_up.cast(),
                        b_up: b.mlp.b_up.cast(),
                        w_down: b.mlp.w_down.cast(),
                        b_down: b.mlp.b_down.cast(),
                        gamma: b.mlp.gamma.cast(),
                    },
                    spm: cg(&b.spm),
                })
                .collect(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }

    /// Hard error if any parameter is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        for t in self.tensors() {
            t.check_finite("model weights")?;
        }
        Ok(())
    }
}

const WEIGHT_MAGIC: &[u8; 8] = b"HPACWTS1";

fn config_record(cfg: &ModelConfig) -> [u32; 13] {
    [
        cfg.depth as u32,
        cfg.channels as u32,
        cfg.mlp_ratio as u32,
        cfg.embed_kernel as u32,
        cfg.block_kernel as u32,
        cfg.spm_kernel as u32,
        cfg.mixtures as u32,
        cfg.patch as u32,
        cfg.delta as u32,
        cfg.bit_depth as u32,
        cfg.v_min.to_bits(),
        cfg.v_max.to_bits(),
        cfg.channels_in as u32,
    ]
}

fn config_from_record(r: &[u32; 13]) -> Result<ModelConfig> {
    let cfg = ModelConfig {
        depth: r[0] as usize,
        channels: r[1] as usize,
        mlp_ratio: r[2] as usize,
        embed_kernel: r[3] as usize,
        block_kernel: r[4] as usize,
        spm_kernel: r[5] as usize,
        mixtures: r[6] as usize,
        patch: r[7] as usize,
        delta: r[8] as usize,
        bit_depth: u8::try_from(r[9]).map_err(|_| Error::Corrupt("bit depth field".into()))?,
        v_min: f32::from_bits(r[10]),
        v_max: f32::from_bits(r[11]),
        channels_in: r[12] as usize,
    };
    cfg.validate()?;
    if cfg.channels > 4096 || cfg.depth > 64 || cfg.mlp_ratio > 64 || cfg.block_kernel > 31 || cfg.spm_kernel > 31 || cfg.embed_kernel > 31 {
        return Err(Error::Corrupt("implausible model dimensions".into()));
    }
    Ok(cfg)
}

impl ModelWeights<f32> {
    fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.param_count() * 4);
        for t in self.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Content hash echoed in every bitstream. The bit depth is left out:
    /// it is a property of each coded image, not of the weights.
    pub fn hash(&self) -> u64 {
        let mut rec = config_record(&self.config);
        rec[9] = 0;
        let mut h = Sha256::new();
        for v in rec {
            h.update(v.to_le_bytes());
        }
        h.update(self.blob());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(WEIGHT_MAGIC)?;
        for v in config_record(&self.config) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.hash().to_le_bytes())?;
        w.write_all(&(self.param_count() as u64).to_le_bytes())?;
        w.write_all(&self.blob())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHT_MAGIC {
            return Err(Error::BadMagic);
        }
        let mut rec = [0u32; 13];
        let mut b4 = [0u8; 4];
        for v in rec.iter_mut() {
            r.read_exact(&mut b4)?;
            *v = u32::from_le_bytes(b4);
        }
        let cfg = config_from_record(&rec)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let stored = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut weights = ModelWeights::<f32>::init(&cfg, 0)?;
        if weights.param_count() != count {
            return Err(Error::Corrupt(format!(
                "weight file holds {} values, config needs {}",
                count,
                weights.param_count()
            )));
        }
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf)?;
        let mut it = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        for t in weights.tensors_mut() {
            for v in t.data_mut() {
                *v = it.next().unwrap();
            }
        }
        let actual = weights.hash();
        if actual != stored {
            return Err(Error::HashMismatch { expected: stored, actual });
        }
        weights.check_finite()?;
        Ok(weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
