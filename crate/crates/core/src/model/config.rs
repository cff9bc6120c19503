use crate::error::{Error, Result};
use crate::numerics::Conv2d;
use crate::prob::Alphabet;
use crate::scan::{build_mask, MaskKind, ScanSpec};

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub channels: usize,
    pub mlp_ratio: usize,
    pub embed_kernel: usize,
    pub block_kernel: usize,
    pub spm_kernel: usize,
    pub mixtures: usize,
    pub patch: usize,
    pub delta: usize,
    pub bit_depth: u8,
    pub v_min: f32,
    pub v_max: f32,
    pub channels_in: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 3,
            channels: 128,
            mlp_ratio: 4,
            embed_kernel: 3,
            block_kernel: 7,
            spm_kernel: 3,
            mixtures: 5,
            patch: 32,
            delta: 2,
            bit_depth: 8,
            v_min: -1.0,
            v_max: 1.0,
            channels_in: 3,
        }
    }
}

impl ModelConfig {
    /// The reduced-latency variant.
    pub fn fast() -> Self {
        ModelConfig { depth: 2, channels: 96, mixtures: 3, patch: 16, delta: 1, ..Self::default() }
    }

    /// Small network for desk-scale training runs.
    pub fn tiny() -> Self {
        ModelConfig { depth: 2, channels: 32, mixtures: 3, patch: 16, delta: 1, ..Self::default() }
    }

    pub fn with_channels_in(mut self, c: usize) -> Self {
        self.channels_in = c;
        self
    }

    pub fn with_bit_depth(mut self, b: u8) -> Self {
        self.bit_depth = b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.depth == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("depth, channels and mlp ratio must be positive");
        }
        for k in [self.embed_kernel, self.block_kernel, self.spm_kernel] {
            if k % 2 == 0 {
                return bad("kernel sizes must be odd");
            }
        }
        if self.mixtures == 0 || self.mixtures > 16 {
            return bad("mixture count must be in 1..=16");
        }
        if self.patch == 0 || self.patch > 255 || self.delta > 255 {
            return bad("patch and delta must fit in one byte");
        }
        if self.channels_in != 1 && self.channels_in != 3 {
            return bad("only 1 or 3 image channels are supported");
        }
        self.alphabet().map(|_| ())
    }

    pub fn scan(&self) -> ScanSpec {
        ScanSpec { patch: self.patch, delta: self.delta }
    }

    pub fn alphabet(&self) -> Result<Alphabet> {
        Alphabet::new(self.bit_depth, self.v_min as f64, self.v_max as f64)
    }

    pub fn hidden(&self) -> usize {
        self.channels * self.mlp_ratio
    }

    /// Head outputs per pixel: `[logits K][means K][raw scales K]` per channel.
    pub fn head_outputs(&self) -> usize {
        3 * self.mixtures * self.channels_in
    }

    pub fn layers(&self) -> Result<Layers> {
        let strict = build_mask(MaskKind::Strict, self.embed_kernel, self.delta)?;
        let perm = build_mask(MaskKind::Permissive, self.block_kernel, self.delta)?;
        Ok(Layers {
            embed: Conv2d::dense(self.channels_in, self.channels, self.embed_kernel)?
                .with_mask_bits(&strict.bits)?
                .with_tile(self.patch),
            lcm: Conv2d::depthwise(self.channels, self.block_kernel)?
                .with_mask_bits(&perm.bits)?
                .with_tile(self.patch),
            spm: Conv2d::depthwise(self.channels, self.spm_kernel)?.with_dilation(self.patch),
        })
    }
}

/// Spatial operators derived from a config.
#[derive(Clone, Debug)]
pub struct Layers {
    /// Strict-masked dense embedding, confined to one patch.
    pub embed: Conv2d,
    /// Permissive-masked depthwise conv, confined to one patch.
    pub lcm: Conv2d,
    /// Unmasked depthwise conv over the patch grid.
    pub spm: Conv2d,
}
