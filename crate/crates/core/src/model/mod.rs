//! The autoregressive network: strict-masked embedding, `N` blocks of
//! (masked gating, MLP, patch-grid gating) with pre-norm residuals and
//! LayerScale, and a per-pixel logistic-mixture head.

mod config;
mod forward;
mod weights;

pub use config::{Layers, ModelConfig};
pub use forward::{backward, forward, loss_and_grad, nll, ForwardState, Nll};
pub use weights::{Block, Gate, Mlp, ModelWeights, Site, LAYER_SCALE_INIT};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::prob::Alphabet;

/// Integer samples `[B, H, W, C]` padded to whole patches. Item `i` holds
/// real samples only in its top-left `real[i]` rectangle.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u32>,
    pub real: Vec<(usize, usize)>,
}

impl PixelBatch {
    pub fn new(batch: usize, height: usize, width: usize, channels: usize, data: Vec<u32>, real: Vec<(usize, usize)>) -> Result<Self> {
        if data.len() != batch * height * width * channels || real.len() != batch {
            return Err(Error::shape(format!(
                "pixel batch {}x{}x{}x{} with {} samples and {} extents",
                batch,
                height,
                width,
                channels,
                data.len(),
                real.len()
            )));
        }
        if real.iter().any(|&(h, w)| h > height || w > width) {
            return Err(Error::shape("real extent exceeds padded size"));
        }
        Ok(PixelBatch { batch, height, width, channels, data, real })
    }

    /// A single fully real item.
    pub fn single(height: usize, width: usize, channels: usize, data: Vec<u32>) -> Result<Self> {
        Self::new(1, height, width, channels, data, vec![(height, width)])
    }

    #[inline]
    pub fn is_real(&self, b: usize, y: usize, x: usize) -> bool {
        let (h, w) = self.real[b];
        y < h && x < w
    }

    pub fn real_samples(&self) -> usize {
        self.real.iter().map(|&(h, w)| h * w * self.channels).sum()
    }

    /// Model input: real samples mapped into the normalized range, padding
    /// left at normalized zero.
    pub fn normalize<T: Real>(&self, alphabet: &Alphabet) -> Result<Tensor<T>> {
        let mut out = Tensor::zeros(&[self.batch, self.height, self.width, self.channels]);
        let c = self.channels;
        let dst = out.data_mut();
        for b in 0..self.batch {
            for y in 0..self.height {
                for x in 0..self.width {
                    if !self.is_real(b, y, x) {
                        continue;
                    }
                    let i = ((b * self.height + y) * self.width + x) * c;
                    for ch in 0..c {
                        dst[i + ch] = T::lit(alphabet.normalize_checked(self.data[i + ch])?);
                    }
                }
            }
        }
        Ok(out)
    }
}
