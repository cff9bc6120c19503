//! Group assignment inside a patch and the causal masks it implies.
//!
//! Pixel `(r, c)` of a `P × P` patch belongs to group `s = c + r·δ`.
//! Groups are decoded in ascending `s`; every pixel of one group is
//! predicted in parallel. `δ = 0` gives a column-by-column scan, `δ = P`
//! a raster scan.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScanSpec {
    pub patch: usize,
    pub delta: usize,
}

impl ScanSpec {
    pub fn new(patch: usize, delta: usize) -> Result<Self> {
        if patch == 0 {
            return Err(Error::Config("patch size must be at least 1".into()));
        }
        Ok(ScanSpec { patch, delta })
    }

    /// Size of the index range `0..=(1+δ)(P−1)`, occupied or not.
    pub fn num_groups(&self) -> usize {
        num_groups(self.patch, self.delta)
    }

    #[inline]
    pub fn group_of(&self, r: usize, c: usize) -> usize {
        group_index(r, c, self.delta)
    }
}

#[inline]
pub fn group_index(r: usize, c: usize, delta: usize) -> usize {
    c + r * delta
}

pub fn num_groups(patch: usize, delta: usize) -> usize {
    (1 + delta) * (patch - 1) + 1
}

/// One decoding step: a group index and its patch-local pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub index: usize,
    /// `(r, c)` in ascending row order.
    pub pixels: Vec<(usize, usize)>,
}

/// Non-empty groups in ascending index order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSchedule {
    pub spec: ScanSpec,
    pub groups: Vec<Group>,
}

impl GroupSchedule {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Position of group index `s` in [`groups`](Self::groups), if occupied.
    pub fn step_of(&self, s: usize) -> Option<usize> {
        self.groups.binary_search_by_key(&s, |g| g.index).ok()
    }

    /// `P × P` table of group indices, row-major.
    pub fn index_map(&self) -> Vec<usize> {
        let p = self.spec.patch;
        (0..p * p).map(|i| self.spec.group_of(i / p, i % p)).collect()
    }
}

pub fn build_schedule(spec: ScanSpec) -> GroupSchedule {
    let p = spec.patch;
    let mut buckets: Vec<Vec<(usize, usize)>> = vec![Vec::new(); spec.num_groups()];
    for r in 0..p {
        for c in 0..p {
            buckets[spec.group_of(r, c)].push((r, c));
        }
    }
    let groups = buckets
        .into_iter()
        .enumerate()
        .filter(|(_, px)| !px.is_empty())
        .map(|(index, pixels)| Group { index, pixels })
        .collect();
    GroupSchedule { spec, groups }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Only strictly earlier groups: `Δr·δ + Δc < 0`.
    Strict,
    /// Earlier or same group: `Δr·δ + Δc ≤ 0`. Includes the centre.
    Permissive,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskKernel {
    pub k: usize,
    pub kind: MaskKind,
    /// Row-major `k × k`; entry `(i, j)` is offset `(i − k/2, j − k/2)`.
    pub bits: Vec<bool>,
}

impl MaskKernel {
    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Active offsets `(Δr, Δc)` in row-major order.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let half = (self.k / 2) as isize;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| ((i / self.k) as isize - half, (i % self.k) as isize - half))
            .collect()
    }

    /// `1.0`/`0.0` form for the masked-conv kernels.
    pub fn as_weights<T: num_traits::Float>(&self) -> Vec<T> {
        self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
    }
}

pub fn build_mask(kind: MaskKind, k: usize, delta: usize) -> Result<MaskKernel> {
    if k % 2 == 0 {
        return Err(Error::Mask(format!("kernel size {} is not odd", k)));
    }
    let half = (k / 2) as isize;
    let d = delta as isize;
    let bits = (0..k * k)
        .map(|i| {
            let dr = (i / k) as isize - half;
            let dc = (i % k) as isize - half;
            let g = dr * d + dc;
            match kind {
                MaskKind::Strict => g < 0,
                MaskKind::Permissive => g <= 0,
            }
        })
        .collect();
    Ok(MaskKernel { k, kind, bits })
}
