// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::gelu;
use crate::error::{Error, Result};
use crate::util::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeaturizerKind {
    Identity,
    /// Rotation learned by distributed alignment search.
    Orthogonal,
    Pca,
    /// Identity basis with a learned coordinate mask.
    Mask,
    NonlinearMlp,
    TanhOrthogonal,
}

impl FeaturizerKind {
    pub const ALL: [FeaturizerKind; 6] = [
        FeaturizerKind::Identity,
        FeaturizerKind::Orthogonal,
        FeaturizerKind::Pca,
        FeaturizerKind::Mask,
        FeaturizerKind::NonlinearMlp,
        FeaturizerKind::TanhOrthogonal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeaturizerKind::Identity => "identity",
            FeaturizerKind::Orthogonal => "orthogonal",
            FeaturizerKind::Pca => "pca",
            FeaturizerKind::Mask => "mask",
            FeaturizerKind::NonlinearMlp => "nonlinear-mlp",
            FeaturizerKind::TanhOrthogonal => "tanh-orthogonal",
        }
    }
}

impl fmt::Display for FeaturizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeaturizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "identity" | "full-vector" => FeaturizerKind::Identity,
            "orthogonal" | "das" => FeaturizerKind::Orthogonal,
            "pca" => FeaturizerKind::Pca,
            "mask" | "dbm" => FeaturizerKind::Mask,
            "nonlinear-mlp" | "nonlinear" => FeaturizerKind::NonlinearMlp,
            "tanh-orthogonal" | "tanh" => FeaturizerKind::TanhOrthogonal,
            _ => return Err(Error::invalid(format!("unknown featurizer kind {s:?}"))),
        })
    }
}

/// Sorted, distinct feature coordinates (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureIndices(Vec<usize>);

impl FeatureIndices {
    pub fn new(mut indices: Vec<usize>, width: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("feature indices must be distinct"));
        }
        if let Some(&i) = indices.last().filter(|&&i| i >= width) {
            return Err(Error::invalid(format!("feature index {i} out of range for width {width}")));
        }
        Ok(Self(indices))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn leading(dims: usize) -> Self {
        Self((0..dims).collect())
    }

    pub fn all(width: usize) -> Self {
        Self::leading(width)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    pub(crate) fn check_width(&self, width: usize) -> Result<()> {
        if Self::new(self.0.clone(), width)? != *self {
            return Err(Error::invalid("feature indices must be sorted"));
        }
        Ok(())
    }

    /// 0/1 indicator of width `width`.
    pub fn indicator(&self, width: usize) -> Vec<f64> {
        let mut m = vec![0.0; width];
        for &i in &self.0 {
            m[i] = 1.0;
        }
        m
    }
}

/// Conditional plane rotation of the leading `dims` features.
///
/// Feature `i < dims` and its partner `dims + i` are rotated by the angle
/// `pi * tanh(GeLU(z W_u) W_d)_i`, where `z` holds the coordinates from `2 dims`
/// on. `z` passes through unchanged, so the inverse rotates back by the same angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub dims: usize,
    pub hidden: usize,
    /// Row-major `[width - 2 dims, hidden]`.
    pub w_u: Vec<f64>,
    /// Row-major `[hidden, dims]`.
    pub w_d: Vec<f64>,
}

impl Coupling {
    fn check(&self, width: usize) -> Result<()> {
        if self.dims == 0 || 2 * self.dims >= width {
            return Err(Error::invalid("coupling needs 0 < 2 dims < width"));
        }
        if self.w_u.len() != (width - 2 * self.dims) * self.hidden || self.w_d.len() != self.hidden * self.dims {
            return Err(Error::invalid("coupling weights do not match their dimensions"));
        }
        Ok(())
    }

    /// Rotation angle of each leading feature given the conditioning coordinates.
    pub fn angles(&self, z: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| gelu(z.iter().enumerate().map(|(i, r)| r * self.w_u[i * self.hidden + j]).sum()))
            .collect();
        (0..self.dims)
            .map(|c| {
                let a: f64 = h.iter().enumerate().map(|(j, hv)| hv * self.w_d[j * self.dims + c]).sum();
                std::f64::consts::PI * a.tanh()
            })
            .collect()
    }

    fn apply(&self, x: &mut [f64], inverse: bool) {
        let k = self.dims;
        let theta = self.angles(&x[2 * k..]);
        for (i, t) in theta.iter().enumerate() {
            let t = if inverse { -t } else { *t };
            let (s, c) = t.sin_cos();
            let (a, b) = (x[i], x[k + i]);
            x[i] = c * a - s * b;
            x[k + i] = s * a + c * b;
        }
    }
}

/// Invertible map from a site vector to feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub kind: FeaturizerKind,
    pub width: usize,
    /// Row-major orthogonal `[width, width]` matrix `Q` with features `x = h Q`; `None` is the identity.
    pub rotation: Option<Vec<f64>>,
    /// Per-coordinate mask logits of a mask featurizer.
    pub mask_logits: Option<Vec<f64>>,
    pub coupling: Option<Coupling>,
}

impl Featurizer {
    pub fn identity(width: usize) -> Self {
        Self {
            kind: FeaturizerKind::Identity,
            width,
            rotation: None,
            mask_logits: None,
            coupling: None,
        }
    }

    pub fn orthogonal(kind: FeaturizerKind, width: usize, rotation: Vec<f64>) -> Result<Self> {
        let f = Self {
            kind,
            width,
            rotation: Some(rotation),
            mask_logits: None,
            coupling: None,
        };
        f.validate()?;
        Ok(f)
    }

    /// Product of `width` Householder reflections with Gaussian vectors.
    pub fn random_orthogonal(width: usize, seed: u64) -> Self {
        let v = random_householder(width, width, seed);
        Self {
            kind: FeaturizerKind::Orthogonal,
            width,
            rotation: Some(householder_matrix(&v, width)),
            mask_logits: None,
            coupling: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::invalid("featurizer width must be positive"));
        }
        if let Some(q) = &self.rotation {
            if q.len() != self.width * self.width {
                return Err(Error::invalid("rotation is not width x width"));
            }
            let dev = gram_deviation(q, self.width);
            if !(dev < 1e-6) {
                return Err(Error::invalid(format!("rotation is not orthogonal (gram deviation {dev:.2e})")));
            }
        }
        if let Some(m) = &self.mask_logits {
            if m.len() != self.width {
                return Err(Error::invalid("mask logits do not match the width"));
            }
        }
        if let Some(c) = &self.coupling {
            c.check(self.width)?;
        }
        Ok(())
    }

    /// Max-norm deviation of `Q^T Q` from the identity (0 without a rotation).
    pub fn gram_deviation(&self) -> f64 {
        self.rotation.as_ref().map_or(0.0, |q| gram_deviation(q, self.width))
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.width {
            return Err(Error::shape("featurizer", format!("vector of {} for width {}", v.len(), self.width)));
        }
        Ok(())
    }

    pub fn features(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check_len(h)?;
        let mut x = match &self.rotation {
            Some(q) => row_times(h, q, self.width, false),
            None => h.to_vec(),
        };
        if let Some(c) = &self.coupling {
            c.apply(&mut x, false);
        }
        Ok(x)
    }

    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.check_len(y)?;
        let mut x = y.to_vec();
        if let Some(c) = &self.coupling {
            c.apply(&mut x, true);
        }
        Ok(match &self.rotation {
            Some(q) => row_times(&x, q, self.width, true),
            None => x,
        })
    }

    /// Max over probes of `|F^-1(F(h)) - h| / |h|` (probes with zero norm are skipped).
    pub fn round_trip_error(&self, probes: &[Vec<f64>]) -> Result<f64> {
        let mut worst = 0.0_f64;
        for h in probes {
            let back = self.inverse(&self.features(h)?)?;
            let n = norm(h);
            if n > 0.0 {
                let diff: Vec<f64> = back.iter().zip(h).map(|(a, b)| a - b).collect();
                worst = worst.max(norm(&diff) / n);
            }
        }
        Ok(worst)
    }

    /// Gates `sigmoid(logit)` of a mask featurizer.
    pub fn gates(&self) -> Option<Vec<f64>> {
        self.mask_logits
            .as_ref()
            .map(|m| m.iter().map(|&l| crate::autodiff::sigmoid(l)).collect())
    }

    /// Column `j` of the rotation, the input-space direction read by feature `j`.
    pub fn direction(&self, j: usize) -> Option<Vec<f64>> {
        if j >= self.width {
            return None;
        }
        Some(match &self.rotation {
            Some(q) => (0..self.width).map(|i| q[i * self.width + j]).collect(),
            None => (0..self.width).map(|i| f64::from(u8::from(i == j))).collect(),
        })
    }

    /// The same featurizer without its coupling layer.
    pub fn linear_part(&self) -> Self {
        Self {
            coupling: None,
            ..self.clone()
        }
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `h Q` or, with `transpose`, `h Q^T`.
pub(crate) fn row_times(h: &[f64], q: &[f64], d: usize, transpose: bool) -> Vec<f64> {
    (0..d)
        .map(|j| {
            (0..d)
                .map(|i| h[i] * if transpose { q[j * d + i] } else { q[i * d + j] })
                .sum()
        })
        .collect()
}

pub(crate) fn gram_deviation(q: &[f64], d: usize) -> f64 {
    let mut worst = 0.0_f64;
    for a in 0..d {
        for b in 0..d {
            let g: f64 = (0..d).map(|i| q[i * d + a] * q[i * d + b]).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
    }
    worst
}

/// `m` Gaussian Householder vectors, row-major `[m, width]`.
pub(crate) fn random_householder(m: usize, width: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..m * width).map(|_| StandardNormal.sample(&mut r)).collect()
}

/// Reflects `x` through the hyperplane orthogonal to `v`.
pub(crate) fn reflect(x: &mut [f64], v: &[f64]) {
    let vv: f64 = v.iter().map(|a| a * a).sum();
    let xv: f64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
    let c = 2.0 * xv / vv;
    x.iter_mut().zip(v).for_each(|(a, b)| *a -= c * b);
}

/// `Q = H_1 H_2 ... H_m` for Householder vectors `v` (row-major `[m, width]`).
pub(crate) fn householder_matrix(v: &[f64], width: usize) -> Vec<f64> {
    let mut q = vec![0.0; width * width];
    for r in 0..width {
        let row = &mut q[r * width..(r + 1) * width];
        row[r] = 1.0;
        for h in v.chunks(width) {
            reflect(row, h);
        }
    }
    q
}
