// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interchange-intervention training of featurizers.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifact::{AlignmentArtifact, TrainingProvenance};
use super::featurizer::{gram_deviation, householder_matrix, random_householder, Coupling, FeatureIndices, Featurizer, FeaturizerKind};
use super::intervene::PairSet;
use super::site::{capture, placed_var, Delta, InterventionSite, SiteHooks};
use crate::autodiff::{Adam, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::util::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturizeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FeaturizeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 0.02,
            seed: 0,
        }
    }
}

/// A pair with its site vectors captured.
#[derive(Debug, Clone)]
struct Prepared {
    base: Vec<usize>,
    pos: usize,
    hb: Vec<f64>,
    hc: Vec<f64>,
    expected: usize,
}

fn prepare(model: &TransformerModel, site: &InterventionSite, pairs: &PairSet) -> Result<Vec<Prepared>> {
    if pairs.is_empty() {
        return Err(Error::invalid("training needs at least one pair"));
    }
    site.validate(model)?;
    pairs
        .pairs
        .par_iter()
        .map(|p| {
            let (hb, pos) = capture(model, &p.base, site)?;
            let (hc, _) = capture(model, &p.source, site)?;
            Ok(Prepared {
                base: p.base.clone(),
                pos,
                hb,
                hc,
                expected: p.expected,
            })
        })
        .collect()
}

/// Flat parameter layout of a featurizer under training.
///
/// Rotations are products of `width` Householder reflections, so they stay
/// orthogonal at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableFeaturizer {
    pub kind: FeaturizerKind,
    pub width: usize,
    /// Leading block `Π` (unused by the mask kind).
    pub dims: usize,
    /// Coupling width of the nonlinear kind.
    pub hidden: usize,
    /// Weight of `mean(gate)` for the mask kind.
    pub sparsity: f64,
}

impl TrainableFeaturizer {
    pub fn new(kind: FeaturizerKind, width: usize, dims: usize, hidden: usize, sparsity: f64) -> Result<Self> {
        match kind {
            FeaturizerKind::Identity | FeaturizerKind::Pca => {
                return Err(Error::invalid(format!("{kind} featurizers are not trained")));
            }
            FeaturizerKind::NonlinearMlp if dims == 0 || 2 * dims >= width || hidden < dims => {
                return Err(Error::invalid("the nonlinear featurizer needs 0 < 2 dims < width and hidden >= dims"));
            }
            FeaturizerKind::Orthogonal | FeaturizerKind::TanhOrthogonal if dims > width => {
                return Err(Error::invalid(format!("dims {dims} exceeds the site width {width}")));
            }
            _ => {}
        }
        Ok(Self {
            kind,
            width,
            dims,
            hidden,
            sparsity,
        })
    }

    fn rotated(&self) -> bool {
        self.kind != FeaturizerKind::Mask
    }

    fn n_householder(&self) -> usize {
        if self.rotated() {
            self.width * self.width
        } else {
            0
        }
    }

    /// Width of the coupling's conditioning block.
    fn rest(&self) -> usize {
        self.width - 2 * self.dims
    }

    pub fn n_params(&self) -> usize {
        match self.kind {
            FeaturizerKind::Mask => self.width,
            FeaturizerKind::NonlinearMlp => self.n_householder() + self.rest() * self.hidden + self.hidden * self.dims,
            _ => self.n_householder(),
        }
    }

    /// Starting point: Gaussian reflections (the same rotation as
    /// [`Featurizer::random_orthogonal`]), zero mask logits, a random `W_u` and a zero `W_d`.
    pub fn init(&self, seed: u64) -> Tensor {
        let mut p = Vec::with_capacity(self.n_params());
        if self.rotated() {
            p.extend(random_householder(self.width, self.width, seed));
        }
        match self.kind {
            FeaturizerKind::Mask => p.extend(vec![0.0; self.width]),
            FeaturizerKind::NonlinearMlp => {
                let mut r = rng(seed.wrapping_add(1));
                let n = Normal::new(0.0, 1.0 / (self.rest() as f64).sqrt()).expect("positive std");
                p.extend((0..self.rest() * self.hidden).map(|_| n.sample(&mut r)));
                p.extend(vec![0.0; self.hidden * self.dims]);
            }
            _ => {}
        }
        let n = p.len();
        Tensor::new(vec![1, n], p).expect("flat parameter row")
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::invalid(format!(
                "{} parameters for a layout of {}",
                params.len(),
                self.n_params()
            )));
        }
        Ok(())
    }

    /// Exported featurizer: the rotation (and coupling for the nonlinear kind).
    /// The tanh of the tanh-orthogonal kind is a training-time device and is not exported.
    pub fn featurizer(&self, params: &[f64]) -> Result<Featurizer> {
        self.check_params(params)?;
        let d = self.width;
        let mut f = Featurizer::identity(d);
        f.kind = self.kind;
        if self.rotated() {
            f.rotation = Some(householder_matrix(&params[..self.n_householder()], d));
        }
        match self.kind {
            FeaturizerKind::Mask => f.mask_logits = Some(params.to_vec()),
            FeaturizerKind::NonlinearMlp => {
                let off = self.n_householder();
                let nu = self.rest() * self.hidden;
                f.coupling = Some(Coupling {
                    dims: self.dims,
                    hidden: self.hidden,
                    w_u: params[off..off + nu].to_vec(),
                    w_d: params[off + nu..].to_vec(),
                });
            }
            _ => {}
        }
        f.validate()?;
        Ok(f)
    }

    /// Feature set `Π` of trained parameters.
    pub fn features(&self, params: &[f64]) -> Result<FeatureIndices> {
        self.check_params(params)?;
        match self.kind {
            FeaturizerKind::Mask => {
                let on = params
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| crate::autodiff::sigmoid(l) > 0.5)
                    .map(|(i, _)| i)
                    .collect();
                FeatureIndices::new(on, self.width)
            }
            _ => Ok(FeatureIndices::leading(self.dims)),
        }
    }

    /// `[rows, cols]` matrix from a contiguous block of the flat row.
    fn matrix(tape: &mut Tape, p: Var, offset: usize, rows: usize, cols: usize) -> Result<Var> {
        let parts = (0..rows)
            .map(|r| tape.slice_cols(p, offset + r * cols, cols))
            .collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        tape.concat(&parts, 0)
    }

    fn reflect(tape: &mut Tape, x: Var, v: Var) -> Result<Var> {
        let vt = tape.transpose(v)?;
        let vv = tape.matmul(v, vt)?;
        let inv = tape.reciprocal(vv)?;
        let c = tape.scale(inv, 2.0)?;
        let xv = tape.matmul(x, vt)?;
        let outer = tape.matmul(xv, v)?;
        let s = tape.scale_by(outer, c)?;
        tape.sub(x, s)
    }

    fn rotate(&self, tape: &mut Tape, p: Var, x: Var, inverse: bool) -> Result<Var> {
        let d = self.width;
        let mut x = x;
        let order: Vec<usize> = if inverse { (0..d).rev().collect() } else { (0..d).collect() };
        for i in order {
            let v = tape.slice_cols(p, i * d, d)?;
            x = Self::reflect(tape, x, v)?;
        }
        Ok(x)
    }

    /// Coupling angles `pi tanh(GeLU(z W_u) W_d)` as `(cos, sin)` for `[n, width - 2 dims]` inputs.
    fn coupling_angles(&self, tape: &mut Tape, p: Var, z: Var) -> Result<(Var, Var)> {
        let off = self.n_householder();
        let w_u = Self::matrix(tape, p, off, self.rest(), self.hidden)?;
        let w_d = Self::matrix(tape, p, off + self.rest() * self.hidden, self.hidden, self.dims)?;
        let h = tape.matmul(z, w_u)?;
        let h = tape.gelu(h)?;
        let a = tape.matmul(h, w_d)?;
        let a = tape.tanh(a)?;
        let theta = tape.scale(a, std::f64::consts::PI)?;
        Ok((tape.cos(theta)?, tape.sin(theta)?))
    }

    /// Rotates each (leading, partner) feature pair by its coupling angle, or back.
    fn couple(&self, tape: &mut Tape, p: Var, x: Var, inverse: bool) -> Result<Var> {
        let k = self.dims;
        let lead = tape.slice_cols(x, 0, k)?;
        let partner = tape.slice_cols(x, k, k)?;
        let z = tape.slice_cols(x, 2 * k, self.rest())?;
        let (c, s) = self.coupling_angles(tape, p, z)?;
        let s = if inverse { tape.scale(s, -1.0)? } else { s };
        let cl = tape.mul(c, lead)?;
        let sp = tape.mul(s, partner)?;
        let sl = tape.mul(s, lead)?;
        let cp = tape.mul(c, partner)?;
        let new_lead = tape.sub(cl, sp)?;
        let new_partner = tape.add(sl, cp)?;
        tape.concat(&[new_lead, new_partner, z], 1)
    }

    fn forward(&self, tape: &mut Tape, p: Var, x: Var) -> Result<Var> {
        if !self.rotated() {
            return Ok(x);
        }
        let x = self.rotate(tape, p, x, false)?;
        match self.kind {
            FeaturizerKind::TanhOrthogonal => tape.tanh(x),
            FeaturizerKind::NonlinearMlp => self.couple(tape, p, x, false),
            _ => Ok(x),
        }
    }

    fn inverse(&self, tape: &mut Tape, p: Var, y: Var) -> Result<Var> {
        if !self.rotated() {
            return Ok(y);
        }
        let x = match self.kind {
            FeaturizerKind::TanhOrthogonal => tape.atanh(y)?,
            FeaturizerKind::NonlinearMlp => self.couple(tape, p, y, true)?,
            _ => y,
        };
        self.rotate(tape, p, x, true)
    }

    /// Mean cross-entropy of the intervened outputs against the expected tokens
    /// (plus the sparsity term of the mask kind).
    fn batch_loss(&self, tape: &mut Tape, p: Var, model: &TransformerModel, site: &InterventionSite, batch: &[&Prepared]) -> Result<Var> {
        let d = self.width;
        let n = batch.len();
        let hb = Tensor::from_rows(&batch.iter().map(|b| b.hb.clone()).collect::<Vec<_>>())?;
        let hc = Tensor::from_rows(&batch.iter().map(|b| b.hc.clone()).collect::<Vec<_>>())?;
        let xb = tape.constant(hb)?;
        let xc = tape.constant(hc)?;
        let yb = self.forward(tape, p, xb)?;
        let yc = self.forward(tape, p, xc)?;
        let gate = match self.kind {
            FeaturizerKind::Mask => {
                let l = tape.slice_cols(p, 0, d)?;
                tape.sigmoid(l)?
            }
            _ => tape.constant(Tensor::new(vec![1, d], FeatureIndices::leading(self.dims).indicator(d))?)?,
        };
        let diff = tape.sub(yc, yb)?;
        let moved = tape.mul_row(diff, gate)?;
        let mixed = tape.add(yb, moved)?;
        let h = self.inverse(tape, p, mixed)?;
        let delta = tape.sub(h, xb)?;
        let wv = model.weights().to_tape(tape, false)?;
        let mut last = Vec::with_capacity(n);
        for (i, b) in batch.iter().enumerate() {
            let row = tape.slice_rows(delta, i, 1)?;
            let len = b.base.len();
            let placed = placed_var(tape, row, b.pos, len, d)?;
            let hooks = SiteHooks::new(model, site, Delta::Var(placed));
            let out = model.run(tape, &wv, &b.base, &hooks)?;
            last.push(tape.slice_rows(out.logits, len - 1, 1)?);
        }
        let logits = if last.len() == 1 { last[0] } else { tape.concat(&last, 0)? };
        let targets: Vec<usize> = batch.iter().map(|b| b.expected).collect();
        let ce = tape.cross_entropy(logits, &targets)?;
        if self.kind == FeaturizerKind::Mask && self.sparsity != 0.0 {
            let m = tape.mean(gate)?;
            let pen = tape.scale(m, self.sparsity)?;
            return tape.add(ce, pen);
        }
        Ok(ce)
    }

    /// The training objective over every pair of `pairs`, as a function of the flat parameters.
    pub fn objective<'a>(
        &'a self,
        model: &'a TransformerModel,
        site: &'a InterventionSite,
        pairs: &PairSet,
    ) -> Result<impl Fn(&mut Tape, Var) -> Result<Var> + 'a> {
        let prepared = prepare(model, site, pairs)?;
        self.check_site(model, site)?;
        Ok(move |tape: &mut Tape, p: Var| {
            let batch: Vec<&Prepared> = prepared.iter().collect();
            self.batch_loss(tape, p, model, site, &batch)
        })
    }

    fn check_site(&self, model: &TransformerModel, site: &InterventionSite) -> Result<()> {
        if site.width(model) != self.width {
            return Err(Error::invalid("featurizer width differs from the site width"));
        }
        Ok(())
    }

    /// Adam on the interchange objective; returns the final parameters, last loss and
    /// the largest gram deviation seen.
    fn fit(
        &self,
        model: &TransformerModel,
        site: &InterventionSite,
        pairs: &PairSet,
        cfg: &FeaturizeConfig,
    ) -> Result<(Vec<f64>, Option<f64>, f64)> {
        self.check_site(model, site)?;
        if cfg.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        let prepared = prepare(model, site, pairs)?;
        let mut params = self.init(cfg.seed);
        let mut opt = Adam::new(cfg.lr);
        let mut r = rng(cfg.seed ^ 0x5eed_ba7c);
        let mut last = None;
        let mut worst_gram = 0.0_f64;
        for step in 0..cfg.steps {
            let batch: Vec<&Prepared> = (0..cfg.batch_size.min(prepared.len()))
                .map(|_| &prepared[r.random_range(0..prepared.len())])
                .collect();
            let mut tape = Tape::new();
            let p = tape.param(params.clone())?;
            let diverged = |e: Error| Error::Divergence {
                step,
                what: e.to_string(),
            };
            let loss = self.batch_loss(&mut tape, p, model, site, &batch).map_err(diverged)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    what: "non-finite interchange loss".into(),
                });
            }
            tape.backward(loss).map_err(diverged)?;
            let grad = tape.grad_data(p);
            opt.step(&mut [&mut params], &[grad])?;
            last = Some(value);
            if self.rotated() {
                let q = householder_matrix(&params.data()[..self.n_householder()], self.width);
                let dev = gram_deviation(&q, self.width);
                if !(dev < 1e-6) {
                    return Err(Error::Divergence {
                        step,
                        what: format!("rotation lost orthogonality ({dev:.2e})"),
                    });
                }
                worst_gram = worst_gram.max(dev);
            }
        }
        Ok((params.into_data(), last, worst_gram))
    }

    fn train(
        &self,
        model: &TransformerModel,
        site: InterventionSite,
        pairs: &PairSet,
        cfg: &FeaturizeConfig,
        method: &str,
    ) -> Result<AlignmentArtifact> {
        let (params, last, worst_gram) = self.fit(model, &site, pairs, cfg)?;
        let mut notes = Vec::new();
        if self.rotated() {
            notes.push(format!("max gram deviation {worst_gram:.2e}"));
        }
        match self.kind {
            FeaturizerKind::TanhOrthogonal => notes.push("tanh applied during training only".into()),
            FeaturizerKind::Mask => notes.push(format!("sparsity {}", self.sparsity)),
            FeaturizerKind::NonlinearMlp => notes.push(format!("coupling hidden width {}", self.hidden)),
            _ => {}
        }
        AlignmentArtifact::new(
            model,
            self.featurizer(&params)?,
            self.features(&params)?,
            site,
            &pairs.variable,
            TrainingProvenance {
                method: method.into(),
                steps: cfg.steps,
                lr: cfg.lr,
                batch_size: cfg.batch_size,
                seed: cfg.seed,
                pairs: Some(format!("{:016x}", pairs.fingerprint())),
                final_loss: last,
                notes,
            },
        )
    }
}

/// Distributed alignment search: a learned rotation whose leading `dims`
/// coordinates carry the variable.
pub fn train_das(
    model: &TransformerModel,
    site: InterventionSite,
    pairs: &PairSet,
    dims: usize,
    cfg: &FeaturizeConfig,
) -> Result<AlignmentArtifact> {
    let t = TrainableFeaturizer::new(FeaturizerKind::Orthogonal, site.width(model), dims, 0, 0.0)?;
    t.train(model, site, pairs, cfg, "das")
}

/// As [`train_das`] with an elementwise tanh on the features during training.
pub fn train_tanh_orthogonal(
    model: &TransformerModel,
    site: InterventionSite,
    pairs: &PairSet,
    dims: usize,
    cfg: &FeaturizeConfig,
) -> Result<AlignmentArtifact> {
    let t = TrainableFeaturizer::new(FeaturizerKind::TanhOrthogonal, site.width(model), dims, 0, 0.0)?;
    t.train(model, site, pairs, cfg, "tanh-orthogonal")
}

/// Rotation followed by a coupling layer; the coupling's `W_d` starts at zero,
/// so zero steps reproduce the untrained rotation.
pub fn train_nonlinear(
    model: &TransformerModel,
    site: InterventionSite,
    pairs: &PairSet,
    dims: usize,
    hidden: usize,
    cfg: &FeaturizeConfig,
) -> Result<AlignmentArtifact> {
    let t = TrainableFeaturizer::new(FeaturizerKind::NonlinearMlp, site.width(model), dims, hidden, 0.0)?;
    t.train(model, site, pairs, cfg, "nonlinear-mlp")
}

/// Per-coordinate mask over the standard basis; `Π` is every coordinate whose
/// gate ends above 0.5.
pub fn train_dbm(
    model: &TransformerModel,
    site: InterventionSite,
    pairs: &PairSet,
    sparsity: f64,
    cfg: &FeaturizeConfig,
) -> Result<AlignmentArtifact> {
    if !(sparsity >= 0.0) {
        return Err(Error::invalid("sparsity weight must be non-negative"));
    }
    let t = TrainableFeaturizer::new(FeaturizerKind::Mask, site.width(model), 0, 0, sparsity)?;
    t.train(model, site, pairs, cfg, "dbm")
}
