// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use super::artifact::{AlignmentArtifact, TrainingProvenance};
use super::featurizer::{FeatureIndices, Featurizer, FeaturizerKind};
use super::site::{capture, InterventionSite};
use crate::error::{Error, Result};
use crate::model::TransformerModel;
use crate::tasks::{dataset_fingerprint, TaskInstance};

/// Relative eigenvalue below which a component counts as absent.
const RANK_TOLERANCE: f64 = 1e-10;

/// Principal axes of a set of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Row-major `[d, d]`; column `j` is the `j`-th component.
    pub components: Vec<f64>,
    /// Variance along each component, descending.
    pub explained_variance: Vec<f64>,
    pub rank: usize,
}

/// Eigendecomposition of the sample covariance of `acts`.
pub fn pca_basis(acts: &[Vec<f64>]) -> Result<PcaBasis> {
    let n = acts.len();
    if n < 2 {
        return Err(Error::invalid("PCA needs at least two vectors"));
    }
    let d = acts[0].len();
    if d == 0 || acts.iter().any(|a| a.len() != d) {
        return Err(Error::invalid("PCA vectors must share a positive width"));
    }
    let mut mean = vec![0.0; d];
    for a in acts {
        mean.iter_mut().zip(a).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |r, c| acts[r][c] - mean[c]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = vec![0.0; d * d];
    let mut explained_variance = Vec::with_capacity(d);
    for (j, &k) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(k);
        // sign convention: the largest-magnitude entry is positive
        let pivot = (0..d).fold(0, |best, i| if col[i].abs() > col[best].abs() { i } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[i * d + j] = sign * col[i];
        }
        explained_variance.push(eig.eigenvalues[k].max(0.0));
    }
    let top = explained_variance[0];
    let rank = explained_variance.iter().filter(|&&v| v > RANK_TOLERANCE * top.max(f64::MIN_POSITIVE)).count();
    Ok(PcaBasis {
        mean,
        components,
        explained_variance,
        rank,
    })
}

/// Mean squared error of reconstructing `acts` from their top `dims` components.
pub fn reconstruction_error(acts: &[Vec<f64>], basis: &PcaBasis, dims: usize) -> f64 {
    let d = basis.mean.len();
    let dims = dims.min(d);
    let mut total = 0.0;
    for a in acts {
        let c: Vec<f64> = a.iter().zip(&basis.mean).map(|(x, m)| x - m).collect();
        let mut recon = vec![0.0; d];
        for j in 0..dims {
            let coef: f64 = (0..d).map(|i| c[i] * basis.components[i * d + j]).sum();
            for i in 0..d {
                recon[i] += coef * basis.components[i * d + j];
            }
        }
        total += c.iter().zip(&recon).map(|(x, r)| (x - r) * (x - r)).sum::<f64>();
    }
    total / acts.len().max(1) as f64
}

/// Featurizer onto the principal components of site activations over the
/// prompts and counterfactual prompts of `data`; `Π` is the top `dims` components.
pub fn fit_pca(
    model: &TransformerModel,
    site: InterventionSite,
    data: &[TaskInstance],
    variable: &str,
    dims: usize,
) -> Result<(AlignmentArtifact, PcaBasis)> {
    let d = site.width(model);
    if dims > d {
        return Err(Error::invalid(format!("dims {dims} exceeds the site width {d}")));
    }
    site.validate(model)?;
    let acts = data
        .par_iter()
        .flat_map(|inst| [&inst.tokens, &inst.cf_tokens].into_par_iter())
        .map(|t| capture(model, t, &site).map(|(h, _)| h))
        .collect::<Result<Vec<_>>>()?;
    let basis = pca_basis(&acts)?;
    let mut notes = Vec::new();
    let kept = if dims > basis.rank {
        notes.push(format!(
            "activations have rank {}; kept {} of {dims} requested components",
            basis.rank, basis.rank
        ));
        basis.rank
    } else {
        dims
    };
    notes.push(format!(
        "explained variance {:?}",
        basis.explained_variance.iter().take(kept).collect::<Vec<_>>()
    ));
    let featurizer = Featurizer::orthogonal(FeaturizerKind::Pca, d, basis.components.clone())?;
    let artifact = AlignmentArtifact::new(
        model,
        featurizer,
        FeatureIndices::leading(kept),
        site,
        variable,
        TrainingProvenance {
            method: "pca".into(),
            pairs: Some(format!("{:016x}", dataset_fingerprint(data))),
            notes,
            ..TrainingProvenance::default()
        },
    )?;
    Ok((artifact, basis))
}
