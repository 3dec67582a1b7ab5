// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng as _;

use super::AttributionScores;
use crate::error::{Error, Result};
use crate::tasks::TaskInstance;
use crate::util::rng;

pub const DEFAULT_RESAMPLES: usize = 50;
pub const DEFAULT_CONSISTENCY: f64 = 0.95;

/// Zeroes edges whose score sign is unstable across bootstrap resamples.
///
/// Scores are recomputed on `resamples` datasets drawn with replacement. An
/// edge survives when its most frequent sign (negative, zero or positive)
/// occurs in at least a `tau` fraction of them; survivors keep the score
/// computed on the full dataset.
pub fn bootstrap_filter<F>(
    score_fn: F,
    data: &[TaskInstance],
    resamples: usize,
    tau: f64,
    seed: u64,
) -> Result<AttributionScores>
where
    F: Fn(&[TaskInstance]) -> Result<AttributionScores>,
{
    if resamples < 2 {
        return Err(Error::invalid("bootstrap needs at least 2 resamples"));
    }
    if !(tau > 0.5 && tau <= 1.0) {
        return Err(Error::invalid(format!("consistency {tau} outside (0.5, 1]")));
    }
    if data.is_empty() {
        return Err(Error::invalid("bootstrap of an empty dataset"));
    }
    let full = score_fn(data)?;
    let n = full.values().len();
    let mut counts = vec![[0usize; 3]; n];
    let mut r = rng(seed);
    for _ in 0..resamples {
        let sample: Vec<TaskInstance> = (0..data.len())
            .map(|_| data[r.random_range(0..data.len())].clone())
            .collect();
        let s = score_fn(&sample)?;
        if s.graph() != full.graph() {
            return Err(Error::invalid("score function changed graphs between resamples"));
        }
        for (c, &v) in counts.iter_mut().zip(s.values()) {
            let k = if v > 0.0 {
                2
            } else if v < 0.0 {
                0
            } else {
                1
            };
            c[k] += 1;
        }
    }
    let g = full.graph().clone();
    let mut values = full.values().to_vec();
    let mut prov = full.provenance().clone();
    for (e, c) in counts.iter().enumerate() {
        let majority = *c.iter().max().expect("three classes");
        if (majority as f64) < tau * resamples as f64 {
            values[e] = 0.0;
            prov.filtered.push(g.edge_name(e).to_string());
        }
    }
    prov.method = format!("{}+bootstrap", prov.method);
    prov.notes.push(format!("bootstrap R={resamples} tau={tau} seed={seed}"));
    AttributionScores::new(g, values, prov)
}
