// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense two-phase simplex for `max c.x  s.t.  A x <= b, x >= 0`.
//!
//! Pivoting follows Bland's rule, which cannot cycle. The tableau is small
//! for every graph this crate builds, so no sparse factorization is used.

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

struct Tableau {
    /// Rows of `[coefficients | rhs]`.
    rows: Vec<Vec<f64>>,
    basis: Vec<usize>,
    n_cols: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.rows[r][c];
        self.rows[r].iter_mut().for_each(|v| *v /= p);
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                row.iter_mut().zip(&pivot_row).for_each(|(v, p)| *v -= f * p);
            }
        }
        self.basis[r] = c;
    }

    /// Maximizes `obj` over the columns allowed by `usable`.
    fn optimize(&mut self, obj: &[f64], usable: &dyn Fn(usize) -> bool) -> Option<()> {
        let rhs = self.n_cols;
        loop {
            // reduced costs c_j - c_B B^-1 A_j
            let mut entering = None;
            for j in 0..self.n_cols {
                if !usable(j) || self.basis.contains(&j) {
                    continue;
                }
                let rc = obj[j] - self.rows.iter().zip(&self.basis).map(|(row, &b)| obj[b] * row[j]).sum::<f64>();
                if rc > EPS {
                    entering = Some(j);
                    break;
                }
            }
            let Some(c) = entering else { return Some(()) };
            let mut leave: Option<(usize, f64)> = None;
            for (i, row) in self.rows.iter().enumerate() {
                if row[c] > EPS {
                    let ratio = row[rhs] / row[c];
                    let better = match leave {
                        None => true,
                        Some((l, best)) => ratio < best - EPS || (ratio <= best + EPS && self.basis[i] < self.basis[l]),
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let (r, _) = leave?;
            self.pivot(r, c);
        }
    }

    fn value_of(&self, j: usize) -> f64 {
        self.basis
            .iter()
            .position(|&b| b == j)
            .map_or(0.0, |r| self.rows[r][self.n_cols])
    }
}

/// Solves `max c.x` subject to `a x <= b`, `x >= 0`.
pub(crate) fn solve(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> LpOutcome {
    let n = c.len();
    let m = a.len();
    let n_art = b.iter().filter(|&&v| v < 0.0).count();
    let n_cols = n + m + n_art;
    let mut rows = Vec::with_capacity(m);
    let mut basis = Vec::with_capacity(m);
    let mut art = n + m;
    for (i, (ai, &bi)) in a.iter().zip(b).enumerate() {
        let mut row = vec![0.0; n_cols + 1];
        let sign = if bi < 0.0 { -1.0 } else { 1.0 };
        for (j, &v) in ai.iter().enumerate() {
            row[j] = sign * v;
        }
        row[n + i] = sign;
        row[n_cols] = sign * bi;
        if bi < 0.0 {
            row[art] = 1.0;
            basis.push(art);
            art += 1;
        } else {
            basis.push(n + i);
        }
        rows.push(row);
    }
    let mut t = Tableau { rows, basis, n_cols };

    if n_art > 0 {
        let mut phase1 = vec![0.0; n_cols];
        phase1[n + m..].iter_mut().for_each(|v| *v = -1.0);
        t.optimize(&phase1, &|_| true).expect("phase one is bounded");
        let infeas: f64 = (n + m..n_cols).map(|j| t.value_of(j)).sum();
        if infeas > 1e-7 {
            return LpOutcome::Infeasible;
        }
        // drive remaining (zero-valued) artificials out of the basis
        let mut r = 0;
        while r < t.rows.len() {
            if t.basis[r] >= n + m {
                match (0..n + m).find(|&j| t.rows[r][j].abs() > EPS) {
                    Some(j) => t.pivot(r, j),
                    None => {
                        t.rows.remove(r);
                        t.basis.remove(r);
                        continue;
                    }
                }
            }
            r += 1;
        }
    }

    let mut obj = vec![0.0; n_cols];
    obj[..n].copy_from_slice(c);
    if t.optimize(&obj, &|j| j < n + m).is_none() {
        return LpOutcome::Unbounded;
    }
    let x: Vec<f64> = (0..n).map(|j| t.value_of(j)).collect();
    let value = x.iter().zip(c).map(|(x, c)| x * c).sum();
    LpOutcome::Optimal { x, value }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_problem() {
        // max 3x + 5y; x <= 4; 2y <= 12; 3x + 2y <= 18 -> (2, 6), 36
        let out = solve(&[3.0, 5.0], &[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 2.0]], &[4.0, 12.0, 18.0]);
        let LpOutcome::Optimal { x, value } = out else { panic!("{out:?}") };
        assert!((value - 36.0).abs() < 1e-9);
        assert!((x[0] - 2.0).abs() < 1e-9 && (x[1] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn lower_bounds_via_negative_rhs() {
        // max -x - y; x + y >= 2; x <= 3 -> value -2
        let out = solve(&[-1.0, -1.0], &[vec![-1.0, -1.0], vec![1.0, 0.0]], &[-2.0, 3.0]);
        let LpOutcome::Optimal { value, .. } = out else { panic!("{out:?}") };
        assert!((value + 2.0).abs() < 1e-9);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        assert_eq!(solve(&[1.0], &[vec![1.0], vec![-1.0]], &[1.0, -2.0]), LpOutcome::Infeasible);
        assert_eq!(solve(&[1.0, 0.0], &[vec![0.0, 1.0]], &[1.0]), LpOutcome::Unbounded);
    }
}
