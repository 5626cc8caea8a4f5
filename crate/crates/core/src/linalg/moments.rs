// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ridge regression from sufficient statistics.
//!
//! A [`MomentStats`] holds `n`, column sums, `XᵀX`, `XᵀY` and per-column `Σy²`
//! of a row subset. Statistics are additive over disjoint row sets, so the
//! training statistics of every cross-validation fold are a difference of two
//! precomputed sums, and any column subset of the predictors (a feature
//! ablation) is a sub-block. [`GramRidge`] solves the centered normal equations
//! per alpha and evaluates squared errors for any target column range without
//! touching the rows again.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{ProbeError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MomentStats {
    pub n: usize,
    pub sum_x: DVector<f64>,
    pub sum_y: DVector<f64>,
    pub xx: DMatrix<f64>,
    pub xy: DMatrix<f64>,
    pub yy: DVector<f64>,
}

impl MomentStats {
    pub fn zeros(p: usize, d: usize) -> Self {
        Self {
            n: 0,
            sum_x: DVector::zeros(p),
            sum_y: DVector::zeros(d),
            xx: DMatrix::zeros(p, p),
            xy: DMatrix::zeros(p, d),
            yy: DVector::zeros(d),
        }
    }

    /// Statistics of the given rows of `x` and `y`.
    pub fn from_rows(x: &DMatrix<f64>, y: &DMatrix<f64>, rows: &[usize]) -> Self {
        let xs = x.select_rows(rows);
        let ys = y.select_rows(rows);
        let xt = xs.transpose();
        Self {
            n: rows.len(),
            sum_x: DVector::from_iterator(xs.ncols(), xs.column_iter().map(|c| c.sum())),
            sum_y: DVector::from_iterator(ys.ncols(), ys.column_iter().map(|c| c.sum())),
            xx: &xt * &xs,
            xy: &xt * &ys,
            yy: DVector::from_iterator(ys.ncols(), ys.column_iter().map(|c| c.norm_squared())),
        }
    }

    pub fn p(&self) -> usize {
        self.sum_x.len()
    }

    pub fn d(&self) -> usize {
        self.sum_y.len()
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            n: self.n + other.n,
            sum_x: &self.sum_x + &other.sum_x,
            sum_y: &self.sum_y + &other.sum_y,
            xx: &self.xx + &other.xx,
            xy: &self.xy + &other.xy,
            yy: &self.yy + &other.yy,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self {
            n: self.n - other.n,
            sum_x: &self.sum_x - &other.sum_x,
            sum_y: &self.sum_y - &other.sum_y,
            xx: &self.xx - &other.xx,
            xy: &self.xy - &other.xy,
            yy: &self.yy - &other.yy,
        }
    }

    /// Restricts the predictor side to `cols` (in the given order).
    pub fn select_predictors(&self, cols: &[usize]) -> Self {
        Self {
            n: self.n,
            sum_x: self.sum_x.select_rows(cols),
            sum_y: self.sum_y.clone(),
            xx: self.xx.select_rows(cols).select_columns(cols),
            xy: self.xy.select_rows(cols),
            yy: self.yy.clone(),
        }
    }

    pub fn mean_x(&self) -> DVector<f64> {
        &self.sum_x / self.n.max(1) as f64
    }

    pub fn mean_y(&self) -> DVector<f64> {
        &self.sum_y / self.n.max(1) as f64
    }

    /// `(X−1μxᵀ)ᵀ(X−1μxᵀ)`, `(X−1μxᵀ)ᵀ(Y−1μyᵀ)` and per-column `Σ(y−μy)²`.
    pub fn centered_at(&self, mu_x: &DVector<f64>, mu_y: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let n = self.n as f64;
        let g = &self.xx - &self.sum_x * mu_x.transpose() - mu_x * self.sum_x.transpose() + mu_x * mu_x.transpose() * n;
        let c = &self.xy - &self.sum_x * mu_y.transpose() - mu_x * self.sum_y.transpose() + mu_x * mu_y.transpose() * n;
        (g, c, self.total_ss(mu_y))
    }

    /// Per-column total sum of squares around `mu_y`.
    pub fn total_ss(&self, mu_y: &DVector<f64>) -> DVector<f64> {
        let n = self.n as f64;
        DVector::from_iterator(
            self.d(),
            (0..self.d()).map(|j| self.yy[j] - 2.0 * mu_y[j] * self.sum_y[j] + n * mu_y[j] * mu_y[j]),
        )
    }
}

/// Ridge fit on the centered training Gram matrix; each alpha is one Cholesky solve.
#[derive(Debug, Clone)]
pub struct GramRidge {
    n: usize,
    mu_x: DVector<f64>,
    mu_y: DVector<f64>,
    /// Centered `XᵀX` of the training rows.
    gram: DMatrix<f64>,
    /// Centered `XᵀY` of the training rows.
    cross: DMatrix<f64>,
}

/// Statistics of an evaluation row set, centered on a fit's training means.
#[derive(Debug, Clone)]
pub struct GramEval {
    pub n: usize,
    cross: DMatrix<f64>,
    gram: DMatrix<f64>,
    /// Per-column `Σ(y − μ_train)²` of the evaluation rows.
    pub total_ss: DVector<f64>,
}

impl GramRidge {
    pub fn fit(train: &MomentStats) -> Result<Self> {
        if train.n == 0 {
            return Err(ProbeError::Data("no training rows".into()));
        }
        let mu_x = train.mean_x();
        let mu_y = train.mean_y();
        let (g, cross, _) = train.centered_at(&mu_x, &mu_y);
        Ok(Self {
            n: train.n,
            mu_x,
            mu_y,
            gram: (&g + g.transpose()) * 0.5,
            cross,
        })
    }

    pub fn p(&self) -> usize {
        self.mu_x.len()
    }

    pub fn prepare(&self, eval: &MomentStats) -> GramEval {
        let (gram, cross, total_ss) = eval.centered_at(&self.mu_x, &self.mu_y);
        GramEval {
            n: eval.n,
            cross,
            gram,
            total_ss,
        }
    }

    /// `(G + αI)⁻¹ C` for target columns `cols`.
    fn solve(&self, cols: Range<usize>, alpha: f64) -> Result<DMatrix<f64>> {
        let rhs = self.cross.columns_range(cols);
        if self.p() == 0 {
            return Ok(DMatrix::zeros(0, rhs.ncols()));
        }
        if alpha == 0.0 {
            let sv = self.gram.singular_values();
            let tol = sv.max() * self.n.max(self.p()) as f64 * f64::EPSILON;
            if self.n <= self.p() || sv.min() <= tol {
                return Err(ProbeError::Singular(
                    "design matrix is rank deficient at alpha = 0".into(),
                ));
            }
        }
        let mut a = self.gram.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += alpha;
        }
        let chol = a.cholesky().ok_or_else(|| {
            ProbeError::Singular(format!(
                "regularized Gram matrix is not positive definite at alpha = {alpha}"
            ))
        })?;
        Ok(chol.solve(&rhs))
    }

    /// Squared error of each target column in `cols`, one vector per alpha.
    pub fn column_sse_path(&self, eval: &GramEval, cols: Range<usize>, alphas: &[f64]) -> Result<Vec<DVector<f64>>> {
        let tt = eval.total_ss.rows_range(cols.clone()).into_owned();
        let c_val = eval.cross.columns_range(cols.clone());
        alphas
            .iter()
            .map(|&alpha| {
                if self.p() == 0 {
                    return Ok(tt.clone());
                }
                let w = self.solve(cols.clone(), alpha)?;
                let gw = &eval.gram * &w;
                Ok(DVector::from_iterator(
                    w.ncols(),
                    (0..w.ncols()).map(|j| {
                        let wj = w.column(j);
                        (tt[j] - 2.0 * wj.dot(&c_val.column(j)) + wj.dot(&gw.column(j))).max(0.0)
                    }),
                ))
            })
            .collect()
    }

    /// Pooled squared error over target columns `cols`, one value per alpha.
    pub fn pooled_sse(&self, eval: &GramEval, cols: Range<usize>, alphas: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .column_sse_path(eval, cols, alphas)?
            .iter()
            .map(|v| v.sum())
            .collect())
    }

    /// Squared error of each target column in `cols` at one alpha.
    pub fn column_sse(&self, eval: &GramEval, cols: Range<usize>, alpha: f64) -> Result<DVector<f64>> {
        Ok(self.column_sse_path(eval, cols, &[alpha])?.remove(0))
    }

    /// Weights and intercept at one alpha for target columns `cols`.
    pub fn coefficients(&self, cols: Range<usize>, alpha: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let mu_y = self.mu_y.rows_range(cols.clone()).into_owned();
        let w = self.solve(cols, alpha)?;
        let b = mu_y - w.transpose() * &self.mu_x;
        Ok((w, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{fold_assignment, ridge_solve};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn coefficients_match_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, 80, 6).add_scalar(2.0);
        let y = randn(&mut rng, 80, 5);
        let rows: Vec<usize> = (0..80).collect();
        let fit = GramRidge::fit(&MomentStats::from_rows(&x, &y, &rows)).unwrap();
        for alpha in [0.0, 1e-3, 1.0, 100.0] {
            let (w, b) = fit.coefficients(1..4, alpha).unwrap();
            let direct = ridge_solve(&x, &y.columns(1, 3).into_owned(), alpha).unwrap();
            assert!((w - direct.weights).amax() < 1e-8);
            assert!((b - direct.intercept).amax() < 1e-8);
        }
    }

    #[test]
    fn sse_matches_explicit_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, 120, 7);
        let y = randn(&mut rng, 120, 4) + &x.columns(0, 4) * 0.5;
        let train: Vec<usize> = (0..90).collect();
        let test: Vec<usize> = (90..120).collect();
        let fit = GramRidge::fit(&MomentStats::from_rows(&x, &y, &train)).unwrap();
        let eval = fit.prepare(&MomentStats::from_rows(&x, &y, &test));
        let xt = x.select_rows(&test);
        let yt = y.select_rows(&test);
        for alpha in [1e-3, 0.7, 30.0] {
            let direct = ridge_solve(&x.select_rows(&train), &y.select_rows(&train), alpha).unwrap();
            let resid = &yt - direct.predict(&xt);
            let pooled = fit.pooled_sse(&eval, 0..4, &[alpha]).unwrap()[0];
            assert!((pooled - resid.norm_squared()).abs() < 1e-8 * resid.norm_squared());
            let cols = fit.column_sse(&eval, 1..3, alpha).unwrap();
            for (k, j) in (1..3).enumerate() {
                let want = resid.column(j).norm_squared();
                assert!((cols[k] - want).abs() < 1e-8 * want);
            }
        }
    }

    #[test]
    fn fold_statistics_are_differences_of_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, 50, 3);
        let y = randn(&mut rng, 50, 2);
        let folds = fold_assignment(50, 5, 9).unwrap();
        let parts: Vec<MomentStats> = folds.iter().map(|f| MomentStats::from_rows(&x, &y, f)).collect();
        let total = parts.iter().fold(MomentStats::zeros(3, 2), |acc, s| acc.add(s));
        let train0 = total.sub(&parts[0]);
        let rows: Vec<usize> = folds[1..].concat();
        let direct = MomentStats::from_rows(&x, &y, &rows);
        assert_eq!(train0.n, direct.n);
        assert!((train0.xx - direct.xx).amax() < 1e-10);
        assert!((train0.xy - direct.xy).amax() < 1e-10);
    }

    #[test]
    fn empty_design_predicts_training_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::zeros(30, 0);
        let y = randn(&mut rng, 30, 2);
        let rows: Vec<usize> = (0..30).collect();
        let stats = MomentStats::from_rows(&x, &y, &rows);
        let fit = GramRidge::fit(&stats).unwrap();
        let eval = fit.prepare(&stats);
        let sse = fit.pooled_sse(&eval, 0..2, &[1.0]).unwrap()[0];
        assert!((sse - stats.total_ss(&stats.mean_y()).sum()).abs() < 1e-12);
    }
}
