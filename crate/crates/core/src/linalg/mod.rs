// SPDX-License-Identifier: MIT OR Apache-2.0

//! Multivariate ridge regression.
//!
//! The intercept is never penalized: predictors and targets are centered on
//! their column means before solving, and the intercept is recovered from the
//! means afterwards.

mod moments;

use std::cell::Cell;

use nalgebra::{DMatrix, DVector, QR, SVD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ProbeError, Result};

pub use moments::{GramEval, GramRidge, MomentStats};

/// Stream id used for fold shuffling, so that sampling, splitting and folds
/// draw from independent streams of the same seed.
pub(crate) const FOLD_STREAM: u64 = 3;

const SVD_MAX_ITER: usize = 10_000;

thread_local! {
    static SVD_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of SVD factorizations performed on the current thread.
pub fn svd_factorizations() -> usize {
    SVD_CALLS.with(Cell::get)
}

/// Strictly increasing positive regularization strengths.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaGrid {
    values: Vec<f64>,
}

impl AlphaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(ProbeError::Config("alpha grid is empty".into()));
        }
        if values.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(ProbeError::Config(
                "alpha grid values must be finite and positive".into(),
            ));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ProbeError::Config("alpha grid must be strictly increasing".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Default for AlphaGrid {
    /// `10^n` for `n` in `-3..=5`.
    fn default() -> Self {
        Self {
            values: (-3..=5).map(|n| 10f64.powi(n)).collect(),
        }
    }
}

/// A fitted ridge probe: `targets ≈ predictors · weights + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    /// p predictors × d targets.
    pub weights: DMatrix<f64>,
    pub intercept: DVector<f64>,
    pub alpha: f64,
}

impl RidgeFit {
    pub fn predict(&self, predictors: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = predictors * &self.weights;
        for mut row in out.row_iter_mut() {
            row += self.intercept.transpose();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RidgeOptions {
    pub fit_intercept: bool,
}

impl Default for RidgeOptions {
    fn default() -> Self {
        Self { fit_intercept: true }
    }
}

/// Result of cross-validated alpha selection.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSelection {
    pub alpha: f64,
    /// Mean validation MSE per grid value, grid order.
    pub mse: Vec<f64>,
}

fn check_inputs(p: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<()> {
    if p.nrows() == 0 {
        return Err(ProbeError::Data("ridge regression needs at least one row".into()));
    }
    if p.nrows() != t.nrows() {
        return Err(ProbeError::Consistency(format!(
            "predictors have {} rows, targets {}",
            p.nrows(),
            t.nrows()
        )));
    }
    if p.iter().chain(t.iter()).any(|v| !v.is_finite()) {
        return Err(ProbeError::Data("non-finite value in ridge inputs".into()));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(ProbeError::Config(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    Ok(())
}

pub(crate) fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

fn centered(m: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    out
}

struct Centered {
    p: DMatrix<f64>,
    t: DMatrix<f64>,
    mean_p: DVector<f64>,
    mean_t: DVector<f64>,
}

fn center(p: &DMatrix<f64>, t: &DMatrix<f64>, opts: RidgeOptions) -> Centered {
    if opts.fit_intercept {
        let mean_p = column_means(p);
        let mean_t = column_means(t);
        Centered {
            p: centered(p, &mean_p),
            t: centered(t, &mean_t),
            mean_p,
            mean_t,
        }
    } else {
        Centered {
            p: p.clone(),
            t: t.clone(),
            mean_p: DVector::zeros(p.ncols()),
            mean_t: DVector::zeros(t.ncols()),
        }
    }
}

fn finish(weights: DMatrix<f64>, c: &Centered, alpha: f64) -> RidgeFit {
    let intercept = &c.mean_t - weights.transpose() * &c.mean_p;
    RidgeFit {
        weights,
        intercept,
        alpha,
    }
}

/// Solves `min ‖T − PW − 1bᵀ‖² + alpha‖W‖²` with the default options.
pub fn ridge_solve(p: &DMatrix<f64>, t: &DMatrix<f64>, alpha: f64) -> Result<RidgeFit> {
    ridge_solve_with(p, t, alpha, RidgeOptions::default())
}

/// Direct solve through a QR factorization of the augmented system
/// `[P; √alpha·I] W = [T; 0]`.
pub fn ridge_solve_with(p: &DMatrix<f64>, t: &DMatrix<f64>, alpha: f64, opts: RidgeOptions) -> Result<RidgeFit> {
    check_inputs(p, t)?;
    check_alpha(alpha)?;
    let c = center(p, t, opts);
    let (n, k) = c.p.shape();
    let d = c.t.ncols();
    if k == 0 {
        return Ok(finish(DMatrix::zeros(0, d), &c, alpha));
    }
    if alpha == 0.0 && n < k {
        return Err(ProbeError::Singular(format!(
            "{n} rows cannot determine {k} unregularized coefficients"
        )));
    }
    let rows = if alpha > 0.0 { n + k } else { n };
    let mut a = DMatrix::zeros(rows, k);
    a.view_mut((0, 0), (n, k)).copy_from(&c.p);
    let mut b = DMatrix::zeros(rows, d);
    b.view_mut((0, 0), (n, d)).copy_from(&c.t);
    if alpha > 0.0 {
        let s = alpha.sqrt();
        for i in 0..k {
            a[(n + i, i)] = s;
        }
    }
    let qr = QR::new(a);
    let r = qr.r();
    let max_diag = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let tol = max_diag * rows.max(k) as f64 * f64::EPSILON;
    if (0..k).any(|i| r[(i, i)].abs() <= tol) {
        return Err(ProbeError::Singular(
            "design matrix is rank deficient at alpha = 0".into(),
        ));
    }
    qr.q_tr_mul(&mut b);
    let rhs = b.rows(0, k).into_owned();
    let weights = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| ProbeError::Singular("triangular solve failed".into()))?;
    Ok(finish(weights, &c, alpha))
}

/// Thin SVD of the centered design, reused for every alpha.
struct SvdPath {
    centered: Centered,
    /// Rows of Vᵀ, one per singular value.
    v_t: DMatrix<f64>,
    singular: DVector<f64>,
    /// Uᵀ · centered targets.
    ut_t: DMatrix<f64>,
    tol: f64,
}

impl SvdPath {
    fn new(p: &DMatrix<f64>, t: &DMatrix<f64>, opts: RidgeOptions) -> Result<Self> {
        let centered = center(p, t, opts);
        let (n, k) = centered.p.shape();
        SVD_CALLS.with(|c| c.set(c.get() + 1));
        let svd = SVD::try_new(centered.p.clone(), true, true, f64::EPSILON, SVD_MAX_ITER)
            .ok_or_else(|| ProbeError::Numerical("SVD did not converge".into()))?;
        let u = svd.u.expect("requested U");
        let v_t = svd.v_t.expect("requested V^T");
        let ut_t = u.transpose() * &centered.t;
        let s_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
        Ok(Self {
            centered,
            v_t,
            singular: svd.singular_values,
            ut_t,
            tol: s_max * n.max(k) as f64 * f64::EPSILON,
        })
    }

    fn fit(&self, alpha: f64) -> Result<RidgeFit> {
        let k = self.centered.p.ncols();
        let r = self.singular.len();
        if alpha == 0.0 && (r < k || self.singular.iter().any(|&s| s <= self.tol)) {
            return Err(ProbeError::Singular(
                "design matrix is rank deficient at alpha = 0".into(),
            ));
        }
        let mut scaled = self.ut_t.clone();
        for i in 0..r {
            let s = self.singular[i];
            let f = if s <= self.tol && alpha > 0.0 {
                0.0
            } else {
                s / (s * s + alpha)
            };
            scaled.row_mut(i).scale_mut(f);
        }
        let weights = self.v_t.transpose() * scaled;
        Ok(finish(weights, &self.centered, alpha))
    }
}

/// One fit per grid value, all from a single SVD of the centered design.
/// A one-value grid is answered by [`ridge_solve`] directly.
pub fn ridge_path(p: &DMatrix<f64>, t: &DMatrix<f64>, grid: &AlphaGrid) -> Result<Vec<RidgeFit>> {
    check_inputs(p, t)?;
    if let [alpha] = grid.values() {
        return Ok(vec![ridge_solve(p, t, *alpha)?]);
    }
    if p.ncols() == 0 {
        return grid.values().iter().map(|&a| ridge_solve(p, t, a)).collect();
    }
    let path = SvdPath::new(p, t, RidgeOptions::default())?;
    grid.values().iter().map(|&a| path.fit(a)).collect()
}

/// Splits `0..n` into `folds` contiguous chunks of a seeded permutation.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(ProbeError::Config(format!("need at least 2 folds, got {folds}")));
    }
    if n < folds {
        return Err(ProbeError::Config(format!("{n} rows are too few for {folds} folds")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(FOLD_STREAM);
    perm.shuffle(&mut rng);
    Ok((0..folds)
        .map(|f| perm[f * n / folds..(f + 1) * n / folds].to_vec())
        .collect())
}

/// Index of the smallest error; exact ties go to the larger alpha.
pub(crate) fn argmin_prefer_larger(errors: &[f64]) -> usize {
    let mut best = 0;
    for (i, &e) in errors.iter().enumerate() {
        if e <= errors[best] {
            best = i;
        }
    }
    best
}

fn take_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    m.select_rows(rows)
}

/// k-fold cross-validated choice of alpha by mean pooled validation MSE.
pub fn cv_select_alpha(
    p: &DMatrix<f64>,
    t: &DMatrix<f64>,
    grid: &AlphaGrid,
    folds: usize,
    seed: u64,
) -> Result<CvSelection> {
    check_inputs(p, t)?;
    let n = p.nrows();
    let chunks = fold_assignment(n, folds, seed)?;
    let d = t.ncols().max(1) as f64;
    let mut mse = vec![0.0; grid.len()];
    for (f, val) in chunks.iter().enumerate() {
        let train: Vec<usize> = chunks
            .iter()
            .enumerate()
            .filter(|(g, _)| *g != f)
            .flat_map(|(_, c)| c.iter().copied())
            .collect();
        let fits = ridge_path(&take_rows(p, &train), &take_rows(t, &train), grid)?;
        let p_val = take_rows(p, val);
        let t_val = take_rows(t, val);
        let denom = val.len() as f64 * d;
        for (i, fit) in fits.iter().enumerate() {
            let resid = &t_val - fit.predict(&p_val);
            mse[i] += resid.norm_squared() / denom;
        }
    }
    for m in &mut mse {
        *m /= folds as f64;
    }
    let alpha = grid.values()[argmin_prefer_larger(&mse)];
    Ok(CvSelection { alpha, mse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    /// Brute force on the centered normal equations.
    fn normal_equations(p: &DMatrix<f64>, t: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
        let pc = centered(p, &column_means(p));
        let tc = centered(t, &column_means(t));
        let mut a = pc.transpose() * &pc;
        for i in 0..a.nrows() {
            a[(i, i)] += alpha;
        }
        a.lu().solve(&(pc.transpose() * tc)).unwrap()
    }

    fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax()
    }

    #[test]
    fn default_grid_has_nine_powers_of_ten() {
        let g = AlphaGrid::default();
        assert_eq!(g.len(), 9);
        assert_eq!(g.values()[0], 1e-3);
        assert_eq!(g.values()[8], 1e5);
        assert!(AlphaGrid::new(vec![1.0, 1.0]).is_err());
        assert!(AlphaGrid::new(vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn identity_design_without_centering_reproduces_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = randn(&mut rng, 6, 6);
        let p = DMatrix::identity(6, 6);
        let fit = ridge_solve_with(&p, &t, 0.0, RidgeOptions { fit_intercept: false }).unwrap();
        assert!(max_abs_diff(&fit.weights, &t) < 1e-12);
    }

    #[test]
    fn huge_alpha_shrinks_to_the_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = randn(&mut rng, 40, 5);
        let t = randn(&mut rng, 40, 3).add_scalar(4.0);
        let fit = ridge_solve(&p, &t, 1e12).unwrap();
        assert!(fit.weights.norm() < 1e-6 * t.norm());
        let pred = fit.predict(&p);
        let means = column_means(&t);
        for r in 0..40 {
            for c in 0..3 {
                assert!((pred[(r, c)] - means[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matches_normal_equations_on_random_50x4() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = randn(&mut rng, 50, 4);
        let t = randn(&mut rng, 50, 3);
        let fit = ridge_solve(&p, &t, 0.1).unwrap();
        assert!(max_abs_diff(&fit.weights, &normal_equations(&p, &t, 0.1)) < 1e-8);
    }

    #[test]
    fn rank_deficient_unregularized_is_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = randn(&mut rng, 30, 3);
        let dup = p.column(0).clone_owned();
        p.set_column(2, &dup);
        let t = randn(&mut rng, 30, 2);
        assert!(matches!(ridge_solve(&p, &t, 0.0), Err(ProbeError::Singular(_))));
        assert!(ridge_solve(&p, &t, 1e-3).is_ok());
        let grid = AlphaGrid::new(vec![1e-3, 1.0]).unwrap();
        assert!(ridge_path(&p, &t, &grid).is_ok());
    }

    #[test]
    fn non_finite_input_is_data_error() {
        let mut p = DMatrix::from_element(5, 2, 1.0);
        p[(1, 1)] = f64::NAN;
        let t = DMatrix::from_element(5, 1, 1.0);
        assert!(matches!(ridge_solve(&p, &t, 1.0), Err(ProbeError::Data(_))));
    }

    #[test]
    fn path_matches_independent_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = randn(&mut rng, 100, 10);
        let t = randn(&mut rng, 100, 4);
        let grid = AlphaGrid::default();
        let path = ridge_path(&p, &t, &grid).unwrap();
        assert_eq!(path.len(), 9);
        for fit in &path {
            let direct = ridge_solve(&p, &t, fit.alpha).unwrap();
            assert!(max_abs_diff(&fit.weights, &direct.weights) < 1e-8);
            assert!((&fit.intercept - &direct.intercept).amax() < 1e-8);
        }
    }

    #[test]
    fn single_value_path_equals_solve_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = randn(&mut rng, 30, 4);
        let t = randn(&mut rng, 30, 2);
        let grid = AlphaGrid::new(vec![0.5]).unwrap();
        assert_eq!(ridge_path(&p, &t, &grid).unwrap()[0], ridge_solve(&p, &t, 0.5).unwrap());
    }

    #[test]
    fn path_uses_exactly_one_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = randn(&mut rng, 500, 64);
        let t = randn(&mut rng, 500, 768);
        let before = svd_factorizations();
        let fits = ridge_path(&p, &t, &AlphaGrid::default()).unwrap();
        assert_eq!(fits.len(), 9);
        assert_eq!(svd_factorizations() - before, 1);
    }

    #[test]
    fn cv_picks_smallest_alpha_for_noiseless_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = randn(&mut rng, 200, 6);
        let w = randn(&mut rng, 6, 3);
        let t = &p * w;
        let sel = cv_select_alpha(&p, &t, &AlphaGrid::default(), 5, 1).unwrap();
        assert_eq!(sel.mse.len(), 9);
        assert_eq!(sel.alpha, 1e-3);
        assert!(sel.mse.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn cv_picks_large_alpha_for_pure_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = randn(&mut rng, 200, 10);
        let t = randn(&mut rng, 200, 3);
        let sel = cv_select_alpha(&p, &t, &AlphaGrid::default(), 5, 1).unwrap();
        assert!(sel.alpha >= 1e3, "picked {}", sel.alpha);
    }

    #[test]
    fn cv_rejects_too_few_rows() {
        let p = DMatrix::from_element(3, 1, 1.0);
        let t = DMatrix::from_element(3, 1, 1.0);
        assert!(matches!(
            cv_select_alpha(&p, &t, &AlphaGrid::default(), 5, 0),
            Err(ProbeError::Config(_))
        ));
    }

    #[test]
    fn ties_prefer_larger_alpha() {
        assert_eq!(argmin_prefer_larger(&[1.0, 0.5, 0.5, 0.7]), 2);
    }

    #[test]
    fn folds_partition_rows() {
        let folds = fold_assignment(23, 5, 11).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(folds, fold_assignment(23, 5, 11).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn solve_matches_brute_force(seed in any::<u64>(), n in 5usize..200, p in 1usize..30,
                                         d in 1usize..20, a in 0usize..9) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pm = randn(&mut rng, n, p);
                let tm = randn(&mut rng, n, d);
                let alpha = AlphaGrid::default().values()[a];
                let fit = ridge_solve(&pm, &tm, alpha).unwrap();
                prop_assert!(max_abs_diff(&fit.weights, &normal_equations(&pm, &tm, alpha)) < 1e-8);
            }

            #[test]
            fn solve_is_deterministic(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pm = randn(&mut rng, 40, 5);
                let tm = randn(&mut rng, 40, 2);
                prop_assert_eq!(ridge_solve(&pm, &tm, 0.3).unwrap(), ridge_solve(&pm, &tm, 0.3).unwrap());
            }
        }
    }
}
