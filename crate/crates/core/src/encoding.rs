// SPDX-License-Identifier: MIT OR Apache-2.0

//! The encoding probe: reconstruct layer representations from feature blocks,
//! measure unexplained variance (UV = SS_res / SS_tot = 1 − R²), and score each
//! feature set by how much UV rises when it is ablated from the full set.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{DatasetContainer, FeatureKind};
use crate::error::{ProbeError, Result};
use crate::linalg::{argmin_prefer_larger, fold_assignment, AlphaGrid, GramRidge, MomentStats};
use crate::sampling::{sample_frames, stratified_split_rows, SamplingPolicy, SplitGranularity, SplitPlan};

pub const FULL: &str = "full";

/// How UV is pooled across target dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum R2Mode {
    /// Σ SS_res / Σ SS_tot over every output dimension.
    #[default]
    Pooled,
    /// Mean of per-dimension SS_res / SS_tot.
    Uniform,
}

/// Everything that controls one probe run besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub grid: AlphaGrid,
    pub folds: usize,
    /// Drives frame sampling, the split and the CV folds.
    pub seed: u64,
    pub max_frames: usize,
    pub drop_silent: bool,
    pub split_ratio: f64,
    pub granularity: SplitGranularity,
    pub r2_mode: R2Mode,
    /// z-score numeric and embedding blocks on train statistics.
    pub standardize: bool,
    /// Skip cross-validation and fit every cell at this alpha (may be 0).
    pub fixed_alpha: Option<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            grid: AlphaGrid::default(),
            folds: 5,
            seed: 100,
            max_frames: SamplingPolicy::SPEECH_CAP,
            drop_silent: true,
            split_ratio: 0.8,
            granularity: SplitGranularity::Utterance,
            r2_mode: R2Mode::Pooled,
            standardize: false,
            fixed_alpha: None,
        }
    }
}

impl ProbeConfig {
    pub fn sampling_policy(&self) -> SamplingPolicy {
        SamplingPolicy {
            max_frames_per_utterance: self.max_frames,
            drop_silent: self.drop_silent,
            seed: self.seed,
        }
    }

    /// Samples frames and splits them; the split covers retained rows only.
    pub fn split(&self, ds: &DatasetContainer) -> Result<SplitPlan> {
        let rows = sample_frames(&ds.meta, &self.sampling_policy())?;
        stratified_split_rows(&ds.meta, &rows, self.split_ratio, self.seed, self.granularity)
    }
}

/// A feature set obtained by removing blocks from the full set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationSpec {
    pub name: String,
    pub removed: BTreeSet<String>,
}

impl AblationSpec {
    pub fn full() -> Self {
        Self {
            name: FULL.to_string(),
            removed: BTreeSet::new(),
        }
    }

    /// `full-a-b` for removed blocks `a` and `b`.
    pub fn removing<S: AsRef<str>>(blocks: &[S]) -> Self {
        let removed: BTreeSet<String> = blocks.iter().map(|b| b.as_ref().to_string()).collect();
        if removed.is_empty() {
            return Self::full();
        }
        let name = blocks
            .iter()
            .fold(FULL.to_string(), |acc, b| format!("{acc}-{}", b.as_ref()));
        Self { name, removed }
    }

    pub fn is_full(&self) -> bool {
        self.removed.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub layer: usize,
    pub ablation: String,
    pub seed: u64,
    pub uv_test: f64,
    pub uv_train: f64,
    pub r2_test: f64,
    pub alpha: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Every block was removed; the probe is the training mean.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionRow {
    pub layer: usize,
    pub ablation: String,
    pub seed: u64,
    pub delta_uv: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContributionTable {
    pub rows: Vec<ContributionRow>,
}

impl ContributionTable {
    pub fn get(&self, layer: usize, ablation: &str, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.ablation == ablation && r.seed == seed)
            .map(|r| r.delta_uv)
    }
}

/// Per-(layer, ablation) statistics of ΔUV across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub layer: usize,
    pub ablation: String,
    pub n_seeds: usize,
    pub mean_uv: f64,
    pub mean_delta_uv: f64,
    pub std_delta_uv: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_width: f64,
}

/// Pooled UV of a prediction, with SS_tot taken around `train_mean`.
pub fn unexplained_variance(t_true: &DMatrix<f64>, t_pred: &DMatrix<f64>, train_mean: &DVector<f64>) -> Result<f64> {
    unexplained_variance_with(t_true, t_pred, train_mean, R2Mode::Pooled)
}

pub fn unexplained_variance_with(
    t_true: &DMatrix<f64>,
    t_pred: &DMatrix<f64>,
    train_mean: &DVector<f64>,
    mode: R2Mode,
) -> Result<f64> {
    if t_true.shape() != t_pred.shape() || train_mean.len() != t_true.ncols() {
        return Err(ProbeError::Consistency(format!(
            "UV shapes disagree: true {:?}, predicted {:?}, mean {}",
            t_true.shape(),
            t_pred.shape(),
            train_mean.len()
        )));
    }
    let d = t_true.ncols();
    let mut ss_res = vec![0.0; d];
    let mut ss_tot = vec![0.0; d];
    for j in 0..d {
        for i in 0..t_true.nrows() {
            let t = t_true[(i, j)];
            ss_res[j] += (t - t_pred[(i, j)]).powi(2);
            ss_tot[j] += (t - train_mean[j]).powi(2);
        }
    }
    uv_from_sums(&ss_res, &ss_tot, mode)
}

fn uv_from_sums(ss_res: &[f64], ss_tot: &[f64], mode: R2Mode) -> Result<f64> {
    match mode {
        R2Mode::Pooled => {
            let tot: f64 = ss_tot.iter().sum();
            if tot <= 0.0 {
                return Err(ProbeError::Data("target is constant; UV is undefined".into()));
            }
            Ok(ss_res.iter().sum::<f64>() / tot)
        }
        R2Mode::Uniform => {
            if ss_tot.is_empty() {
                return Err(ProbeError::Data("no target dimensions".into()));
            }
            let mut acc = 0.0;
            for (r, t) in ss_res.iter().zip(ss_tot) {
                if *t <= 0.0 {
                    return Err(ProbeError::Data(
                        "a target dimension is constant; UV is undefined".into(),
                    ));
                }
                acc += r / t;
            }
            Ok(acc / ss_tot.len() as f64)
        }
    }
}

/// Predictor columns shared by all cells of a sweep, plus its layout.
struct Design {
    predictors: DMatrix<f64>,
    targets: DMatrix<f64>,
    spans: Vec<(String, Range<usize>)>,
    n_train: usize,
    d_model: usize,
}

fn build_design(ds: &DatasetContainer, layers: &[usize], plan: &SplitPlan, standardize: bool) -> Result<Design> {
    let rows: Vec<usize> = plan.train_rows.iter().chain(&plan.test_rows).copied().collect();
    let n_train = plan.train_rows.len();
    let names = ds.block_names();
    let (mut predictors, index) = if names.is_empty() {
        (DMatrix::zeros(rows.len(), 0), Default::default())
    } else {
        ds.assemble_rows(&names, &rows)?
    };
    for span in &index.spans {
        let scale = standardize && span.kind != FeatureKind::OneHot;
        for c in span.columns.clone() {
            let mut col = predictors.column_mut(c);
            let mean = col.rows(0, n_train).sum() / n_train as f64;
            col.add_scalar_mut(-mean);
            if scale {
                let sd = (col.rows(0, n_train).norm_squared() / n_train as f64).sqrt();
                if sd > 0.0 {
                    col /= sd;
                }
            }
        }
    }
    let d_model = ds.d_model();
    let mut targets = DMatrix::zeros(rows.len(), layers.len() * d_model);
    for (k, &l) in layers.iter().enumerate() {
        let m = &ds.layers[l];
        for c in 0..d_model {
            let mut sum = 0.0;
            for (i, &r) in rows.iter().enumerate() {
                let v = m.get(r, c);
                targets[(i, k * d_model + c)] = v;
                if i < n_train {
                    sum += v;
                }
            }
            targets
                .column_mut(k * d_model + c)
                .add_scalar_mut(-sum / n_train as f64);
        }
    }
    let spans = index.spans.into_iter().map(|s| (s.name, s.columns)).collect();
    Ok(Design {
        predictors,
        targets,
        spans,
        n_train,
        d_model,
    })
}

fn resolve_ablations(ds: &DatasetContainer, ablations: &[AblationSpec]) -> Result<Vec<AblationSpec>> {
    let names = ds.block_names();
    let mut out = vec![AblationSpec::full()];
    for a in ablations {
        if let Some(bad) = a.removed.iter().find(|b| !names.contains(&b.as_str())) {
            return Err(ProbeError::Config(format!(
                "ablation {} removes unknown block {bad:?}; valid blocks: {}",
                a.name,
                names.join(", ")
            )));
        }
        if !out.iter().any(|o| o.name == a.name) {
            out.push(a.clone());
        }
    }
    Ok(out)
}

/// Samples, splits, and fits every (layer, ablation) cell. The full set is
/// always fitted, first.
pub fn run_encoding_sweep(
    ds: &DatasetContainer,
    ablations: &[AblationSpec],
    layers: &[usize],
    cfg: &ProbeConfig,
) -> Result<Vec<FitReport>> {
    let plan = cfg.split(ds)?;
    run_encoding_sweep_on_split(ds, ablations, layers, cfg, &plan)
}

/// Like [`run_encoding_sweep`] with a caller-provided split.
pub fn run_encoding_sweep_on_split(
    ds: &DatasetContainer,
    ablations: &[AblationSpec],
    layers: &[usize],
    cfg: &ProbeConfig,
    plan: &SplitPlan,
) -> Result<Vec<FitReport>> {
    if layers.is_empty() {
        return Err(ProbeError::Config("no layers selected".into()));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= ds.n_layers()) {
        return Err(ProbeError::Config(format!(
            "layer {bad} out of range; container has {} layers",
            ds.n_layers()
        )));
    }
    if plan.test_rows.is_empty() {
        return Err(ProbeError::Consistency("split has no test rows".into()));
    }
    if let Some(a) = cfg.fixed_alpha {
        if !(a.is_finite() && a >= 0.0) {
            return Err(ProbeError::Config(format!("fixed alpha must be >= 0, got {a}")));
        }
    }
    let specs = resolve_ablations(ds, ablations)?;
    let design = build_design(ds, layers, plan, cfg.standardize)?;
    let n = design.predictors.nrows();
    let n_train = design.n_train;
    let train_pos: Vec<usize> = (0..n_train).collect();
    let test_pos: Vec<usize> = (n_train..n).collect();

    let folds = match cfg.fixed_alpha {
        Some(_) => Vec::new(),
        None => fold_assignment(n_train, cfg.folds, cfg.seed)?,
    };
    let fold_stats: Vec<MomentStats> = folds
        .iter()
        .map(|f| MomentStats::from_rows(&design.predictors, &design.targets, f))
        .collect();
    let train_stats = MomentStats::from_rows(&design.predictors, &design.targets, &train_pos);
    let test_stats = MomentStats::from_rows(&design.predictors, &design.targets, &test_pos);

    let cells: Vec<Vec<FitReport>> = specs
        .par_iter()
        .map(|spec| {
            let cols: Vec<usize> = design
                .spans
                .iter()
                .filter(|(name, _)| !spec.removed.contains(name))
                .flat_map(|(_, r)| r.clone())
                .collect();
            let ctx = Cell {
                spec,
                layers,
                cfg,
                d_model: design.d_model,
                n_train,
                n_test: n - n_train,
                degenerate: design.spans.iter().all(|(name, _)| spec.removed.contains(name)),
            };
            ctx.fit(
                &train_stats.select_predictors(&cols),
                &test_stats.select_predictors(&cols),
                &fold_stats
                    .iter()
                    .map(|s| s.select_predictors(&cols))
                    .collect::<Vec<_>>(),
            )
        })
        .collect::<Result<_>>()?;
    Ok(cells.into_iter().flatten().collect())
}

struct Cell<'a> {
    spec: &'a AblationSpec,
    layers: &'a [usize],
    cfg: &'a ProbeConfig,
    d_model: usize,
    n_train: usize,
    n_test: usize,
    degenerate: bool,
}

impl Cell<'_> {
    fn layer_cols(&self, k: usize) -> Range<usize> {
        k * self.d_model..(k + 1) * self.d_model
    }

    fn select_alphas(&self, train: &MomentStats, folds: &[MomentStats]) -> Result<Vec<f64>> {
        if let Some(a) = self.cfg.fixed_alpha {
            return Ok(vec![a; self.layers.len()]);
        }
        let grid = self.cfg.grid.values();
        let mut mse = vec![vec![0.0; grid.len()]; self.layers.len()];
        let all_cols = 0..self.layers.len() * self.d_model;
        for val in folds {
            let fit = GramRidge::fit(&train.sub(val))?;
            let eval = fit.prepare(val);
            let denom = (val.n * self.d_model) as f64;
            for (a, sse) in fit.column_sse_path(&eval, all_cols.clone(), grid)?.iter().enumerate() {
                for (k, acc) in mse.iter_mut().enumerate() {
                    acc[a] += sse.rows_range(self.layer_cols(k)).sum() / denom;
                }
            }
        }
        Ok(mse.iter().map(|m| grid[argmin_prefer_larger(m)]).collect())
    }

    fn fit(&self, train: &MomentStats, test: &MomentStats, folds: &[MomentStats]) -> Result<Vec<FitReport>> {
        let alphas = self.select_alphas(train, folds)?;
        let fit = GramRidge::fit(train)?;
        let on_test = fit.prepare(test);
        let on_train = fit.prepare(train);
        let mode = self.cfg.r2_mode;
        self.layers
            .iter()
            .enumerate()
            .map(|(k, &layer)| {
                let cols = self.layer_cols(k);
                let alpha = alphas[k];
                let uv_test = uv_from_sums(
                    fit.column_sse(&on_test, cols.clone(), alpha)?.as_slice(),
                    on_test.total_ss.rows_range(cols.clone()).as_slice(),
                    mode,
                )?;
                let uv_train = uv_from_sums(
                    fit.column_sse(&on_train, cols.clone(), alpha)?.as_slice(),
                    on_train.total_ss.rows_range(cols).as_slice(),
                    mode,
                )?;
                Ok(FitReport {
                    layer,
                    ablation: self.spec.name.clone(),
                    seed: self.cfg.seed,
                    uv_test,
                    uv_train,
                    r2_test: 1.0 - uv_test,
                    alpha,
                    n_train: self.n_train,
                    n_test: self.n_test,
                    degenerate: self.degenerate,
                })
            })
            .collect()
    }
}

/// ΔUV of every report against the full-set report of the same layer and seed.
pub fn contributions(reports: &[FitReport]) -> Result<ContributionTable> {
    let full: BTreeMap<(u64, usize), f64> = reports
        .iter()
        .filter(|r| r.ablation == FULL)
        .map(|r| ((r.seed, r.layer), r.uv_test))
        .collect();
    let rows = reports
        .iter()
        .map(|r| {
            let base = full.get(&(r.seed, r.layer)).ok_or_else(|| {
                ProbeError::Consistency(format!("no full-set report for layer {} seed {}", r.layer, r.seed))
            })?;
            Ok(ContributionRow {
                layer: r.layer,
                ablation: r.ablation.clone(),
                seed: r.seed,
                delta_uv: r.uv_test - base,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ContributionTable { rows })
}

/// Mean, sample standard deviation and normal-approximation 95% interval of
/// ΔUV across seeds, per (layer, ablation).
pub fn aggregate_seeds(reports: &[FitReport]) -> Result<Vec<SeedSummary>> {
    let table = contributions(reports)?;
    let mut cells: BTreeMap<(usize, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (r, c) in reports.iter().zip(&table.rows) {
        let e = cells.entry((r.layer, r.ablation.clone())).or_default();
        e.0.push(r.uv_test);
        e.1.push(c.delta_uv);
    }
    cells
        .into_iter()
        .map(|((layer, ablation), (uvs, deltas))| {
            let k = deltas.len();
            if k < 2 {
                return Err(ProbeError::Config(format!(
                    "seed statistics need at least 2 seeds; cell ({layer}, {ablation}) has {k}"
                )));
            }
            let mean = deltas.iter().sum::<f64>() / k as f64;
            let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            let std = var.sqrt();
            let half = 1.96 * std / (k as f64).sqrt();
            Ok(SeedSummary {
                layer,
                ablation,
                n_seeds: k,
                mean_uv: uvs.iter().sum::<f64>() / k as f64,
                mean_delta_uv: mean,
                std_delta_uv: std,
                ci_low: mean - half,
                ci_high: mean + half,
                ci_width: 2.0 * half,
            })
        })
        .collect()
}
