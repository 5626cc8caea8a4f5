// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoding probes: ridge regression onto feature vectors and one-vs-rest
//! ridge classification onto labels, from layer representations or from
//! other feature blocks.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{assemble_predictors, DatasetContainer, FeatureKind};
use crate::encoding::{unexplained_variance, ProbeConfig};
use crate::error::{ProbeError, Result};
use crate::linalg::{column_means, cv_select_alpha, ridge_solve, AlphaGrid};
use crate::sampling::SplitPlan;

/// Label given to rows of a one-hot block that carry no class.
pub const NO_LABEL: &str = "<none>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    R2,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::R2 => "r2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeReport {
    /// `None` when the predictors are feature blocks rather than a layer.
    pub layer: Option<usize>,
    pub target: String,
    pub metric: Metric,
    pub score: f64,
    /// Majority-class accuracy for classification, 0 for regression.
    pub baseline: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvSettings {
    pub grid: AlphaGrid,
    pub folds: usize,
    pub seed: u64,
}

impl From<&ProbeConfig> for CvSettings {
    fn from(cfg: &ProbeConfig) -> Self {
        Self {
            grid: cfg.grid.clone(),
            folds: cfg.folds,
            seed: cfg.seed,
        }
    }
}

/// What a decoding probe predicts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeTarget {
    /// A feature block: labels for one-hot blocks, the vectors otherwise.
    Block(String),
    /// The speaker column of the frame metadata.
    Speaker,
}

impl DecodeTarget {
    pub fn name(&self) -> &str {
        match self {
            DecodeTarget::Block(b) => b,
            DecodeTarget::Speaker => "speaker_id",
        }
    }

    pub fn parse(s: &str) -> Self {
        if s == "speaker_id" {
            DecodeTarget::Speaker
        } else {
            DecodeTarget::Block(s.to_string())
        }
    }
}

fn check_split(n: usize, split: &SplitPlan) -> Result<()> {
    if split.train_rows.is_empty() || split.test_rows.is_empty() {
        return Err(ProbeError::Consistency(
            "decoding needs non-empty train and test rows".into(),
        ));
    }
    if let Some(&r) = split.train_rows.iter().chain(&split.test_rows).max() {
        if r >= n {
            return Err(ProbeError::Consistency(format!(
                "split row {r} out of range for {n} rows"
            )));
        }
    }
    Ok(())
}

/// Ridge regression from `x` onto `target`; scored by pooled test R².
pub fn decode_regress(
    x: &DMatrix<f64>,
    target: &DMatrix<f64>,
    split: &SplitPlan,
    cv: &CvSettings,
) -> Result<DecodeReport> {
    if x.nrows() != target.nrows() {
        return Err(ProbeError::Consistency(format!(
            "predictors have {} rows, target {}",
            x.nrows(),
            target.nrows()
        )));
    }
    check_split(x.nrows(), split)?;
    let x_tr = x.select_rows(&split.train_rows);
    let t_tr = target.select_rows(&split.train_rows);
    let sel = cv_select_alpha(&x_tr, &t_tr, &cv.grid, cv.folds, cv.seed)?;
    let fit = ridge_solve(&x_tr, &t_tr, sel.alpha)?;
    let t_te = target.select_rows(&split.test_rows);
    let pred = fit.predict(&x.select_rows(&split.test_rows));
    let uv = unexplained_variance(&t_te, &pred, &column_means(&t_tr))?;
    Ok(DecodeReport {
        layer: None,
        target: String::new(),
        metric: Metric::R2,
        score: 1.0 - uv,
        baseline: 0.0,
        alpha: sel.alpha,
    })
}

/// Test accuracy of always answering the most frequent training label.
/// Ties go to the label that sorts first.
pub fn majority_baseline<S: AsRef<str>>(labels: &[S], split: &SplitPlan) -> Result<f64> {
    if split.train_rows.is_empty() {
        return Err(ProbeError::Consistency("majority baseline needs training rows".into()));
    }
    if split.test_rows.is_empty() {
        return Err(ProbeError::Consistency("majority baseline needs test rows".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for &r in &split.train_rows {
        *counts.entry(labels[r].as_ref()).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (label, c) in counts {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((label, c));
        }
    }
    let majority = best.expect("train rows are non-empty").0;
    let hits = split
        .test_rows
        .iter()
        .filter(|&&r| labels[r].as_ref() == majority)
        .count();
    Ok(hits as f64 / split.test_rows.len() as f64)
}

/// One-vs-rest ridge onto ±1 indicators, predicting the argmax score.
pub fn decode_classify<S: AsRef<str>>(
    x: &DMatrix<f64>,
    labels: &[S],
    split: &SplitPlan,
    cv: &CvSettings,
) -> Result<DecodeReport> {
    if x.nrows() != labels.len() {
        return Err(ProbeError::Consistency(format!(
            "predictors have {} rows, labels {}",
            x.nrows(),
            labels.len()
        )));
    }
    check_split(x.nrows(), split)?;
    let classes: Vec<&str> = {
        let mut c: Vec<&str> = split.train_rows.iter().map(|&r| labels[r].as_ref()).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    if classes.len() < 2 {
        return Err(ProbeError::Data(format!(
            "classification needs at least 2 classes in train, found {}",
            classes.len()
        )));
    }
    let class_of: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let indicators = DMatrix::from_fn(split.train_rows.len(), classes.len(), |i, k| {
        if class_of[labels[split.train_rows[i]].as_ref()] == k {
            1.0
        } else {
            -1.0
        }
    });
    let x_tr = x.select_rows(&split.train_rows);
    let sel = cv_select_alpha(&x_tr, &indicators, &cv.grid, cv.folds, cv.seed)?;
    let fit = ridge_solve(&x_tr, &indicators, sel.alpha)?;
    let scores = fit.predict(&x.select_rows(&split.test_rows));
    let mut hits = 0usize;
    let mut unseen = 0usize;
    for (i, &r) in split.test_rows.iter().enumerate() {
        let predicted = scores.row(i).transpose().argmax().0;
        match class_of.get(labels[r].as_ref()) {
            Some(&truth) if truth == predicted => hits += 1,
            Some(_) => {}
            None => unseen += 1,
        }
    }
    if unseen > 0 {
        log::warn!("{unseen} test rows carry classes absent from train; scored as wrong");
    }
    Ok(DecodeReport {
        layer: None,
        target: String::new(),
        metric: Metric::Accuracy,
        score: hits as f64 / split.test_rows.len() as f64,
        baseline: majority_baseline(labels, split)?,
        alpha: sel.alpha,
    })
}

enum Resolved {
    Labels(Vec<String>),
    Vectors(DMatrix<f64>),
}

fn resolve_target(ds: &DatasetContainer, target: &DecodeTarget) -> Result<Resolved> {
    match target {
        DecodeTarget::Speaker => Ok(Resolved::Labels(ds.meta.iter().map(|m| m.speaker_id.clone()).collect())),
        DecodeTarget::Block(name) => {
            let block = ds.block(name)?;
            if block.kind == FeatureKind::OneHot {
                Ok(Resolved::Labels(
                    block
                        .labels()?
                        .into_iter()
                        .map(|l| l.unwrap_or_else(|| NO_LABEL.to_string()))
                        .collect(),
                ))
            } else {
                Ok(Resolved::Vectors(block.data.to_dmatrix()))
            }
        }
    }
}

fn decode(x: &DMatrix<f64>, target: &Resolved, split: &SplitPlan, cv: &CvSettings) -> Result<DecodeReport> {
    match target {
        Resolved::Labels(labels) => decode_classify(x, labels, split, cv),
        Resolved::Vectors(v) => decode_regress(x, v, split, cv),
    }
}

/// Decodes a block (or the speaker) from other feature blocks instead of a layer.
pub fn feature_correlation_check(
    ds: &DatasetContainer,
    predictor_blocks: &[&str],
    target: &DecodeTarget,
    split: &SplitPlan,
    cv: &CvSettings,
) -> Result<DecodeReport> {
    if let DecodeTarget::Block(name) = target {
        if predictor_blocks.contains(&name.as_str()) {
            return Err(ProbeError::Config(format!("target block {name} is also a predictor")));
        }
    }
    let (x, _) = assemble_predictors(ds, predictor_blocks)?;
    let mut report = decode(&x, &resolve_target(ds, target)?, split, cv)?;
    report.target = target.name().to_string();
    Ok(report)
}

/// Decodes every target from every selected layer on one sampled split.
pub fn run_decoding_sweep(
    ds: &DatasetContainer,
    targets: &[DecodeTarget],
    layers: &[usize],
    cfg: &ProbeConfig,
) -> Result<Vec<DecodeReport>> {
    if let Some(&bad) = layers.iter().find(|&&l| l >= ds.n_layers()) {
        return Err(ProbeError::Config(format!(
            "layer {bad} out of range; container has {} layers",
            ds.n_layers()
        )));
    }
    let split = cfg.split(ds)?;
    let cv = CvSettings::from(cfg);
    let resolved = targets
        .iter()
        .map(|t| resolve_target(ds, t))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = layers
        .iter()
        .flat_map(|&l| (0..targets.len()).map(move |t| (l, t)))
        .collect();
    cells
        .par_iter()
        .map(|&(layer, t)| {
            let x = ds.layers[layer].to_dmatrix();
            let mut report = decode(&x, &resolved[t], &split, &cv)?;
            report.layer = Some(layer);
            report.target = targets[t].name().to_string();
            Ok(report)
        })
        .collect()
}
