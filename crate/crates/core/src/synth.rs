// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic corpora with planted feature contributions.
//!
//! Each layer is generated as `T = Σ_s Z_s + ε`, where `Z_s` is the
//! standardized block `s` times a random mixing matrix, rescaled so that its
//! pooled variance is exactly `share_s · d_model`, and `ε` is isotropic
//! Gaussian noise with variance `noise_share`. With independent blocks, the
//! full probe should leave `noise_share` unexplained and ablating block `s`
//! should raise UV by `share_s`. Blocks listed in `redundancy` are functions
//! of another block and carry no variance of their own.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{DatasetContainer, FeatureBlock, FeatureKind, FrameMeta, Matrix};
use crate::error::{ProbeError, Result};

const FRAME_HOP: f64 = 0.02;
const SHARE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Independent standard normal columns.
    Numeric,
    /// Dense vectors, standard normal.
    Embedding,
    /// Per-frame softmax vectors, shaped like a phonetic posteriorgram.
    Probabilities,
    /// One-hot of a uniformly drawn class per frame.
    Categorical,
    /// One-hot speaker identity; width must equal the speaker count.
    Speaker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthBlock {
    pub name: String,
    pub kind: SynthKind,
    pub width: usize,
    pub planted_share: f64,
}

/// `derived` is the one-hot argmax over the first `width(derived)` columns of `source`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Redundancy {
    pub derived: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_model")]
    pub model: String,
    pub n_frames: usize,
    pub n_utterances: usize,
    pub n_speakers: usize,
    pub blocks: Vec<SynthBlock>,
    #[serde(default)]
    pub redundancy: Vec<Redundancy>,
    pub noise_share: f64,
    pub n_layers: usize,
    pub d_model: usize,
    /// Per layer, per block multiplier on the planted share; shares and noise
    /// are renormalized to sum to one afterwards.
    #[serde(default)]
    pub layer_mixing: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub silent_fraction: f64,
    pub seed: u64,
}

fn default_model() -> String {
    "synthetic".to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Small,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleBlock {
    pub name: String,
    pub expected_delta: f64,
    pub measured_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleLayer {
    pub layer: usize,
    pub expected_uv_full: f64,
    pub measured_uv_full: f64,
    pub blocks: Vec<OracleBlock>,
}

/// Expected and realized variance shares per layer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OracleTable {
    pub layers: Vec<OracleLayer>,
}

impl OracleTable {
    pub fn block(&self, layer: usize, name: &str) -> Option<&OracleBlock> {
        self.layers.get(layer)?.blocks.iter().find(|b| b.name == name)
    }

    /// `layer,target,expected,measured`; the `full` row holds UV of the full set.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| ProbeError::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record(["layer", "target", "expected", "measured"])
            .map_err(err)?;
        for l in &self.layers {
            let layer = l.layer.to_string();
            w.write_record([
                layer.as_str(),
                "full",
                &l.expected_uv_full.to_string(),
                &l.measured_uv_full.to_string(),
            ])
            .map_err(err)?;
            for b in &l.blocks {
                w.write_record([
                    layer.as_str(),
                    &b.name,
                    &b.expected_delta.to_string(),
                    &b.measured_delta.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| ProbeError::io(path, e))
    }
}

impl SynthSpec {
    /// Five-block corpus with the feature inventory of a speech model probe.
    pub fn reference(scale: Scale) -> Self {
        let (n_utterances, n_speakers) = match scale {
            Scale::Desk => (250, 40),
            Scale::Small => (25, 4),
        };
        let block = |name: &str, kind, width, planted_share| SynthBlock {
            name: name.to_string(),
            kind,
            width,
            planted_share,
        };
        let n_layers = 13;
        let layer_mixing = (0..n_layers)
            .map(|l| {
                let x = l as f64 / (n_layers - 1) as f64;
                vec![
                    1.6 - 1.2 * x,
                    0.5 + 4.0 * x * (1.0 - x),
                    1.5 - x,
                    0.5 + x,
                    0.6 + 0.8 * x,
                ]
            })
            .collect();
        Self {
            model: format!("reference-{}", if scale == Scale::Desk { "desk" } else { "small" }),
            n_frames: n_utterances * 24,
            n_utterances,
            n_speakers,
            blocks: vec![
                block("acoustics", SynthKind::Numeric, 25, 0.15),
                block("phonetics", SynthKind::Probabilities, 40, 0.2),
                block("speaker", SynthKind::Speaker, n_speakers, 0.1),
                block("syntax", SynthKind::Numeric, 60, 0.1),
                block("lexicon", SynthKind::Embedding, 50, 0.15),
            ],
            redundancy: vec![],
            noise_share: 0.3,
            n_layers,
            d_model: 64,
            layer_mixing: Some(layer_mixing),
            silent_fraction: 0.1,
            seed: 20_240_501,
        }
    }

    /// Two independent numeric blocks (shares ≈ 0.5 and 0.2, noise 0.3),
    /// 10 000 frames, 16 output dimensions, three layers.
    pub fn planted_pair(seed: u64) -> Self {
        Self {
            model: "planted-pair".into(),
            n_frames: 10_000,
            n_utterances: 1_000,
            n_speakers: 50,
            blocks: vec![
                SynthBlock {
                    name: "a".into(),
                    kind: SynthKind::Numeric,
                    width: 8,
                    planted_share: 0.5,
                },
                SynthBlock {
                    name: "b".into(),
                    kind: SynthKind::Numeric,
                    width: 8,
                    planted_share: 0.2,
                },
            ],
            redundancy: vec![],
            noise_share: 0.3,
            n_layers: 3,
            d_model: 16,
            layer_mixing: Some(vec![vec![1.0, 1.0], vec![1.1, 0.75], vec![0.9, 1.25]]),
            silent_fraction: 0.0,
            seed,
        }
    }

    /// Source block `w`, a derived one-hot `g = argmax(w)`, and an unrelated block `c`.
    pub fn redundant_pair(seed: u64) -> Self {
        Self {
            model: "redundant-pair".into(),
            n_frames: 6_000,
            n_utterances: 600,
            n_speakers: 30,
            blocks: vec![
                SynthBlock {
                    name: "w".into(),
                    kind: SynthKind::Embedding,
                    width: 4,
                    planted_share: 0.5,
                },
                SynthBlock {
                    name: "g".into(),
                    kind: SynthKind::Categorical,
                    width: 4,
                    planted_share: 0.0,
                },
                SynthBlock {
                    name: "c".into(),
                    kind: SynthKind::Numeric,
                    width: 6,
                    planted_share: 0.2,
                },
            ],
            redundancy: vec![Redundancy {
                derived: "g".into(),
                source: "w".into(),
            }],
            noise_share: 0.3,
            n_layers: 2,
            d_model: 16,
            layer_mixing: None,
            silent_fraction: 0.0,
            seed,
        }
    }

    fn infeasible(msg: impl Into<String>) -> ProbeError {
        ProbeError::Config(format!("infeasible synthetic spec: {}", msg.into()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_utterances == 0 || self.n_speakers == 0 || self.n_layers == 0 || self.d_model == 0 {
            return Err(Self::infeasible("counts must be positive"));
        }
        if self.n_speakers > self.n_utterances {
            return Err(Self::infeasible("more speakers than utterances"));
        }
        if self.n_frames < self.n_utterances {
            return Err(Self::infeasible("fewer frames than utterances"));
        }
        if self.blocks.is_empty() {
            return Err(Self::infeasible("no blocks"));
        }
        if !(0.0..1.0).contains(&self.silent_fraction) {
            return Err(Self::infeasible("silent_fraction must lie in [0, 1)"));
        }
        if !(self.noise_share.is_finite() && (0.0..=1.0).contains(&self.noise_share)) {
            return Err(Self::infeasible(format!(
                "noise_share {} outside [0, 1]",
                self.noise_share
            )));
        }
        let mut names = HashSet::new();
        let mut total = self.noise_share;
        for b in &self.blocks {
            if !names.insert(b.name.as_str()) {
                return Err(Self::infeasible(format!("duplicate block {}", b.name)));
            }
            if b.width == 0 {
                return Err(Self::infeasible(format!("block {} has width 0", b.name)));
            }
            if !(b.planted_share.is_finite() && b.planted_share >= 0.0) {
                return Err(Self::infeasible(format!(
                    "block {} has share {}",
                    b.name, b.planted_share
                )));
            }
            if b.kind == SynthKind::Speaker && b.width != self.n_speakers {
                return Err(Self::infeasible(format!(
                    "speaker block {} has width {}, corpus has {} speakers",
                    b.name, b.width, self.n_speakers
                )));
            }
            total += b.planted_share;
        }
        if (total - 1.0).abs() > SHARE_TOLERANCE {
            return Err(Self::infeasible(format!(
                "planted shares plus noise sum to {total}, not 1"
            )));
        }
        for r in &self.redundancy {
            let derived = self.block_spec(&r.derived)?;
            let source = self.block_spec(&r.source)?;
            if derived.kind != SynthKind::Categorical {
                return Err(Self::infeasible(format!(
                    "derived block {} must be categorical",
                    r.derived
                )));
            }
            if derived.planted_share != 0.0 {
                return Err(Self::infeasible(format!(
                    "derived block {} cannot carry its own share",
                    r.derived
                )));
            }
            if !matches!(
                source.kind,
                SynthKind::Numeric | SynthKind::Embedding | SynthKind::Probabilities
            ) {
                return Err(Self::infeasible(format!("source block {} must be dense", r.source)));
            }
            if self.redundancy.iter().any(|o| o.derived == r.source) {
                return Err(Self::infeasible(format!("source block {} is itself derived", r.source)));
            }
            if derived.width > source.width {
                return Err(Self::infeasible(format!(
                    "derived block {} is wider than its source",
                    r.derived
                )));
            }
        }
        if self.redundancy.iter().map(|r| &r.derived).collect::<HashSet<_>>().len() != self.redundancy.len() {
            return Err(Self::infeasible("a block is derived twice"));
        }
        if let Some(mix) = &self.layer_mixing {
            if mix.len() != self.n_layers || mix.iter().any(|row| row.len() != self.blocks.len()) {
                return Err(Self::infeasible("layer_mixing must be n_layers × n_blocks"));
            }
            if mix.iter().flatten().any(|m| !(m.is_finite() && *m >= 0.0)) {
                return Err(Self::infeasible("layer_mixing entries must be finite and >= 0"));
            }
            for l in 0..self.n_layers {
                let signal: f64 = self.raw_layer_weights(l).iter().sum();
                if signal + self.noise_share <= 0.0 {
                    return Err(Self::infeasible(format!("layer {l} has no variance")));
                }
            }
        }
        Ok(())
    }

    fn block_spec(&self, name: &str) -> Result<&SynthBlock> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Self::infeasible(format!("unknown block {name}")))
    }

    fn raw_layer_weights(&self, layer: usize) -> Vec<f64> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(s, b)| {
                let m = self.layer_mixing.as_ref().map_or(1.0, |mix| mix[layer][s]);
                b.planted_share * m
            })
            .collect()
    }

    /// Renormalized (block shares, noise share) of one layer.
    pub fn layer_shares(&self, layer: usize) -> (Vec<f64>, f64) {
        let raw = self.raw_layer_weights(layer);
        let total = raw.iter().sum::<f64>() + self.noise_share;
        (raw.iter().map(|w| w / total).collect(), self.noise_share / total)
    }
}

fn standardize_columns(m: &mut DMatrix<f64>) {
    let n = m.nrows() as f64;
    for mut col in m.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / n).sqrt();
        if sd > 0.0 {
            col /= sd;
        } else {
            col.fill(0.0);
        }
    }
}

/// Σ_j var(column j), population variance.
fn pooled_variance(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows() as f64;
    m.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
        })
        .sum()
}

fn one_hot(labels: &[usize], k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), k, |r, c| if labels[r] == c { 1.0 } else { 0.0 })
}

fn argmax_labels(source: &DMatrix<f64>, k: usize) -> Vec<usize> {
    (0..source.nrows())
        .map(|r| {
            let mut best = 0;
            for c in 1..k {
                if source[(r, c)] > source[(r, best)] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn to_matrix(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_dmatrix(m)
}

fn to_f32_matrix(m: &DMatrix<f64>) -> Matrix {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        data.extend(m.row(r).iter().map(|&v| v as f32));
    }
    Matrix::from_f32(m.nrows(), m.ncols(), data).expect("shape matches")
}

/// Builds the container and its oracle table. Deterministic per `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<(DatasetContainer, OracleTable)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_frames;

    let mut meta = Vec::with_capacity(n);
    let mut speaker_of_row = Vec::with_capacity(n);
    let base = n / spec.n_utterances;
    let extra = n % spec.n_utterances;
    for u in 0..spec.n_utterances {
        let speaker = u % spec.n_speakers;
        for f in 0..base + usize::from(u < extra) {
            meta.push(FrameMeta {
                utterance_id: format!("utt{u:05}"),
                speaker_id: format!("spk{speaker:03}"),
                frame_time: f as f64 * FRAME_HOP,
                silent: spec.silent_fraction > 0.0 && rng.gen_bool(spec.silent_fraction),
            });
            speaker_of_row.push(speaker);
        }
    }

    let derived_from = |name: &str| spec.redundancy.iter().find(|r| r.derived == name);
    let mut raw: Vec<Option<DMatrix<f64>>> = vec![None; spec.blocks.len()];
    let mut vocab: Vec<Vec<String>> = vec![Vec::new(); spec.blocks.len()];
    for (s, b) in spec.blocks.iter().enumerate() {
        if derived_from(&b.name).is_some() {
            continue;
        }
        let w = b.width;
        let m = match b.kind {
            SynthKind::Numeric | SynthKind::Embedding => DMatrix::from_fn(n, w, |_, _| rng.sample(StandardNormal)),
            SynthKind::Probabilities => {
                let mut logits = DMatrix::from_fn(n, w, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
                for mut row in logits.row_iter_mut() {
                    let max = row.max();
                    row.apply(|v| *v = (*v - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                logits
            }
            SynthKind::Categorical => {
                let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..w)).collect();
                vocab[s] = (0..w).map(|c| format!("{}{c}", b.name)).collect();
                one_hot(&labels, w)
            }
            SynthKind::Speaker => {
                vocab[s] = (0..w).map(|c| format!("spk{c:03}")).collect();
                one_hot(&speaker_of_row, w)
            }
        };
        raw[s] = Some(m);
    }
    for r in &spec.redundancy {
        let s = spec.blocks.iter().position(|b| b.name == r.derived).expect("validated");
        let src = spec.blocks.iter().position(|b| b.name == r.source).expect("validated");
        let k = spec.blocks[s].width;
        let labels = argmax_labels(raw[src].as_ref().expect("sources generated first"), k);
        vocab[s] = (0..k).map(|c| format!("{}{c}", r.derived)).collect();
        raw[s] = Some(one_hot(&labels, k));
    }
    let raw: Vec<DMatrix<f64>> = raw.into_iter().map(|m| m.expect("all blocks generated")).collect();
    let standardized: Vec<DMatrix<f64>> = raw
        .iter()
        .map(|m| {
            let mut z = m.clone();
            standardize_columns(&mut z);
            z
        })
        .collect();

    let d = spec.d_model;
    let mut layers = Vec::with_capacity(spec.n_layers);
    let mut oracle = OracleTable::default();
    for l in 0..spec.n_layers {
        let (shares, noise_share) = spec.layer_shares(l);
        let mut target = DMatrix::zeros(n, d);
        let mut block_var = vec![0.0; spec.blocks.len()];
        for (s, b) in spec.blocks.iter().enumerate() {
            if shares[s] <= 0.0 {
                continue;
            }
            let mixing = DMatrix::from_fn(b.width, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut z = &standardized[s] * mixing;
            let v = pooled_variance(&z);
            if v <= 0.0 {
                return Err(SynthSpec::infeasible(format!(
                    "block {} has no variance to plant",
                    b.name
                )));
            }
            z *= (shares[s] * d as f64 / v).sqrt();
            block_var[s] = pooled_variance(&z);
            target += z;
        }
        let noise_sd = noise_share.sqrt();
        let noise = DMatrix::from_fn(n, d, |_, _| noise_sd * rng.sample::<f64, _>(StandardNormal));
        let noise_var = pooled_variance(&noise);
        target += noise;
        let total = pooled_variance(&target);
        oracle.layers.push(OracleLayer {
            layer: l,
            expected_uv_full: noise_share,
            measured_uv_full: noise_var / total,
            blocks: spec
                .blocks
                .iter()
                .enumerate()
                .map(|(s, b)| OracleBlock {
                    name: b.name.clone(),
                    expected_delta: shares[s],
                    measured_delta: block_var[s] / total,
                })
                .collect(),
        });
        layers.push(to_f32_matrix(&target));
    }

    let blocks = spec
        .blocks
        .iter()
        .zip(raw.iter().zip(vocab))
        .map(|(b, (m, vocabulary))| FeatureBlock {
            name: b.name.clone(),
            kind: match b.kind {
                SynthKind::Numeric => FeatureKind::Numeric,
                SynthKind::Embedding | SynthKind::Probabilities => FeatureKind::Embedding,
                SynthKind::Categorical | SynthKind::Speaker => FeatureKind::OneHot,
            },
            vocabulary,
            data: to_matrix(m),
        })
        .collect();
    let ds = DatasetContainer {
        model: spec.model.clone(),
        layers,
        blocks,
        meta,
    };
    ds.validate()?;
    Ok((ds, oracle))
}

/// The fixed-seed reference corpus.
pub fn reference_corpus(scale: Scale) -> DatasetContainer {
    generate(&SynthSpec::reference(scale))
        .expect("reference spec is feasible")
        .0
}
