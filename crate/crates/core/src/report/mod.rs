// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration, result tables and charts behind the CLI.

pub mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::container::{read_container, write_container, DatasetContainer};
use crate::decoding::{feature_correlation_check, run_decoding_sweep, CvSettings, DecodeReport, DecodeTarget, Metric};
use crate::encoding::{
    aggregate_seeds, contributions, run_encoding_sweep, AblationSpec, FitReport, ProbeConfig, R2Mode, SeedSummary, FULL,
};
use crate::error::{ProbeError, Result};
use crate::linalg::AlphaGrid;
use crate::sampling::{seed_plan, SplitGranularity};
use crate::synth::{generate, Scale, SynthSpec};

use svg::{Panel, Series};

pub const DEFAULT_SEED: u64 = 100;
pub const UV_CSV: &str = "uv_by_layer.csv";
pub const CONTRIBUTIONS_CSV: &str = "contributions.csv";
pub const UV_CI_CSV: &str = "uv_ci.csv";
pub const UV_SVG: &str = "uv_by_layer.svg";
pub const DECODE_CSV: &str = "decode_by_layer.csv";
pub const DECODE_SUMMARY_CSV: &str = "decode_summary.csv";
pub const DECODE_FEATURES_CSV: &str = "decode_features.csv";
pub const DECODE_SVG: &str = "decode_by_layer.svg";
pub const ORACLE_CSV: &str = "oracle.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Encode,
    Decode,
    Synth,
    Report,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    Small,
    PlantedPair,
    RedundantPair,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            ProbeError::Config(format!(
                "unknown preset {s:?}; valid: desk, small, planted-pair, redundant-pair"
            ))
        })
    }

    pub fn spec(self) -> SynthSpec {
        match self {
            Preset::Desk => SynthSpec::reference(Scale::Desk),
            Preset::Small => SynthSpec::reference(Scale::Small),
            Preset::PlantedPair => SynthSpec::planted_pair(7),
            Preset::RedundantPair => SynthSpec::redundant_pair(7),
        }
    }
}

/// Run settings, from a JSON file and/or flags. Unset fields take defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    pub data: Option<PathBuf>,
    /// Each entry removes a comma-separated set of blocks.
    pub ablate: Option<Vec<String>>,
    /// `all`, an inclusive range `a..b`, or a comma list.
    pub layers: Option<String>,
    pub alpha_grid: Option<Vec<f64>>,
    /// Skip cross-validation and fit at this alpha.
    pub alpha: Option<f64>,
    pub folds: Option<usize>,
    pub split: Option<f64>,
    pub split_granularity: Option<SplitGranularity>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub max_frames: Option<usize>,
    pub keep_silent: Option<bool>,
    pub r2_mode: Option<R2Mode>,
    pub standardize: Option<bool>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub targets: Option<Vec<String>>,
    pub predictors: Option<Vec<String>>,
    pub spec: Option<PathBuf>,
    pub preset: Option<Preset>,
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ProbeError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ProbeError::Config(format!("{}: {e}", path.display())))
    }

    /// Fields set in `flags` win over fields set in `self`.
    pub fn overlay(self, flags: RunConfig) -> RunConfig {
        RunConfig {
            mode: flags.mode.or(self.mode),
            data: flags.data.or(self.data),
            ablate: flags.ablate.or(self.ablate),
            layers: flags.layers.or(self.layers),
            alpha_grid: flags.alpha_grid.or(self.alpha_grid),
            alpha: flags.alpha.or(self.alpha),
            folds: flags.folds.or(self.folds),
            split: flags.split.or(self.split),
            split_granularity: flags.split_granularity.or(self.split_granularity),
            seed: flags.seed.or(self.seed),
            seeds: flags.seeds.or(self.seeds),
            max_frames: flags.max_frames.or(self.max_frames),
            keep_silent: flags.keep_silent.or(self.keep_silent),
            r2_mode: flags.r2_mode.or(self.r2_mode),
            standardize: flags.standardize.or(self.standardize),
            jobs: flags.jobs.or(self.jobs),
            out: flags.out.or(self.out),
            targets: flags.targets.or(self.targets),
            predictors: flags.predictors.or(self.predictors),
            spec: flags.spec.or(self.spec),
            preset: flags.preset.or(self.preset),
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) if !s.is_empty() => s.clone(),
            _ => vec![self.seed.unwrap_or(DEFAULT_SEED)],
        }
    }

    pub fn probe_config(&self) -> Result<ProbeConfig> {
        let mut cfg = ProbeConfig::default();
        if let Some(g) = &self.alpha_grid {
            cfg.grid = AlphaGrid::new(g.clone())?;
        }
        if let Some(f) = self.folds {
            cfg.folds = f;
        }
        if let Some(s) = self.split {
            if !(s > 0.0 && s < 1.0) {
                return Err(ProbeError::Config(format!("split ratio {s} must lie in (0, 1)")));
            }
            cfg.split_ratio = s;
        }
        if let Some(g) = self.split_granularity {
            cfg.granularity = g;
        }
        if let Some(m) = self.max_frames {
            cfg.max_frames = m;
        }
        if let Some(k) = self.keep_silent {
            cfg.drop_silent = !k;
        }
        if let Some(m) = self.r2_mode {
            cfg.r2_mode = m;
        }
        if let Some(s) = self.standardize {
            cfg.standardize = s;
        }
        cfg.fixed_alpha = self.alpha;
        cfg.seed = self.seed.unwrap_or(DEFAULT_SEED);
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("probekit_out"))
    }

    fn container(&self) -> Result<DatasetContainer> {
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| ProbeError::Config("--data is required".into()))?;
        read_container(data)
    }
}

/// `all`, an inclusive range `a..b`, a single index, or a comma list.
pub fn parse_layers(spec: Option<&str>, n_layers: usize) -> Result<Vec<usize>> {
    let bad = |s: &str| ProbeError::Config(format!("cannot parse layer selection {s:?}"));
    let spec = spec.unwrap_or("all").trim();
    let layers: Vec<usize> = if spec == "all" {
        (0..n_layers).collect()
    } else if let Some((a, b)) = spec.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad(spec))?;
        let b: usize = b.trim().parse().map_err(|_| bad(spec))?;
        if b < a {
            return Err(bad(spec));
        }
        (a..=b).collect()
    } else {
        spec.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad(spec)))
            .collect::<Result<_>>()?
    };
    if layers.is_empty() {
        return Err(bad(spec));
    }
    if let Some(&l) = layers.iter().find(|&&l| l >= n_layers) {
        return Err(ProbeError::Config(format!(
            "layer {l} out of range; container has {n_layers} layers"
        )));
    }
    Ok(layers)
}

fn unknown_block(name: &str, ds: &DatasetContainer) -> ProbeError {
    ProbeError::Config(format!(
        "unknown block {name:?}; valid blocks: {}",
        ds.block_names().join(", ")
    ))
}

/// One [`AblationSpec`] per entry; entries are comma-joined block sets.
pub fn parse_ablations(entries: &[String], ds: &DatasetContainer) -> Result<Vec<AblationSpec>> {
    let names = ds.block_names();
    entries
        .iter()
        .map(|e| {
            let blocks: Vec<&str> = e.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if let Some(b) = blocks.iter().find(|b| !names.contains(b)) {
                return Err(unknown_block(b, ds));
            }
            Ok(AblationSpec::removing(&blocks))
        })
        .collect()
}

fn split_list(entries: &[String]) -> Vec<String> {
    entries
        .iter()
        .flat_map(|e| e.split(','))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UvRow {
    pub layer: usize,
    pub ablation: String,
    pub uv_test: f64,
    pub uv_train: f64,
    pub alpha: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub r2_test: f64,
    pub degenerate: bool,
}

impl From<&FitReport> for UvRow {
    fn from(r: &FitReport) -> Self {
        Self {
            layer: r.layer,
            ablation: r.ablation.clone(),
            uv_test: r.uv_test,
            uv_train: r.uv_train,
            alpha: r.alpha,
            n_train: r.n_train,
            n_test: r.n_test,
            seed: r.seed,
            r2_test: r.r2_test,
            degenerate: r.degenerate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRow {
    pub layer: usize,
    pub target: String,
    pub metric: Metric,
    pub score: f64,
    pub baseline: f64,
    pub alpha: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeSummaryRow {
    pub layer: usize,
    pub target: String,
    pub metric: Metric,
    pub n_seeds: usize,
    pub mean_score: f64,
    pub mean_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDecodeRow {
    pub predictors: String,
    pub target: String,
    pub metric: Metric,
    pub score: f64,
    pub baseline: f64,
    pub alpha: f64,
    pub seed: u64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let err = |e: csv::Error| ProbeError::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| ProbeError::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let err = |e: csv::Error| ProbeError::format(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().map(|row| row.map_err(err)).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| ProbeError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| ProbeError::io(path, e))
}

/// UV by layer, one line per ablation; the full set is the dashed reference.
pub fn uv_panel(points: &[(usize, String, f64)], title: &str) -> Panel {
    let mut order: Vec<String> = Vec::new();
    let mut by_ablation: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (layer, ablation, uv) in points {
        if !order.contains(ablation) {
            order.push(ablation.clone());
        }
        by_ablation
            .entry(ablation.clone())
            .or_default()
            .push((*layer as f64, *uv));
    }
    order.sort_by_key(|a| a != FULL);
    let series = order
        .into_iter()
        .map(|a| {
            let mut pts = by_ablation.remove(&a).unwrap_or_default();
            pts.sort_by(|x, y| x.0.total_cmp(&y.0));
            Series {
                reference: a == FULL,
                label: a,
                points: pts,
            }
        })
        .collect();
    Panel {
        title: title.to_string(),
        x_label: "layer".into(),
        y_label: "unexplained variance".into(),
        series,
        y_range: None,
    }
}

/// One panel per target: score by layer, plus a dashed majority baseline for
/// classification targets.
pub fn decode_panels(rows: &[(usize, String, Metric, f64, f64)]) -> Vec<Panel> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.1) {
            order.push(r.1.clone());
        }
    }
    order
        .into_iter()
        .map(|target| {
            let mut cells: Vec<&(usize, String, Metric, f64, f64)> = rows.iter().filter(|r| r.1 == target).collect();
            cells.sort_by_key(|r| r.0);
            let metric = cells[0].2;
            let mut series = vec![Series {
                label: metric.as_str().to_string(),
                points: cells.iter().map(|r| (r.0 as f64, r.3)).collect(),
                reference: false,
            }];
            if metric == Metric::Accuracy {
                series.push(Series {
                    label: "majority baseline".into(),
                    points: cells.iter().map(|r| (r.0 as f64, r.4)).collect(),
                    reference: true,
                });
            }
            Panel {
                title: target,
                x_label: "layer".into(),
                y_label: metric.as_str().into(),
                series,
                y_range: (metric == Metric::Accuracy).then_some((0.0, 1.0)),
            }
        })
        .collect()
}

fn render_uv_chart(out: &Path, title: &str) -> Result<Option<PathBuf>> {
    let ci = out.join(UV_CI_CSV);
    let points: Vec<(usize, String, f64)> = if ci.exists() {
        read_csv::<SeedSummary>(&ci)?
            .into_iter()
            .map(|s| (s.layer, s.ablation, s.mean_uv))
            .collect()
    } else if out.join(UV_CSV).exists() {
        let rows = read_csv::<UvRow>(&out.join(UV_CSV))?;
        let first_seed = rows.first().map(|r| r.seed);
        rows.into_iter()
            .filter(|r| Some(r.seed) == first_seed)
            .map(|r| (r.layer, r.ablation, r.uv_test))
            .collect()
    } else {
        return Ok(None);
    };
    let path = out.join(UV_SVG);
    write_text(&path, &svg::render(&[uv_panel(&points, title)]))?;
    Ok(Some(path))
}

fn render_decode_chart(out: &Path) -> Result<Option<PathBuf>> {
    let summary = out.join(DECODE_SUMMARY_CSV);
    let rows: Vec<(usize, String, Metric, f64, f64)> = if summary.exists() {
        read_csv::<DecodeSummaryRow>(&summary)?
            .into_iter()
            .map(|r| (r.layer, r.target, r.metric, r.mean_score, r.mean_baseline))
            .collect()
    } else if out.join(DECODE_CSV).exists() {
        let rows = read_csv::<DecodeRow>(&out.join(DECODE_CSV))?;
        let first_seed = rows.first().map(|r| r.seed);
        rows.into_iter()
            .filter(|r| Some(r.seed) == first_seed)
            .map(|r| (r.layer, r.target, r.metric, r.score, r.baseline))
            .collect()
    } else {
        return Ok(None);
    };
    if rows.is_empty() {
        return Ok(None);
    }
    let path = out.join(DECODE_SVG);
    write_text(&path, &svg::render(&decode_panels(&rows)))?;
    Ok(Some(path))
}

fn probe_configs(cfg: &RunConfig) -> Result<Vec<ProbeConfig>> {
    seed_plan(&cfg.probe_config()?, &cfg.seed_list(), |c, s| c.seed = s)
}

/// Encoding sweep over every seed; writes the UV, contribution and CI tables and the chart.
pub fn run_encode(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ds = cfg.container()?;
    let layers = parse_layers(cfg.layers.as_deref(), ds.n_layers())?;
    let ablations = parse_ablations(cfg.ablate.as_deref().unwrap_or(&[]), &ds)?;
    let mut reports = Vec::new();
    for probe in probe_configs(cfg)? {
        log::info!("encoding sweep, seed {}", probe.seed);
        reports.extend(run_encoding_sweep(&ds, &ablations, &layers, &probe)?);
    }
    let table = contributions(&reports)?;

    let out = cfg.out_dir();
    create_dir(&out)?;
    let mut files = vec![out.join(UV_CSV), out.join(CONTRIBUTIONS_CSV)];
    write_csv(&files[0], &reports.iter().map(UvRow::from).collect::<Vec<_>>())?;
    write_csv(&files[1], &table.rows)?;
    let ci = out.join(UV_CI_CSV);
    if cfg.seed_list().len() > 1 {
        write_csv(&ci, &aggregate_seeds(&reports)?)?;
        files.push(ci);
    } else if ci.exists() {
        fs::remove_file(&ci).map_err(|e| ProbeError::io(&ci, e))?;
    }
    files.extend(render_uv_chart(&out, &ds.model)?);
    Ok(files)
}

/// Layer decoding, or feature-to-feature decoding when predictors are given.
pub fn run_decode(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ds = cfg.container()?;
    let names = ds.block_names();
    let targets: Vec<DecodeTarget> = match &cfg.targets {
        Some(t) => split_list(t).iter().map(|s| DecodeTarget::parse(s)).collect(),
        None => names
            .iter()
            .map(|n| DecodeTarget::Block(n.to_string()))
            .chain([DecodeTarget::Speaker])
            .collect(),
    };
    if targets.is_empty() {
        return Err(ProbeError::Config("no decoding targets".into()));
    }
    for t in &targets {
        if let DecodeTarget::Block(b) = t {
            if !names.contains(&b.as_str()) {
                return Err(unknown_block(b, &ds));
            }
        }
    }
    let predictors = split_list(cfg.predictors.as_deref().unwrap_or(&[]));
    if let Some(p) = predictors.iter().find(|p| !names.contains(&p.as_str())) {
        return Err(unknown_block(p, &ds));
    }
    let out = cfg.out_dir();
    let probes = probe_configs(cfg)?;

    if !predictors.is_empty() {
        let refs: Vec<&str> = predictors.iter().map(String::as_str).collect();
        let mut rows = Vec::new();
        for probe in &probes {
            let split = probe.split(&ds)?;
            let cv = CvSettings::from(probe);
            for t in &targets {
                let r = feature_correlation_check(&ds, &refs, t, &split, &cv)?;
                rows.push(FeatureDecodeRow {
                    predictors: predictors.join("+"),
                    target: r.target,
                    metric: r.metric,
                    score: r.score,
                    baseline: r.baseline,
                    alpha: r.alpha,
                    seed: probe.seed,
                });
            }
        }
        create_dir(&out)?;
        let path = out.join(DECODE_FEATURES_CSV);
        write_csv(&path, &rows)?;
        return Ok(vec![path]);
    }

    let layers = parse_layers(cfg.layers.as_deref(), ds.n_layers())?;
    let mut rows = Vec::new();
    for probe in &probes {
        log::info!("decoding sweep, seed {}", probe.seed);
        let reports: Vec<DecodeReport> = run_decoding_sweep(&ds, &targets, &layers, probe)?;
        rows.extend(reports.into_iter().map(|r| DecodeRow {
            layer: r.layer.unwrap_or_default(),
            target: r.target,
            metric: r.metric,
            score: r.score,
            baseline: r.baseline,
            alpha: r.alpha,
            seed: probe.seed,
        }));
    }
    create_dir(&out)?;
    let mut files = vec![out.join(DECODE_CSV)];
    write_csv(&files[0], &rows)?;
    let summary_path = out.join(DECODE_SUMMARY_CSV);
    if probes.len() > 1 {
        type Cells = BTreeMap<(usize, String), (Metric, Vec<f64>, Vec<f64>)>;
        let mut cells = Cells::new();
        for r in &rows {
            let e = cells
                .entry((r.layer, r.target.clone()))
                .or_insert_with(|| (r.metric, Vec::new(), Vec::new()));
            e.1.push(r.score);
            e.2.push(r.baseline);
        }
        let summary: Vec<DecodeSummaryRow> = cells
            .into_iter()
            .map(|((layer, target), (metric, s, b))| DecodeSummaryRow {
                layer,
                target,
                metric,
                n_seeds: s.len(),
                mean_score: s.iter().sum::<f64>() / s.len() as f64,
                mean_baseline: b.iter().sum::<f64>() / b.len() as f64,
            })
            .collect();
        write_csv(&summary_path, &summary)?;
        files.push(summary_path);
    } else if summary_path.exists() {
        fs::remove_file(&summary_path).map_err(|e| ProbeError::io(&summary_path, e))?;
    }
    files.extend(render_decode_chart(&out)?);
    Ok(files)
}

/// Generates a synthetic container and its oracle table.
pub fn run_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut spec = match (&cfg.spec, cfg.preset) {
        (Some(_), Some(_)) => return Err(ProbeError::Config("give either --spec or --preset, not both".into())),
        (Some(path), None) => {
            let text = fs::read_to_string(path).map_err(|e| ProbeError::io(path, e))?;
            serde_json::from_str::<SynthSpec>(&text)
                .map_err(|e| ProbeError::Config(format!("{}: {e}", path.display())))?
        }
        (None, Some(p)) => p.spec(),
        (None, None) => Preset::Desk.spec(),
    };
    if let Some(seed) = cfg.seed {
        spec.seed = seed;
    }
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| ProbeError::Config("synth needs --out".into()))?;
    let (ds, oracle) = generate(&spec)?;
    write_container(&ds, &out)?;
    let oracle_path = out.join(ORACLE_CSV);
    oracle.write_csv(&oracle_path)?;
    Ok(vec![out, oracle_path])
}

/// Re-renders charts from the CSVs already in the output directory.
pub fn run_report(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let out = cfg.out_dir();
    let title = out
        .file_name()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let files: Vec<PathBuf> = render_uv_chart(&out, &title)?
        .into_iter()
        .chain(render_decode_chart(&out)?)
        .collect();
    if files.is_empty() {
        return Err(ProbeError::Data(format!("no result tables found in {}", out.display())));
    }
    Ok(files)
}

/// Dispatches on `mode` inside a worker pool of `cfg.jobs` threads.
pub fn run(mode: Mode, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let job = || match mode {
        Mode::Encode => run_encode(cfg),
        Mode::Decode => run_decode(cfg),
        Mode::Synth => run_synth(cfg),
        Mode::Report => run_report(cfg),
    };
    match cfg.jobs {
        Some(0) => Err(ProbeError::Config("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| ProbeError::Config(format!("cannot build worker pool: {e}")))?
            .install(job),
        None => job(),
    }
}
