// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use probekit::report::{self, Mode, Preset, RunConfig};
use probekit::{ProbeError, R2Mode, SplitGranularity};

#[derive(Parser, Debug)]
#[command(
    name = "probekit",
    version,
    about = "Layer-wise linear probing of model representations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Encoding probes with feature-block ablations.
    Encode(CommonArgs),
    /// Decoding probes from layers (or from feature blocks) to features.
    Decode(CommonArgs),
    /// Write a synthetic container with planted contributions.
    Synth(CommonArgs),
    /// Re-render charts from the CSVs in --out.
    Report(CommonArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GranularityArg {
    Utterance,
    Frame,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum R2ModeArg {
    Pooled,
    Uniform,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Container directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Blocks to remove together, comma-joined; repeatable.
    #[arg(long)]
    ablate: Vec<String>,
    /// `all`, `a..b` (inclusive) or a comma list.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Vec<f64>,
    /// Fixed ridge penalty; disables cross-validation.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Train fraction per speaker.
    #[arg(long)]
    split: Option<f64>,
    #[arg(long, value_enum)]
    split_granularity: Option<GranularityArg>,
    #[arg(long)]
    max_frames: Option<usize>,
    /// Keep frames flagged silent.
    #[arg(long)]
    keep_silent: bool,
    #[arg(long, env = "PROBEKIT_SEED")]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, value_enum)]
    r2_mode: Option<R2ModeArg>,
    /// z-score numeric and embedding blocks on the train split.
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Decoding targets (block names or `speaker_id`), comma-joined; repeatable.
    #[arg(long = "target")]
    targets: Vec<String>,
    /// Decode from these blocks instead of from layers.
    #[arg(long)]
    predictors: Vec<String>,
    /// Synthetic spec as JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// desk, small, planted-pair or redundant-pair.
    #[arg(long)]
    preset: Option<String>,
}

fn non_empty<T>(v: Vec<T>) -> Option<Vec<T>> {
    (!v.is_empty()).then_some(v)
}

impl CommonArgs {
    fn into_config(self) -> Result<(Option<PathBuf>, RunConfig), ProbeError> {
        let preset = self.preset.as_deref().map(Preset::parse).transpose()?;
        let flags = RunConfig {
            mode: None,
            data: self.data,
            ablate: non_empty(self.ablate),
            layers: self.layers,
            alpha_grid: non_empty(self.alpha_grid),
            alpha: self.alpha,
            folds: self.folds,
            split: self.split,
            split_granularity: self.split_granularity.map(|g| match g {
                GranularityArg::Utterance => SplitGranularity::Utterance,
                GranularityArg::Frame => SplitGranularity::Frame,
            }),
            seed: self.seed,
            seeds: non_empty(self.seeds),
            max_frames: self.max_frames,
            keep_silent: self.keep_silent.then_some(true),
            r2_mode: self.r2_mode.map(|m| match m {
                R2ModeArg::Pooled => R2Mode::Pooled,
                R2ModeArg::Uniform => R2Mode::Uniform,
            }),
            standardize: self.standardize.then_some(true),
            jobs: self.jobs,
            out: self.out,
            targets: non_empty(self.targets),
            predictors: non_empty(self.predictors),
            spec: self.spec,
            preset,
        };
        Ok((self.config, flags))
    }
}

fn execute(cli: Cli) -> Result<Vec<PathBuf>, ProbeError> {
    let (mode, args) = match cli.command {
        Command::Encode(a) => (Mode::Encode, a),
        Command::Decode(a) => (Mode::Decode, a),
        Command::Synth(a) => (Mode::Synth, a),
        Command::Report(a) => (Mode::Report, a),
    };
    let (config_file, flags) = args.into_config()?;
    let cfg = match config_file {
        Some(path) => RunConfig::from_json_file(&path)?.overlay(flags),
        None => flags,
    };
    if let Some(m) = cfg.mode {
        if m != mode {
            return Err(ProbeError::Config(format!(
                "config file is for mode {m:?}, command is {mode:?}"
            )));
        }
    }
    report::run(mode, &cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("probekit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
