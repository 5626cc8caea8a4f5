// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn probekit(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_probekit"))
        .args(args)
        .current_dir(dir)
        .env_remove("PROBEKIT_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> Output {
    let out = probekit(args, dir);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_corpus(dir: &Path) {
    ok(&["synth", "--preset", "small", "--out", "corpus"], dir);
}

fn rows_where(csv: &str, col: usize, value: &str) -> usize {
    csv.lines()
        .skip(1)
        .filter(|l| l.split(',').nth(col) == Some(value))
        .count()
}

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--preset", "small", "--seed", "7", "--out", "a"], dir.path());
    ok(&["synth", "--preset", "small", "--seed", "7", "--out", "b"], dir.path());
    for entry in fs::read_dir(dir.path().join("a")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = fs::read(dir.path().join("a").join(&name)).unwrap();
        let b = fs::read(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs");
    }
    assert!(dir.path().join("a/oracle.csv").exists());
}

#[test]
fn infeasible_synth_spec_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let spec = r#"{"n_frames": 100, "n_utterances": 10, "n_speakers": 2, "noise_share": 1.2, "n_layers": 1,
        "d_model": 4, "seed": 1, "blocks": [{"name": "a", "kind": "numeric", "width": 2, "planted_share": 0.0}]}"#;
    fs::write(dir.path().join("spec.json"), spec).unwrap();
    let out = probekit(&["synth", "--spec", "spec.json", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn encode_writes_tables_and_chart() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let args = [
        "encode",
        "--data",
        "corpus",
        "--ablate",
        "speaker",
        "--ablate",
        "acoustics",
        "--ablate",
        "acoustics,speaker",
        "--layers",
        "0..12",
        "--out",
        "run",
    ];
    ok(&args, dir.path());
    let uv = fs::read_to_string(dir.path().join("run/uv_by_layer.csv")).unwrap();
    assert!(uv.starts_with("layer,ablation,uv_test,uv_train,alpha,n_train,n_test"));
    for ablation in ["full", "full-speaker", "full-acoustics", "full-acoustics-speaker"] {
        assert_eq!(rows_where(&uv, 1, ablation), 13, "{ablation}");
    }
    let contrib = fs::read_to_string(dir.path().join("run/contributions.csv")).unwrap();
    assert_eq!(contrib.lines().count(), 1 + 13 * 4);
    let svg = fs::read_to_string(dir.path().join("run/uv_by_layer.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
    let full = svg
        .lines()
        .find(|l| l.contains(r#"<polyline data-label="full""#))
        .unwrap();
    assert!(full.contains("stroke-dasharray"));
    assert!(!dir.path().join("run/uv_ci.csv").exists());

    let first = fs::read(dir.path().join("run/uv_by_layer.csv")).unwrap();
    ok(&args, dir.path());
    assert_eq!(first, fs::read(dir.path().join("run/uv_by_layer.csv")).unwrap());
}

#[test]
fn several_seeds_add_interval_table() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    ok(
        &[
            "encode",
            "--data",
            "corpus",
            "--ablate",
            "speaker",
            "--layers",
            "0,6",
            "--seeds",
            "100,200,300",
            "--out",
            "run",
        ],
        dir.path(),
    );
    let ci = fs::read_to_string(dir.path().join("run/uv_ci.csv")).unwrap();
    assert!(ci.starts_with("layer,ablation,n_seeds,mean_uv,mean_delta_uv,std_delta_uv,ci_low,ci_high,ci_width"));
    assert_eq!(ci.lines().count(), 1 + 2 * 2);
    let uv = fs::read_to_string(dir.path().join("run/uv_by_layer.csv")).unwrap();
    assert_eq!(uv.lines().count(), 1 + 3 * 2 * 2);
}

#[test]
fn unknown_block_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let out = probekit(&["encode", "--data", "corpus", "--ablate", "prosody"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("acoustics, phonetics, speaker, syntax, lexicon"), "{err}");
}

#[test]
fn config_errors_and_numerical_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    assert_eq!(probekit(&["encode", "--out", "x"], dir.path()).status.code(), Some(2));
    assert_eq!(
        probekit(&["encode", "--data", "corpus", "--layers", "0..13"], dir.path())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        probekit(&["encode", "--data", "nowhere"], dir.path()).status.code(),
        Some(3)
    );
    assert_eq!(probekit(&["encode", "--bogus-flag"], dir.path()).status.code(), Some(2));
    // posteriorgram columns sum to one, so the unregularized design is singular
    let out = probekit(
        &["encode", "--data", "corpus", "--alpha", "0", "--layers", "0"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    fs::write(
        dir.path().join("run.json"),
        r#"{"data": "corpus", "layers": "0..1", "out": "fromfile", "folds": 3}"#,
    )
    .unwrap();
    ok(&["encode", "--config", "run.json", "--layers", "2"], dir.path());
    let uv = fs::read_to_string(dir.path().join("fromfile/uv_by_layer.csv")).unwrap();
    assert_eq!(uv.lines().count(), 2);
    assert_eq!(rows_where(&uv, 0, "2"), 1);
    fs::write(dir.path().join("bad.json"), r#"{"layerz": "all"}"#).unwrap();
    assert_eq!(
        probekit(&["encode", "--config", "bad.json"], dir.path()).status.code(),
        Some(2)
    );
}

#[test]
fn seed_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_probekit"))
        .args(["encode", "--data", "corpus", "--layers", "0", "--out", "run"])
        .current_dir(dir.path())
        .env("PROBEKIT_SEED", "4242")
        .output()
        .unwrap();
    assert!(out.status.success());
    let uv = fs::read_to_string(dir.path().join("run/uv_by_layer.csv")).unwrap();
    assert_eq!(rows_where(&uv, 7, "4242"), 1);
}

#[test]
fn decode_panels_and_feature_mode() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    ok(
        &[
            "decode",
            "--data",
            "corpus",
            "--target",
            "speaker_id,phonetics",
            "--layers",
            "0..2",
            "--out",
            "dec",
        ],
        dir.path(),
    );
    let csv = fs::read_to_string(dir.path().join("dec/decode_by_layer.csv")).unwrap();
    assert!(csv.starts_with("layer,target,metric,score,baseline,alpha,seed"));
    assert_eq!(rows_where(&csv, 1, "speaker_id"), 3);
    for line in csv.lines().filter(|l| l.contains(",phonetics,")) {
        assert_eq!(line.split(',').nth(4), Some("0.0"), "{line}");
    }
    let svg = fs::read_to_string(dir.path().join("dec/decode_by_layer.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    assert_eq!(svg.matches(r#"data-label="majority baseline""#).count(), 1);

    ok(
        &[
            "decode",
            "--data",
            "corpus",
            "--predictors",
            "acoustics",
            "--target",
            "speaker",
            "--out",
            "feat",
        ],
        dir.path(),
    );
    let table = fs::read_to_string(dir.path().join("feat/decode_features.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("acoustics,speaker,accuracy,"));
}

#[test]
fn report_rerenders_charts_from_tables() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    ok(
        &[
            "encode", "--data", "corpus", "--ablate", "lexicon", "--layers", "0..3", "--out", "run",
        ],
        dir.path(),
    );
    let svg = dir.path().join("run/uv_by_layer.svg");
    fs::remove_file(&svg).unwrap();
    ok(&["report", "--out", "run"], dir.path());
    assert_eq!(fs::read_to_string(&svg).unwrap().matches("<polyline").count(), 2);
    assert_eq!(
        probekit(&["report", "--out", "empty"], dir.path()).status.code(),
        Some(3)
    );
}
