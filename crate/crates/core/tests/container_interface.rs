// SPDX-License-Identifier: MIT OR Apache-2.0

//! Containers written byte by byte the way an external extractor would.

use std::fs;
use std::path::Path;

use probekit::container::{read_container, read_matrix_handle, DType, MatrixData};
use probekit::{FeatureKind, ProbeError};

fn matrix_bytes_f32(rows: usize, cols: usize, values: &[f32]) -> Vec<u8> {
    let mut out = b"PKMAT1\0\0".to_vec();
    out.push(1);
    out.extend([0u8; 7]);
    out.extend((rows as u64).to_le_bytes());
    out.extend((cols as u64).to_le_bytes());
    for v in values {
        out.extend(v.to_le_bytes());
    }
    out
}

fn matrix_bytes_f64(rows: usize, cols: usize, values: &[f64]) -> Vec<u8> {
    let mut out = b"PKMAT1\0\0".to_vec();
    out.push(2);
    out.extend([0u8; 7]);
    out.extend((rows as u64).to_le_bytes());
    out.extend((cols as u64).to_le_bytes());
    for v in values {
        out.extend(v.to_le_bytes());
    }
    out
}

const MANIFEST: &str = r#"{
  "model": "toy-extractor",
  "layers": ["layer_000.pkm", "layer_001.pkm"],
  "features": [
    {"name": "acoustics", "kind": "numeric", "file": "feature_acoustics.pkm"},
    {"name": "phone", "kind": "one_hot", "file": "feature_phone.pkm", "vocabulary": ["AA", "B", "K"]}
  ],
  "meta": "meta.tsv"
}
"#;

const META: &str = "utterance_id\tspeaker_id\tframe_time\tsilent\n\
u1\ts1\t0.0\t0\n\
u1\ts1\t0.02\t1\n\
u2\ts2\t0.0\t0\n\
u3\ts1\t0.0\t0\n";

fn write_toy(root: &Path) {
    fs::create_dir_all(root).unwrap();
    fs::write(root.join("manifest.json"), MANIFEST).unwrap();
    fs::write(root.join("meta.tsv"), META).unwrap();
    let l0: Vec<f32> = (0..8).map(|i| i as f32 * 0.5).collect();
    let l1: Vec<f32> = (0..8).map(|i| -(i as f32)).collect();
    fs::write(root.join("layer_000.pkm"), matrix_bytes_f32(4, 2, &l0)).unwrap();
    fs::write(root.join("layer_001.pkm"), matrix_bytes_f32(4, 2, &l1)).unwrap();
    fs::write(
        root.join("feature_acoustics.pkm"),
        matrix_bytes_f64(4, 1, &[0.1, 0.2, 0.3, 0.4]),
    )
    .unwrap();
    let phone = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    fs::write(root.join("feature_phone.pkm"), matrix_bytes_f64(4, 3, &phone)).unwrap();
}

#[test]
fn reads_extractor_written_container() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    let ds = read_container(dir.path()).unwrap();
    assert_eq!(ds.model, "toy-extractor");
    assert_eq!((ds.n_frames(), ds.n_layers(), ds.d_model()), (4, 2, 2));
    assert_eq!(ds.layers[0].dtype(), DType::F32);
    assert_eq!(ds.layers[1].get(3, 1), -7.0);
    let phone = ds.block("phone").unwrap();
    assert_eq!(phone.kind, FeatureKind::OneHot);
    let labels = phone.labels().unwrap();
    assert_eq!(
        labels,
        vec![Some("AA".into()), Some("B".into()), None, Some("K".into())]
    );
    assert!(ds.meta[1].silent && !ds.meta[0].silent);
    assert_eq!(ds.meta[3].speaker_id, "s1");
    match ds.block("acoustics").unwrap().data.data() {
        MatrixData::F64(v) => assert_eq!(v, &vec![0.1, 0.2, 0.3, 0.4]),
        MatrixData::F32(_) => panic!("acoustics should stay f64"),
    }
}

#[test]
fn header_can_be_read_without_payload() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    let h = read_matrix_handle(&dir.path().join("feature_phone.pkm")).unwrap();
    assert_eq!((h.rows, h.cols, h.dtype), (4, 3, DType::F64));
}

#[test]
fn row_count_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    fs::write(
        dir.path().join("meta.tsv"),
        META.lines().take(4).collect::<Vec<_>>().join("\n") + "\n",
    )
    .unwrap();
    let err = read_container(dir.path()).unwrap_err();
    assert!(matches!(err, ProbeError::Consistency(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn one_hot_rows_summing_to_two_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    let phone = [1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    fs::write(dir.path().join("feature_phone.pkm"), matrix_bytes_f64(4, 3, &phone)).unwrap();
    assert_eq!(read_container(dir.path()).unwrap_err().exit_code(), 3);
}

#[test]
fn vocabulary_width_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    fs::write(dir.path().join("manifest.json"), MANIFEST.replace(r#", "K"]"#, "]")).unwrap();
    assert_eq!(read_container(dir.path()).unwrap_err().exit_code(), 3);
}

#[test]
fn missing_file_and_bad_manifest_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    fs::remove_file(dir.path().join("layer_001.pkm")).unwrap();
    assert_eq!(read_container(dir.path()).unwrap_err().exit_code(), 3);
    fs::write(dir.path().join("manifest.json"), "{\"model\": 3}").unwrap();
    assert!(matches!(read_container(dir.path()), Err(ProbeError::Format { .. })));
}

#[test]
fn non_finite_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    fs::write(
        dir.path().join("feature_acoustics.pkm"),
        matrix_bytes_f64(4, 1, &[0.1, f64::NAN, 0.3, 0.4]),
    )
    .unwrap();
    assert_eq!(read_container(dir.path()).unwrap_err().exit_code(), 3);
}

#[test]
fn truncated_payload_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_toy(dir.path());
    let mut bytes = matrix_bytes_f32(4, 2, &[0.0; 8]);
    bytes.truncate(bytes.len() - 2);
    fs::write(dir.path().join("layer_000.pkm"), bytes).unwrap();
    assert!(matches!(read_container(dir.path()), Err(ProbeError::Format { .. })));
}
