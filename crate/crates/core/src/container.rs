// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk dataset container: per-layer representation matrices, named
//! feature blocks and per-frame metadata.
//!
//! Layout of a container directory:
//!
//! ```text
//! root/
//!   manifest.json        model name, layer files, feature blocks, metadata file
//!   layer_000.pkm ...    one matrix file per layer, layer order
//!   feature_<name>.pkm   one matrix file per feature block
//!   meta.tsv             utterance_id, speaker_id, frame_time, silent
//! ```
//!
//! Matrix files start with the 8 magic bytes `PKMAT1\0\0`, a dtype code byte
//! (1 = f32, 2 = f64), 7 zero bytes, the row and column counts as
//! little-endian u64, and then the row-major little-endian payload.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

pub const MATRIX_MAGIC: [u8; 8] = *b"PKMAT1\0\0";
const HEADER_LEN: usize = 32;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const META_FILE: &str = "meta.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MatrixData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// Header of a matrix file, read without touching the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixHandle {
    pub rows: usize,
    pub cols: usize,
    pub dtype: DType,
    pub path: PathBuf,
}

/// Dense row-major matrix that keeps the dtype it was created or loaded with.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: MatrixData,
}

impl Matrix {
    pub fn from_f64(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ProbeError::Consistency(format!(
                "matrix payload has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data: MatrixData::F64(data),
        })
    }

    pub fn from_f32(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ProbeError::Consistency(format!(
                "matrix payload has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data: MatrixData::F32(data),
        })
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter().copied());
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: MatrixData::F64(data),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            MatrixData::F32(_) => DType::F32,
            MatrixData::F64(_) => DType::F64,
        }
    }

    pub fn data(&self) -> &MatrixData {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        let idx = row * self.cols + col;
        match &self.data {
            MatrixData::F32(v) => v[idx] as f64,
            MatrixData::F64(v) => v[idx],
        }
    }

    pub fn row_f64(&self, row: usize) -> Vec<f64> {
        (0..self.cols).map(|c| self.get(row, c)).collect()
    }

    /// Copies the selected rows into a dense f64 matrix.
    pub fn select_rows(&self, rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), self.cols, |i, c| self.get(rows[i], c))
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c))
    }

    fn first_non_finite(&self) -> Option<(usize, usize)> {
        let idx = match &self.data {
            MatrixData::F32(v) => v.iter().position(|x| !x.is_finite()),
            MatrixData::F64(v) => v.iter().position(|x| !x.is_finite()),
        }?;
        Some((idx / self.cols.max(1), idx % self.cols.max(1)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.rows * self.cols * self.dtype().size());
        out.extend_from_slice(&MATRIX_MAGIC);
        out.push(self.dtype().code());
        out.extend_from_slice(&[0u8; 7]);
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        match &self.data {
            MatrixData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            MatrixData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let handle = parse_header(bytes, path)?;
        let payload = &bytes[HEADER_LEN..];
        let data = match handle.dtype {
            DType::F32 => MatrixData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => MatrixData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        let m = Self {
            rows: handle.rows,
            cols: handle.cols,
            data,
        };
        if let Some((r, c)) = m.first_non_finite() {
            return Err(ProbeError::Data(format!(
                "{}: non-finite value at row {r}, column {c}",
                path.display()
            )));
        }
        Ok(m)
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<MatrixHandle> {
    if bytes.len() < HEADER_LEN {
        return Err(ProbeError::format(path, "truncated header"));
    }
    let handle = parse_header_fields(bytes[..HEADER_LEN].try_into().unwrap(), path)?;
    check_payload_len(&handle, (bytes.len() - HEADER_LEN) as u64)?;
    Ok(handle)
}

fn parse_header_fields(header: &[u8; HEADER_LEN], path: &Path) -> Result<MatrixHandle> {
    if header[..8] != MATRIX_MAGIC {
        return Err(ProbeError::format(path, "bad magic bytes"));
    }
    let dtype = DType::from_code(header[8])
        .ok_or_else(|| ProbeError::format(path, format!("unknown dtype code {}", header[8])))?;
    if header[9..16].iter().any(|&b| b != 0) {
        return Err(ProbeError::format(path, "reserved header bytes are not zero"));
    }
    let rows = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let cols = u64::from_le_bytes(header[24..32].try_into().unwrap());
    Ok(MatrixHandle {
        rows: usize::try_from(rows).map_err(|_| ProbeError::format(path, "row count overflows"))?,
        cols: usize::try_from(cols).map_err(|_| ProbeError::format(path, "column count overflows"))?,
        dtype,
        path: path.to_path_buf(),
    })
}

fn check_payload_len(handle: &MatrixHandle, actual: u64) -> Result<()> {
    let expected = (handle.rows as u64)
        .checked_mul(handle.cols as u64)
        .and_then(|n| n.checked_mul(handle.dtype.size() as u64));
    if expected != Some(actual) {
        return Err(ProbeError::format(
            &handle.path,
            format!(
                "shape {}x{} does not match {actual} payload bytes",
                handle.rows, handle.cols
            ),
        ));
    }
    Ok(())
}

/// Reads only the header of a matrix file and checks it against the file size.
pub fn read_matrix_handle(path: &Path) -> Result<MatrixHandle> {
    let mut file = fs::File::open(path).map_err(|e| ProbeError::io(path, e))?;
    let len = file.metadata().map_err(|e| ProbeError::io(path, e))?.len();
    let mut header = [0u8; HEADER_LEN];
    file.read_exact(&mut header)
        .map_err(|_| ProbeError::format(path, "truncated header"))?;
    let handle = parse_header_fields(&header, path)?;
    check_payload_len(&handle, len - HEADER_LEN as u64)?;
    Ok(handle)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| ProbeError::io(path, e))?;
    Matrix::from_bytes(&bytes, path)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| ProbeError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&m.to_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| ProbeError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    OneHot,
    Numeric,
    Embedding,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::OneHot => "one_hot",
            FeatureKind::Numeric => "numeric",
            FeatureKind::Embedding => "embedding",
        }
    }
}

/// A named group of predictor columns together with its backing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    pub name: String,
    pub kind: FeatureKind,
    /// Class label of each column, one-hot blocks only.
    pub vocabulary: Vec<String>,
    pub data: Matrix,
}

impl FeatureBlock {
    pub fn width(&self) -> usize {
        self.data.cols()
    }

    /// One-hot encodes `labels` against a fixed vocabulary. Labels outside the
    /// vocabulary become all-zero rows.
    pub fn one_hot(name: &str, labels: &[impl AsRef<str>], vocabulary: Vec<String>) -> Self {
        let lookup: BTreeMap<&str, usize> = vocabulary.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
        let k = vocabulary.len();
        let mut data = vec![0.0f64; labels.len() * k];
        let mut unseen = 0usize;
        for (r, label) in labels.iter().enumerate() {
            match lookup.get(label.as_ref()) {
                Some(&c) => data[r * k + c] = 1.0,
                None => unseen += 1,
            }
        }
        if unseen > 0 {
            log::warn!("block {name}: {unseen} rows carry labels outside the vocabulary; encoded as zeros");
        }
        Self {
            name: name.to_string(),
            kind: FeatureKind::OneHot,
            vocabulary,
            data: Matrix::from_f64(labels.len(), k, data).expect("shape matches by construction"),
        }
    }

    /// Per-row class label of a one-hot block; `None` for all-zero rows.
    pub fn labels(&self) -> Result<Vec<Option<String>>> {
        if self.kind != FeatureKind::OneHot {
            return Err(ProbeError::Config(format!(
                "block {} is {}, labels need a one_hot block",
                self.name,
                self.kind.as_str()
            )));
        }
        Ok((0..self.data.rows())
            .map(|r| {
                (0..self.data.cols())
                    .find(|&c| self.data.get(r, c) == 1.0)
                    .map(|c| self.vocabulary[c].clone())
            })
            .collect())
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(ProbeError::Consistency("feature block with empty name".into()));
        }
        match self.kind {
            FeatureKind::OneHot => {
                if self.vocabulary.len() != self.width() {
                    return Err(ProbeError::Consistency(format!(
                        "one_hot block {} has {} columns but {} vocabulary entries",
                        self.name,
                        self.width(),
                        self.vocabulary.len()
                    )));
                }
                for r in 0..self.data.rows() {
                    let mut sum = 0.0;
                    for c in 0..self.data.cols() {
                        let v = self.data.get(r, c);
                        if v != 0.0 && v != 1.0 {
                            return Err(ProbeError::Consistency(format!(
                                "one_hot block {} has value {v} at row {r}",
                                self.name
                            )));
                        }
                        sum += v;
                    }
                    if sum > 1.0 {
                        return Err(ProbeError::Consistency(format!(
                            "one_hot block {} row {r} sums to {sum}",
                            self.name
                        )));
                    }
                }
            }
            FeatureKind::Numeric | FeatureKind::Embedding => {
                if !self.vocabulary.is_empty() {
                    return Err(ProbeError::Consistency(format!(
                        "{} block {} must not declare a vocabulary",
                        self.kind.as_str(),
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub utterance_id: String,
    pub speaker_id: String,
    pub frame_time: f64,
    pub silent: bool,
}

/// Column span of one block inside an assembled predictor matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpan {
    pub name: String,
    pub kind: FeatureKind,
    pub columns: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BlockIndex {
    pub spans: Vec<BlockSpan>,
}

impl BlockIndex {
    pub fn width(&self) -> usize {
        self.spans.last().map_or(0, |s| s.columns.end)
    }

    pub fn span(&self, name: &str) -> Option<&BlockSpan> {
        self.spans.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReencodeMode {
    Probabilities,
    OneHotArgmax,
    IntegerId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetContainer {
    pub model: String,
    /// Index 0 is whatever the extractor emitted first (usually the embedding layer).
    pub layers: Vec<Matrix>,
    pub blocks: Vec<FeatureBlock>,
    pub meta: Vec<FrameMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    model: String,
    layers: Vec<String>,
    features: Vec<ManifestBlock>,
    meta: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestBlock {
    name: String,
    kind: FeatureKind,
    file: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    vocabulary: Vec<String>,
}

impl DatasetContainer {
    pub fn n_frames(&self) -> usize {
        self.meta.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.layers.first().map_or(0, Matrix::cols)
    }

    pub fn block_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.name.as_str()).collect()
    }

    pub fn block(&self, name: &str) -> Result<&FeatureBlock> {
        self.blocks.iter().find(|b| b.name == name).ok_or_else(|| {
            ProbeError::Config(format!(
                "unknown feature block {name:?}; valid blocks: {}",
                self.block_names().join(", ")
            ))
        })
    }

    /// Checks every container invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.meta.len();
        if n == 0 {
            return Err(ProbeError::Consistency("container has no frames".into()));
        }
        if self.layers.is_empty() {
            return Err(ProbeError::Consistency("container has no layers".into()));
        }
        let d = self.layers[0].cols();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.rows() != n {
                return Err(ProbeError::Consistency(format!(
                    "layer {i} has {} rows, metadata has {n}",
                    layer.rows()
                )));
            }
            if layer.cols() != d {
                return Err(ProbeError::Consistency(format!(
                    "layer {i} has {} columns, layer 0 has {d}",
                    layer.cols()
                )));
            }
            if let Some((r, c)) = layer.first_non_finite() {
                return Err(ProbeError::Data(format!("layer {i}: non-finite value at ({r}, {c})")));
            }
        }
        let mut seen = HashSet::new();
        for block in &self.blocks {
            if !seen.insert(block.name.as_str()) {
                return Err(ProbeError::Consistency(format!("duplicate block name {}", block.name)));
            }
            if block.data.rows() != n {
                return Err(ProbeError::Consistency(format!(
                    "block {} has {} rows, metadata has {n}",
                    block.name,
                    block.data.rows()
                )));
            }
            if let Some((r, c)) = block.data.first_non_finite() {
                return Err(ProbeError::Data(format!(
                    "block {}: non-finite value at ({r}, {c})",
                    block.name
                )));
            }
            block.validate()?;
        }
        for (r, m) in self.meta.iter().enumerate() {
            if m.utterance_id.is_empty() {
                return Err(ProbeError::Consistency(format!("row {r} has an empty utterance_id")));
            }
            if !(m.frame_time.is_finite() && m.frame_time >= 0.0) {
                return Err(ProbeError::Data(format!("row {r} has frame_time {}", m.frame_time)));
            }
        }
        Ok(())
    }

    /// Column spans of all blocks in declaration order.
    pub fn block_index(&self) -> BlockIndex {
        self.index_for(|_| true)
    }

    fn index_for(&self, keep: impl Fn(&FeatureBlock) -> bool) -> BlockIndex {
        let mut start = 0;
        let spans = self
            .blocks
            .iter()
            .filter(|b| keep(b))
            .map(|b| {
                let span = BlockSpan {
                    name: b.name.clone(),
                    kind: b.kind,
                    columns: start..start + b.width(),
                };
                start += b.width();
                span
            })
            .collect();
        BlockIndex { spans }
    }

    fn check_selection(&self, include: &[&str]) -> Result<()> {
        if include.is_empty() {
            return Err(ProbeError::Config("empty predictor selection".into()));
        }
        for name in include {
            self.block(name)?;
        }
        Ok(())
    }

    /// Concatenates the selected blocks in declaration order, restricted to `rows`.
    pub fn assemble_rows(&self, include: &[&str], rows: &[usize]) -> Result<(DMatrix<f64>, BlockIndex)> {
        self.check_selection(include)?;
        let index = self.index_for(|b| include.contains(&b.name.as_str()));
        let mut out = DMatrix::zeros(rows.len(), index.width());
        for span in &index.spans {
            let block = self.block(&span.name)?;
            for (i, &r) in rows.iter().enumerate() {
                for c in 0..block.width() {
                    out[(i, span.columns.start + c)] = block.data.get(r, c);
                }
            }
        }
        Ok((out, index))
    }

    /// Replaces one block by a different encoding of the same information.
    pub fn reencode_block(&self, name: &str, mode: ReencodeMode) -> Result<DatasetContainer> {
        let block = self.block(name)?;
        if block.kind == FeatureKind::Numeric {
            return Err(ProbeError::Config(format!(
                "block {name} is numeric; re-encoding needs probability or one_hot columns"
            )));
        }
        let n = block.data.rows();
        let k = block.width();
        let argmax = |r: usize| -> usize {
            let mut best = 0;
            for c in 1..k {
                if block.data.get(r, c) > block.data.get(r, best) {
                    best = c;
                }
            }
            best
        };
        let replacement = match mode {
            ReencodeMode::Probabilities => FeatureBlock {
                name: name.to_string(),
                kind: FeatureKind::Embedding,
                vocabulary: Vec::new(),
                data: block.data.clone(),
            },
            ReencodeMode::OneHotArgmax => {
                let vocabulary = if block.vocabulary.is_empty() {
                    (0..k).map(|c| c.to_string()).collect()
                } else {
                    block.vocabulary.clone()
                };
                let mut data = vec![0.0; n * k];
                for r in 0..n {
                    data[r * k + argmax(r)] = 1.0;
                }
                FeatureBlock {
                    name: name.to_string(),
                    kind: FeatureKind::OneHot,
                    vocabulary,
                    data: Matrix::from_f64(n, k, data)?,
                }
            }
            ReencodeMode::IntegerId => FeatureBlock {
                name: name.to_string(),
                kind: FeatureKind::Numeric,
                vocabulary: Vec::new(),
                data: Matrix::from_f64(n, 1, (0..n).map(|r| argmax(r) as f64).collect())?,
            },
        };
        let mut out = self.clone();
        for b in &mut out.blocks {
            if b.name == name {
                *b = replacement;
                break;
            }
        }
        Ok(out)
    }
}

/// Concatenates the selected blocks over all rows.
pub fn assemble_predictors(ds: &DatasetContainer, include: &[&str]) -> Result<(DMatrix<f64>, BlockIndex)> {
    let rows: Vec<usize> = (0..ds.n_frames()).collect();
    ds.assemble_rows(include, &rows)
}

fn layer_file(i: usize) -> String {
    format!("layer_{i:03}.pkm")
}

fn feature_file(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("feature_{safe}.pkm")
}

pub fn write_container(ds: &DatasetContainer, root: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(root).map_err(|e| ProbeError::io(root, e))?;
    let mut manifest = Manifest {
        model: ds.model.clone(),
        layers: Vec::with_capacity(ds.layers.len()),
        features: Vec::with_capacity(ds.blocks.len()),
        meta: META_FILE.to_string(),
    };
    for (i, layer) in ds.layers.iter().enumerate() {
        let file = layer_file(i);
        write_matrix(&root.join(&file), layer)?;
        manifest.layers.push(file);
    }
    let mut used = HashSet::new();
    for (i, block) in ds.blocks.iter().enumerate() {
        let mut file = feature_file(&block.name);
        if !used.insert(file.clone()) {
            file = format!("feature_{i:03}.pkm");
        }
        write_matrix(&root.join(&file), &block.data)?;
        manifest.features.push(ManifestBlock {
            name: block.name.clone(),
            kind: block.kind,
            file,
            vocabulary: block.vocabulary.clone(),
        });
    }
    write_meta(&root.join(META_FILE), &ds.meta)?;
    let path = root.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| ProbeError::io(&path, e))
}

pub fn read_container(root: &Path) -> Result<DatasetContainer> {
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| ProbeError::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| ProbeError::format(&manifest_path, e.to_string()))?;
    let layers = manifest
        .layers
        .iter()
        .map(|f| read_matrix(&root.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let blocks = manifest
        .features
        .into_iter()
        .map(|b| {
            Ok(FeatureBlock {
                data: read_matrix(&root.join(&b.file))?,
                name: b.name,
                kind: b.kind,
                vocabulary: b.vocabulary,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = read_meta(&root.join(&manifest.meta))?;
    let ds = DatasetContainer {
        model: manifest.model,
        layers,
        blocks,
        meta,
    };
    ds.validate()?;
    Ok(ds)
}

fn write_meta(path: &Path, meta: &[FrameMeta]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| ProbeError::format(path, e.to_string()))?;
    let io = |e: csv::Error| ProbeError::format(path, e.to_string());
    w.write_record(["utterance_id", "speaker_id", "frame_time", "silent"])
        .map_err(io)?;
    for m in meta {
        let time = m.frame_time.to_string();
        w.write_record([
            m.utterance_id.as_str(),
            m.speaker_id.as_str(),
            time.as_str(),
            if m.silent { "1" } else { "0" },
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| ProbeError::io(path, e))
}

fn read_meta(path: &Path) -> Result<Vec<FrameMeta>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| ProbeError::format(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| ProbeError::format(path, e.to_string()))?;
        if rec.len() != 4 {
            return Err(ProbeError::format(
                path,
                format!("row {i} has {} fields, expected 4", rec.len()),
            ));
        }
        let frame_time: f64 = rec[2]
            .parse()
            .map_err(|_| ProbeError::format(path, format!("row {i}: bad frame_time {:?}", &rec[2])))?;
        let silent = match &rec[3] {
            "1" | "true" | "True" => true,
            "0" | "false" | "False" => false,
            other => return Err(ProbeError::format(path, format!("row {i}: bad silent flag {other:?}"))),
        };
        out.push(FrameMeta {
            utterance_id: rec[0].to_string(),
            speaker_id: rec[1].to_string(),
            frame_time,
            silent,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> DatasetContainer {
        let speakers: Vec<String> = (0..n).map(|i| format!("s{}", i % 3)).collect();
        let vocab = vec!["s0".to_string(), "s1".to_string(), "s2".to_string()];
        DatasetContainer {
            model: "toy".into(),
            layers: (0..2)
                .map(|l| Matrix::from_f64(n, 8, (0..n * 8).map(|i| (i * (l + 1)) as f64 * 0.5).collect()).unwrap())
                .collect(),
            blocks: vec![
                FeatureBlock {
                    name: "acoustics".into(),
                    kind: FeatureKind::Numeric,
                    vocabulary: vec![],
                    data: Matrix::from_f32(n, 2, (0..n * 2).map(|i| i as f32 * 0.25).collect()).unwrap(),
                },
                FeatureBlock::one_hot("speaker", &speakers, vocab),
            ],
            meta: (0..n)
                .map(|i| FrameMeta {
                    utterance_id: format!("u{}", i / 10),
                    speaker_id: speakers[i].clone(),
                    frame_time: (i % 10) as f64 * 0.02,
                    silent: i % 7 == 0,
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(100);
        write_container(&ds, dir.path()).unwrap();
        let back = read_container(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.blocks[0].data.dtype(), DType::F32);
        assert_eq!(back.layers[0].dtype(), DType::F64);
        for (a, b) in ds.layers.iter().zip(&back.layers) {
            assert_eq!(a.to_bytes(), b.to_bytes());
        }
    }

    #[test]
    fn one_hot_row_summing_to_two_is_rejected() {
        let mut ds = tiny(20);
        let mut values: Vec<f64> = (0..20).flat_map(|r| ds.blocks[1].data.row_f64(r)).collect();
        values[3 * 3] = 1.0;
        values[3 * 3 + 1] = 1.0;
        ds.blocks[1].data = Matrix::from_f64(20, 3, values).unwrap();
        assert!(matches!(ds.validate(), Err(ProbeError::Consistency(_))));
    }

    #[test]
    fn empty_container_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny(10);
        ds.meta.clear();
        ds.layers = vec![Matrix::from_f64(0, 8, vec![]).unwrap()];
        ds.blocks.clear();
        assert!(matches!(
            write_container(&ds, dir.path()),
            Err(ProbeError::Consistency(_))
        ));
    }

    #[test]
    fn row_count_mismatch_is_consistency_error() {
        let mut ds = tiny(10);
        ds.layers[1] = Matrix::from_f64(9, 8, vec![0.0; 72]).unwrap();
        assert!(matches!(ds.validate(), Err(ProbeError::Consistency(_))));
    }

    #[test]
    fn header_corruptions_are_format_errors() {
        let m = Matrix::from_f64(3, 2, vec![1.0; 6]).unwrap();
        let good = m.to_bytes();
        let p = Path::new("x.pkm");

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            Matrix::from_bytes(&bad_magic, p),
            Err(ProbeError::Format { .. })
        ));

        let mut bad_dtype = good.clone();
        bad_dtype[8] = 9;
        assert!(matches!(
            Matrix::from_bytes(&bad_dtype, p),
            Err(ProbeError::Format { .. })
        ));

        let mut bad_shape = good.clone();
        bad_shape[16] = 4;
        assert!(matches!(
            Matrix::from_bytes(&bad_shape, p),
            Err(ProbeError::Format { .. })
        ));

        let mut nan = good;
        nan[32..40].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(Matrix::from_bytes(&nan, p), Err(ProbeError::Data(_))));
    }

    #[test]
    fn handle_reads_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pkm");
        write_matrix(&path, &Matrix::from_f32(5, 4, vec![0.5; 20]).unwrap()).unwrap();
        let h = read_matrix_handle(&path).unwrap();
        assert_eq!((h.rows, h.cols, h.dtype), (5, 4, DType::F32));
    }

    #[test]
    fn header_layout_matches_documented_bytes() {
        let bytes = Matrix::from_f32(2, 3, vec![1.0; 6]).unwrap().to_bytes();
        assert_eq!(&bytes[..8], b"PKMAT1\0\0");
        assert_eq!(bytes[8], 1);
        assert_eq!(&bytes[9..16], &[0; 7]);
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &3u64.to_le_bytes());
        assert_eq!(bytes.len(), 32 + 6 * 4);
    }

    #[test]
    fn assemble_widths_follow_set_algebra() {
        let ds = tiny(30);
        let (full, idx) = assemble_predictors(&ds, &["speaker", "acoustics"]).unwrap();
        assert_eq!(full.ncols(), 5);
        // declaration order wins over request order
        assert_eq!(idx.spans[0].name, "acoustics");
        assert_eq!(idx.span("speaker").unwrap().columns, 2..5);
        let (spk, _) = assemble_predictors(&ds, &["speaker"]).unwrap();
        assert_eq!(spk.ncols(), 3);
        for r in 0..30 {
            assert_eq!(spk.row(r).sum(), 1.0);
        }
        assert!(matches!(assemble_predictors(&ds, &[]), Err(ProbeError::Config(_))));
        assert!(matches!(
            assemble_predictors(&ds, &["nope"]),
            Err(ProbeError::Config(_))
        ));
    }

    #[test]
    fn reencode_ppg_row() {
        let mut ds = tiny(1);
        ds.blocks.push(FeatureBlock {
            name: "ppg".into(),
            kind: FeatureKind::Embedding,
            vocabulary: vec![],
            data: Matrix::from_f64(1, 3, vec![0.1, 0.7, 0.2]).unwrap(),
        });
        let oh = ds.reencode_block("ppg", ReencodeMode::OneHotArgmax).unwrap();
        assert_eq!(oh.block("ppg").unwrap().data.row_f64(0), vec![0.0, 1.0, 0.0]);
        assert_eq!(oh.block("ppg").unwrap().kind, FeatureKind::OneHot);
        let id = ds.reencode_block("ppg", ReencodeMode::IntegerId).unwrap();
        assert_eq!(id.block("ppg").unwrap().data.row_f64(0), vec![1.0]);
        assert!(ds.reencode_block("acoustics", ReencodeMode::IntegerId).is_err());
    }

    #[test]
    fn out_of_vocabulary_labels_encode_as_zero_rows() {
        let b = FeatureBlock::one_hot("spk", &["a", "zz", "b"], vec!["a".into(), "b".into()]);
        assert_eq!(b.data.row_f64(1), vec![0.0, 0.0]);
        assert_eq!(b.labels().unwrap(), vec![Some("a".into()), None, Some("b".into())]);
    }
}
