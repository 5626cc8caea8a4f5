// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise linear probing of speech and text model representations.
//!
//! Fits ridge encoding probes from interpretable feature blocks to hidden
//! states, measures how much variance each block uniquely explains by
//! ablation, and runs the reverse decoding probes.

pub mod container;
pub mod decoding;
pub mod encoding;
pub mod error;
pub mod linalg;
pub mod report;
pub mod sampling;
pub mod synth;

pub use container::{DatasetContainer, FeatureBlock, FeatureKind, FrameMeta, Matrix};
pub use decoding::{DecodeReport, DecodeTarget, Metric};
pub use encoding::{AblationSpec, ContributionTable, FitReport, ProbeConfig, R2Mode, SeedSummary};
pub use error::{ProbeError, Result};
pub use linalg::{AlphaGrid, RidgeFit};
pub use sampling::{SamplingPolicy, SplitGranularity, SplitPlan};
pub use synth::{OracleTable, Scale, SynthSpec};
