// SPDX-License-Identifier: MIT OR Apache-2.0

//! Frame subsampling, speaker-stratified train/test splits and multi-seed plans.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::FrameMeta;
use crate::error::{ProbeError, Result};

const SAMPLE_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub max_frames_per_utterance: usize,
    pub drop_silent: bool,
    pub seed: u64,
}

impl SamplingPolicy {
    /// Cap used for speech models.
    pub const SPEECH_CAP: usize = 15;
    /// Cap used for text models.
    pub const TEXT_CAP: usize = 10;
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            max_frames_per_utterance: Self::SPEECH_CAP,
            drop_silent: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitGranularity {
    #[default]
    Utterance,
    Frame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub seed: u64,
    pub ratio: f64,
}

/// Row groups keyed by utterance, in order of first appearance.
fn utterances(meta: &[FrameMeta], rows: &[usize]) -> Vec<(String, Vec<usize>)> {
    let mut order: Vec<(String, Vec<usize>)> = Vec::new();
    let mut pos: HashMap<&str, usize> = HashMap::new();
    for &r in rows {
        let id = meta[r].utterance_id.as_str();
        match pos.get(id) {
            Some(&i) => order[i].1.push(r),
            None => {
                pos.insert(id, order.len());
                order.push((id.to_string(), vec![r]));
            }
        }
    }
    order
}

/// Keeps up to `max_frames_per_utterance` frames of every utterance, drawn
/// uniformly without replacement. Returned rows are in ascending order.
pub fn sample_frames(meta: &[FrameMeta], policy: &SamplingPolicy) -> Result<Vec<usize>> {
    if meta.is_empty() {
        return Err(ProbeError::Consistency("no frames to sample".into()));
    }
    if policy.max_frames_per_utterance == 0 {
        return Err(ProbeError::Config("max frames per utterance must be at least 1".into()));
    }
    let rows: Vec<usize> = (0..meta.len()).collect();
    let mut rng = rng_for(policy.seed, SAMPLE_STREAM);
    let mut kept = Vec::new();
    for (_, frames) in utterances(meta, &rows) {
        let eligible: Vec<usize> = frames
            .into_iter()
            .filter(|&r| !(policy.drop_silent && meta[r].silent))
            .collect();
        if eligible.len() <= policy.max_frames_per_utterance {
            kept.extend(eligible);
        } else {
            kept.extend(
                index::sample(&mut rng, eligible.len(), policy.max_frames_per_utterance)
                    .into_iter()
                    .map(|i| eligible[i]),
            );
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

/// Utterance-level split of every row, stratified by speaker.
pub fn stratified_split(meta: &[FrameMeta], ratio: f64, seed: u64) -> Result<SplitPlan> {
    let rows: Vec<usize> = (0..meta.len()).collect();
    stratified_split_rows(meta, &rows, ratio, seed, SplitGranularity::Utterance)
}

/// Splits `rows` within each speaker stratum. Units (utterances, or single
/// frames) are shuffled per speaker and the first `round(ratio·count)` go to
/// train, clamped so that both sides keep at least one unit. Speakers with a
/// single unit go entirely to train.
pub fn stratified_split_rows(
    meta: &[FrameMeta],
    rows: &[usize],
    ratio: f64,
    seed: u64,
    granularity: SplitGranularity,
) -> Result<SplitPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(ProbeError::Config(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let units: Vec<Vec<usize>> = match granularity {
        SplitGranularity::Utterance => utterances(meta, rows).into_iter().map(|(_, r)| r).collect(),
        SplitGranularity::Frame => rows.iter().map(|&r| vec![r]).collect(),
    };
    let mut strata: BTreeMap<&str, Vec<&Vec<usize>>> = BTreeMap::new();
    for unit in &units {
        strata.entry(meta[unit[0]].speaker_id.as_str()).or_default().push(unit);
    }
    let mut rng = rng_for(seed, SPLIT_STREAM);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (speaker, mut group) in strata {
        if group.len() < 2 {
            log::warn!("speaker {speaker} has a single unit; all of its rows go to train");
            train.extend(group.into_iter().flatten());
            continue;
        }
        group.shuffle(&mut rng);
        let count = group.len();
        let n_train = ((ratio * count as f64).round() as usize).clamp(1, count - 1);
        for (i, unit) in group.into_iter().enumerate() {
            if i < n_train {
                train.extend(unit);
            } else {
                test.extend(unit);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        train_rows: train,
        test_rows: test,
        seed,
        ratio,
    })
}

/// Returns one copy of `base` per seed with `set_seed` applied.
pub fn seed_plan<C: Clone>(base: &C, seeds: &[u64], set_seed: impl Fn(&mut C, u64)) -> Result<Vec<C>> {
    if seeds.is_empty() {
        return Err(ProbeError::Config("seed list is empty".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(ProbeError::Config(format!("duplicate seed {dup}")));
    }
    Ok(seeds
        .iter()
        .map(|&s| {
            let mut c = base.clone();
            set_seed(&mut c, s);
            c
        })
        .collect())
}

/// The ten-seed replication set `{100, 200, …, 1000}`.
pub fn replication_seeds() -> Vec<u64> {
    (1..=10).map(|n| n * 100).collect()
}
