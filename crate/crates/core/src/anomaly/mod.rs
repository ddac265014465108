//! Burst detection on the stream of unexpected pilot terminations.
//!
//! Terminations of the watched classes are counted per fixed-width time bin,
//! shingled, and scored by a robust random cut forest. A bin whose score
//! exceeds the threshold opens a halt window that lasts until the end of the
//! bin plus the halting period. Pilots ending inside a halt window are
//! dropped from the training data, and the simulator does not schedule while
//! a window is open.

pub mod rrcf;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{TerminationClass, TraceDataset};

pub use rrcf::{derive_seed, ForestConfig, RrcfForest, RrcfTree};

/// Count of matching terminations ending in `[bin_start, bin_start + width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailurePoint {
    pub bin_start: i64,
    pub count: u64,
}

/// Bins terminations of `classes` by end time. Bins are aligned to multiples
/// of `bin_width` and span every record's end time, so the stream is
/// contiguous even where nothing matched.
pub fn bin_failures(
    dataset: &TraceDataset,
    classes: &BTreeSet<TerminationClass>,
    bin_width: i64,
) -> Result<Vec<FailurePoint>> {
    if bin_width <= 0 {
        return Err(Error::invalid("bin width must be positive"));
    }
    let ends = dataset.records().iter().map(|r| r.end_time);
    let (Some(first), Some(last)) = (ends.clone().min(), ends.max()) else {
        return Ok(Vec::new());
    };
    let first_bin = first.div_euclid(bin_width);
    let bins = (last.div_euclid(bin_width) - first_bin + 1) as usize;
    let mut points: Vec<FailurePoint> = (0..bins)
        .map(|i| FailurePoint {
            bin_start: (first_bin + i as i64) * bin_width,
            count: 0,
        })
        .collect();
    for r in dataset.records() {
        if classes.contains(&r.termination_class) {
            let idx = (r.end_time.div_euclid(bin_width) - first_bin) as usize;
            points[idx].count += 1;
        }
    }
    Ok(points)
}

/// Sorted, non-overlapping `[start, end)` intervals during which the
/// detector considers the system anomalous.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HaltSchedule {
    windows: Vec<(i64, i64)>,
}

impl HaltSchedule {
    pub fn new(mut windows: Vec<(i64, i64)>) -> Result<Self> {
        if let Some(&(s, e)) = windows.iter().find(|(s, e)| s >= e) {
            return Err(Error::invalid(format!("halt window [{s}, {e}) is empty")));
        }
        windows.sort_unstable();
        let mut merged: Vec<(i64, i64)> = Vec::with_capacity(windows.len());
        for (s, e) in windows {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        Ok(HaltSchedule { windows: merged })
    }

    pub fn windows(&self) -> &[(i64, i64)] {
        &self.windows
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn contains(&self, t: i64) -> bool {
        let idx = self.windows.partition_point(|&(s, _)| s <= t);
        idx > 0 && t < self.windows[idx - 1].1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schedule serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let windows: Vec<(i64, i64)> = serde_json::from_str(text)?;
        Self::new(windows)
    }
}

fn default_bin_width() -> i64 {
    300
}
fn default_threshold() -> f64 {
    250.0
}
fn default_halt() -> i64 {
    900
}
fn default_classes() -> BTreeSet<TerminationClass> {
    BTreeSet::from([TerminationClass::Network, TerminationClass::Preempted])
}

/// Everything needed to turn a trace into a halt schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    #[serde(flatten)]
    pub forest: ForestConfig,
    #[serde(default = "default_bin_width")]
    pub bin_width_s: i64,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_halt")]
    pub halt_s: i64,
    #[serde(default = "default_classes")]
    pub classes: BTreeSet<TerminationClass>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            forest: ForestConfig::default(),
            bin_width_s: default_bin_width(),
            threshold: default_threshold(),
            halt_s: default_halt(),
            classes: default_classes(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.threshold.is_nan() || self.threshold <= 0.0 {
            return Err(Error::invalid("threshold must be positive"));
        }
        if self.halt_s < 0 {
            return Err(Error::invalid("halting period must be non-negative"));
        }
        if self.bin_width_s <= 0 {
            return Err(Error::invalid("bin width must be positive"));
        }
        Ok(())
    }
}

/// Scores every point of the stream. The first `shingle_size - 1` points
/// have no complete shingle and score zero.
pub fn score_stream(points: &[FailurePoint], forest: &ForestConfig) -> Result<Vec<f64>> {
    let mut rrcf = RrcfForest::<f64>::new(forest.clone())?;
    let values: Vec<f64> = points.iter().map(|p| p.count as f64).collect();
    let lead = forest.shingle_size.saturating_sub(1).min(values.len());
    let mut scores = vec![0.0; lead];
    for shingle in rrcf::shingles(&values, forest.shingle_size) {
        scores.push(rrcf.insert_point(shingle)?);
    }
    Ok(scores)
}

/// Nearest-rank quantile (`q` in `(0, 1]`) of a set of scores, for
/// calibrating a threshold on a stream known to be clean.
pub fn calibrate_threshold(scores: &[f64], q: f64) -> Option<f64> {
    if scores.is_empty() || !(q > 0.0 && q <= 1.0) {
        return None;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (q * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Emits `[bin_start, bin_end + halt)` for every point scoring above the
/// threshold, merged into a schedule.
pub fn detect(points: &[FailurePoint], config: &DetectorConfig) -> Result<HaltSchedule> {
    config.validate()?;
    let scores = score_stream(points, &config.forest)?;
    windows_from_scores(points, &scores, config.bin_width_s, config.threshold, config.halt_s)
}

pub fn windows_from_scores(
    points: &[FailurePoint],
    scores: &[f64],
    bin_width: i64,
    threshold: f64,
    halt_s: i64,
) -> Result<HaltSchedule> {
    let windows = points
        .iter()
        .zip(scores)
        .filter(|(_, &s)| s > threshold)
        .map(|(p, _)| (p.bin_start, p.bin_start + bin_width + halt_s))
        .collect();
    HaltSchedule::new(windows)
}

/// Bins, scores and detects in one pass over a trace.
pub fn detect_dataset(dataset: &TraceDataset, config: &DetectorConfig) -> Result<HaltSchedule> {
    let points = bin_failures(dataset, &config.classes, config.bin_width_s)?;
    detect(&points, config)
}

/// Drops every record whose end time falls inside a halt window.
pub fn filter_dataset(dataset: &TraceDataset, schedule: &HaltSchedule) -> TraceDataset {
    if schedule.is_empty() {
        return dataset.clone();
    }
    dataset.filtered(|r| !schedule.contains(r.end_time))
}
