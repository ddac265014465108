//! Failure-rate curves over pilot age and the availability valleys cut from
//! them.
//!
//! A curve is measured, not modelled: at every sample time the pilots alive
//! in an age interval are drawn `r` at a time, and a draw fails when all `r`
//! pilots end within the lease. A valley for redundancy `r` is the longest
//! run of intervals whose measured rate stays within `1 − λ`.

use std::io::{BufRead, BufReader, Read, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly::derive_seed;
use crate::error::{Error, Result};
use crate::reliability::check_availability;
use crate::trace::TraceDataset;

/// Index of the interval `(i·w, (i+1)·w]` holding `age`; age 0 joins the
/// first interval.
pub fn interval_index(age: i64, width: i64) -> usize {
    if age <= 0 {
        0
    } else {
        ((age - 1) / width) as usize
    }
}

/// `(lo, hi]` membership, with an interval starting at 0 closed at 0.
pub fn age_in_range(age: i64, lo: i64, hi: i64) -> bool {
    age <= hi && (age > lo || (lo == 0 && age == 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub lo_s: i64,
    pub hi_s: i64,
    /// `None` when no sample time had `r` pilots in the interval.
    pub failure_rate: Option<f64>,
    pub trials: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRateCurve {
    pub lease_s: i64,
    pub redundancy: usize,
    pub interval_s: i64,
    pub points: Vec<CurvePoint>,
}

impl FailureRateCurve {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "# lease_s={} redundancy={} interval_s={}",
            self.lease_s, self.redundancy, self.interval_s
        )?;
        writeln!(out, "age_lo_s,age_hi_s,failure_rate,trials")?;
        for p in &self.points {
            let rate = p.failure_rate.map(|r| r.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{}", p.lo_s, p.hi_s, rate, p.trials)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8")
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let parse_err = |line: u64, message: String| Error::Parse { line, message };

        let meta = lines
            .next()
            .transpose()?
            .ok_or_else(|| parse_err(1, "missing curve metadata line".into()))?;
        let (mut lease, mut redundancy, mut interval) = (None, None, None);
        for token in meta.trim_start_matches('#').split_whitespace() {
            let Some((k, v)) = token.split_once('=') else { continue };
            let v: i64 = v.parse().map_err(|e| parse_err(1, format!("{k}: {e}")))?;
            match k {
                "lease_s" => lease = Some(v),
                "redundancy" => redundancy = Some(v),
                "interval_s" => interval = Some(v),
                _ => {}
            }
        }
        let (Some(lease_s), Some(r), Some(interval_s)) = (lease, redundancy, interval) else {
            return Err(parse_err(1, "metadata needs lease_s, redundancy, interval_s".into()));
        };
        if r < 1 || interval_s <= 0 || lease_s <= 0 {
            return Err(parse_err(1, "curve metadata out of range".into()));
        }

        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != "age_lo_s,age_hi_s,failure_rate,trials" {
            return Err(parse_err(2, format!("unexpected header {header:?}")));
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let no = i as u64 + 3;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(parse_err(no, format!("expected 4 fields, got {}", fields.len())));
            }
            let int = |s: &str| s.trim().parse::<i64>().map_err(|e| parse_err(no, e.to_string()));
            let rate = match fields[2].trim() {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|e| parse_err(no, e.to_string()))?),
            };
            points.push(CurvePoint {
                lo_s: int(fields[0])?,
                hi_s: int(fields[1])?,
                failure_rate: rate,
                trials: fields[3]
                    .trim()
                    .parse()
                    .map_err(|e: std::num::ParseIntError| parse_err(no, e.to_string()))?,
            });
        }
        Ok(FailureRateCurve {
            lease_s,
            redundancy: r as usize,
            interval_s,
            points,
        })
    }
}

/// Remaining lifetimes of the pilots in one age interval at one sample time,
/// sorted ascending.
type Cohort = Vec<i64>;

/// Pre-sliced view of a dataset: for every age interval, the cohorts seen at
/// each sample time. Curves for any lease and redundancy are drawn from it.
#[derive(Debug, Clone)]
pub struct CurveSampler {
    interval_s: i64,
    cohorts: Vec<Vec<Cohort>>,
}

impl CurveSampler {
    pub fn new(dataset: &TraceDataset, interval_s: i64, cadence_s: i64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if interval_s <= 0 || cadence_s <= 0 {
            return Err(Error::invalid("interval and cadence must be positive"));
        }
        let intervals = interval_index(dataset.max_lifetime(), interval_s) + 1;
        let first = dataset.first_start().expect("non-empty");
        let last = dataset.last_end().expect("non-empty");
        let samples: Vec<i64> = (0..)
            .map(|k| first + k * cadence_s)
            .take_while(|&t| t < last)
            .collect();

        let per_sample: Vec<Vec<Cohort>> = samples
            .par_iter()
            .map(|&t| {
                let mut by_interval: Vec<Cohort> = vec![Vec::new(); intervals];
                for i in dataset.alive_indices(t) {
                    let r = &dataset.records()[i];
                    by_interval[interval_index(r.age_at(t), interval_s)].push(r.end_time - t);
                }
                for c in &mut by_interval {
                    c.sort_unstable();
                }
                by_interval
            })
            .collect();

        let mut cohorts: Vec<Vec<Cohort>> = vec![Vec::new(); intervals];
        for sample in per_sample {
            for (i, cohort) in sample.into_iter().enumerate() {
                if !cohort.is_empty() {
                    cohorts[i].push(cohort);
                }
            }
        }
        Ok(CurveSampler {
            interval_s,
            cohorts,
        })
    }

    pub fn interval_s(&self) -> i64 {
        self.interval_s
    }

    pub fn intervals(&self) -> usize {
        self.cohorts.len()
    }

    /// Draws the curve for one lease and redundancy level.
    pub fn curve(&self, lease_s: i64, redundancy: usize, reps: usize, seed: u64) -> Result<FailureRateCurve> {
        if redundancy == 0 || reps == 0 || lease_s <= 0 {
            return Err(Error::invalid("redundancy, reps and lease must be positive"));
        }
        let points = self
            .cohorts
            .par_iter()
            .enumerate()
            .map(|(i, cohorts)| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
                let (mut trials, mut failures) = (0u64, 0u64);
                for cohort in cohorts {
                    let n = cohort.len();
                    if n < redundancy {
                        continue;
                    }
                    // Pilots ending before t + lease sit at the front.
                    let doomed = cohort.partition_point(|&rem| rem < lease_s);
                    trials += reps as u64;
                    if doomed < redundancy {
                        continue;
                    }
                    if doomed == n {
                        failures += reps as u64;
                        continue;
                    }
                    for _ in 0..reps {
                        if index::sample(&mut rng, n, redundancy).iter().all(|k| k < doomed) {
                            failures += 1;
                        }
                    }
                }
                let lo_s = i as i64 * self.interval_s;
                CurvePoint {
                    lo_s,
                    hi_s: lo_s + self.interval_s,
                    failure_rate: (trials > 0).then(|| failures as f64 / trials as f64),
                    trials,
                }
            })
            .collect();
        Ok(FailureRateCurve {
            lease_s,
            redundancy,
            interval_s: self.interval_s,
            points,
        })
    }
}

pub fn compute_failure_curve(
    dataset: &TraceDataset,
    lease_s: i64,
    redundancy: usize,
    interval_s: i64,
    cadence_s: i64,
    reps: usize,
    seed: u64,
) -> Result<FailureRateCurve> {
    CurveSampler::new(dataset, interval_s, cadence_s)?.curve(lease_s, redundancy, reps, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Valley {
    #[serde(rename = "r")]
    pub redundancy: usize,
    pub lo_s: i64,
    pub hi_s: i64,
    /// Set when the range was stretched to contain a smaller-redundancy valley.
    #[serde(default)]
    pub widened: bool,
}

impl Valley {
    pub fn contains_age(&self, age: i64) -> bool {
        age_in_range(age, self.lo_s, self.hi_s)
    }

    fn covers(&self, other: &Valley) -> bool {
        self.lo_s <= other.lo_s && other.hi_s <= self.hi_s
    }
}

/// Valleys for one (availability, lease) pair, ordered by increasing
/// redundancy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValleyTable {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub availability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lease_s: Option<i64>,
    pub valleys: Vec<Valley>,
}

impl ValleyTable {
    pub fn new(availability: f64, lease_s: i64, valleys: Vec<Valley>) -> Result<Self> {
        let table = ValleyTable {
            availability: Some(availability),
            lease_s: Some(lease_s),
            valleys,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn is_empty(&self) -> bool {
        self.valleys.is_empty()
    }

    pub fn matches(&self, availability: f64, lease_s: i64) -> bool {
        self.availability.is_some_and(|a| (a - availability).abs() < 1e-12)
            && self.lease_s == Some(lease_s)
    }

    pub fn max_redundancy(&self) -> Option<usize> {
        self.valleys.last().map(|v| v.redundancy)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.availability {
            check_availability(a)?;
        }
        if self.lease_s.is_some_and(|l| l <= 0) {
            return Err(Error::invalid("lease must be positive"));
        }
        for v in &self.valleys {
            if v.redundancy == 0 || v.lo_s >= v.hi_s || v.lo_s < 0 {
                return Err(Error::invalid(format!("malformed valley {v:?}")));
            }
        }
        if self.valleys.windows(2).any(|w| w[0].redundancy >= w[1].redundancy) {
            return Err(Error::invalid("valleys must be ordered by increasing redundancy"));
        }
        Ok(())
    }

    /// Every valley contains all valleys of smaller redundancy.
    pub fn is_nested(&self) -> bool {
        self.valleys
            .iter()
            .enumerate()
            .all(|(i, v)| self.valleys[..i].iter().all(|smaller| v.covers(smaller)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: ValleyTable = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
    }
}

/// Longest run of defined points with rate within `budget`; ties keep the
/// earliest run.
fn longest_sublevel_run(points: &[CurvePoint], budget: f64) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = None;
    for (i, p) in points.iter().enumerate() {
        let ok = p.failure_rate.is_some_and(|f| f <= budget);
        match (ok, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if best.is_none_or(|(bs, be)| i - s > be - bs + 1) {
                    best = Some((s, i - 1));
                }
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        let e = points.len() - 1;
        if best.is_none_or(|(bs, be)| e - s > be - bs) {
            best = Some((s, e));
        }
    }
    best
}

/// Cuts valleys from curves of one lease, one curve per redundancy level.
///
/// Each valley is widened to contain every smaller-redundancy valley, and
/// construction stops at the first valley spanning `[0, cover_to]` where
/// `cover_to` is the smaller of `retire_time` and the oldest defined age.
pub fn determine_valleys(
    curves: &[FailureRateCurve],
    availability: f64,
    retire_time: i64,
) -> Result<ValleyTable> {
    check_availability(availability)?;
    let Some(first) = curves.first() else {
        return Err(Error::invalid("no curves given"));
    };
    if curves
        .iter()
        .any(|c| c.lease_s != first.lease_s || c.interval_s != first.interval_s)
    {
        return Err(Error::invalid("curves must share lease and interval grid"));
    }
    let mut sorted: Vec<&FailureRateCurve> = curves.iter().collect();
    sorted.sort_by_key(|c| c.redundancy);
    if sorted.windows(2).any(|w| w[0].redundancy == w[1].redundancy) {
        return Err(Error::invalid("duplicate redundancy level"));
    }

    let oldest_defined = curves
        .iter()
        .flat_map(|c| c.points.iter())
        .filter(|p| p.failure_rate.is_some())
        .map(|p| p.hi_s)
        .max()
        .unwrap_or(0);
    let cover_to = retire_time.min(oldest_defined);
    let budget = 1.0 - availability;

    let mut valleys: Vec<Valley> = Vec::new();
    for curve in sorted {
        let Some((s, e)) = longest_sublevel_run(&curve.points, budget) else {
            continue;
        };
        let raw = Valley {
            redundancy: curve.redundancy,
            lo_s: curve.points[s].lo_s,
            hi_s: curve.points[e].hi_s,
            widened: false,
        };
        let mut valley = raw;
        for smaller in &valleys {
            valley.lo_s = valley.lo_s.min(smaller.lo_s);
            valley.hi_s = valley.hi_s.max(smaller.hi_s);
        }
        valley.widened = (valley.lo_s, valley.hi_s) != (raw.lo_s, raw.hi_s);
        let covered = valley.lo_s == 0 && valley.hi_s >= cover_to;
        valleys.push(valley);
        if covered {
            break;
        }
    }
    ValleyTable::new(availability, first.lease_s, valleys)
}

fn default_interval() -> i64 {
    12_000
}
fn default_curve_cadence() -> i64 {
    6_000
}
fn default_reps() -> usize {
    10
}
fn default_max_redundancy() -> usize {
    12
}

/// How curves are measured when building tables from a training trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurveParams {
    #[serde(default = "default_interval")]
    pub interval_s: i64,
    #[serde(default = "default_curve_cadence")]
    pub cadence_s: i64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_max_redundancy")]
    pub max_redundancy: usize,
}

impl Default for CurveParams {
    fn default() -> Self {
        CurveParams {
            interval_s: default_interval(),
            cadence_s: default_curve_cadence(),
            reps: default_reps(),
            max_redundancy: default_max_redundancy(),
        }
    }
}

/// Seed for the curve of (`lease_s`, `redundancy`) under a base seed.
pub fn curve_seed(seed: u64, lease_s: i64, redundancy: usize) -> u64 {
    derive_seed(derive_seed(seed, lease_s as u64), redundancy as u64)
}

/// Builds one table per (availability, lease) pair, raising redundancy
/// until every availability's table covers the trace or the cap is hit.
pub fn build_valley_tables(
    dataset: &TraceDataset,
    availabilities: &[f64],
    leases: &[i64],
    params: &CurveParams,
    seed: u64,
) -> Result<Vec<ValleyTable>> {
    let sampler = CurveSampler::new(dataset, params.interval_s, params.cadence_s)?;
    let mut tables = Vec::new();
    for &lease in leases {
        let mut curves = Vec::new();
        let mut done: Vec<Option<ValleyTable>> = vec![None; availabilities.len()];
        for r in 1..=params.max_redundancy.max(1) {
            curves.push(sampler.curve(lease, r, params.reps, curve_seed(seed, lease, r))?);
            for (slot, &a) in done.iter_mut().zip(availabilities) {
                if slot.is_some() {
                    continue;
                }
                let table = determine_valleys(&curves, a, dataset.retire_time())?;
                if table.valleys.last().is_some_and(|v| covers_all(v, &curves, dataset)) {
                    *slot = Some(table);
                }
            }
            if done.iter().all(Option::is_some) {
                break;
            }
        }
        for (slot, &a) in done.into_iter().zip(availabilities) {
            tables.push(match slot {
                Some(t) => t,
                None => determine_valleys(&curves, a, dataset.retire_time())?,
            });
        }
    }
    Ok(tables)
}

fn covers_all(v: &Valley, curves: &[FailureRateCurve], dataset: &TraceDataset) -> bool {
    let oldest = curves
        .iter()
        .flat_map(|c| c.points.iter())
        .filter(|p| p.failure_rate.is_some())
        .map(|p| p.hi_s)
        .max()
        .unwrap_or(0);
    v.lo_s == 0 && v.hi_s >= dataset.retire_time().min(oldest)
}
