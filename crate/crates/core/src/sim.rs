//! Trace replay: sample the test span, build the live pool at each sample,
//! issue one task per (availability, lease, algorithm) and score it against
//! the recorded pilot end times.

use std::io::Write;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly::{derive_seed, detect_dataset, filter_dataset, DetectorConfig, HaltSchedule};
use crate::error::{Error, Result};
use crate::reliability::{build_lifetime_dist, check_availability, EmpiricalLifetimeDist};
use crate::selection::{
    apply_cap, attach_failure_rates, select_random, select_sorted, select_spread, select_valley,
    Algorithm, PilotCandidate, SelectionResult, SelectionStatus,
};
use crate::trace::{parse_trace, TraceDataset};
use crate::valley::{build_valley_tables, CurveParams, ValleyTable};

fn default_cadence() -> i64 {
    6_000
}
fn default_availabilities() -> Vec<f64> {
    vec![0.90, 0.95, 0.99]
}
fn default_leases() -> Vec<i64> {
    vec![3_600, 14_400, 25_200]
}
fn default_algorithms() -> Vec<Algorithm> {
    Algorithm::ALL.to_vec()
}
fn default_train_fraction() -> f64 {
    0.75
}
fn default_dist_bin() -> i64 {
    60
}

/// Where the replayed traces come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// One trace, split by start time.
    Split {
        trace: PathBuf,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
    },
    Separate { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSource>,
    #[serde(default = "default_cadence")]
    pub cadence_s: i64,
    #[serde(default = "default_availabilities")]
    pub availabilities: Vec<f64>,
    #[serde(default = "default_leases")]
    pub leases_s: Vec<i64>,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default)]
    pub redundancy_cap: Option<usize>,
    #[serde(default)]
    pub anomaly: Option<DetectorConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub curves: CurveParams,
    /// Histogram bin width for the Random and Sorted failure rates.
    #[serde(default = "default_dist_bin")]
    pub dist_bin_width_s: i64,
    /// Precomputed tables; built from the training trace when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valley_tables: Option<Vec<ValleyTable>>,
    /// Keep a per-task log in the report.
    #[serde(default)]
    pub record_tasks: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            data: None,
            cadence_s: default_cadence(),
            availabilities: default_availabilities(),
            leases_s: default_leases(),
            algorithms: default_algorithms(),
            redundancy_cap: None,
            anomaly: None,
            seed: 0,
            curves: CurveParams::default(),
            dist_bin_width_s: default_dist_bin(),
            valley_tables: None,
            record_tasks: false,
        }
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: SimConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cadence_s <= 0 {
            return Err(Error::invalid("cadence must be positive"));
        }
        if self.dist_bin_width_s <= 0 {
            return Err(Error::invalid("histogram bin width must be positive"));
        }
        for &a in &self.availabilities {
            check_availability(a)?;
        }
        if let Some(&l) = self.leases_s.iter().find(|&&l| l <= 0) {
            return Err(Error::invalid(format!("lease {l} must be positive")));
        }
        if self.redundancy_cap == Some(0) {
            return Err(Error::invalid("redundancy cap must be positive"));
        }
        if let Some(DataSource::Split { train_fraction, .. }) = &self.data {
            if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
                return Err(Error::invalid("train fraction must lie in (0, 1)"));
            }
        }
        if let Some(a) = &self.anomaly {
            a.validate()?;
        }
        if let Some(tables) = &self.valley_tables {
            for t in tables {
                t.validate()?;
            }
        }
        Ok(())
    }

    fn cells(&self) -> Vec<(f64, i64, Algorithm)> {
        let mut cells = Vec::new();
        for &a in &self.availabilities {
            for &l in &self.leases_s {
                for &alg in &self.algorithms {
                    cells.push((a, l, alg));
                }
            }
        }
        cells
    }
}

/// Training and test traces plus the span tasks are issued over.
#[derive(Debug, Clone)]
pub struct SimInput {
    pub train: TraceDataset,
    pub test: TraceDataset,
    pub test_from: i64,
    pub test_until: i64,
    /// True when train and test come from one trace.
    shared: bool,
}

impl SimInput {
    /// Records starting before the split point train; tasks are issued from
    /// the split point to the last start, against the whole trace.
    pub fn split(dataset: TraceDataset, train_fraction: f64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::invalid("train fraction must lie in (0, 1)"));
        }
        let first = dataset.first_start().ok_or(Error::EmptyDataset)?;
        let last = dataset.last_start().ok_or(Error::EmptyDataset)?;
        let split = first + ((last - first) as f64 * train_fraction).round() as i64;
        let train = dataset.filtered(|r| r.start_time < split);
        if train.is_empty() {
            return Err(Error::invalid("training portion of the trace is empty"));
        }
        Ok(SimInput {
            train,
            test: dataset,
            test_from: split,
            test_until: last,
            shared: true,
        })
    }

    pub fn separate(train: TraceDataset, test: TraceDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let test_from = test.first_start().ok_or(Error::EmptyDataset)?;
        let test_until = test.last_start().ok_or(Error::EmptyDataset)?;
        Ok(SimInput {
            train,
            test,
            test_from,
            test_until,
            shared: false,
        })
    }

    pub fn load(source: &DataSource) -> Result<Self> {
        match source {
            DataSource::Split { trace, train_fraction } => {
                SimInput::split(parse_trace(trace)?, *train_fraction)
            }
            DataSource::Separate { train, test } => {
                SimInput::separate(parse_trace(train)?, parse_trace(test)?)
            }
        }
    }

    pub fn sample_times(&self, cadence_s: i64) -> Vec<i64> {
        (0..)
            .map(|k| self.test_from + k * cadence_s)
            .take_while(|&t| t <= self.test_until)
            .collect()
    }
}

/// Pilots alive at `t`: started at or before `t` and ending after it.
pub fn enumerate_pool<T>(dataset: &TraceDataset, t: i64) -> Vec<PilotCandidate<'_, T>> {
    dataset
        .alive_indices(t)
        .map(|i| {
            let r = &dataset.records()[i];
            PilotCandidate {
                pilot_id: &r.pilot_id,
                start_time: r.start_time,
                age: t - r.start_time,
                record: i,
                failure_rate: None,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

/// A task succeeds when some replica's pilot runs through the whole lease.
pub fn task_outcome(dataset: &TraceDataset, records: &[usize], t0: i64, lease_s: i64) -> Outcome {
    if records
        .iter()
        .any(|&i| dataset.records()[i].end_time >= t0 + lease_s)
    {
        Outcome::Success
    } else {
        Outcome::Failure
    }
}

/// One issued task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub sample_time: i64,
    pub availability: f64,
    pub lease_s: i64,
    pub algorithm: Algorithm,
    pub pool_size: usize,
    pub status: SelectionStatus,
    pub replicas: usize,
    pub valley_used: Option<usize>,
    /// `None` when the task was held.
    pub outcome: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub availability: f64,
    pub lease_s: i64,
    pub algorithm: Algorithm,
    pub attempted: u64,
    pub held: u64,
    pub successes: u64,
    pub failures: u64,
    /// Failures over executed tasks; `None` when nothing ran.
    pub failure_rate: Option<f64>,
    pub mean_redundancy: Option<f64>,
    /// Distinct pilots ever selectable over distinct pilots ever pooled.
    pub utilization: Option<f64>,
    /// Mean over samples of selectable over pooled.
    pub utilization_per_sample: Option<f64>,
}

impl CellReport {
    pub fn conserves(&self) -> bool {
        self.attempted == self.successes + self.failures + self.held
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub samples: u64,
    /// Sample times skipped because they fell inside a halt window.
    pub halted_samples: u64,
    pub halt_windows: HaltSchedule,
    pub cells: Vec<CellReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<Vec<TaskRecord>>,
}

pub const REPORT_CSV_HEADER: &str =
    "availability,lease_s,algorithm,attempted,held,failure_rate,mean_redundancy,utilization";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SimReport {
    pub fn cell(&self, availability: f64, lease_s: i64, algorithm: Algorithm) -> Option<&CellReport> {
        self.cells.iter().find(|c| {
            c.availability == availability && c.lease_s == lease_s && c.algorithm == algorithm
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{REPORT_CSV_HEADER}")?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.availability,
                c.lease_s,
                c.algorithm,
                c.attempted,
                c.held,
                opt(c.failure_rate),
                opt(c.mean_redundancy),
                opt(c.utilization),
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// What the selectors work from, prepared once per run.
struct Prepared {
    tables: Vec<Option<ValleyTable>>,
    dist: Option<EmpiricalLifetimeDist>,
    halts: HaltSchedule,
}

fn prepare(config: &SimConfig, input: &SimInput) -> Result<Prepared> {
    let halts = match &config.anomaly {
        None => HaltSchedule::default(),
        Some(det) if input.shared => detect_dataset(&input.test, det)?,
        Some(det) => {
            let mut windows = detect_dataset(&input.train, det)?.windows().to_vec();
            windows.extend_from_slice(detect_dataset(&input.test, det)?.windows());
            HaltSchedule::new(windows)?
        }
    };
    let train = if halts.is_empty() {
        input.train.clone()
    } else {
        filter_dataset(&input.train, &halts)
    };
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let needs_tables = config.algorithms.iter().any(|a| a.uses_valleys());
    let needs_dist = config.algorithms.iter().any(|a| !a.uses_valleys());

    let pairs: Vec<(f64, i64)> = config
        .availabilities
        .iter()
        .flat_map(|&a| config.leases_s.iter().map(move |&l| (a, l)))
        .collect();
    let mut tables: Vec<Option<ValleyTable>> = vec![None; pairs.len()];
    if needs_tables {
        let available = match &config.valley_tables {
            Some(given) => given.clone(),
            None => build_valley_tables(
                &train,
                &config.availabilities,
                &config.leases_s,
                &config.curves,
                config.seed,
            )?,
        };
        for (slot, &(a, l)) in tables.iter_mut().zip(&pairs) {
            let table = available
                .iter()
                .find(|t| t.matches(a, l))
                .ok_or(Error::MissingValleyTable { availability: a, lease_s: l })?;
            *slot = Some(match config.redundancy_cap {
                Some(cap) => apply_cap(table, cap)?,
                None => table.clone(),
            });
        }
    }
    let dist = if needs_dist {
        Some(build_lifetime_dist(&train, config.dist_bin_width_s)?)
    } else {
        None
    };
    Ok(Prepared { tables, dist, halts })
}

/// One sample's tasks plus, per cell, the selectable pilots.
struct SampleResult {
    tasks: Vec<TaskRecord>,
    pooled: Vec<usize>,
    selectable: Vec<Vec<usize>>,
}

fn run_sample(
    config: &SimConfig,
    input: &SimInput,
    prep: &Prepared,
    cells: &[(f64, i64, Algorithm)],
    sample_index: usize,
    t: i64,
) -> Result<SampleResult> {
    let base: Vec<PilotCandidate<'_, f64>> = enumerate_pool(&input.test, t);
    let pooled: Vec<usize> = base.iter().map(|c| c.record).collect();
    let sample_seed = derive_seed(config.seed, sample_index as u64);
    let lease_index = |l: i64| config.leases_s.iter().position(|&x| x == l).expect("lease listed");
    let nl = config.leases_s.len();

    // Pools with failure rates, one per lease.
    let rated: Vec<Vec<PilotCandidate<'_, f64>>> = match &prep.dist {
        Some(dist) => config
            .leases_s
            .iter()
            .map(|&l| {
                let mut p = base.clone();
                attach_failure_rates(&mut p, dist, l);
                p
            })
            .collect(),
        None => Vec::new(),
    };

    let mut tasks = Vec::with_capacity(cells.len());
    let mut selectable = Vec::with_capacity(cells.len());
    for (ci, &(a, l, alg)) in cells.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sample_seed, ci as u64));
        let li = lease_index(l);
        let ai = config
            .availabilities
            .iter()
            .position(|&x| x == a)
            .expect("availability listed");
        let (result, pool): (SelectionResult<f64>, &[PilotCandidate<'_, f64>]) = match alg {
            Algorithm::Random => (select_random(&rated[li], a, &mut rng)?, &rated[li]),
            Algorithm::Sorted => (select_sorted(&rated[li], a)?, &rated[li]),
            Algorithm::Valley | Algorithm::Spread => {
                let table = prep.tables[ai * nl + li].as_ref().expect("table prepared");
                let res = if alg == Algorithm::Valley {
                    select_valley(&base, table, &mut rng)?
                } else {
                    select_spread(&base, table, &mut rng)?
                };
                (res, &base)
            }
        };

        selectable.push(if alg.uses_valleys() {
            let table = prep.tables[ai * nl + li].as_ref().expect("table prepared");
            base.iter()
                .filter(|c| table.valleys.iter().any(|v| v.contains_age(c.age)))
                .map(|c| c.record)
                .collect()
        } else {
            pooled.clone()
        });

        // Baselines that run out of pool still launch on every pilot they
        // listed. Valley selectors that find nothing hold the task, as does
        // a baseline needing more replicas than the cap allows.
        let run = match (result.status, config.redundancy_cap) {
            (SelectionStatus::Selected, Some(cap)) => result.picks.len() <= cap,
            (SelectionStatus::Selected, None) => true,
            (SelectionStatus::NoSolution, None) => !alg.uses_valleys() && !result.picks.is_empty(),
            _ => false,
        };
        let status = if run { result.status } else { SelectionStatus::Held };
        let records: Vec<usize> = result.picks.iter().map(|&i| pool[i].record).collect();
        tasks.push(TaskRecord {
            sample_time: t,
            availability: a,
            lease_s: l,
            algorithm: alg,
            pool_size: pool.len(),
            status,
            replicas: if run { records.len() } else { 0 },
            valley_used: result.valley_used,
            outcome: run.then(|| task_outcome(&input.test, &records, t, l)),
        });
    }
    Ok(SampleResult { tasks, pooled, selectable })
}

/// Replays the test span and aggregates one report cell per
/// (availability, lease, algorithm).
pub fn run_simulation(config: &SimConfig, input: &SimInput) -> Result<SimReport> {
    config.validate()?;
    let prep = prepare(config, input)?;
    let cells = config.cells();
    let all_times = input.sample_times(config.cadence_s);
    let times: Vec<(usize, i64)> = all_times
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, t)| !prep.halts.contains(t))
        .collect();
    let halted_samples = (all_times.len() - times.len()) as u64;

    let n = input.test.len();
    let mut ever_pooled = vec![false; n];
    let mut ever_selectable = vec![vec![false; n]; cells.len()];
    let mut ratio_sum = vec![0.0f64; cells.len()];
    let mut ratio_samples = 0u64;
    let mut log: Vec<TaskRecord> = Vec::new();
    let mut cell_stats = vec![(0u64, 0u64, 0u64, 0u64, 0u64); cells.len()];

    // Bounded chunks keep the per-sample selectable lists from piling up.
    for chunk in times.chunks(256) {
        let results: Vec<SampleResult> = chunk
            .par_iter()
            .map(|&(k, t)| run_sample(config, input, &prep, &cells, k, t))
            .collect::<Result<_>>()?;
        for res in results {
            for &i in &res.pooled {
                ever_pooled[i] = true;
            }
            if !res.pooled.is_empty() {
                ratio_samples += 1;
            }
            for (ci, sel) in res.selectable.iter().enumerate() {
                for &i in sel {
                    ever_selectable[ci][i] = true;
                }
                if !res.pooled.is_empty() {
                    ratio_sum[ci] += sel.len() as f64 / res.pooled.len() as f64;
                }
            }
            for (ci, task) in res.tasks.iter().enumerate() {
                let s = &mut cell_stats[ci];
                s.0 += 1;
                match task.outcome {
                    None => s.1 += 1,
                    Some(Outcome::Success) => s.2 += 1,
                    Some(Outcome::Failure) => s.3 += 1,
                }
                s.4 += task.replicas as u64;
            }
            if config.record_tasks {
                log.extend(res.tasks);
            }
        }
    }

    let pooled_total = ever_pooled.iter().filter(|&&b| b).count();
    let cells_out = cells
        .iter()
        .enumerate()
        .map(|(ci, &(a, l, alg))| {
            let (attempted, held, successes, failures, replicas) = cell_stats[ci];
            let ran = successes + failures;
            let sel = ever_selectable[ci].iter().filter(|&&b| b).count();
            CellReport {
                availability: a,
                lease_s: l,
                algorithm: alg,
                attempted,
                held,
                successes,
                failures,
                failure_rate: (ran > 0).then(|| failures as f64 / ran as f64),
                mean_redundancy: (ran > 0).then(|| replicas as f64 / ran as f64),
                utilization: (pooled_total > 0).then(|| sel as f64 / pooled_total as f64),
                utilization_per_sample: (ratio_samples > 0)
                    .then(|| ratio_sum[ci] / ratio_samples as f64),
            }
        })
        .collect();

    Ok(SimReport {
        samples: times.len() as u64,
        halted_samples,
        halt_windows: prep.halts,
        cells: cells_out,
        tasks: config.record_tasks.then_some(log),
    })
}
