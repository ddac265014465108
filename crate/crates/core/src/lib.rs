//! Replicated task placement on pilot jobs.
//!
//! Pilot lifetimes from a trace give an empirical failure probability for a
//! task leased onto a pilot of a given age. From it the crate builds
//! failure-rate curves by redundancy, cuts availability valleys out of
//! them, picks replicas with four selection policies and replays traces to
//! score those policies. A random cut forest flags bursts of unexpected
//! terminations so they can be kept out of training and scheduling.
//!
//! Probability arithmetic is generic over [`scalar::Probability`], so the
//! same code runs on `f64`, `f32` or exact rationals.

pub mod anomaly;
pub mod error;
pub mod reliability;
pub mod scalar;
pub mod selection;
pub mod sim;
pub mod trace;
pub mod valley;

pub use anomaly::{
    bin_failures, calibrate_threshold, detect, detect_dataset, filter_dataset, score_stream,
    DetectorConfig, FailurePoint, ForestConfig, HaltSchedule, RrcfForest, RrcfTree,
};
pub use error::{Error, Result};
pub use reliability::{
    build_lifetime_dist, combined_failure, conditional_failure_prob, min_replicas,
    EmpiricalLifetimeDist, FailureRate, TaskRequest,
};
pub use scalar::{Probability, Real};
pub use selection::{
    apply_cap, select_random, select_sorted, select_spread, select_valley, spread_select,
    Algorithm, PilotCandidate, SelectionResult, SelectionStatus,
};
pub use sim::{
    enumerate_pool, run_simulation, task_outcome, CellReport, DataSource, Outcome, SimConfig,
    SimInput, SimReport, TaskRecord,
};
pub use trace::{
    classify_expected, generate_synthetic, parse_trace, read_trace, Expectation, PilotRecord,
    SyntheticTraceSpec, TerminationClass, TraceDataset,
};
pub use valley::{
    build_valley_tables, compute_failure_curve, determine_valleys, CurveParams, CurveSampler,
    FailureRateCurve, Valley, ValleyTable,
};

/// Exact rational used for reference computations.
pub type Exact = num_rational::Ratio<i128>;

pub type Rate = FailureRate<f64>;
pub type RateF32 = FailureRate<f32>;
pub type ExactRate = FailureRate<Exact>;
pub type Forest = RrcfForest<f64>;
pub type Tree = RrcfTree<f64>;
pub type Candidate<'a> = PilotCandidate<'a, f64>;
