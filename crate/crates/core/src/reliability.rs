//! Empirical lifetime distribution and the single-task failure and
//! replication formulas built on it.
//!
//! A task started at age `t0` on a pilot fails when the pilot ends within the
//! lease `Δt`:
//!
//! ```text
//! f = P(t0 < s <= t0 + Δt) / P(s > t0)
//! ```
//!
//! Replicas fail independently, so a task with replicas `k = 1..m` fails with
//! probability `Π f_k`, and enough replicas have been placed once that
//! product is at most `1 − λ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Probability;
use crate::trace::TraceDataset;

/// A probability that a task fails to finish its lease.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct FailureRate<T>(T);

impl<T: Probability> FailureRate<T> {
    pub fn new(value: T) -> Result<Self> {
        if value < T::zero() || value > T::one() {
            return Err(Error::invalid(format!("failure rate {value:?} outside [0,1]")));
        }
        Ok(FailureRate(value))
    }

    pub fn certain() -> Self {
        FailureRate(T::one())
    }

    pub fn never() -> Self {
        FailureRate(T::zero())
    }

    pub fn value(self) -> T {
        self.0
    }
}

/// A user's task: availability target λ and lease Δt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub availability: f64,
    pub lease_s: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub redundancy_cap: Option<usize>,
}

impl TaskRequest {
    pub fn new(availability: f64, lease_s: i64) -> Result<Self> {
        let req = TaskRequest {
            availability,
            lease_s,
            redundancy_cap: None,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        check_availability(self.availability)?;
        if self.lease_s <= 0 {
            return Err(Error::invalid(format!("lease {} must be positive", self.lease_s)));
        }
        if self.redundancy_cap == Some(0) {
            return Err(Error::invalid("redundancy cap must be positive"));
        }
        Ok(())
    }

    /// The tolerated failure probability `1 − λ`.
    pub fn failure_budget(&self) -> f64 {
        1.0 - self.availability
    }
}

pub(crate) fn check_availability(availability: f64) -> Result<()> {
    if availability > 0.0 && availability < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("availability {availability} outside (0,1)")))
    }
}

/// Histogram of pilot lifetimes over half-open bins `(i·w, (i+1)·w]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EmpiricalLifetimeDist {
    bin_width: i64,
    counts: Vec<u64>,
    #[serde(skip)]
    tail: Vec<u64>,
}

impl EmpiricalLifetimeDist {
    pub fn from_lifetimes(lifetimes: impl IntoIterator<Item = i64>, bin_width: i64) -> Result<Self> {
        if bin_width <= 0 {
            return Err(Error::invalid(format!("bin width {bin_width} must be positive")));
        }
        let mut counts: Vec<u64> = Vec::new();
        for lifetime in lifetimes {
            if lifetime <= 0 {
                return Err(Error::invalid(format!("lifetime {lifetime} must be positive")));
            }
            let bin = ((lifetime - 1) / bin_width) as usize;
            if bin >= counts.len() {
                counts.resize(bin + 1, 0);
            }
            counts[bin] += 1;
        }
        if counts.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self::from_counts(bin_width, counts))
    }

    pub fn from_counts(bin_width: i64, counts: Vec<u64>) -> Self {
        let mut tail = vec![0u64; counts.len() + 1];
        for i in (0..counts.len()).rev() {
            tail[i] = tail[i + 1] + counts[i];
        }
        EmpiricalLifetimeDist {
            bin_width,
            counts,
            tail,
        }
    }

    pub fn bin_width(&self) -> i64 {
        self.bin_width
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.tail[0]
    }

    /// Lifetimes strictly above `x`, counted over whole bins: exact when `x`
    /// is a bin edge, otherwise the partial bin containing `x` is dropped.
    pub fn survivors(&self, x: i64) -> u64 {
        if x <= 0 {
            return self.total();
        }
        let first_bin = (x + self.bin_width - 1) / self.bin_width;
        self.tail
            .get(first_bin as usize)
            .copied()
            .unwrap_or(0)
    }

    /// Fraction of lifetimes in `(a, b]`.
    pub fn mass<T: Probability>(&self, a: i64, b: i64) -> T {
        let inside = self.survivors(a).saturating_sub(self.survivors(b));
        T::ratio(inside, self.total())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("histogram serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            bin_width: i64,
            counts: Vec<u64>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        if raw.bin_width <= 0 {
            return Err(Error::invalid("bin width must be positive"));
        }
        Ok(Self::from_counts(raw.bin_width, raw.counts))
    }
}

pub fn build_lifetime_dist(dataset: &TraceDataset, bin_width: i64) -> Result<EmpiricalLifetimeDist> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    EmpiricalLifetimeDist::from_lifetimes(dataset.lifetimes(), bin_width)
}

/// Probability a pilot of age `age` ends within the next `lease` seconds.
pub fn conditional_failure_prob<T: Probability>(
    dist: &EmpiricalLifetimeDist,
    age: i64,
    lease: i64,
) -> Result<FailureRate<T>> {
    let alive = dist.survivors(age);
    if alive == 0 {
        return Err(Error::NoSurvivors { age_s: age });
    }
    if lease <= 0 {
        return Ok(FailureRate::never());
    }
    let failed = alive - dist.survivors(age.saturating_add(lease));
    Ok(FailureRate(T::ratio(failed, alive)))
}

/// Probability that every replica fails; an empty set always fails.
pub fn combined_failure<T: Probability>(rates: &[FailureRate<T>]) -> FailureRate<T> {
    FailureRate(rates.iter().fold(T::one(), |acc, r| acc * r.0))
}

/// Smallest `m` with `f^m <= 1 − λ`.
pub fn min_replicas<T: Probability>(f: FailureRate<T>, availability: T) -> Result<usize> {
    let (zero, one) = (T::zero(), T::one());
    if !(availability > zero && availability < one) {
        return Err(Error::invalid(format!("availability {availability:?} outside (0,1)")));
    }
    if f.0 == one {
        return Err(Error::Unsatisfiable);
    }
    let budget = one - availability;
    let mut product = f.0;
    let mut m = 1;
    while product > budget {
        product = product * f.0;
        m += 1;
    }
    Ok(m)
}
