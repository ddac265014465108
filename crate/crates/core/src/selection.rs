//! Choosing the pilots a task is replicated onto.
//!
//! Two baselines accumulate pilots until the product of their failure rates
//! drops within the budget: `Random` draws in random order, `Sorted` takes
//! the most reliable pilots first. `Valley` and `Spread` instead walk the
//! valley table from the smallest redundancy up and take exactly `r` pilots
//! from the first valley that holds enough of them; `Spread` additionally
//! spreads its picks over the candidates' start times.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reliability::{conditional_failure_prob, EmpiricalLifetimeDist, FailureRate};
use crate::scalar::Probability;
use crate::valley::{Valley, ValleyTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    Random,
    Sorted,
    Valley,
    Spread,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Random,
        Algorithm::Sorted,
        Algorithm::Valley,
        Algorithm::Spread,
    ];

    pub fn uses_valleys(self) -> bool {
        matches!(self, Algorithm::Valley | Algorithm::Spread)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown algorithm {s:?}"))
    }
}

/// A pilot alive at the decision time.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotCandidate<'a, T> {
    pub pilot_id: &'a str,
    pub start_time: i64,
    pub age: i64,
    /// Index of the backing record in its dataset.
    pub record: usize,
    /// Filled for the failure-rate driven baselines only.
    pub failure_rate: Option<FailureRate<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionStatus {
    Selected,
    NoSolution,
    Held,
}

/// Outcome of one selection. `picks` index into the pool that was passed in.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult<T> {
    pub status: SelectionStatus,
    pub picks: Vec<usize>,
    pub valley_used: Option<usize>,
    pub predicted_failure: Option<FailureRate<T>>,
}

impl<T> SelectionResult<T> {
    fn no_solution(picks: Vec<usize>) -> Self {
        SelectionResult {
            status: SelectionStatus::NoSolution,
            picks,
            valley_used: None,
            predicted_failure: None,
        }
    }

    pub fn is_selected(&self) -> bool {
        self.status == SelectionStatus::Selected
    }

    pub fn pilot_ids<'a>(&self, pool: &[PilotCandidate<'a, T>]) -> Vec<&'a str> {
        self.picks.iter().map(|&i| pool[i].pilot_id).collect()
    }
}

/// Fills each candidate's failure rate for a lease. Pilots older than every
/// observed lifetime get rate 1.
pub fn attach_failure_rates<T: Probability>(
    pool: &mut [PilotCandidate<'_, T>],
    dist: &EmpiricalLifetimeDist,
    lease_s: i64,
) {
    for c in pool.iter_mut() {
        c.failure_rate = Some(
            conditional_failure_prob(dist, c.age, lease_s).unwrap_or_else(|_| FailureRate::certain()),
        );
    }
}

fn rate_of<T: Probability>(c: &PilotCandidate<'_, T>) -> T {
    c.failure_rate.map_or(T::one(), FailureRate::value)
}

/// Adds pilots in `order` until the running product is within `budget`.
fn accumulate<T: Probability>(
    pool: &[PilotCandidate<'_, T>],
    order: impl Iterator<Item = usize>,
    budget: T,
) -> SelectionResult<T> {
    let mut product = T::one();
    let mut picks = Vec::new();
    for i in order {
        product = product * rate_of(&pool[i]);
        picks.push(i);
        if product <= budget {
            return SelectionResult {
                status: SelectionStatus::Selected,
                picks,
                valley_used: None,
                predicted_failure: Some(FailureRate::new(product).expect("product of rates")),
            };
        }
    }
    SelectionResult::no_solution(picks)
}

fn budget_of<T: Probability>(availability: f64) -> Result<T> {
    crate::reliability::check_availability(availability)?;
    Ok(T::one() - T::from_f64(availability).expect("availability representable"))
}

/// Draws pilots uniformly without replacement until the combined failure
/// probability is within `1 − availability`. Exhausting the pool returns
/// `NoSolution` listing every pilot.
pub fn select_random<T: Probability, R: Rng + ?Sized>(
    pool: &[PilotCandidate<'_, T>],
    availability: f64,
    rng: &mut R,
) -> Result<SelectionResult<T>> {
    let budget = budget_of::<T>(availability)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let n = order.len();
    // Lazy Fisher-Yates: only the prefix actually consumed is shuffled.
    let lazy = (0..n).map(move |k| {
        let j = rng.random_range(k..n);
        order.swap(k, j);
        order[k]
    });
    Ok(accumulate(pool, lazy, budget))
}

/// Order for `Sorted`: failure rate ascending, then older start, then id.
fn sorted_order<T: Probability>(pool: &[PilotCandidate<'_, T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&pool[a], &pool[b]);
        rate_of(ca)
            .partial_cmp(&rate_of(cb))
            .unwrap_or(Ordering::Equal)
            .then(ca.start_time.cmp(&cb.start_time))
            .then_with(|| ca.pilot_id.cmp(cb.pilot_id))
    });
    order
}

/// Takes the most reliable pilots first; this reaches the budget with the
/// fewest replicas the pool allows.
pub fn select_sorted<T: Probability>(
    pool: &[PilotCandidate<'_, T>],
    availability: f64,
) -> Result<SelectionResult<T>> {
    let budget = budget_of::<T>(availability)?;
    Ok(accumulate(pool, sorted_order(pool).into_iter(), budget))
}

/// Picks `r` candidates spread over their start-time span.
///
/// The span `[t_min, t_max]` is cut into `r` equal buckets (half-open, the
/// last closed). Buckets are visited round-robin and each non-empty bucket
/// gives up one uniformly chosen candidate until `r` are chosen. Returns
/// indices into `pilots`.
pub fn spread_select<T, R: Rng + ?Sized>(
    r: usize,
    pilots: &[&PilotCandidate<'_, T>],
    rng: &mut R,
) -> Result<Vec<usize>> {
    if r == 0 || pilots.len() < r {
        return Err(Error::Contract(format!(
            "spread selection of {r} pilots from {}",
            pilots.len()
        )));
    }
    let t_min = pilots.iter().map(|p| p.start_time).min().expect("non-empty");
    let t_max = pilots.iter().map(|p| p.start_time).max().expect("non-empty");
    let span = (t_max - t_min) as i128;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); r];
    for (i, p) in pilots.iter().enumerate() {
        let b = if span == 0 {
            0
        } else {
            (((p.start_time - t_min) as i128 * r as i128) / span).min(r as i128 - 1) as usize
        };
        buckets[b].push(i);
    }
    let mut chosen = Vec::with_capacity(r);
    let mut idx = 0;
    while chosen.len() < r {
        let bucket = &mut buckets[idx];
        if !bucket.is_empty() {
            let k = rng.random_range(0..bucket.len());
            chosen.push(bucket.swap_remove(k));
        }
        idx = (idx + 1) % r;
    }
    Ok(chosen)
}

fn select_from_valleys<T, R: Rng + ?Sized>(
    pool: &[PilotCandidate<'_, T>],
    table: &ValleyTable,
    rng: &mut R,
    spread: bool,
) -> Result<SelectionResult<T>> {
    for valley in &table.valleys {
        let members: Vec<usize> = (0..pool.len())
            .filter(|&i| valley.contains_age(pool[i].age))
            .collect();
        let r = valley.redundancy;
        if members.len() < r {
            continue;
        }
        let picks = if spread {
            let view: Vec<&PilotCandidate<'_, T>> = members.iter().map(|&i| &pool[i]).collect();
            spread_select(r, &view, rng)?
                .into_iter()
                .map(|k| members[k])
                .collect()
        } else {
            index::sample(rng, members.len(), r)
                .into_iter()
                .map(|k| members[k])
                .collect()
        };
        return Ok(SelectionResult {
            status: SelectionStatus::Selected,
            picks,
            valley_used: Some(r),
            predicted_failure: None,
        });
    }
    Ok(SelectionResult::no_solution(Vec::new()))
}

/// Uniformly picks `r` pilots from the first valley holding at least `r`.
pub fn select_valley<T, R: Rng + ?Sized>(
    pool: &[PilotCandidate<'_, T>],
    table: &ValleyTable,
    rng: &mut R,
) -> Result<SelectionResult<T>> {
    select_from_valleys(pool, table, rng, false)
}

/// As [`select_valley`], picking within the valley with [`spread_select`].
pub fn select_spread<T, R: Rng + ?Sized>(
    pool: &[PilotCandidate<'_, T>],
    table: &ValleyTable,
    rng: &mut R,
) -> Result<SelectionResult<T>> {
    select_from_valleys(pool, table, rng, true)
}

/// Drops valleys needing more than `cap` replicas.
pub fn apply_cap(table: &ValleyTable, cap: usize) -> Result<ValleyTable> {
    if cap == 0 {
        return Err(Error::invalid("redundancy cap must be positive"));
    }
    let valleys: Vec<Valley> = table
        .valleys
        .iter()
        .filter(|v| v.redundancy <= cap)
        .copied()
        .collect();
    Ok(ValleyTable {
        valleys,
        ..table.clone()
    })
}

/// Under a redundancy cap an unsatisfiable valley search holds the task in
/// the queue instead of failing it.
pub fn held_if_capped<T>(mut result: SelectionResult<T>, capped: bool) -> SelectionResult<T> {
    if capped && result.status == SelectionStatus::NoSolution {
        result.status = SelectionStatus::Held;
    }
    result
}
