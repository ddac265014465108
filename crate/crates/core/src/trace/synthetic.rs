use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{PilotRecord, TerminationClass, TraceDataset, DEFAULT_KILL_TIME, DEFAULT_RETIRE_TIME};
use crate::error::{Error, Result};

/// Bounded-support lifetime family for one mixture component (seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LifetimeFamily {
    /// Johnson SB: `xi + lambda / (1 + exp(-(z - gamma) / delta))`, z ~ N(0,1).
    JohnsonSb {
        xi: f64,
        lambda: f64,
        gamma: f64,
        delta: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
}

impl LifetimeFamily {
    fn support(&self) -> (f64, f64) {
        match *self {
            LifetimeFamily::JohnsonSb { xi, lambda, .. } => (xi, xi + lambda),
            LifetimeFamily::Uniform { lo, hi } => (lo, hi),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            LifetimeFamily::JohnsonSb {
                xi,
                lambda,
                gamma,
                delta,
            } => {
                let z: f64 = StandardNormal.sample(rng);
                xi + lambda / (1.0 + (-(z - gamma) / delta).exp())
            }
            LifetimeFamily::Uniform { lo, hi } => rng.random_range(lo..hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifetimeComponent {
    pub weight: f64,
    #[serde(flatten)]
    pub family: LifetimeFamily,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalProcess {
    #[default]
    Poisson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalSpec {
    /// Pilots per hour.
    pub rate: f64,
    #[serde(default)]
    pub process: ArrivalProcess,
}

/// Pilots created together: one start time and one lifetime per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalityGroups {
    pub group_size: usize,
    pub group_fraction: f64,
}

impl Default for LocalityGroups {
    fn default() -> Self {
        LocalityGroups {
            group_size: 1,
            group_fraction: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyBurst {
    pub at: i64,
    pub extra_failures: usize,
    pub burst_lifetime: i64,
    /// Burst pilots end uniformly in `[at, at + window_s)`.
    #[serde(default = "default_burst_window")]
    pub window_s: i64,
    #[serde(default = "default_burst_class")]
    pub class: TerminationClass,
}

fn default_burst_window() -> i64 {
    60
}

fn default_burst_class() -> TerminationClass {
    TerminationClass::Network
}

fn default_unexpected_classes() -> BTreeMap<TerminationClass, f64> {
    BTreeMap::from([
        (TerminationClass::Preempted, 0.90),
        (TerminationClass::Network, 0.06),
        (TerminationClass::Idle, 0.02),
        (TerminationClass::Other, 0.02),
    ])
}

fn default_sites() -> usize {
    8
}

fn default_retire() -> i64 {
    DEFAULT_RETIRE_TIME
}

fn default_kill() -> i64 {
    DEFAULT_KILL_TIME
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTraceSpec {
    pub count: usize,
    pub arrival: ArrivalSpec,
    pub mixture: Vec<LifetimeComponent>,
    #[serde(default)]
    pub locality_groups: LocalityGroups,
    #[serde(default)]
    pub anomaly_bursts: Vec<AnomalyBurst>,
    pub seed: u64,
    #[serde(default)]
    pub start_time: i64,
    #[serde(default = "default_retire")]
    pub retire_time: i64,
    #[serde(default = "default_kill")]
    pub kill_time: i64,
    #[serde(default = "default_sites")]
    pub sites: usize,
    /// Class weights for terminations before the retire time.
    #[serde(default = "default_unexpected_classes")]
    pub unexpected_classes: BTreeMap<TerminationClass, f64>,
}

impl SyntheticTraceSpec {
    /// A two-component mixture: `early_weight` of the mass in a preempting
    /// mode just after start, the rest between retire and kill time.
    pub fn bimodal(count: usize, rate_per_hour: f64, early_weight: f64, seed: u64) -> Self {
        let retire = DEFAULT_RETIRE_TIME as f64;
        let kill = DEFAULT_KILL_TIME as f64;
        SyntheticTraceSpec {
            count,
            arrival: ArrivalSpec {
                rate: rate_per_hour,
                process: ArrivalProcess::Poisson,
            },
            mixture: vec![
                LifetimeComponent {
                    weight: early_weight,
                    family: LifetimeFamily::JohnsonSb {
                        xi: 0.0,
                        lambda: retire,
                        gamma: 2.4,
                        delta: 0.9,
                    },
                },
                LifetimeComponent {
                    weight: 1.0 - early_weight,
                    family: LifetimeFamily::JohnsonSb {
                        xi: retire,
                        lambda: kill - retire,
                        gamma: 0.0,
                        delta: 1.0,
                    },
                },
            ],
            locality_groups: LocalityGroups::default(),
            anomaly_bursts: Vec::new(),
            seed,
            start_time: 0,
            retire_time: DEFAULT_RETIRE_TIME,
            kill_time: DEFAULT_KILL_TIME,
            sites: default_sites(),
            unexpected_classes: default_unexpected_classes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.retire_time >= self.kill_time {
            return Err(Error::invalid("retire_time must be below kill_time"));
        }
        if !(self.arrival.rate > 0.0 && self.arrival.rate.is_finite()) {
            return Err(Error::invalid("arrival rate must be positive"));
        }
        if self.mixture.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let total: f64 = self.mixture.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.mixture.iter().any(|c| c.weight < 0.0) {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        for c in &self.mixture {
            let (lo, hi) = c.family.support();
            if !(lo >= 0.0 && lo < hi && hi <= self.kill_time as f64) {
                return Err(Error::invalid(format!(
                    "component support ({lo}, {hi}) must lie within (0, kill_time]"
                )));
            }
            if let LifetimeFamily::JohnsonSb { delta, .. } = c.family {
                if delta <= 0.0 {
                    return Err(Error::invalid("Johnson SB delta must be positive"));
                }
            }
        }
        let g = &self.locality_groups;
        if !(0.0..=1.0).contains(&g.group_fraction) || g.group_size == 0 {
            return Err(Error::invalid(
                "group_fraction must be in [0,1] and group_size positive",
            ));
        }
        if self.unexpected_classes.values().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("unexpected class weights must be positive"));
        }
        for b in &self.anomaly_bursts {
            if b.burst_lifetime <= 0 || b.window_s < 0 {
                return Err(Error::invalid("burst lifetime must be positive"));
            }
        }
        Ok(())
    }
}

fn pick_weighted<'a, T, R: Rng + ?Sized>(
    items: impl Iterator<Item = (&'a T, f64)> + Clone,
    rng: &mut R,
) -> &'a T
where
    T: 'a,
{
    let total: f64 = items.clone().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = None;
    for (item, w) in items {
        if u < w {
            return item;
        }
        u -= w;
        last = Some(item);
    }
    last.expect("non-empty weighted set")
}

/// Generates a trace from a parameterized lifetime mixture.
///
/// Output is a pure function of `spec`; the same seed yields the same bytes.
pub fn generate_synthetic(spec: &SyntheticTraceSpec) -> Result<TraceDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let kill = spec.kill_time;

    let draw_lifetime = |rng: &mut ChaCha8Rng| -> i64 {
        let component = pick_weighted(spec.mixture.iter().map(|c| (c, c.weight)), rng);
        let raw = component.family.sample(rng).round() as i64;
        raw.clamp(1, kill)
    };
    let classify = |lifetime: i64, rng: &mut ChaCha8Rng| -> TerminationClass {
        if lifetime >= kill {
            TerminationClass::Killed
        } else if lifetime >= spec.retire_time {
            TerminationClass::Retired
        } else {
            *pick_weighted(spec.unexpected_classes.iter().map(|(c, w)| (c, *w)), rng)
        }
    };

    // An arrival event is a group with probability q, chosen so that the
    // expected fraction of grouped pilots equals group_fraction.
    let g = spec.locality_groups.group_size as f64;
    let f = spec.locality_groups.group_fraction;
    let group_prob = if spec.locality_groups.group_size <= 1 || f <= 0.0 {
        0.0
    } else {
        f / (g - f * (g - 1.0))
    };
    let mean_event_size = group_prob * g + (1.0 - group_prob);
    let event_rate = spec.arrival.rate / 3600.0 / mean_event_size;
    let inter_arrival = Exp::new(event_rate).map_err(|e| Error::invalid(e.to_string()))?;

    let mut records = Vec::with_capacity(spec.count);
    let mut clock = spec.start_time as f64;
    while records.len() < spec.count {
        clock += inter_arrival.sample(&mut rng);
        let start = clock.floor() as i64;
        let site = format!("site{}", rng.random_range(0..spec.sites.max(1)));
        let grouped = group_prob > 0.0 && rng.random::<f64>() < group_prob;
        let members = if grouped {
            spec.locality_groups.group_size
        } else {
            1
        }
        .min(spec.count - records.len());
        let lifetime = draw_lifetime(&mut rng);
        let class = classify(lifetime, &mut rng);
        for _ in 0..members {
            records.push(PilotRecord {
                pilot_id: format!("p{}", records.len()),
                site_id: site.clone(),
                start_time: start,
                end_time: start + lifetime,
                termination_class: class,
            });
        }
    }

    for (b, burst) in spec.anomaly_bursts.iter().enumerate() {
        for i in 0..burst.extra_failures {
            let end = burst.at + rng.random_range(0..burst.window_s.max(1));
            records.push(PilotRecord {
                pilot_id: format!("b{b}-{i}"),
                site_id: format!("site{}", rng.random_range(0..spec.sites.max(1))),
                start_time: end - burst.burst_lifetime,
                end_time: end,
                termination_class: burst.class,
            });
        }
    }

    TraceDataset::new(records, spec.retire_time, spec.kill_time)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{classify_expected, read_trace, Expectation};

    #[test]
    fn zero_count_is_empty() {
        let spec = SyntheticTraceSpec::bimodal(0, 10.0, 0.45, 1);
        assert!(generate_synthetic(&spec).unwrap().is_empty());
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticTraceSpec::bimodal(10_000, 30.0, 0.45, 7);
        let a = generate_synthetic(&spec).unwrap().to_csv_string();
        let b = generate_synthetic(&spec).unwrap().to_csv_string();
        assert_eq!(a, b);
        let other = SyntheticTraceSpec { seed: 8, ..spec };
        assert_ne!(a, generate_synthetic(&other).unwrap().to_csv_string());
    }

    #[test]
    fn unexpected_fraction_tracks_mixture_weight() {
        let n = 20_000;
        let spec = SyntheticTraceSpec::bimodal(n, 30.0, 0.45, 11);
        let ds = generate_synthetic(&spec).unwrap();
        let unexpected = ds
            .records()
            .iter()
            .filter(|r| classify_expected(r, ds.retire_time()) == Expectation::Unexpected)
            .count() as f64;
        let p = 0.45;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((unexpected - n as f64 * p).abs() <= 3.0 * sd, "{unexpected}");

        // Two modes: the early mode and the retire-to-kill mode, separated
        // by a sparse stable stage.
        let hour = |h: i64| h * 3600;
        let early = ds.lifetimes().filter(|&l| l <= hour(6)).count();
        let middle = ds.lifetimes().filter(|&l| l > hour(20) && l <= hour(26)).count();
        let late = ds.lifetimes().filter(|&l| l > hour(38)).count();
        assert!(early > 10 * middle && late > 10 * middle, "{early} {middle} {late}");
    }

    #[test]
    fn lifetimes_bounded_and_groups_share_times() {
        let mut spec = SyntheticTraceSpec::bimodal(5_000, 20.0, 0.45, 3);
        spec.locality_groups = LocalityGroups {
            group_size: 20,
            group_fraction: 0.5,
        };
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.len(), 5_000);
        assert!(ds.lifetimes().all(|l| l >= 1 && l <= spec.kill_time));

        // Two arrival events can land on the same second, so a group is
        // identified by its shared start and end.
        let mut by_event: BTreeMap<(i64, i64), usize> = BTreeMap::new();
        for r in ds.records() {
            *by_event.entry((r.start_time, r.end_time)).or_default() += 1;
        }
        let grouped: usize = by_event.values().filter(|&&n| n >= 2).sum();
        assert!(by_event.values().all(|&n| n <= 21));
        let frac = grouped as f64 / ds.len() as f64;
        assert!((frac - 0.5).abs() < 0.1, "grouped fraction {frac}");
    }

    #[test]
    fn burst_records_end_near_at() {
        let mut spec = SyntheticTraceSpec::bimodal(100, 10.0, 0.45, 5);
        spec.anomaly_bursts.push(AnomalyBurst {
            at: 50_000,
            extra_failures: 500,
            burst_lifetime: 27_000,
            window_s: 0,
            class: TerminationClass::Network,
        });
        let ds = generate_synthetic(&spec).unwrap();
        let burst: Vec<_> = ds
            .records()
            .iter()
            .filter(|r| r.pilot_id.starts_with('b'))
            .collect();
        assert_eq!(burst.len(), 500);
        assert!(burst.iter().all(|r| r.end_time == 50_000 && r.lifetime() == 27_000));
    }

    #[test]
    fn csv_round_trip() {
        let spec = SyntheticTraceSpec::bimodal(500, 10.0, 0.45, 9);
        let ds = generate_synthetic(&spec).unwrap();
        let back = read_trace(ds.to_csv_string().as_bytes()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn spec_json_shape() {
        let json = r#"{
            "count": 3, "seed": 1,
            "arrival": {"rate": 12.0, "process": "poisson"},
            "mixture": [
              {"weight": 0.5, "family": "johnson_sb", "xi": 0, "lambda": 1000, "gamma": 0, "delta": 1},
              {"weight": 0.5, "family": "uniform", "lo": 1000, "hi": 2000}
            ],
            "locality_groups": {"group_size": 2, "group_fraction": 0.5},
            "anomaly_bursts": [{"at": 10, "extra_failures": 2, "burst_lifetime": 5}],
            "retire_time": 1500, "kill_time": 2000
        }"#;
        let spec: SyntheticTraceSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.anomaly_bursts[0].window_s, 60);
        assert_eq!(generate_synthetic(&spec).unwrap().len(), 5);
    }

    #[test]
    fn rejects_bad_weights_and_support() {
        let mut spec = SyntheticTraceSpec::bimodal(10, 10.0, 0.45, 1);
        spec.mixture[0].weight = 0.9;
        assert!(generate_synthetic(&spec).is_err());
        let mut spec = SyntheticTraceSpec::bimodal(10, 10.0, 0.45, 1);
        spec.mixture[1].family = LifetimeFamily::Uniform { lo: 0.0, hi: 1e9 };
        assert!(generate_synthetic(&spec).is_err());
    }
}
