//! Pilot lifetime traces: records, CSV ingestion, termination classes and a
//! seeded synthetic generator.

mod synthetic;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{
    generate_synthetic, AnomalyBurst, ArrivalProcess, ArrivalSpec, LifetimeComponent,
    LifetimeFamily, LocalityGroups, SyntheticTraceSpec,
};

/// Default soft deadline: 38 hours.
pub const DEFAULT_RETIRE_TIME: i64 = 38 * 3600;
/// Default hard deadline: 40 hours.
pub const DEFAULT_KILL_TIME: i64 = 40 * 3600;

pub const CSV_HEADER: &str = "pilot_id,site_id,start_time,end_time,termination_class";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminationClass {
    Retired,
    Killed,
    Preempted,
    Network,
    Idle,
    Other,
}

impl TerminationClass {
    pub const ALL: [TerminationClass; 6] = [
        TerminationClass::Retired,
        TerminationClass::Killed,
        TerminationClass::Preempted,
        TerminationClass::Network,
        TerminationClass::Idle,
        TerminationClass::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TerminationClass::Retired => "retired",
            TerminationClass::Killed => "killed",
            TerminationClass::Preempted => "preempted",
            TerminationClass::Network => "network",
            TerminationClass::Idle => "idle",
            TerminationClass::Other => "other",
        }
    }
}

impl fmt::Display for TerminationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TerminationClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TerminationClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown termination class {s:?}"))
    }
}

/// One pilot's observed life.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotRecord {
    pub pilot_id: String,
    pub site_id: String,
    pub start_time: i64,
    pub end_time: i64,
    pub termination_class: TerminationClass,
}

impl PilotRecord {
    pub fn lifetime(&self) -> i64 {
        self.end_time - self.start_time
    }

    pub fn age_at(&self, t: i64) -> i64 {
        t - self.start_time
    }

    /// Alive at `t`: started at or before `t` and not yet ended.
    pub fn is_alive_at(&self, t: i64) -> bool {
        self.start_time <= t && t < self.end_time
    }

    fn validate(&self) -> Result<()> {
        if self.end_time <= self.start_time {
            return Err(Error::Validation {
                pilot_id: self.pilot_id.clone(),
                message: format!(
                    "end_time {} must be after start_time {}",
                    self.end_time, self.start_time
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expectation {
    Expected,
    Unexpected,
}

/// A pilot that reached its retire time ended through the normal life
/// cycle; anything shorter was cut off. The boundary is inclusive.
pub fn classify_expected(record: &PilotRecord, retire_time: i64) -> Expectation {
    if record.lifetime() >= retire_time {
        Expectation::Expected
    } else {
        Expectation::Unexpected
    }
}

/// An immutable, validated collection of pilot records sorted by
/// `(start_time, pilot_id)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceDataset {
    records: Vec<PilotRecord>,
    retire_time: i64,
    kill_time: i64,
    max_lifetime: i64,
}

impl TraceDataset {
    pub fn new(mut records: Vec<PilotRecord>, retire_time: i64, kill_time: i64) -> Result<Self> {
        if retire_time >= kill_time {
            return Err(Error::invalid(format!(
                "retire_time {retire_time} must be below kill_time {kill_time}"
            )));
        }
        for r in &records {
            r.validate()?;
        }
        records.sort_by(|a, b| {
            a.start_time
                .cmp(&b.start_time)
                .then_with(|| a.pilot_id.cmp(&b.pilot_id))
        });
        let max_lifetime = records.iter().map(PilotRecord::lifetime).max().unwrap_or(0);
        Ok(TraceDataset {
            records,
            retire_time,
            kill_time,
            max_lifetime,
        })
    }

    pub fn with_defaults(records: Vec<PilotRecord>) -> Result<Self> {
        Self::new(records, DEFAULT_RETIRE_TIME, DEFAULT_KILL_TIME)
    }

    pub fn records(&self) -> &[PilotRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn retire_time(&self) -> i64 {
        self.retire_time
    }

    pub fn kill_time(&self) -> i64 {
        self.kill_time
    }

    pub fn max_lifetime(&self) -> i64 {
        self.max_lifetime
    }

    pub fn first_start(&self) -> Option<i64> {
        self.records.first().map(|r| r.start_time)
    }

    pub fn last_start(&self) -> Option<i64> {
        self.records.last().map(|r| r.start_time)
    }

    pub fn last_end(&self) -> Option<i64> {
        self.records.iter().map(|r| r.end_time).max()
    }

    pub fn lifetimes(&self) -> impl Iterator<Item = i64> + '_ {
        self.records.iter().map(PilotRecord::lifetime)
    }

    /// Indices of records alive at `t`, in dataset order.
    pub fn alive_indices(&self, t: i64) -> impl Iterator<Item = usize> + '_ {
        // Only records started in (t - max_lifetime, t] can be alive.
        let lo = self
            .records
            .partition_point(|r| r.start_time <= t - self.max_lifetime);
        let hi = self.records.partition_point(|r| r.start_time <= t);
        (lo..hi).filter(move |&i| self.records[i].end_time > t)
    }

    /// Keeps the records accepted by `keep`; deadlines are preserved.
    pub fn filtered(&self, mut keep: impl FnMut(&PilotRecord) -> bool) -> TraceDataset {
        let records: Vec<_> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let max_lifetime = records.iter().map(PilotRecord::lifetime).max().unwrap_or(0);
        TraceDataset {
            records,
            retire_time: self.retire_time,
            kill_time: self.kill_time,
            max_lifetime,
        }
    }

    pub fn count_by_expectation(&self) -> (usize, usize) {
        let expected = self
            .records
            .iter()
            .filter(|r| classify_expected(r, self.retire_time) == Expectation::Expected)
            .count();
        (expected, self.records.len() - expected)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        writeln!(
            out,
            "# retire_time={} kill_time={}",
            self.retire_time, self.kill_time
        )?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        writer.write_record(CSV_HEADER.split(','))?;
        for r in &self.records {
            writer.serialize(r)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

/// Parses the optional `# retire_time=<s> kill_time=<s>` line.
fn parse_deadlines(line: &str) -> Result<(Option<i64>, Option<i64>)> {
    let mut retire = None;
    let mut kill = None;
    for token in line.trim_start_matches('#').split_whitespace() {
        let Some((key, value)) = token.split_once('=') else {
            continue;
        };
        let parsed = value.parse::<i64>().map_err(|e| Error::Parse {
            line: 1,
            message: format!("bad {key} value {value:?}: {e}"),
        })?;
        match key {
            "retire_time" => retire = Some(parsed),
            "kill_time" => kill = Some(parsed),
            _ => {}
        }
    }
    Ok((retire, kill))
}

pub fn read_trace<R: Read>(input: R) -> Result<TraceDataset> {
    let mut input = BufReader::new(input);
    let mut first = String::new();
    input.read_line(&mut first)?;

    let (mut retire, mut kill) = (None, None);
    let mut line_offset = 0;
    let rest: Box<dyn Read> = if first.trim_start().starts_with('#') {
        (retire, kill) = parse_deadlines(first.trim())?;
        line_offset = 1;
        Box::new(input)
    } else {
        Box::new(std::io::Cursor::new(first.into_bytes()).chain(input))
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .from_reader(rest);

    let header = reader.headers().map_err(|e| Error::Parse {
        line: 1 + line_offset,
        message: e.to_string(),
    })?;
    if header.is_empty() {
        // header-less empty file
    } else if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::Parse {
            line: 1 + line_offset,
            message: format!("expected header `{CSV_HEADER}`"),
        });
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()) + line_offset,
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line()) + line_offset;
        let record: PilotRecord = row.deserialize(None).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        record.validate()?;
        records.push(record);
    }

    TraceDataset::new(
        records,
        retire.unwrap_or(DEFAULT_RETIRE_TIME),
        kill.unwrap_or(DEFAULT_KILL_TIME),
    )
}

pub fn parse_trace(path: impl AsRef<Path>) -> Result<TraceDataset> {
    read_trace(File::open(path)?)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn record() -> impl Strategy<Value = PilotRecord> {
        ("[a-z0-9_-]{1,8}", "[a-z]{1,4}", -1_000i64..1_000_000, 1i64..200_000, 0usize..6).prop_map(
            |(id, site, start, life, class)| PilotRecord {
                pilot_id: id,
                site_id: site,
                start_time: start,
                end_time: start + life,
                termination_class: TerminationClass::ALL[class],
            },
        )
    }

    proptest! {
        #[test]
        fn csv_round_trip(records in prop::collection::vec(record(), 0..40)) {
            let ds = TraceDataset::new(records, 100_000, 120_000).unwrap();
            prop_assert!(ds.records().windows(2).all(|w| w[0].start_time <= w[1].start_time));
            let back = read_trace(ds.to_csv_string().as_bytes()).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn alive_indices_match_scan(records in prop::collection::vec(record(), 0..40), t in -1_000i64..1_200_000) {
            let ds = TraceDataset::with_defaults(records).unwrap();
            let fast: Vec<usize> = ds.alive_indices(t).collect();
            let scan: Vec<usize> = (0..ds.len()).filter(|&i| ds.records()[i].is_alive_at(t)).collect();
            prop_assert_eq!(fast, scan);
        }
    }
}
