//! Step-indexed run log and its versioned CSV form.
//!
//! ```text
//! # runlog v1
//! step,proxy_reward,expert_reward,expert_se,rho,rho_lo,rho_hi,expert_samples_used,event
//! ```
//!
//! Missing values are empty cells. Floats use Rust's shortest round-trip
//! formatting, so a parsed log re-serialises byte-identically.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const RUNLOG_VERSION: u32 = 1;
pub const RUNLOG_COLUMNS: [&str; 9] = [
    "step",
    "proxy_reward",
    "expert_reward",
    "expert_se",
    "rho",
    "rho_lo",
    "rho_hi",
    "expert_samples_used",
    "event",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Checkpoint,
    Realign,
    GraderUpdate,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Event::Checkpoint => "checkpoint",
            Event::Realign => "realign",
            Event::GraderUpdate => "grader_update",
        })
    }
}

impl FromStr for Event {
    type Err = Error;

    fn from_str(s: &str) -> Result<Event> {
        match s {
            "checkpoint" => Ok(Event::Checkpoint),
            "realign" => Ok(Event::Realign),
            "grader_update" => Ok(Event::GraderUpdate),
            other => Err(invalid(format!("unknown event tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub step: u64,
    /// Mean training reward since the previous row.
    pub proxy_reward: Option<f64>,
    /// Noiseless expert objective of the current policy.
    pub expert_reward: f64,
    pub expert_se: f64,
    pub rho: Option<f64>,
    pub rho_lo: Option<f64>,
    pub rho_hi: Option<f64>,
    /// Expert grades consumed by the protocol so far.
    pub expert_samples_used: u64,
    pub event: Event,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub rows: Vec<RunRow>,
}

impl RunLog {
    /// Appends a row, enforcing strictly increasing steps and a
    /// non-decreasing budget column.
    pub fn push(&mut self, row: RunRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(invalid(format!("run log step {} does not follow {}", row.step, last.step)));
            }
            if row.expert_samples_used < last.expert_samples_used {
                return Err(invalid("run log budget column decreased"));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# runlog v{RUNLOG_VERSION}")?;
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(RUNLOG_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                opt(r.proxy_reward),
                r.expert_reward.to_string(),
                r.expert_se.to_string(),
                opt(r.rho),
                opt(r.rho_lo),
                opt(r.rho_hi),
                r.expert_samples_used.to_string(),
                r.event.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a log written by [`RunLog::write_csv`]; other versions are rejected.
    pub fn read_csv<R: Read>(input: R) -> Result<RunLog> {
        let mut reader = BufReader::new(input);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let version = header
            .trim_end()
            .strip_prefix("# runlog v")
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| invalid("missing runlog version header"))?;
        if version != RUNLOG_VERSION {
            return Err(invalid(format!("unsupported runlog version {version}")));
        }
        let mut r = csv::ReaderBuilder::new().from_reader(reader);
        let cols: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if cols != RUNLOG_COLUMNS {
            return Err(invalid(format!("unexpected runlog columns {cols:?}")));
        }
        let mut log = RunLog::default();
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|_| invalid(format!("bad number {:?} in column {}", &rec[i], RUNLOG_COLUMNS[i])))
            };
            let maybe = |i: usize| -> Result<Option<f64>> { if rec[i].is_empty() { Ok(None) } else { num(i).map(Some) } };
            let int = |i: usize| -> Result<u64> {
                rec[i].parse::<u64>().map_err(|_| invalid(format!("bad integer {:?} in column {}", &rec[i], RUNLOG_COLUMNS[i])))
            };
            log.push(RunRow {
                step: int(0)?,
                proxy_reward: maybe(1)?,
                expert_reward: num(2)?,
                expert_se: num(3)?,
                rho: maybe(4)?,
                rho_lo: maybe(5)?,
                rho_hi: maybe(6)?,
                expert_samples_used: int(7)?,
                event: rec[8].parse()?,
            })?;
        }
        Ok(log)
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}
