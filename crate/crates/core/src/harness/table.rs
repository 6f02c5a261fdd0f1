//! Result rows and their CSV form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "V,L,N,d,m,seed,trainer,epoch,accuracy,stderr,wallclock_s,eta,gamma";
/// Spelling of a non-finite outcome in CSV cells.
pub const DIVERGED: &str = "diverged";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub v: usize,
    pub l: usize,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub seed: u64,
    pub trainer: String,
    /// Adam snapshot epoch; `None` for three-step rows.
    pub epoch: Option<usize>,
    /// `None` when the run diverged.
    pub accuracy: Option<f64>,
    pub stderr: Option<f64>,
    pub wallclock_s: f64,
    /// Step-1 rate (three-step) or Adam learning rate.
    pub eta: Option<f64>,
    /// Steps 2–3 rate; `None` for Adam.
    pub gamma: Option<f64>,
}

impl ResultRow {
    pub fn diverged(&self) -> bool {
        self.accuracy.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:?}")
    } else {
        DIVERGED.to_string()
    }
}

fn fmt_opt(x: Option<f64>, missing: &str) -> String {
    x.map(fmt_f64).unwrap_or_else(|| missing.to_string())
}

fn parse_opt_f64(s: &str, line: usize) -> Result<Option<f64>> {
    match s {
        "" | DIVERGED => Ok(None),
        _ => s.parse().map(Some).map_err(|_| Error::Parse(format!("line {line}: bad number `{s}`"))),
    }
}

fn parse_int<T: std::str::FromStr>(s: &str, line: usize) -> Result<T> {
    s.parse().map_err(|_| Error::Parse(format!("line {line}: bad integer `{s}`")))
}

impl ResultTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let acc_missing = if r.diverged() { DIVERGED } else { "" };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.v,
                r.l,
                r.n,
                r.d,
                r.m,
                r.seed,
                r.trainer,
                r.epoch.map(|e| e.to_string()).unwrap_or_default(),
                fmt_opt(r.accuracy, DIVERGED),
                fmt_opt(r.stderr, acc_missing),
                fmt_f64(r.wallclock_s),
                fmt_opt(r.eta, acc_missing),
                fmt_opt(r.gamma, if r.trainer == "adam" { "" } else { acc_missing }),
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            Some((_, h)) => return Err(Error::Parse(format!("unexpected header `{h}`"))),
            None => return Err(Error::Parse("empty table".into())),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 13 {
                return Err(Error::Parse(format!("line {line_no}: expected 13 fields, got {}", f.len())));
            }
            rows.push(ResultRow {
                v: parse_int(f[0], line_no)?,
                l: parse_int(f[1], line_no)?,
                n: parse_int(f[2], line_no)?,
                d: parse_int(f[3], line_no)?,
                m: parse_int(f[4], line_no)?,
                seed: parse_int(f[5], line_no)?,
                trainer: f[6].to_string(),
                epoch: if f[7].is_empty() { None } else { Some(parse_int(f[7], line_no)?) },
                accuracy: parse_opt_f64(f[8], line_no)?,
                stderr: parse_opt_f64(f[9], line_no)?,
                wallclock_s: parse_opt_f64(f[10], line_no)?.unwrap_or(f64::NAN),
                eta: parse_opt_f64(f[11], line_no)?,
                gamma: parse_opt_f64(f[12], line_no)?,
            });
        }
        Ok(Self { rows })
    }

    /// Distinct snapshot epochs, ascending; `[None]` for three-step tables.
    pub fn epochs(&self) -> Vec<Option<usize>> {
        let mut e: Vec<Option<usize>> = self.rows.iter().map(|r| r.epoch).collect();
        e.sort_unstable();
        e.dedup();
        e
    }
}
