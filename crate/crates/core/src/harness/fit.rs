//! Threshold extraction and log-log line fits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::table::ResultTable;
use crate::error::{Error, Result};
use crate::taskgen::Arch;

/// Accuracy levels used for capacity thresholds.
pub const DEFAULT_LEVELS: [f64; 3] = [0.1, 0.125, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub level: f64,
    #[serde(rename = "V")]
    pub v: usize,
    pub d_min: usize,
    pub m: usize,
    /// Parameter size: `d²` for Attention-only, `m·d` for Attention-MLP.
    pub size: f64,
}

pub fn parameter_size(arch: Arch, d: usize, m: usize) -> f64 {
    match arch {
        Arch::AttentionOnly => (d * d) as f64,
        Arch::AttentionMlp => (m * d) as f64,
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Seed-median accuracy per `(V, d)` at one snapshot epoch (`None` for
/// three-step tables). Diverged runs count as accuracy 0.
pub fn median_accuracy(table: &ResultTable, epoch: Option<usize>) -> BTreeMap<(usize, usize), (f64, usize)> {
    let mut groups: BTreeMap<(usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for r in table.rows.iter().filter(|r| r.epoch == epoch) {
        let e = groups.entry((r.v, r.d)).or_insert_with(|| (Vec::new(), r.m));
        e.0.push(r.accuracy.unwrap_or(0.0));
    }
    groups.into_iter().map(|(k, (mut xs, m))| (k, (median(&mut xs), m))).collect()
}

/// For every `V` and level, the smallest grid `d` whose seed-median accuracy
/// reaches the level. The rule is "smallest", not "stable crossing": a
/// non-monotone column qualifies at its first high point.
pub fn extract_thresholds(
    table: &ResultTable,
    levels: &[f64],
    arch: Arch,
    epoch: Option<usize>,
) -> Result<Vec<ThresholdPoint>> {
    let med = median_accuracy(table, epoch);
    let mut out = Vec::new();
    for &level in levels {
        let mut last_v = None;
        for (&(v, d), &(acc, m)) in &med {
            if last_v == Some(v) || acc < level {
                continue;
            }
            last_v = Some(v);
            out.push(ThresholdPoint { level, v, d_min: d, m, size: parameter_size(arch, d, m) });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyThreshold);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr_slope: f64,
}

/// Ordinary least squares of `ln y` on `ln x`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<LogLogFit> {
    if points.len() < 3 {
        return Err(Error::CannotFit(format!("{} points, need at least 3", points.len())));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::CannotFit("log-log fit needs positive values".into()));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::CannotFit("all x values are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    // Residuals at rounding level are treated as an exact fit.
    let floor = (64.0 * f64::EPSILON).powi(2) * ys.iter().map(|y| y * y + 1.0).sum::<f64>();
    let sse = if sse <= floor { 0.0 } else { sse };
    let stderr_slope = if points.len() > 2 { (sse / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(LogLogFit { slope, intercept, stderr_slope })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub protocol: String,
    pub levels: Vec<f64>,
    pub points: Vec<ThresholdPoint>,
    pub slope: f64,
    pub intercept: f64,
    pub stderr_slope: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paper_reference: Option<f64>,
}

/// Thresholds at every level pooled into one fit of parameter size against `V`.
pub fn fit_thresholds(
    table: &ResultTable,
    levels: &[f64],
    arch: Arch,
    epoch: Option<usize>,
    protocol: &str,
    paper_reference: Option<f64>,
) -> Result<ThresholdFit> {
    let points = extract_thresholds(table, levels, arch, epoch)?;
    let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.v as f64, p.size)).collect();
    let fit = fit_loglog_slope(&xy)?;
    Ok(ThresholdFit {
        protocol: protocol.to_string(),
        levels: levels.to_vec(),
        points,
        slope: fit.slope,
        intercept: fit.intercept,
        stderr_slope: fit.stderr_slope,
        paper_reference,
    })
}

/// `V d accuracy` triples (seed medians), one block per `V`.
pub fn heatmap_data(table: &ResultTable, epoch: Option<usize>) -> String {
    let mut out = String::from("# V d median_accuracy\n");
    let mut last_v = None;
    for ((v, d), (acc, _)) in median_accuracy(table, epoch) {
        if last_v.is_some() && last_v != Some(v) {
            out.push('\n');
        }
        last_v = Some(v);
        let _ = writeln!(out, "{v} {d} {acc}");
    }
    out
}

/// `V size_fit` pairs along the fitted line over the observed `V` range.
pub fn fit_line_data(fit: &ThresholdFit, samples: usize) -> String {
    let mut out = String::from("# V size_fit\n");
    let vs = fit.points.iter().map(|p| p.v as f64);
    let lo = vs.clone().fold(f64::INFINITY, f64::min);
    let hi = vs.fold(0.0, f64::max);
    if !lo.is_finite() {
        return out;
    }
    let k = samples.max(2);
    for i in 0..k {
        let x = (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (k - 1) as f64).exp();
        let _ = writeln!(out, "{x} {}", (fit.intercept + fit.slope * x.ln()).exp());
    }
    out
}
