//! Delay statistics, code composition and time series over simulation results.
//!
//! Percentiles are nearest-rank: the `p`-th percentile of `N` sorted values is
//! the one at rank `ceil(p/100 · N)`. Standard deviations are population
//! values. All sums run over sorted data, so results do not depend on record
//! order.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::engine::{RequestRecord, SimResult};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
    pub std: f64,
    /// Completed requests per second over the measurement window.
    pub throughput: f64,
    pub mean_queueing: f64,
    pub mean_service: f64,
    pub mean_usage: f64,
}

/// Nearest-rank percentile of ascending `sorted`.
pub fn percentile(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(invalid(format!("percentile must lie in [0,100], got {p}")));
    }
    let rank = ((p / 100.0) * sorted.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn mean_of_sorted(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean, spread and percentiles of total delays, with `window_ms` used for
/// throughput.
pub fn summarize<'a>(
    records: impl IntoIterator<Item = &'a RequestRecord>,
    window_ms: f64,
) -> Result<Summary> {
    let done: Vec<&RequestRecord> = records.into_iter().filter(|r| r.completion.is_some()).collect();
    if done.is_empty() {
        return Err(invalid("no completed requests to summarize"));
    }
    let total = sorted(done.iter().filter_map(|r| r.total_delay()).collect());
    let queueing = sorted(done.iter().filter_map(|r| r.queueing_delay()).collect());
    let service = sorted(done.iter().filter_map(|r| r.service_delay()).collect());
    let usage = sorted(done.iter().map(|r| r.usage).collect());
    let mean = mean_of_sorted(&total);
    let dev = sorted(total.iter().map(|x| (x - mean) * (x - mean)).collect());
    let throughput = if window_ms > 0.0 {
        total.len() as f64 * 1000.0 / window_ms
    } else {
        f64::NAN
    };
    Ok(Summary {
        count: total.len(),
        mean,
        median: percentile(&total, 50.0)?,
        p90: percentile(&total, 90.0)?,
        p99: percentile(&total, 99.0)?,
        max: *total.last().expect("non-empty"),
        std: mean_of_sorted(&dev).sqrt(),
        throughput,
        mean_queueing: mean_of_sorted(&queueing),
        mean_service: mean_of_sorted(&service),
        mean_usage: mean_of_sorted(&usage),
    })
}

/// Summary of a run's post-warmup requests.
pub fn summarize_result(result: &SimResult) -> Result<Summary> {
    let window = result.end_time.max(result.horizon) - result.warmup;
    summarize(result.measured(), window)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Composition {
    /// `k_fraction[i]` is the share of requests with `k = i + 1`.
    pub k_fraction: Vec<f64>,
    pub n_fraction: BTreeMap<usize, f64>,
}

impl Composition {
    /// Largest combined share of two adjacent `k` values.
    pub fn top_adjacent_pair(&self) -> f64 {
        match self.k_fraction.len() {
            0 => 0.0,
            1 => self.k_fraction[0],
            _ => self
                .k_fraction
                .windows(2)
                .map(|w| w[0] + w[1])
                .fold(0.0, f64::max),
        }
    }

    pub fn share_of_k(&self, k: usize) -> f64 {
        k.checked_sub(1)
            .and_then(|i| self.k_fraction.get(i))
            .copied()
            .unwrap_or(0.0)
    }
}

/// Share of requests per `k` in `1..=k_max` and per `n`.
pub fn composition<'a>(records: impl IntoIterator<Item = &'a RequestRecord>, k_max: usize) -> Composition {
    let mut k_count = vec![0usize; k_max];
    let mut n_count: BTreeMap<usize, usize> = BTreeMap::new();
    let mut total = 0usize;
    for r in records {
        total += 1;
        if (1..=k_max).contains(&r.code.k) {
            k_count[r.code.k - 1] += 1;
        } else if let Some(last) = k_count.last_mut() {
            // Out-of-range k only happens for caller mistakes; keep the sum at 1.
            *last += 1;
        }
        *n_count.entry(r.code.n).or_default() += 1;
    }
    let frac = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    Composition {
        k_fraction: k_count.into_iter().map(frac).collect(),
        n_fraction: n_count.into_iter().map(|(n, c)| (n, frac(c))).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bucket {
    pub start: f64,
    pub count: usize,
    /// `None` when no completed request arrived in the bucket.
    pub mean_delay: Option<f64>,
    pub mean_k: Option<f64>,
}

/// Means of total delay and `k` per arrival-time bucket over `[0, end)`.
pub fn time_series<'a>(
    records: impl IntoIterator<Item = &'a RequestRecord>,
    bucket: f64,
    end: f64,
) -> Result<Vec<Bucket>> {
    if !(bucket.is_finite() && bucket > 0.0) {
        return Err(invalid(format!("bucket width must be positive, got {bucket}")));
    }
    let count = (end / bucket).ceil().max(0.0) as usize;
    let mut sums = vec![(0usize, 0.0f64, 0.0f64); count];
    for r in records {
        let Some(d) = r.total_delay() else { continue };
        let i = (r.arrival / bucket).floor() as usize;
        if let Some(s) = sums.get_mut(i) {
            s.0 += 1;
            s.1 += d;
            s.2 += r.code.k as f64;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (c, d, k))| Bucket {
            start: i as f64 * bucket,
            count: c,
            mean_delay: (c > 0).then(|| d / c as f64),
            mean_k: (c > 0).then(|| k / c as f64),
        })
        .collect())
}

/// One line of a sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario: String,
    pub strategy: String,
    /// Arrival rate in requests per second.
    pub rate: f64,
    pub overloaded: bool,
    /// `None` for overloaded runs.
    pub summary: Option<Summary>,
    pub composition: Composition,
}

impl SummaryRow {
    pub fn from_result(scenario: &str, rate: f64, result: &SimResult, k_max: usize) -> Result<Self> {
        let summary = if result.overloaded {
            None
        } else {
            Some(summarize_result(result)?)
        };
        Ok(SummaryRow {
            scenario: scenario.to_string(),
            strategy: result.strategy.clone(),
            rate,
            overloaded: result.overloaded,
            summary,
            composition: composition(result.measured(), k_max),
        })
    }
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], k_max: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "scenario",
        "strategy",
        "rate_per_s",
        "overloaded",
        "count",
        "mean_ms",
        "median_ms",
        "p90_ms",
        "p99_ms",
        "std_ms",
        "throughput_per_s",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=k_max).map(|k| format!("k{k}")));
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![
            row.scenario.clone(),
            row.strategy.clone(),
            row.rate.to_string(),
            row.overloaded.to_string(),
        ];
        match &row.summary {
            Some(s) => rec.extend(
                [
                    s.count as f64,
                    s.mean,
                    s.median,
                    s.p90,
                    s.p99,
                    s.std,
                    s.throughput,
                ]
                .map(|v| v.to_string()),
            ),
            None => rec.extend(std::iter::repeat_n(String::new(), 7)),
        }
        rec.extend((1..=k_max).map(|k| row.composition.share_of_k(k).to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
