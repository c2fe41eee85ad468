//! Task-delay traces: CSV ingestion, parameter fitting, resampling pools.
//!
//! Trace CSV: header `chunk_size_mb,delay_ms[,op_type,timestamp_ms]`, lines
//! starting with `#` are comments.
//!
//! Fitting drops the worst 10% of delays within each chunk size, takes the
//! mean and standard deviation of what remains, and fits both as straight
//! lines in the chunk size. Those lines are then mapped to the four delay
//! parameters through the moments of an exponential tail truncated at the
//! same quantile, which is what the shifted-exponential law predicts for the
//! trimmed data.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{DelayParams, OpType};

/// Fraction of the slowest delays dropped per chunk size before fitting.
pub const TRIM_FRACTION: f64 = 0.1;
pub const MIN_RECORDS_PER_SIZE: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(rename = "chunk_size_mb")]
    pub chunk_size: f64,
    #[serde(rename = "delay_ms")]
    pub delay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub op_type: Option<OpType>,
    #[serde(rename = "timestamp_ms", default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
}

fn check_record(r: &TraceRecord) -> Result<()> {
    if !(r.chunk_size.is_finite() && r.chunk_size > 0.0) {
        return Err(Error::Parse(format!("chunk size must be positive: {r:?}")));
    }
    if !(r.delay.is_finite() && r.delay > 0.0) {
        return Err(Error::Parse(format!("delay must be positive: {r:?}")));
    }
    Ok(())
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("chunk_size_mb") || headers.get(1) != Some("delay_ms") {
        return Err(Error::Parse(format!(
            "trace header must start with chunk_size_mb,delay_ms; got {headers:?}"
        )));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let rec: TraceRecord = row?;
        check_record(&rec)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_trace_csv<W: Write>(records: &[TraceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["chunk_size_mb", "delay_ms"])?;
    for r in records {
        w.write_record([r.chunk_size.to_string(), r.delay.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Chunk sizes are matched exactly up to 1e-6 MB.
fn size_key(chunk_size: f64) -> i64 {
    (chunk_size * 1e6).round() as i64
}

/// Delays grouped by chunk size, in record order, ascending by size.
fn group_by_size(records: &[TraceRecord]) -> BTreeMap<i64, (f64, Vec<f64>)> {
    let mut groups: BTreeMap<i64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in records {
        groups
            .entry(size_key(r.chunk_size))
            .or_insert_with(|| (r.chunk_size, Vec::new()))
            .1
            .push(r.delay);
    }
    groups
}

/// Drops the `ceil(fraction * N)` largest delays. Among equal delays the later
/// records are dropped first.
pub fn trim_worst(delays: &[f64], fraction: f64) -> Vec<f64> {
    let drop = (fraction * delays.len() as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..delays.len()).collect();
    // Stable: ties keep record order, so the earliest survive.
    order.sort_by(|&a, &b| delays[a].total_cmp(&delays[b]));
    order.truncate(delays.len().saturating_sub(drop));
    order.sort_unstable();
    order.into_iter().map(|i| delays[i]).collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Ordinary least squares `y = intercept + slope * x`.
pub fn least_squares(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(invalid("least squares needs at least two points"));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(invalid("least squares needs at least two distinct x values"));
    }
    let slope = sxy / sxx;
    Ok((my - slope * mx, slope))
}

/// Mean and standard deviation of a unit exponential conditioned on lying
/// below its `1 - trim` quantile.
pub fn truncated_exp_moments(trim: f64) -> (f64, f64) {
    if trim <= 0.0 {
        return (1.0, 1.0);
    }
    let q = -trim.ln();
    let keep = 1.0 - trim;
    let m1 = (1.0 - (1.0 + q) * trim) / keep;
    let m2 = (2.0 - (q * q + 2.0 * q + 2.0) * trim) / keep;
    (m1, (m2 - m1 * m1).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SizeStats {
    pub chunk_size: f64,
    pub records: usize,
    pub kept: usize,
    pub trimmed_mean: f64,
    pub trimmed_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: DelayParams,
    pub sizes: Vec<SizeStats>,
    /// Trimmed mean line `(intercept, slope)`.
    pub mean_line: (f64, f64),
    /// Trimmed standard deviation line `(intercept, slope)`.
    pub std_line: (f64, f64),
    /// Parameters that came out negative and were clamped to zero.
    pub clamped: Vec<String>,
}

pub fn fit_params(records: &[TraceRecord]) -> Result<FitReport> {
    for r in records {
        check_record(r)?;
    }
    let groups = group_by_size(records);
    if groups.len() < 2 {
        return Err(invalid(format!(
            "fitting needs at least 2 distinct chunk sizes, found {}",
            groups.len()
        )));
    }
    let mut sizes = Vec::with_capacity(groups.len());
    for (size, delays) in groups.values() {
        if delays.len() < MIN_RECORDS_PER_SIZE {
            return Err(invalid(format!(
                "chunk size {size} MB has {} records, need {MIN_RECORDS_PER_SIZE}",
                delays.len()
            )));
        }
        let kept = trim_worst(delays, TRIM_FRACTION);
        let (mean, std) = mean_std(&kept);
        sizes.push(SizeStats {
            chunk_size: *size,
            records: delays.len(),
            kept: kept.len(),
            trimmed_mean: mean,
            trimmed_std: std,
        });
    }
    let mean_pts: Vec<(f64, f64)> = sizes.iter().map(|s| (s.chunk_size, s.trimmed_mean)).collect();
    let std_pts: Vec<(f64, f64)> = sizes.iter().map(|s| (s.chunk_size, s.trimmed_std)).collect();
    let mean_line = least_squares(&mean_pts)?;
    let std_line = least_squares(&std_pts)?;

    let (tail_mean, tail_std) = truncated_exp_moments(TRIM_FRACTION);
    let psi_base = std_line.0 / tail_std;
    let psi_slope = std_line.1 / tail_std;
    let raw = [
        ("delta_base", mean_line.0 - tail_mean * psi_base),
        ("delta_slope", mean_line.1 - tail_mean * psi_slope),
        ("psi_base", psi_base),
        ("psi_slope", psi_slope),
    ];
    let mut clamped = Vec::new();
    let mut vals = [0.0; 4];
    for (slot, (name, v)) in vals.iter_mut().zip(raw) {
        if v < 0.0 {
            clamped.push(format!("{name} fitted as {v:.6}, clamped to 0"));
            *slot = 0.0;
        } else {
            *slot = v;
        }
    }
    let params = DelayParams::new(vals[0], vals[1], vals[2], vals[3])?;
    Ok(FitReport {
        params,
        sizes,
        mean_line,
        std_line,
        clamped,
    })
}

/// Untrimmed delay samples per chunk size, for trace-driven simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPools {
    pools: BTreeMap<i64, (f64, Vec<f64>)>,
    /// Fitted law used to rescale a neighbouring pool when a size is missing.
    model: Option<DelayParams>,
}

pub fn build_pools(records: &[TraceRecord]) -> Result<EmpiricalPools> {
    if records.is_empty() {
        return Err(invalid("cannot build sampling pools from an empty trace"));
    }
    for r in records {
        check_record(r)?;
    }
    let model = fit_params(records).ok().map(|f| f.params);
    Ok(EmpiricalPools {
        pools: group_by_size(records),
        model,
    })
}

impl EmpiricalPools {
    pub fn with_model(mut self, model: DelayParams) -> Self {
        self.model = Some(model);
        self
    }

    pub fn model(&self) -> Option<&DelayParams> {
        self.model.as_ref()
    }

    pub fn sizes(&self) -> Vec<f64> {
        self.pools.values().map(|(s, _)| *s).collect()
    }

    pub fn pool(&self, chunk_size: f64) -> Option<&[f64]> {
        self.pools.get(&size_key(chunk_size)).map(|(_, v)| v.as_slice())
    }

    /// Draws uniformly from the pool of `chunk_size`. A missing size is served
    /// from the nearest pool, shifted and scaled by the fitted law:
    /// `(x - Δ(B')) · (1/μ(B))/(1/μ(B')) + Δ(B)`.
    pub fn sample<R: Rng + ?Sized>(&self, chunk_size: f64, rng: &mut R) -> Result<f64> {
        if let Some(pool) = self.pool(chunk_size) {
            return Ok(pool[rng.random_range(0..pool.len())]);
        }
        let model = self.model.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "no delay pool for chunk size {chunk_size} MB and no fitted law to rescale with"
            ))
        })?;
        let (near, pool) = self
            .pools
            .values()
            .min_by(|a, b| (a.0 - chunk_size).abs().total_cmp(&(b.0 - chunk_size).abs()))
            .map(|(s, p)| (*s, p))
            .ok_or_else(|| Error::Config("empty pool set".into()))?;
        let x = pool[rng.random_range(0..pool.len())];
        rescale(model, x, near, chunk_size)
    }
}

fn rescale(model: &DelayParams, x: f64, from: f64, to: f64) -> Result<f64> {
    let tail_from = model.tail_mean(from)?;
    let scale = if tail_from > 0.0 {
        model.tail_mean(to)? / tail_from
    } else {
        1.0
    };
    Ok((x - model.delay_floor(from)?) * scale + model.delay_floor(to)?)
}

/// Draws `count` delays per chunk size from the shifted-exponential law.
pub fn generate_synthetic_trace(
    params: &DelayParams,
    sizes: &[f64],
    count: usize,
    seed: u64,
) -> Result<Vec<TraceRecord>> {
    params.validate()?;
    if count == 0 {
        return Err(invalid("count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sizes.len() * count);
    for &b in sizes {
        let floor = params.delay_floor(b)?;
        let tail = params.tail_mean(b)?;
        for _ in 0..count {
            let e: f64 = rng.sample(Exp1);
            out.push(TraceRecord {
                chunk_size: b,
                delay: floor + tail * e,
                op_type: None,
                timestamp: None,
            });
        }
    }
    Ok(out)
}

const PARAM_KEYS: [&str; 4] = [
    "delta_base_ms",
    "delta_slope_ms_per_mb",
    "psi_base_ms",
    "psi_slope_ms_per_mb",
];

/// Writes the `key=value` parameter file.
pub fn write_params<W: Write>(params: &DelayParams, mut out: W) -> Result<()> {
    writeln!(out, "# shifted-exponential task delay parameters")?;
    writeln!(
        out,
        "# floor = delta_base + delta_slope * B; tail mean = psi_base + psi_slope * B"
    )?;
    let vals = [
        params.delta_base,
        params.delta_slope,
        params.psi_base,
        params.psi_slope,
    ];
    for (k, v) in PARAM_KEYS.iter().zip(vals) {
        writeln!(out, "{k}={v}")?;
    }
    Ok(())
}

pub fn read_params<R: Read>(input: R) -> Result<DelayParams> {
    let mut vals: [Option<f64>; 4] = [None; 4];
    for (lineno, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", lineno + 1)))?;
        let slot = PARAM_KEYS
            .iter()
            .position(|k| *k == key.trim())
            .ok_or_else(|| Error::Parse(format!("line {}: unknown key {:?}", lineno + 1, key.trim())))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad number {:?}", lineno + 1, value.trim())))?;
        vals[slot] = Some(v);
    }
    let get = |i: usize| vals[i].ok_or_else(|| Error::Parse(format!("missing key {}", PARAM_KEYS[i])));
    DelayParams::new(get(0)?, get(1)?, get(2)?, get(3)?)
}
