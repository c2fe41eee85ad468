//! Delay-optimal continuous codes and the backlog threshold tables built on them.
//!
//! For a fixed normalized load `λ̄` the optimum of every class is pinned by a
//! single scalar equation in its redundancy ratio `r`: the dimension is
//! `k = Ω(r)`, and `π(r) = (L/(L-λ̄))² - 1` where `π` is strictly decreasing.
//! Classes only interact through `λ̄`, so each is solved on its own.
//!
//! Everything here is solved by bisection. Functions of `r` are evaluated
//! through the excess `t = r - 1` so that the `r(r-1)` factors keep full
//! precision as `r -> 1`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{
    self, load_from_queue, mean_queue_length, service_delay_continuous, usage_continuous, ClassSpec,
    CodeChoice, DelayMode,
};

/// Relative tolerance for inverting the code functions of backlog.
pub const INVERSION_TOL: f64 = 1e-12;

/// A real-valued code: dimension `k > 0`, redundancy `r > 1`, length `n = k r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousCode {
    pub r: f64,
    pub k: f64,
    pub n: f64,
}

impl ContinuousCode {
    const UNBOUNDED: ContinuousCode = ContinuousCode {
        r: f64::INFINITY,
        k: f64::INFINITY,
        n: f64::INFINITY,
    };

    pub fn is_unbounded(&self) -> bool {
        self.r.is_infinite()
    }
}

/// Continuous optimum of every class at one normalized load.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousOptimum {
    pub lambda_bar: f64,
    /// Expected request-queue length at `lambda_bar`.
    pub queue: f64,
    /// Left side of the load equation, `(L/(L-λ̄))² - 1`.
    pub tau: f64,
    pub codes: Vec<ContinuousCode>,
}

fn check_excess(r: f64) -> Result<f64> {
    if r.is_nan() || r <= 1.0 {
        return Err(invalid(format!("redundancy ratio must exceed 1, got {r}")));
    }
    Ok(r - 1.0)
}

fn check_solvable(class: &ClassSpec) -> Result<()> {
    class.params.validate()?;
    if !(class.file_size.is_finite() && class.file_size > 0.0) {
        return Err(invalid(format!(
            "file size must be positive, got {}",
            class.file_size
        )));
    }
    let p = &class.params;
    if p.delta_base == 0.0 && p.delta_slope == 0.0 {
        // Pure exponential tasks: chunking is free and no interior optimum exists.
        return Err(invalid("delay floor is identically zero; optimum is unbounded"));
    }
    Ok(())
}

fn gamma_excess(class: &ClassSpec, t: f64) -> f64 {
    let p = &class.params;
    let r = 1.0 + t;
    let log_term = (1.0 / t).ln_1p();
    class.file_size * r * t / (p.delta_base * r + p.psi_base) * (p.delta_slope + p.psi_slope * log_term)
}

fn omega_excess(class: &ClassSpec, t: f64) -> Result<f64> {
    let p = &class.params;
    let j = class.file_size;
    let g = gamma_excess(class, t);
    // Positive root of  Ψ̄k² + (Ψ̃J - Δ̄Γ)k - Δ̃JΓ = 0.
    let b = p.psi_slope * j - p.delta_base * g;
    let c = p.delta_slope * j * g;
    let disc = (b * b + 4.0 * p.psi_base * c).sqrt();
    if b >= 0.0 {
        // Cancellation-free form; also the linear limit when Ψ̄ = 0.
        let denom = b + disc;
        if denom == 0.0 {
            return Ok(0.0);
        }
        Ok(2.0 * c / denom)
    } else if p.psi_base > 0.0 {
        Ok((disc - b) / (2.0 * p.psi_base))
    } else {
        Err(invalid(format!(
            "psi_base = 0 and Δ̄Γ > Ψ̃J at r = {}: stationarity has no positive root",
            1.0 + t
        )))
    }
}

fn pi_excess(class: &ClassSpec, t: f64, threads: usize) -> Result<f64> {
    let p = &class.params;
    if p.psi_base == 0.0 && p.psi_slope * class.file_size <= p.delta_base * gamma_excess(class, t) {
        // Ω diverges as this boundary is approached and π falls to zero.
        return Ok(0.0);
    }
    let k = omega_excess(class, t)?;
    Ok(pi_at(class, k, t, threads))
}

fn pi_at(class: &ClassSpec, k: f64, t: f64, threads: usize) -> f64 {
    let p = &class.params;
    let j = class.file_size;
    let num = threads as f64 * (p.psi_base * k + p.psi_slope * j);
    let den = k * (1.0 + t) * t * (p.delta_base * k + p.delta_slope * j);
    if den == 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// `Γ(r) = J r(r-1)/(Δ̄r + Ψ̄) · (Δ̃ + Ψ̃ ln(r/(r-1)))`.
pub fn gamma(class: &ClassSpec, r: f64) -> Result<f64> {
    let t = check_excess(r)?;
    Ok(gamma_excess(class, t))
}

/// Optimal dimension for a given redundancy ratio, `k = Ω(r)`.
pub fn omega(class: &ClassSpec, r: f64) -> Result<f64> {
    let t = check_excess(r)?;
    omega_excess(class, t)
}

/// `π(r) = L(Ψ̄k + Ψ̃J) / (k r(r-1)(Δ̄k + Δ̃J))` at `k = Ω(r)`; strictly decreasing.
pub fn pi(class: &ClassSpec, r: f64, threads: usize) -> Result<f64> {
    let t = check_excess(r)?;
    pi_excess(class, t, threads)
}

/// `(L/(L-λ̄))² - 1`.
pub fn load_target(lambda_bar: f64, threads: usize) -> Result<f64> {
    let l = threads as f64;
    if threads == 0 {
        return Err(invalid("thread count L must be at least 1"));
    }
    if !(lambda_bar > 0.0 && lambda_bar < l) {
        return Err(invalid(format!(
            "normalized load must lie in (0, {threads}), got {lambda_bar}"
        )));
    }
    // (L/(L-x))² - 1 = x(2L - x)/(L-x)²
    Ok(lambda_bar * (2.0 * l - lambda_bar) / ((l - lambda_bar) * (l - lambda_bar)))
}

/// Geometric bisection for the root of a strictly decreasing positive-domain
/// function, given `f(lo) > 0 > f(hi)`. Runs to floating-point resolution.
fn bisect_decreasing<F>(mut lo: f64, mut hi: f64, mut f: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    for _ in 0..400 {
        let mid = (lo * hi).sqrt();
        if !(mid > lo && mid < hi) || hi / lo - 1.0 < 1e-15 {
            break;
        }
        let v = f(mid)?;
        if v.is_nan() {
            return Err(Error::Numeric(format!("NaN during bisection at {mid}")));
        }
        if v > 0.0 {
            lo = mid;
        } else if v < 0.0 {
            hi = mid;
        } else {
            return Ok(mid);
        }
    }
    Ok((lo * hi).sqrt())
}

/// Expand `[lo, hi]` geometrically until `f(lo) > 0 > f(hi)` for decreasing `f`.
fn bracket_decreasing<F>(mut lo: f64, mut hi: f64, f: &mut F) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut steps = 0;
    while f(lo)? <= 0.0 {
        hi = lo;
        lo /= 2.0;
        steps += 1;
        if steps > 1100 || lo == 0.0 {
            return Err(Error::Numeric("bracket expansion failed toward zero".into()));
        }
    }
    steps = 0;
    while f(hi)? >= 0.0 {
        lo = hi;
        hi *= 2.0;
        steps += 1;
        if steps > 1100 || hi.is_infinite() {
            return Err(Error::Numeric("bracket expansion failed toward infinity".into()));
        }
    }
    Ok((lo, hi))
}

/// Continuous optimal code of one class at normalized load `λ̄ ∈ (0, L)`.
pub fn solve_class_at_load(class: &ClassSpec, lambda_bar: f64, threads: usize) -> Result<ContinuousCode> {
    check_solvable(class)?;
    let tau = load_target(lambda_bar, threads)?;
    let mut f = |t: f64| -> Result<f64> { Ok(pi_excess(class, t, threads)? - tau) };
    let (lo, hi) = bracket_decreasing(1e-9, 1.0, &mut f)?;
    let t = bisect_decreasing(lo, hi, f)?;
    let k = omega_excess(class, t)?;
    let r = 1.0 + t;
    Ok(ContinuousCode { r, k, n: k * r })
}

/// Continuous optimum for all classes sharing one normalized load.
pub fn optimal_codes_multiclass(
    classes: &[ClassSpec],
    lambda_bar: f64,
    threads: usize,
) -> Result<ContinuousOptimum> {
    let tau = load_target(lambda_bar, threads)?;
    let codes = classes
        .iter()
        .map(|c| solve_class_at_load(c, lambda_bar, threads))
        .collect::<Result<Vec<_>>>()?;
    Ok(ContinuousOptimum {
        lambda_bar,
        queue: mean_queue_length(lambda_bar, threads)?,
        tau,
        codes,
    })
}

/// Continuous optimum at a raw arrival rate `λ` (requests/ms).
///
/// The optimum depends on `λ` only through `λ̄ = λ Ū`, and `Ū` itself depends
/// on the optimal codes; `λ̄ - λ Ū(λ̄)` is increasing, so the consistent `λ̄`
/// is found by bisection.
pub fn optimal_codes_at_rate(
    classes: &[ClassSpec],
    lambda: f64,
    threads: usize,
) -> Result<ContinuousOptimum> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(invalid(format!("arrival rate must be positive, got {lambda}")));
    }
    let l = threads as f64;
    let gap = |x: f64| -> Result<f64> {
        let opt = optimal_codes_multiclass(classes, x * l, threads)?;
        let u_bar: f64 = classes
            .iter()
            .zip(&opt.codes)
            .map(|(c, code)| c.popularity * usage_continuous(c, code.k, code.r))
            .sum();
        Ok(x * l - lambda * u_bar)
    };
    // Search on the excess load 1 - x, where the gap is decreasing.
    let f = |y: f64| gap(1.0 - y);
    let mut hi_y = 1.0 - 1e-12;
    if f(hi_y)? >= 0.0 {
        return optimal_codes_multiclass(classes, (1.0 - hi_y) * l, threads);
    }
    let mut lo_y = 1e-3;
    while f(lo_y)? <= 0.0 {
        hi_y = lo_y;
        lo_y /= 4.0;
        if lo_y < 1e-14 {
            return Err(Error::Overloaded {
                lambda_bar: lambda * l,
                threads,
            });
        }
    }
    let y = bisect_decreasing(lo_y, hi_y, f)?;
    optimal_codes_multiclass(classes, (1.0 - y) * l, threads)
}

/// Continuous optimal `(n, k, r)` as functions of the expected backlog `Q`.
///
/// `Q = 0` returns the unbounded light-load limit.
pub fn code_functions_of_queue(class: &ClassSpec, queue: f64, threads: usize) -> Result<ContinuousCode> {
    if queue.is_nan() || queue < 0.0 {
        return Err(invalid(format!("backlog must be >= 0, got {queue}")));
    }
    if queue == 0.0 {
        return Ok(ContinuousCode::UNBOUNDED);
    }
    let lambda_bar = load_from_queue(queue, threads)?;
    if lambda_bar >= threads as f64 {
        return Err(Error::Numeric(format!("backlog {queue} maps to saturated load")));
    }
    solve_class_at_load(class, lambda_bar, threads)
}

fn invert_decreasing_of_queue<F>(class: &ClassSpec, target: f64, threads: usize, pick: F) -> Result<f64>
where
    F: Fn(&ContinuousCode) -> f64,
{
    check_solvable(class)?;
    if !(target.is_finite() && target > 0.0) {
        return Err(invalid(format!(
            "inversion target must be positive, got {target}"
        )));
    }
    let mut f = |q: f64| -> Result<f64> {
        let code = code_functions_of_queue(class, q, threads)?;
        Ok(pick(&code) - target)
    };
    let (lo, hi) = bracket_decreasing(1.0, 1.0, &mut f)?;
    bisect_decreasing(lo, hi, f)
}

/// Backlog at which the continuous optimal code length equals `n`.
pub fn invert_n(class: &ClassSpec, n: usize, threads: usize) -> Result<f64> {
    if n == 0 {
        return Err(invalid("code length must be at least 1"));
    }
    invert_decreasing_of_queue(class, n as f64, threads, |c| c.n)
}

/// Backlog at which the continuous optimal code dimension equals `k`.
pub fn invert_k(class: &ClassSpec, k: usize, threads: usize) -> Result<f64> {
    if k == 0 {
        return Err(invalid("code dimension must be at least 1"));
    }
    invert_decreasing_of_queue(class, k as f64, threads, |c| c.k)
}

/// Relative residuals of the optimality conditions at a solver output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// `|k - Ω(r)| / k`.
    pub dimension: f64,
    /// Stationarity in `k`: `|k(Ψ̄k+Ψ̃J) - Γ(Δ̄k+Δ̃J)|` relative to `Γ(Δ̄k+Δ̃J)`.
    pub stationarity: f64,
    /// Load balance: `|π(r) - τ| / τ`.
    pub load: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.dimension.max(self.stationarity).max(self.load)
    }
}

pub fn residuals(
    class: &ClassSpec,
    code: &ContinuousCode,
    lambda_bar: f64,
    threads: usize,
) -> Result<Residuals> {
    let tau = load_target(lambda_bar, threads)?;
    let t = check_excess(code.r)?;
    let p = &class.params;
    let j = class.file_size;
    let k = code.k;
    let g = gamma_excess(class, t);
    let lhs = k * (p.psi_base * k + p.psi_slope * j);
    let rhs = g * (p.delta_base * k + p.delta_slope * j);
    let omega = omega_excess(class, t)?;
    Ok(Residuals {
        dimension: (k - omega).abs() / k,
        stationarity: (lhs - rhs).abs() / rhs,
        load: (pi_at(class, k, t, threads) - tau).abs() / tau,
    })
}

/// Backlog thresholds for one class.
///
/// Indices are 1-based in the documentation and 0-based in storage:
/// `queue_n[i]` is `Q^N_{i+1}` and `cut_n[i]` is `H^N_{i+1}`, with
/// `cut_n[0] = ∞` and `cut_n[n_max] = 0`. Length `n` is used when the
/// smoothed backlog lies in `[H^N_{n+1}, H^N_n)`; the `K` tables work the same
/// way for the dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub queue_n: Vec<f64>,
    pub cut_n: Vec<f64>,
    pub queue_k: Vec<f64>,
    pub cut_k: Vec<f64>,
}

fn midpoint_cuts(queues: &[f64]) -> Vec<f64> {
    let mut cuts = Vec::with_capacity(queues.len() + 1);
    cuts.push(f64::INFINITY);
    for pair in queues.windows(2) {
        cuts.push((pair[0] + pair[1]) / 2.0);
    }
    cuts.push(0.0);
    cuts
}

fn interleaves(queues: &[f64], cuts: &[f64]) -> bool {
    if cuts.len() != queues.len() + 1 || cuts.last() != Some(&0.0) || cuts[0] != f64::INFINITY {
        return false;
    }
    queues
        .iter()
        .enumerate()
        .all(|(i, q)| cuts[i] > *q && *q > cuts[i + 1])
}

fn lookup(cuts: &[f64], backlog: f64) -> usize {
    let backlog = backlog.max(0.0);
    (1..cuts.len())
        .find(|&i| backlog >= cuts[i])
        .unwrap_or(cuts.len() - 1)
}

impl ThresholdTable {
    pub fn n_max(&self) -> usize {
        self.queue_n.len()
    }

    pub fn k_max(&self) -> usize {
        self.queue_k.len()
    }

    /// Code length selected for a smoothed backlog, before redundancy capping.
    pub fn select_n(&self, backlog: f64) -> usize {
        lookup(&self.cut_n, backlog)
    }

    pub fn select_k(&self, backlog: f64) -> usize {
        lookup(&self.cut_k, backlog)
    }

    /// `H_1 > Q_1 > H_2 > ... > Q_max > H_max+1 = 0` for both tables.
    pub fn is_interleaved(&self) -> bool {
        interleaves(&self.queue_n, &self.cut_n) && interleaves(&self.queue_k, &self.cut_k)
    }

    /// Write tables as CSV rows `class_id,kind,index,q_value,h_value`, one row
    /// per threshold. The last threshold of each kind has no queue value.
    pub fn write_csv<W: Write>(tables: &[ThresholdTable], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["class_id", "kind", "index", "q_value", "h_value"])?;
        for (id, table) in tables.iter().enumerate() {
            for (kind, queues, cuts) in [
                ("N", &table.queue_n, &table.cut_n),
                ("K", &table.queue_k, &table.cut_k),
            ] {
                for (i, h) in cuts.iter().enumerate() {
                    let q = queues.get(i).map(|q| format!("{q:e}")).unwrap_or_default();
                    w.write_record([
                        id.to_string(),
                        kind.to_string(),
                        (i + 1).to_string(),
                        q,
                        format_cut(*h),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Vec<ThresholdTable>> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let mut tables: Vec<ThresholdTable> = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let field = |i: usize| row.get(i).unwrap_or("").trim().to_string();
            let id: usize = field(0)
                .parse()
                .map_err(|_| Error::Parse(format!("bad class_id in {row:?}")))?;
            let index: usize = field(2)
                .parse()
                .map_err(|_| Error::Parse(format!("bad index in {row:?}")))?;
            let h = parse_cut(&field(4))?;
            let q = field(3);
            while tables.len() <= id {
                tables.push(ThresholdTable {
                    queue_n: vec![],
                    cut_n: vec![],
                    queue_k: vec![],
                    cut_k: vec![],
                });
            }
            let t = &mut tables[id];
            let (queues, cuts) = match field(1).as_str() {
                "N" => (&mut t.queue_n, &mut t.cut_n),
                "K" => (&mut t.queue_k, &mut t.cut_k),
                other => return Err(Error::Parse(format!("unknown threshold kind {other:?}"))),
            };
            if index != cuts.len() + 1 {
                return Err(Error::Parse(format!("threshold rows out of order at {row:?}")));
            }
            cuts.push(h);
            if !q.is_empty() {
                queues.push(
                    q.parse()
                        .map_err(|_| Error::Parse(format!("bad q_value in {row:?}")))?,
                );
            }
        }
        for t in &tables {
            if !t.is_interleaved() {
                return Err(Error::Parse("threshold table violates interleaving".into()));
            }
        }
        Ok(tables)
    }
}

fn format_cut(h: f64) -> String {
    if h.is_infinite() {
        "inf".to_string()
    } else {
        format!("{h:e}")
    }
}

fn parse_cut(s: &str) -> Result<f64> {
    match s {
        "inf" | "Inf" | "+inf" => Ok(f64::INFINITY),
        _ => s.parse().map_err(|_| Error::Parse(format!("bad h_value {s:?}"))),
    }
}

/// Backlog thresholds for one class from the uncapped continuous optimum.
pub fn build_thresholds(class: &ClassSpec, threads: usize) -> Result<ThresholdTable> {
    class.validate()?;
    let queue_n = (1..=class.n_max())
        .map(|n| invert_n(class, n, threads))
        .collect::<Result<Vec<_>>>()?;
    let queue_k = (1..=class.k_max)
        .map(|k| invert_k(class, k, threads))
        .collect::<Result<Vec<_>>>()?;
    let table = ThresholdTable {
        cut_n: midpoint_cuts(&queue_n),
        cut_k: midpoint_cuts(&queue_k),
        queue_n,
        queue_k,
    };
    if !table.is_interleaved() {
        return Err(Error::Numeric(format!(
            "thresholds are not strictly interleaved: {table:?}"
        )));
    }
    Ok(table)
}

/// All integer codes within a class's caps, ordered by `n` then `k`.
pub fn static_grid(class: &ClassSpec) -> Vec<CodeChoice> {
    let mut grid = Vec::new();
    for n in 1..=class.n_max() {
        for k in 1..=n.min(class.k_max) {
            if n <= class.n_cap(k) {
                grid.push(CodeChoice { n, k });
            }
        }
    }
    grid
}

/// `D_q + Σ p_i D_s,i` with log-form service delays; infinite when infeasible.
pub fn analytic_objective(
    classes: &[ClassSpec],
    codes: &[CodeChoice],
    lambda: f64,
    threads: usize,
) -> Result<f64> {
    let u_bar = model::mean_usage(classes, codes)?;
    let lambda_bar = lambda * u_bar;
    if !model::is_feasible(lambda_bar, threads) {
        return Ok(f64::INFINITY);
    }
    let mut total = model::queueing_delay(lambda_bar, u_bar, threads)?;
    for (c, code) in classes.iter().zip(codes) {
        if c.popularity > 0.0 {
            total += c.popularity * model::expected_service_delay(c, *code, DelayMode::LogApprox)?;
        }
    }
    Ok(total)
}

/// Continuous objective, used to cross-check the solver.
pub fn continuous_objective(
    classes: &[ClassSpec],
    codes: &[ContinuousCode],
    lambda: f64,
    threads: usize,
) -> f64 {
    let u_bar: f64 = classes
        .iter()
        .zip(codes)
        .map(|(c, code)| c.popularity * usage_continuous(c, code.k, code.r))
        .sum();
    let lambda_bar = lambda * u_bar;
    let l = threads as f64;
    if lambda_bar >= l {
        return f64::INFINITY;
    }
    let dq = lambda_bar * u_bar / (l * (l - lambda_bar));
    dq + classes
        .iter()
        .zip(codes)
        .map(|(c, code)| c.popularity * service_delay_continuous(c, code.k, code.r))
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticOptimum {
    pub codes: Vec<CodeChoice>,
    pub objective: f64,
}

/// Exhaustive search for the best fixed integer codes at arrival rate `λ`.
///
/// Ties (including all-infinite objectives) go to the smallest `n`, then the
/// smallest `k`, compared class by class.
pub fn brute_force_best_static(classes: &[ClassSpec], lambda: f64, threads: usize) -> Result<StaticOptimum> {
    if classes.is_empty() {
        return Err(invalid("at least one class is required"));
    }
    let grids: Vec<Vec<CodeChoice>> = classes.iter().map(static_grid).collect();
    let mut idx = vec![0usize; classes.len()];
    let mut best: Option<StaticOptimum> = None;
    let mut codes = vec![CodeChoice::BASIC; classes.len()];
    loop {
        for (slot, (g, i)) in codes.iter_mut().zip(grids.iter().zip(&idx)) {
            *slot = g[*i];
        }
        let u_bar = model::mean_usage(classes, &codes)?;
        if model::is_feasible(lambda * u_bar, threads) {
            let obj = analytic_objective(classes, &codes, lambda, threads)?;
            let better = match &best {
                None => true,
                Some(b) => obj < b.objective,
            };
            if better {
                best = Some(StaticOptimum {
                    codes: codes.clone(),
                    objective: obj,
                });
            }
        }
        // Odometer over the per-class grids, last class fastest.
        let mut pos = classes.len();
        loop {
            if pos == 0 {
                return best.ok_or(Error::Overloaded {
                    lambda_bar: lambda * model::mean_usage(classes, &vec![CodeChoice::BASIC; classes.len()])?,
                    threads,
                });
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < grids[pos].len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}
