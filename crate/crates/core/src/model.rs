//! Closed-form delay, usage and capacity quantities.
//!
//! Units throughout: milliseconds for time, megabytes for sizes, requests per
//! millisecond for arrival rates. Usage is thread-milliseconds.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;

/// Parameters of the shifted-exponential task delay law
/// `D_t(B) = (delta_base + delta_slope * B) + Exp(mean = psi_base + psi_slope * B)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayParams {
    /// Size-independent part of the delay floor (ms).
    pub delta_base: f64,
    /// Growth of the delay floor per MB (ms/MB).
    pub delta_slope: f64,
    /// Size-independent part of the exponential tail mean (ms).
    pub psi_base: f64,
    /// Growth of the tail mean per MB (ms/MB).
    pub psi_slope: f64,
}

impl DelayParams {
    pub fn new(delta_base: f64, delta_slope: f64, psi_base: f64, psi_slope: f64) -> Result<Self> {
        let p = DelayParams {
            delta_base,
            delta_slope,
            psi_base,
            psi_slope,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.delta_base, self.delta_slope, self.psi_base, self.psi_slope];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid(format!(
                "delay parameters must be finite and >= 0: {self:?}"
            )));
        }
        if self.delta_base + self.psi_base <= 0.0 || self.delta_slope + self.psi_slope <= 0.0 {
            return Err(invalid(format!("degenerate delay law: {self:?}")));
        }
        Ok(())
    }

    /// Lower bound of the task delay for a chunk of `chunk_size` MB.
    pub fn delay_floor(&self, chunk_size: f64) -> Result<f64> {
        check_chunk(chunk_size)?;
        Ok(self.delta_base + self.delta_slope * chunk_size)
    }

    /// Mean (and standard deviation) of the exponential tail, `1/mu(B)`.
    pub fn tail_mean(&self, chunk_size: f64) -> Result<f64> {
        check_chunk(chunk_size)?;
        Ok(self.psi_base + self.psi_slope * chunk_size)
    }

    /// Mean task delay `Delta(B) + 1/mu(B)`.
    pub fn mean_delay(&self, chunk_size: f64) -> Result<f64> {
        Ok(self.delay_floor(chunk_size)? + self.tail_mean(chunk_size)?)
    }

    pub fn scaled(&self, factor: f64) -> DelayParams {
        DelayParams {
            delta_base: self.delta_base * factor,
            delta_slope: self.delta_slope * factor,
            psi_base: self.psi_base * factor,
            psi_slope: self.psi_slope * factor,
        }
    }
}

fn check_chunk(chunk_size: f64) -> Result<()> {
    if chunk_size.is_finite() && chunk_size > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("chunk size must be positive, got {chunk_size}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OpType {
    #[default]
    Read,
    Write,
}

/// A request class: requests of one operation type on files of one size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub op_type: OpType,
    /// File size `J` in MB.
    pub file_size: f64,
    /// Fraction of all arrivals that belong to this class.
    pub popularity: f64,
    pub k_max: usize,
    pub r_max: f64,
    pub params: DelayParams,
}

impl ClassSpec {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.file_size.is_finite() && self.file_size > 0.0) {
            return Err(invalid(format!(
                "file size must be positive, got {}",
                self.file_size
            )));
        }
        if !(0.0..=1.0).contains(&self.popularity) {
            return Err(invalid(format!(
                "popularity must lie in [0,1], got {}",
                self.popularity
            )));
        }
        if self.k_max == 0 {
            return Err(invalid("k_max must be at least 1"));
        }
        if !(self.r_max.is_finite() && self.r_max >= 1.0) {
            return Err(invalid(format!("r_max must be >= 1, got {}", self.r_max)));
        }
        Ok(())
    }

    /// Largest code length allowed, `floor(r_max * k_max)`.
    pub fn n_max(&self) -> usize {
        max_length(self.r_max, self.k_max)
    }

    /// Largest code length allowed for dimension `k`, `floor(r_max * k)`.
    pub fn n_cap(&self, k: usize) -> usize {
        max_length(self.r_max, k)
    }

    /// Chunk size `J / k`.
    pub fn chunk_size(&self, k: f64) -> f64 {
        self.file_size / k
    }
}

pub(crate) fn max_length(r_max: f64, k: usize) -> usize {
    // Tolerate r_max values like 1.2 whose products land a hair below an integer.
    ((r_max * k as f64) + 1e-9).floor() as usize
}

/// An integer `(n, k)` MDS code: `n` coded chunks, any `k` of which suffice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CodeChoice {
    pub n: usize,
    pub k: usize,
}

impl CodeChoice {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if k == 0 || n < k {
            return Err(invalid(format!("code ({n},{k}) requires n >= k >= 1")));
        }
        Ok(CodeChoice { n, k })
    }

    pub const BASIC: CodeChoice = CodeChoice { n: 1, k: 1 };

    pub fn redundancy(&self) -> f64 {
        self.n as f64 / self.k as f64
    }
}

impl std::fmt::Display for CodeChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.n, self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub thread_count: usize,
    pub classes: Vec<ClassSpec>,
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.thread_count == 0 {
            return Err(invalid("thread count L must be at least 1"));
        }
        if self.classes.is_empty() {
            return Err(invalid("at least one request class is required"));
        }
        for c in &self.classes {
            c.validate()?;
        }
        let total: f64 = self.classes.iter().map(|c| c.popularity).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("class popularities sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// How the order-statistic term of the service delay is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayMode {
    /// `sum_{j=n-k+1}^{n} 1/j`, the exact mean of the k-th of n exponentials.
    ExactHarmonic,
    /// `ln(n/(n-k))`, the integral upper bound used by the optimizer.
    LogApprox,
}

/// `sum_{j=n-k+1}^{n} 1/j`.
pub fn harmonic_tail(n: usize, k: usize) -> f64 {
    // Smallest terms first.
    (n - k + 1..=n).rev().map(|j| 1.0 / j as f64).sum()
}

/// Expected service delay of a request when all `n` tasks start together.
///
/// `LogApprox` with `n == k` returns `f64::INFINITY`.
pub fn expected_service_delay(class: &ClassSpec, code: CodeChoice, mode: DelayMode) -> Result<f64> {
    let code = CodeChoice::new(code.n, code.k)?;
    let b = class.chunk_size(code.k as f64);
    let floor = class.params.delay_floor(b)?;
    let tail = class.params.tail_mean(b)?;
    let order = match mode {
        DelayMode::ExactHarmonic => harmonic_tail(code.n, code.k),
        DelayMode::LogApprox if code.n == code.k => return Ok(f64::INFINITY),
        DelayMode::LogApprox => (code.n as f64 / (code.n - code.k) as f64).ln(),
    };
    Ok(floor + tail * order)
}

/// Log-form service delay for a continuous code of dimension `k > 0` and
/// redundancy `r >= 1`; infinite at `r == 1`.
pub fn service_delay_continuous(class: &ClassSpec, k: f64, r: f64) -> f64 {
    let p = &class.params;
    let j = class.file_size;
    let order = if r <= 1.0 {
        f64::INFINITY
    } else {
        (r / (r - 1.0)).ln()
    };
    p.delta_base + p.delta_slope * j / k + (p.psi_base + p.psi_slope * j / k) * order
}

/// `ln(n/(n-k)) - sum_{j=n-k+1}^{n} 1/j`, the error of the log approximation.
pub fn harmonic_approx_gap(n: usize, k: usize) -> Result<f64> {
    if k == 0 || n <= k {
        return Err(invalid(format!(
            "approximation gap needs n > k >= 1, got ({n},{k})"
        )));
    }
    Ok((n as f64 / (n - k) as f64).ln() - harmonic_tail(n, k))
}

/// Expected thread time consumed by one request: `n*Delta(B) + k/mu(B)`.
pub fn expected_usage(class: &ClassSpec, code: CodeChoice) -> Result<f64> {
    let code = CodeChoice::new(code.n, code.k)?;
    let b = class.chunk_size(code.k as f64);
    Ok(code.n as f64 * class.params.delay_floor(b)? + code.k as f64 * class.params.tail_mean(b)?)
}

/// Usage for a continuous code, `Δ̄kr + Δ̃Jr + Ψ̄k + Ψ̃J`.
pub fn usage_continuous(class: &ClassSpec, k: f64, r: f64) -> f64 {
    let p = &class.params;
    let j = class.file_size;
    p.delta_base * k * r + p.delta_slope * j * r + p.psi_base * k + p.psi_slope * j
}

/// Popularity-weighted mean usage `Ū = Σ p_i U_i`.
pub fn mean_usage(classes: &[ClassSpec], codes: &[CodeChoice]) -> Result<f64> {
    if classes.len() != codes.len() {
        return Err(invalid(format!(
            "{} classes but {} codes",
            classes.len(),
            codes.len()
        )));
    }
    let total: f64 = classes.iter().map(|c| c.popularity).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("class popularities sum to {total}, expected 1")));
    }
    classes
        .iter()
        .zip(codes)
        .map(|(c, code)| Ok(c.popularity * expected_usage(c, *code)?))
        .sum()
}

/// Arrival rate of thread usage, `λ̄ = λ·Ū`. Feasible iff `λ̄ < L`.
pub fn normalized_load(lambda: f64, classes: &[ClassSpec], codes: &[CodeChoice]) -> Result<f64> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(invalid(format!("arrival rate must be >= 0, got {lambda}")));
    }
    Ok(lambda * mean_usage(classes, codes)?)
}

pub fn is_feasible(lambda_bar: f64, threads: usize) -> bool {
    lambda_bar < threads as f64
}

fn check_load(lambda_bar: f64, threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(invalid("thread count L must be at least 1"));
    }
    if lambda_bar.is_nan() || lambda_bar < 0.0 {
        return Err(invalid(format!("normalized load must be >= 0, got {lambda_bar}")));
    }
    if !is_feasible(lambda_bar, threads) {
        return Err(Error::Overloaded { lambda_bar, threads });
    }
    Ok(())
}

/// Queueing approximation for the request queue.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum QueueApprox {
    /// Request queue as M/M/1 with service rate `L/Ū`.
    #[default]
    Mm1,
    /// `D_q = β λ̄ Ū / (2L(L-λ̄))`.
    Mg1 { beta: f64 },
}

impl QueueApprox {
    pub fn queueing_delay(&self, lambda_bar: f64, mean_usage: f64, threads: usize) -> Result<f64> {
        match *self {
            QueueApprox::Mm1 => queueing_delay(lambda_bar, mean_usage, threads),
            QueueApprox::Mg1 { beta } => {
                check_load(lambda_bar, threads)?;
                let l = threads as f64;
                Ok(beta * lambda_bar * mean_usage / (2.0 * l * (l - lambda_bar)))
            }
        }
    }
}

/// M/M/1 queueing delay `λ̄Ū / (L(L-λ̄))`.
pub fn queueing_delay(lambda_bar: f64, mean_usage: f64, threads: usize) -> Result<f64> {
    check_load(lambda_bar, threads)?;
    let l = threads as f64;
    Ok(lambda_bar * mean_usage / (l * (l - lambda_bar)))
}

/// Expected request-queue length `λ̄² / (L(L-λ̄))`.
pub fn mean_queue_length(lambda_bar: f64, threads: usize) -> Result<f64> {
    check_load(lambda_bar, threads)?;
    let l = threads as f64;
    Ok(lambda_bar * lambda_bar / (l * (l - lambda_bar)))
}

/// Inverse of [`mean_queue_length`]: `λ̄ = L(√(Q²+4Q) - Q)/2`.
pub fn load_from_queue(queue: f64, threads: usize) -> Result<f64> {
    if threads == 0 {
        return Err(invalid("thread count L must be at least 1"));
    }
    if queue.is_nan() || queue < 0.0 {
        return Err(invalid(format!("queue length must be >= 0, got {queue}")));
    }
    let l = threads as f64;
    if queue.is_infinite() {
        return Ok(l);
    }
    if queue == 0.0 {
        return Ok(0.0);
    }
    // √(Q²+4Q) - Q rewritten to avoid cancellation at large Q.
    Ok(l * 2.0 * queue / ((queue * queue + 4.0 * queue).sqrt() + queue))
}

/// Static code capacity `C_sta = L/Ū` in requests per ms.
pub fn static_capacity(classes: &[ClassSpec], codes: &[CodeChoice], threads: usize) -> Result<f64> {
    Ok(threads as f64 / mean_usage(classes, codes)?)
}

/// Full capacity: static capacity with every class on the `(1,1)` code.
pub fn full_capacity(classes: &[ClassSpec], threads: usize) -> Result<f64> {
    let basic = vec![CodeChoice::BASIC; classes.len()];
    static_capacity(classes, &basic, threads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class() -> ClassSpec {
        ClassSpec {
            op_type: OpType::Read,
            file_size: 3.0,
            popularity: 1.0,
            k_max: 6,
            r_max: 2.0,
            params: DelayParams::new(20.0, 20.0, 10.0, 15.0).unwrap(),
        }
    }

    fn code(n: usize, k: usize) -> CodeChoice {
        CodeChoice::new(n, k).unwrap()
    }

    #[test]
    fn delay_floor_and_tail() {
        let p = class().params;
        assert_eq!(p.delay_floor(3.0).unwrap(), 80.0);
        assert!((p.delay_floor(1e-12).unwrap() - 20.0).abs() < 1e-9);
        let zero = DelayParams {
            delta_base: 0.0,
            delta_slope: 0.0,
            psi_base: 1.0,
            psi_slope: 1.0,
        };
        assert_eq!(zero.delay_floor(5.0).unwrap(), 0.0);
        assert!(p.delay_floor(0.0).is_err());
        assert!(p.delay_floor(-1.0).is_err());

        assert_eq!(p.tail_mean(3.0).unwrap(), 55.0);
        assert_eq!(p.tail_mean(1.5).unwrap(), 32.5);
        let flat = DelayParams::new(1.0, 1.0, 10.0, 0.0).unwrap();
        assert_eq!(flat.tail_mean(0.1).unwrap(), 10.0);
        assert_eq!(flat.tail_mean(7.0).unwrap(), 10.0);
    }

    #[test]
    fn params_validation() {
        assert!(DelayParams::new(-1.0, 1.0, 1.0, 1.0).is_err());
        assert!(DelayParams::new(0.0, 1.0, 0.0, 1.0).is_err());
        assert!(DelayParams::new(1.0, 0.0, 1.0, 0.0).is_err());
        assert!(DelayParams::new(f64::NAN, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn service_delay_examples() {
        let c = class();
        let exact = expected_service_delay(&c, code(4, 2), DelayMode::ExactHarmonic).unwrap();
        assert!((exact - (50.0 + 32.5 * (1.0 / 3.0 + 0.25))).abs() < 1e-12);
        assert!((exact - 68.958).abs() < 1e-3);
        let approx = expected_service_delay(&c, code(4, 2), DelayMode::LogApprox).unwrap();
        assert!((approx - (50.0 + 32.5 * 2f64.ln())).abs() < 1e-12);
        assert!((approx - 72.527).abs() < 1e-3);
        let single = expected_service_delay(&c, code(1, 1), DelayMode::ExactHarmonic).unwrap();
        assert_eq!(single, 135.0);
        let inf = expected_service_delay(&c, code(3, 3), DelayMode::LogApprox).unwrap();
        assert!(inf.is_infinite());
        assert!(expected_service_delay(&c, CodeChoice { n: 2, k: 3 }, DelayMode::ExactHarmonic).is_err());
    }

    #[test]
    fn continuous_delay_matches_integer_log_form() {
        let c = class();
        let d = expected_service_delay(&c, code(10, 4), DelayMode::LogApprox).unwrap();
        assert!((service_delay_continuous(&c, 4.0, 2.5) - d).abs() < 1e-12);
    }

    #[test]
    fn approximation_gap_examples() {
        let g = harmonic_approx_gap(2, 1).unwrap();
        assert!((g - (2f64.ln() - 0.5)).abs() < 1e-15);
        assert!((g - 0.1931).abs() < 1e-4);
        let g = harmonic_approx_gap(7, 6).unwrap();
        let direct = 7f64.ln() - (2..=7).map(|j| 1.0 / j as f64).sum::<f64>();
        assert!((g - direct).abs() < 1e-15);
        assert!(g > 0.0 && g <= EULER_MASCHERONI);
        assert!(harmonic_approx_gap(100, 6).unwrap() < 0.01);
        assert!(harmonic_approx_gap(3, 3).is_err());
        assert!(harmonic_approx_gap(3, 0).is_err());
    }

    #[test]
    fn usage_examples() {
        let c = class();
        assert_eq!(expected_usage(&c, code(2, 1)).unwrap(), 215.0);
        assert_eq!(expected_usage(&c, code(1, 1)).unwrap(), 135.0);
        assert!((expected_usage(&c, code(12, 6)).unwrap() - 465.0).abs() < 1e-9);
        assert!((usage_continuous(&c, 6.0, 2.0) - 465.0).abs() < 1e-9);
    }

    #[test]
    fn mean_usage_examples() {
        let c = class();
        assert_eq!(
            mean_usage(std::slice::from_ref(&c), &[code(1, 1)]).unwrap(),
            135.0
        );

        let mut a = c.clone();
        a.popularity = 0.5;
        let b = a.clone();
        let two = mean_usage(&[a.clone(), b], &[code(1, 1), code(2, 1)]).unwrap();
        assert_eq!(two, 175.0);

        // Classes whose (1,1) usage is 100, 200, 300.
        let mk = |u: f64, p: f64| ClassSpec {
            popularity: p,
            file_size: 1.0,
            params: DelayParams::new(u / 2.0, u / 4.0, u / 8.0, u / 8.0).unwrap(),
            ..c.clone()
        };
        let classes = [mk(100.0, 0.2), mk(200.0, 0.3), mk(300.0, 0.5)];
        let u = mean_usage(&classes, &[CodeChoice::BASIC; 3]).unwrap();
        assert!((u - 230.0).abs() < 1e-9);

        assert!(mean_usage(&[a], &[code(1, 1), code(2, 1)]).is_err());
    }

    #[test]
    fn load_and_queue() {
        let c = class();
        assert_eq!(
            normalized_load(0.0, std::slice::from_ref(&c), &[code(1, 1)]).unwrap(),
            0.0
        );
        let lb = normalized_load(0.1, std::slice::from_ref(&c), &[code(1, 1)]).unwrap();
        assert!((lb - 13.5).abs() < 1e-12);
        assert!(!is_feasible(16.0, 16));
        assert!(is_feasible(15.99, 16));

        let dq = queueing_delay(13.5, 135.0, 16).unwrap();
        assert!((dq - 45.5625).abs() < 1e-12);
        let q = mean_queue_length(13.5, 16).unwrap();
        assert!((q - 4.55625).abs() < 1e-12);
        assert_eq!(queueing_delay(0.0, 135.0, 16).unwrap(), 0.0);
        assert_eq!(mean_queue_length(0.0, 16).unwrap(), 0.0);
        assert!(mean_queue_length(16.0 - 1e-9, 16).unwrap() > 1e9);
        assert!(matches!(
            queueing_delay(16.0, 135.0, 16),
            Err(Error::Overloaded { .. })
        ));

        assert_eq!(load_from_queue(0.0, 16).unwrap(), 0.0);
        assert!((load_from_queue(4.55625, 16).unwrap() - 13.5).abs() < 1e-12);
        assert!((load_from_queue(1e12, 16).unwrap() - 16.0).abs() < 1e-9);
        assert_eq!(load_from_queue(f64::INFINITY, 16).unwrap(), 16.0);
        assert!(load_from_queue(-1.0, 16).is_err());
    }

    #[test]
    fn mg1_hook() {
        let mm1 = QueueApprox::Mm1.queueing_delay(13.5, 135.0, 16).unwrap();
        let mg1 = QueueApprox::Mg1 { beta: 2.0 }
            .queueing_delay(13.5, 135.0, 16)
            .unwrap();
        assert!((mm1 - mg1).abs() < 1e-12);
    }

    #[test]
    fn capacities() {
        let c = class();
        let full = full_capacity(std::slice::from_ref(&c), 16).unwrap();
        assert!((full - 16.0 / 135.0).abs() < 1e-15);
        assert!((full - 0.11852).abs() < 1e-5);
        assert_eq!(
            static_capacity(std::slice::from_ref(&c), &[code(1, 1)], 16).unwrap(),
            full
        );
        let ratio = static_capacity(std::slice::from_ref(&c), &[code(12, 6)], 16).unwrap() / full;
        assert!((ratio - 135.0 / 465.0).abs() < 1e-12);
        assert!((ratio - 0.29).abs() < 0.005);
    }

    #[test]
    fn system_validation() {
        let mut s = SystemSpec {
            thread_count: 16,
            classes: vec![class()],
        };
        assert!(s.validate().is_ok());
        s.classes[0].popularity = 0.5;
        assert!(s.validate().is_err());
        s.classes[0].popularity = 1.0;
        s.thread_count = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn n_max_tolerates_rounding() {
        let mut c = class();
        assert_eq!(c.n_max(), 12);
        c.r_max = 1.2;
        c.k_max = 5;
        assert_eq!(c.n_max(), 6);
        c.r_max = 1.0;
        c.k_max = 1;
        assert_eq!(c.n_max(), 1);
    }
}
