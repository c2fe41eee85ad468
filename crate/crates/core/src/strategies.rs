//! Per-request code selection policies.
//!
//! Every policy picks the `(n, k)` code when a request arrives; the engine
//! applies it unchanged when the request reaches the head of the queue.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassSpec, CodeChoice};
use crate::solver::{self, build_thresholds, ThresholdTable};

/// Default EWMA memory factor for the backlog.
pub const DEFAULT_ALPHA: f64 = 0.99;

/// What the engine knows at the instant a request arrives, before any
/// dispatch caused by that arrival.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrivalContext {
    pub now: f64,
    /// Requests waiting in the request queue, excluding ones in service.
    pub queue_len: usize,
    pub idle_threads: usize,
}

/// Backlog-threshold adaptation state.
#[derive(Debug, Clone, PartialEq)]
pub struct TofecState {
    alpha: f64,
    smoothed: f64,
    tables: Vec<ThresholdTable>,
}

impl TofecState {
    pub fn new(alpha: f64, tables: Vec<ThresholdTable>) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidParameter(format!(
                "memory factor must lie in [0,1], got {alpha}"
            )));
        }
        if tables.is_empty() {
            return Err(Error::InvalidParameter(
                "at least one threshold table is required".into(),
            ));
        }
        Ok(TofecState {
            alpha,
            smoothed: 0.0,
            tables,
        })
    }

    /// Builds one threshold table per class; classes are independent.
    pub fn for_classes(classes: &[ClassSpec], threads: usize, alpha: f64) -> Result<Self> {
        let tables = classes
            .par_iter()
            .map(|c| build_thresholds(c, threads))
            .collect::<Result<Vec<_>>>()?;
        Self::new(alpha, tables)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Current smoothed backlog `q̄`.
    pub fn smoothed_backlog(&self) -> f64 {
        self.smoothed
    }

    pub fn tables(&self) -> &[ThresholdTable] {
        &self.tables
    }

    /// Folds the observed backlog into `q̄` and looks the code up.
    pub fn select(&mut self, class_id: usize, class: &ClassSpec, queue_len: usize) -> Result<CodeChoice> {
        let table = self
            .tables
            .get(class_id)
            .ok_or_else(|| Error::Config(format!("no threshold table for class {class_id}")))?;
        self.smoothed = self.alpha * self.smoothed + (1.0 - self.alpha) * queue_len as f64;
        let k = table.select_k(self.smoothed).clamp(1, class.k_max);
        let n = table.select_n(self.smoothed).min(class.n_cap(k));
        // The two tables can disagree right at a boundary; n >= k is mandatory.
        Ok(CodeChoice { n: n.max(k), k })
    }
}

/// Pick `k` and then `n` from the number of idle threads `l`.
pub fn greedy_select(class: &ClassSpec, idle_threads: usize) -> CodeChoice {
    if idle_threads == 0 {
        return CodeChoice::BASIC;
    }
    let k = class.k_max.min(idle_threads);
    let n = class.n_cap(k).min(idle_threads);
    CodeChoice { n, k }
}

/// One stretch of a rate-scheduled run: `[start, end)` with one code per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSegment {
    pub start: f64,
    pub end: f64,
    pub codes: Vec<CodeChoice>,
}

/// Codes chosen with perfect knowledge of each phase's arrival rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealSchedule {
    segments: Vec<ScheduleSegment>,
}

impl IdealSchedule {
    /// Segments must start at 0 and tile time without gaps.
    pub fn new(segments: Vec<ScheduleSegment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Config("ideal schedule is empty".into()));
        }
        if segments[0].start != 0.0 {
            return Err(Error::Config(format!(
                "ideal schedule starts at {}, not 0",
                segments[0].start
            )));
        }
        for s in &segments {
            if !(s.end > s.start) {
                return Err(Error::Config(format!(
                    "empty schedule segment [{}, {})",
                    s.start, s.end
                )));
            }
            if s.codes.is_empty() {
                return Err(Error::Config("schedule segment without codes".into()));
            }
            for c in &s.codes {
                CodeChoice::new(c.n, c.k)?;
            }
        }
        for w in segments.windows(2) {
            if w[0].end != w[1].start {
                return Err(Error::Config(format!(
                    "ideal schedule gap or overlap between {} and {}",
                    w[0].end, w[1].start
                )));
            }
        }
        Ok(IdealSchedule { segments })
    }

    /// One segment per arrival phase, each using the best static code for
    /// that phase's rate. Phases beyond capacity fall back to `(1,1)`.
    pub fn from_phases(classes: &[ClassSpec], phases: &[(f64, f64)], threads: usize) -> Result<Self> {
        let mut start = 0.0;
        let mut segments = Vec::with_capacity(phases.len());
        for &(duration, rate) in phases {
            let codes = if rate <= 0.0 {
                vec![CodeChoice::BASIC; classes.len()]
            } else {
                match solver::brute_force_best_static(classes, rate, threads) {
                    Ok(best) => best.codes,
                    Err(Error::Overloaded { .. }) => vec![CodeChoice::BASIC; classes.len()],
                    Err(e) => return Err(e),
                }
            };
            segments.push(ScheduleSegment {
                start,
                end: start + duration,
                codes,
            });
            start += duration;
        }
        if let Some(last) = segments.last_mut() {
            last.end = f64::INFINITY;
        }
        Self::new(segments)
    }

    pub fn segments(&self) -> &[ScheduleSegment] {
        &self.segments
    }

    pub fn select(&self, class_id: usize, now: f64) -> Result<CodeChoice> {
        let seg = self
            .segments
            .iter()
            .find(|s| s.start <= now && now < s.end)
            .ok_or_else(|| Error::Config(format!("ideal schedule does not cover t = {now}")))?;
        seg.codes
            .get(class_id)
            .copied()
            .ok_or_else(|| Error::Config(format!("ideal schedule has no code for class {class_id}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    Tofec(TofecState),
    Greedy,
    /// One fixed code per class.
    Static(Vec<CodeChoice>),
    Ideal(IdealSchedule),
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::Tofec(_) => "tofec".into(),
            Strategy::Greedy => "greedy".into(),
            Strategy::Static(codes) => {
                let parts: Vec<String> = codes.iter().map(|c| format!("{}:{}", c.n, c.k)).collect();
                format!("static:{}", parts.join("/"))
            }
            Strategy::Ideal(_) => "ideal".into(),
        }
    }

    pub fn select(&mut self, class_id: usize, class: &ClassSpec, ctx: &ArrivalContext) -> Result<CodeChoice> {
        match self {
            Strategy::Tofec(state) => state.select(class_id, class, ctx.queue_len),
            Strategy::Greedy => Ok(greedy_select(class, ctx.idle_threads)),
            Strategy::Static(codes) => static_select(codes, class_id),
            Strategy::Ideal(schedule) => schedule.select(class_id, ctx.now),
        }
    }
}

pub fn static_select(codes: &[CodeChoice], class_id: usize) -> Result<CodeChoice> {
    codes
        .get(class_id)
        .or_else(|| if codes.len() == 1 { codes.first() } else { None })
        .copied()
        .ok_or_else(|| Error::Config(format!("no static code for class {class_id}")))
}
