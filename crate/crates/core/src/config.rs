//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! horizon_ms = 600000.0
//! warmup_ms = 60000.0          # optional, default 10% of horizon
//! leftover_policy = "cancel"   # or "complete"
//! overload_bound = 100000
//!
//! [system]
//! L = 16
//!
//! [[classes]]
//! op_type = "read"
//! file_size_mb = 3.0
//! popularity = 1.0
//! k_max = 6
//! r_max = 2.0
//! params_file = "params.txt"   # or an inline [classes.params] table
//!
//! [arrivals]
//! kind = "poisson"             # "phased": phases = [{ duration_s, rate_per_s }]
//! rate_per_s = 40.0            # "trace": path = "arrivals.csv"
//!
//! [sampler]
//! kind = "parametric"          # "empirical": trace = "trace.csv"
//!
//! [strategy]
//! kind = "tofec"               # "greedy", "static" (codes), "ideal" (schedule)
//! alpha = 0.99
//! ```
//!
//! Relative paths are resolved against the directory holding the config.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{ArrivalProcess, DelaySampler, LeftoverPolicy, SimOptions, DEFAULT_OVERLOAD_BOUND};
use crate::error::{Error, Result};
use crate::model::{ClassSpec, CodeChoice, DelayParams, OpType, SystemSpec};
use crate::strategies::{IdealSchedule, ScheduleSegment, Strategy, TofecState, DEFAULT_ALPHA};
use crate::traces;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub horizon_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_ms: Option<f64>,
    #[serde(default)]
    pub leftover_policy: LeftoverPolicy,
    #[serde(default = "default_bound")]
    pub overload_bound: usize,
    #[serde(default = "default_true")]
    pub drain: bool,
    pub system: SystemSection,
    pub classes: Vec<ClassSection>,
    pub arrivals: ArrivalsSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    pub strategy: StrategySection,
}

fn default_bound() -> usize {
    DEFAULT_OVERLOAD_BOUND
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    #[serde(rename = "L")]
    pub threads: usize,
}

/// Delay parameters written inline, in ms and ms/MB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub delta_base_ms: f64,
    pub delta_slope_ms_per_mb: f64,
    pub psi_base_ms: f64,
    pub psi_slope_ms_per_mb: f64,
}

impl From<ParamsSection> for DelayParams {
    fn from(p: ParamsSection) -> Self {
        DelayParams {
            delta_base: p.delta_base_ms,
            delta_slope: p.delta_slope_ms_per_mb,
            psi_base: p.psi_base_ms,
            psi_slope: p.psi_slope_ms_per_mb,
        }
    }
}

impl From<DelayParams> for ParamsSection {
    fn from(p: DelayParams) -> Self {
        ParamsSection {
            delta_base_ms: p.delta_base,
            delta_slope_ms_per_mb: p.delta_slope,
            psi_base_ms: p.psi_base,
            psi_slope_ms_per_mb: p.psi_slope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSection {
    #[serde(default = "default_op")]
    pub op_type: OpType,
    pub file_size_mb: f64,
    #[serde(default = "default_popularity")]
    pub popularity: f64,
    pub k_max: usize,
    pub r_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_file: Option<PathBuf>,
}

fn default_op() -> OpType {
    OpType::Read
}

fn default_popularity() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub duration_s: f64,
    pub rate_per_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ArrivalsSection {
    Poisson {
        rate_per_s: f64,
    },
    Phased {
        phases: Vec<PhaseSection>,
    },
    /// CSV with a `timestamp_ms` column.
    Trace {
        path: PathBuf,
    },
}

impl ArrivalsSection {
    /// Phases as `(duration_ms, rate_per_ms)`.
    pub fn phases_ms(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            ArrivalsSection::Phased { phases } => Some(
                phases
                    .iter()
                    .map(|p| (p.duration_s * 1000.0, p.rate_per_s / 1000.0))
                    .collect(),
            ),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SamplerSection {
    #[default]
    Parametric,
    Empirical {
        trace: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSection {
    pub start_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_ms: Option<f64>,
    /// One `[n, k]` per class, or a single pair for all classes.
    pub codes: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StrategySection {
    Tofec {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Greedy,
    Static {
        codes: Vec<[usize; 2]>,
    },
    /// Without a schedule, one is derived from phased arrivals.
    Ideal {
        #[serde(default)]
        schedule: Vec<SegmentSection>,
    },
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn pairs(codes: &[[usize; 2]], classes: usize) -> Result<Vec<CodeChoice>> {
    let list = codes
        .iter()
        .map(|&[n, k]| CodeChoice::new(n, k))
        .collect::<Result<Vec<_>>>()?;
    match list.len() {
        1 => Ok(vec![list[0]; classes]),
        len if len == classes => Ok(list),
        len => Err(Error::Config(format!("{len} codes given for {classes} classes"))),
    }
}

/// Everything a run needs, with files loaded and units converted to ms.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: SystemSpec,
    pub arrivals: ArrivalProcess,
    pub sampler: DelaySampler,
    pub strategy: Strategy,
    pub options: SimOptions,
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_arrival_times(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let col = rdr
        .headers()?
        .iter()
        .position(|h| h == "timestamp_ms")
        .ok_or_else(|| Error::Parse(format!("{}: no timestamp_ms column", path.display())))?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let v = row
            .get(col)
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| Error::Parse(format!("{}: bad timestamp row {row:?}", path.display())))?;
        out.push(v);
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn options(&self) -> SimOptions {
        SimOptions {
            horizon: self.horizon_ms,
            warmup: self.warmup_ms,
            seed: self.seed,
            leftover: self.leftover_policy,
            overload_bound: self.overload_bound,
            drain: self.drain,
        }
    }

    pub fn system_spec(&self, base: &Path) -> Result<SystemSpec> {
        let mut classes = Vec::with_capacity(self.classes.len());
        for (i, c) in self.classes.iter().enumerate() {
            let params = match (&c.params, &c.params_file) {
                (Some(p), None) => DelayParams::from(*p),
                (None, Some(f)) => traces::read_params(fs::File::open(resolve_path(base, f))?)?,
                _ => {
                    return Err(Error::Config(format!(
                        "class {i}: give exactly one of params or params_file"
                    )))
                }
            };
            classes.push(ClassSpec {
                op_type: c.op_type,
                file_size: c.file_size_mb,
                popularity: c.popularity,
                k_max: c.k_max,
                r_max: c.r_max,
                params,
            });
        }
        let spec = SystemSpec {
            thread_count: self.system.threads,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn arrival_process(&self, base: &Path) -> Result<ArrivalProcess> {
        let p = match &self.arrivals {
            ArrivalsSection::Poisson { rate_per_s } => ArrivalProcess::Poisson {
                rate: rate_per_s / 1000.0,
            },
            ArrivalsSection::Phased { .. } => ArrivalProcess::Phased {
                phases: self.arrivals.phases_ms().expect("phased"),
            },
            ArrivalsSection::Trace { path } => ArrivalProcess::Trace {
                timestamps: read_arrival_times(&resolve_path(base, path))?,
            },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn delay_sampler(&self, base: &Path) -> Result<DelaySampler> {
        Ok(match &self.sampler {
            SamplerSection::Parametric => DelaySampler::Parametric,
            SamplerSection::Empirical { trace } => {
                let records = traces::read_trace_csv(fs::File::open(resolve_path(base, trace))?)?;
                DelaySampler::Empirical(vec![Arc::new(traces::build_pools(&records)?)])
            }
        })
    }

    pub fn build_strategy(&self, spec: &SystemSpec) -> Result<Strategy> {
        let classes = spec.classes.len();
        Ok(match &self.strategy {
            StrategySection::Tofec { alpha } => {
                Strategy::Tofec(TofecState::for_classes(&spec.classes, spec.thread_count, *alpha)?)
            }
            StrategySection::Greedy => Strategy::Greedy,
            StrategySection::Static { codes } => Strategy::Static(pairs(codes, classes)?),
            StrategySection::Ideal { schedule } if schedule.is_empty() => {
                let phases = self.arrivals.phases_ms().ok_or_else(|| {
                    Error::Config("ideal strategy needs a schedule or phased arrivals".into())
                })?;
                Strategy::Ideal(IdealSchedule::from_phases(
                    &spec.classes,
                    &phases,
                    spec.thread_count,
                )?)
            }
            StrategySection::Ideal { schedule } => {
                let mut segments = Vec::with_capacity(schedule.len());
                for (i, s) in schedule.iter().enumerate() {
                    let end = s
                        .end_ms
                        .or_else(|| schedule.get(i + 1).map(|n| n.start_ms))
                        .unwrap_or(f64::INFINITY);
                    segments.push(ScheduleSegment {
                        start: s.start_ms,
                        end,
                        codes: pairs(&s.codes, classes)?,
                    });
                }
                Strategy::Ideal(IdealSchedule::new(segments)?)
            }
        })
    }

    /// Loads referenced files and builds the run.
    pub fn resolve(&self, base: &Path) -> Result<Scenario> {
        let spec = self.system_spec(base)?;
        let options = self.options();
        options.validate()?;
        Ok(Scenario {
            arrivals: self.arrival_process(base)?,
            sampler: self.delay_sampler(base)?,
            strategy: self.build_strategy(&spec)?,
            spec,
            options,
        })
    }
}
