//! `tofec`: fit delay parameters, solve for optimal codes, build thresholds,
//! and run simulations or sweeps from a TOML config.
//!
//! Exit codes: 0 success, 1 an overloaded run was detected, 2 input error.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use tofec_core::config::RunConfig;
use tofec_core::engine::{self, ArrivalProcess};
use tofec_core::metrics::{write_summary_csv, Summary, SummaryRow};
use tofec_core::model::{full_capacity, load_from_queue, mean_queue_length, ClassSpec, DelayParams, OpType};
use tofec_core::solver::{
    build_thresholds, code_functions_of_queue, solve_class_at_load, static_grid, ThresholdTable,
};
use tofec_core::strategies::{Strategy, TofecState, DEFAULT_ALPHA};
use tofec_core::traces;

#[derive(Parser)]
#[command(
    name = "tofec",
    version,
    about = "Adaptive erasure-code selection for cloud storage access"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit delay parameters from a task-delay trace CSV.
    Fit {
        /// CSV with columns chunk_size_mb,delay_ms (optional op_type, timestamp_ms).
        trace: PathBuf,
        /// Params file to write; stdout if omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Continuous optimal (n, k, r) at given loads or backlogs.
    Solve {
        #[command(flatten)]
        class: ClassArgs,
        /// Normalized loads λ̄ in (0, L), comma separated.
        #[arg(long, value_delimiter = ',', required_unless_present = "queue")]
        load: Vec<f64>,
        /// Mean request-queue lengths, comma separated.
        #[arg(long, value_delimiter = ',', conflicts_with = "load")]
        queue: Vec<f64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Backlog thresholds for the adaptive policy.
    Thresholds {
        #[command(flatten)]
        class: ClassArgs,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run one simulation from a config file.
    Simulate {
        config: PathBuf,
        /// Directory receiving requests.csv and summary.csv.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Poisson arrival-rate sweep over several strategies.
    Sweep {
        config: PathBuf,
        /// Arrival rates in requests per second.
        #[arg(long, value_delimiter = ',', required_unless_present = "fractions")]
        rates: Vec<f64>,
        /// Arrival rates as fractions of the full capacity.
        #[arg(long, value_delimiter = ',', conflicts_with = "rates")]
        fractions: Vec<f64>,
        /// tofec, greedy, static:N:K or static-all.
        #[arg(long, value_delimiter = ',', default_value = "tofec,greedy,static-all")]
        strategies: Vec<String>,
        /// Scenario label; defaults to the config file stem.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ClassArgs {
    /// Params file written by `fit`.
    #[arg(long, required_unless_present = "delay", conflicts_with = "delay")]
    params: Option<PathBuf>,
    /// Inline parameters: delta_base,delta_slope,psi_base,psi_slope (ms, ms/MB).
    #[arg(long, value_delimiter = ',')]
    delay: Vec<f64>,
    /// Number of threads.
    #[arg(short = 'L', long = "threads", default_value_t = 16)]
    threads: usize,
    #[arg(long, default_value_t = 3.0)]
    file_size: f64,
    #[arg(long, default_value_t = 6)]
    k_max: usize,
    #[arg(long, default_value_t = 2.0)]
    r_max: f64,
}

impl ClassArgs {
    fn class(&self) -> Result<ClassSpec> {
        let params = match &self.params {
            Some(p) => {
                traces::read_params(File::open(p).with_context(|| format!("opening {}", p.display()))?)?
            }
            None => match self.delay[..] {
                [db, ds, pb, ps] => DelayParams::new(db, ds, pb, ps)?,
                _ => bail!("--delay takes exactly 4 values, got {}", self.delay.len()),
            },
        };
        let class = ClassSpec {
            op_type: OpType::Read,
            file_size: self.file_size,
            popularity: 1.0,
            k_max: self.k_max,
            r_max: self.r_max,
            params,
        };
        class.validate()?;
        Ok(class)
    }
}

/// Outcome of a command that ran to completion.
enum Status {
    Ok,
    Overloaded,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn provenance(out: &mut dyn Write, command: &str, cfg: &RunConfig) -> Result<()> {
    writeln!(out, "# tofec {command} {}", env!("CARGO_PKG_VERSION"))?;
    for line in cfg.to_toml().lines() {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

fn cmd_fit(trace: &Path, out: &Option<PathBuf>) -> Result<Status> {
    let records =
        traces::read_trace_csv(File::open(trace).with_context(|| format!("opening {}", trace.display()))?)?;
    let report = traces::fit_params(&records)?;
    for s in &report.sizes {
        eprintln!(
            "size {} MB: {} records, {} kept, mean {:.3} ms, std {:.3} ms",
            s.chunk_size, s.records, s.kept, s.trimmed_mean, s.trimmed_std
        );
    }
    for c in &report.clamped {
        eprintln!("warning: {c} clamped to 0");
    }
    let mut w = output(out)?;
    traces::write_params(&report.params, &mut w)?;
    w.flush()?;
    Ok(Status::Ok)
}

fn cmd_solve(args: &ClassArgs, loads: &[f64], queues: &[f64], out: &Option<PathBuf>) -> Result<Status> {
    let class = args.class()?;
    let l = args.threads;
    let mut rows = Vec::new();
    for &lb in loads {
        rows.push((lb, mean_queue_length(lb, l)?, solve_class_at_load(&class, lb, l)?));
    }
    for &q in queues {
        rows.push((load_from_queue(q, l)?, q, code_functions_of_queue(&class, q, l)?));
    }
    let mut w = csv::Writer::from_writer(output(out)?);
    w.write_record(["lambda_bar", "queue", "n", "k", "r"])?;
    for (lb, q, code) in &rows {
        if code.k > class.k_max as f64 || code.n > class.n_max() as f64 {
            eprintln!(
                "note: at load {lb} the uncapped optimum ({:.2}, {:.2}) exceeds k_max = {} or n_max = {}",
                code.n,
                code.k,
                class.k_max,
                class.n_max()
            );
        }
        w.write_record([lb, q, &code.n, &code.k, &code.r].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(Status::Ok)
}

fn cmd_thresholds(args: &ClassArgs, out: &Option<PathBuf>) -> Result<Status> {
    let table = build_thresholds(&args.class()?, args.threads)?;
    let mut w = output(out)?;
    ThresholdTable::write_csv(&[table], &mut w)?;
    w.flush()?;
    Ok(Status::Ok)
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Long-run mean arrival rate in requests per second.
fn nominal_rate(arrivals: &ArrivalProcess) -> f64 {
    match arrivals {
        ArrivalProcess::Poisson { rate } => rate * 1000.0,
        ArrivalProcess::Phased { phases } => {
            let total: f64 = phases.iter().map(|p| p.0).sum();
            1000.0 * phases.iter().map(|p| p.0 * p.1).sum::<f64>() / total
        }
        ArrivalProcess::Trace { timestamps } => match timestamps.last() {
            Some(&t) if t > 0.0 => 1000.0 * timestamps.len() as f64 / t,
            _ => 0.0,
        },
    }
}

fn k_columns(classes: &[ClassSpec]) -> usize {
    classes.iter().map(|c| c.k_max).max().unwrap_or(1)
}

fn cmd_simulate(config: &Path, out_dir: &Path, seed: Option<u64>) -> Result<Status> {
    let mut cfg = RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let sc = cfg.resolve(&base_dir(config))?;
    let result = engine::run(&sc.spec, &sc.arrivals, sc.sampler, sc.strategy, sc.options)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let mut w = BufWriter::new(File::create(out_dir.join("requests.csv"))?);
    provenance(&mut w, "simulate", &cfg)?;
    result.write_csv(&mut w)?;
    w.flush()?;

    let name = config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let k_max = k_columns(&sc.spec.classes);
    let row = SummaryRow::from_result(&name, nominal_rate(&sc.arrivals), &result, k_max)?;
    let mut w = BufWriter::new(File::create(out_dir.join("summary.csv"))?);
    provenance(&mut w, "simulate", &cfg)?;
    write_summary_csv(std::slice::from_ref(&row), k_max, &mut w)?;
    w.flush()?;

    match &row.summary {
        Some(s) => eprintln!(
            "{}: {} requests, mean {:.2} ms, p99 {:.2} ms, throughput {:.2}/s",
            result.strategy, s.count, s.mean, s.p99, s.throughput
        ),
        None => eprintln!(
            "{}: OVERLOADED (request queue exceeded {})",
            result.strategy, cfg.overload_bound
        ),
    }
    Ok(if result.overloaded {
        Status::Overloaded
    } else {
        Status::Ok
    })
}

fn sweep_strategies(names: &[String], classes: &[ClassSpec], threads: usize) -> Result<Vec<Strategy>> {
    let mut out = Vec::new();
    for name in names {
        match name.as_str() {
            "tofec" => out.push(Strategy::Tofec(TofecState::for_classes(
                classes,
                threads,
                DEFAULT_ALPHA,
            )?)),
            "greedy" => out.push(Strategy::Greedy),
            "static-all" => {
                let [class] = classes else {
                    bail!("static-all needs a single-class config");
                };
                out.extend(static_grid(class).into_iter().map(|c| Strategy::Static(vec![c])));
            }
            other => {
                let code = other
                    .strip_prefix("static:")
                    .and_then(|s| s.split_once(':'))
                    .and_then(|(n, k)| Some((n.parse().ok()?, k.parse().ok()?)))
                    .ok_or_else(|| anyhow!("unknown strategy {other:?}"))?;
                let code = tofec_core::CodeChoice::new(code.0, code.1)?;
                out.push(Strategy::Static(vec![code; classes.len()]));
            }
        }
    }
    Ok(out)
}

/// Per-metric minimum over the non-overloaded static rows of one rate.
fn best_static_row(rows: &[&SummaryRow]) -> Option<SummaryRow> {
    let ok: Vec<&SummaryRow> = rows.iter().copied().filter(|r| r.summary.is_some()).collect();
    let by_mean = ok.iter().min_by(|a, b| {
        a.summary
            .as_ref()
            .unwrap()
            .mean
            .total_cmp(&b.summary.as_ref().unwrap().mean)
    })?;
    let pick = |f: fn(&Summary) -> f64| {
        ok.iter()
            .map(|r| f(r.summary.as_ref().unwrap()))
            .fold(f64::INFINITY, f64::min)
    };
    let mut summary = by_mean.summary.clone().unwrap();
    summary.mean = pick(|s| s.mean);
    summary.median = pick(|s| s.median);
    summary.p90 = pick(|s| s.p90);
    summary.p99 = pick(|s| s.p99);
    summary.std = pick(|s| s.std);
    Some(SummaryRow {
        strategy: format!("best-static({})", by_mean.strategy),
        summary: Some(summary),
        ..(*by_mean).clone()
    })
}

fn cmd_sweep(
    config: &Path,
    rates: &[f64],
    fractions: &[f64],
    names: &[String],
    scenario: &Option<String>,
    out: &Option<PathBuf>,
) -> Result<Status> {
    let cfg = RunConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let base = base_dir(config);
    let spec = cfg.system_spec(&base)?;
    let sampler = cfg.delay_sampler(&base)?;
    let options = cfg.options();
    options.validate()?;
    let strategies = sweep_strategies(names, &spec.classes, spec.thread_count)?;
    let rates: Vec<f64> = if rates.is_empty() {
        let cap = full_capacity(&spec.classes, spec.thread_count)? * 1000.0;
        fractions.iter().map(|f| f * cap).collect()
    } else {
        rates.to_vec()
    };
    let name = scenario.clone().unwrap_or_else(|| {
        config
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let k_max = k_columns(&spec.classes);
    let jobs: Vec<(f64, &Strategy)> = rates
        .iter()
        .flat_map(|&r| strategies.iter().map(move |s| (r, s)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(rate, strategy)| -> Result<SummaryRow> {
            let arrivals = ArrivalProcess::Poisson { rate: rate / 1000.0 };
            let result = engine::run(
                &spec,
                &arrivals,
                sampler.clone(),
                strategy.clone(),
                options.clone(),
            )?;
            Ok(SummaryRow::from_result(&name, rate, &result, k_max)?)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut all = Vec::with_capacity(rows.len() + rates.len());
    for &rate in &rates {
        let at: Vec<&SummaryRow> = rows.iter().filter(|r| r.rate == rate).collect();
        all.extend(at.iter().map(|r| (*r).clone()));
        let statics: Vec<&SummaryRow> = at
            .iter()
            .copied()
            .filter(|r| r.strategy.starts_with("static:"))
            .collect();
        if statics.len() > 1 {
            all.extend(best_static_row(&statics));
        }
    }
    let mut w = output(out)?;
    provenance(&mut w, "sweep", &cfg)?;
    writeln!(w, "# rates_per_s={rates:?} strategies={names:?}")?;
    write_summary_csv(&all, k_max, &mut w)?;
    w.flush()?;
    let overloaded = all.iter().filter(|r| r.overloaded).count();
    if overloaded > 0 {
        eprintln!("{overloaded} of {} runs flagged OVERLOADED", all.len());
        return Ok(Status::Overloaded);
    }
    Ok(Status::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fit { trace, out } => cmd_fit(trace, out),
        Command::Solve {
            class,
            load,
            queue,
            out,
        } => cmd_solve(class, load, queue, out),
        Command::Thresholds { class, out } => cmd_thresholds(class, out),
        Command::Simulate {
            config,
            out_dir,
            seed,
        } => cmd_simulate(config, out_dir, *seed),
        Command::Sweep {
            config,
            rates,
            fractions,
            strategies,
            scenario,
            out,
        } => cmd_sweep(config, rates, fractions, strategies, scenario, out),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Overloaded) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
