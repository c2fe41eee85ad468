use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tofec_core::model::DelayParams;
use tofec_core::traces::{generate_synthetic_trace, read_params, write_trace_csv};

fn tofec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tofec"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Non-comment CSV rows, header excluded.
fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn num(s: &str) -> f64 {
    match s {
        "inf" => f64::INFINITY,
        _ => s.parse().unwrap(),
    }
}

const PARAMS: &str = "21,8,76,28";

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let text = format!(
        r#"seed = 9
{body}

[system]
L = 16

[[classes]]
file_size_mb = 3.0
k_max = 6
r_max = 2.0
params = {{ delta_base_ms = 21.0, delta_slope_ms_per_mb = 8.0, psi_base_ms = 76.0, psi_slope_ms_per_mb = 28.0 }}
"#
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn fit_writes_four_keys_close_to_truth() {
    let dir = tempfile::tempdir().unwrap();
    let truth = DelayParams::new(21.0, 8.0, 76.0, 28.0).unwrap();
    let trace = generate_synthetic_trace(&truth, &[0.5, 1.0, 1.5, 3.0], 5000, 4).unwrap();
    let tp = dir.path().join("trace.csv");
    write_trace_csv(&trace, fs::File::create(&tp).unwrap()).unwrap();
    let pp = dir.path().join("params.txt");
    let o = tofec(&["fit", tp.to_str().unwrap(), "-o", pp.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&pp).unwrap();
    let keys: Vec<&str> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split('=').next().unwrap().trim())
        .collect();
    assert_eq!(
        keys,
        [
            "delta_base_ms",
            "delta_slope_ms_per_mb",
            "psi_base_ms",
            "psi_slope_ms_per_mb"
        ]
    );
    let got = read_params(text.as_bytes()).unwrap();
    for (g, w) in [
        (got.delta_base, truth.delta_base),
        (got.delta_slope, truth.delta_slope),
        (got.psi_base, truth.psi_base),
        (got.psi_slope, truth.psi_slope),
    ] {
        assert!((g - w).abs() / w < 0.1, "{g} vs {w}");
    }
}

#[test]
fn fit_rejects_single_size() {
    let dir = tempfile::tempdir().unwrap();
    let trace =
        generate_synthetic_trace(&DelayParams::new(21.0, 8.0, 76.0, 28.0).unwrap(), &[1.0], 100, 1).unwrap();
    let tp = dir.path().join("trace.csv");
    write_trace_csv(&trace, fs::File::create(&tp).unwrap()).unwrap();
    assert_eq!(code(&tofec(&["fit", tp.to_str().unwrap()])), 2);
}

#[test]
fn fit_rejects_missing_file() {
    assert_eq!(code(&tofec(&["fit", "/nonexistent/trace.csv"])), 2);
}

#[test]
fn solve_queue_scan_is_strictly_decreasing() {
    let qs: Vec<String> = (0..40).map(|i| format!("{}", 0.05 * 1.25f64.powi(i))).collect();
    let o = tofec(&["solve", "--delay", PARAMS, "--queue", &qs.join(",")]);
    assert_eq!(code(&o), 0);
    let r = rows(&String::from_utf8_lossy(&o.stdout));
    assert_eq!(r.len(), 40);
    for w in r.windows(2) {
        // lambda_bar rises with the backlog; n, k, r all fall.
        assert!(num(&w[1][0]) > num(&w[0][0]));
        for col in 2..5 {
            assert!(
                num(&w[1][col]) < num(&w[0][col]),
                "column {col}: {:?} -> {:?}",
                w[0],
                w[1]
            );
        }
    }
}

#[test]
fn solve_light_load_is_large_and_noted() {
    let o = tofec(&["solve", "--delay", PARAMS, "--load", "0.01"]);
    assert_eq!(code(&o), 0);
    let r = rows(&String::from_utf8_lossy(&o.stdout));
    assert!(num(&r[0][2]) > 12.0 && num(&r[0][3]) > 6.0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("exceeds"));
}

#[test]
fn solve_rejects_load_at_or_above_threads() {
    assert_eq!(code(&tofec(&["solve", "--delay", PARAMS, "--load", "16"])), 2);
    assert_eq!(
        code(&tofec(&["solve", "--delay", PARAMS, "--load", "20", "-L", "16"])),
        2
    );
}

#[test]
fn solve_rejects_bad_delay_list() {
    assert_eq!(code(&tofec(&["solve", "--delay", "1,2,3", "--load", "1"])), 2);
}

fn threshold_rows(extra: &[&str]) -> Vec<Vec<String>> {
    let mut args = vec!["thresholds", "--delay", PARAMS];
    args.extend_from_slice(extra);
    let o = tofec(&args);
    assert_eq!(code(&o), 0);
    rows(&String::from_utf8_lossy(&o.stdout))
}

#[test]
fn thresholds_default_caps_give_thirteen_and_seven_rows() {
    let r = threshold_rows(&[]);
    assert_eq!(r.iter().filter(|x| x[1] == "N").count(), 13);
    assert_eq!(r.iter().filter(|x| x[1] == "K").count(), 7);
    for kind in ["N", "K"] {
        let t: Vec<&Vec<String>> = r.iter().filter(|x| x[1] == kind).collect();
        assert_eq!(num(&t[0][4]), f64::INFINITY);
        assert_eq!(num(&t.last().unwrap()[4]), 0.0);
        assert!(t.last().unwrap()[3].is_empty());
        // H_i > Q_i > H_{i+1}, and each H is the midpoint of its neighbours.
        for i in 0..t.len() - 1 {
            let q = num(&t[i][3]);
            assert!(num(&t[i][4]) > q && q > num(&t[i + 1][4]));
            if i >= 1 {
                let mid = 0.5 * (num(&t[i - 1][3]) + q);
                assert!((num(&t[i][4]) - mid).abs() <= 1e-12 * mid);
            }
        }
    }
}

#[test]
fn thresholds_degenerate_caps_give_two_rows_per_kind() {
    let r = threshold_rows(&["--k-max", "1", "--r-max", "1"]);
    assert_eq!(r.iter().filter(|x| x[1] == "N").count(), 2);
    assert_eq!(r.iter().filter(|x| x[1] == "K").count(), 2);
}

#[test]
fn simulate_is_deterministic_and_records_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.toml",
        "horizon_ms = 30000.0\n[arrivals]\nkind = \"poisson\"\nrate_per_s = 30.0\n[strategy]\nkind = \"tofec\"",
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = tofec(&["simulate", &cfg, "--out-dir", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["requests.csv", "summary.csv"] {
        let x = fs::read(a.join(f)).unwrap();
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f} differs");
        let text = String::from_utf8(x).unwrap();
        assert!(text.contains("# seed = 9"));
        assert!(text.contains("# rate_per_s = 30.0"));
    }
    let summary = rows(&fs::read_to_string(a.join("summary.csv")).unwrap());
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0][1], "tofec");
    assert_eq!(summary[0][3], "false");
    let other = dir.path().join("c");
    tofec(&[
        "simulate",
        &cfg,
        "--out-dir",
        other.to_str().unwrap(),
        "--seed",
        "10",
    ]);
    assert_ne!(
        fs::read(a.join("requests.csv")).unwrap(),
        fs::read(other.join("requests.csv")).unwrap()
    );
}

#[test]
fn simulate_three_phase_config_completes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "phases.toml",
        r#"horizon_ms = 600000.0
warmup_ms = 0.0
[arrivals]
kind = "phased"
phases = [
  { duration_s = 200.0, rate_per_s = 10.0 },
  { duration_s = 200.0, rate_per_s = 80.0 },
  { duration_s = 200.0, rate_per_s = 10.0 },
]
[strategy]
kind = "ideal""#,
    );
    let out = dir.path().join("o");
    let o = tofec(&["simulate", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("requests.csv")).unwrap();
    let done = rows(&text).iter().filter(|r| !r[4].is_empty()).count();
    assert!(done > 18_000, "{done}");
}

#[test]
fn simulate_flags_overloaded_static_code() {
    let dir = tempfile::tempdir().unwrap();
    // (6,3) costs about 2.4x the (1,1) usage; 70/s is well past its capacity.
    let cfg = write_config(
        dir.path(),
        "hot.toml",
        "horizon_ms = 120000.0\noverload_bound = 500\n[arrivals]\nkind = \"poisson\"\nrate_per_s = 70.0\n[strategy]\nkind = \"static\"\ncodes = [[6, 3]]",
    );
    let out = dir.path().join("o");
    let o = tofec(&["simulate", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let summary = rows(&fs::read_to_string(out.join("summary.csv")).unwrap());
    assert_eq!(summary[0][3], "true");
    assert!(summary[0][5].is_empty());
}

#[test]
fn simulate_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        "horizon_ms = 1000.0\nbogus = 1\n[arrivals]\nkind = \"poisson\"\nrate_per_s = 1.0\n[strategy]\nkind = \"greedy\"",
    );
    assert_eq!(
        code(&tofec(&[
            "simulate",
            &cfg,
            "--out-dir",
            dir.path().to_str().unwrap()
        ])),
        2
    );
}

fn sweep_config(dir: &Path) -> String {
    write_config(
        dir,
        "sweep.toml",
        "horizon_ms = 60000.0\noverload_bound = 2000\n[arrivals]\nkind = \"poisson\"\nrate_per_s = 1.0\n[strategy]\nkind = \"tofec\"",
    )
}

#[test]
fn sweep_single_point_single_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(dir.path());
    let o = tofec(&["sweep", &cfg, "--rates", "20", "--strategies", "greedy"]);
    assert_eq!(code(&o), 0);
    let r = rows(&String::from_utf8_lossy(&o.stdout));
    assert_eq!(r.len(), 1);
    assert_eq!(r[0][0], "sweep");
    assert_eq!(r[0][1], "greedy");
    assert_eq!(num(&r[0][2]), 20.0);
}

#[test]
fn sweep_envelope_is_per_metric_minimum_over_statics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(dir.path());
    let o = tofec(&[
        "sweep",
        &cfg,
        "--rates",
        "20,60",
        "--strategies",
        "tofec,static-all",
    ]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(code(&o) <= 1);
    let r = rows(&text);
    for rate in ["20", "60"] {
        let at: Vec<&Vec<String>> = r.iter().filter(|x| x[2] == rate).collect();
        let statics: Vec<&&Vec<String>> = at.iter().filter(|x| x[1].starts_with("static:")).collect();
        assert_eq!(statics.len(), 27);
        let best = at.iter().find(|x| x[1].starts_with("best-static(")).unwrap();
        let ok: Vec<&&&Vec<String>> = statics.iter().filter(|x| x[3] == "false").collect();
        for col in 5..10 {
            let min = ok.iter().map(|x| num(&x[col])).fold(f64::INFINITY, f64::min);
            assert_eq!(num(&best[col]), min, "rate {rate} column {col}");
        }
        let argmin = ok
            .iter()
            .min_by(|a, b| num(&a[5]).total_cmp(&num(&b[5])))
            .unwrap();
        assert_eq!(best[1], format!("best-static({})", argmin[1]));
    }
}

#[test]
fn sweep_reports_overload_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(dir.path());
    let o = tofec(&[
        "sweep",
        &cfg,
        "--fractions",
        "0.9",
        "--strategies",
        "static:6:3,tofec",
    ]);
    assert_eq!(code(&o), 1);
    let r = rows(&String::from_utf8_lossy(&o.stdout));
    assert_eq!(r.len(), 2);
    let get = |s: &str| r.iter().find(|x| x[1] == s).unwrap();
    assert_eq!(get("static:6:3")[3], "true");
    assert_eq!(get("tofec")[3], "false");
}

#[test]
fn sweep_rejects_unknown_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sweep_config(dir.path());
    assert_eq!(
        code(&tofec(&[
            "sweep",
            &cfg,
            "--rates",
            "10",
            "--strategies",
            "fastest"
        ])),
        2
    );
}
