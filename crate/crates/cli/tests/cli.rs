use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kolmolab::fd_solver::MaxPrincipleReport;
use kolmolab::kernel::LpValue;
use kolmolab_cli::commands::{DegiorgiReport, EmbedReport, KernelNormsReport, McReport, SolveReport};
use kolmolab_cli::config::ExperimentConfig;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn kolmolab(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kolmolab"));
    cmd.args(args).env_remove("KOLMOLAB_SEED");
    if let Some(s) = seed {
        cmd.env("KOLMOLAB_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn run_ok(sub: &str, config: &Path, out: &Path) {
    let o = kolmolab(&[sub, config.to_str().unwrap(), "--threads", "1", "--out", out.to_str().unwrap()], None);
    assert!(
        o.status.success(),
        "{sub} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn report<T: DeserializeOwned + Serialize + PartialEq + std::fmt::Debug>(out: &Path) -> T {
    let text = fs::read_to_string(out.join("report.json")).unwrap();
    let r: T = serde_json::from_str(&text).unwrap();
    let again: T = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(again, r);
    r
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn exit_code(args: &[&str]) -> i32 {
    kolmolab(args, None).status.code().unwrap()
}

#[test]
fn kernel_norms_sweep_flags_divergence_at_p0() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok("kernel-norms", &configs().join("kernel_norms.json"), tmp.path());
    let r: KernelNormsReport = report(tmp.path());
    let first = r.rows.iter().find(|row| row.divergent).unwrap();
    assert!((first.p - 1.5).abs() < 1e-12);
    assert!(first.quadrature.is_infinite());
    for row in r.rows.iter().filter(|row| !row.divergent) {
        assert!(row.rel_err.unwrap() <= 1e-3, "{row:?}");
    }
    let v: Vec<f64> = r.truncated.iter().map(|t| t.value.finite().unwrap()).collect();
    assert!(v.windows(2).all(|w| w[1] > w[0]), "{v:?}");
    let csv = fs::read_to_string(tmp.path().join("kernel_norms.csv")).unwrap();
    assert!(csv.starts_with("p,closed_form,quadrature,rel_err,divergent_flag\n"));
    assert!(csv.lines().last().unwrap().ends_with(",inf,inf,,true"));
    assert_eq!(r.exponents.p0.to_string(), "3/2");
}

#[test]
fn kernel_norms_edge_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "empty.json",
        r#"{"structure": {"m0": 1, "blocks": [[[1.0]]]}, "kernel-norms": {"p": []}}"#,
    );
    run_ok("kernel-norms", &cfg, &tmp.path().join("empty"));
    let csv = fs::read_to_string(tmp.path().join("empty/kernel_norms.csv")).unwrap();
    assert_eq!(csv, "p,closed_form,quadrature,rel_err,divergent_flag\n");
    let r: KernelNormsReport = report(&tmp.path().join("empty"));
    assert!(r.rows.is_empty());

    let cfg = write_config(
        tmp.path(),
        "low.json",
        r#"{"structure": {"m0": 1, "blocks": [[[1.0]]]}, "kernel-norms": {"p": [0.5]}}"#,
    );
    let out = tmp.path().join("low");
    assert_eq!(exit_code(&["kernel-norms", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 3);
}

#[test]
fn manufactured_solution_converges() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok("solve", &configs().join("manufactured.json"), tmp.path());
    let r: SolveReport = report(tmp.path());
    assert_eq!(r.levels.len(), 3);
    let order = r.levels.last().unwrap().order.unwrap();
    assert!(order >= 1.0, "order {order}");
    assert!(tmp.path().join("solution.bin").exists());
    let table = fs::read_to_string(tmp.path().join("convergence.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn monte_carlo_is_bitwise_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok("mc", &configs().join("mc.json"), &a);
    run_ok("mc", &configs().join("mc.json"), &b);
    for f in ["samples.csv", "moments.csv", "report.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let r: McReport = report(&a);
    assert_eq!(r.n, 100_000);
    assert!(r.max_mean_z < 3.0 && r.max_cov_z < 3.0, "{r:?}");
    assert!(r.density.ks_pass());

    let c = tmp.path().join("c");
    let cfg = configs().join("mc.json");
    let o = kolmolab(&["mc", cfg.to_str().unwrap(), "--out", c.to_str().unwrap()], Some("99"));
    assert!(o.status.success());
    let r: McReport = report(&c);
    assert_eq!(r.seed, 99);
    assert_ne!(fs::read(a.join("samples.csv")).unwrap(), fs::read(c.join("samples.csv")).unwrap());
}

#[test]
fn embedding_report() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok("embed", &configs().join("embed.json"), tmp.path());
    let r: EmbedReport = report(tmp.path());
    assert!(r.l1.satisfied);
    assert!(r.gradient.unwrap().satisfied);
    assert!(tmp.path().join("field.bin").exists());
}

#[test]
fn degiorgi_reports() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok("degiorgi", &configs().join("degiorgi_constant.json"), &tmp.path().join("c"));
    let r: DegiorgiReport = report(&tmp.path().join("c"));
    assert_eq!(r.certificate.bound, 2.0);

    run_ok("degiorgi", &configs().join("degiorgi.json"), &tmp.path().join("s"));
    let r: DegiorgiReport = report(&tmp.path().join("s"));
    assert!(r.certificate.bound >= r.certificate.measured_sup);
    let decay = fs::read_to_string(tmp.path().join("s/decay.csv")).unwrap();
    assert!(decay.starts_with("subinterval,n,k_n,measure,energy\n"));
    assert!(decay.lines().count() > 2);
}

#[test]
fn maxprinciple_report() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok("maxprinciple", &configs().join("maxprinciple.json"), tmp.path());
    let r: MaxPrincipleReport = report(tmp.path());
    assert!(r.margin >= 0.0, "{r:?}");
    let csv = fs::read_to_string(tmp.path().join("maxprinciple.csv")).unwrap();
    assert!(csv.starts_with("sup_interior,sup_gamma_k_minus,M,margin\n"));
}

#[test]
fn example_configs_parse() {
    for entry in fs::read_dir(configs()).unwrap() {
        let p = entry.unwrap().path();
        let text = fs::read_to_string(&p).unwrap();
        let cfg = ExperimentConfig::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        let again = ExperimentConfig::parse(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(exit_code(&["nonsense", "x.json"]), 2);
    assert_eq!(exit_code(&["solve"]), 2);
    assert_eq!(exit_code(&["solve", "/does/not/exist.json", "--out", out]), 2);

    let unknown = write_config(
        tmp.path(),
        "unknown.json",
        r#"{"structure": {"m0": 1, "blocks": [[[1.0]]]}, "colour": "blue"}"#,
    );
    let o = kolmolab(&["solve", unknown.to_str().unwrap(), "--out", out], None);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));

    let missing = write_config(tmp.path(), "missing.json", r#"{"structure": {"m0": 1, "blocks": [[[1.0]]]}}"#);
    assert_eq!(exit_code(&["mc", missing.to_str().unwrap(), "--out", out]), 3);

    let bad_structure = write_config(
        tmp.path(),
        "rank.json",
        r#"{"structure": {"m0": 1, "blocks": [[[0.0]]]}, "mc": {"t": 1, "start": [0, 0], "n": 10, "method": "exact"}}"#,
    );
    assert_eq!(exit_code(&["mc", bad_structure.to_str().unwrap(), "--out", out]), 3);

    let stall = write_config(
        tmp.path(),
        "stall.json",
        r#"{"structure": {"m0": 1, "blocks": [[[1.0]]]},
            "degiorgi": {"input": {"constant": {"value": 1e6, "lo": [0, 0], "hi": [1, 1], "T": 1, "shape": [2, 2, 2]}},
                         "M": 0.0, "level": {"mode": "l2_to_linf", "max_doublings": 3}}}"#,
    );
    assert_eq!(exit_code(&["degiorgi", stall.to_str().unwrap(), "--out", out]), 4);

    let hyp = write_config(
        tmp.path(),
        "hyp.json",
        r#"{"structure": {"m0": 1, "blocks": [[[1.0]]]},
            "maxprinciple": {"domain": {"v_lo": [-1], "v_hi": [1], "u_lo": [-1], "u_hi": [1], "T": 0.2},
                             "coefficients": {"d": "1"}, "boundary": {"gamma_p": "1"},
                             "grid": {"cells": [4, 4], "dt": 0.05}}}"#,
    );
    assert_eq!(exit_code(&["maxprinciple", hyp.to_str().unwrap(), "--out", out]), 3);
}

#[test]
fn divergent_value_serializes_as_inf() {
    assert_eq!(serde_json::to_string(&LpValue::Infinite).unwrap(), "\"inf\"");
}
