use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use kolmolab::degiorgi::{
    exponent_table, run_level_iteration, solve_exponents_with, ExponentBundle, ExponentTable,
    LevelCertificate,
};
use kolmolab::expr::Expr;
use kolmolab::fd_solver::{check_max_principle, solve, FdGrid, FdSolution, MaxPrincipleReport};
use kolmolab::field::{Centering, GridField};
use kolmolab::group_conv::{embedding_grad, embedding_l1, EmbeddingReport};
use kolmolab::kernel::{kernel_context, LpValue, QuadratureSpec};
use kolmolab::lie_group::{validate_structure, StructureMatrix};
use kolmolab::sde_oracle::{density_error, euler_maruyama, exact_sample, DensityReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::*;
use crate::{CliError, Command, SEED_ENV};

type Res<T> = Result<T, CliError>;

/// Where relative paths in the config resolve, and where outputs go.
pub struct Context {
    pub config_dir: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
}

fn missing(section: &str) -> CliError {
    CliError::Config(format!("missing \"{section}\" section"))
}

/// Runs one subcommand and returns the output directory.
pub fn run(command: Command, config_path: &Path, out: Option<PathBuf>) -> Res<PathBuf> {
    let cfg = ExperimentConfig::load(config_path)?;
    let seed = match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
        Err(_) => cfg.seed,
    };
    let config_dir = config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let out = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let s = validate_structure(&cfg.structure)?;
    // validate the whole section before creating any output
    match command {
        Command::KernelNorms => cfg.kernel_norms.as_ref().map(|_| ()).ok_or_else(|| missing("kernel-norms"))?,
        Command::Embed => cfg.embed.as_ref().map(|_| ()).ok_or_else(|| missing("embed"))?,
        Command::Mc => cfg.mc.as_ref().map(|_| ()).ok_or_else(|| missing("mc"))?,
        Command::Solve => cfg.solve.as_ref().map(|_| ()).ok_or_else(|| missing("solve"))?,
        Command::Degiorgi => cfg.degiorgi.as_ref().map(|_| ()).ok_or_else(|| missing("degiorgi"))?,
        Command::Maxprinciple => cfg.maxprinciple.as_ref().map(|_| ()).ok_or_else(|| missing("maxprinciple"))?,
    }
    let ctx = Context { config_dir, out, seed };
    fs::create_dir_all(&ctx.out)?;
    match command {
        Command::KernelNorms => cmd_kernel_norms(&s, cfg.kernel_norms.as_ref().unwrap(), &ctx)?,
        Command::Embed => cmd_embed(&s, cfg.embed.as_ref().unwrap(), &ctx)?,
        Command::Mc => cmd_mc(&s, cfg.mc.as_ref().unwrap(), &ctx)?,
        Command::Solve => cmd_solve(&s, cfg.solve.as_ref().unwrap(), &ctx)?,
        Command::Degiorgi => cmd_degiorgi(&s, cfg.degiorgi.as_ref().unwrap(), &ctx)?,
        Command::Maxprinciple => cmd_maxprinciple(&s, cfg.maxprinciple.as_ref().unwrap(), &ctx)?,
    }
    Ok(ctx.out)
}

fn write_report<T: Serialize>(ctx: &Context, report: &T) -> Res<()> {
    let mut w = BufWriter::new(File::create(ctx.out.join("report.json"))?);
    serde_json::to_writer_pretty(&mut w, report)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn csv_writer(ctx: &Context, name: &str) -> Res<BufWriter<File>> {
    Ok(BufWriter::new(File::create(ctx.out.join(name))?))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormRow {
    pub p: f64,
    pub closed_form: LpValue,
    pub quadrature: LpValue,
    pub rel_err: Option<f64>,
    pub error_estimate: Option<f64>,
    pub divergent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedRow {
    pub p: f64,
    pub t_min: f64,
    pub value: LpValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelNormsReport {
    pub exponents: ExponentTable,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub rows: Vec<NormRow>,
    pub truncated: Vec<TruncatedRow>,
}

pub fn cmd_kernel_norms(s: &StructureMatrix, sec: &KernelNormsSection, ctx: &Context) -> Res<()> {
    let kc = kernel_context(s)?;
    let mut rows = Vec::new();
    let mut truncated = Vec::new();
    for &p in &sec.p {
        let closed = kc.lp_norm_closed_form(p, sec.horizon)?;
        let quad = kc.lp_norm_quadrature(p, sec.horizon, &sec.quadrature)?;
        let rel_err = match (closed.value, quad.value) {
            (LpValue::Finite(a), LpValue::Finite(b)) => Some((b - a).abs() / a.abs()),
            _ => None,
        };
        let divergent = closed.value.is_infinite();
        if divergent {
            for &t_min in &sec.t_min_sweep {
                let spec = QuadratureSpec {
                    t_min: Some(t_min),
                    ..sec.quadrature.clone()
                };
                let r = kc.lp_norm_quadrature(p, sec.horizon, &spec)?;
                truncated.push(TruncatedRow { p, t_min, value: r.value });
            }
        }
        rows.push(NormRow {
            p,
            closed_form: closed.value,
            quadrature: quad.value,
            rel_err,
            error_estimate: quad.error_estimate,
            divergent,
        });
    }
    let mut w = csv_writer(ctx, "kernel_norms.csv")?;
    writeln!(w, "p,closed_form,quadrature,rel_err,divergent_flag")?;
    for r in &rows {
        writeln!(w, "{},{},{},{},{}", r.p, r.closed_form, r.quadrature, opt(r.rel_err), r.divergent)?;
    }
    w.flush()?;
    if !truncated.is_empty() {
        let mut w = csv_writer(ctx, "kernel_norms_truncated.csv")?;
        writeln!(w, "p,t_min,value")?;
        for r in &truncated {
            writeln!(w, "{},{:e},{}", r.p, r.t_min, r.value)?;
        }
        w.flush()?;
    }
    write_report(
        ctx,
        &KernelNormsReport {
            exponents: exponent_table(s),
            horizon: sec.horizon,
            rows,
            truncated,
        },
    )
}

pub fn build_field(s: &StructureMatrix, sec: &FieldSection, seed: u64) -> Res<GridField> {
    let n = s.n();
    if sec.lo.len() != n || sec.hi.len() != n || sec.shape.len() != n + 1 {
        return Err(CliError::Config(format!(
            "field needs {n} bounds and {} shape entries",
            n + 1
        )));
    }
    let grid = |f: &(dyn Fn(&[f64], f64) -> f64 + Sync)| {
        GridField::from_fn(
            sec.lo.clone(),
            sec.hi.clone(),
            (0.0, sec.horizon),
            sec.shape.clone(),
            Centering::Cell,
            f,
        )
    };
    match (&sec.expr, sec.random_max) {
        (Some(src), None) => {
            let e = Expr::parse(src, n)?;
            Ok(grid(&|x, t| e.eval(x, t))?)
        }
        (None, Some(max)) => {
            if max.is_nan() || max <= 0.0 {
                return Err(CliError::Config(format!("random_max = {max} must be positive")));
            }
            let zero = grid(&|_, _| 0.0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = (0..zero.len()).map(|_| rng.random::<f64>() * max).collect();
            Ok(zero.with_values(values)?)
        }
        _ => Err(CliError::Config("field needs exactly one of \"expr\" and \"random_max\"".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedReport {
    pub l1: EmbeddingReport,
    pub gradient: Option<EmbeddingReport>,
}

pub fn cmd_embed(s: &StructureMatrix, sec: &EmbedSection, ctx: &Context) -> Res<()> {
    let kc = kernel_context(s)?;
    let u = build_field(s, &sec.field, ctx.seed)?;
    u.write_binary(&ctx.out.join("field.bin"))?;
    let l1 = embedding_l1(&u, sec.q, sec.eps0, &kc, &sec.conv)?;
    let gradient = match &sec.gradient {
        Some(g) => Some(embedding_grad(&u, sec.q, g.eps1, &kc, g.index, &sec.conv, &sec.sigma_quadrature)?),
        None => None,
    };
    let mut w = csv_writer(ctx, "embed.csv")?;
    writeln!(w, "kind,p,q,lhs,bound,sigma,ratio,satisfied")?;
    let rows = std::iter::once(("l1", &l1)).chain(gradient.iter().map(|g| ("gradient", g)));
    for (kind, r) in rows {
        writeln!(
            w,
            "{kind},{},{},{:e},{:e},{:e},{},{}",
            r.p,
            r.q,
            r.lhs,
            r.bound,
            r.sigma,
            r.ratio(),
            r.satisfied
        )?;
    }
    w.flush()?;
    write_report(ctx, &EmbedReport { l1, gradient })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub n: usize,
    pub t: f64,
    pub seed: u64,
    pub method: McMethod,
    pub mean: Vec<f64>,
    pub exact_mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub exact_covariance: Vec<Vec<f64>>,
    /// Largest `|mean - exact| / standard error` over components.
    pub max_mean_z: f64,
    /// Largest `|cov - exact| / standard error` over entries.
    pub max_cov_z: f64,
    pub density: DensityReport,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn cmd_mc(s: &StructureMatrix, sec: &McSection, ctx: &Context) -> Res<()> {
    let kc = kernel_context(s)?;
    let batch = match sec.method {
        McMethod::Exact => exact_sample(&kc, &sec.start, sec.t, sec.n, ctx.seed)?,
        McMethod::EulerMaruyama => {
            let steps = sec
                .steps
                .ok_or_else(|| CliError::Config("euler_maruyama needs \"steps\"".into()))?;
            euler_maruyama(s, &sec.start, sec.t, steps, sec.n, ctx.seed)?
        }
    };
    let exact_mean = s.flow(sec.t, &nalgebra::DVector::from_column_slice(&sec.start));
    let exact_cov = s.covariance(sec.t)? * 2.0;
    let mean = batch.mean();
    let cov = batch.covariance();
    let nf = batch.len() as f64;
    let max_mean_z = (0..s.n())
        .map(|i| (mean[i] - exact_mean[i]).abs() / (exact_cov[(i, i)] / nf).sqrt())
        .fold(0.0, f64::max);
    let se = batch.covariance_standard_error(&exact_cov);
    let max_cov_z = cov
        .iter()
        .zip(exact_cov.iter())
        .zip(se.iter())
        .map(|((c, e), s)| if *s > 0.0 { (c - e).abs() / s } else { 0.0 })
        .fold(0.0, f64::max);
    let density = density_error(&batch, &kc, sec.bins)?;
    if sec.write_samples {
        batch.write_csv(csv_writer(ctx, "samples.csv")?)?;
    }
    let mut w = csv_writer(ctx, "moments.csv")?;
    writeln!(w, "component,mean,exact_mean,variance,exact_variance")?;
    for i in 0..s.n() {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e}",
            i + 1,
            mean[i],
            exact_mean[i],
            cov[(i, i)],
            exact_cov[(i, i)]
        )?;
    }
    w.flush()?;
    write_report(
        ctx,
        &McReport {
            n: batch.len(),
            t: sec.t,
            seed: ctx.seed,
            method: sec.method,
            mean: mean.iter().copied().collect(),
            exact_mean: exact_mean.iter().copied().collect(),
            covariance: rows(&cov),
            exact_covariance: rows(&exact_cov),
            max_mean_z,
            max_cov_z,
            density,
        },
    )
}

fn solve_once(s: &StructureMatrix, sec: &SolveSection, grid: &FdGrid) -> Res<FdSolution> {
    let coeffs = sec.coefficients.compile(s.n(), s.m0())?;
    let data = sec.boundary.compile(s.n())?;
    Ok(solve(&sec.domain, s, &coeffs, &data, grid)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveLevel {
    pub cells: Vec<usize>,
    pub h: f64,
    pub dt: f64,
    pub steps: usize,
    pub cfl_rate: f64,
    pub sup: f64,
    pub error: Option<f64>,
    pub order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    #[serde(rename = "M")]
    pub m: f64,
    pub levels: Vec<SolveLevel>,
}

pub fn cmd_solve(s: &StructureMatrix, sec: &SolveSection, ctx: &Context) -> Res<()> {
    let exact = match &sec.exact {
        Some(src) => Some(Expr::parse(src, s.n())?),
        None => None,
    };
    let mut levels: Vec<SolveLevel> = Vec::new();
    let mut last = None;
    for level in 0..=sec.refinements {
        let factor = 1usize << level;
        let dt_factor = match sec.dt_scaling {
            DtScaling::Linear => factor as f64,
            DtScaling::Quadratic => (factor * factor) as f64,
        };
        let grid = FdGrid {
            cells: sec.grid.cells.iter().map(|c| c * factor).collect(),
            dt: sec.grid.dt / dt_factor,
            output_steps: sec.grid.output_steps,
            ..sec.grid.clone()
        };
        let sol = solve_once(s, sec, &grid)?;
        let error = exact.as_ref().map(|e| {
            let f = &sol.field;
            (0..f.len())
                .map(|k| {
                    let (x, t) = f.node(k);
                    (f.values()[k] - e.eval(&x, t)).abs()
                })
                .fold(0.0, f64::max)
        });
        let order = match (levels.last().and_then(|l| l.error), error) {
            (Some(prev), Some(cur)) if prev > 0.0 && cur > 0.0 => Some((prev / cur).log2()),
            _ => None,
        };
        let h = (0..s.n()).map(|a| sol.field.spacing(a)).fold(0.0, f64::max);
        levels.push(SolveLevel {
            cells: grid.cells.clone(),
            h,
            dt: sol.dt,
            steps: sol.steps,
            cfl_rate: sol.cfl_rate,
            sup: sol.sup_all(),
            error,
            order,
        });
        last = Some(sol);
    }
    let sol = last.expect("at least one level");
    sol.field.write_binary(&ctx.out.join("solution.bin"))?;
    if sec.write_field_csv {
        sol.field.write_csv(csv_writer(ctx, "solution.csv")?)?;
    }
    let mut w = csv_writer(ctx, "convergence.csv")?;
    writeln!(w, "level,h,dt,steps,error,order")?;
    for (i, l) in levels.iter().enumerate() {
        writeln!(w, "{i},{:e},{:e},{},{},{}", l.h, l.dt, l.steps, opt(l.error), opt(l.order))?;
    }
    w.flush()?;
    write_report(ctx, &SolveReport { m: sol.m, levels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegiorgiReport {
    pub exponents: ExponentTable,
    pub bundle: ExponentBundle,
    pub certificate: LevelCertificate,
}

pub fn cmd_degiorgi(s: &StructureMatrix, sec: &DegiorgiSection, ctx: &Context) -> Res<()> {
    let bundle = solve_exponents_with(s.q() as u64, sec.eps0, sec.theta)?;
    let (u, m, data_nodes) = match &sec.input {
        LevelInput::Field(path) => {
            let u = GridField::read_binary(&ctx.config_dir.join(path))?;
            let m = sec.m.ok_or_else(|| CliError::Config("\"M\" is required for field input".into()))?;
            (u, m, None)
        }
        LevelInput::Constant(c) => {
            let mut shape = c.shape.clone();
            if shape.len() != s.n() + 1 || c.lo.len() != s.n() || c.hi.len() != s.n() {
                return Err(CliError::Config(format!("constant field needs {} axes plus time", s.n())));
            }
            shape.iter_mut().for_each(|v| *v = (*v).max(1));
            let u = GridField::from_fn(
                c.lo.clone(),
                c.hi.clone(),
                (0.0, c.horizon),
                shape,
                Centering::Cell,
                |_, _| c.value,
            )?;
            (u, sec.m.unwrap_or(c.value), None)
        }
        LevelInput::Solve(p) => {
            let sol = solve_once(s, p, &p.grid)?;
            let m = sec.m.unwrap_or(sol.m);
            let nodes = sol.data_nodes();
            (sol.field, m, Some(nodes))
        }
    };
    let cert = run_level_iteration(&u, m, &bundle, &sec.level, data_nodes.as_deref())?;
    cert.write_csv(&ctx.out.join("decay.csv"))?;
    let mut w = csv_writer(ctx, "bounds.csv")?;
    writeln!(w, "subinterval,t_lo,t_hi,m_in,level,bound,measured_sup")?;
    for (j, sub) in cert.subintervals.iter().enumerate() {
        writeln!(
            w,
            "{j},{},{},{},{},{},{}",
            sub.t_lo,
            sub.t_hi,
            sub.m_in,
            opt(sub.level),
            sub.bound,
            sub.measured_sup
        )?;
    }
    w.flush()?;
    write_report(
        ctx,
        &DegiorgiReport {
            exponents: exponent_table(s),
            bundle,
            certificate: cert,
        },
    )
}

pub fn cmd_maxprinciple(s: &StructureMatrix, sec: &SolveSection, ctx: &Context) -> Res<()> {
    let coeffs = sec.coefficients.compile(s.n(), s.m0())?;
    let sol = solve_once(s, sec, &sec.grid)?;
    let report: MaxPrincipleReport = check_max_principle(&sol, &coeffs)?;
    let mut w = csv_writer(ctx, "maxprinciple.csv")?;
    writeln!(w, "sup_interior,sup_gamma_k_minus,M,margin")?;
    writeln!(
        w,
        "{},{},{},{}",
        report.sup_interior, report.sup_gamma_k_minus, report.m, report.margin
    )?;
    w.flush()?;
    write_report(ctx, &report)
}
