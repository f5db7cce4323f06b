//! Convolution on the group `(ℝ^{N+1}, ∘)`:
//!
//! ```text
//! (f * g)(x, t) = ∫∫ f((y,s)^{-1} ∘ (x,t)) g(y,s) dy ds
//!               = ∫∫ f(x - E(t-s) y, t - s) g(y, s) dy ds
//! ```
//!
//! Both operands vanish outside their time slabs, so the time integral runs
//! over the overlap only. When `f` is the kernel `K` (or `D_i K`) the inner
//! spatial integral is either summed directly over the cells of a gridded
//! source, or, when the kernel is narrower than a grid cell or the source is
//! a closure, rewritten with `x - E(τ)y = δ(√τ) v`, `v ~ N(0, 2C(1))`:
//!
//! ```text
//! ∫ K(x - E(τ)y, τ) g(y) dy = E[ g(E(-τ)(x - δ(√τ) v)) ]
//! ∫ D_iK(x - E(τ)y, τ) g(y) dy = E[ -½ τ^{-1/2} (C(1)^{-1} v)_i g(E(-τ)(x - δ(√τ) v)) ]
//! ```
//!
//! and evaluated with tensor Gauss–Hermite nodes.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Centering, GridField, Source};
use crate::kernel::{KernelContext, LpValue, QuadratureSpec};
use crate::lie_group::StructureMatrix;
use crate::quadrature::{gauss_hermite_normal, gauss_legendre, pairwise_sum, Rule};

/// Which kernel acts as the left operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelOperand {
    Value,
    /// `D_i K` for `i < m_0`.
    Grad(usize),
    /// The source derivative `-∂_{y_i} K(x - E(τ) y, τ)` for `i < m_0`, so
    /// that convolving it with `f` gives `K * D_i f`.
    SourceGrad(usize),
}

/// Resolution of kernel convolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelConvSpec {
    /// Gauss–Hermite nodes per spatial axis.
    pub hermite_order: usize,
    /// Gauss–Legendre nodes per time panel.
    pub time_order: usize,
    /// Geometric panels refining toward `τ = 0`.
    pub geometric_panels: usize,
    /// Sum directly over source cells once every kernel standard deviation
    /// reaches this many cell widths.
    pub direct_threshold: f64,
    /// Output box margin, in kernel standard deviations at the latest time.
    pub margin_sigmas: f64,
    /// Output time horizon as a multiple of the source duration.
    pub time_extension: f64,
}

impl Default for KernelConvSpec {
    fn default() -> Self {
        KernelConvSpec {
            hermite_order: 8,
            time_order: 3,
            geometric_panels: 6,
            direct_threshold: 1.0,
            margin_sigmas: 4.0,
            time_extension: 1.0,
        }
    }
}

/// Precomputed Gauss–Hermite tables for one kernel operand.
pub struct KernelConvolver<'a> {
    ctx: &'a KernelContext,
    op: KernelOperand,
    spec: KernelConvSpec,
    /// `v = L ξ` per node, flattened.
    v: Vec<f64>,
    weights: Vec<f64>,
    /// `(C(1)^{-1} v)_i` per node for the gradient operand.
    grad_factor: Vec<f64>,
    sd1: Vec<f64>,
    time_rule: Rule,
}

impl<'a> KernelConvolver<'a> {
    pub fn new(ctx: &'a KernelContext, op: KernelOperand, spec: &KernelConvSpec) -> Result<Self> {
        let s = ctx.structure();
        let n = s.n();
        if let KernelOperand::Grad(i) | KernelOperand::SourceGrad(i) = op {
            if i >= s.m0() {
                return Err(Error::ExponentOutOfRange(format!(
                    "gradient index {i} must be below m0 = {}",
                    s.m0()
                )));
            }
        }
        if spec.hermite_order == 0 || spec.time_order == 0 {
            return Err(Error::InvalidProblem("quadrature orders must be positive".into()));
        }
        let two_c1 = ctx.c1() * 2.0;
        let l = two_c1
            .clone()
            .cholesky()
            .ok_or(Error::SingularCovariance)?
            .l();
        let gh = gauss_hermite_normal(spec.hermite_order);
        let total = gh.len().pow(n as u32);
        let mut v = Vec::with_capacity(total * n);
        let mut weights = Vec::with_capacity(total);
        let mut grad_factor = Vec::with_capacity(total);
        let src = s.exp_neg_tb(1.0).transpose() * ctx.c1_inv();
        let mut idx = vec![0usize; n];
        for _ in 0..total {
            let xi = DVector::from_iterator(n, idx.iter().map(|&k| gh.nodes[k]));
            let vv = &l * &xi;
            weights.push(idx.iter().map(|&k| gh.weights[k]).product());
            match op {
                KernelOperand::Value => {}
                KernelOperand::Grad(i) => grad_factor.push((ctx.c1_inv().row(i) * &vv)[0]),
                KernelOperand::SourceGrad(i) => grad_factor.push((src.row(i) * &vv)[0]),
            }
            v.extend(vv.iter());
            for a in (0..n).rev() {
                idx[a] += 1;
                if idx[a] < gh.len() {
                    break;
                }
                idx[a] = 0;
            }
        }
        let sd1 = (0..n).map(|i| two_c1[(i, i)].sqrt()).collect();
        Ok(KernelConvolver {
            ctx,
            op,
            spec: spec.clone(),
            v,
            weights,
            grad_factor,
            sd1,
            time_rule: gauss_legendre(spec.time_order),
        })
    }

    fn structure(&self) -> &StructureMatrix {
        self.ctx.structure()
    }

    /// Standard deviations of the kernel `K(·, τ)` per axis.
    fn sd(&self, tau: f64) -> Vec<f64> {
        self.structure()
            .degrees()
            .iter()
            .zip(&self.sd1)
            .map(|(&d, s)| s * tau.powf(d as f64 / 2.0))
            .collect()
    }

    /// `∫ k(x - E(τ)y, τ) g(y, s) dy` for one time node.
    fn inner(&self, g: &dyn Source, x: &[f64], tau: f64, s: f64, e_neg: &DMatrix<f64>) -> f64 {
        let n = x.len();
        if let Some(grid) = g.as_grid() {
            let sd = self.sd(tau);
            let direct = (0..n).all(|a| sd[a] >= self.spec.direct_threshold * grid.spacing(a));
            if direct {
                return self.inner_direct(grid, x, tau, s);
            }
        }
        let dil = self.structure().dilation_diag(tau.sqrt());
        let mut w = [0.0f64; 16];
        let mut y = [0.0f64; 16];
        let mut acc = Vec::with_capacity(self.weights.len());
        for (k, &wk) in self.weights.iter().enumerate() {
            let v = &self.v[k * n..(k + 1) * n];
            for a in 0..n {
                w[a] = x[a] - dil[a] * v[a];
            }
            for a in 0..n {
                let mut sum = 0.0;
                for b in 0..n {
                    sum += e_neg[(a, b)] * w[b];
                }
                y[a] = sum;
            }
            let val = g.value(&y[..n], s);
            if val == 0.0 {
                continue;
            }
            let factor = match self.op {
                KernelOperand::Value => 1.0,
                KernelOperand::Grad(_) | KernelOperand::SourceGrad(_) => {
                    -0.5 * self.grad_factor[k] / tau.sqrt()
                }
            };
            acc.push(wk * factor * val);
        }
        pairwise_sum(&acc)
    }

    fn inner_direct(&self, grid: &GridField, x: &[f64], tau: f64, s: f64) -> f64 {
        let n = x.len();
        let e = self.structure().exp_neg_tb(tau);
        let it = grid.dim();
        let spatial: usize = grid.shape()[..it].iter().product();
        let vol: f64 = (0..it).map(|a| grid.spacing(a)).product();
        let nt = grid.shape()[it];
        // time interpolation weights for s
        let (t0, _) = grid.t_range();
        let ht = grid.spacing(it);
        let pos = match grid.centering() {
            Centering::Cell => (s - t0) / ht - 0.5,
            Centering::Vertex => (s - t0) / ht,
        }
        .clamp(0.0, (nt - 1) as f64);
        let (j0, frac) = if nt == 1 {
            (0, 0.0)
        } else {
            let j = (pos.floor() as usize).min(nt - 2);
            (j, pos - j as f64)
        };
        let vals = grid.values();
        let mut coords = vec![0.0; n];
        let mut z = [0.0f64; 16];
        let mut acc = Vec::with_capacity(spatial);
        let mut idx = vec![0usize; it];
        let shape = grid.shape();
        for c in 0..spatial {
            let base = c * nt + j0;
            let gv = if frac > 0.0 {
                (1.0 - frac) * vals[base] + frac * vals[base + 1]
            } else {
                vals[base]
            };
            if gv != 0.0 {
                for a in 0..n {
                    coords[a] = grid.coord(a, idx[a]);
                }
                for a in 0..n {
                    let mut sum = 0.0;
                    for b in 0..n {
                        sum += e[(a, b)] * coords[b];
                    }
                    z[a] = x[a] - sum;
                }
                let kv = match self.op {
                    KernelOperand::Value => self.ctx.eval(&z[..n], tau),
                    KernelOperand::Grad(i) => self.ctx.grad(&z[..n], tau).map(|g| g[i]).unwrap_or(0.0),
                    KernelOperand::SourceGrad(i) => {
                        self.ctx.source_grad(&z[..n], tau).map(|g| g[i]).unwrap_or(0.0)
                    }
                };
                acc.push(kv * gv);
            }
            for a in (0..it).rev() {
                idx[a] += 1;
                if idx[a] < shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        vol * pairwise_sum(&acc)
    }

    /// `(k * g)(x, t)` at one point.
    pub fn at(&self, g: &dyn Source, x: &[f64], t: f64) -> f64 {
        let (s0, s1) = g.time_support();
        let tau_lo = (t - s1).max(0.0);
        let tau_hi = t - s0;
        if !(tau_hi > tau_lo) {
            return 0.0;
        }
        let mut breaks: Vec<f64> = vec![tau_lo, tau_hi];
        for b in g.time_breakpoints() {
            let tau = t - b;
            if tau > tau_lo && tau < tau_hi {
                breaks.push(tau);
            }
        }
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        if tau_lo == 0.0 {
            let first = breaks[1];
            for k in 1..=self.spec.geometric_panels {
                breaks.push(first * 0.5f64.powi(k as i32));
            }
            breaks.sort_by(f64::total_cmp);
        }
        let mut terms = Vec::new();
        for w in breaks.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a == 0.0 {
                // τ = σ², smoothing the τ^{-1/2} behaviour at the singular end
                for (sigma, wt) in self.time_rule.mapped(0.0, b.sqrt()) {
                    let tau = sigma * sigma;
                    let e_neg = self.structure().exp_neg_tb(-tau);
                    terms.push(2.0 * sigma * wt * self.inner(g, x, tau, t - tau, &e_neg));
                }
            } else {
                for (tau, wt) in self.time_rule.mapped(a, b) {
                    let e_neg = self.structure().exp_neg_tb(-tau);
                    terms.push(wt * self.inner(g, x, tau, t - tau, &e_neg));
                }
            }
        }
        pairwise_sum(&terms)
    }

    /// `k * g` on a cell-centred output grid enclosing the spread of the kernel.
    pub fn convolve_grid(&self, g: &GridField) -> Result<GridField> {
        let template = self.output_grid(g)?;
        let values: Vec<f64> = (0..template.len())
            .into_par_iter()
            .map(|k| {
                let (x, t) = template.node(k);
                self.at(g, &x, t)
            })
            .collect();
        template.with_values(values)
    }

    /// The output grid used by [`Self::convolve_grid`].
    pub fn output_grid(&self, g: &GridField) -> Result<GridField> {
        if g.centering() != Centering::Cell {
            return Err(Error::IncompatibleGrids(
                "kernel convolution expects a cell-centred source".into(),
            ));
        }
        if g.dim() != self.structure().n() {
            return Err(Error::IncompatibleGrids(format!(
                "source has {} spatial axes, structure has N = {}",
                g.dim(),
                self.structure().n()
            )));
        }
        let n = g.dim();
        let (t0, t1) = g.t_range();
        let ht = g.spacing(n);
        let nt_out = ((g.shape()[n] as f64) * self.spec.time_extension).round().max(1.0) as usize;
        let t_end = t0 + nt_out as f64 * ht;
        let span = t_end - t0;
        let _ = t1;
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        let corners = box_corners(g.lo(), g.hi());
        for k in 0..=64 {
            let tau = span * k as f64 / 64.0;
            let sd = self.sd(tau);
            for c in &corners {
                let z = self.structure().flow(tau, c);
                for a in 0..n {
                    lo[a] = lo[a].min(z[a] - self.spec.margin_sigmas * sd[a]);
                    hi[a] = hi[a].max(z[a] + self.spec.margin_sigmas * sd[a]);
                }
            }
        }
        let mut shape = Vec::with_capacity(n + 1);
        for a in 0..n {
            let h = g.spacing(a);
            lo[a] -= h;
            hi[a] += h;
            let cells = ((hi[a] - lo[a]) / h).ceil() as usize;
            hi[a] = lo[a] + cells as f64 * h;
            shape.push(cells);
        }
        shape.push(nt_out);
        GridField::zeros(lo, hi, (t0, t_end), shape, Centering::Cell)
    }
}

fn box_corners(lo: &[f64], hi: &[f64]) -> Vec<DVector<f64>> {
    let n = lo.len();
    (0..1usize << n)
        .map(|mask| {
            DVector::from_iterator(
                n,
                (0..n).map(|a| if mask >> a & 1 == 1 { hi[a] } else { lo[a] }),
            )
        })
        .collect()
}

/// `K * g` (or `D_i K * g`) on the default output grid.
pub fn convolve_kernel(
    ctx: &KernelContext,
    op: KernelOperand,
    g: &GridField,
    spec: &KernelConvSpec,
) -> Result<GridField> {
    KernelConvolver::new(ctx, op, spec)?.convolve_grid(g)
}

/// `f * g` for two cell-centred fields sharing the time step.
///
/// Both operands are read as piecewise constant in time on their cells.
/// For an output cell centred at `t_i` and a source cell `j`, the lag
/// `t_i - s` sweeps half of each of two consecutive `f` cells; each half is
/// evaluated at its midpoint lag. Spatially `f` is piecewise constant and
/// averaged over each output cell, and the `y` integral is the midpoint sum
/// over `g`'s cells, so `‖f * g‖_1 = ‖f‖_1 ‖g‖_1` holds for nonnegative data.
pub fn convolve_fields(f: &GridField, g: &GridField, s: &StructureMatrix) -> Result<GridField> {
    let n = s.n();
    if f.dim() != n || g.dim() != n {
        return Err(Error::IncompatibleGrids(format!(
            "fields have {} and {} spatial axes, structure has N = {n}",
            f.dim(),
            g.dim()
        )));
    }
    if f.centering() != Centering::Cell || g.centering() != Centering::Cell {
        return Err(Error::IncompatibleGrids("convolution expects cell-centred fields".into()));
    }
    let dt = f.spacing(n);
    if (g.spacing(n) - dt).abs() > 1e-12 * dt {
        return Err(Error::IncompatibleGrids(format!(
            "time steps differ: {} vs {}",
            dt,
            g.spacing(n)
        )));
    }
    let nf = f.shape()[n];
    let ng = g.shape()[n];
    let (a, _) = f.t_range();
    let (b, _) = g.t_range();
    let nt = nf + ng;
    let t_out = (a + b, a + b + nt as f64 * dt);

    // output box: supp f + E(τ) supp g over τ in f's slab
    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    let corners = box_corners(g.lo(), g.hi());
    let (fa, fb) = f.t_range();
    for k in 0..=64 {
        let tau = fa + (fb - fa) * k as f64 / 64.0;
        for c in &corners {
            let z = s.flow(tau, c);
            for ax in 0..n {
                lo[ax] = lo[ax].min(f.lo()[ax] + z[ax]);
                hi[ax] = hi[ax].max(f.hi()[ax] + z[ax]);
            }
        }
    }
    let mut shape = Vec::with_capacity(n + 1);
    for ax in 0..n {
        let h = f.spacing(ax);
        lo[ax] -= h;
        hi[ax] += h;
        let cells = ((hi[ax] - lo[ax]) / h).ceil() as usize;
        hi[ax] = lo[ax] + cells as f64 * h;
        shape.push(cells);
    }
    shape.push(nt);
    let template = GridField::zeros(lo, hi, t_out, shape, Centering::Cell)?;

    // source cells: spatial coordinates and per-time values
    let spatial: usize = g.shape()[..n].iter().product();
    let vol_g: f64 = (0..n).map(|ax| g.spacing(ax)).product();
    let g_coords: Vec<Vec<f64>> = (0..spatial)
        .map(|c| {
            let (x, _) = g.node(c * ng);
            x
        })
        .collect();
    let lags: Vec<f64> = (0..2 * nt + 2).map(|k| a + (k as f64 / 2.0 - 0.25) * dt).collect();
    let e_lag: Vec<DMatrix<f64>> = lags.iter().map(|&tau| s.exp_neg_tb(tau)).collect();
    // shifted source positions E(τ) y for every lag
    let shifted: Vec<Vec<f64>> = e_lag
        .iter()
        .map(|e| {
            let mut out = Vec::with_capacity(spatial * n);
            for y in &g_coords {
                for ax in 0..n {
                    out.push((0..n).map(|bx| e[(ax, bx)] * y[bx]).sum::<f64>());
                }
            }
            out
        })
        .collect();
    let gv = g.values();

    let values: Vec<f64> = (0..template.len())
        .into_par_iter()
        .map(|k| {
            let idx = template.multi_index(k);
            let i = idx[n];
            let x: Vec<f64> = (0..n).map(|ax| template.coord(ax, idx[ax])).collect();
            let mut z = vec![0.0; n];
            let mut terms = Vec::new();
            for j in 0..ng.min(i + 1) {
                let lag = i - j;
                // halves: f cell lag-1 at τ = a + (lag - ¼)dt, f cell lag at τ = a + (lag + ¼)dt
                for (fk, li) in [(lag as isize - 1, 2 * lag), (lag as isize, 2 * lag + 1)] {
                    if fk < 0 || fk as usize >= nf {
                        continue;
                    }
                    let sh = &shifted[li];
                    let mut acc = 0.0;
                    for c in 0..spatial {
                        let gval = gv[c * ng + j];
                        if gval == 0.0 {
                            continue;
                        }
                        for ax in 0..n {
                            z[ax] = x[ax] - sh[c * n + ax];
                        }
                        acc += gval * f.cell_average_slice(&z, fk as usize);
                    }
                    terms.push(acc);
                }
            }
            0.5 * dt * vol_g * pairwise_sum(&terms)
        })
        .collect();
    template.with_values(values)
}

/// `‖f * g‖_r / (‖f‖_p ‖g‖_q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YoungReport {
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

fn check_young(p: f64, q: f64, r: f64) -> Result<()> {
    if !(p >= 1.0 && q >= 1.0 && r >= 1.0) || (1.0 / p + 1.0 / q - 1.0 / r - 1.0).abs() > 1e-12 {
        return Err(Error::ExponentMismatch { p, q, r });
    }
    Ok(())
}

/// Young's inequality ratio, computing the convolution once.
pub fn young_check(
    f: &GridField,
    g: &GridField,
    s: &StructureMatrix,
    p: f64,
    q: f64,
    r: f64,
) -> Result<YoungReport> {
    check_young(p, q, r)?;
    let fg = convolve_fields(f, g, s)?;
    young_ratio(&fg, f, g, p, q, r)
}

/// Young's inequality ratio for a precomputed `f * g`.
pub fn young_ratio(
    fg: &GridField,
    f: &GridField,
    g: &GridField,
    p: f64,
    q: f64,
    r: f64,
) -> Result<YoungReport> {
    check_young(p, q, r)?;
    let lhs = fg.lp_norm(r)?;
    let rhs = f.lp_norm(p)? * g.lp_norm(q)?;
    let ratio = if rhs == 0.0 { 0.0 } else { lhs / rhs };
    Ok(YoungReport {
        p,
        q,
        r,
        lhs,
        rhs,
        ratio,
    })
}

/// One embedding inequality `lhs ≤ sigma · ‖u‖_q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingReport {
    pub p: f64,
    pub q: f64,
    pub lhs: f64,
    pub bound: f64,
    pub sigma: f64,
    /// Relative slack granted to `lhs ≤ bound`.
    pub tol: f64,
    pub satisfied: bool,
}

impl EmbeddingReport {
    fn new(p: f64, q: f64, lhs: f64, sigma: f64, norm_u: f64, tol: f64) -> Self {
        let bound = sigma * norm_u;
        EmbeddingReport {
            p,
            q,
            lhs,
            bound,
            sigma,
            tol,
            satisfied: lhs <= bound * (1.0 + tol),
        }
    }

    pub fn ratio(&self) -> f64 {
        if self.bound == 0.0 {
            0.0
        } else {
            self.lhs / self.bound
        }
    }
}

/// Target exponent from `1/p = 1/q + 1/s - 1`; `p = ∞` when the right side vanishes.
pub fn young_target(q: f64, s: f64) -> Result<f64> {
    if !(q >= 1.0) {
        return Err(Error::ExponentOutOfRange(format!("q = {q} must be at least 1")));
    }
    let inv = 1.0 / q + 1.0 / s - 1.0;
    if inv > 1.0 + 1e-15 {
        return Err(Error::ExponentOutOfRange(format!(
            "1/p = {inv} exceeds 1 (p < 1)"
        )));
    }
    if inv < -1e-15 {
        return Err(Error::ExponentOutOfRange(format!("1/p = {inv} is negative")));
    }
    Ok(if inv <= 0.0 { f64::INFINITY } else { 1.0 / inv.min(1.0) })
}

fn slab_duration(u: &GridField) -> Result<f64> {
    let (t0, t1) = u.t_range();
    if t0 < 0.0 {
        return Err(Error::IncompatibleGrids(format!(
            "field time slab must start at t >= 0, got {t0}"
        )));
    }
    Ok(t1)
}

fn conv_quadrature_budget() -> f64 {
    1e-3
}

/// `‖K * u‖_p ≤ σ_0 ‖u‖_q` with `σ_0 = ‖K‖_{p_0 - ε_0}` on the slab of `u`.
pub fn embedding_l1(
    u: &GridField,
    q: f64,
    eps0: f64,
    ctx: &KernelContext,
    spec: &KernelConvSpec,
) -> Result<EmbeddingReport> {
    let qq = ctx.structure().q() as f64;
    let p0 = (qq + 2.0) / qq;
    if !(eps0 > 0.0 && eps0 <= p0 - 1.0) {
        return Err(Error::Eps0OutOfRange {
            eps0,
            max: p0 - 1.0,
        });
    }
    let p = young_target(q, p0 - eps0)?;
    let horizon = slab_duration(u)?;
    let sigma = match ctx.lp_norm_closed_form(p0 - eps0, horizon)?.value {
        LpValue::Finite(v) => v,
        LpValue::Infinite => unreachable!("p0 - eps0 < p0"),
    };
    let norm_u = u.lp_norm(q)?;
    let lhs = if norm_u == 0.0 {
        0.0
    } else {
        let spec = KernelConvSpec {
            time_extension: 1.0,
            ..spec.clone()
        };
        convolve_kernel(ctx, KernelOperand::Value, u, &spec)?.lp_norm(p)?
    };
    Ok(EmbeddingReport::new(p, q, lhs, sigma, norm_u, conv_quadrature_budget()))
}

/// `‖D_i K * u‖_p ≤ σ_1 ‖u‖_q` with `σ_1 = ‖D_i K‖_{p_1 - ε_1}` by quadrature.
pub fn embedding_grad(
    u: &GridField,
    q: f64,
    eps1: f64,
    ctx: &KernelContext,
    i: usize,
    spec: &KernelConvSpec,
    sigma_spec: &QuadratureSpec,
) -> Result<EmbeddingReport> {
    let qq = ctx.structure().q() as f64;
    let p1 = (qq + 2.0) / (qq + 1.0);
    if !(eps1 > 0.0 && eps1 <= p1 - 1.0) {
        return Err(Error::ExponentOutOfRange(format!(
            "eps1 = {eps1} must lie in (0, {}]",
            p1 - 1.0
        )));
    }
    let p = young_target(q, p1 - eps1)?;
    let horizon = slab_duration(u)?;
    let report = ctx.grad_lp_norm_quadrature(i, p1 - eps1, horizon, sigma_spec)?;
    let sigma = report
        .value
        .finite()
        .ok_or(Error::GridTooCoarse {
            estimate: f64::INFINITY,
            tolerance: sigma_spec.tol,
        })?;
    let norm_u = u.lp_norm(q)?;
    let lhs = if norm_u == 0.0 {
        0.0
    } else {
        let spec = KernelConvSpec {
            time_extension: 1.0,
            ..spec.clone()
        };
        convolve_kernel(ctx, KernelOperand::Grad(i), u, &spec)?.lp_norm(p)?
    };
    let tol = 2.0 * report.error_estimate.unwrap_or(0.0) + conv_quadrature_budget();
    Ok(EmbeddingReport::new(p, q, lhs, sigma, norm_u, tol))
}

/// Measured `‖K * u‖_p / ‖u‖_q` at the scale-critical exponent
/// `1/p = 1/q - 2/(Q+2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2RatioReport {
    pub p: f64,
    pub q: f64,
    pub lhs: f64,
    pub norm_u: f64,
    pub ratio: f64,
}

pub fn critical_exponent(q: f64, big_q: usize) -> Result<f64> {
    let inv = 1.0 / q - 2.0 / (big_q as f64 + 2.0);
    if !(q > 1.0) || !(inv > 0.0) || inv > 1.0 {
        return Err(Error::ExponentOutOfRange(format!(
            "q = {q} gives 1/p = {inv}; need q > 1 and 0 < 1/p <= 1"
        )));
    }
    Ok(1.0 / inv)
}

pub fn embedding_l2_ratio(
    u: &GridField,
    q: f64,
    ctx: &KernelContext,
    spec: &KernelConvSpec,
) -> Result<L2RatioReport> {
    let p = critical_exponent(q, ctx.structure().q())?;
    let norm_u = u.lp_norm(q)?;
    let lhs = if norm_u == 0.0 {
        0.0
    } else {
        convolve_kernel(ctx, KernelOperand::Value, u, spec)?.lp_norm(p)?
    };
    Ok(L2RatioReport {
        p,
        q,
        lhs,
        norm_u,
        ratio: if norm_u == 0.0 { 0.0 } else { lhs / norm_u },
    })
}

/// The solution `u = K * g + Σ_i K * D_i f^i` of `𝒦_0 u = g + D_i f^i` on
/// the output grid of `g`, with each flux term evaluated as a convolution of
/// `f^i` against [`KernelOperand::SourceGrad`].
pub fn solve_cauchy(
    ctx: &KernelContext,
    g: &GridField,
    f: &[GridField],
    spec: &KernelConvSpec,
) -> Result<GridField> {
    let m0 = ctx.structure().m0();
    if !f.is_empty() && f.len() != m0 {
        return Err(Error::IncompatibleGrids(format!(
            "expected {m0} flux fields, got {}",
            f.len()
        )));
    }
    if let Some(bad) = f.iter().position(|fi| !fi.same_grid(g)) {
        return Err(Error::IncompatibleGrids(format!(
            "flux field {bad} is not on the grid of g"
        )));
    }
    let mut u = convolve_kernel(ctx, KernelOperand::Value, g, spec)?;
    for (i, fi) in f.iter().enumerate() {
        let part = convolve_kernel(ctx, KernelOperand::SourceGrad(i), fi, spec)?;
        for (a, b) in u.values_mut().iter_mut().zip(part.values()) {
            *a += b;
        }
    }
    Ok(u)
}

/// Pointwise [`solve_cauchy`] for arbitrary sources.
pub struct CauchySolution<'a> {
    value: KernelConvolver<'a>,
    grads: Vec<KernelConvolver<'a>>,
    g: &'a dyn Source,
    f: Vec<&'a dyn Source>,
}

impl<'a> CauchySolution<'a> {
    pub fn new(
        ctx: &'a KernelContext,
        g: &'a dyn Source,
        f: Vec<&'a dyn Source>,
        spec: &KernelConvSpec,
    ) -> Result<Self> {
        let m0 = ctx.structure().m0();
        if !f.is_empty() && f.len() != m0 {
            return Err(Error::IncompatibleGrids(format!(
                "expected {m0} flux sources, got {}",
                f.len()
            )));
        }
        let grads = (0..f.len())
            .map(|i| KernelConvolver::new(ctx, KernelOperand::SourceGrad(i), spec))
            .collect::<Result<_>>()?;
        Ok(CauchySolution {
            value: KernelConvolver::new(ctx, KernelOperand::Value, spec)?,
            grads,
            g,
            f,
        })
    }

    pub fn at(&self, x: &[f64], t: f64) -> f64 {
        let mut u = self.value.at(self.g, x, t);
        for (conv, fi) in self.grads.iter().zip(&self.f) {
            u += conv.at(*fi, x, t);
        }
        u
    }

    /// Centred-difference residual `D_t u - ⟨Bx, Du⟩ - Σ D_i² u - g - Σ D_i f^i`
    /// with stencil width `h` in every direction.
    pub fn fd_residual(&self, x: &[f64], t: f64, h: f64) -> f64 {
        let s = self.value.structure();
        let n = x.len();
        let shift = |a: usize, d: f64| {
            let mut y = x.to_vec();
            y[a] += d;
            y
        };
        let u0 = self.at(x, t);
        let dt = (self.at(x, t + h) - self.at(x, t - h)) / (2.0 * h);
        let bx = s.b() * DVector::from_column_slice(x);
        let mut transport = 0.0;
        let mut diffusion = 0.0;
        for a in 0..n {
            let up = self.at(&shift(a, h), t);
            let dn = self.at(&shift(a, -h), t);
            transport += bx[a] * (up - dn) / (2.0 * h);
            if a < s.m0() {
                diffusion += (up - 2.0 * u0 + dn) / (h * h);
            }
        }
        let mut rhs = self.g.value(x, t);
        for (i, fi) in self.f.iter().enumerate() {
            rhs += (fi.value(&shift(i, h), t) - fi.value(&shift(i, -h), t)) / (2.0 * h);
        }
        dt - transport - diffusion - rhs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FnSource;
    use crate::kernel::kernel_context;
    use crate::lie_group::{validate_structure, BlockSpec};

    fn kinetic() -> KernelContext {
        kernel_context(&validate_structure(&BlockSpec::kinetic(1)).unwrap()).unwrap()
    }

    fn bump(lo: f64, hi: f64, n: usize, nt: usize, t1: f64) -> GridField {
        GridField::from_fn(
            vec![lo, lo],
            vec![hi, hi],
            (0.0, t1),
            vec![n, n, nt],
            Centering::Cell,
            |x, t| {
                let r2 = x[0] * x[0] + x[1] * x[1];
                (1.0 - r2).max(0.0) * (1.0 + t)
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_source_gives_zero() {
        let ctx = kinetic();
        let g = bump(-1.0, 1.0, 6, 3, 0.5).map(|_| 0.0);
        let u = convolve_kernel(&ctx, KernelOperand::Value, &g, &KernelConvSpec::default()).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
        let u = solve_cauchy(&ctx, &g, std::slice::from_ref(&g), &KernelConvSpec::default()).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mass_does_not_increase() {
        let ctx = kinetic();
        let g = GridField::from_fn(
            vec![-0.2, -0.2],
            vec![0.2, 0.2],
            (0.0, 0.5),
            vec![4, 4, 4],
            Centering::Cell,
            |_, _| 1.0,
        )
        .unwrap();
        let u = convolve_kernel(&ctx, KernelOperand::Value, &g, &KernelConvSpec::default()).unwrap();
        assert!(u.values().iter().all(|&v| v >= 0.0));
        let total = g.integral();
        let nt = u.shape()[2];
        let spatial_vol = u.spacing(0) * u.spacing(1);
        for it in 0..nt {
            let mass: f64 = (0..u.len())
                .filter(|k| k % nt == it)
                .map(|k| u.values()[k] * spatial_vol)
                .sum();
            assert!(mass <= total * (1.0 + 1e-3), "slice {it}: {mass} > {total}");
        }
    }

    #[test]
    fn heat_case_matches_reference() {
        let s = validate_structure(&BlockSpec::parabolic(1)).unwrap();
        let ctx = kernel_context(&s).unwrap();
        let a = 0.25;
        let g = GridField::from_fn(vec![-2.5], vec![2.5], (0.0, 0.5), vec![200, 10], Centering::Cell, |x, _| {
            (-x[0] * x[0] / (2.0 * a)).exp()
        })
        .unwrap();
        let conv = KernelConvolver::new(&ctx, KernelOperand::Value, &KernelConvSpec::default()).unwrap();
        // reference: heat semigroup of a Gaussian, integrated in time
        let rule = gauss_legendre(40);
        for &(x, t) in &[(0.0, 0.25), (0.4, 0.5), (-0.8, 0.35)] {
            let reference: f64 = rule
                .mapped(0.0, t)
                .map(|(tau, w)| {
                    let var = a + 2.0 * tau;
                    w * (a / var).sqrt() * (-x * x / (2.0 * var)).exp()
                })
                .sum();
            let got = conv.at(&g, &[x], t);
            assert!((got - reference).abs() < 1e-3, "x={x}, t={t}: {got} vs {reference}");
        }
    }

    #[test]
    fn causality() {
        let ctx = kinetic();
        let g = bump(-1.0, 1.0, 6, 6, 0.6);
        let mut h = g.clone();
        // perturb the last time cell
        let nt = 6;
        for k in 0..h.len() {
            if k % nt == nt - 1 {
                h.values_mut()[k] += 5.0;
            }
        }
        let conv = KernelConvolver::new(&ctx, KernelOperand::Value, &KernelConvSpec::default()).unwrap();
        let t = 0.45; // before the perturbed cell's centre 0.55
        for x in [[0.0, 0.0], [0.3, -0.4]] {
            assert_eq!(conv.at(&g, &x, t), conv.at(&h, &x, t));
        }
        let fg = convolve_fields(&g, &g, ctx.structure()).unwrap();
        let fh = convolve_fields(&g, &h, ctx.structure()).unwrap();
        for k in 0..fg.len() {
            if fg.multi_index(k)[2] < nt - 1 {
                assert_eq!(fg.values()[k], fh.values()[k]);
            }
        }
    }

    #[test]
    fn young_l1_equality_for_nonnegative_fields() {
        let ctx = kinetic();
        let f = bump(-1.0, 1.0, 10, 4, 0.4);
        let g = bump(-1.0, 1.0, 10, 4, 0.4);
        let r = young_check(&f, &g, ctx.structure(), 1.0, 1.0, 1.0).unwrap();
        assert!((r.ratio - 1.0).abs() < 1e-12, "{r:?}");
        let zero = f.map(|_| 0.0);
        assert_eq!(young_check(&zero, &g, ctx.structure(), 1.0, 1.0, 1.0).unwrap().ratio, 0.0);
        assert!(matches!(
            young_check(&f, &g, ctx.structure(), 1.0, 2.0, 3.0),
            Err(Error::ExponentMismatch { .. })
        ));
    }

    #[test]
    fn incompatible_time_steps() {
        let ctx = kinetic();
        let f = bump(-1.0, 1.0, 4, 4, 0.4);
        let g = bump(-1.0, 1.0, 4, 3, 0.4);
        assert!(matches!(
            convolve_fields(&f, &g, ctx.structure()),
            Err(Error::IncompatibleGrids(_))
        ));
    }

    #[test]
    fn exponent_arithmetic() {
        assert!((young_target(1.0, 1.25).unwrap() - 1.25).abs() < 1e-12);
        assert!((young_target(2.0, 1.25).unwrap() - 10.0 / 3.0).abs() < 1e-12);
        let p = young_target(2.0, 1.15).unwrap();
        assert!((1.0 / p - (0.5 + 1.0 / 1.15 - 1.0)).abs() < 1e-12);
        assert!((p - 2.7059).abs() < 1e-4);
        assert!((critical_exponent(2.0, 4).unwrap() - 6.0).abs() < 1e-12);
        assert!(critical_exponent(1.0, 4).is_err());
        assert!(critical_exponent(4.0, 4).is_err());
    }

    #[test]
    fn embeddings_of_zero() {
        let ctx = kinetic();
        let u = bump(-1.0, 1.0, 4, 2, 0.5).map(|_| 0.0);
        let spec = KernelConvSpec::default();
        let r = embedding_l1(&u, 1.0, 0.25, &ctx, &spec).unwrap();
        assert_eq!((r.lhs, r.bound), (0.0, 0.0));
        assert!(r.satisfied);
        let r = embedding_l2_ratio(&u, 2.0, &ctx, &spec).unwrap();
        assert_eq!(r.ratio, 0.0);
        assert!(matches!(
            embedding_l1(&u, 1.0, 0.6, &ctx, &spec),
            Err(Error::Eps0OutOfRange { .. })
        ));
    }

    #[test]
    fn gradient_convolution_is_derivative_of_convolution() {
        let ctx = kinetic();
        let g = FnSource::new(
            |x: &[f64], t: f64| (-(x[0] * x[0] + x[1] * x[1]) / 2.0).exp() * (1.0 + t),
            (0.0, f64::INFINITY),
        );
        let spec = KernelConvSpec {
            hermite_order: 24,
            time_order: 8,
            ..Default::default()
        };
        let val = KernelConvolver::new(&ctx, KernelOperand::Value, &spec).unwrap();
        let grad = KernelConvolver::new(&ctx, KernelOperand::Grad(0), &spec).unwrap();
        for &(x, t) in &[([0.2, -0.1], 0.5), ([-0.5, 0.3], 0.8)] {
            let h = 1e-4;
            let fd = (val.at(&g, &[x[0] + h, x[1]], t) - val.at(&g, &[x[0] - h, x[1]], t)) / (2.0 * h);
            let an = grad.at(&g, &x, t);
            assert!((fd - an).abs() < 1e-3 * (1.0 + an.abs()), "{fd} vs {an}");
        }
    }

    #[test]
    fn cauchy_residual_is_second_order() {
        let ctx = kinetic();
        let g = FnSource::new(
            |x: &[f64], t: f64| (-(x[0] * x[0] + 0.5 * x[1] * x[1]) / 2.0).exp() * (1.0 + t * t),
            (0.0, f64::INFINITY),
        );
        let spec = KernelConvSpec {
            hermite_order: 24,
            time_order: 10,
            ..Default::default()
        };
        let sol = CauchySolution::new(&ctx, &g, vec![], &spec).unwrap();
        let r: Vec<f64> = [0.08, 0.04, 0.02]
            .iter()
            .map(|&h| sol.fd_residual(&[0.2, -0.1], 0.6, h).abs())
            .collect();
        let order = (r[0] / r[2]).log2() / 2.0;
        assert!(order >= 1.8, "residuals {r:?}, order {order}");
    }

    #[test]
    fn flux_residual_is_second_order() {
        let ctx = kinetic();
        let zero = FnSource::new(|_: &[f64], _: f64| 0.0, (0.0, f64::INFINITY));
        let f = FnSource::new(
            |x: &[f64], t: f64| (-((x[0] - 0.3).powi(2) + x[1] * x[1])).exp() * (t + 0.5).sin(),
            (0.0, f64::INFINITY),
        );
        let spec = KernelConvSpec {
            hermite_order: 24,
            time_order: 10,
            ..Default::default()
        };
        let sol = CauchySolution::new(&ctx, &zero, vec![&f], &spec).unwrap();
        let r: Vec<f64> = [0.08, 0.04, 0.02]
            .iter()
            .map(|&h| sol.fd_residual(&[0.2, -0.1], 0.6, h).abs())
            .collect();
        let order = (r[0] / r[2]).log2() / 2.0;
        assert!(order >= 1.8, "residuals {r:?}, order {order}");

        // the x-derivative kernel misses the drift commutator
        let wrong = KernelConvolver::new(&ctx, KernelOperand::Grad(0), &spec).unwrap();
        let right = KernelConvolver::new(&ctx, KernelOperand::SourceGrad(0), &spec).unwrap();
        let (a, b) = (wrong.at(&f, &[0.2, -0.1], 0.6), right.at(&f, &[0.2, -0.1], 0.6));
        assert!((a - b).abs() > 1e-3 * b.abs(), "{a} {b}");
    }
}
