//! The fundamental solution of the constant-coefficient principal operator
//! `D_t u - ⟨Bx, Du⟩ - Σ_{i ≤ m_0} D_i² u`.
//!
//! ```text
//! K(x, t) = C_N t^{-Q/2} exp(-¼ ⟨C(1)^{-1} δ(1/√t) x, δ(1/√t) x⟩),   t > 0
//! C_N     = (4π)^{-N/2} det C(1)^{-1/2}
//! ```
//!
//! and `K = 0` for `t ≤ 0`. The two-point kernel is `K((y,s)^{-1} ∘ (x,t))`.
//!
//! `L^p` norms over `ℝ^N × (0, T)` are available in closed form and by a
//! quadrature that rescales each time slice with `y = δ(1/√t) x`, so the
//! spatial integrand does not sharpen as `t → 0`, and refines geometrically
//! toward the singular endpoint `t = 0`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::lie_group::{GroupElement, StructureMatrix};
use crate::quadrature::{composite, gauss_legendre, pairwise_sum, Rule};

/// Quadratic forms at or above this value give `K = 0` directly.
pub const QUADRATIC_FORM_CUTOFF: f64 = 1400.0;

/// Precomputed data for evaluating `K` and `∇_{m_0} K`.
#[derive(Debug, Clone)]
pub struct KernelContext {
    s: StructureMatrix,
    c1: DMatrix<f64>,
    c1_inv: DMatrix<f64>,
    det_c1: f64,
    cn: f64,
    /// Row-major copy of `C(1)^{-1}` for the hot loops.
    inv_flat: Vec<f64>,
    /// Row-major `E(1)ᵀ C(1)^{-1}`.
    src_flat: Vec<f64>,
    /// `-deg_i / 2`: the exponent of `t` in the rescaling of coordinate `i`.
    half_degrees: Vec<f64>,
}

/// Builds the kernel context of a validated structure.
pub fn kernel_context(s: &StructureMatrix) -> Result<KernelContext> {
    let n = s.n();
    let c1 = s.covariance(1.0)?;
    let chol = c1.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let c1_inv = chol.inverse();
    let det_c1 = chol.determinant();
    if !(det_c1 > 0.0) || !det_c1.is_finite() {
        return Err(Error::SingularCovariance);
    }
    let cn = (4.0 * PI).powf(-(n as f64) / 2.0) / det_c1.sqrt();
    let inv_flat = (0..n * n).map(|k| c1_inv[(k / n, k % n)]).collect();
    let src = s.exp_neg_tb(1.0).transpose() * &c1_inv;
    let src_flat = (0..n * n).map(|k| src[(k / n, k % n)]).collect();
    let half_degrees = s.degrees().iter().map(|&d| d as f64 / 2.0).collect();
    Ok(KernelContext {
        s: s.clone(),
        c1,
        c1_inv,
        det_c1,
        cn,
        inv_flat,
        src_flat,
        half_degrees,
    })
}

impl KernelContext {
    pub fn structure(&self) -> &StructureMatrix {
        &self.s
    }

    pub fn c1(&self) -> &DMatrix<f64> {
        &self.c1
    }

    pub fn c1_inv(&self) -> &DMatrix<f64> {
        &self.c1_inv
    }

    pub fn det_c1(&self) -> f64 {
        self.det_c1
    }

    pub fn cn(&self) -> f64 {
        self.cn
    }

    pub fn n(&self) -> usize {
        self.s.n()
    }

    fn rescale_into(&self, x: &[f64], t: f64, y: &mut [f64]) {
        let ln_t = t.ln();
        for ((yi, xi), h) in y.iter_mut().zip(x).zip(&self.half_degrees) {
            *yi = xi * (-h * ln_t).exp();
        }
    }

    fn quadratic_form(&self, y: &[f64]) -> f64 {
        let n = y.len();
        let mut q = 0.0;
        for i in 0..n {
            let row = &self.inv_flat[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += row[j] * y[j];
            }
            q += acc * y[i];
        }
        q
    }

    /// `K(x, t)`; zero for `t ≤ 0`.
    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        if !(t > 0.0) {
            return 0.0;
        }
        let mut buf = [0.0; 16];
        let y = &mut buf[..x.len()];
        self.rescale_into(x, t, y);
        let q = self.quadratic_form(y);
        if !(q < QUADRATIC_FORM_CUTOFF) {
            return 0.0;
        }
        let q_half = self.s.q() as f64 / 2.0;
        self.cn * (-0.25 * q - q_half * t.ln()).exp()
    }

    /// `K(z; ζ) = K(ζ^{-1} ∘ z) = K(x - E(t - s) y, t - s)`.
    pub fn eval_two_point(&self, z: &GroupElement, zeta: &GroupElement) -> f64 {
        let dt = z.t - zeta.t;
        let shifted = &z.x - self.s.flow(dt, &zeta.x);
        self.eval(shifted.as_slice(), dt)
    }

    /// The factor `½ (C(1)^{-1} δ(1/√t) x)_i` for `i < m_0`, so that
    /// `D_i K = -K · factor_i / √t`.
    pub fn gradient_factor(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.factor_rows(&self.inv_flat, x, t)
    }

    /// The factor `½ (E(1)ᵀ C(1)^{-1} δ(1/√t) x)_i` for `i < m_0`, so that
    /// the source derivative is `-K · factor_i / √t`.
    pub fn source_gradient_factor(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.factor_rows(&self.src_flat, x, t)
    }

    /// `-∂_{y_i} K(x - E(t) y, t)` at `y = 0` for `i < m_0`: the kernel `k_i`
    /// with `K * D_i f = k_i * f`. It differs from `D_i K` by the drift
    /// terms `Σ_a E(t)_{ai} D_a K` with `a ≥ m_0`.
    pub fn source_grad(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let factor = self.source_gradient_factor(x, t)?;
        let k = self.eval(x, t);
        let inv_sqrt_t = 1.0 / t.sqrt();
        Ok(factor.into_iter().map(|f| -k * f * inv_sqrt_t).collect())
    }

    fn factor_rows(&self, rows: &[f64], x: &[f64], t: f64) -> Result<Vec<f64>> {
        if !(t > 0.0) {
            return Err(Error::NonPositiveTime(t));
        }
        let n = x.len();
        let mut buf = [0.0; 16];
        let y = &mut buf[..n];
        self.rescale_into(x, t, y);
        Ok((0..self.s.m0())
            .map(|i| {
                let row = &rows[i * n..(i + 1) * n];
                0.5 * row.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect())
    }

    /// Analytic `D_i K(x, t)` for `i < m_0`.
    pub fn grad(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let factor = self.gradient_factor(x, t)?;
        let k = self.eval(x, t);
        let inv_sqrt_t = 1.0 / t.sqrt();
        Ok(factor.into_iter().map(|f| -k * f * inv_sqrt_t).collect())
    }

    /// Closed-form `‖K‖_{p, ℝ^N × (0,T)}`.
    pub fn lp_norm_closed_form(&self, p: f64, horizon: f64) -> Result<LpReport> {
        check_exponent(p, horizon)?;
        let n = self.n() as f64;
        let q = self.s.q() as f64;
        let time_exponent = -q * p / 2.0 + q / 2.0;
        let value = if time_exponent > -1.0 {
            let gaussian = (4.0 * PI / p).powf(n / 2.0) * self.det_c1.sqrt();
            let time = horizon.powf(1.0 + time_exponent) / (1.0 + time_exponent);
            let pth = self.cn.powf(p) * gaussian * time;
            LpValue::Finite(pth.powf(1.0 / p))
        } else {
            LpValue::Infinite
        };
        Ok(LpReport {
            p,
            horizon,
            value,
            method: LpMethod::ClosedForm,
            time_exponent,
            t_min: None,
            error_estimate: None,
        })
    }

    /// Quadrature `‖K‖_p` (see [`QuadratureSpec`]).
    pub fn lp_norm_quadrature(
        &self,
        p: f64,
        horizon: f64,
        spec: &QuadratureSpec,
    ) -> Result<LpReport> {
        check_exponent(p, horizon)?;
        let q = self.s.q() as f64;
        let time_exponent = -q * p / 2.0 + q / 2.0;
        self.lp_quadrature(p, horizon, spec, time_exponent, None, &|x, t| self.eval(x, t))
    }

    /// Quadrature `‖D_i K‖_p` for `i < m_0`.
    pub fn grad_lp_norm_quadrature(
        &self,
        i: usize,
        p: f64,
        horizon: f64,
        spec: &QuadratureSpec,
    ) -> Result<LpReport> {
        check_exponent(p, horizon)?;
        if i >= self.s.m0() {
            return Err(Error::ExponentOutOfRange(format!(
                "gradient index {i} must be below m0 = {}",
                self.s.m0()
            )));
        }
        let q = self.s.q() as f64;
        let time_exponent = -(q + 1.0) * p / 2.0 + q / 2.0;
        self.lp_quadrature(p, horizon, spec, time_exponent, Some(i), &|x, t| {
            self.grad(x, t).map(|g| g[i]).unwrap_or(0.0)
        })
    }

    fn lp_quadrature(
        &self,
        p: f64,
        horizon: f64,
        spec: &QuadratureSpec,
        time_exponent: f64,
        kink: Option<usize>,
        integrand: &(dyn Fn(&[f64], f64) -> f64 + Sync),
    ) -> Result<LpReport> {
        let grid = self.rescaled_grid(p, spec.spatial_panels, spec.spatial_order, kink);
        let coarse = self.rescaled_grid(
            p,
            spec.spatial_panels,
            spec.spatial_order.saturating_sub(2).max(2),
            kink,
        );
        let q_half = self.s.q() as f64 / 2.0;
        let slice = |g: &SpatialGrid, t: f64| -> f64 {
            let dil = self.s.dilation_diag(t.sqrt());
            let vals: Vec<f64> = g
                .points
                .par_chunks(g.dim)
                .zip(g.weights.par_iter())
                .map(|(y, w)| {
                    let mut buf = [0.0; 16];
                    let x = &mut buf[..y.len()];
                    for k in 0..y.len() {
                        x[k] = dil[k] * y[k];
                    }
                    w * integrand(x, t).abs().powf(p)
                })
                .collect();
            pairwise_sum(&vals) * t.powf(q_half)
        };

        let spatial_fine = slice(&grid, horizon);
        let spatial_coarse = slice(&coarse, horizon);
        let spatial_rel = if spatial_fine > 0.0 {
            (spatial_fine - spatial_coarse).abs() / spatial_fine
        } else {
            0.0
        };

        let time_rule = gauss_legendre(spec.time_order);
        let mut contributions: Vec<f64> = Vec::new();
        let mut upper = horizon;
        let mut divergent = false;
        let mut tail = 0.0;
        loop {
            let mut lower = upper * spec.time_ratio;
            let last = match spec.t_min {
                Some(tm) if lower <= tm => {
                    lower = tm;
                    true
                }
                _ => false,
            };
            let c: f64 = time_rule
                .mapped(lower, upper)
                .map(|(t, w)| w * slice(&grid, t))
                .sum();
            contributions.push(c);
            upper = lower;
            if last || upper <= tm_floor() {
                break;
            }
            if spec.t_min.is_none() && contributions.len() >= 3 {
                let k = contributions.len();
                let ratio = contributions[k - 1] / contributions[k - 2];
                if ratio >= 1.0 - 1e-9 {
                    divergent = true;
                    break;
                }
                let total: f64 = contributions.iter().sum();
                tail = contributions[k - 1] * ratio / (1.0 - ratio);
                if tail <= spec.tol * total {
                    break;
                }
            }
            if contributions.len() >= spec.max_time_panels {
                if spec.t_min.is_none() {
                    let total: f64 = contributions.iter().sum();
                    return Err(Error::GridTooCoarse {
                        estimate: tail / total,
                        tolerance: spec.tol,
                    });
                }
                break;
            }
        }
        let total = pairwise_sum(&contributions);
        let rel_err = if spec.t_min.is_none() && total > 0.0 {
            tail / total + spatial_rel
        } else {
            spatial_rel
        };
        if rel_err > spec.tol.max(1e-12) * 10.0 && !divergent {
            return Err(Error::GridTooCoarse {
                estimate: rel_err,
                tolerance: spec.tol,
            });
        }
        let value = if divergent {
            LpValue::Infinite
        } else {
            LpValue::Finite(total.powf(1.0 / p))
        };
        Ok(LpReport {
            p,
            horizon,
            value,
            method: LpMethod::Quadrature,
            time_exponent,
            t_min: spec.t_min,
            error_estimate: Some(rel_err / p),
        })
    }

    /// Tensor Gauss grid in the rescaled variable `y`, covering ±8 standard
    /// deviations of the Gaussian `exp(-p/4 ⟨C(1)^{-1} y, y⟩)` per axis.
    ///
    /// With `kink = Some(i)` the grid lives in whitened coordinates `w`,
    /// `y = S H w` with `C(1) = S Sᵀ` and `H` a reflection taking `e_1` to the
    /// direction of `S⁻¹ e_i`, so that the zero set of `(C(1)^{-1} y)_i` is
    /// the panel boundary `w_1 = 0`.
    fn rescaled_grid(&self, p: f64, panels: usize, order: usize, kink: Option<usize>) -> SpatialGrid {
        let n = self.n();
        let Some(i) = kink else {
            let sd: Vec<f64> = (0..n).map(|k| (2.0 * self.c1[(k, k)] / p).sqrt()).collect();
            return SpatialGrid::tensor(&sd, 8.0, panels, order);
        };
        let chol = self.c1.clone().cholesky().expect("C(1) is positive definite");
        let l = chol.l();
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        let v = l.solve_lower_triangular(&e).expect("triangular factor is invertible");
        let v = &v / v.norm();
        let mut u = v.clone();
        u[0] -= 1.0;
        let h = if u.norm() < 1e-14 {
            DMatrix::identity(n, n)
        } else {
            DMatrix::identity(n, n) - (&u * u.transpose()) * (2.0 / u.norm_squared())
        };
        let t = l * h;
        let jac = self.det_c1.sqrt();
        let mut grid = SpatialGrid::tensor(&vec![(2.0 / p).sqrt(); n], 8.0, panels, order);
        let mut y = vec![0.0; n];
        for (w, wt) in grid.points.chunks_mut(n).zip(grid.weights.iter_mut()) {
            for (r, yr) in y.iter_mut().enumerate() {
                *yr = (0..n).map(|c| t[(r, c)] * w[c]).sum();
            }
            w.copy_from_slice(&y);
            *wt *= jac;
        }
        grid
    }

    /// Right side of the Chapman–Kolmogorov identity
    /// `∫ K(x, t+s; y, s) K(y, s; y_0, 0) dy`, integrating over the Gaussian law
    /// of `y` with tensor Gauss–Hermite nodes of the given order.
    pub fn chapman_kolmogorov(
        &self,
        x: &[f64],
        t: f64,
        s: f64,
        y0: &[f64],
        order: usize,
    ) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::NonPositiveTime(t));
        }
        let n = self.n();
        let mean = self.s.flow(s, &DVector::from_column_slice(y0));
        let l = (self.s.covariance(s)? * 2.0)
            .cholesky()
            .ok_or(Error::SingularCovariance)?
            .l();
        let gh = crate::quadrature::gauss_hermite_normal(order);
        let e = self.s.exp_neg_tb(t);
        let xv = DVector::from_column_slice(x);
        let total = gh.len().pow(n as u32);
        let mut idx = vec![0usize; n];
        let mut terms = Vec::with_capacity(total);
        for _ in 0..total {
            let xi = DVector::from_iterator(n, idx.iter().map(|&k| gh.nodes[k]));
            let w: f64 = idx.iter().map(|&k| gh.weights[k]).product();
            let y = &mean + &l * xi;
            let z = &xv - &e * y;
            terms.push(w * self.eval(z.as_slice(), t));
            for a in (0..n).rev() {
                idx[a] += 1;
                if idx[a] < gh.len() {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(pairwise_sum(&terms))
    }

    /// `∫ K(x, t) dx` by tensor quadrature directly in `x` over ±8 standard
    /// deviations of the law `N(0, 2C(t))`.
    pub fn spatial_mass(&self, t: f64, panels: usize, order: usize) -> Result<f64> {
        let ct = self.s.covariance(t)?;
        let sd: Vec<f64> = (0..self.n()).map(|i| (2.0 * ct[(i, i)]).sqrt()).collect();
        let grid = SpatialGrid::tensor(&sd, 8.0, panels, order);
        let vals: Vec<f64> = grid
            .points
            .par_chunks(grid.dim)
            .zip(grid.weights.par_iter())
            .map(|(x, w)| w * self.eval(x, t))
            .collect();
        Ok(pairwise_sum(&vals))
    }
}

fn tm_floor() -> f64 {
    1e-40
}

fn check_exponent(p: f64, horizon: f64) -> Result<()> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidExponent(p));
    }
    if !(horizon > 0.0) {
        return Err(Error::NonPositiveTime(horizon));
    }
    Ok(())
}

/// Flattened tensor-product quadrature grid.
pub(crate) struct SpatialGrid {
    pub dim: usize,
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SpatialGrid {
    pub fn tensor(sd: &[f64], sigmas: f64, panels: usize, order: usize) -> Self {
        let base = gauss_legendre(order);
        let axes: Vec<Rule> = sd
            .iter()
            .map(|s| composite(&base, -sigmas * s, sigmas * s, panels))
            .collect();
        let dim = sd.len();
        let total: usize = axes.iter().map(|a| a.len()).product();
        let mut points = Vec::with_capacity(total * dim);
        let mut weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; dim];
        for _ in 0..total {
            let mut w = 1.0;
            for (k, a) in axes.iter().enumerate() {
                points.push(a.nodes[idx[k]]);
                w *= a.weights[idx[k]];
            }
            weights.push(w);
            for k in (0..dim).rev() {
                idx[k] += 1;
                if idx[k] < axes[k].len() {
                    break;
                }
                idx[k] = 0;
            }
        }
        SpatialGrid {
            dim,
            points,
            weights,
        }
    }
}

/// Resolution of the `L^p` quadrature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureSpec {
    /// Composite panels per rescaled spatial axis.
    pub spatial_panels: usize,
    /// Gauss–Legendre order per spatial panel.
    pub spatial_order: usize,
    /// Gauss–Legendre order per geometric time panel.
    pub time_order: usize,
    /// Ratio between consecutive geometric time panel endpoints.
    pub time_ratio: f64,
    /// Fixed lower time limit; `None` refines until the geometric tail is below `tol`.
    pub t_min: Option<f64>,
    pub tol: f64,
    pub max_time_panels: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            spatial_panels: 4,
            spatial_order: 12,
            time_order: 8,
            time_ratio: 0.5,
            t_min: None,
            tol: 1e-5,
            max_time_panels: 400,
        }
    }
}

/// A norm value or the divergence flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LpValue {
    Finite(f64),
    Infinite,
}

impl LpValue {
    pub fn finite(&self) -> Option<f64> {
        match self {
            LpValue::Finite(v) => Some(*v),
            LpValue::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, LpValue::Infinite)
    }
}

impl fmt::Display for LpValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LpValue::Finite(v) => write!(f, "{v}"),
            LpValue::Infinite => write!(f, "inf"),
        }
    }
}

impl Serialize for LpValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LpValue::Finite(v) => serializer.serialize_f64(*v),
            LpValue::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for LpValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(v) => Ok(LpValue::Finite(v)),
            Raw::Str(s) if s == "inf" => Ok(LpValue::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", found {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpMethod {
    ClosedForm,
    Quadrature,
}

/// `‖K‖_{p, ℝ^N × (0,T)}` (or over `(t_min, T)` when `t_min` is set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpReport {
    pub p: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub value: LpValue,
    pub method: LpMethod,
    /// Exponent of `t` in the time integrand after the spatial rescaling.
    pub time_exponent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_min: Option<f64>,
    /// Estimated relative error of `value`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_estimate: Option<f64>,
}

/// Evaluates `K` on a batch of points in parallel.
pub fn eval_many(ctx: &KernelContext, points: &[(DVector<f64>, f64)]) -> Vec<f64> {
    points
        .par_iter()
        .map(|(x, t)| ctx.eval(x.as_slice(), *t))
        .collect()
}
