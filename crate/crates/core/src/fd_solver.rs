//! Finite differences for
//!
//! ```text
//! D_t u - ⟨Bx, Du⟩ = D_i(a^{ij} D_j u + b^i u) + c^i D_i u + d u + g + D_i f^i
//! ```
//!
//! on `Ω = V × U` (boxes, `V ⊂ ℝ^{m_0}`, `U ⊂ ℝ^{N-m_0}`) over `(0, T)`.
//!
//! Vertex grid. Nodes on `∂V × Ū` and the initial slice carry Dirichlet data
//! (`Γ_P`). Nodes on `V × ∂U` are split by the sign of `⟨Bx, n⟩`: inflow
//! nodes (`Γ_K^+`, sign `≥ 0`) receive data, outflow nodes (`Γ_K^-`) are
//! computed. At corners of `U` the face with the larger `|⟨Bx, n⟩|` decides,
//! ties going to `Γ_K^+`.
//!
//! Each step is IMEX:
//!
//! 1. explicit: upwind transport `(Bx)_k D_k u` (forward difference where
//!    `(Bx)_k > 0`, backward where `< 0`), centred `c^i D_i u`, `D_i(b^i u)`,
//!    `D_i f^i`, plus `d u + g`, all at `t_n`;
//! 2. implicit backward Euler for `D_i(a^{ij} D_j u)` at `t_{n+1}`, with `a`
//!    taken at face midpoints. Lines are solved by the Thomas algorithm when
//!    `m_0 = 1`, otherwise by Jacobi-preconditioned conjugate gradients.
//!
//! With `b = c = d = f = g = 0`, a diagonal `a`, and `dt Σ_k |(Bx)_k| / h_k ≤ 1`,
//! the explicit step is a convex combination and the implicit matrix is an
//! M-matrix, so the scheme satisfies the discrete maximum principle exactly.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::field::{Centering, GridField};
use crate::lie_group::StructureMatrix;

pub type ScalarFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;

/// A coefficient or datum: a constant or a function of `(x, t)`.
#[derive(Clone)]
pub enum ScalarField {
    Const(f64),
    Fn(ScalarFn),
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarField::Const(v) => write!(f, "Const({v})"),
            ScalarField::Fn(_) => write!(f, "Fn(..)"),
        }
    }
}

impl ScalarField {
    pub fn zero() -> Self {
        ScalarField::Const(0.0)
    }

    pub fn func(f: impl Fn(&[f64], f64) -> f64 + Send + Sync + 'static) -> Self {
        ScalarField::Fn(Arc::new(f))
    }

    pub fn from_expr(e: Expr) -> Self {
        match e.as_constant() {
            Some(v) => ScalarField::Const(v),
            None => ScalarField::Fn(Arc::new(move |x, t| e.eval(x, t))),
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        match self {
            ScalarField::Const(v) => *v,
            ScalarField::Fn(f) => f(x, t),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ScalarField::Const(v) if *v == 0.0)
    }
}

/// `V × U` and the final time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductDomain {
    pub v_lo: Vec<f64>,
    pub v_hi: Vec<f64>,
    #[serde(default)]
    pub u_lo: Vec<f64>,
    #[serde(default)]
    pub u_hi: Vec<f64>,
    #[serde(rename = "T")]
    pub t_final: f64,
}

impl ProductDomain {
    pub fn new(v_lo: Vec<f64>, v_hi: Vec<f64>, u_lo: Vec<f64>, u_hi: Vec<f64>, t_final: f64) -> Self {
        ProductDomain {
            v_lo,
            v_hi,
            u_lo,
            u_hi,
            t_final,
        }
    }

    pub fn lo(&self) -> Vec<f64> {
        self.v_lo.iter().chain(&self.u_lo).copied().collect()
    }

    pub fn hi(&self) -> Vec<f64> {
        self.v_hi.iter().chain(&self.u_hi).copied().collect()
    }

    pub fn validate(&self, s: &StructureMatrix) -> Result<()> {
        let m0 = s.m0();
        if self.v_lo.len() != m0 || self.v_hi.len() != m0 {
            return Err(Error::InvalidProblem(format!("V must be a box in R^{m0}")));
        }
        let nu = s.n() - m0;
        if self.u_lo.len() != nu || self.u_hi.len() != nu {
            return Err(Error::InvalidProblem(format!("U must be a box in R^{nu}")));
        }
        for (a, b) in self.lo().iter().zip(self.hi()) {
            if !a.is_finite() || !b.is_finite() || !(b > *a) {
                return Err(Error::InvalidProblem(format!("empty or non-finite interval [{a}, {b}]")));
            }
        }
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(Error::InvalidProblem(format!("T = {} must be positive", self.t_final)));
        }
        Ok(())
    }
}

/// Coefficients of the operator. Indices run over the first `m_0` axes.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub a: Vec<Vec<ScalarField>>,
    pub b: Vec<ScalarField>,
    pub c: Vec<ScalarField>,
    pub d: ScalarField,
    pub g: ScalarField,
    pub f: Vec<ScalarField>,
    pub lambda: f64,
    pub big_lambda: f64,
}

impl CoefficientSet {
    /// `a = I`, every other coefficient zero, `λ = Λ = 1`.
    pub fn identity(m0: usize) -> Self {
        CoefficientSet {
            a: (0..m0)
                .map(|i| {
                    (0..m0)
                        .map(|j| ScalarField::Const(if i == j { 1.0 } else { 0.0 }))
                        .collect()
                })
                .collect(),
            b: vec![ScalarField::zero(); m0],
            c: vec![ScalarField::zero(); m0],
            d: ScalarField::zero(),
            g: ScalarField::zero(),
            f: vec![ScalarField::zero(); m0],
            lambda: 1.0,
            big_lambda: 1.0,
        }
    }

    fn validate(&self, m0: usize) -> Result<()> {
        if self.a.len() != m0 || self.a.iter().any(|r| r.len() != m0) {
            return Err(Error::InvalidProblem(format!("a must be {m0} x {m0}")));
        }
        for (name, v) in [("b", &self.b), ("c", &self.c), ("f", &self.f)] {
            if v.len() != m0 {
                return Err(Error::InvalidProblem(format!("{name} must have {m0} components")));
            }
        }
        if !(self.lambda > 0.0) || !(self.big_lambda >= self.lambda) {
            return Err(Error::InvalidProblem(format!(
                "need 0 < lambda <= Lambda, got {} and {}",
                self.lambda, self.big_lambda
            )));
        }
        Ok(())
    }

    fn diagonal_a(&self) -> bool {
        self.a
            .iter()
            .enumerate()
            .all(|(i, r)| r.iter().enumerate().all(|(j, v)| i == j || v.is_zero()))
    }

    /// (H1) at one point: symmetry, `λ|ξ|² ≤ a ξ·ξ`, `|a^{ij}| ≤ Λ`.
    pub fn audit_point(&self, x: &[f64], t: f64) -> Result<()> {
        let m0 = self.a.len();
        let fail = |reason: String| Error::EllipticityViolation {
            x: x.to_vec(),
            t,
            reason,
        };
        let mat = DMatrix::from_fn(m0, m0, |i, j| self.a[i][j].eval(x, t));
        if mat.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite coefficient".into()));
        }
        let slack = 1e-12;
        for i in 0..m0 {
            for j in 0..m0 {
                if (mat[(i, j)] - mat[(j, i)]).abs() > slack * mat[(i, j)].abs().max(1.0) {
                    return Err(fail(format!("a[{i}][{j}] != a[{j}][{i}]")));
                }
                if mat[(i, j)].abs() > self.big_lambda * (1.0 + slack) {
                    return Err(fail(format!("|a[{i}][{j}]| = {} exceeds Lambda = {}", mat[(i, j)].abs(), self.big_lambda)));
                }
            }
        }
        let min_eig = if m0 == 1 {
            mat[(0, 0)]
        } else {
            mat.symmetric_eigenvalues().min()
        };
        if min_eig < self.lambda * (1.0 - slack) {
            return Err(fail(format!("smallest eigenvalue {min_eig} below lambda = {}", self.lambda)));
        }
        Ok(())
    }
}

/// Dirichlet data on `Γ_P` and inflow data on `Γ_K^+`.
#[derive(Debug, Clone)]
pub struct BoundaryData {
    pub gamma_p: ScalarField,
    pub gamma_k_plus: ScalarField,
}

impl BoundaryData {
    pub fn uniform(v: f64) -> Self {
        BoundaryData {
            gamma_p: ScalarField::Const(v),
            gamma_k_plus: ScalarField::Const(v),
        }
    }
}

/// Grid resolution and solver knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdGrid {
    /// Intervals per spatial axis (V axes first).
    pub cells: Vec<usize>,
    pub dt: f64,
    #[serde(default = "default_cfl")]
    pub cfl_safety: f64,
    /// Time intervals kept in the output field; the step count is rounded
    /// up to a multiple of it. `None` keeps every step.
    #[serde(default)]
    pub output_steps: Option<usize>,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
}

fn default_cfl() -> f64 {
    1.0
}

fn default_cg_tol() -> f64 {
    1e-12
}

impl FdGrid {
    pub fn new(cells: Vec<usize>, dt: f64) -> Self {
        FdGrid {
            cells,
            dt,
            cfl_safety: 1.0,
            output_steps: None,
            cg_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Interior,
    /// `∂V × Ū`.
    Dirichlet,
    KPlus,
    KMinus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    KPlus,
    KMinus,
}

fn on_face(v: f64, bound: f64) -> bool {
    (v - bound).abs() <= 1e-12 * bound.abs().max(1.0)
}

/// Sign of `⟨Bx, n_x⟩` on `V̄ × ∂U`.
pub fn classify_boundary(dom: &ProductDomain, s: &StructureMatrix, x: &[f64]) -> Result<BoundaryKind> {
    let m0 = s.m0();
    if x.len() != s.n() {
        return Err(Error::ShapeMismatch(format!("point has {} coordinates, N = {}", x.len(), s.n())));
    }
    let inside = |v: f64, lo: f64, hi: f64| v >= lo - 1e-12 * lo.abs().max(1.0) && v <= hi + 1e-12 * hi.abs().max(1.0);
    for i in 0..m0 {
        if !inside(x[i], dom.v_lo[i], dom.v_hi[i]) {
            return Err(Error::NotOnKBoundary);
        }
    }
    for k in 0..s.n() - m0 {
        if !inside(x[m0 + k], dom.u_lo[k], dom.u_hi[k]) {
            return Err(Error::NotOnKBoundary);
        }
    }
    let bx = s.b() * DVector::from_column_slice(x);
    let mut best: Option<f64> = None;
    for k in 0..s.n() - m0 {
        let a = m0 + k;
        for (bound, sign) in [(dom.u_lo[k], -1.0), (dom.u_hi[k], 1.0)] {
            if on_face(x[a], bound) {
                let flux = sign * bx[a];
                best = Some(match best {
                    None => flux,
                    Some(b) if flux.abs() > b.abs() => flux,
                    Some(b) if flux.abs() == b.abs() => b.max(flux),
                    Some(b) => b,
                });
            }
        }
    }
    match best {
        None => Err(Error::NotOnKBoundary),
        Some(f) if f >= 0.0 => Ok(BoundaryKind::KPlus),
        Some(_) => Ok(BoundaryKind::KMinus),
    }
}

/// Output of [`solve`].
#[derive(Debug, Clone)]
pub struct FdSolution {
    /// Vertex field over `V̄ × Ū × [0, T]` at the stored time levels.
    pub field: GridField,
    /// Kind of every spatial node, row-major over the spatial axes.
    pub kinds: Vec<NodeKind>,
    /// `max(0, sup of the data on Γ_P ∪ Γ_K^+)` over every step.
    pub m: f64,
    pub dt: f64,
    pub steps: usize,
    /// Largest `dt Σ_k |(Bx)_k| / h_k` over computed nodes.
    pub cfl_rate: f64,
}

impl FdSolution {
    pub fn sup_interior(&self) -> f64 {
        self.sup_where(|k| k == NodeKind::Interior, false)
    }

    pub fn sup_k_minus(&self) -> f64 {
        self.sup_where(|k| k == NodeKind::KMinus, false)
    }

    /// `sup_{Ω_T} u` over every stored node, initial slice included.
    pub fn sup_all(&self) -> f64 {
        self.field.sup()
    }

    /// Flat field indices carrying data: `Γ_P`, `Γ_K^+` and the initial slice.
    pub fn data_nodes(&self) -> Vec<usize> {
        let nt = self.field.shape()[self.field.dim()];
        let mut out = Vec::new();
        for (p, &kind) in self.kinds.iter().enumerate() {
            if matches!(kind, NodeKind::Dirichlet | NodeKind::KPlus) {
                out.extend(p * nt..(p + 1) * nt);
            } else {
                out.push(p * nt);
            }
        }
        out
    }

    fn sup_where(&self, pred: impl Fn(NodeKind) -> bool, include_initial: bool) -> f64 {
        let nt = self.field.shape()[self.field.dim()];
        let mut m = f64::NEG_INFINITY;
        for (p, &kind) in self.kinds.iter().enumerate() {
            if !pred(kind) {
                continue;
            }
            let start = if include_initial { 0 } else { 1 };
            for it in start..nt {
                m = m.max(self.field.values()[p * nt + it]);
            }
        }
        m
    }
}

struct Layout {
    n: usize,
    m0: usize,
    nodes: Vec<usize>,
    strides: Vec<usize>,
    h: Vec<f64>,
    lo: Vec<f64>,
    total: usize,
}

impl Layout {
    fn coords(&self, p: usize, out: &mut [f64]) {
        let mut rem = p;
        for a in (0..self.n).rev() {
            let i = rem % self.nodes[a];
            rem /= self.nodes[a];
            out[a] = self.lo[a] + i as f64 * self.h[a];
        }
    }

    fn index(&self, p: usize, a: usize) -> usize {
        (p / self.strides[a]) % self.nodes[a]
    }
}

fn classify_nodes(lay: &Layout, dom: &ProductDomain, s: &StructureMatrix) -> Vec<NodeKind> {
    let mut x = vec![0.0; lay.n];
    (0..lay.total)
        .map(|p| {
            let on_v = (0..lay.m0).any(|a| {
                let i = lay.index(p, a);
                i == 0 || i + 1 == lay.nodes[a]
            });
            if on_v {
                return NodeKind::Dirichlet;
            }
            let on_u = (lay.m0..lay.n).any(|a| {
                let i = lay.index(p, a);
                i == 0 || i + 1 == lay.nodes[a]
            });
            if !on_u {
                return NodeKind::Interior;
            }
            lay.coords(p, &mut x);
            // snap exactly onto the faces so classification is grid-exact
            for a in lay.m0..lay.n {
                let i = lay.index(p, a);
                if i == 0 {
                    x[a] = dom.u_lo[a - lay.m0];
                } else if i + 1 == lay.nodes[a] {
                    x[a] = dom.u_hi[a - lay.m0];
                }
            }
            match classify_boundary(dom, s, &x) {
                Ok(BoundaryKind::KPlus) => NodeKind::KPlus,
                Ok(BoundaryKind::KMinus) => NodeKind::KMinus,
                Err(_) => unreachable!("node on a U face"),
            }
        })
        .collect()
}

/// Time-marches the problem and returns the stored levels.
pub fn solve(
    dom: &ProductDomain,
    s: &StructureMatrix,
    coeffs: &CoefficientSet,
    data: &BoundaryData,
    grid: &FdGrid,
) -> Result<FdSolution> {
    dom.validate(s)?;
    let n = s.n();
    let m0 = s.m0();
    coeffs.validate(m0)?;
    if grid.cells.len() != n || grid.cells.iter().any(|&c| c < 2) {
        return Err(Error::InvalidProblem(format!(
            "need at least 2 cells on each of the {n} axes, got {:?}",
            grid.cells
        )));
    }
    if !(grid.dt > 0.0) || !grid.dt.is_finite() {
        return Err(Error::InvalidProblem(format!("dt = {} must be positive", grid.dt)));
    }
    let lo = dom.lo();
    let hi = dom.hi();
    let nodes: Vec<usize> = grid.cells.iter().map(|c| c + 1).collect();
    let h: Vec<f64> = (0..n).map(|a| (hi[a] - lo[a]) / grid.cells[a] as f64).collect();
    let mut strides = vec![1usize; n];
    for a in (0..n.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * nodes[a + 1];
    }
    let total: usize = nodes.iter().product();
    let lay = Layout {
        n,
        m0,
        nodes: nodes.clone(),
        strides,
        h: h.clone(),
        lo: lo.clone(),
        total,
    };
    let kinds = classify_nodes(&lay, dom, s);

    let mut steps = (dom.t_final / grid.dt).ceil().max(1.0) as usize;
    let out_steps = match grid.output_steps {
        Some(k) if k >= 1 => {
            steps = steps.div_ceil(k) * k;
            k
        }
        Some(_) => return Err(Error::InvalidProblem("output_steps must be positive".into())),
        None => steps,
    };
    let stride_t = steps / out_steps;
    let dt = dom.t_final / steps as f64;

    // node coordinates and transport velocities
    let mut coords = vec![0.0; total * n];
    for p in 0..total {
        lay.coords(p, &mut coords[p * n..(p + 1) * n]);
    }
    let b_mat = s.b();
    let beta: Vec<f64> = (0..total)
        .flat_map(|p| {
            let x = &coords[p * n..(p + 1) * n];
            (0..n).map(move |k| (0..n).map(|j| b_mat[(k, j)] * x[j]).sum::<f64>())
        })
        .collect();
    let mut cfl_rate: f64 = 0.0;
    for p in 0..total {
        if matches!(kinds[p], NodeKind::Interior | NodeKind::KMinus) {
            let r: f64 = (m0..n).map(|k| beta[p * n + k].abs() / h[k]).sum();
            cfl_rate = cfl_rate.max(dt * r);
        }
    }
    if cfl_rate > grid.cfl_safety {
        return Err(Error::CflViolation {
            rate: cfl_rate,
            limit: grid.cfl_safety,
        });
    }

    let fixed_value = |p: usize, t: f64| -> Option<f64> {
        let x = &coords[p * n..(p + 1) * n];
        match kinds[p] {
            NodeKind::Dirichlet => Some(data.gamma_p.eval(x, t)),
            NodeKind::KPlus => Some(data.gamma_k_plus.eval(x, t)),
            _ => None,
        }
    };

    let mut u: Vec<f64> = (0..total)
        .map(|p| data.gamma_p.eval(&coords[p * n..(p + 1) * n], 0.0))
        .collect();
    let mut m_sup = u.iter().copied().fold(0.0f64, f64::max);
    let mut stored = Vec::with_capacity(total * (out_steps + 1));
    stored.extend_from_slice(&u);

    let explicit_free = coeffs.b.iter().all(ScalarField::is_zero)
        && coeffs.c.iter().all(ScalarField::is_zero)
        && coeffs.f.iter().all(ScalarField::is_zero)
        && coeffs.d.is_zero()
        && coeffs.g.is_zero();
    let diagonal = coeffs.diagonal_a();

    for step in 0..steps {
        let t0 = step as f64 * dt;
        let t1 = t0 + dt;
        // explicit part
        let star: Vec<f64> = (0..total)
            .into_par_iter()
            .map(|p| {
                if let Some(v) = fixed_value(p, t1) {
                    return v;
                }
                let x = &coords[p * n..(p + 1) * n];
                let up = u[p];
                let mut rate = 0.0;
                for k in m0..n {
                    let bk = beta[p * n + k];
                    let i = lay.index(p, k);
                    if bk > 0.0 && i + 1 < nodes[k] {
                        rate += bk * (u[p + lay.strides[k]] - up) / h[k];
                    } else if bk < 0.0 && i > 0 {
                        rate += bk * (up - u[p - lay.strides[k]]) / h[k];
                    }
                }
                if !explicit_free {
                    rate += lower_order(coeffs, &lay, &u, p, x, t0);
                }
                up + dt * rate
            })
            .collect();
        // implicit diffusion
        let mut next = if diagonal && m0 == 1 {
            thomas_lines(&lay, &kinds, coeffs, &coords, &star, dt, t1)?
        } else {
            cg_solve(&lay, &kinds, coeffs, &coords, &star, dt, t1, grid.cg_tol, diagonal)?
        };
        // fixed nodes carry their data exactly
        for p in 0..total {
            if let Some(v) = fixed_value(p, t1) {
                next[p] = v;
                m_sup = m_sup.max(v);
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverDivergence {
                iterations: step + 1,
                residual: f64::INFINITY,
            });
        }
        u = next;
        if (step + 1) % stride_t == 0 {
            stored.extend_from_slice(&u);
        }
    }

    // reorder to the field layout (time fastest)
    let nt = out_steps + 1;
    let mut values = vec![0.0; total * nt];
    for it in 0..nt {
        for p in 0..total {
            values[p * nt + it] = stored[it * total + p];
        }
    }
    let mut shape = nodes.clone();
    shape.push(nt);
    let field = GridField::new(lo, hi, (0.0, dom.t_final), shape, Centering::Vertex, values)?;
    Ok(FdSolution {
        field,
        kinds,
        m: m_sup,
        dt,
        steps,
        cfl_rate,
    })
}

fn lower_order(coeffs: &CoefficientSet, lay: &Layout, u: &[f64], p: usize, x: &[f64], t: f64) -> f64 {
    let mut shifted = x.to_vec();
    let mut rate = coeffs.d.eval(x, t) * u[p] + coeffs.g.eval(x, t);
    for i in 0..lay.m0 {
        let hi = lay.h[i];
        let sp = lay.strides[i];
        let (up, dn) = (u[p + sp], u[p - sp]);
        if !coeffs.c[i].is_zero() {
            rate += coeffs.c[i].eval(x, t) * (up - dn) / (2.0 * hi);
        }
        let need_b = !coeffs.b[i].is_zero();
        let need_f = !coeffs.f[i].is_zero();
        if need_b || need_f {
            shifted[i] = x[i] + hi;
            let (bp, fp) = (coeffs.b[i].eval(&shifted, t), coeffs.f[i].eval(&shifted, t));
            shifted[i] = x[i] - hi;
            let (bm, fm) = (coeffs.b[i].eval(&shifted, t), coeffs.f[i].eval(&shifted, t));
            shifted[i] = x[i];
            rate += (bp * up - bm * dn) / (2.0 * hi) + (fp - fm) / (2.0 * hi);
        }
    }
    rate
}

fn face_coefficient(coeffs: &CoefficientSet, i: usize, j: usize, x: &mut [f64], axis: usize, offset: f64, t: f64) -> Result<f64> {
    let keep = x[axis];
    x[axis] = keep + offset;
    let audit = coeffs.audit_point(x, t);
    let v = coeffs.a[i][j].eval(x, t);
    x[axis] = keep;
    audit.map(|_| v)
}

fn thomas_lines(
    lay: &Layout,
    kinds: &[NodeKind],
    coeffs: &CoefficientSet,
    coords: &[f64],
    star: &[f64],
    dt: f64,
    t: f64,
) -> Result<Vec<f64>> {
    let n = lay.n;
    let len = lay.nodes[0];
    let stride = lay.strides[0];
    let h2 = lay.h[0] * lay.h[0];
    let half = 0.5 * lay.h[0];
    let line_count = lay.total / len;
    let lines: Vec<Result<Vec<(usize, f64)>>> = (0..line_count)
        .into_par_iter()
        .map(|line| {
            let base = line % stride;
            let mut lower = vec![0.0; len];
            let mut diag = vec![1.0; len];
            let mut upper = vec![0.0; len];
            let mut rhs = vec![0.0; len];
            let mut x = vec![0.0; n];
            for i in 0..len {
                let p = base + i * stride;
                rhs[i] = star[p];
                if matches!(kinds[p], NodeKind::Dirichlet | NodeKind::KPlus) {
                    continue;
                }
                x.copy_from_slice(&coords[p * n..(p + 1) * n]);
                let am = face_coefficient(coeffs, 0, 0, &mut x, 0, -half, t)?;
                let ap = face_coefficient(coeffs, 0, 0, &mut x, 0, half, t)?;
                let (rm, rp) = (dt * am / h2, dt * ap / h2);
                lower[i] = -rm;
                upper[i] = -rp;
                diag[i] = 1.0 + rm + rp;
            }
            // forward sweep
            let mut c = vec![0.0; len];
            let mut d = vec![0.0; len];
            c[0] = upper[0] / diag[0];
            d[0] = rhs[0] / diag[0];
            for i in 1..len {
                let m = diag[i] - lower[i] * c[i - 1];
                c[i] = upper[i] / m;
                d[i] = (rhs[i] - lower[i] * d[i - 1]) / m;
            }
            let mut sol = vec![0.0; len];
            sol[len - 1] = d[len - 1];
            for i in (0..len - 1).rev() {
                sol[i] = d[i] - c[i] * sol[i + 1];
            }
            Ok((0..len).map(|i| (base + i * stride, sol[i])).collect())
        })
        .collect();
    let mut out = vec![0.0; lay.total];
    for line in lines {
        for (p, v) in line? {
            out[p] = v;
        }
    }
    Ok(out)
}

/// Sparse row: `(column, value)` pairs.
type Row = Vec<(usize, f64)>;

#[allow(clippy::too_many_arguments)]
fn cg_solve(
    lay: &Layout,
    kinds: &[NodeKind],
    coeffs: &CoefficientSet,
    coords: &[f64],
    star: &[f64],
    dt: f64,
    t: f64,
    tol: f64,
    diagonal: bool,
) -> Result<Vec<f64>> {
    let n = lay.n;
    let m0 = lay.m0;
    let fixed = |p: usize| matches!(kinds[p], NodeKind::Dirichlet | NodeKind::KPlus);
    // assemble I - dt A over unknown nodes; fixed neighbours move to the rhs
    let rows: Vec<Result<(Row, f64)>> = (0..lay.total)
        .into_par_iter()
        .map(|p| {
            if fixed(p) {
                return Ok((vec![(p, 1.0)], star[p]));
            }
            let mut x = coords[p * n..(p + 1) * n].to_vec();
            let mut entries: Vec<(usize, f64)> = vec![(p, 1.0)];
            let add = |q: usize, v: f64, entries: &mut Vec<(usize, f64)>| {
                if let Some(e) = entries.iter_mut().find(|e| e.0 == q) {
                    e.1 += v;
                } else {
                    entries.push((q, v));
                }
            };
            for i in 0..m0 {
                let hi = lay.h[i];
                let si = lay.strides[i];
                let am = face_coefficient(coeffs, i, i, &mut x, i, -0.5 * hi, t)?;
                let ap = face_coefficient(coeffs, i, i, &mut x, i, 0.5 * hi, t)?;
                let (rm, rp) = (dt * am / (hi * hi), dt * ap / (hi * hi));
                add(p, rm + rp, &mut entries);
                add(p - si, -rm, &mut entries);
                add(p + si, -rp, &mut entries);
                if diagonal {
                    continue;
                }
                for j in 0..m0 {
                    if j == i {
                        continue;
                    }
                    let hj = lay.h[j];
                    let sj = lay.strides[j];
                    let w = dt / (4.0 * hi * hj);
                    let a_plus = face_coefficient(coeffs, i, j, &mut x, i, hi, t)?;
                    let a_minus = face_coefficient(coeffs, i, j, &mut x, i, -hi, t)?;
                    add(p + si + sj, -w * a_plus, &mut entries);
                    add(p + si - sj, w * a_plus, &mut entries);
                    add(p - si + sj, w * a_minus, &mut entries);
                    add(p - si - sj, -w * a_minus, &mut entries);
                }
            }
            let mut rhs = star[p];
            let mut kept = Vec::with_capacity(entries.len());
            for (q, v) in entries {
                if q != p && fixed(q) {
                    rhs -= v * star[q];
                } else {
                    kept.push((q, v));
                }
            }
            Ok((kept, rhs))
        })
        .collect();
    let mut mat = Vec::with_capacity(lay.total);
    let mut b = Vec::with_capacity(lay.total);
    for r in rows {
        let (row, rhs) = r?;
        mat.push(row);
        b.push(rhs);
    }
    let diag: Vec<f64> = mat
        .iter()
        .enumerate()
        .map(|(p, row)| row.iter().find(|e| e.0 == p).map(|e| e.1).unwrap_or(1.0))
        .collect();
    let apply = |v: &[f64]| -> Vec<f64> {
        mat.par_iter()
            .map(|row| row.iter().map(|&(q, a)| a * v[q]).sum())
            .collect()
    };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let mut x: Vec<f64> = star.to_vec();
    let ax = apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
    let mut pdir = z.clone();
    let mut rz = dot(&r, &z);
    let bnorm = dot(&b, &b).sqrt().max(1e-300);
    let max_iter = 10 * lay.total + 100;
    for it in 0..max_iter {
        let rnorm = dot(&r, &r).sqrt();
        if rnorm <= tol * bnorm {
            return Ok(x);
        }
        let ap = apply(&pdir);
        let denom = dot(&pdir, &ap);
        if !(denom > 0.0) {
            return Err(Error::SolverDivergence {
                iterations: it,
                residual: rnorm / bnorm,
            });
        }
        let alpha = rz / denom;
        for k in 0..x.len() {
            x[k] += alpha * pdir[k];
            r[k] -= alpha * ap[k];
        }
        z = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..x.len() {
            pdir[k] = z[k] + beta * pdir[k];
        }
    }
    Err(Error::SolverDivergence {
        iterations: max_iter,
        residual: dot(&r, &r).sqrt() / bnorm,
    })
}

/// `max |u|` over the grid.
pub fn sup_norm(u: &GridField) -> f64 {
    u.sup_norm()
}

/// `|A_k| = |{u > k}|` in the grid measure.
pub fn level_measure(u: &GridField, k: f64) -> f64 {
    u.level_measure(k)
}

/// `‖(u - M)_+‖_2` in the grid measure.
pub fn undercut_energy(u: &GridField, m: f64) -> f64 {
    u.undercut_energy(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxPrincipleReport {
    pub sup_interior: f64,
    pub sup_gamma_k_minus: f64,
    #[serde(rename = "M")]
    pub m: f64,
    /// `M - max(sup_interior, sup_gamma_k_minus)`; negative when exceeded.
    pub margin: f64,
}

impl MaxPrincipleReport {
    pub fn excess(&self) -> f64 {
        (-self.margin).max(0.0)
    }
}

/// Checks `sup_{Ω_T} u, sup_{Γ_K^-} u ≤ M`. Refuses to run unless, at every
/// node and step, `d ≤ 0`, `b` is spatially constant, and `g = f = 0`.
pub fn check_max_principle(sol: &FdSolution, coeffs: &CoefficientSet) -> Result<MaxPrincipleReport> {
    let field = &sol.field;
    let n = field.dim();
    let nodes: usize = field.shape()[..n].iter().product();
    let times: Vec<f64> = (0..=sol.steps).map(|k| k as f64 * sol.dt).collect();
    let mut coords = Vec::with_capacity(nodes);
    let nt = field.shape()[n];
    for p in 0..nodes {
        coords.push(field.node(p * nt).0);
    }
    for &t in &times {
        let b_ref: Vec<f64> = coeffs.b.iter().map(|b| b.eval(&coords[0], t)).collect();
        for x in &coords {
            let d = coeffs.d.eval(x, t);
            if d > 0.0 {
                return Err(Error::HypothesisViolation(format!("d = {d} > 0 at x = {x:?}, t = {t}")));
            }
            let g = coeffs.g.eval(x, t);
            if g != 0.0 {
                return Err(Error::HypothesisViolation(format!("g = {g} != 0 at x = {x:?}, t = {t}")));
            }
            for (i, f) in coeffs.f.iter().enumerate() {
                let v = f.eval(x, t);
                if v != 0.0 {
                    return Err(Error::HypothesisViolation(format!("f^{} = {v} != 0 at x = {x:?}, t = {t}", i + 1)));
                }
            }
            for (i, b) in coeffs.b.iter().enumerate() {
                let v = b.eval(x, t);
                if (v - b_ref[i]).abs() > 1e-14 * b_ref[i].abs().max(1.0) {
                    return Err(Error::HypothesisViolation(format!(
                        "b^{} varies in space at t = {t} ({v} vs {})",
                        i + 1,
                        b_ref[i]
                    )));
                }
            }
        }
    }
    let sup_interior = sol.sup_interior();
    let sup_gamma_k_minus = sol.sup_k_minus();
    let worst = sup_interior.max(sup_gamma_k_minus);
    Ok(MaxPrincipleReport {
        sup_interior,
        sup_gamma_k_minus,
        m: sol.m,
        margin: sol.m - worst,
    })
}

/// Serializable problem description: coefficients and data as expressions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    /// `m_0 × m_0`; defaults to the identity.
    #[serde(default)]
    pub a: Option<Vec<Vec<String>>>,
    #[serde(default)]
    pub b: Option<Vec<String>>,
    #[serde(default)]
    pub c: Option<Vec<String>>,
    #[serde(default)]
    pub d: Option<String>,
    #[serde(default)]
    pub g: Option<String>,
    #[serde(default)]
    pub f: Option<Vec<String>>,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(rename = "Lambda", default = "one")]
    pub big_lambda: f64,
}

fn one() -> f64 {
    1.0
}

impl CoefficientSpec {
    pub fn compile(&self, n: usize, m0: usize) -> Result<CoefficientSet> {
        let mut set = CoefficientSet::identity(m0);
        let parse = |src: &str| Expr::parse(src, n).map(ScalarField::from_expr);
        let vector = |v: &Option<Vec<String>>, name: &str| -> Result<Option<Vec<ScalarField>>> {
            match v {
                None => Ok(None),
                Some(v) if v.len() != m0 => Err(Error::InvalidProblem(format!("{name} needs {m0} entries"))),
                Some(v) => v.iter().map(|s| parse(s)).collect::<Result<Vec<_>>>().map(Some),
            }
        };
        if let Some(a) = &self.a {
            if a.len() != m0 || a.iter().any(|r| r.len() != m0) {
                return Err(Error::InvalidProblem(format!("a must be {m0} x {m0}")));
            }
            set.a = a
                .iter()
                .map(|r| r.iter().map(|s| parse(s)).collect::<Result<Vec<_>>>())
                .collect::<Result<_>>()?;
        }
        if let Some(v) = vector(&self.b, "b")? {
            set.b = v;
        }
        if let Some(v) = vector(&self.c, "c")? {
            set.c = v;
        }
        if let Some(v) = vector(&self.f, "f")? {
            set.f = v;
        }
        if let Some(d) = &self.d {
            set.d = parse(d)?;
        }
        if let Some(g) = &self.g {
            set.g = parse(g)?;
        }
        set.lambda = self.lambda;
        set.big_lambda = self.big_lambda;
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub gamma_p: String,
    /// Defaults to `gamma_p`.
    #[serde(default)]
    pub gamma_k_plus: Option<String>,
}

impl BoundarySpec {
    pub fn compile(&self, n: usize) -> Result<BoundaryData> {
        let p = ScalarField::from_expr(Expr::parse(&self.gamma_p, n)?);
        let k = match &self.gamma_k_plus {
            Some(src) => ScalarField::from_expr(Expr::parse(src, n)?),
            None => p.clone(),
        };
        Ok(BoundaryData {
            gamma_p: p,
            gamma_k_plus: k,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie_group::{validate_structure, BlockSpec};
    use std::f64::consts::PI;

    fn kinetic() -> StructureMatrix {
        validate_structure(&BlockSpec::kinetic(1)).unwrap()
    }

    fn kinetic_domain() -> ProductDomain {
        ProductDomain::new(vec![-1.0], vec![1.0], vec![-1.0], vec![1.0], 0.5)
    }

    #[test]
    fn boundary_classification_examples() {
        let s = kinetic();
        let dom = kinetic_domain();
        assert_eq!(classify_boundary(&dom, &s, &[0.5, 1.0]).unwrap(), BoundaryKind::KPlus);
        assert_eq!(classify_boundary(&dom, &s, &[-0.5, 1.0]).unwrap(), BoundaryKind::KMinus);
        assert_eq!(classify_boundary(&dom, &s, &[-0.5, -1.0]).unwrap(), BoundaryKind::KPlus);
        assert_eq!(classify_boundary(&dom, &s, &[0.5, -1.0]).unwrap(), BoundaryKind::KMinus);
        assert_eq!(classify_boundary(&dom, &s, &[0.0, 1.0]).unwrap(), BoundaryKind::KPlus);
        assert_eq!(classify_boundary(&dom, &s, &[0.0, -1.0]).unwrap(), BoundaryKind::KPlus);
        assert!(matches!(classify_boundary(&dom, &s, &[0.0, 0.0]), Err(Error::NotOnKBoundary)));
        assert!(matches!(classify_boundary(&dom, &s, &[2.0, 1.0]), Err(Error::NotOnKBoundary)));
    }

    #[test]
    fn classification_partitions_k_boundary() {
        let s = validate_structure(&BlockSpec::scalar_chain(2)).unwrap();
        let dom = ProductDomain::new(vec![-1.0], vec![1.0], vec![-1.0, -2.0], vec![1.0, 0.5], 1.0);
        let sol = solve(
            &dom,
            &s,
            &CoefficientSet::identity(1),
            &BoundaryData::uniform(0.0),
            &FdGrid::new(vec![4, 4, 4], 0.05),
        )
        .unwrap();
        let counts = |k: NodeKind| sol.kinds.iter().filter(|&&v| v == k).count();
        // every node on V × ∂U (V-interior) is exactly one of K+ / K-
        let on_k = 3 * (5 * 5 - 3 * 3);
        assert_eq!(counts(NodeKind::KPlus) + counts(NodeKind::KMinus), on_k);
        assert_eq!(counts(NodeKind::Dirichlet), 2 * 25);
        assert_eq!(counts(NodeKind::Interior), 3 * 9);
    }

    #[test]
    fn constants_are_reproduced() {
        let s = kinetic();
        let sol = solve(
            &kinetic_domain(),
            &s,
            &CoefficientSet::identity(1),
            &BoundaryData::uniform(1.0),
            &FdGrid::new(vec![16, 16], 0.02),
        )
        .unwrap();
        assert!(sol.field.values().iter().all(|&v| (v - 1.0).abs() < 1e-14));
        assert_eq!(sol.m, 1.0);
    }

    #[test]
    fn cfl_and_audit_errors() {
        let s = kinetic();
        let r = solve(
            &kinetic_domain(),
            &s,
            &CoefficientSet::identity(1),
            &BoundaryData::uniform(1.0),
            &FdGrid::new(vec![16, 16], 0.5),
        );
        assert!(matches!(r, Err(Error::CflViolation { .. })));
        let mut c = CoefficientSet::identity(1);
        c.a[0][0] = ScalarField::func(|x, _| if x[0] > 0.5 { 0.5 } else { 1.0 });
        let r = solve(&kinetic_domain(), &s, &c, &BoundaryData::uniform(1.0), &FdGrid::new(vec![16, 16], 0.02));
        assert!(matches!(r, Err(Error::EllipticityViolation { .. })));
    }

    fn manufactured(s: &StructureMatrix, dom: &ProductDomain, cells: usize, dt: f64) -> f64 {
        let exact = |x: &[f64], t: f64| (PI * x[0]).sin() * (1.0 + x[1]) * (-t).exp();
        let kinetic = s.kappa() > 0;
        let mut c = CoefficientSet::identity(s.m0());
        c.g = ScalarField::func(move |x, t| {
            let u = (PI * x[0]).sin() * (1.0 + x[1]) * (-t).exp();
            let mut g = -u + PI * PI * u;
            if kinetic {
                // -⟨Bx, Du⟩ = -x_1 D_2 u
                g -= x[0] * (PI * x[0]).sin() * (-t).exp();
            } else {
                // D_2² u = 0 for the parabolic case
            }
            g
        });
        let data = BoundaryData {
            gamma_p: ScalarField::func(exact),
            gamma_k_plus: ScalarField::func(exact),
        };
        let sol = solve(dom, s, &c, &data, &FdGrid::new(vec![cells; s.n()], dt)).unwrap();
        let f = &sol.field;
        (0..f.len())
            .map(|k| {
                let (x, t) = f.node(k);
                (f.values()[k] - exact(&x, t)).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn manufactured_solution_kinetic() {
        let s = kinetic();
        let dom = kinetic_domain();
        let errs: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|&c| manufactured(&s, &dom, c, 0.5 / c as f64))
            .collect();
        let order = (errs[1] / errs[2]).log2();
        assert!(order >= 1.0 - 0.05 && errs[2] < errs[1] && errs[1] < errs[0], "{errs:?}");
    }

    #[test]
    fn manufactured_solution_parabolic() {
        let s = validate_structure(&BlockSpec::parabolic(2)).unwrap();
        let dom = ProductDomain::new(vec![-1.0, -1.0], vec![1.0, 1.0], vec![], vec![], 0.25);
        let errs: Vec<f64> = [8, 16, 32]
            .iter()
            .map(|&c| {
                let h = 2.0 / c as f64;
                manufactured(&s, &dom, c, 0.25 * h * h)
            })
            .collect();
        let order = (errs[1] / errs[2]).log2();
        assert!(order >= 1.8, "{errs:?}");
    }

    #[test]
    fn hypothesis_gate() {
        let s = kinetic();
        let mut c = CoefficientSet::identity(1);
        c.d = ScalarField::Const(10.0);
        let sol = solve(&kinetic_domain(), &s, &c, &BoundaryData::uniform(1.0), &FdGrid::new(vec![8, 8], 0.05)).unwrap();
        assert!(matches!(check_max_principle(&sol, &c), Err(Error::HypothesisViolation(_))));
        let mut c = CoefficientSet::identity(1);
        c.d = ScalarField::Const(-1.0);
        let data = BoundaryData {
            gamma_p: ScalarField::func(|x, _| 0.5 + 0.5 * x[1]),
            gamma_k_plus: ScalarField::func(|x, _| 1.0 - x[0].abs()),
        };
        let sol = solve(&kinetic_domain(), &s, &c, &data, &FdGrid::new(vec![16, 16], 0.02)).unwrap();
        let r = check_max_principle(&sol, &c).unwrap();
        assert!(r.margin >= -1e-12, "{r:?}");
        assert!(r.m <= 1.0);
    }

    #[test]
    fn expression_specs_compile() {
        let spec: CoefficientSpec = serde_json::from_str(
            r#"{"a": [["1 + 0.5*sin(x1)"]], "d": "-1", "g": "x2*t", "lambda": 0.5, "Lambda": 1.5}"#,
        )
        .unwrap();
        let c = spec.compile(2, 1).unwrap();
        assert_eq!(c.a[0][0].eval(&[0.0, 0.0], 0.0), 1.0);
        assert!(matches!(c.d, ScalarField::Const(v) if v == -1.0));
        assert_eq!(c.g.eval(&[0.0, 2.0], 3.0), 6.0);
        assert!(serde_json::from_str::<CoefficientSpec>(r#"{"q": "1"}"#).is_err());
        let bad: CoefficientSpec = serde_json::from_str(r#"{"b": ["1", "2"]}"#).unwrap();
        assert!(bad.compile(2, 1).is_err());
    }
}
