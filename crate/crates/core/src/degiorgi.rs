//! De Giorgi machinery: truncations of the undercut, exponent bookkeeping,
//! the iteration lemma, and a level-set engine producing sup bounds for
//! discrete fields.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::field::{Centering, GridField};
use crate::lie_group::StructureMatrix;

/// Cut levels `k < l` of `Ψ_{k,l}` and `Φ_{k,l}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationParams {
    pub k: f64,
    pub l: f64,
}

impl TruncationParams {
    pub fn new(k: f64, l: f64) -> Result<Self> {
        if !(l > k) || !k.is_finite() || l.is_nan() {
            return Err(Error::InvalidTruncation { k, l });
        }
        Ok(TruncationParams { k, l })
    }
}

/// `0` below `k`, slope 2 on `(k, l)`, then flat at `2(l - k)`.
pub fn psi(p: TruncationParams, r: f64) -> f64 {
    if r <= p.k {
        0.0
    } else if r < p.l {
        2.0 * (r - p.k)
    } else {
        2.0 * (p.l - p.k)
    }
}

/// Antiderivative of [`psi`] vanishing at `k`.
pub fn phi(p: TruncationParams, r: f64) -> f64 {
    if r <= p.k {
        0.0
    } else if r < p.l {
        (r - p.k) * (r - p.k)
    } else {
        (p.l - p.k) * (2.0 * (r - p.k) - (p.l - p.k))
    }
}

/// `Ψ'`, taking the left derivative at the kinks.
pub fn psi_prime(p: TruncationParams, r: f64) -> f64 {
    if r <= p.k || r > p.l {
        0.0
    } else {
        2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub samples: usize,
    /// Largest relative violation of `Ψ² ≤ 4Φ`.
    pub psi_sq_vs_phi: f64,
    /// Largest relative violation of `uΨ ≤ 2Φ + kΨ`.
    pub u_psi: f64,
    /// Largest relative violation of `uΨ' ≤ Ψ + 2k`.
    pub u_psi_prime: f64,
    /// Most negative second difference of `Φ` (relative).
    pub convexity: f64,
    /// Largest `|Φ' - Ψ|` by centred differences away from the kinks.
    pub derivative_error: f64,
}

impl TruncationReport {
    pub fn passed(&self, tol: f64, derivative_tol: f64) -> bool {
        self.psi_sq_vs_phi <= tol
            && self.u_psi <= tol
            && self.u_psi_prime <= tol
            && self.convexity <= tol
            && self.derivative_error <= derivative_tol
    }
}

fn exact(v: f64) -> Result<BigRational> {
    BigRational::from_float(v).ok_or_else(|| Error::NonFinite("truncation sample".into()))
}

fn psi_exact(k: &BigRational, l: &BigRational, r: &BigRational) -> BigRational {
    let two = BigRational::from_integer(BigInt::from(2));
    if r <= k {
        BigRational::from_integer(BigInt::from(0))
    } else if r < l {
        two * (r - k)
    } else {
        two * (l - k)
    }
}

fn phi_exact(k: &BigRational, l: &BigRational, r: &BigRational) -> BigRational {
    let two = BigRational::from_integer(BigInt::from(2));
    if r <= k {
        BigRational::from_integer(BigInt::from(0))
    } else if r < l {
        (r - k) * (r - k)
    } else {
        (l - k) * (two * (r - k) - (l - k))
    }
}

fn psi_prime_exact(k: &BigRational, l: &BigRational, r: &BigRational) -> BigRational {
    BigRational::from_integer(BigInt::from(if r <= k || r > l { 0 } else { 2 }))
}

/// `max(0, (lhs - rhs) / max(|lhs|, |rhs|, 1))`, exact until the final rounding.
fn violation(lhs: &BigRational, rhs: &BigRational) -> f64 {
    if lhs <= rhs {
        return 0.0;
    }
    let one = BigRational::one();
    let scale = lhs.abs().max(rhs.abs()).max(one);
    ((lhs - rhs) / scale).to_f64().unwrap_or(f64::INFINITY)
}

/// Evaluates the three pointwise truncation inequalities and convexity of
/// `Φ` in exact rational arithmetic (the `f64` inputs are exact binary
/// rationals), and `Φ' = Ψ` by centred differences in `f64`, on `(k, l, r)`
/// triples with `k ≥ 0`.
pub fn truncation_inequality_suite(samples: &[(f64, f64, f64)]) -> Result<TruncationReport> {
    let mut rep = TruncationReport {
        samples: samples.len(),
        psi_sq_vs_phi: 0.0,
        u_psi: 0.0,
        u_psi_prime: 0.0,
        convexity: 0.0,
        derivative_error: 0.0,
    };
    let (two, four) = (
        BigRational::from_integer(BigInt::from(2)),
        BigRational::from_integer(BigInt::from(4)),
    );
    for &(k, l, r) in samples {
        if !r.is_finite() {
            return Err(Error::NonFinite("truncation sample".into()));
        }
        let p = TruncationParams::new(k, l)?;
        let (ke, le, re) = (exact(k)?, exact(l)?, exact(r)?);
        let ps = psi_exact(&ke, &le, &re);
        let ph = phi_exact(&ke, &le, &re);
        let pp = psi_prime_exact(&ke, &le, &re);
        rep.psi_sq_vs_phi = rep.psi_sq_vs_phi.max(violation(&(&ps * &ps), &(&four * &ph)));
        rep.u_psi = rep.u_psi.max(violation(&(&re * &ps), &(&two * &ph + &ke * &ps)));
        rep.u_psi_prime = rep.u_psi_prime.max(violation(&(&re * &pp), &(&ps + &two * &ke)));

        let h = 1e-3 * (l - k).min(1.0);
        let he = exact(h)?;
        let second = phi_exact(&ke, &le, &(&re + &he)) - &two * &ph + phi_exact(&ke, &le, &(&re - &he));
        rep.convexity = rep.convexity.max(violation(&-second, &BigRational::from_integer(BigInt::from(0))));
        let near_kink = (r - k).abs() < 2.0 * h || (r - l).abs() < 2.0 * h;
        if !near_kink {
            let d = (phi(p, r + h) - phi(p, r - h)) / (2.0 * h);
            let psi_r = psi(p, r);
            rep.derivative_error = rep.derivative_error.max((d - psi_r).abs() / psi_r.abs().max(1.0));
        }
    }
    Ok(rep)
}

/// Exact rational number, serialized as `"a/b"` (or `"a"`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Rational(pub BigRational);

impl Rational {
    pub fn new(n: i64, d: i64) -> Self {
        Rational(BigRational::new(BigInt::from(n), BigInt::from(d)))
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::NAN)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Rational {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BigRational::from_str(s.trim())
            .map(Rational)
            .map_err(|_| Error::Format(format!("not a rational: {s:?}")))
    }
}

impl Serialize for Rational {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Rational {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The critical exponents of the structure, exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentTable {
    #[serde(rename = "Q")]
    pub q: u64,
    pub p0: Rational,
    pub p1: Rational,
    pub q0: Rational,
}

impl ExponentTable {
    pub fn from_q(q: u64) -> Self {
        let q = q as i64;
        ExponentTable {
            q: q as u64,
            p0: Rational::new(q + 2, q),
            p1: Rational::new(q + 2, q + 1),
            q0: Rational::new(q + 2, 2),
        }
    }
}

pub fn exponent_table(s: &StructureMatrix) -> ExponentTable {
    ExponentTable::from_q(s.q() as u64)
}

/// Exponents entering the iteration inequality for given `Q`, `ε_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentBundle {
    #[serde(rename = "Q")]
    pub q: u64,
    pub p0: f64,
    pub q0: f64,
    pub p1: f64,
    pub eps0: f64,
    pub eps1: f64,
    pub p0_hat: f64,
    pub p1_hat: f64,
    pub theta: f64,
    pub q_prime: f64,
    pub q_dprime: f64,
}

impl ExponentBundle {
    /// `α = 1/q' - 1/p̂_0`.
    pub fn alpha(&self) -> f64 {
        1.0 / self.q_prime - 1.0 / self.p0_hat
    }

    /// Residuals of the two couplings between `p̂_0` and `p̂_1`.
    pub fn coupling_residuals(&self) -> (f64, f64) {
        let c1 = 1.0 / self.p1_hat + 1.0 / (self.p1 - self.eps1) - 1.0 - 1.0 / self.p0_hat;
        let c2 = self.p1_hat * 2.0 / (2.0 - self.p1_hat) - 2.0 * self.p0_hat;
        (c1, c2)
    }
}

pub const DEFAULT_THETA: f64 = 0.9;

pub fn solve_exponents(q: u64, eps0: f64) -> Result<ExponentBundle> {
    solve_exponents_with(q, eps0, DEFAULT_THETA)
}

/// `q' = (1 - θ) + θ p̂_0` for `θ ∈ (0, 1)`.
pub fn solve_exponents_with(q: u64, eps0: f64, theta: f64) -> Result<ExponentBundle> {
    if q == 0 {
        return Err(Error::ExponentOutOfRange("Q must be positive".into()));
    }
    let qf = q as f64;
    let p0 = (qf + 2.0) / qf;
    let p1 = (qf + 2.0) / (qf + 1.0);
    let q0 = (qf + 2.0) / 2.0;
    let max = p0 - 1.0;
    if !(eps0 > 0.0) || eps0 > max {
        return Err(Error::Eps0OutOfRange { eps0, max });
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidQPrime(format!("theta = {theta} must lie in (0, 1)")));
    }
    let p0_hat = p0 - eps0;
    let p1_hat = 2.0 * p0_hat / (1.0 + p0_hat);
    let eps1 = p1 - p1_hat;
    let q_prime = (1.0 - theta) + theta * p0_hat;
    let den = (2.0 * p0_hat - 1.0) * 2.0 * q_prime - 2.0 * p0_hat;
    let q_dprime = 2.0 * p0_hat * 2.0 * q_prime / den;
    let bundle = ExponentBundle {
        q,
        p0,
        q0,
        p1,
        eps0,
        eps1,
        p0_hat,
        p1_hat,
        theta,
        q_prime,
        q_dprime,
    };
    let (c1, c2) = bundle.coupling_residuals();
    if c1.abs() > 1e-12 || c2.abs() > 1e-12 {
        return Err(Error::InvalidQPrime(format!("couplings violated: {c1:e}, {c2:e}")));
    }
    if !(p1_hat > 1.0 && p1_hat < p1 && p1 < 2.0) {
        return Err(Error::InvalidQPrime(format!("p1_hat = {p1_hat} outside (1, {p1})")));
    }
    if !(q_prime > 1.0 && q_prime < p0_hat) {
        return Err(Error::InvalidQPrime(format!("q' = {q_prime} outside (1, {p0_hat})")));
    }
    if !(den > 0.0) || !(q_dprime > 0.0) || !q_dprime.is_finite() {
        return Err(Error::InvalidQPrime(format!("q'' = {q_dprime} is not positive")));
    }
    Ok(bundle)
}

/// `q̃`, possibly infinite.
#[derive(Debug, Clone, PartialEq)]
pub enum QTilde {
    Finite(BigRational),
    Infinite,
}

impl QTilde {
    pub fn integer(v: i64) -> Self {
        QTilde::Finite(BigRational::from_integer(BigInt::from(v)))
    }
}

/// A bootstrap exponent; infinite once the recursion's denominator
/// vanishes or turns negative.
#[derive(Debug, Clone, PartialEq)]
pub enum Rho {
    Finite(BigRational),
    Infinite,
}

impl Rho {
    pub fn to_f64(&self) -> f64 {
        match self {
            Rho::Finite(r) => r.to_f64().unwrap_or(f64::NAN),
            Rho::Infinite => f64::INFINITY,
        }
    }
}

impl Serialize for Rho {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Rho::Finite(r) => s.serialize_str(&r.to_string()),
            Rho::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Rho {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "inf" {
            return Ok(Rho::Infinite);
        }
        BigRational::from_str(&s)
            .map(Rho::Finite)
            .map_err(|_| serde::de::Error::custom(format!("not a rational: {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSchedule {
    pub rho: Vec<Rho>,
    pub tau: usize,
    /// Lower bound on consecutive ratios, `None` when it degenerates.
    pub ratio_bound: Option<f64>,
}

/// `ρ_0 = 2`, `ρ_l = ρ_{l-1} q̃ (Q+2) / ((ρ_{l-1} + q̃)(Q+2) - 2ρ_{l-1} q̃)`
/// until `ρ_τ ≥ 2p_0`.
pub fn bootstrap_exponents(q: u64, q_tilde: &QTilde) -> Result<BootstrapSchedule> {
    if q == 0 {
        return Err(Error::ExponentOutOfRange("Q must be positive".into()));
    }
    let big = |v: i64| BigRational::from_integer(BigInt::from(v));
    let qq = big(q as i64 + 2);
    let q0 = qq.clone() / big(2);
    let two_p0 = big(2) * qq.clone() / big(q as i64);
    if let QTilde::Finite(qt) = q_tilde {
        if *qt <= q0 {
            return Err(Error::QTildeTooSmall {
                q_tilde: qt.to_f64().unwrap_or(f64::NAN),
                q0: q0.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    // 1/q̃ - 1/q0
    let gap = match q_tilde {
        QTilde::Finite(qt) => qt.recip() - q0.recip(),
        QTilde::Infinite => -q0.recip(),
    };
    let ratio_den = big(2) * gap + BigRational::one();
    let ratio_bound = ratio_den.is_positive().then(|| ratio_den.recip());

    let mut rho = vec![Rho::Finite(big(2))];
    let mut current = big(2);
    for _ in 0..100_000 {
        if current >= two_p0 {
            break;
        }
        // divide numerator and denominator by q̃ so that q̃ = ∞ is the limit
        let (num, den) = match q_tilde {
            QTilde::Finite(qt) => (
                current.clone() * qq.clone(),
                (current.clone() / qt.clone() + BigRational::one()) * qq.clone() - big(2) * current.clone(),
            ),
            QTilde::Infinite => (current.clone() * qq.clone(), qq.clone() - big(2) * current.clone()),
        };
        if !den.is_positive() {
            rho.push(Rho::Infinite);
            break;
        }
        let next = num / den;
        if next <= current {
            return Err(Error::ExponentOutOfRange(format!("bootstrap not increasing at {next}")));
        }
        if let Some(b) = &ratio_bound {
            if next.clone() / current.clone() < *b {
                return Err(Error::ExponentOutOfRange(format!("ratio bound violated at {next}")));
            }
        }
        current = next.clone();
        rho.push(Rho::Finite(next));
    }
    let done = match rho.last() {
        Some(Rho::Infinite) => true,
        Some(Rho::Finite(r)) => *r >= two_p0,
        None => false,
    };
    if !done {
        return Err(Error::ExponentOutOfRange("bootstrap did not reach 2 p0".into()));
    }
    let tau = rho.len() - 1;
    Ok(BootstrapSchedule {
        rho,
        tau,
        ratio_bound: ratio_bound.map(|b| b.to_f64().unwrap_or(f64::NAN)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationLemmaReport {
    pub gamma: f64,
    /// `C Y_0^α γ ≤ 1`.
    pub criterion: bool,
    pub trajectory: Vec<f64>,
}

impl IterationLemmaReport {
    pub fn converges(&self) -> bool {
        self.criterion
    }
}

/// Runs the extremal recursion `Y_{n+1} = C bⁿ Y_n^{1+α}` for `n_max` steps
/// (stopping early on overflow).
pub fn iteration_lemma(c: f64, b: f64, alpha: f64, y0: f64, n_max: usize) -> Result<IterationLemmaReport> {
    if !(c > 0.0) || !(b > 1.0) || !(alpha > 0.0) || !(y0 >= 0.0) || !c.is_finite() || !b.is_finite() || !y0.is_finite() {
        return Err(Error::BadParameters(format!("C = {c}, b = {b}, alpha = {alpha}, Y0 = {y0}")));
    }
    let gamma = b.powf(1.0 / alpha);
    let criterion = c * y0.powf(alpha) * gamma <= 1.0;
    let mut trajectory = Vec::with_capacity(n_max + 1);
    trajectory.push(y0);
    let mut y = y0;
    for n in 0..n_max {
        y = c * b.powi(n as i32) * y.powf(1.0 + alpha);
        trajectory.push(y);
        if !y.is_finite() {
            break;
        }
    }
    Ok(IterationLemmaReport {
        gamma,
        criterion,
        trajectory,
    })
}

/// `(u - k)_+` nodewise.
pub fn undercut(u: &GridField, k: f64) -> GridField {
    u.undercut(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelMode {
    /// `k_n = M + k - k/2ⁿ`.
    L2ToLinf,
    /// `k_n = h(2 - 2⁻ⁿ)` with `h = σ max{M, 1}`.
    DataBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelSpec {
    pub mode: LevelMode,
    #[serde(default = "default_subintervals")]
    pub subintervals: usize,
    #[serde(default = "default_doublings")]
    pub max_doublings: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
}

fn default_subintervals() -> usize {
    4
}

fn default_doublings() -> usize {
    40
}

fn default_levels() -> usize {
    64
}

impl Default for LevelSpec {
    fn default() -> Self {
        LevelSpec {
            mode: LevelMode::L2ToLinf,
            subintervals: 4,
            max_doublings: 40,
            levels: 64,
        }
    }
}

/// One De Giorgi sequence at the certified level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub schedule: Vec<f64>,
    pub measures: Vec<f64>,
    pub energies: Vec<f64>,
    pub fitted_gamma: Option<f64>,
    pub alpha: f64,
    pub converged: bool,
}

/// The smallness condition evaluated with the fitted constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Smallness {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubintervalCertificate {
    pub t_lo: f64,
    pub t_hi: f64,
    pub m_in: f64,
    /// `‖(u - M_in)_+‖_2` on the slab.
    pub excess_l2: f64,
    /// Certified trial level (`k` or `h`); absent when the undercut is empty.
    pub level: Option<f64>,
    pub trials: usize,
    pub bound: f64,
    pub measured_sup: f64,
    pub state: Option<IterationState>,
    pub smallness: Option<Smallness>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCertificate {
    pub mode: LevelMode,
    #[serde(rename = "M")]
    pub m: f64,
    pub bound: f64,
    pub measured_sup: f64,
    pub alpha: f64,
    pub q_prime: f64,
    pub p0_hat: f64,
    pub subintervals: Vec<SubintervalCertificate>,
}

impl LevelCertificate {
    /// Columns `subinterval,n,k_n,measure,energy`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "subinterval,n,k_n,measure,energy")?;
        for (j, sub) in self.subintervals.iter().enumerate() {
            if let Some(st) = &sub.state {
                for n in 0..st.schedule.len() {
                    writeln!(
                        out,
                        "{j},{n},{:e},{:e},{:e}",
                        st.schedule[n], st.measures[n], st.energies[n]
                    )?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }
}

struct Slab {
    values: Vec<f64>,
    weights: Vec<f64>,
    w_min: f64,
}

impl Slab {
    fn energy(&self, k: f64) -> f64 {
        self.values
            .par_iter()
            .zip(&self.weights)
            .map(|(&v, &w)| {
                let d = (v - k).max(0.0);
                w * d * d
            })
            .sum()
    }

    fn measure(&self, k: f64) -> f64 {
        self.values
            .par_iter()
            .zip(&self.weights)
            .map(|(&v, &w)| if v > k { w } else { 0.0 })
            .sum()
    }

    fn sup(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Below one cell times the smallest positive level.
    fn negligible(&self, y: f64) -> bool {
        y < self.w_min * f64::MIN_POSITIVE
    }
}

fn slabs(u: &GridField, parts: usize) -> Vec<(f64, f64, Slab)> {
    let d = u.dim();
    let nt = u.shape()[d];
    let parts = parts.min(nt).max(1);
    let (t0, t1) = u.t_range();
    let times = u.axis_coords(d);
    let mut groups: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); parts];
    for k in 0..u.len() {
        let it = k % nt;
        let j = it * parts / nt;
        groups[j].0.push(u.values()[k]);
        groups[j].1.push(u.weight(k));
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(j, (values, weights))| {
            let first = (j * nt).div_ceil(parts);
            let last = ((j + 1) * nt).div_ceil(parts) - 1;
            let (lo, hi) = match u.centering() {
                Centering::Cell => {
                    let dt = (t1 - t0) / nt as f64;
                    (t0 + first as f64 * dt, t0 + (last + 1) as f64 * dt)
                }
                Centering::Vertex => (times[first], times[last]),
            };
            let w_min = weights.iter().copied().filter(|&w| w > 0.0).fold(f64::INFINITY, f64::min);
            (lo, hi, Slab { values, weights, w_min })
        })
        .collect()
}

struct Chain {
    state: IterationState,
    terminated: bool,
}

fn build_chain(slab: &Slab, levels: &[f64], alpha: f64) -> Chain {
    let mut schedule = Vec::new();
    let mut measures = Vec::new();
    let mut energies = Vec::new();
    let mut terminated = false;
    for &k in levels {
        if let Some(&prev) = schedule.last() {
            if !(k > prev) {
                break;
            }
        }
        let y = slab.energy(k);
        schedule.push(k);
        measures.push(slab.measure(k));
        energies.push(y);
        if slab.negligible(y) {
            terminated = true;
            break;
        }
    }
    Chain {
        state: IterationState {
            schedule,
            measures,
            energies,
            fitted_gamma: None,
            alpha,
            converged: terminated,
        },
        terminated,
    }
}

fn ladder_top_terminates(slab: &Slab, top: f64) -> bool {
    slab.negligible(slab.energy(top))
}

/// Produces a certified bound `sup u ≤ bound` by the level-set iteration on
/// `parts` time slabs, propagating `M` forward slab by slab.
///
/// A trial level is accepted once its Chebyshev chain empirically terminates
/// (`Y_n` below the grid quantum). The fitted `γ̂` and the smallness condition
/// are reported alongside.
///
/// `data_nodes`, when given, are flat indices carrying boundary or initial
/// data; `M` must dominate `u` there.
pub fn run_level_iteration(
    u: &GridField,
    m: f64,
    bundle: &ExponentBundle,
    spec: &LevelSpec,
    data_nodes: Option<&[usize]>,
) -> Result<LevelCertificate> {
    if !m.is_finite() {
        return Err(Error::InvalidProblem(format!("M = {m} must be finite")));
    }
    if spec.subintervals == 0 || spec.levels == 0 {
        return Err(Error::InvalidProblem("subintervals and levels must be positive".into()));
    }
    if let Some(nodes) = data_nodes {
        let slack = 1e-12 * m.abs().max(1.0);
        for &k in nodes {
            let v = *u
                .values()
                .get(k)
                .ok_or_else(|| Error::ShapeMismatch(format!("data node {k} outside the field")))?;
            if v > m + slack {
                let (x, t) = u.node(k);
                return Err(Error::InvalidProblem(format!(
                    "M = {m} is below the data value {v} at x = {x:?}, t = {t}"
                )));
            }
        }
    }
    if u.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::ScheduleStall("field has non-finite values".into()));
    }
    let alpha = bundle.alpha();
    let p0h = bundle.p0_hat;
    let qp = bundle.q_prime;
    let mut m_j = m;
    let mut subs = Vec::new();
    for (t_lo, t_hi, slab) in slabs(u, spec.subintervals) {
        let measured_sup = slab.sup();
        let excess_l2 = slab.energy(m_j).sqrt();
        if slab.negligible(slab.energy(m_j)) {
            subs.push(SubintervalCertificate {
                t_lo,
                t_hi,
                m_in: m_j,
                excess_l2,
                level: None,
                trials: 0,
                bound: m_j,
                measured_sup,
                state: None,
                smallness: None,
            });
            continue;
        }
        let base = match spec.mode {
            LevelMode::L2ToLinf => m_j.max(1.0),
            LevelMode::DataBound => 1.0,
        };
        let scale = m_j.max(1.0);
        let mut accepted = None;
        for trial in 0..spec.max_doublings {
            let level = base * 2f64.powi(trial as i32);
            let levels: Vec<f64> = (0..spec.levels)
                .map(|n| {
                    let half = 0.5f64.powi(n as i32);
                    match spec.mode {
                        LevelMode::L2ToLinf => m_j + level - level * half,
                        LevelMode::DataBound => level * scale * (2.0 - half),
                    }
                })
                .collect();
            let top = levels.iter().copied().fold(m_j, f64::max);
            let limit = match spec.mode {
                LevelMode::L2ToLinf => m_j + level,
                LevelMode::DataBound => 2.0 * level * scale,
            };
            if !ladder_top_terminates(&slab, top) {
                continue;
            }
            let chain = build_chain(&slab, &levels, alpha);
            if chain.terminated {
                accepted = Some((trial + 1, level, limit, chain.state));
                break;
            }
        }
        let Some((trials, level, bound, mut state)) = accepted else {
            return Err(Error::ScheduleStall(format!(
                "no trial level among {} doublings from {base} terminated on t in [{t_lo}, {t_hi}] (sup = {measured_sup}, M = {m_j})",
                spec.max_doublings
            )));
        };
        for w in state.energies.windows(2) {
            if w[1] > w[0] {
                return Err(Error::ScheduleStall(format!("Y_n increased from {} to {}", w[0], w[1])));
            }
        }
        let smallness;
        match spec.mode {
            LevelMode::L2ToLinf => {
                let mut g: Option<f64> = None;
                for n in 0..state.energies.len().saturating_sub(1) {
                    let (y, y1) = (state.energies[n], state.energies[n + 1]);
                    if y > 0.0 && y1 > 0.0 {
                        let pow2 = 2f64.powi(2 * n as i32 + 2);
                        let r = y1 / (level * level * (pow2 * y / (level * level)).powf(1.0 + alpha));
                        g = Some(g.map_or(r, |v: f64| v.max(r)));
                    }
                }
                state.fitted_gamma = g;
                smallness = g.map(|g| {
                    let lhs = level.powf(2.0 * alpha);
                    let rhs = g * 2f64.powf(2.0 / alpha + 2.0) * excess_l2.powf(2.0 * alpha);
                    Smallness { lhs, rhs, holds: lhs >= rhs }
                });
            }
            LevelMode::DataBound => {
                let mut g: Option<f64> = None;
                for n in 0..state.measures.len().saturating_sub(1) {
                    let (a, a1) = (state.measures[n], state.measures[n + 1]);
                    if a > 0.0 && a1 > 0.0 {
                        let r = a1.powf(1.0 / (2.0 * p0h)) / (2f64.powi(n as i32) * a.powf(1.0 / (2.0 * qp)));
                        g = Some(g.map_or(r * r, |v: f64| v.max(r * r)));
                    }
                }
                state.fitted_gamma = g;
                let e = p0h / qp - 1.0;
                let eta = 2f64.powf(2.0 * p0h / e);
                smallness = g.map(|g| {
                    let lhs = g.powf(p0h) * state.measures[0].powf(e) * eta;
                    Smallness {
                        lhs,
                        rhs: 1.0,
                        holds: lhs <= 1.0,
                    }
                });
            }
        }
        subs.push(SubintervalCertificate {
            t_lo,
            t_hi,
            m_in: m_j,
            excess_l2,
            level: Some(level),
            trials,
            bound,
            measured_sup,
            state: Some(state),
            smallness,
        });
        m_j = bound;
    }
    let bound = subs.iter().map(|s| s.bound).fold(m, f64::max);
    Ok(LevelCertificate {
        mode: spec.mode,
        m,
        bound,
        measured_sup: u.sup(),
        alpha,
        q_prime: qp,
        p0_hat: p0h,
        subintervals: subs,
    })
}
