//! The homogeneous Lie group attached to a block-nilpotent drift matrix.
//!
//! A [`BlockSpec`] lists the sub-diagonal blocks `B_1, …, B_κ` of the drift
//! matrix. Validation assembles the full `N × N` matrix `B`, the block
//! dimensions `m_0 ≥ m_1 ≥ … ≥ m_κ`, and the homogeneous dimension
//! `Q = Σ (2j + 1) m_j`. Because `B` is nilpotent (`B^{κ+1} = 0`), both the
//! flow `E(t) = e^{-tB}` and the covariance `C(t) = ∫_0^t E(s) A_0 E(s)ᵀ ds`
//! are finite polynomial expressions in `t` and are evaluated exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value threshold for the full-row-rank test on each block.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// User-facing description of the drift matrix: `m_0` and the blocks `B_j`
/// as row-major nested arrays (`B_j` has shape `m_j × m_{j-1}`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub m0: usize,
    pub blocks: Vec<Vec<Vec<f64>>>,
}

impl BlockSpec {
    /// The kinetic (Langevin) instance with velocity dimension `m`:
    /// `B_1 = I_m`, so `N = 2m` and `Q = 4m`.
    pub fn kinetic(m: usize) -> Self {
        let block = (0..m)
            .map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        BlockSpec {
            m0: m,
            blocks: vec![block],
        }
    }

    /// Uniformly parabolic case: no drift, `m_0 = N`.
    pub fn parabolic(n: usize) -> Self {
        BlockSpec {
            m0: n,
            blocks: Vec::new(),
        }
    }

    /// A chain of `levels` scalar blocks, `N = levels + 1`, every `B_j = [1]`.
    pub fn scalar_chain(levels: usize) -> Self {
        BlockSpec {
            m0: 1,
            blocks: vec![vec![vec![1.0]]; levels],
        }
    }
}

/// A validated drift matrix together with its derived group data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BlockSpec", into = "BlockSpec")]
pub struct StructureMatrix {
    spec: BlockSpec,
    b: DMatrix<f64>,
    dims: Vec<usize>,
    /// Homogeneous degree `2j + 1` of each coordinate.
    degrees: Vec<i32>,
    /// `B^0, …, B^κ`.
    powers: Vec<DMatrix<f64>>,
    /// `C(t) = Σ_d t^{d+1} cov_coeffs[d]`.
    cov_coeffs: Vec<DMatrix<f64>>,
    n: usize,
    q: usize,
    kappa: usize,
}

impl TryFrom<BlockSpec> for StructureMatrix {
    type Error = Error;

    fn try_from(spec: BlockSpec) -> Result<Self> {
        validate_structure(&spec)
    }
}

impl From<StructureMatrix> for BlockSpec {
    fn from(s: StructureMatrix) -> Self {
        s.spec
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Validates a block specification and assembles the structure matrix.
pub fn validate_structure(spec: &BlockSpec) -> Result<StructureMatrix> {
    if spec.m0 == 0 {
        return Err(Error::ShapeMismatch("m0 must be positive".into()));
    }
    let mut dims = vec![spec.m0];
    let mut mats = Vec::with_capacity(spec.blocks.len());
    for (idx, rows) in spec.blocks.iter().enumerate() {
        let j = idx + 1;
        let prev = dims[idx];
        if rows.is_empty() {
            return Err(Error::ShapeMismatch(format!("block B_{j} has no rows")));
        }
        for row in rows {
            if row.len() != prev {
                return Err(Error::ShapeMismatch(format!(
                    "block B_{j} must have {prev} columns, found a row of length {}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("block B_{j}")));
            }
        }
        let mj = rows.len();
        if mj > prev {
            return Err(Error::MonotonicityViolation {
                index: j,
                current: mj,
                previous: prev,
            });
        }
        let m = DMatrix::from_fn(mj, prev, |r, c| rows[r][c]);
        let sv = m.singular_values();
        let sigma_max = sv.max();
        let sigma_min = sv.min();
        if sigma_max <= 0.0 || sigma_min < RANK_TOLERANCE * sigma_max {
            return Err(Error::RankDeficient {
                index: j,
                sigma_min,
                sigma_max,
            });
        }
        dims.push(mj);
        mats.push(m);
    }

    let n: usize = dims.iter().sum();
    let kappa = mats.len();
    let q: usize = dims.iter().enumerate().map(|(j, m)| (2 * j + 1) * m).sum();

    let mut offsets = vec![0usize];
    for m in &dims {
        offsets.push(offsets.last().unwrap() + m);
    }
    let mut b = DMatrix::zeros(n, n);
    for (idx, m) in mats.iter().enumerate() {
        let j = idx + 1;
        b.view_mut((offsets[j], offsets[j - 1]), (dims[j], dims[j - 1]))
            .copy_from(m);
    }
    let degrees = dims
        .iter()
        .enumerate()
        .flat_map(|(j, &m)| std::iter::repeat_n(2 * j as i32 + 1, m))
        .collect();

    let mut powers = vec![DMatrix::identity(n, n)];
    for _ in 0..kappa {
        let next = &b * powers.last().unwrap();
        powers.push(next);
    }

    let mut a0 = DMatrix::zeros(n, n);
    for i in 0..spec.m0 {
        a0[(i, i)] = 1.0;
    }
    // E(s) A0 E(s)^T = Σ_{i,j} (-s)^{i+j}/(i! j!) B^i A0 (B^j)^T, integrated termwise
    let mut cov_coeffs = vec![DMatrix::zeros(n, n); 2 * kappa + 1];
    for i in 0..=kappa {
        for j in 0..=kappa {
            let d = i + j;
            let sign = if d % 2 == 0 { 1.0 } else { -1.0 };
            let scale = sign / (factorial(i) * factorial(j) * (d + 1) as f64);
            cov_coeffs[d] += (&powers[i] * &a0 * powers[j].transpose()) * scale;
        }
    }
    for c in &mut cov_coeffs {
        let sym = (c.clone() + c.transpose()) * 0.5;
        *c = sym;
    }

    Ok(StructureMatrix {
        spec: spec.clone(),
        b,
        dims,
        degrees,
        powers,
        cov_coeffs,
        n,
        q,
        kappa,
    })
}

impl StructureMatrix {
    pub fn spec(&self) -> &BlockSpec {
        &self.spec
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn m0(&self) -> usize {
        self.dims[0]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    /// Homogeneous degree of each coordinate (1 on the first block, 3 on the next, …).
    pub fn degrees(&self) -> &[i32] {
        &self.degrees
    }

    /// `E(t) = e^{-tB}` as a finite series.
    pub fn exp_neg_tb(&self, t: f64) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.n, self.n);
        let mut coeff = 1.0;
        for (j, p) in self.powers.iter().enumerate() {
            if j > 0 {
                coeff *= -t / j as f64;
            }
            e += p * coeff;
        }
        e
    }

    /// `E(t) x` without forming the matrix.
    pub fn flow(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        let mut term = x.clone();
        for j in 1..=self.kappa {
            term = (&self.b * term) * (-t / j as f64);
            out += &term;
        }
        out
    }

    /// Exact covariance `C(t)`.
    pub fn covariance(&self, t: f64) -> Result<DMatrix<f64>> {
        if !(t > 0.0) {
            return Err(Error::NonPositiveTime(t));
        }
        let mut c = DMatrix::zeros(self.n, self.n);
        let mut tp = t;
        for coeff in &self.cov_coeffs {
            c += coeff * tp;
            tp *= t;
        }
        Ok(c)
    }

    /// Diagonal entries of the dilation `δ_N(r)`; no positivity check.
    pub fn dilation_diag(&self, r: f64) -> DVector<f64> {
        DVector::from_iterator(self.n, self.degrees.iter().map(|&d| r.powi(d)))
    }

    /// The anisotropic dilation `δ_N(r) = diag(r I_{m_0}, r^3 I_{m_1}, …)`.
    pub fn dilation(&self, r: f64) -> Result<DMatrix<f64>> {
        if !(r > 0.0) {
            return Err(Error::NonPositiveScale(r));
        }
        Ok(DMatrix::from_diagonal(&self.dilation_diag(r)))
    }

    /// Group law `(x, t) ∘ (y, s) = (y + E(s) x, t + s)`.
    pub fn group_op(&self, a: &GroupElement, b: &GroupElement) -> GroupElement {
        GroupElement {
            x: &b.x + self.flow(b.t, &a.x),
            t: a.t + b.t,
        }
    }

    /// Inverse element `(x, t)^{-1} = (-E(-t) x, -t)`.
    pub fn group_inverse(&self, a: &GroupElement) -> GroupElement {
        GroupElement {
            x: -self.flow(-a.t, &a.x),
            t: -a.t,
        }
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement::new(DVector::zeros(self.n), 0.0)
    }

    /// `A_0 = diag(I_{m_0}, 0)`.
    pub fn a0(&self) -> DMatrix<f64> {
        let mut a0 = DMatrix::zeros(self.n, self.n);
        for i in 0..self.m0() {
            a0[(i, i)] = 1.0;
        }
        a0
    }
}

/// A point `z = (x, t)` of `ℝ^N × ℝ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupElement {
    pub x: DVector<f64>,
    pub t: f64,
}

impl GroupElement {
    pub fn new(x: DVector<f64>, t: f64) -> Self {
        Self { x, t }
    }

    pub fn from_slice(x: &[f64], t: f64) -> Self {
        Self::new(DVector::from_column_slice(x), t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{composite, gauss_legendre};
    use proptest::prelude::*;

    fn kinetic() -> StructureMatrix {
        validate_structure(&BlockSpec::kinetic(1)).unwrap()
    }

    fn assert_mat_close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol, "{a} vs {b}");
        }
    }

    #[test]
    fn kinetic_structure() {
        let s = kinetic();
        assert_eq!(s.n(), 2);
        assert_eq!(s.kappa(), 1);
        assert_eq!(s.q(), 4);
        assert_eq!(s.b(), &DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]));
    }

    #[test]
    fn parabolic_structure() {
        let s = validate_structure(&BlockSpec::parabolic(2)).unwrap();
        assert_eq!((s.n(), s.kappa(), s.q()), (2, 0, 2));
        assert_eq!(s.b(), &DMatrix::zeros(2, 2));
    }

    #[test]
    fn rectangular_block() {
        let spec = BlockSpec {
            m0: 2,
            blocks: vec![vec![vec![1.0, 0.0]]],
        };
        let s = validate_structure(&spec).unwrap();
        assert_eq!((s.n(), s.kappa(), s.q()), (3, 1, 5));
        assert_eq!(s.b()[(2, 0)], 1.0);
        assert_eq!(s.b()[(2, 1)], 0.0);
    }

    #[test]
    fn validation_errors() {
        let zero = BlockSpec {
            m0: 1,
            blocks: vec![vec![vec![0.0]]],
        };
        assert!(matches!(
            validate_structure(&zero),
            Err(Error::RankDeficient { index: 1, .. })
        ));
        let growing = BlockSpec {
            m0: 1,
            blocks: vec![vec![vec![1.0], vec![2.0]]],
        };
        assert!(matches!(
            validate_structure(&growing),
            Err(Error::MonotonicityViolation { index: 1, .. })
        ));
        let ragged = BlockSpec {
            m0: 2,
            blocks: vec![vec![vec![1.0]]],
        };
        assert!(matches!(
            validate_structure(&ragged),
            Err(Error::ShapeMismatch(_))
        ));
        let nan = BlockSpec {
            m0: 1,
            blocks: vec![vec![vec![f64::NAN]]],
        };
        assert!(matches!(validate_structure(&nan), Err(Error::NonFinite(_))));
        // rank 1 block of shape 2x2 is deficient
        let singular = BlockSpec {
            m0: 2,
            blocks: vec![vec![vec![1.0, 2.0], vec![2.0, 4.0]]],
        };
        assert!(matches!(
            validate_structure(&singular),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn exponential_values() {
        let s = kinetic();
        assert_mat_close(
            &s.exp_neg_tb(1.0),
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 1.0]),
            0.0,
        );
        assert_eq!(s.exp_neg_tb(0.0), DMatrix::identity(2, 2));
        let prod = s.exp_neg_tb(0.3) * s.exp_neg_tb(0.7);
        assert_mat_close(&prod, &s.exp_neg_tb(1.0), 1e-15);
    }

    #[test]
    fn covariance_values() {
        let s = kinetic();
        let c1 = s.covariance(1.0).unwrap();
        assert_mat_close(
            &c1,
            &DMatrix::from_row_slice(2, 2, &[1.0, -0.5, -0.5, 1.0 / 3.0]),
            1e-15,
        );
        assert!((c1.determinant() - 1.0 / 12.0).abs() < 1e-15);
        let t: f64 = 2.5;
        let ct = s.covariance(t).unwrap();
        let expect =
            DMatrix::from_row_slice(2, 2, &[t, -t * t / 2.0, -t * t / 2.0, t.powi(3) / 3.0]);
        assert_mat_close(&ct, &expect, 1e-13);

        let heat = validate_structure(&BlockSpec::parabolic(3)).unwrap();
        assert_mat_close(
            &heat.covariance(0.7).unwrap(),
            &(DMatrix::identity(3, 3) * 0.7),
            1e-15,
        );
        assert!(matches!(s.covariance(0.0), Err(Error::NonPositiveTime(_))));
    }

    #[test]
    fn dilation_values() {
        let s = kinetic();
        let d = s.dilation(2.0).unwrap();
        assert_eq!(d, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 8.0]));
        assert_eq!(s.dilation(1.0).unwrap(), DMatrix::identity(2, 2));
        assert_eq!(s.dilation(3.0).unwrap().determinant(), 81.0);
        assert!(matches!(s.dilation(-1.0), Err(Error::NonPositiveScale(_))));
    }

    #[test]
    fn group_law_examples() {
        let s = kinetic();
        let a = GroupElement::from_slice(&[1.0, 0.0], 1.0);
        let b = GroupElement::from_slice(&[0.0, 0.0], 1.0);
        assert_eq!(s.group_op(&a, &b), GroupElement::from_slice(&[1.0, -1.0], 2.0));
        assert_eq!(s.group_op(&a, &s.identity()), a);
        assert_eq!(
            s.group_inverse(&a),
            GroupElement::from_slice(&[-1.0, -1.0], -1.0)
        );
        let z = GroupElement::from_slice(&[0.0, 0.0], 0.4);
        assert_eq!(s.group_inverse(&z), GroupElement::from_slice(&[0.0, 0.0], -0.4));
    }

    /// Gauss–Legendre with κ + 1 points integrates the degree-2κ polynomial
    /// entries of E(s) A0 E(s)^T exactly; use a generous composite rule anyway.
    fn covariance_by_quadrature(s: &StructureMatrix, t: f64) -> DMatrix<f64> {
        let rule = composite(&gauss_legendre(8), 0.0, t, 4);
        let a0 = s.a0();
        let mut c = DMatrix::zeros(s.n(), s.n());
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            let e = s.exp_neg_tb(*x);
            c += (&e * &a0 * e.transpose()) * *w;
        }
        c
    }

    fn structures() -> Vec<StructureMatrix> {
        let specs = [
            BlockSpec::kinetic(1),
            BlockSpec::kinetic(2),
            BlockSpec::parabolic(2),
            BlockSpec::scalar_chain(2),
            BlockSpec {
                m0: 2,
                blocks: vec![vec![vec![1.0, 0.5]]],
            },
            BlockSpec {
                m0: 3,
                blocks: vec![
                    vec![vec![1.0, 0.2, -0.3], vec![0.0, 2.0, 0.1]],
                    vec![vec![0.7, -1.1]],
                ],
            },
        ];
        specs.iter().map(|s| validate_structure(s).unwrap()).collect()
    }

    #[test]
    fn covariance_matches_quadrature() {
        for s in structures() {
            for &t in &[0.1, 1.0, 3.7] {
                let exact = s.covariance(t).unwrap();
                let quad = covariance_by_quadrature(&s, t);
                let scale = 1.0 + exact.amax();
                assert_mat_close(&exact, &quad, 1e-10 * scale);
            }
        }
    }

    #[test]
    fn nilpotency() {
        for s in structures() {
            let p = s.b().pow(s.kappa() as u32 + 1);
            assert!(p.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn structure_json_round_trip() {
        let s = structures().pop().unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert!(text.starts_with("{\"m0\":3"));
        let back: StructureMatrix = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let bad: std::result::Result<StructureMatrix, _> =
            serde_json::from_str(r#"{"m0":1,"blocks":[[[0.0]]]}"#);
        assert!(bad.is_err());
    }

    fn element(n: usize) -> impl Strategy<Value = GroupElement> {
        (proptest::collection::vec(-3.0..3.0f64, n), -2.0..2.0f64)
            .prop_map(|(x, t)| GroupElement::from_slice(&x, t))
    }

    fn close(a: &GroupElement, b: &GroupElement, tol: f64) -> bool {
        (a.t - b.t).abs() <= tol && (&a.x - &b.x).amax() <= tol
    }

    proptest! {
        #[test]
        fn group_axioms(a in element(6), b in element(6), c in element(6)) {
            let s = &structures()[5];
            let e = s.identity();
            let lhs = s.group_op(&s.group_op(&a, &b), &c);
            let rhs = s.group_op(&a, &s.group_op(&b, &c));
            prop_assert!(close(&lhs, &rhs, 1e-12 * (1.0 + lhs.x.amax())));
            prop_assert!(close(&s.group_op(&a, &e), &a, 1e-12));
            prop_assert!(close(&s.group_op(&e, &a), &a, 1e-12));
            let inv = s.group_inverse(&a);
            prop_assert!(close(&s.group_op(&a, &inv), &e, 1e-12 * (1.0 + a.x.amax())));
            prop_assert!(close(&s.group_op(&inv, &a), &e, 1e-12 * (1.0 + a.x.amax())));
        }

        #[test]
        fn flow_is_a_one_parameter_group(t in -3.0..3.0f64, u in -3.0..3.0f64) {
            for s in structures() {
                let lhs = s.exp_neg_tb(t) * s.exp_neg_tb(u);
                let rhs = s.exp_neg_tb(t + u);
                prop_assert!((lhs - rhs).amax() <= 1e-12 * 100.0);
                let id = s.exp_neg_tb(t) * s.exp_neg_tb(-t);
                prop_assert!((id - DMatrix::identity(s.n(), s.n())).amax() <= 1e-12 * 10.0);
            }
        }

        #[test]
        fn covariance_dilation_compatibility(t in 0.01..20.0f64) {
            for s in structures() {
                let d = s.dilation(t.sqrt()).unwrap();
                let lhs = s.covariance(t).unwrap();
                let rhs = &d * s.covariance(1.0).unwrap() * &d;
                let scale = 1.0 + lhs.amax();
                prop_assert!((lhs - rhs).amax() <= 1e-12 * scale);
            }
        }

        #[test]
        fn covariance_is_spd(t in 1e-3..50.0f64) {
            for s in structures() {
                let c = s.covariance(t).unwrap();
                prop_assert!((&c - c.transpose()).amax() == 0.0);
                let eig = c.symmetric_eigenvalues();
                prop_assert!(eig.min() > 0.0);
            }
        }

        #[test]
        fn dilation_determinant(r in 0.2..3.0f64) {
            for s in structures() {
                let det = s.dilation(r).unwrap().determinant();
                let expect = r.powi(s.q() as i32);
                prop_assert!((det - expect).abs() <= 1e-12 * expect);
            }
        }
    }
}
