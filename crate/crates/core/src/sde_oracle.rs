//! Stochastic oracle for the kernel.
//!
//! `K(· - E(t)y, t)` is a Gaussian density. Writing the exponent of `K` as
//!
//! ```text
//! -¼ ⟨C(1)^{-1} δ(1/√t) x, δ(1/√t) x⟩ = -¼ ⟨C(t)^{-1} x, x⟩ = -½ ⟨(2C(t))^{-1} x, x⟩
//! ```
//!
//! (using `C(t) = δ(√t) C(1) δ(√t)`) identifies the covariance as `2C(t)`,
//! and `det(2C(t)) = 2^N t^Q det C(1)` reproduces the prefactor
//! `(2π)^{-N/2} det(2C(t))^{-1/2} = C_N t^{-Q/2}`. The mean `E(t) y = e^{-tB} y`
//! comes from the two-point kernel `K(x - E(t-s) y, t - s)`. This is the law
//! at time `t` of
//!
//! ```text
//! dZ = -B Z ds + √2 dW,   W Brownian on the first m_0 coordinates.
//! ```
//!
//! Every path draws from its own ChaCha stream `(seed, path index)`, so a batch
//! does not depend on how paths are scheduled across threads.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::field::{Centering, GridField};
use crate::kernel::KernelContext;
use crate::lie_group::StructureMatrix;
use crate::quadrature::{gauss_legendre, pairwise_sum};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleMethod {
    Exact,
    EulerMaruyama { steps: usize, dt: f64 },
    /// Gaussian with a caller-supplied factor (fault injection and tests).
    Gaussian,
}

/// `n` samples of an `N`-dimensional law, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub dim: usize,
    pub points: Vec<f64>,
    pub t: f64,
    pub start: Vec<f64>,
    pub seed: u64,
    pub method: SampleMethod,
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Symmetric square root factor `L` with `L Lᵀ = m`.
pub fn symmetric_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::FactorizationFailure("non-finite covariance".into()));
    }
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-12 * scale {
            return Err(Error::FactorizationFailure(format!(
                "negative eigenvalue {v:e}"
            )));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Samples `mean + L ξ`.
pub fn gaussian_sample(
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
    t: f64,
    start: &[f64],
    n: usize,
    seed: u64,
) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::InvalidProblem("sample count must be positive".into()));
    }
    let dim = mean.len();
    if factor.shape() != (dim, dim) {
        return Err(Error::ShapeMismatch(format!(
            "factor is {:?}, mean has length {dim}",
            factor.shape()
        )));
    }
    let points: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|path| {
            let mut rng = path_rng(seed, path);
            let xi = DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(&mut rng)));
            let z = mean + factor * xi;
            z.data.as_vec().clone().into_iter()
        })
        .collect();
    Ok(SampleBatch {
        dim,
        points,
        t,
        start: start.to_vec(),
        seed,
        method: SampleMethod::Gaussian,
    })
}

/// Exact draws from the law `N(E(t) start, 2C(t))` whose density is `K(· - E(t) start, t)`.
pub fn exact_sample(
    ctx: &KernelContext,
    start: &[f64],
    t: f64,
    n: usize,
    seed: u64,
) -> Result<SampleBatch> {
    let s = ctx.structure();
    check_start(s, start)?;
    let cov = s.covariance(t)? * 2.0;
    let factor = symmetric_factor(&cov)?;
    let mean = s.flow(t, &DVector::from_column_slice(start));
    let mut batch = gaussian_sample(&mean, &factor, t, start, n, seed)?;
    batch.method = SampleMethod::Exact;
    Ok(batch)
}

fn check_start(s: &StructureMatrix, start: &[f64]) -> Result<()> {
    if start.len() != s.n() {
        return Err(Error::ShapeMismatch(format!(
            "start has length {}, N = {}",
            start.len(),
            s.n()
        )));
    }
    if start.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("start point".into()));
    }
    Ok(())
}

/// Euler–Maruyama: `Z ← Z - Δs B Z + √(2Δs) (ξ on the first m_0 coordinates)`.
pub fn euler_maruyama(
    s: &StructureMatrix,
    start: &[f64],
    t: f64,
    steps: usize,
    n: usize,
    seed: u64,
) -> Result<SampleBatch> {
    check_start(s, start)?;
    if steps == 0 {
        return Err(Error::InvalidProblem("steps must be at least 1".into()));
    }
    if !(t > 0.0) {
        return Err(Error::NonPositiveTime(t));
    }
    if n == 0 {
        return Err(Error::InvalidProblem("sample count must be positive".into()));
    }
    let dim = s.n();
    let m0 = s.m0();
    let ds = t / steps as f64;
    let kick = (2.0 * ds).sqrt();
    let step = DMatrix::identity(dim, dim) - s.b() * ds;
    let points: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|path| {
            let mut rng = path_rng(seed, path);
            let mut z = DVector::from_column_slice(start);
            for _ in 0..steps {
                z = &step * z;
                for i in 0..m0 {
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    z[i] += kick * xi;
                }
            }
            z.data.as_vec().clone().into_iter()
        })
        .collect();
    Ok(SampleBatch {
        dim,
        points,
        t,
        start: start.to_vec(),
        seed,
        method: SampleMethod::EulerMaruyama { steps, dt: ds },
    })
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }

    fn coordinate(&self, i: usize) -> Vec<f64> {
        (0..self.len()).map(|k| self.points[k * self.dim + i]).collect()
    }

    pub fn mean(&self) -> DVector<f64> {
        let n = self.len() as f64;
        DVector::from_iterator(self.dim, (0..self.dim).map(|i| pairwise_sum(&self.coordinate(i)) / n))
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let n = self.len();
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for j in i..self.dim {
                let terms: Vec<f64> = (0..n)
                    .map(|k| (self.point(k)[i] - mean[i]) * (self.point(k)[j] - mean[j]))
                    .collect();
                let c = pairwise_sum(&terms) / (n as f64 - 1.0).max(1.0);
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        cov
    }

    /// Monte Carlo standard errors of the covariance entries under a
    /// Gaussian law: `sqrt((Σ_ij² + Σ_ii Σ_jj) / n)`.
    pub fn covariance_standard_error(&self, sigma: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.len() as f64;
        DMatrix::from_fn(self.dim, self.dim, |i, j| {
            ((sigma[(i, j)].powi(2) + sigma[(i, i)] * sigma[(j, j)]) / n).sqrt()
        })
    }

    /// One row per sample: `x1, …, xN`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let head: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        writeln!(w, "{}", head.join(","))?;
        for k in 0..self.len() {
            let row: Vec<String> = self.point(k).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Empirical density on a cell grid over `[lo, hi]`, stored as a field
    /// with a single time cell `(t, t + 1)` so that it integrates to the
    /// fraction of samples inside the box.
    pub fn histogram(&self, lo: &[f64], hi: &[f64], bins: &[usize]) -> Result<GridField> {
        let mut shape = bins.to_vec();
        shape.push(1);
        let mut field = GridField::zeros(lo.to_vec(), hi.to_vec(), (self.t, self.t + 1.0), shape, Centering::Cell)?;
        let vol: f64 = (0..self.dim).map(|a| field.spacing(a)).product();
        let inc = 1.0 / (self.len() as f64 * vol);
        let strides = field.strides();
        for k in 0..self.len() {
            if let Some(cell) = bin_of(self.point(k), lo, hi, bins) {
                let flat: usize = cell.iter().zip(&strides).map(|(c, s)| c * s).sum();
                field.values_mut()[flat] += inc;
            }
        }
        Ok(field)
    }
}

fn bin_of(x: &[f64], lo: &[f64], hi: &[f64], bins: &[usize]) -> Option<Vec<usize>> {
    x.iter()
        .enumerate()
        .map(|(a, &v)| {
            if v < lo[a] || v >= hi[a] {
                None
            } else {
                let h = (hi[a] - lo[a]) / bins[a] as f64;
                Some((((v - lo[a]) / h) as usize).min(bins[a] - 1))
            }
        })
        .collect()
}

/// Histogram L1 distance and per-marginal Kolmogorov–Smirnov statistics
/// against the law with density `K(· - E(t) start, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub n: usize,
    pub bins: usize,
    /// `Σ_cells |p̂ - p| + |mass outside the box|` in probability units.
    pub l1: f64,
    pub ks: Vec<f64>,
    /// Asymptotic 95% critical value `1.36/√n`.
    pub ks_critical: f64,
}

impl DensityReport {
    pub fn ks_pass(&self) -> bool {
        self.ks.iter().all(|&d| d < self.ks_critical)
    }
}

/// Compares a batch with the kernel. The histogram box spans ±5 standard
/// deviations per axis around the exact mean, with `bins` cells per axis.
pub fn density_error(batch: &SampleBatch, ctx: &KernelContext, bins: usize) -> Result<DensityReport> {
    let s = ctx.structure();
    if batch.dim != s.n() {
        return Err(Error::ShapeMismatch(format!(
            "batch has dimension {}, N = {}",
            batch.dim,
            s.n()
        )));
    }
    if bins == 0 {
        return Err(Error::InvalidProblem("bins must be positive".into()));
    }
    let n = batch.len();
    let dim = batch.dim;
    let t = batch.t;
    let mean = s.flow(t, &DVector::from_column_slice(&batch.start));
    let cov = s.covariance(t)? * 2.0;
    let sd: Vec<f64> = (0..dim).map(|i| cov[(i, i)].sqrt()).collect();
    let lo: Vec<f64> = (0..dim).map(|i| mean[i] - 5.0 * sd[i]).collect();
    let hi: Vec<f64> = (0..dim).map(|i| mean[i] + 5.0 * sd[i]).collect();
    let bins_v = vec![bins; dim];

    let mut counts = vec![0usize; bins.pow(dim as u32)];
    let mut outside = 0usize;
    for k in 0..n {
        match bin_of(batch.point(k), &lo, &hi, &bins_v) {
            Some(cell) => counts[cell.iter().fold(0, |acc, &c| acc * bins + c)] += 1,
            None => outside += 1,
        }
    }

    // model cell probabilities by tensor Gauss–Legendre per cell
    let rule = gauss_legendre(4);
    let h: Vec<f64> = (0..dim).map(|a| (hi[a] - lo[a]) / bins as f64).collect();
    let model: Vec<f64> = (0..counts.len())
        .into_par_iter()
        .map(|c| {
            let mut idx = vec![0usize; dim];
            let mut rem = c;
            for a in (0..dim).rev() {
                idx[a] = rem % bins;
                rem /= bins;
            }
            let per_axis: Vec<Vec<(f64, f64)>> = (0..dim)
                .map(|a| {
                    let a0 = lo[a] + idx[a] as f64 * h[a];
                    rule.mapped(a0, a0 + h[a]).collect()
                })
                .collect();
            let mut sub = vec![0usize; dim];
            let total = rule.len().pow(dim as u32);
            let mut acc = Vec::with_capacity(total);
            let mut z = vec![0.0; dim];
            for _ in 0..total {
                let mut w = 1.0;
                for a in 0..dim {
                    let (x, wa) = per_axis[a][sub[a]];
                    z[a] = x - mean[a];
                    w *= wa;
                }
                acc.push(w * ctx.eval(&z, t));
                for a in (0..dim).rev() {
                    sub[a] += 1;
                    if sub[a] < rule.len() {
                        break;
                    }
                    sub[a] = 0;
                }
            }
            pairwise_sum(&acc)
        })
        .collect();
    let inv_n = 1.0 / n as f64;
    let diffs: Vec<f64> = counts
        .iter()
        .zip(&model)
        .map(|(&c, &m)| (c as f64 * inv_n - m).abs())
        .collect();
    let model_inside = pairwise_sum(&model);
    let l1 = pairwise_sum(&diffs) + (outside as f64 * inv_n - (1.0 - model_inside)).abs();

    let ks = (0..dim)
        .map(|i| {
            let normal = Normal::new(mean[i], sd[i]).map_err(|e| Error::FactorizationFailure(e.to_string()))?;
            let mut xs = batch.coordinate(i);
            xs.sort_by(f64::total_cmp);
            let mut d: f64 = 0.0;
            for (k, &x) in xs.iter().enumerate() {
                let f = normal.cdf(x);
                d = d.max((f - k as f64 * inv_n).abs()).max(((k + 1) as f64 * inv_n - f).abs());
            }
            Ok(d)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DensityReport {
        n,
        bins,
        l1,
        ks,
        ks_critical: 1.36 / (n as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::kernel_context;
    use crate::lie_group::{validate_structure, BlockSpec};

    fn kinetic() -> KernelContext {
        kernel_context(&validate_structure(&BlockSpec::kinetic(1)).unwrap()).unwrap()
    }

    #[test]
    fn reproducible_batches() {
        let ctx = kinetic();
        let a = exact_sample(&ctx, &[0.0, 0.0], 1.0, 1, 42).unwrap();
        let b = exact_sample(&ctx, &[0.0, 0.0], 1.0, 1, 42).unwrap();
        assert_eq!(a.points, b.points);
        let c = exact_sample(&ctx, &[0.0, 0.0], 1.0, 1, 43).unwrap();
        assert_ne!(a.points, c.points);
        // a path does not depend on the batch size
        let big = exact_sample(&ctx, &[0.0, 0.0], 1.0, 100, 42).unwrap();
        assert_eq!(big.point(0), a.point(0));
    }

    #[test]
    fn consistency_identity() {
        let ctx = kinetic();
        let s = ctx.structure();
        for &t in &[0.01, 0.3, 1.0, 7.5] {
            let lhs = (s.covariance(t).unwrap() * 2.0).determinant();
            let rhs = 4.0 * t.powi(4) * ctx.det_c1();
            assert!((lhs - rhs).abs() <= 1e-10 * rhs, "{lhs} {rhs}");
        }
    }

    #[test]
    fn single_euler_step() {
        let s = validate_structure(&BlockSpec::kinetic(1)).unwrap();
        let b = euler_maruyama(&s, &[0.0, 0.0], 1.0, 1, 20_000, 9).unwrap();
        assert!((0..b.len()).all(|k| b.point(k)[1] == 0.0));
        let cov = b.covariance();
        assert!((cov[(0, 0)] - 2.0).abs() < 3.0 * (2.0 * 4.0 / 20_000f64).sqrt());
        assert!(matches!(euler_maruyama(&s, &[0.0, 0.0], 1.0, 0, 10, 1), Err(Error::InvalidProblem(_))));
    }

    #[test]
    fn degenerate_batch_l1() {
        let ctx = kinetic();
        let batch = SampleBatch {
            dim: 2,
            points: vec![0.0; 2 * 10_000],
            t: 1.0,
            start: vec![0.0, 0.0],
            seed: 0,
            method: SampleMethod::Gaussian,
        };
        let bins = 21;
        let r = density_error(&batch, &ctx, bins).unwrap();
        // probability of the central cell under K
        let cov = ctx.structure().covariance(1.0).unwrap() * 2.0;
        let h: Vec<f64> = (0..2).map(|i| 10.0 * cov[(i, i)].sqrt() / bins as f64).collect();
        let rule = gauss_legendre(8);
        let mut centre = 0.0;
        for (x, wx) in rule.mapped(-h[0] / 2.0, h[0] / 2.0) {
            for (y, wy) in rule.mapped(-h[1] / 2.0, h[1] / 2.0) {
                centre += wx * wy * ctx.eval(&[x, y], 1.0);
            }
        }
        assert!((r.l1 - 2.0 * (1.0 - centre)).abs() < 1e-6, "{} vs {}", r.l1, 2.0 * (1.0 - centre));
        assert!(!r.ks_pass());
    }

    #[test]
    fn histogram_integrates_to_inside_fraction() {
        let ctx = kinetic();
        let b = exact_sample(&ctx, &[0.0, 0.0], 1.0, 5000, 3).unwrap();
        let h = b.histogram(&[-1.0, -1.0], &[1.0, 1.0], &[8, 8]).unwrap();
        let inside = (0..b.len())
            .filter(|&k| b.point(k).iter().all(|v| (-1.0..1.0).contains(v)))
            .count() as f64
            / b.len() as f64;
        assert!((h.integral() - inside).abs() < 1e-12);
    }

    #[test]
    fn factor_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(symmetric_factor(&m), Err(Error::FactorizationFailure(_))));
        let m = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0 / 3.0]);
        let l = symmetric_factor(&m).unwrap();
        assert!((&l * l.transpose() - m).amax() < 1e-12);
    }
}
