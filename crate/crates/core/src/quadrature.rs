//! One-dimensional Gauss rules and reproducible summation.
//!
//! Nodes and weights come from the Golub–Welsch eigenvalue formulation of
//! the three-term recurrence, which is accurate to a few ulps for the orders
//! used here (at most a few hundred).

use nalgebra::{DMatrix, SymmetricEigen};

/// A one-dimensional quadrature rule on a reference interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Maps the rule from `[-1, 1]` onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }
}

fn golub_welsch(diag: &[f64], offdiag: &[f64], mass: f64) -> Rule {
    let n = diag.len();
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        jacobi[(i, i)] = diag[i];
    }
    for (i, &b) in offdiag.iter().enumerate() {
        jacobi[(i, i + 1)] = b;
        jacobi[(i + 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mass * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetric rules: enforce exact antisymmetry of nodes and symmetry of weights
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let x = 0.5 * (pairs[j].0 - pairs[i].0);
        let w = 0.5 * (pairs[j].1 + pairs[i].1);
        pairs[i] = (-x, w);
        pairs[j] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Gauss–Legendre rule with `n` nodes on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Rule {
    assert!(n >= 1, "Gauss-Legendre needs at least one node");
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&diag, &off, 2.0)
}

/// Gauss–Hermite rule for expectations under the standard normal law:
/// `E[f(Z)] ≈ Σ w_i f(x_i)` with `Σ w_i = 1`.
pub fn gauss_hermite_normal(n: usize) -> Rule {
    assert!(n >= 1, "Gauss-Hermite needs at least one node");
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    golub_welsch(&diag, &off, 1.0)
}

/// Composite Gauss–Legendre rule on `[a, b]` with `panels` equal panels.
pub fn composite(rule: &Rule, a: f64, b: f64, panels: usize) -> Rule {
    let h = (b - a) / panels as f64;
    let mut nodes = Vec::with_capacity(panels * rule.len());
    let mut weights = Vec::with_capacity(panels * rule.len());
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (x, w) in rule.mapped(lo, lo + h) {
            nodes.push(x);
            weights.push(w);
        }
    }
    Rule { nodes, weights }
}

/// Pairwise (tree) summation. The result depends only on the order of
/// `values`, so it is reproducible regardless of how they were produced.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials_exactly() {
        let rule = gauss_legendre(6);
        // degree 11 is the exactness limit for 6 nodes
        let approx: f64 = rule.mapped(0.0, 2.0).map(|(x, w)| w * x.powi(11)).sum();
        let exact = 2f64.powi(12) / 12.0;
        assert!((approx - exact).abs() < 1e-10 * exact);
        let total: f64 = rule.weights.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
    }

    #[test]
    fn hermite_reproduces_normal_moments() {
        let rule = gauss_hermite_normal(10);
        let m = |k: i32| -> f64 {
            rule.nodes
                .iter()
                .zip(&rule.weights)
                .map(|(x, w)| w * x.powi(k))
                .sum()
        };
        assert!((m(0) - 1.0).abs() < 1e-14);
        assert!(m(1).abs() < 1e-14);
        assert!((m(2) - 1.0).abs() < 1e-13);
        assert!((m(4) - 3.0).abs() < 1e-12);
        assert!((m(6) - 15.0).abs() < 1e-11);
    }

    #[test]
    fn composite_rule_covers_interval() {
        let rule = composite(&gauss_legendre(6), -3.0, 5.0, 7);
        let len: f64 = rule.weights.iter().sum();
        assert!((len - 8.0).abs() < 1e-13);
        let int: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(x, w)| w * x.exp())
            .sum();
        assert!((int - (5f64.exp() - (-3f64).exp())).abs() < 1e-10);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_exact_values() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
