//! Gaussian quadrature rules from the Golub–Welsch eigenvalue method.

use std::f64::consts::PI;

use nalgebra::DMatrix;

/// Nodes and weights of an n-point rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(*x))
            .sum()
    }
}

/// Symmetric tridiagonal Jacobi matrix with zero diagonal and the given
/// off-diagonal, diagonalized; weights are `mu0 · v_0²`.
fn golub_welsch(n: usize, off: impl Fn(usize) -> f64, mu0: f64) -> Rule {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = off(k);
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Gauss–Hermite rule for `∫ e^{−x²} f(x) dx` over the real line.
pub fn gauss_hermite(n: usize) -> Rule {
    golub_welsch(n, |k| (k as f64 / 2.0).sqrt(), PI.sqrt())
}

/// Rule for `E f(Z)` with `Z ~ N(0, 1)`.
pub fn standard_normal(n: usize) -> Rule {
    let r = gauss_hermite(n);
    Rule {
        nodes: r.nodes.iter().map(|x| x * 2.0_f64.sqrt()).collect(),
        weights: r.weights.iter().map(|w| w / PI.sqrt()).collect(),
    }
}

/// Gauss–Legendre rule on `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> Rule {
    let r = golub_welsch(
        n,
        |k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        },
        2.0,
    );
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    Rule {
        nodes: r.nodes.iter().map(|x| mid + half * x).collect(),
        weights: r.weights.iter().map(|w| w * half).collect(),
    }
}

/// Rule for `E f(|Z|)` with `Z ~ N(0, 1)`, truncated at `upper`.
pub fn half_normal(n: usize, upper: f64) -> Rule {
    let r = gauss_legendre(n, 0.0, upper);
    let c = (2.0 / PI).sqrt();
    Rule {
        weights: r
            .nodes
            .iter()
            .zip(&r.weights)
            .map(|(x, w)| w * c * (-0.5 * x * x).exp())
            .collect(),
        nodes: r.nodes,
    }
}
