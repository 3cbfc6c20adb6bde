//! Gauss quadrature rules from the Golub–Welsch eigenproblem.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of a quadrature rule.
#[derive(Clone, Debug)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn golub_welsch(n: usize, off: impl Fn(usize) -> f64, mass: f64) -> Rule {
    assert!(n >= 1);
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = off(k);
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mass * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetrize: the rules are exactly symmetric, the eigensolver only nearly so.
    for i in 0..n / 2 {
        let x = 0.5 * (pairs[n - 1 - i].0 - pairs[i].0);
        let w = 0.5 * (pairs[n - 1 - i].1 + pairs[i].1);
        pairs[i] = (-x, w);
        pairs[n - 1 - i] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    Rule { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() }
}

/// Gauss–Legendre on [−1, 1].
pub fn gauss_legendre(n: usize) -> Rule {
    golub_welsch(n, |k| {
        let k = k as f64;
        k / (4.0 * k * k - 1.0).sqrt()
    }, 2.0)
}

/// Gauss–Hermite for the standard normal: Σ w_q f(ξ_q) ≈ E f(ξ), weights summing to 1.
pub fn gauss_hermite(n: usize) -> Rule {
    golub_welsch(n, |k| (k as f64).sqrt(), 1.0)
}

/// Composite Gauss–Legendre over [a, b] split at `breaks` (points outside are ignored).
pub fn integrate(rule: &Rule, a: f64, b: f64, panels: usize, breaks: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut cuts = vec![a];
    let mut inner: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    inner.sort_by(f64::total_cmp);
    cuts.extend(inner);
    cuts.push(b);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let m = panels.max(1);
        let h = (hi - lo) / m as f64;
        for p in 0..m {
            let c = lo + (p as f64 + 0.5) * h;
            let s: f64 = rule.nodes.iter().zip(&rule.weights).map(|(x, wq)| wq * f(c + 0.5 * h * x)).sum();
            total += 0.5 * h * s;
        }
    }
    total
}
