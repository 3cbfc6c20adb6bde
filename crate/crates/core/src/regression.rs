//! Polynomial least-squares regression on particle clouds.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition number above which a design matrix is rejected.
pub const MAX_CONDITION: f64 = 1e12;
/// Ridge weight, per sample. The intercept is not penalized, so constants are fitted
/// exactly and no spurious discount accumulates over many backward nodes.
pub const RIDGE: f64 = 1e-10;

/// Monomials x^e in d variables with |e| ≤ degree.
#[derive(Clone, Debug, PartialEq)]
pub struct Basis {
    pub dim: usize,
    pub degree: usize,
    exponents: Vec<Vec<usize>>,
}

impl Basis {
    pub fn new(dim: usize, degree: usize) -> Self {
        let mut exponents = Vec::new();
        for total in 0..=degree {
            let mut e = vec![0; dim];
            gen(&mut exponents, &mut e, 0, total);
        }
        Self { dim, degree, exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<usize>] {
        &self.exponents
    }

    fn powers(&self, u: &[f64], pw: &mut [f64]) {
        let m = self.degree + 1;
        for (i, &v) in u.iter().enumerate() {
            pw[i * m] = 1.0;
            for k in 1..m {
                pw[i * m + k] = pw[i * m + k - 1] * v;
            }
        }
    }

    /// Basis row at standardized coordinates.
    pub fn eval(&self, u: &[f64], out: &mut [f64]) {
        let m = self.degree + 1;
        let mut pw = vec![0.0; self.dim * m];
        self.powers(u, &mut pw);
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().enumerate().map(|(i, &k)| pw[i * m + k]).product();
        }
    }
}

fn gen(out: &mut Vec<Vec<usize>>, e: &mut Vec<usize>, i: usize, left: usize) {
    if i + 1 == e.len() {
        e[i] = left;
        out.push(e.clone());
        return;
    }
    for k in (0..=left).rev() {
        e[i] = k;
        gen(out, e, i + 1, left - k);
    }
    e[i] = 0;
}

/// Affine standardization u = (x − center)/scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn from_cloud(points: &[f64], dim: usize) -> Self {
        let n = (points.len() / dim) as f64;
        let mut center = vec![0.0; dim];
        for row in points.chunks(dim) {
            for (c, v) in center.iter_mut().zip(row) {
                *c += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for row in points.chunks(dim) {
            for k in 0..dim {
                scale[k] += (row[k] - center[k]).powi(2) / n;
            }
        }
        for s in scale.iter_mut() {
            *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
        }
        Self { center, scale }
    }

    #[inline]
    fn apply(&self, x: &[f64], u: &mut [f64]) {
        for k in 0..x.len() {
            u[k] = (x[k] - self.center[k]) / self.scale[k];
        }
    }
}

/// A fitted map x ↦ R^outputs, Σ_j c_{o,j} φ_j((x − center)/scale).
#[derive(Clone, Debug)]
pub struct NodeFit {
    pub basis: Arc<Basis>,
    pub standardizer: Standardizer,
    pub outputs: usize,
    /// outputs × basis length, row-major.
    pub coeffs: Vec<f64>,
}

impl NodeFit {
    pub fn constant(basis: Arc<Basis>, dim: usize, values: &[f64]) -> Self {
        let p = basis.len();
        let mut coeffs = vec![0.0; values.len() * p];
        for (o, v) in values.iter().enumerate() {
            coeffs[o * p] = *v;
        }
        Self {
            basis,
            standardizer: Standardizer { center: vec![0.0; dim], scale: vec![1.0; dim] },
            outputs: values.len(),
            coeffs,
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.dim
    }

    /// All outputs at x.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        let p = self.basis.len();
        let mut u = vec![0.0; x.len()];
        self.standardizer.apply(x, &mut u);
        let mut row = vec![0.0; p];
        self.basis.eval(&u, &mut row);
        for (o, v) in out.iter_mut().enumerate().take(self.outputs) {
            *v = self.coeffs[o * p..(o + 1) * p].iter().zip(&row).map(|(c, r)| c * r).sum();
        }
    }

    /// Output 0 at x.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.output(0, x)
    }

    pub fn output(&self, o: usize, x: &[f64]) -> f64 {
        let p = self.basis.len();
        let m = self.basis.degree + 1;
        let d = x.len();
        if d == 1 {
            // Horner on the 1-D monomials 1, u, u², ...
            let u = (x[0] - self.standardizer.center[0]) / self.standardizer.scale[0];
            return self.coeffs[o * p..(o + 1) * p].iter().rev().fold(0.0, |acc, c| acc * u + c);
        }
        let mut u = vec![0.0; d];
        self.standardizer.apply(x, &mut u);
        let mut pw = vec![0.0; d * m];
        self.basis.powers(&u, &mut pw);
        self.basis
            .exponents
            .iter()
            .zip(&self.coeffs[o * p..(o + 1) * p])
            .map(|(e, c)| c * e.iter().enumerate().map(|(i, &k)| pw[i * m + k]).product::<f64>())
            .sum()
    }

    /// ∇_x of output `o`, by differentiating the monomials.
    pub fn gradient(&self, o: usize, x: &[f64], out: &mut [f64]) {
        let p = self.basis.len();
        let m = self.basis.degree + 1;
        let d = x.len();
        if d == 1 {
            let s = self.standardizer.scale[0];
            let u = (x[0] - self.standardizer.center[0]) / s;
            let c = &self.coeffs[o * p..(o + 1) * p];
            out[0] = (1..p).rev().fold(0.0, |acc, k| acc * u + k as f64 * c[k]) / s;
            return;
        }
        let mut u = vec![0.0; d];
        self.standardizer.apply(x, &mut u);
        let mut pw = vec![0.0; d * m];
        self.basis.powers(&u, &mut pw);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (e, c) in self.basis.exponents.iter().zip(&self.coeffs[o * p..(o + 1) * p]) {
            for k in 0..d {
                if e[k] == 0 {
                    continue;
                }
                let mut term = c * e[k] as f64 * pw[k * m + e[k] - 1];
                for (i, &ei) in e.iter().enumerate() {
                    if i != k {
                        term *= pw[i * m + ei];
                    }
                }
                out[k] += term / self.standardizer.scale[k];
            }
        }
    }

    /// Σ w_i fit_i; all fits must share basis and standardization.
    pub fn combine(fits: &[&NodeFit], weights: &[f64]) -> Result<NodeFit> {
        let first = fits.first().ok_or_else(|| Error::InvalidInput("nothing to combine".into()))?;
        if fits.iter().any(|f| f.standardizer != first.standardizer || f.basis != first.basis || f.outputs != first.outputs) {
            return Err(Error::InvalidInput("fits differ in basis or standardization".into()));
        }
        let mut coeffs = vec![0.0; first.coeffs.len()];
        for (f, w) in fits.iter().zip(weights) {
            for (c, v) in coeffs.iter_mut().zip(&f.coeffs) {
                *c += w * v;
            }
        }
        Ok(NodeFit { coeffs, ..(*first).clone() })
    }

    /// Keeps only output `o`.
    pub fn select(&self, o: usize) -> NodeFit {
        let p = self.basis.len();
        NodeFit { coeffs: self.coeffs[o * p..(o + 1) * p].to_vec(), outputs: 1, ..self.clone() }
    }

    /// Adds a constant to output `o`.
    pub fn shift(&mut self, o: usize, c: f64) {
        let p = self.basis.len();
        self.coeffs[o * p] += c;
    }

    pub fn csv_header(&self) -> String {
        let mut s = String::from("output");
        for e in self.basis.exponents() {
            let tag: Vec<String> = e.iter().map(|k| k.to_string()).collect();
            let _ = write!(s, ",c_{}", tag.join("_"));
        }
        s
    }

    pub fn csv_rows(&self, prefix: &str) -> String {
        let p = self.basis.len();
        let mut s = String::new();
        for o in 0..self.outputs {
            let _ = write!(s, "{prefix}{o}");
            for c in &self.coeffs[o * p..(o + 1) * p] {
                let _ = write!(s, ",{c:e}");
            }
            s.push('\n');
        }
        s
    }

    /// Coefficients plus the standardization, one block per output.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# center={:?},scale={:?}\n{}\n",
            self.standardizer.center,
            self.standardizer.scale,
            self.csv_header()
        );
        s.push_str(&self.csv_rows(""));
        s
    }
}

/// A factored design matrix for one cloud; fits several right-hand sides.
pub struct Design {
    basis: Arc<Basis>,
    standardizer: Standardizer,
    q: DMatrix<f64>,
    r2: DMatrix<f64>,
    q2: DMatrix<f64>,
    rows: DMatrix<f64>,
    pub condition: f64,
}

impl Design {
    /// `node` only labels the degeneracy error.
    pub fn new(basis: Arc<Basis>, points: &[f64], node: usize) -> Result<Self> {
        let standardizer = Standardizer::from_cloud(points, basis.dim);
        Self::with_standardizer(basis, standardizer, points, node)
    }

    pub fn with_standardizer(basis: Arc<Basis>, standardizer: Standardizer, points: &[f64], node: usize) -> Result<Self> {
        let d = basis.dim;
        let n = points.len() / d;
        let p = basis.len();
        let mut a = DMatrix::<f64>::zeros(n, p);
        let mut u = vec![0.0; d];
        let mut row = vec![0.0; p];
        for (i, x) in points.chunks(d).enumerate() {
            standardizer.apply(x, &mut u);
            basis.eval(&u, &mut row);
            for j in 0..p {
                a[(i, j)] = row[j];
            }
        }
        let rows = a.clone();
        let qr = a.qr();
        let q = qr.q();
        let r = qr.r();
        let sv = r.clone().svd(false, false).singular_values;
        let (mx, mn) = (sv.max(), sv.min());
        let condition = if mn > 0.0 { mx / mn } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) || n < p {
            return Err(Error::BasisDegeneracy { node, condition });
        }
        // Ridge: least squares on [R; √λ I].
        let mut stacked = DMatrix::<f64>::zeros(2 * p, p);
        stacked.view_mut((0, 0), (p, p)).copy_from(&r);
        let lam = (RIDGE * n as f64).sqrt();
        for j in 1..p {
            stacked[(p + j, j)] = lam;
        }
        let qr2 = stacked.qr();
        let q2 = qr2.q().rows(0, p).into_owned();
        let r2 = qr2.r();
        Ok(Self { basis, standardizer, q, r2, q2, rows, condition })
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    /// Fits each column of `ys` (n × outputs, column-major slices).
    pub fn fit(&self, ys: &[&[f64]]) -> NodeFit {
        let p = self.basis.len();
        let mut coeffs = Vec::with_capacity(p * ys.len());
        for y in ys {
            let yv = DVector::from_column_slice(y);
            let qty = self.q.tr_mul(&yv);
            let rhs = self.q2.tr_mul(&qty);
            let c = self.r2.solve_upper_triangular(&rhs).expect("ridge keeps R invertible");
            coeffs.extend(c.iter());
        }
        NodeFit {
            basis: self.basis.clone(),
            standardizer: self.standardizer.clone(),
            outputs: ys.len(),
            coeffs,
        }
    }

    /// Fitted values of output `o` of `fit` at the design points.
    pub fn fitted(&self, fit: &NodeFit, o: usize) -> Vec<f64> {
        let p = self.basis.len();
        let c = DVector::from_column_slice(&fit.coeffs[o * p..(o + 1) * p]);
        (&self.rows * c).iter().copied().collect()
    }

    /// Root-mean-square residual of output `o`.
    pub fn residual_rms(&self, fit: &NodeFit, o: usize, y: &[f64]) -> f64 {
        let f = self.fitted(fit, o);
        (f.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64).sqrt()
    }
}

/// Lagrange weights w_i with Σ w_i y_i = P(0), P interpolating (α_i, y_i).
pub fn extrapolation_weights(alphas: &[f64]) -> Vec<f64> {
    (0..alphas.len())
        .map(|i| {
            (0..alphas.len())
                .filter(|&j| j != i)
                .map(|j| alphas[j] / (alphas[j] - alphas[i]))
                .product()
        })
        .collect()
}

/// Weighted linear fit y ≈ a + bα; returns the weights giving the intercept a.
pub fn linear_intercept_weights(alphas: &[f64], w: &[f64]) -> Vec<f64> {
    let sw: f64 = w.iter().sum();
    let mx = alphas.iter().zip(w).map(|(a, wi)| a * wi).sum::<f64>() / sw;
    let sxx: f64 = alphas.iter().zip(w).map(|(a, wi)| wi * (a - mx) * (a - mx)).sum();
    alphas
        .iter()
        .zip(w)
        .map(|(a, wi)| wi / sw - mx * wi * (a - mx) / sxx)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes() {
        assert_eq!(Basis::new(1, 3).len(), 4);
        assert_eq!(Basis::new(2, 2).len(), 6);
        assert_eq!(Basis::new(3, 3).len(), 20);
    }

    #[test]
    fn recovers_a_polynomial_exactly() {
        let b = Arc::new(Basis::new(2, 3));
        let pts: Vec<f64> = (0..400).flat_map(|i| [((i * 37) % 101) as f64 / 20.0 - 2.5, ((i * 53) % 89) as f64 / 30.0]).collect();
        let f = |x: &[f64]| 1.0 - 2.0 * x[0] + 0.5 * x[0] * x[1] + x[1].powi(3);
        let y: Vec<f64> = pts.chunks(2).map(f).collect();
        let dsg = Design::new(b, &pts, 0).unwrap();
        let fit = dsg.fit(&[&y]);
        for x in [[0.3, 1.1], [-1.0, 2.0]] {
            assert!((fit.value(&x) - f(&x)).abs() < 1e-6);
            let mut g = [0.0; 2];
            fit.gradient(0, &x, &mut g);
            assert!((g[0] - (-2.0 + 0.5 * x[1])).abs() < 1e-6);
            assert!((g[1] - (0.5 * x[0] + 3.0 * x[1] * x[1])).abs() < 1e-6);
        }
        assert!(dsg.residual_rms(&fit, 0, &y) < 1e-6);
    }

    #[test]
    fn one_dimensional_fast_path_agrees() {
        let b = Arc::new(Basis::new(1, 3));
        let pts: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = pts.iter().map(|x| x.sin()).collect();
        let fit = Design::new(b, &pts, 0).unwrap().fit(&[&y]);
        let mut out = [0.0];
        fit.eval(&[1.3], &mut out);
        assert!((out[0] - fit.value(&[1.3])).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cloud_names_the_node() {
        let b = Arc::new(Basis::new(1, 3));
        let pts = vec![1.0; 100];
        match Design::new(b, &pts, 7) {
            Err(Error::BasisDegeneracy { node, .. }) => assert_eq!(node, 7),
            other => panic!("{:?}", other.map(|d| d.condition)),
        }
    }

    #[test]
    fn extrapolation_weights_are_exact_on_polynomials() {
        let a = [0.4, 0.2, 0.1, 0.05];
        let w = extrapolation_weights(&a);
        let y: Vec<f64> = a.iter().map(|x| 0.5 - x + 3.0 * x * x - x * x * x).collect();
        assert!((w.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() - 0.5).abs() < 1e-12);
        let wl = linear_intercept_weights(&a, &[1.0, 1.0, 2.0, 2.0]);
        let y: Vec<f64> = a.iter().map(|x| 0.5 - 2.0 * x).collect();
        assert!((wl.iter().zip(&y).map(|(w, y)| w * y).sum::<f64>() - 0.5).abs() < 1e-12);
    }
}
