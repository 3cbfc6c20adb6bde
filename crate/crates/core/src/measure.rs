//! Empirical measures, moments, Wasserstein distances and invariant-measure estimation.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::sde::ParticleSystem;

/// Largest atom count accepted by the assignment solver.
pub const ASSIGNMENT_LIMIT: usize = 2048;

/// Summary statistics that mean-field coefficients read in O(1).
#[derive(Clone, Debug, PartialEq)]
pub struct MeanFieldStats {
    pub mean: Vec<f64>,
    /// E|X|²
    pub second_moment: f64,
    /// E[tanh X] per coordinate.
    pub mean_tanh: Vec<f64>,
}

/// Weighted particle cloud; atoms stored row-major (N × d).
#[derive(Clone, Debug)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    uniform: bool,
    stats: MeanFieldStats,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        if !points.len().is_multiple_of(dim) || points.len() / dim != weights.len() || weights.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{} coordinates and {} weights do not form an N x {dim} cloud",
                points.len(),
                weights.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite atom".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidInput("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
        }
        let n = weights.len();
        let w0 = weights[0];
        let uniform = weights.iter().all(|&w| w == w0) && (w0 * n as f64 - 1.0).abs() < 1e-12;
        let stats = compute_stats(dim, &points, &weights);
        Ok(Self { dim, points, weights, uniform, stats })
    }

    /// Equal-weight cloud.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::InvalidInput("empty or ragged cloud".into()));
        }
        let n = points.len() / dim;
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite atom".into()));
        }
        let weights = vec![1.0 / n as f64; n];
        let stats = compute_stats(dim, &points, &weights);
        Ok(Self { dim, points, weights, uniform: true, stats })
    }

    pub fn dirac(point: &[f64]) -> Self {
        Self::uniform(point.len(), point.to_vec()).expect("finite point")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn points(&self) -> &[f64] {
        &self.points
    }
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn is_uniform(&self) -> bool {
        self.uniform
    }
    pub fn stats(&self) -> &MeanFieldStats {
        &self.stats
    }
    pub fn mean(&self) -> &[f64] {
        &self.stats.mean
    }
    pub fn second_moment(&self) -> f64 {
        self.stats.second_moment
    }

    /// Per-coordinate standard deviation.
    pub fn std_dev(&self) -> Vec<f64> {
        let d = self.dim;
        let mut var = vec![0.0; d];
        for (i, w) in self.weights.iter().enumerate() {
            for k in 0..d {
                let c = self.points[i * d + k] - self.stats.mean[k];
                var[k] += w * c * c;
            }
        }
        var.into_iter().map(f64::sqrt).collect()
    }

    /// Atom index for a uniform variate, by inverse cumulative weight.
    pub fn sample_index(&self, u: f64) -> usize {
        let n = self.len();
        if self.uniform {
            return ((u * n as f64) as usize).min(n - 1);
        }
        let mut acc = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        n - 1
    }

    /// CSV: one atom per row, final column weight.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for k in 0..self.dim {
            let _ = write!(s, "x{},", k + 1);
        }
        s.push_str("weight\n");
        for i in 0..self.len() {
            for v in self.point(i) {
                let _ = write!(s, "{v:e},");
            }
            let _ = writeln!(s, "{:e}", self.weights[i]);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::InvalidInput("empty measure CSV".into()))?;
        let cols = header.split(',').count();
        if cols < 2 {
            return Err(Error::InvalidInput("measure CSV needs coordinates and a weight column".into()));
        }
        let dim = cols - 1;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (row, line) in lines.enumerate() {
            let vals: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|c| c.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Parse { line: row + 2, column: 1, message: e.to_string() })?;
            if vals.len() != cols {
                return Err(Error::Parse {
                    line: row + 2,
                    column: 1,
                    message: format!("expected {cols} columns, found {}", vals.len()),
                });
            }
            points.extend_from_slice(&vals[..dim]);
            weights.push(vals[dim]);
        }
        // Tolerate print rounding, then renormalize.
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("weights sum to {total}, not 1")));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(dim, points, weights)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn compute_stats(dim: usize, points: &[f64], weights: &[f64]) -> MeanFieldStats {
    let mut mean = vec![0.0; dim];
    let mut mean_tanh = vec![0.0; dim];
    let mut second = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let x = &points[i * dim..(i + 1) * dim];
        for k in 0..dim {
            mean[k] += w * x[k];
            mean_tanh[k] += w * x[k].tanh();
            second += w * x[k] * x[k];
        }
    }
    MeanFieldStats { mean, second_moment: second, mean_tanh }
}

/// (Σ w_i |x_i|^p)^{1/p}
pub fn moment(mu: &EmpiricalMeasure, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidInput(format!("moment order {p} < 1")));
    }
    let s: f64 = (0..mu.len())
        .map(|i| {
            let r2: f64 = mu.point(i).iter().map(|v| v * v).sum();
            mu.weights[i] * r2.sqrt().powf(p)
        })
        .sum();
    Ok(s.powf(1.0 / p))
}

#[inline]
fn cost(a: &[f64], b: &[f64], p: f64) -> f64 {
    let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    if p == 2.0 {
        r2
    } else if p == 1.0 {
        r2.sqrt()
    } else {
        r2.sqrt().powf(p)
    }
}

/// W_p for p ∈ {1, 2}: quantile coupling in one dimension, exact assignment otherwise.
pub fn wasserstein(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> Result<f64> {
    if p != 1.0 && p != 2.0 {
        return Err(Error::InvalidInput(format!("p = {p}; only 1 and 2 are supported")));
    }
    if mu.dim != nu.dim {
        return Err(Error::InvalidInput(format!("dimensions differ: {} vs {}", mu.dim, nu.dim)));
    }
    if mu.dim == 1 {
        Ok(wasserstein_1d(mu, nu, p))
    } else {
        wasserstein_assignment(mu, nu, p)
    }
}

fn sorted_atoms(mu: &EmpiricalMeasure) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = mu.points.iter().copied().zip(mu.weights.iter().copied()).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

fn wasserstein_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> f64 {
    if mu.uniform && nu.uniform && mu.len() == nu.len() {
        let mut a = mu.points.clone();
        let mut b = nu.points.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let n = a.len() as f64;
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs().powf(p)).sum();
        return (s / n).powf(1.0 / p);
    }
    // Integrate |F^{-1}(u) − G^{-1}(u)|^p over u by merging the two step functions.
    let a = sorted_atoms(mu);
    let b = sorted_atoms(nu);
    let (mut i, mut j) = (0usize, 0usize);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let m = ra.min(rb);
        total += m * (a[i].0 - b[j].0).abs().powf(p);
        ra -= m;
        rb -= m;
        if ra <= 1e-15 {
            i += 1;
            if i < a.len() {
                ra = a[i].1;
            }
        }
        if rb <= 1e-15 {
            j += 1;
            if j < b.len() {
                rb = b[j].1;
            }
        }
    }
    total.powf(1.0 / p)
}

/// Exact assignment between equal-size uniform clouds (any dimension).
pub fn wasserstein_assignment(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> Result<f64> {
    let n = mu.len();
    if n != nu.len() {
        return Err(Error::UnsupportedSize(format!(
            "assignment needs equal atom counts ({n} vs {})",
            nu.len()
        )));
    }
    if n > ASSIGNMENT_LIMIT {
        return Err(Error::UnsupportedSize(format!(
            "{n} atoms exceeds the assignment limit of {ASSIGNMENT_LIMIT}"
        )));
    }
    if !(mu.uniform && nu.uniform) {
        return Err(Error::UnsupportedSize("assignment needs equal-weight clouds".into()));
    }
    let mut c = vec![0.0; n * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let x = mu.point(i);
        for (j, r) in row.iter_mut().enumerate() {
            *r = cost(x, nu.point(j), p);
        }
    });
    let (_, total) = crate::assignment::solve(&c, n);
    Ok((total.max(0.0) / n as f64).powf(1.0 / p))
}

/// Time-indexed sequence of measures, read piecewise-constant in time.
#[derive(Clone, Debug)]
pub struct MeasureFlow {
    times: Vec<f64>,
    measures: Vec<Arc<EmpiricalMeasure>>,
    stationary: bool,
}

impl MeasureFlow {
    pub fn new(times: Vec<f64>, measures: Vec<Arc<EmpiricalMeasure>>) -> Result<Self> {
        if times.is_empty() || times.len() != measures.len() {
            return Err(Error::InvalidInput("flow needs one measure per grid node".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("flow time grid must be strictly increasing".into()));
        }
        let n = measures[0].len();
        let d = measures[0].dim();
        if measures.iter().any(|m| m.len() != n || m.dim() != d) {
            return Err(Error::InvalidInput("atom count must be constant across the flow".into()));
        }
        Ok(Self { times, measures, stationary: false })
    }

    /// The constant flow t ↦ μ on [0, ∞).
    pub fn stationary(mu: EmpiricalMeasure) -> Self {
        Self { times: vec![0.0], measures: vec![Arc::new(mu)], stationary: true }
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    pub fn horizon(&self) -> f64 {
        if self.stationary {
            f64::INFINITY
        } else {
            *self.times.last().unwrap()
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn measures(&self) -> &[Arc<EmpiricalMeasure>] {
        &self.measures
    }

    pub fn dim(&self) -> usize {
        self.measures[0].dim()
    }

    /// Measure at the last grid node not after `t`.
    pub fn at(&self, t: f64) -> &EmpiricalMeasure {
        let tol = 1e-9 * (1.0 + t.abs());
        let k = self.times.partition_point(|&s| s <= t + tol);
        &self.measures[k.saturating_sub(1)]
    }

    pub fn terminal(&self) -> &EmpiricalMeasure {
        self.measures.last().unwrap()
    }

    pub fn covers(&self, horizon: f64) -> Result<()> {
        if self.horizon() + 1e-9 * (1.0 + horizon) < horizon {
            return Err(Error::Coverage { available: self.horizon(), requested: horizon });
        }
        Ok(())
    }

    /// Smallest spacing of the grid (infinite for a single node).
    pub fn min_step(&self) -> f64 {
        self.times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }

    /// Every grid time must fall on the simulation grid `k·dt`.
    pub fn check_aligned(&self, dt: f64) -> Result<()> {
        for &t in &self.times {
            let k = (t / dt).round();
            if (k * dt - t).abs() > 1e-9 * (1.0 + t) {
                return Err(Error::InvalidInput(format!(
                    "flow node t = {t} is not a multiple of dt = {dt}"
                )));
            }
        }
        Ok(())
    }

    /// CSV with columns time, atom, coordinates, weight.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut s = String::from("time,atom,");
        for k in 0..d {
            let _ = write!(s, "x{},", k + 1);
        }
        s.push_str("weight\n");
        for (t, m) in self.times.iter().zip(&self.measures) {
            for i in 0..m.len() {
                let _ = write!(s, "{t},{i},");
                for v in m.point(i) {
                    let _ = write!(s, "{v:e},");
                }
                let _ = writeln!(s, "{:e}", m.weights()[i]);
            }
        }
        s
    }

    /// Flat table of mean and second moment per node.
    pub fn moments_csv(&self) -> String {
        let mut s = String::from("time,mean1,second_moment\n");
        for (t, m) in self.times.iter().zip(&self.measures) {
            let _ = writeln!(s, "{t},{:e},{:e}", m.mean()[0], m.second_moment());
        }
        s
    }
}

/// μ* together with its stationarity diagnostic.
#[derive(Clone, Debug)]
pub struct InvariantEstimate {
    pub measure: EmpiricalMeasure,
    /// W₂ between the ensembles at t_burn/2 and t_burn.
    pub stationarity_w2: f64,
    /// Fluctuation scale of W₂ between two independent clouds of this size.
    pub stationarity_tolerance: f64,
    pub warning: Option<String>,
}

/// Runs the interacting system from δ₀ to `t_burn` and returns the terminal ensemble.
pub fn invariant_measure(
    spec: &ProblemSpec,
    n_particles: usize,
    dt: f64,
    t_burn: f64,
    seed: u64,
) -> Result<InvariantEstimate> {
    let rate = spec.contraction_rate_hint();
    if rate > 0.0 && t_burn < 10.0 / rate - 1e-9 {
        return Err(Error::InvalidInput(format!(
            "t_burn = {t_burn} is shorter than 10/Λ = {}",
            10.0 / rate
        )));
    }
    let theta = EmpiricalMeasure::dirac(&vec![0.0; spec.dim]);
    let mut sys = ParticleSystem::from_measure(spec, &theta, n_particles, dt, seed)?;
    let n_steps = (t_burn / dt).round() as usize;
    let half = n_steps / 2;
    for _ in 0..half {
        sys.advance()?;
    }
    let mid = sys.measure();
    for _ in half..n_steps {
        sys.advance()?;
    }
    let end = sys.measure();
    let stationarity_w2 = if spec.dim == 1 || n_particles <= ASSIGNMENT_LIMIT {
        wasserstein(&mid, &end, 2.0)?
    } else {
        f64::NAN
    };
    // Two iid clouds of size N from a law with scale s differ by about s·sqrt(log N / N) in W₂.
    let scale = end.std_dev().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let nf = n_particles as f64;
    let tol = 3.0 * scale * ((nf.ln().max(1.0)) / nf).sqrt() + 1e-12;
    let warning = (stationarity_w2 > tol).then(|| {
        format!("non-stationary: W2(t_burn/2, t_burn) = {stationarity_w2:.3e} exceeds {tol:.3e}")
    });
    Ok(InvariantEstimate { measure: end, stationarity_w2, stationarity_tolerance: tol, warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Channel, Noise};

    fn cloud(vals: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(1, vals.to_vec()).unwrap()
    }

    #[test]
    fn moments_of_simple_measures() {
        assert_eq!(moment(&EmpiricalMeasure::dirac(&[0.0]), 2.0).unwrap(), 0.0);
        assert!((moment(&cloud(&[-1.0, 1.0]), 2.0).unwrap() - 1.0).abs() < 1e-15);
        let noise = Noise::new(11, Channel::Audit);
        let mut pts = vec![0.0; 100_000];
        for (i, p) in pts.iter_mut().enumerate() {
            let mut v = [0.0];
            noise.fill_normals(i, 0, &mut v);
            *p = v[0];
        }
        let m = moment(&cloud(&pts), 2.0).unwrap();
        assert!((m * m - 1.0).abs() < 0.02);
        assert!(moment(&cloud(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        let mu = cloud(&[0.3, -1.0, 2.0]);
        assert_eq!(wasserstein(&mu, &mu, 2.0).unwrap(), 0.0);
        let d0 = EmpiricalMeasure::dirac(&[0.0]);
        let d1 = EmpiricalMeasure::dirac(&[1.0]);
        assert!((wasserstein(&d0, &d1, 1.0).unwrap() - 1.0).abs() < 1e-15);
        // Both couplings of {0,2} and {1,3} cost 1 (identity) or 3²,1² -> mean 5 (cross).
        let a = cloud(&[0.0, 2.0]);
        let b = cloud(&[1.0, 3.0]);
        let brute = f64::min((1.0 + 1.0) / 2.0, (9.0 + 1.0) / 2.0).sqrt();
        assert!((wasserstein(&a, &b, 2.0).unwrap() - brute).abs() < 1e-15);
        assert!((wasserstein(&a, &b, 2.0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_quantile_path_matches_duplicated_atoms() {
        // {0 w.1/4, 1 w.3/4} equals the uniform cloud {0,1,1,1}.
        let w = EmpiricalMeasure::new(1, vec![1.0, 0.0], vec![0.75, 0.25]).unwrap();
        let u = cloud(&[0.0, 1.0, 1.0, 1.0]);
        let v = cloud(&[0.5, -0.2, 3.0, 1.1]);
        for p in [1.0, 2.0] {
            let a = wasserstein(&w, &v, p).unwrap();
            let b = wasserstein(&u, &v, p).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn assignment_size_errors() {
        let a = EmpiricalMeasure::uniform(2, vec![0.0; 2 * 3]).unwrap();
        let b = EmpiricalMeasure::uniform(2, vec![0.0; 2 * 4]).unwrap();
        assert!(matches!(wasserstein(&a, &b, 2.0), Err(Error::UnsupportedSize(_))));
        let big = EmpiricalMeasure::uniform(2, vec![0.0; 2 * 2049]).unwrap();
        match wasserstein(&big, &big, 2.0) {
            Err(Error::UnsupportedSize(msg)) => assert!(msg.contains("2048")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip() {
        let m = EmpiricalMeasure::new(2, vec![0.1, 0.2, -3.0, 4.5], vec![0.25, 0.75]).unwrap();
        let back = EmpiricalMeasure::from_csv(&m.to_csv()).unwrap();
        assert_eq!(back.points(), m.points());
        assert_eq!(back.weights(), m.weights());
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.5, 0.6]).is_err());
        assert!(EmpiricalMeasure::new(1, vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn flow_lookup_is_piecewise_constant() {
        let ms: Vec<_> = (0..3).map(|k| Arc::new(EmpiricalMeasure::dirac(&[k as f64]))).collect();
        let f = MeasureFlow::new(vec![0.0, 0.5, 1.0], ms).unwrap();
        assert_eq!(f.at(0.0).mean()[0], 0.0);
        assert_eq!(f.at(0.49).mean()[0], 0.0);
        assert_eq!(f.at(0.5).mean()[0], 1.0);
        assert_eq!(f.at(0.3 + 0.2).mean()[0], 1.0);
        assert_eq!(f.at(7.0).mean()[0], 2.0);
        assert!(f.covers(1.0).is_ok());
        assert!(f.covers(1.5).is_err());
        assert!(MeasureFlow::new(vec![0.0, 0.0], vec![f.measures()[0].clone(); 2]).is_err());
    }
}
