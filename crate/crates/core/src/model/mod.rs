//! Problem instances: coefficients, driver, costs, structural constants.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::measure::EmpiricalMeasure;

mod audit;
pub mod expr;
mod presets;
pub mod scenario;

pub use audit::{audit, driver_growth_constant, AuditReport, Check, Verdict, Witness};
pub use presets::{preset, Preset};

/// b(t, x, μ) written into `out`.
pub type DriftFn = Arc<dyn Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync>;
/// σ(x, μ) written row-major into a d×d `out`.
pub type DiffusionFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync>;
/// f(x, μ, z) with z a row vector of length d.
pub type DriverFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure, &[f64]) -> f64 + Send + Sync>;
/// g(x, μ), and also state-only costs ℓ₀(x, μ).
pub type TerminalFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure) -> f64 + Send + Sync>;
/// L(x, μ, a).
pub type CostFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure, &[f64]) -> f64 + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    StrongDissipative,
    WeakDissipative,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::StrongDissipative => "strong",
            Regime::WeakDissipative => "weak",
        })
    }
}

/// Structural constants of the assumption sets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Constants {
    pub nu: f64,
    pub eta: f64,
    pub k_b_x: f64,
    pub k_b_l: f64,
    pub k_s_x: f64,
    pub k_s_l: f64,
    pub sigma0: f64,
    pub r_ball: f64,
    /// Bound M_𝔟 of ⟨Δ, b(x)−b(x')⟩/|Δ| inside the ball.
    pub m_b: f64,
    pub q: f64,
    pub epsilon: f64,
    /// Lipschitz constant of the driver in z.
    pub k_f_z: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            nu: 0.0,
            eta: 0.0,
            k_b_x: 0.0,
            k_b_l: 0.0,
            k_s_x: 0.0,
            k_s_l: 0.0,
            sigma0: 1.0,
            r_ball: 0.0,
            m_b: 0.0,
            q: 1.0,
            epsilon: 1.0,
            k_f_z: 0.0,
        }
    }
}

impl Constants {
    pub fn named(&self) -> [(&'static str, f64); 12] {
        [
            ("nu", self.nu),
            ("eta", self.eta),
            ("k_b_x", self.k_b_x),
            ("k_b_l", self.k_b_l),
            ("k_s_x", self.k_s_x),
            ("k_s_l", self.k_s_l),
            ("sigma0", self.sigma0),
            ("r_ball", self.r_ball),
            ("m_b", self.m_b),
            ("q", self.q),
            ("epsilon", self.epsilon),
            ("k_f_z", self.k_f_z),
        ]
    }
}

/// Running cost, with the separable-quadratic case singled out for the closed-form Hamiltonian.
#[derive(Clone)]
pub enum RunningCost {
    /// L(x, μ, a) = ℓ₀(x, μ) + |a|².
    QuadraticControl { state_cost: TerminalFn },
    General(CostFn),
}

impl RunningCost {
    pub fn eval(&self, x: &[f64], mu: &EmpiricalMeasure, a: &[f64]) -> f64 {
        match self {
            RunningCost::QuadraticControl { state_cost } => {
                state_cost(x, mu) + a.iter().map(|v| v * v).sum::<f64>()
            }
            RunningCost::General(l) => l(x, mu, a),
        }
    }
}

/// Box 𝒜 = Π[lo_i, hi_i] ⊂ R^k and the d×k matrix R.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Row-major d×k.
    pub r: Vec<f64>,
}

impl ControlSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, r: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || !r.len().is_multiple_of(lo.len()) {
            return Err(Error::Configuration("control box and R have inconsistent shapes".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::Configuration("control box needs finite lo <= hi".into()));
        }
        Ok(Self { lo, hi, r })
    }

    pub fn k(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    /// (zR)_j for row vector z.
    pub fn z_times_r(&self, z: &[f64], out: &mut [f64]) {
        let k = self.k();
        for j in 0..k {
            out[j] = z.iter().enumerate().map(|(i, zi)| zi * self.r[i * k + j]).sum();
        }
    }

    /// R a as a state-space vector.
    pub fn r_times_a(&self, a: &[f64], out: &mut [f64]) {
        let k = self.k();
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..k).map(|j| self.r[i * k + j] * a[j]).sum();
        }
    }

    /// sup_{a ∈ 𝒜} |R a|.
    pub fn sup_ra(&self) -> f64 {
        let k = self.k();
        let d = self.r.len() / k;
        let mut best = 0.0f64;
        // Extreme points of the box suffice for a convex norm.
        for mask in 0..(1usize << k) {
            let a: Vec<f64> =
                (0..k).map(|j| if mask >> j & 1 == 1 { self.hi[j] } else { self.lo[j] }).collect();
            let mut ra = vec![0.0; d];
            self.r_times_a(&a, &mut ra);
            best = best.max(ra.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
        best
    }
}

/// The full model.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dim: usize,
    pub drift: DriftFn,
    pub diffusion: DiffusionFn,
    pub driver: DriverFn,
    pub terminal: TerminalFn,
    pub running_cost: Option<RunningCost>,
    pub control_set: Option<ControlSet>,
    pub constants: Constants,
    pub regime: Regime,
    /// False when f ignores z; lets solvers skip the Z estimate in the driver.
    pub driver_uses_z: bool,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("regime", &self.regime)
            .field("constants", &self.constants)
            .field("control_set", &self.control_set)
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn validate(&self) -> Result<()> {
        let c = &self.constants;
        if self.dim == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        for (name, v) in c.named() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidInput(format!("constant {name} = {v} must be finite and nonnegative")));
            }
        }
        if !(c.epsilon > 0.0 && c.epsilon <= 1.0) {
            return Err(Error::InvalidInput(format!("epsilon = {} outside (0, 1]", c.epsilon)));
        }
        match self.regime {
            Regime::StrongDissipative => {
                if c.nu <= c.k_s_x + c.k_s_l {
                    return Err(Error::Assumption(format!(
                        "nu = {} must exceed K^s_x + K^s_L = {}",
                        c.nu,
                        c.k_s_x + c.k_s_l
                    )));
                }
            }
            Regime::WeakDissipative => {
                let d = self.dim;
                let x: Vec<f64> = (0..d).map(|i| 0.37 * (i as f64 + 1.0)).collect();
                let mu1 = EmpiricalMeasure::dirac(&vec![0.0; d]);
                let mu2 = EmpiricalMeasure::uniform(d, (0..2 * d).map(|i| 3.0 - i as f64).collect())?;
                let mut s1 = vec![0.0; d * d];
                let mut s2 = vec![0.0; d * d];
                (self.diffusion)(&x, &mu1, &mut s1);
                (self.diffusion)(&x, &mu2, &mut s2);
                if s1 != s2 {
                    return Err(Error::Assumption(
                        "weakly dissipative models need a distribution-free diffusion".into(),
                    ));
                }
            }
        }
        if let Some(cs) = &self.control_set {
            if cs.r.len() != self.dim * cs.k() {
                return Err(Error::Configuration(format!(
                    "R must be {} x {}, got {} entries",
                    self.dim,
                    cs.k(),
                    cs.r.len()
                )));
            }
        }
        Ok(())
    }

    /// Λ in the strong regime, 𝜼 − K^σ_x in the weak one.
    pub fn contraction_rate_hint(&self) -> f64 {
        let c = &self.constants;
        match self.regime {
            Regime::StrongDissipative => c.nu - (c.k_s_x + c.k_s_l),
            Regime::WeakDissipative => c.eta - c.k_s_x,
        }
    }

    pub fn with_driver(mut self, uses_z: bool, f: impl Fn(&[f64], &EmpiricalMeasure, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.driver = Arc::new(f);
        self.driver_uses_z = uses_z;
        self
    }

    pub fn with_terminal(mut self, g: impl Fn(&[f64], &EmpiricalMeasure) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Arc::new(g);
        self
    }

    pub fn with_drift(mut self, b: impl Fn(f64, &[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(b);
        self
    }

    pub fn with_diffusion(mut self, s: impl Fn(&[f64], &EmpiricalMeasure, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Arc::new(s);
        self
    }

    /// Constant scalar diffusion σ·I.
    pub fn with_constant_diffusion(self, sigma: f64) -> Self {
        let d = self.dim;
        self.with_diffusion(move |_x, _mu, out| {
            out.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..d {
                out[i * d + i] = sigma;
            }
        })
    }

    /// Replaces the driver by the Hamiltonian of the declared control problem.
    pub fn with_hamiltonian_driver(mut self) -> Result<Self> {
        let cs = self
            .control_set
            .clone()
            .ok_or_else(|| Error::Configuration("no control set declared".into()))?;
        let cost = self
            .running_cost
            .clone()
            .ok_or_else(|| Error::Configuration("no running cost declared".into()))?;
        self.constants.k_f_z = cs.sup_ra();
        self.driver = Arc::new(move |x, mu, z| crate::control::hamiltonian_with(&cs, &cost, x, mu, z).0);
        self.driver_uses_z = true;
        Ok(self)
    }

    pub fn eval_drift(&self, t: f64, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        (self.drift)(t, x, mu, &mut out);
        out
    }

    pub fn eval_diffusion(&self, x: &[f64], mu: &EmpiricalMeasure) -> Vec<f64> {
        let mut out = vec![0.0; self.dim * self.dim];
        (self.diffusion)(x, mu, &mut out);
        out
    }
}

/// Row vector times row-major d×d matrix: (z σ)_j = Σ_i z_i σ_ij.
#[inline]
pub fn row_times_matrix(z: &[f64], m: &[f64], out: &mut [f64]) {
    let d = z.len();
    for j in 0..d {
        out[j] = (0..d).map(|i| z[i] * m[i * d + j]).sum();
    }
}

/// Matrix times vector.
#[inline]
pub fn matrix_times_vec(m: &[f64], v: &[f64], out: &mut [f64]) {
    let d = v.len();
    for i in 0..d {
        out[i] = (0..d).map(|j| m[i * d + j] * v[j]).sum();
    }
}
