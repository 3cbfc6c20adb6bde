use std::str::FromStr;
use std::sync::Arc;

use super::{Constants, ControlSet, ProblemSpec, Regime, RunningCost};
use crate::error::{Error, Result};

/// Worked instances of the mean-field model class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    OuAttract,
    OuRepel,
    SineWeak,
    ControlLq,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::OuAttract, Preset::OuRepel, Preset::SineWeak, Preset::ControlLq];

    pub fn name(self) -> &'static str {
        match self {
            Preset::OuAttract => "ou-attract",
            Preset::OuRepel => "ou-repel",
            Preset::SineWeak => "sine-weak",
            Preset::ControlLq => "control-lq",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

const ETA: f64 = 1.0;
const KAPPA: f64 = 0.5;
const SIGMA0: f64 = 1.0;
const SINE_KAPPA: f64 = 0.05;

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Mean-field OU b(x, μ) = −η x + sign·κ m₁(μ); driver |x|², terminal 0.
fn mean_field_ou(name: &str, sign: f64) -> ProblemSpec {
    ProblemSpec {
        name: name.to_string(),
        dim: 1,
        drift: Arc::new(move |_t, x, mu, out| out[0] = -ETA * x[0] + sign * KAPPA * mu.mean()[0]),
        diffusion: Arc::new(|_x, _mu, out| out[0] = SIGMA0),
        driver: Arc::new(|x, _mu, _z| sq_norm(x)),
        terminal: Arc::new(|_x, _mu| 0.0),
        running_cost: None,
        control_set: None,
        constants: Constants {
            // L-dissipativity: −η|Δ|² − κ|EΔ|² for attraction, −(η−κ)|Δ|² at worst for repulsion.
            nu: if sign < 0.0 { ETA } else { ETA - KAPPA },
            eta: ETA,
            k_b_x: ETA,
            k_b_l: KAPPA,
            sigma0: SIGMA0,
            ..Constants::default()
        },
        regime: Regime::StrongDissipative,
        driver_uses_z: false,
    }
}

pub fn preset(name: &str) -> Result<ProblemSpec> {
    let p: Preset = name.parse()?;
    Ok(match p {
        Preset::OuAttract => mean_field_ou("ou-attract", -1.0),
        Preset::OuRepel => mean_field_ou("ou-repel", 1.0),
        Preset::SineWeak => ProblemSpec {
            name: "sine-weak".into(),
            dim: 1,
            drift: Arc::new(|_t, x, mu, out| {
                out[0] = -x[0] + 1.5 * x[0].sin() + SINE_KAPPA * mu.stats().mean_tanh[0]
            }),
            diffusion: Arc::new(|_x, _mu, out| out[0] = SIGMA0),
            driver: Arc::new(|x, _mu, _z| sq_norm(x)),
            terminal: Arc::new(|_x, _mu| 0.0),
            running_cost: None,
            control_set: None,
            constants: Constants {
                // ⟨Δ, −Δ + 1.5(sin x − sin x')⟩ ≤ −|Δ|² + 1.5|Δ| min(|Δ|, 2):
                // slope bound 2.5, at most 1·|Δ| inside any ball, ≤ −0.5|Δ|² beyond 6.
                eta: 0.5,
                r_ball: 6.0,
                m_b: 1.0,
                k_b_x: 2.5,
                k_b_l: SINE_KAPPA,
                sigma0: SIGMA0,
                ..Constants::default()
            },
            regime: Regime::WeakDissipative,
            driver_uses_z: false,
        },
        Preset::ControlLq => {
            let mut s = mean_field_ou("control-lq", -1.0);
            s.terminal = Arc::new(|x, _mu| sq_norm(x));
            s.running_cost = Some(RunningCost::QuadraticControl { state_cost: Arc::new(|x, _mu| sq_norm(x)) });
            s.control_set = Some(ControlSet::new(vec![-1.0], vec![1.0], vec![1.0])?);
            s.with_hamiltonian_driver()?
        }
    })
}
