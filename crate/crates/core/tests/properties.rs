//! Randomized invariants across the library.

use mvergodic::control::{feedback, hamiltonian};
use mvergodic::coupling::{build_lyapunov, pi1, pi2};
use mvergodic::ltb::{fit_exponential, fit_inverse_t};
use mvergodic::measure::{moment, wasserstein, wasserstein_assignment};
use mvergodic::model::Constants;
use mvergodic::rng::{Channel, CounterStream, Noise};
use mvergodic::sde::simulate_mv;
use mvergodic::{preset, EmpiricalMeasure};
use proptest::prelude::*;

fn cloud(d: usize, n: usize) -> impl Strategy<Value = EmpiricalMeasure> {
    prop::collection::vec(-5.0f64..5.0, n * d).prop_map(move |v| EmpiricalMeasure::uniform(d, v).unwrap())
}

fn triple() -> impl Strategy<Value = (EmpiricalMeasure, EmpiricalMeasure, EmpiricalMeasure)> {
    (1usize..=2, 2usize..=12).prop_flat_map(|(d, n)| (cloud(d, n), cloud(d, n), cloud(d, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wasserstein_is_a_metric((a, b, c) in triple(), p in prop::sample::select(vec![1.0, 2.0])) {
        let ab = wasserstein(&a, &b, p).unwrap();
        prop_assert!((ab - wasserstein(&b, &a, p).unwrap()).abs() <= 1e-10);
        prop_assert!(wasserstein(&a, &a, p).unwrap() <= 1e-12);
        prop_assert!(ab <= wasserstein(&a, &c, p).unwrap() + wasserstein(&c, &b, p).unwrap() + 1e-10);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn permuting_atoms_is_invisible((a, _b, _c) in triple(), shift in 0usize..12) {
        let d = a.dim();
        let n = a.len();
        let k = shift % n;
        let pts: Vec<f64> = (0..n).flat_map(|i| a.point((i + k) % n).to_vec()).collect();
        let perm = EmpiricalMeasure::uniform(d, pts).unwrap();
        prop_assert!(wasserstein(&a, &perm, 2.0).unwrap() <= 1e-12);
    }

    #[test]
    fn w1_below_w2((a, b, _c) in triple()) {
        prop_assert!(wasserstein(&a, &b, 1.0).unwrap() <= wasserstein(&a, &b, 2.0).unwrap() + 1e-12);
    }

    #[test]
    fn sorted_path_equals_assignment(a in cloud(1, 15), b in cloud(1, 15), p in prop::sample::select(vec![1.0, 2.0])) {
        let fast = wasserstein(&a, &b, p).unwrap();
        let slow = wasserstein_assignment(&a, &b, p).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-10, "{} vs {}", fast, slow);
    }

    #[test]
    fn weights_normalized_and_moments_ordered(a in cloud(2, 9)) {
        let total: f64 = a.weights().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        let m1 = moment(&a, 1.0).unwrap();
        let m2 = moment(&a, 2.0).unwrap();
        let m4 = moment(&a, 4.0).unwrap();
        prop_assert!(m1 <= m2 + 1e-12 && m2 <= m4 + 1e-12);
    }

    #[test]
    fn dirac_translation_distance(x in -5.0f64..5.0, y in -5.0f64..5.0) {
        let w = wasserstein(&EmpiricalMeasure::dirac(&[x]), &EmpiricalMeasure::dirac(&[y]), 2.0).unwrap();
        prop_assert!((w - (x - y).abs()).abs() <= 1e-12);
    }

    #[test]
    fn counter_streams_are_reproducible(seed in any::<u64>(), i in 0usize..1000, k in 0usize..1000) {
        let noise = Noise::new(seed, Channel::Interacting);
        let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
        noise.fill_normals(i, k, &mut a);
        noise.fill_normals(i, k, &mut b);
        prop_assert_eq!(a, b);
        let mut other = [0.0; 3];
        Noise::new(seed, Channel::Decoupled).fill_normals(i, k, &mut other);
        prop_assert_ne!(a, other);
        let u = CounterStream::new(seed, Channel::Audit, i as u64, k as u64).uniform();
        prop_assert!((0.0..1.0).contains(&u));
    }

    #[test]
    fn mollifiers_partition_unity(r in 0.0f64..10.0, delta in 1e-3f64..1.0, h in 1e-7f64..1e-3) {
        let (a, b) = (pi1(r, delta), pi2(r, delta));
        prop_assert!((a * a + b * b - 1.0).abs() <= 1e-14);
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        let lip = std::f64::consts::PI / delta + 1e-6;
        prop_assert!((pi1(r + h, delta) - a).abs() <= lip * h * (1.0 + 1e-9));
        prop_assert!((pi2(r + h, delta) - b).abs() <= lip * h * (1.0 + 1e-9));
    }

    #[test]
    fn hamiltonian_is_the_infimum(x in -3.0f64..3.0, z in -6.0f64..6.0, a in -1.0f64..1.0) {
        let s = preset("control-lq").unwrap();
        let mu = EmpiricalMeasure::dirac(&[0.3]);
        let (h, phi) = hamiltonian(&s, &[x], &mu, &[z]).unwrap();
        prop_assert!(phi[0] >= -1.0 && phi[0] <= 1.0);
        prop_assert_eq!(feedback(&s, &[x], &mu, &[z]).unwrap(), phi.clone());
        let l = |a: f64| x * x + a * a + z * a;
        prop_assert!(h <= l(a) + 1e-12);
        prop_assert!((h - l(phi[0])).abs() <= 1e-8);
    }

    #[test]
    fn hamiltonian_lipschitz_in_z(x in -3.0f64..3.0, z in -6.0f64..6.0, z2 in -6.0f64..6.0) {
        let s = preset("control-lq").unwrap();
        let mu = EmpiricalMeasure::dirac(&[0.0]);
        let h1 = hamiltonian(&s, &[x], &mu, &[z]).unwrap().0;
        let h2 = hamiltonian(&s, &[x], &mu, &[z2]).unwrap().0;
        prop_assert!((h1 - h2).abs() <= s.control_set.as_ref().unwrap().sup_ra() * (z - z2).abs() + 1e-12);
    }

    #[test]
    fn exact_decay_laws_are_recovered(c in 0.1f64..5.0, eta in 0.2f64..3.0) {
        let h = [1.0, 2.0, 3.0, 4.0];
        let r: Vec<f64> = h.iter().map(|t| c * (-eta * t).exp()).collect();
        let (c_hat, eta_hat, _, r2) = fit_exponential(&h, &r).unwrap();
        prop_assert!((eta_hat - eta).abs() <= 1e-9 * eta.max(1.0));
        prop_assert!((c_hat - c).abs() <= 1e-8 * c.max(1.0));
        prop_assert!(r2 > 0.999_999);
        let inv: Vec<f64> = h.iter().map(|t| c / t).collect();
        prop_assert!((fit_inverse_t(&h, &inv).0 - c).abs() <= 1e-10 * c.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lyapunov_tables_hold_their_invariants(eta in 0.6f64..3.0, ksx in 0.0f64..0.5, sigma0 in 0.5f64..1.5, r_ball in 0.0f64..3.0, kbx in 0.0f64..2.0, m_b in 0.0f64..2.0) {
        let c = Constants { eta, k_s_x: ksx, sigma0, r_ball, k_b_x: kbx, m_b, ..Constants::default() };
        let t = build_lyapunov(&c, 10.0, 200).unwrap();
        prop_assert!(t.invariant_violations(1e-6).is_empty(), "{:?}", t.invariant_violations(1e-6));
        prop_assert!(t.phi[0].abs() <= 1e-15);
    }

    #[test]
    fn ensembles_ignore_thread_count(seed in any::<u64>(), start in -2.0f64..2.0) {
        let s = preset("sine-weak").unwrap();
        let theta = EmpiricalMeasure::dirac(&[start]);
        let run = |k: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .unwrap()
                .install(|| simulate_mv(&s, &theta, 0.01, 0.2, 300, seed).unwrap().0.terminal().to_vec())
        };
        let one = run(1);
        prop_assert!(one.iter().all(|v| v.is_finite()));
        prop_assert_eq!(one, run(4));
    }
}

#[test]
fn preset_lyapunov_tables() {
    for name in ["ou-attract", "ou-repel", "sine-weak", "control-lq"] {
        let c = preset(name).unwrap().constants;
        let t = build_lyapunov(&c, 12.0, 1000).unwrap();
        assert!(t.invariant_violations(1e-6).is_empty(), "{name}: {:?}", t.invariant_violations(1e-6));
    }
}
