use std::sync::Arc;

use jko_core::fokker_planck::{
    fd_solve, neumann_dictionary, weak_residual, FdOptions, TimeProfile, TimeScheme,
};
use jko_core::geometry::{EuclideanMetric, SeparablePolynomial};
use jko_core::jko::{jko_objective, jko_step, EpsRule, JkoConfig};
use jko_core::measures::{DiscreteDensity, DiscreteDomain, DriftPotential};
use jko_core::transport::{bregman_reduction, entropic_ot, exact_ot, CostMatrix};
use jko_core::{bregman_cost, quadratic_cost};
use proptest::prelude::*;

fn grid(n: usize) -> Arc<DiscreteDomain> {
    Arc::new(DiscreteDomain::interval(0.0, 1.0, n, Arc::new(EuclideanMetric::new(1))).unwrap())
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, n).prop_map(|v| normalized(&v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bregman_cost_is_a_divergence(x in -2.0f64..2.0, y in -2.0f64..2.0) {
        let c = bregman_cost(Arc::new(SeparablePolynomial::new(1, vec![0.0, 0.0, 0.5, 0.0, 0.25]).unwrap()));
        prop_assert!(c.eval(&[x], &[x]).unwrap().abs() < 1e-12);
        prop_assert!(c.eval(&[x], &[y]).unwrap() >= -1e-12);
    }

    #[test]
    fn exact_plan_is_feasible_and_beats_the_product(mu in weights(6), nu in weights(6), seed in 0u64..1000) {
        let cost = CostMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 13 + seed as usize) % 11) as f64 / 11.0).unwrap();
        let plan = exact_ot(&cost, &mu, &nu).unwrap();
        prop_assert!(plan.marginal_residual(&mu, &nu) < 1e-9);
        prop_assert!(plan.coupling.iter().all(|p| *p >= 0.0));
        let product: f64 = (0..6).flat_map(|i| (0..6).map(move |j| (i, j))).map(|(i, j)| cost.get(i, j) * mu[i] * nu[j]).sum();
        prop_assert!(plan.cost_value <= product + 1e-12);
        let dual: f64 = plan.duals.0.iter().zip(&mu).map(|(f, m)| f * m).sum::<f64>()
            + plan.duals.1.iter().zip(&nu).map(|(g, n)| g * n).sum::<f64>();
        prop_assert!((dual - plan.cost_value).abs() < 1e-9);
    }

    #[test]
    fn entropic_cost_dominates_exact(mu in weights(8), nu in weights(8), eps in 1e-3f64..1e-1) {
        let x: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
        let cost = CostMatrix::from_fn(8, 8, |i, j| (x[i] - x[j]).powi(2)).unwrap();
        let exact = exact_ot(&cost, &mu, &nu).unwrap().cost_value;
        let plan = entropic_ot(&cost, &mu, &nu, eps).unwrap();
        prop_assert!(plan.marginal_residual(&mu, &nu) < 1e-6);
        prop_assert!(plan.cost_value >= exact - 1e-9);
    }

    #[test]
    fn bregman_reduction_reconstructs_every_entry(xs in prop::collection::vec(-1.0f64..1.0, 5), ys in prop::collection::vec(-1.0f64..1.0, 5)) {
        let pot = Arc::new(SeparablePolynomial::new(1, vec![0.0, 0.0, 0.5, 0.0, 1.0 / 12.0]).unwrap());
        let c = bregman_cost(pot.clone());
        let sources: Vec<Vec<f64>> = xs.iter().map(|v| vec![*v]).collect();
        let targets: Vec<Vec<f64>> = ys.iter().map(|v| vec![*v]).collect();
        let red = bregman_reduction(pot.as_ref(), &sources, &targets).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let direct = c.eval(&sources[i], &targets[j]).unwrap();
                prop_assert!((red.reconstruct(i, j) - direct).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn densities_are_normalized(values in prop::collection::vec(0.0f64..5.0, 12).prop_filter("positive mass", |v| v.iter().sum::<f64>() > 0.1)) {
        let rho = DiscreteDensity::new(grid(12), values).unwrap();
        prop_assert!((rho.mass() - 1.0).abs() < 1e-12);
        prop_assert!(rho.values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn fd_solve_conserves_mass_and_positivity(values in prop::collection::vec(0.01f64..3.0, 24), k in 0.0f64..4.0, explicit in any::<bool>()) {
        let rho0 = DiscreteDensity::new(grid(24), values).unwrap();
        let mut opts = FdOptions::new(2e-4, 0.02);
        if explicit {
            opts.scheme = TimeScheme::ExplicitEuler;
        }
        let sol = fd_solve(&rho0, &DriftPotential::quadratic(vec![0.4], k), &opts).unwrap();
        for rho in &sol.densities {
            prop_assert!((rho.mass() - 1.0).abs() < 1e-10);
            prop_assert!(rho.values().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn constant_test_function_has_zero_weak_residual(values in prop::collection::vec(0.1f64..2.0, 16)) {
        let rho0 = DiscreteDensity::new(grid(16), values).unwrap();
        let sol = fd_solve(&rho0, &DriftPotential::zero(), &FdOptions::new(1e-3, 0.1)).unwrap();
        let one = &neumann_dictionary(rho0.domain().bounds())[0];
        let r = weak_residual(&sol, one, &TimeProfile::new(0.08).unwrap(), &DriftPotential::zero(), 1.0).unwrap();
        prop_assert!(r < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn jko_step_is_a_normalized_descent_step(values in prop::collection::vec(0.2f64..2.0, 16), tau in 5e-3f64..5e-2) {
        let prev = DiscreteDensity::new(grid(16), values).unwrap();
        let config = JkoConfig::new(tau, tau, quadratic_cost(1))
            .with_psi(DriftPotential::quadratic(vec![0.5], 2.0))
            .with_eps(EpsRule::Fixed(5e-3));
        let out = jko_step(&prev, &config).unwrap();
        prop_assert!((out.density.mass() - 1.0).abs() < 1e-9);
        prop_assert!(out.density.values().iter().all(|v| *v >= 0.0));
        prop_assert!(out.record.kkt_residual < config.inner_tol);
        let stay = jko_objective(&prev, &prev, &config).unwrap();
        prop_assert!(out.record.objective <= stay + config.inner_tol);
    }
}
