use dynbc::carleman::{build_eta0, carleman_sides, interior_times, WeightFields};
use dynbc::config::{drift_coefficients, smooth_initial, smooth_truth};
use dynbc::forward::TimeWindow;
use dynbc::grid::PolarGrid;
use dynbc::inverse_initial::logconvexity_from;
use dynbc::inverse_potentials::{lipschitz_ratio, InverseProblem};
use dynbc::model::{assemble_generator, Coefficients, PotentialPair};
use dynbc::sampling::{gaussian_vec, random_potentials, rng, smooth_space_time};

fn window() -> TimeWindow {
    TimeWindow::new(1.0, 0.25, 0.75).unwrap()
}

#[test]
fn single_mode_ratio_is_scale_free() {
    let g = PolarGrid::new(16, 32, 0.3).unwrap();
    let c = Coefficients::isotropic(&g);
    let w = window();
    let prob = InverseProblem::new(&g, &c, &smooth_initial(&g), w, w.default_dt()).unwrap();
    let base = smooth_truth(&g);
    let y0 = smooth_initial(&g).bulk;
    let mode = PotentialPair::from_fns(&g, |r, p| r * p.cos(), |_| 0.0);
    let ratios: Vec<f64> = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&eps| lipschitz_ratio(&prob, &base, &y0, &base.axpy(eps, &mode), &y0).unwrap().2.unwrap())
        .collect();
    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(hi / lo - 1.0 <= 0.05, "{ratios:?}");
}

#[test]
fn drift_constant_is_finite_over_ensemble() {
    let g = PolarGrid::new(16, 32, 0.3).unwrap();
    let w = window();
    let dt = w.default_dt();
    let k_theta = w.step_indices(dt).unwrap()[1];
    let mut r = rng(3);
    let pq = random_potentials(&g, &mut r, 1.0);
    let gen = assemble_generator(&g, &drift_coefficients(&g), &pq).unwrap();
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let u0 = gaussian_vec(&mut r, g.n_nodes());
        let rep = logconvexity_from(&g, &gen, &u0, dt, k_theta, g.l2(&u0)).unwrap();
        assert!(rep.k_hat.is_finite());
        worst = worst.max(rep.k_hat);
    }
    assert!(worst >= 1.0 - 1e-12 && worst.is_finite(), "{worst}");
}

#[test]
fn carleman_ratio_settles_as_s_grows() {
    let g = PolarGrid::new(16, 32, 0.3).unwrap();
    let c = Coefficients::isotropic(&g);
    let w = window();
    let (eta, _) = build_eta0(&g).unwrap();
    let times = interior_times(&w, 128);
    let fields: Vec<_> = (0..10u64).map(|i| smooth_space_time(&g, &mut rng(40 + i), &times, w.theta)).collect();
    let maxes: Vec<f64> = [4.0, 8.0, 16.0, 32.0, 64.0]
        .iter()
        .map(|&s| {
            let wf = WeightFields::new(&g, &c, eta.clone(), 2.0, s, w, &times).unwrap();
            fields
                .iter()
                .map(|z| carleman_sides(&g, &c, &wf, z).unwrap().ratio.unwrap())
                .fold(0.0, f64::max)
        })
        .collect();
    assert!(maxes.iter().all(|m| m.is_finite() && *m > 0.0), "{maxes:?}");
    assert!(maxes[2..].windows(2).all(|p| p[1] <= p[0]), "{maxes:?}");
}
