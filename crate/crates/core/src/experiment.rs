//! Subcommands of the batch runner. Each writes CSV files into the output
//! directory and returns a short text summary.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::carleman::{build_eta0, carleman_sides, interior_times, WeightFields};
use crate::config::{drift_coefficients, ExperimentConfig};
use crate::error::{Error, Result};
use crate::forward::{fmt, positivity_bound_report, solve_forward, trotter_trajectory, write_trajectory_csv, Scheme};
use crate::grid::{surface_calculus, DerivativeOps, PolarGrid};
use crate::inverse_initial::{initial_stability_harness, logconvexity_from, split_uw};
use crate::inverse_potentials::{
    discrepancy_principle, lipschitz_harness, reconstruct_potentials, synthesize_observations, InverseProblem,
    InversionConfig,
};
use crate::linalg::dot;
use crate::model::{assemble_generator, check_admissible_initial, check_admissible_potentials, Coefficients, PotentialPair};
use crate::sampling::{gaussian_vec, random_initial, random_potentials, rng, smooth_space_time};

/// Half-decade steps for the discrepancy-principle β grid.
pub const DP_FACTOR: f64 = 0.316_227_766_016_837_94;

pub const SUBCOMMANDS: &[&str] = &[
    "forward",
    "carleman-check",
    "invert",
    "stability-potentials",
    "logconvexity",
    "stability-initial",
    "selftest",
];

pub fn run(cfg: &ExperimentConfig, sub: &str, out: &Path, seed: Option<u64>) -> Result<String> {
    fs::create_dir_all(out)?;
    let mut cfg = cfg.clone();
    if let Some(s) = seed {
        cfg.carleman_seed = s;
        cfg.harness_seed = s;
    }
    match sub {
        "forward" => forward(&cfg, out),
        "carleman-check" => carleman_check(&cfg, out),
        "invert" => invert(&cfg, out),
        "stability-potentials" => stability_potentials(&cfg, out),
        "logconvexity" => logconvexity(&cfg, out),
        "stability-initial" => stability_initial(&cfg, out),
        "selftest" => selftest(&cfg, out),
        _ => Err(Error::InvalidParameter(format!(
            "unknown subcommand `{sub}` (expected one of {})",
            SUBCOMMANDS.join(", ")
        ))),
    }
}

fn table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt).unwrap_or_else(|| "nan".into())
}

fn forward(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let g = cfg.grid()?;
    let c = cfg.coefficients(&g);
    let pq = cfg.potentials(&g);
    let y0 = cfg.initial(&g);
    let w = cfg.window()?;
    let bounds = cfg.bounds()?;
    let gen = assemble_generator(&g, &c, &pq)?;
    let traj = solve_forward(&gen, &y0, None, &w, cfg.dt(), cfg.scheme)?;
    write_trajectory_csv(&out.join("trajectory.csv"), &g, &traj, cfg.output_every)?;
    let rep = positivity_bound_report(&traj, &bounds, 1e-6);
    table(
        &out.join("positivity.csv"),
        &["min_scaled", "r", "max_ratio", "lower_ok", "upper_ok"],
        [vec![
            fmt(rep.min_scaled),
            fmt(bounds.r),
            fmt(rep.max_ratio),
            rep.lower_ok.to_string(),
            rep.upper_ok.to_string(),
        ]],
    )?;
    Ok(format!(
        "forward: {} steps ({}), min y·e^(Rt) = {:.6e}, max |y|/(e^(RT)‖Y0‖∞) = {:.6e}",
        traj.len() - 1,
        traj.scheme.tag(),
        rep.min_scaled,
        rep.max_ratio
    ))
}

/// Ratios of both sides of the Carleman inequality over random smooth fields.
pub fn carleman_sweep(
    g: &PolarGrid,
    c: &Coefficients,
    cfg: &ExperimentConfig,
    n_fields: usize,
) -> Result<Vec<(f64, usize, f64, f64, Option<f64>)>> {
    let (eta, _) = build_eta0(g)?;
    let w = cfg.window()?;
    let n_steps = ((w.t1 - w.t0) / cfg.dt()).round() as usize;
    let times = interior_times(&w, n_steps);
    let fields: Vec<Vec<Vec<f64>>> = (0..n_fields)
        .map(|i| smooth_space_time(g, &mut rng(cfg.carleman_seed.wrapping_add(i as u64)), &times, w.theta))
        .collect();
    let mut rows = Vec::new();
    for &s in &cfg.s_list {
        let ws = WeightFields::new(g, c, eta.clone(), cfg.lambda, s, w, &times)?;
        let res: Vec<Result<_>> = fields
            .par_iter()
            .enumerate()
            .map(|(i, z)| carleman_sides(g, c, &ws, z).map(|r| (s, i, r.lhs, r.rhs, r.ratio)))
            .collect();
        for r in res {
            rows.push(r?);
        }
    }
    Ok(rows)
}

fn carleman_check(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let g = cfg.grid()?;
    let c = cfg.coefficients(&g);
    let rows = carleman_sweep(&g, &c, cfg, cfg.ensemble)?;
    table(
        &out.join("carleman_sweep.csv"),
        &["s", "lambda", "field_id", "lhs", "rhs", "ratio"],
        rows.iter().map(|&(s, i, l, r, q)| vec![fmt(s), fmt(cfg.lambda), i.to_string(), fmt(l), fmt(r), opt(q)]),
    )?;
    let mut summary = String::from("carleman-check:");
    for &s in &cfg.s_list {
        let m = rows
            .iter()
            .filter(|r| r.0 == s)
            .filter_map(|r| r.4)
            .fold(0.0_f64, f64::max);
        summary.push_str(&format!(" s={s}: max ratio {m:.6e};"));
    }
    Ok(summary)
}

fn invert(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let g = cfg.grid()?;
    let c = cfg.coefficients(&g);
    let w = cfg.window()?;
    let bounds = cfg.bounds()?;
    let prob = InverseProblem::new(&g, &c, &cfg.initial(&g), w, cfg.dt())?;
    let truth = cfg.potentials(&g);
    let obs = synthesize_observations(&prob, &truth, &bounds, cfg.noise, &mut rng(cfg.harness_seed))?;
    let icfg = InversionConfig::new(&g, cfg.reg_beta, cfg.max_iter, cfg.grad_tol, bounds.big_r)?;
    let (rec, beta) = if cfg.discrepancy && cfg.noise > 0.0 {
        let d = discrepancy_principle(&prob, &obs, &icfg, 1.0, DP_FACTOR, 10, 1.1)?;
        (d.reconstruction, d.beta)
    } else {
        (reconstruct_potentials(&prob, &obs, &icfg)?, cfg.reg_beta)
    };
    table(
        &out.join("history.csv"),
        &["iter", "misfit", "gnorm"],
        rec.history.iter().map(|h| vec![h.iter.to_string(), fmt(h.misfit), fmt(h.gnorm)]),
    )?;
    let est = &rec.estimate;
    let mut rows: Vec<Vec<String>> = (0..g.n_nodes())
        .filter(|&k| !g.is_trace(k))
        .map(|k| vec!["p".into(), k.to_string(), fmt(g.rho(k)), fmt(g.phi(k)), fmt(truth.p[k]), fmt(est.p[k])])
        .collect();
    rows.extend((0..g.n_phi).map(|j| {
        vec!["q".into(), j.to_string(), fmt(1.0), fmt(g.angles[j]), fmt(truth.q[j]), fmt(est.q[j])]
    }));
    table(&out.join("estimate.csv"), &["field", "node", "rho", "phi", "truth", "estimate"], rows)?;
    let err = est.sub(&truth).l2(&g) / truth.l2(&g).max(f64::MIN_POSITIVE);
    if rec.stalled && !rec.converged && rec.history.len() == 1 {
        return Err(Error::Numerical("line search failed at the initial guess".into()));
    }
    Ok(format!(
        "invert: {} iterations, converged {}, stalled {}, beta {beta:e}, relative error {err:.6e}",
        rec.history.len() - 1,
        rec.converged,
        rec.stalled
    ))
}

fn stability_potentials(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let g = cfg.grid()?;
    let c = cfg.coefficients(&g);
    let prob = InverseProblem::new(&g, &c, &cfg.initial(&g), cfg.window()?, cfg.dt())?;
    let stats = lipschitz_harness(&prob, &cfg.bounds()?, cfg.n_samples, &cfg.scales, true, cfg.harness_seed)?;
    table(
        &out.join("lipschitz.csv"),
        &["sample_id", "scale", "lhs", "rhs", "ratio"],
        stats
            .rows
            .iter()
            .map(|r| vec![r.sample.to_string(), fmt(r.scale), fmt(r.lhs), fmt(r.rhs), opt(r.ratio)]),
    )?;
    if stats.skipped == stats.rows.len() {
        return Err(Error::Numerical("every harness sample was degenerate".into()));
    }
    let mut s = format!("stability-potentials: {} skipped;", stats.skipped);
    for (eps, mx, med) in &stats.per_scale {
        s.push_str(&format!(" scale {eps:e}: max {mx:.6e}, median {med:.6e};"));
    }
    Ok(s)
}

fn logconvexity(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let g = cfg.grid()?;
    let w = cfg.window()?;
    let dt = cfg.dt();
    let [_, k_theta, _, _] = w.step_indices(dt)?;
    let mut r = rng(cfg.harness_seed);
    let pq = random_potentials(&g, &mut r, 0.5 * cfg.big_r);
    let u0: Vec<f64> = gaussian_vec(&mut r, g.n_nodes());
    let m = g.l2(&u0);
    let mut rows = Vec::new();
    let mut summary = String::from("logconvexity:");
    for (case, c) in [("self_adjoint", cfg.coefficients(&g).without_drift()), ("drift", drift_coefficients(&g))] {
        let gen = assemble_generator(&g, &c, &pq)?;
        let rep = logconvexity_from(&g, &gen, &u0, dt, k_theta, m)?;
        rows.extend(rep.rows.iter().map(|&(t, n, b)| vec![case.to_string(), fmt(t), fmt(n), fmt(b)]));
        summary.push_str(&format!(
            " {case}: K_hat {:.6e}, min second difference {:.3e};",
            rep.k_hat, rep.min_second_difference
        ));
    }
    table(&out.join("logconvexity.csv"), &["case", "t", "norm_u", "bound"], rows)?;
    Ok(summary)
}

fn stability_initial(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let g = cfg.grid()?;
    let c = cfg.coefficients(&g);
    let prob = InverseProblem::new(&g, &c, &cfg.initial(&g), cfg.window()?, cfg.dt())?;
    let curve = initial_stability_harness(&prob, &cfg.bounds()?, cfg.n_samples, cfg.max_mode, cfg.gap, cfg.harness_seed)?;
    table(
        &out.join("stability_initial.csv"),
        &["sample_id", "mode", "e_prime", "initial_gap", "bound_value", "margin", "retained"],
        curve.samples.iter().map(|s| {
            vec![
                s.sample.to_string(),
                s.mode.to_string(),
                fmt(s.e_prime),
                fmt(s.gap),
                fmt(s.bound),
                fmt(s.margin),
                s.retained.to_string(),
            ]
        }),
    )?;
    Ok(format!(
        "stability-initial: C = {:.6e}, C1 = {:.6e}, log-log slope {:.4}, {:.1} decades",
        curve.c, curve.c1, curve.loglog_slope, curve.decades
    ))
}

/// A named check with its measured value and pass flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

fn at_most(name: &'static str, value: f64, threshold: f64) -> Check {
    Check {
        name,
        value,
        threshold,
        pass: value <= threshold,
    }
}

fn at_least(name: &'static str, value: f64, threshold: f64) -> Check {
    Check {
        name,
        value,
        threshold,
        pass: value >= threshold,
    }
}

/// Invariant suite at the configured geometry with small ensembles.
pub fn selftest_checks(cfg: &ExperimentConfig) -> Result<Vec<Check>> {
    let g = cfg.grid()?;
    let w = cfg.window()?;
    let dt = cfg.dt();
    let bounds = cfg.bounds()?;
    let c = cfg.coefficients(&g);
    let ops = DerivativeOps::new(&g);
    let mut r = rng(cfg.harness_seed);
    let mut out = Vec::new();

    let gen0 = assemble_generator(&g, &c, &PotentialPair::zero(&g))?;
    let ones = vec![1.0; g.n_nodes()];
    let k = max_abs(&gen0.gen0_apply(&ones));
    out.push(at_most("generator_constant_kernel", k, 1e-12));
    let gd = assemble_generator(&g, &drift_coefficients(&g), &PotentialPair::zero(&g))?;
    out.push(at_most("generator_constant_kernel_drift", max_abs(&gd.gen0_apply(&ones)), 1e-12));

    let (u, v) = (gaussian_vec(&mut r, g.n_nodes()), gaussian_vec(&mut r, g.n_nodes()));
    let sym = (dot(&gen0.s0_apply(&u), &v) - dot(&u, &gen0.s0_apply(&v))).abs();
    out.push(at_most("generator_symmetry", sym, 1e-10));

    let x = gaussian_vec(&mut r, g.n_phi);
    let z = gaussian_vec(&mut r, g.n_phi);
    out.push(at_most("surface_summation_by_parts", surface_calculus(&g, &x, &z), 1e-12));

    let traj = solve_forward(&gen0, &crate::grid::State::constant(&g, 1.0), None, &w, dt, Scheme::ImplicitEuler)?;
    let drift = traj.states.iter().flatten().map(|y| (y - 1.0).abs()).fold(0.0, f64::max);
    out.push(at_most("markov_constant_drift", drift, 1e-10));

    let mut lo = f64::INFINITY;
    let mut hi = 0.0_f64;
    for _ in 0..3 {
        let pq = random_potentials(&g, &mut r, bounds.big_r);
        let y0 = random_initial(&g, &ops, &mut r, &bounds);
        if !check_admissible_potentials(&g, &pq, &bounds).admissible
            || !check_admissible_initial(&g, &ops, &y0, &bounds).admissible
        {
            return Err(Error::Numerical("sampler produced inadmissible data".into()));
        }
        let gen = assemble_generator(&g, &c, &pq)?;
        let rep = positivity_bound_report(&trotter_trajectory(&gen, &y0, &w, dt)?, &bounds, 1e-6);
        lo = lo.min(rep.min_scaled - bounds.r);
        hi = hi.max(rep.max_ratio);
    }
    out.push(at_least("positivity_lower_bound_margin", lo, -1e-6));
    out.push(at_most("boundedness_ratio", hi, 1.0 + 1e-6));

    let (eta, eta_rep) = build_eta0(&g)?;
    out.push(at_least("eta0_conditions", eta_rep.ok as u8 as f64, 1.0));
    let times = interior_times(&w, ((w.t1 - w.t0) / dt).round() as usize);
    let ws = WeightFields::new(&g, &c, eta, cfg.lambda, cfg.s_list[0], w, &times)?;
    out.push(at_least("weight_properties", ws.report(&g).all_hold() as u8 as f64, 1.0));
    let z = smooth_space_time(&g, &mut r, &times, w.theta);
    let ratio = carleman_sides(&g, &c, &ws, &z)?.ratio.unwrap_or(f64::INFINITY);
    out.push(at_most("carleman_ratio_finite", ratio, f64::MAX));

    let prob = InverseProblem::new(&g, &c, &cfg.initial(&g), w, dt)?;
    let pq = cfg.potentials(&g);
    let states = prob.states(&pq)?;
    let dx = gaussian_vec(&mut r, prob.n_params());
    let vt = gaussian_vec(&mut r, g.n_nodes());
    let vd: Vec<Vec<f64>> = (0..prob.k1 - prob.k0).map(|_| gaussian_vec(&mut r, prob.omega.len())).collect();
    let (lt, ld) = prob.linearized(&pq, &states, &dx)?;
    let a = dot(&lt, &vt) + ld.iter().zip(&vd).map(|(x, y)| dot(x, y)).sum::<f64>();
    let b = dot(&dx, &prob.adjoint(&pq, &states, &vt, &vd)?);
    out.push(at_most("adjoint_identity", (a - b).abs() / a.abs().max(b.abs()), 1e-10));

    let pq2 = random_potentials(&g, &mut r, 0.5 * bounds.big_r);
    let y0b = random_initial(&g, &ops, &mut r, &bounds);
    let ga = assemble_generator(&g, &c, &pq)?;
    let gb = assemble_generator(&g, &c, &pq2)?;
    let ta = solve_forward(&ga, &cfg.initial(&g), None, &w, dt, Scheme::ImplicitEuler)?;
    let tb = solve_forward(&gb, &y0b, None, &w, dt, Scheme::ImplicitEuler)?;
    out.push(at_most("uw_superposition", split_uw(&g, &ga, &gb, &ta, &tb)?.defect, 1e-6));

    let [_, k_theta, _, _] = w.step_indices(dt)?;
    let gsa = assemble_generator(&g, &c.without_drift(), &pq2)?;
    let u0 = gaussian_vec(&mut r, g.n_nodes());
    let rep = logconvexity_from(&g, &gsa, &u0, dt, k_theta, g.l2(&u0))?;
    out.push(at_most("logconvexity_k_hat", rep.k_hat, 1.0 + 1e-3));
    out.push(at_least("logconvexity_second_difference", rep.min_second_difference, -1e-8));
    Ok(out)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn selftest(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    let checks = selftest_checks(cfg)?;
    table(
        &out.join("selftest.csv"),
        &["check", "value", "threshold", "pass"],
        checks
            .iter()
            .map(|c| vec![c.name.to_string(), fmt(c.value), fmt(c.threshold), c.pass.to_string()]),
    )?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(format!("selftest: {} checks passed", checks.len()))
    } else {
        Err(Error::Numerical(format!("selftest failed: {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig::parse("[geometry]\nn_r = 8\nn_phi = 16\n[harness]\nn_samples = 2\nmax_mode = 3\n[carleman]\nensemble = 2\n").unwrap()
    }

    #[test]
    fn unknown_subcommand_is_a_precondition_error() {
        let d = tempfile::tempdir().unwrap();
        let e = run(&small(), "bogus", d.path(), None).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn selftest_passes_on_small_grid() {
        let checks = selftest_checks(&small()).unwrap();
        for c in &checks {
            assert!(c.pass, "{c:?}");
        }
    }

    #[test]
    fn every_subcommand_writes_headed_csv() {
        let d = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.max_iter = 3;
        for sub in SUBCOMMANDS {
            run(&cfg, sub, d.path(), Some(3)).unwrap();
        }
        for e in fs::read_dir(d.path()).unwrap() {
            let text = fs::read_to_string(e.unwrap().path()).unwrap();
            let header = text.lines().next().unwrap();
            assert!(header.chars().all(|c| c.is_ascii_lowercase() || c == '_' || c == ','), "{header}");
        }
    }
}
