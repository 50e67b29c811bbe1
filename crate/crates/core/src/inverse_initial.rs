//! Splitting `V = ∂_t Z = U + W`, logarithmic convexity of the homogeneous
//! part, and the logarithmic stability harness for initial data.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{solve_steps, Scheme, Trajectory};
use crate::grid::{DerivativeOps, PolarGrid, State};
use crate::inverse_potentials::InverseProblem;
use crate::linalg::LinearSystem;
use crate::model::{check_admissible_initial, AdmissibleBounds, DiscreteGenerator, PotentialPair};
use crate::sampling::{random_initial, random_potentials, rng};

#[derive(Debug, Clone)]
pub struct UwSplit {
    pub v: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub w: Vec<Vec<f64>>,
    /// `max_k ‖V_k − U_k − W_k‖ / max_k ‖V_k‖` (0 when `V ≡ 0`).
    pub defect: f64,
    pub max_v: f64,
    pub max_w: f64,
}

/// `V_0 = 𝒜Z_0 + (Δp_eff)Ỹ_0`, `V_k = (Z_k − Z_{k−1})/dt`; `W` is forced by
/// `Δp_eff·(Ỹ_{k+1} − Ỹ_k)/dt` from zero data and `U` is homogeneous from `V_0`.
/// For implicit Euler this splitting is exact up to solver tolerance.
pub fn split_uw(
    g: &PolarGrid,
    gen: &DiscreteGenerator,
    gen_t: &DiscreteGenerator,
    y: &Trajectory,
    y_t: &Trajectory,
) -> Result<UwSplit> {
    if y.scheme != Scheme::ImplicitEuler || y_t.scheme != Scheme::ImplicitEuler {
        return Err(Error::InvalidParameter("the U/W splitting needs implicit-Euler trajectories".into()));
    }
    if y.len() != y_t.len() || y.dt != y_t.dt || y.states[0].len() != g.n_nodes() {
        return Err(Error::Dimension("trajectories use different discretizations".into()));
    }
    if gen.s0 != gen_t.s0 {
        return Err(Error::Dimension("trajectories use different drift–diffusion operators".into()));
    }
    let (n_steps, dt) = (y.len() - 1, y.dt);
    let dpeff: Vec<f64> = gen.peff().iter().zip(gen_t.peff()).map(|(a, b)| a - b).collect();
    let z: Vec<Vec<f64>> = y.states.iter().zip(&y_t.states).map(|(a, b)| sub(a, b)).collect();
    let mut v = Vec::with_capacity(n_steps + 1);
    let gz = gen.apply(&z[0]);
    v.push((0..g.n_nodes()).map(|i| gz[i] + dpeff[i] * y_t.states[0][i]).collect::<Vec<_>>());
    for k in 1..=n_steps {
        v.push(z[k].iter().zip(&z[k - 1]).map(|(a, b)| (a - b) / dt).collect());
    }
    let mut src = vec![vec![0.0; g.n_nodes()]];
    for k in 1..=n_steps {
        src.push(
            (0..g.n_nodes())
                .map(|i| dpeff[i] * (y_t.states[k][i] - y_t.states[k - 1][i]) / dt)
                .collect(),
        );
    }
    let w = solve_steps(gen, &vec![0.0; g.n_nodes()], Some(&src), dt, n_steps, Scheme::ImplicitEuler)?.states;
    let u = solve_steps(gen, &v[0], None, dt, n_steps, Scheme::ImplicitEuler)?.states;
    let mut max_v = 0.0_f64;
    let mut max_w = 0.0_f64;
    let mut max_d = 0.0_f64;
    for k in 0..=n_steps {
        max_v = max_v.max(g.l2(&v[k]));
        max_w = max_w.max(g.l2(&w[k]));
        let d: Vec<f64> = (0..g.n_nodes()).map(|i| v[k][i] - u[k][i] - w[k][i]).collect();
        max_d = max_d.max(g.l2(&d));
    }
    Ok(UwSplit {
        defect: if max_v > 0.0 { max_d / max_v } else { max_d },
        v,
        u,
        w,
        max_v,
        max_w,
    })
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogConvexityReport {
    pub m: f64,
    pub k_hat: f64,
    /// `(t, ‖U(t)‖, M^{1−t/θ}‖U(θ)‖^{t/θ})` for `t ∈ [dt, θ]`.
    pub rows: Vec<(f64, f64, f64)>,
    /// Smallest second difference of `log‖U(t_k)‖²` over `[0, θ]`.
    pub min_second_difference: f64,
}

/// `K̂ = max_{t∈[dt,θ]} ‖U(t)‖ / (M^{1−t/θ}‖U(θ)‖^{t/θ})` with ℒ² norms.
pub fn logconvexity_check(g: &PolarGrid, u: &[Vec<f64>], dt: f64, k_theta: usize, m: f64) -> Result<LogConvexityReport> {
    if u.len() <= k_theta || k_theta < 2 {
        return Err(Error::Dimension("trajectory must reach θ with at least two steps".into()));
    }
    let norms: Vec<f64> = u[..=k_theta].iter().map(|x| g.l2(x)).collect();
    let n_theta = norms[k_theta];
    if n_theta == 0.0 {
        return Err(Error::InvalidParameter("degenerate log-convexity report: U(θ) = 0".into()));
    }
    if norms[0] > m * (1.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!("‖U(0)‖ = {} exceeds M = {m}", norms[0])));
    }
    let theta = k_theta as f64 * dt;
    let mut rows = Vec::with_capacity(k_theta);
    let mut k_hat = 0.0_f64;
    for k in 1..=k_theta {
        let s = k as f64 * dt / theta;
        let bound = (((1.0 - s) * m.ln()) + s * n_theta.ln()).exp();
        k_hat = k_hat.max(norms[k] / bound);
        rows.push((k as f64 * dt, norms[k], bound));
    }
    let logs: Vec<f64> = norms.iter().map(|n| (n * n).ln()).collect();
    let min_second_difference = logs
        .windows(3)
        .map(|w| w[0] - 2.0 * w[1] + w[2])
        .fold(f64::INFINITY, f64::min);
    Ok(LogConvexityReport {
        m,
        k_hat,
        rows,
        min_second_difference,
    })
}

/// Ground mode of `gen` by power iteration of the implicit-Euler step,
/// normalized in ℒ²; returns the mode and its decay rate `μ`.
pub fn ground_mode(g: &PolarGrid, gen: &DiscreteGenerator, start: &[f64], tau: f64, iters: usize) -> Result<(Vec<f64>, f64)> {
    let sys = LinearSystem::new(gen.shifted(tau, true))?;
    let mut v = start.to_vec();
    let mut gain = 1.0;
    for _ in 0..iters {
        let rhs: Vec<f64> = v.iter().zip(&gen.mass).map(|(v, m)| v * m).collect();
        let w = sys.solve(&rhs)?;
        let n = g.l2(&w);
        if n == 0.0 {
            return Err(Error::InvalidParameter("power iteration collapsed".into()));
        }
        gain = n / g.l2(&v);
        v = w.iter().map(|x| x / n).collect();
    }
    // one IE step multiplies the mode by 1/(1 + τμ)
    Ok((v, (1.0 / gain - 1.0) / tau))
}

/// Homogeneous solve from `u0` over `[0, θ]` followed by [`logconvexity_check`].
pub fn logconvexity_from(
    g: &PolarGrid,
    gen: &DiscreteGenerator,
    u0: &[f64],
    dt: f64,
    k_theta: usize,
    m: f64,
) -> Result<LogConvexityReport> {
    let u = solve_steps(gen, u0, None, dt, k_theta, Scheme::ImplicitEuler)?.states;
    logconvexity_check(g, &u, dt, k_theta, m)
}

/// One stability sample: `E'`, the initial gap and the fitted bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilitySample {
    pub sample: usize,
    pub mode: usize,
    pub e_prime: f64,
    pub gap: f64,
    pub bound: f64,
    pub margin: f64,
    pub retained: bool,
}

#[derive(Debug, Clone)]
pub struct StabilityCurve {
    pub samples: Vec<StabilitySample>,
    pub c: f64,
    pub c1: f64,
    /// Least-squares slope of `log gap` against `log E'` over retained samples.
    pub loglog_slope: f64,
    /// `log10(max E' / min E')` over retained samples.
    pub decades: f64,
}

/// `Ỹ0 = Y0 + gap·φ_m`, `φ_m ∝ ρ^m cos mφ` normalized in ℒ², `m = 1..=max_mode`.
/// Potentials are shared. `C₁ = 1/(2 max E')` makes every sample satisfy
/// `C₁E' < 1`; `C` is the smallest constant for which the bound holds.
pub fn initial_stability_harness(
    prob: &InverseProblem,
    bounds: &AdmissibleBounds,
    n_samples: usize,
    max_mode: usize,
    gap: f64,
    seed: u64,
) -> Result<StabilityCurve> {
    let g = &prob.grid;
    let ops = DerivativeOps::new(g);
    let raw: Vec<Result<Vec<(usize, usize, f64, f64)>>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut r = rng(seed.wrapping_add(s as u64));
            let pq: PotentialPair = random_potentials(g, &mut r, 0.5 * bounds.big_r);
            let y0 = random_initial(g, &ops, &mut r, bounds).bulk;
            let base = prob.states_from(&pq, &y0)?;
            let mut out = Vec::new();
            for m in 1..=max_mode {
                let mode = g.sample(|rho, phi| rho.powi(m as i32) * (m as f64 * phi).cos());
                let nm = g.l2(&mode);
                let y0t: Vec<f64> = y0.iter().zip(&mode).map(|(a, b)| a + gap * b / nm).collect();
                let rep = check_admissible_initial(g, &ops, &State::from_bulk(g, y0t.clone()), bounds);
                if !rep.admissible {
                    continue;
                }
                let other = prob.states_from(&pq, &y0t)?;
                let (h2, om) = prob.data_distance(&base, &other);
                let d = sub(&y0, &y0t);
                out.push((s, m, h2 + om, g.l2(&d)));
            }
            Ok(out)
        })
        .collect();
    let mut pts = Vec::new();
    for r in raw {
        pts.extend(r?);
    }
    let usable: Vec<&(usize, usize, f64, f64)> = pts.iter().filter(|p| p.2 > 0.0 && p.3 > 0.0).collect();
    if usable.is_empty() {
        return Err(Error::InvalidParameter("no admissible nondegenerate stability samples".into()));
    }
    let max_e = usable.iter().map(|p| p.2).fold(0.0_f64, f64::max);
    let min_e = usable.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
    let c1 = 0.5 / max_e;
    let c = usable
        .iter()
        .map(|p| p.3 * (-(c1 * p.2).ln()))
        .fold(0.0_f64, f64::max)
        * (1.0 + 1e-12);
    let samples = pts
        .iter()
        .map(|&(sample, mode, e, gap)| {
            let retained = e > 0.0 && gap > 0.0 && c1 * e < 1.0;
            let bound = if retained { -c / (c1 * e).ln() } else { f64::NAN };
            StabilitySample {
                sample,
                mode,
                e_prime: e,
                gap,
                bound,
                margin: bound - gap,
                retained,
            }
        })
        .collect::<Vec<_>>();
    let (xs, ys): (Vec<f64>, Vec<f64>) = usable.iter().map(|p| (p.2.ln(), p.3.ln())).unzip();
    Ok(StabilityCurve {
        samples,
        c,
        c1,
        loglog_slope: slope(&xs, &ys),
        decades: (max_e / min_e).log10(),
    })
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::TimeWindow;
    use crate::model::{assemble_generator, Coefficients};
    use crate::sampling::{gaussian_vec, smooth_bulk};

    fn grid() -> PolarGrid {
        PolarGrid::new(8, 16, 0.3).unwrap()
    }

    fn traj(gen: &DiscreteGenerator, y0: &[f64], dt: f64, n: usize) -> Trajectory {
        solve_steps(gen, y0, None, dt, n, Scheme::ImplicitEuler).unwrap()
    }

    #[test]
    fn split_without_potential_difference() {
        let g = grid();
        let c = Coefficients::isotropic(&g);
        let pq = PotentialPair::constant(&g, 0.3);
        let gen = assemble_generator(&g, &c, &pq).unwrap();
        let y0 = g.sample(|r, p| 1.0 + 0.2 * r * p.cos());
        let y0t = g.sample(|r, p| 1.0 + 0.1 * r * r * (2.0 * p).sin());
        let s = split_uw(&g, &gen, &gen, &traj(&gen, &y0, 0.01, 50), &traj(&gen, &y0t, 0.01, 50)).unwrap();
        assert!(s.w.iter().flatten().all(|v| *v == 0.0));
        assert!(s.defect <= 1e-9, "{}", s.defect);
        let s = split_uw(&g, &gen, &gen, &traj(&gen, &y0, 0.01, 20), &traj(&gen, &y0, 0.01, 20)).unwrap();
        assert!(s.v.iter().chain(&s.u).chain(&s.w).flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn split_superposition_random() {
        let g = grid();
        let c = Coefficients::from_fns(&g, |_| 1.0, |_| 0.2, |x, y| [0.3 * y, -0.2 * x], |_| 1.0, |p| 0.5 * p.sin(), 0.5);
        let mut r = rng(4);
        let pq = random_potentials(&g, &mut r, 1.0);
        let pqt = random_potentials(&g, &mut r, 1.0);
        let gen = assemble_generator(&g, &c, &pq).unwrap();
        let gent = assemble_generator(&g, &c, &pqt).unwrap();
        let y0: Vec<f64> = smooth_bulk(&g, &mut r, 3).iter().map(|v| 2.0 + 0.1 * v).collect();
        let y0t: Vec<f64> = smooth_bulk(&g, &mut r, 3).iter().map(|v| 2.0 + 0.1 * v).collect();
        let s = split_uw(&g, &gen, &gent, &traj(&gen, &y0, 0.005, 100), &traj(&gent, &y0t, 0.005, 100)).unwrap();
        assert!(s.defect <= 1e-6, "{}", s.defect);
        assert!(s.max_w > 0.0);
    }

    #[test]
    fn split_rejects_crank_nicolson() {
        let g = grid();
        let gen = assemble_generator(&g, &Coefficients::isotropic(&g), &PotentialPair::zero(&g)).unwrap();
        let y0 = vec![1.0; g.n_nodes()];
        let a = solve_steps(&gen, &y0, None, 0.01, 4, Scheme::CrankNicolson).unwrap();
        assert!(split_uw(&g, &gen, &gen, &a, &a).is_err());
    }

    #[test]
    fn ground_mode_is_tight() {
        let g = grid();
        let gen = assemble_generator(&g, &Coefficients::isotropic(&g), &PotentialPair::zero(&g)).unwrap();
        let start: Vec<f64> = gaussian_vec(&mut rng(2), g.n_nodes()).iter().map(|v| 1.0 + 0.1 * v).collect();
        let (mode, mu) = ground_mode(&g, &gen, &start, 0.1, 200).unwrap();
        assert!(mu.abs() < 1e-8);
        let rep = logconvexity_from(&g, &gen, &mode, 0.01, 50, g.l2(&mode)).unwrap();
        assert!((rep.k_hat - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn self_adjoint_case_has_unit_constant() {
        let g = grid();
        let c = Coefficients::isotropic(&g);
        let mut r = rng(8);
        let pq = random_potentials(&g, &mut r, 1.0);
        let gen = assemble_generator(&g, &c, &pq).unwrap();
        for _ in 0..5 {
            let u0 = gaussian_vec(&mut r, g.n_nodes());
            let rep = logconvexity_from(&g, &gen, &u0, 0.01, 50, g.l2(&u0)).unwrap();
            assert!(rep.k_hat <= 1.0 + 1e-3, "{}", rep.k_hat);
            assert!(rep.min_second_difference >= -1e-8);
        }
    }

    #[test]
    fn degenerate_report() {
        let g = grid();
        let u = vec![vec![0.0; g.n_nodes()]; 5];
        assert!(logconvexity_check(&g, &u, 0.1, 4, 1.0).is_err());
    }

    #[test]
    fn stability_bound_holds_on_retained_samples() {
        let g = grid();
        let c = Coefficients::isotropic(&g);
        let w = TimeWindow::new(1.0, 0.25, 0.75).unwrap();
        let prob = InverseProblem::new(&g, &c, &State::constant(&g, 1.0), w, w.t1 / 48.0).unwrap();
        let b = AdmissibleBounds::new(0.5, 2.0).unwrap();
        let curve = initial_stability_harness(&prob, &b, 3, 4, 0.02, 1).unwrap();
        assert!(curve.samples.iter().filter(|s| s.retained).all(|s| s.margin >= 0.0));
        assert!(curve.c > 0.0 && curve.c1 > 0.0);
    }
}
