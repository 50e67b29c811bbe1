//! Time integration, Trotter splitting, and positivity/boundedness reports.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{PolarGrid, State};
use crate::linalg::LinearSystem;
use crate::model::{AdmissibleBounds, DiscreteGenerator};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeWindow {
    pub t_end: f64,
    pub t0: f64,
    pub t1: f64,
    pub theta: f64,
}

impl TimeWindow {
    pub fn new(t_end: f64, t0: f64, t1: f64) -> Result<Self> {
        if !(t0 < t1) {
            return Err(Error::InvalidWindow("window requires t0 < t1".into()));
        }
        if !(t0 > 0.0) {
            return Err(Error::InvalidWindow("window requires t0 > 0".into()));
        }
        if !(t1 <= t_end) {
            return Err(Error::InvalidWindow("window requires t1 <= T".into()));
        }
        Ok(Self {
            t_end,
            t0,
            t1,
            theta: 0.5 * (t0 + t1),
        })
    }

    pub fn default_dt(&self) -> f64 {
        (self.t1 - self.t0) / 128.0
    }

    /// Step indices of `t0`, `θ`, `t1`, `T` for step `dt`.
    pub fn step_indices(&self, dt: f64) -> Result<[usize; 4]> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt = {dt} must be positive")));
        }
        let segs = [
            ("t0", self.t0),
            ("theta - t0", self.theta - self.t0),
            ("t1 - theta", self.t1 - self.theta),
            ("T - t1", self.t_end - self.t1),
        ];
        let mut idx = [0usize; 4];
        let mut acc = 0usize;
        for (m, (what, len)) in segs.iter().enumerate() {
            let n = (len / dt).round();
            if (n * dt - len).abs() > 1e-9 * len.abs().max(dt) {
                return Err(Error::MisalignedStep { dt, what, value: *len });
            }
            acc += n as usize;
            idx[m] = acc;
        }
        Ok(idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    ImplicitEuler,
    CrankNicolson,
}

impl Scheme {
    pub fn tag(&self) -> &'static str {
        match self {
            Scheme::ImplicitEuler => "implicit_euler",
            Scheme::CrankNicolson => "crank_nicolson",
        }
    }
}

/// Stacked states on a uniform time grid starting at 0.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub scheme: Scheme,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || (k * self.dt - t).abs() > 1e-9 * self.dt.max(t.abs()) {
            return None;
        }
        let k = k as usize;
        (k < self.states.len()).then_some(k)
    }

    pub fn state(&self, g: &PolarGrid, k: usize) -> State {
        State::from_bulk(g, self.states[k].clone())
    }

    /// Backward difference `(y_k − y_{k−1})/dt`, `k ≥ 1`.
    pub fn backward_derivative(&self, k: usize) -> Vec<f64> {
        self.states[k]
            .iter()
            .zip(&self.states[k - 1])
            .map(|(a, b)| (a - b) / self.dt)
            .collect()
    }
}

/// Advances `n_steps` from `y0`. `source[k]` is the unweighted right-hand side
/// at `t = k·dt` (implicit Euler uses `f_{k+1}`; Crank–Nicolson averages).
pub fn solve_steps(
    gen: &DiscreteGenerator,
    y0: &[f64],
    source: Option<&[Vec<f64>]>,
    dt: f64,
    n_steps: usize,
    scheme: Scheme,
) -> Result<Trajectory> {
    let n = gen.dim();
    if y0.len() != n {
        return Err(Error::Dimension(format!("initial state has {} entries, expected {n}", y0.len())));
    }
    if let Some(f) = source {
        if f.len() < n_steps + 1 {
            return Err(Error::Dimension(format!(
                "source has {} time levels, need {}",
                f.len(),
                n_steps + 1
            )));
        }
    }
    let (lhs_c, explicit_c) = match scheme {
        Scheme::ImplicitEuler => (dt, 0.0),
        Scheme::CrankNicolson => (0.5 * dt, 0.5 * dt),
    };
    let sys = LinearSystem::new(gen.shifted(lhs_c, true))?;
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(y0.to_vec());
    for k in 0..n_steps {
        let y = &states[k];
        let mut rhs: Vec<f64> = y.iter().zip(&gen.mass).map(|(y, m)| m * y).collect();
        if explicit_c != 0.0 {
            let s = gen.s0_apply(y);
            for i in 0..n {
                rhs[i] += explicit_c * (s[i] + gen.pot[i] * y[i]);
            }
        }
        if let Some(f) = source {
            for i in 0..n {
                let fi = match scheme {
                    Scheme::ImplicitEuler => dt * f[k + 1][i],
                    Scheme::CrankNicolson => 0.5 * dt * (f[k][i] + f[k + 1][i]),
                };
                rhs[i] += gen.mass[i] * fi;
            }
        }
        states.push(sys.solve(&rhs)?);
    }
    Ok(Trajectory {
        dt,
        times: (0..=n_steps).map(|k| k as f64 * dt).collect(),
        states,
        scheme,
    })
}

/// Solves on `[0, T]` with `t0`, `θ`, `t1` as exact time nodes.
pub fn solve_forward(
    gen: &DiscreteGenerator,
    y0: &State,
    source: Option<&[Vec<f64>]>,
    window: &TimeWindow,
    dt: f64,
    scheme: Scheme,
) -> Result<Trajectory> {
    let idx = window.step_indices(dt)?;
    solve_steps(gen, &y0.bulk, source, dt, idx[3], scheme)
}

/// `[S₀(τ) ∘ exp(τ·pot)]ⁿ y0` with `τ = t/n`, `S₀` one implicit-Euler step of gen0.
pub fn trotter_solve(gen: &DiscreteGenerator, y0: &[f64], t: f64, n: usize) -> Result<Vec<f64>> {
    Ok(trotter_path(gen, y0, t / n as f64, n)?.pop().unwrap())
}

/// All substep states of the Trotter stepper, starting with `y0`.
pub fn trotter_path(gen: &DiscreteGenerator, y0: &[f64], tau: f64, n: usize) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::InvalidParameter("Trotter substeps must be at least 1".into()));
    }
    let sys = LinearSystem::new(gen.shifted(tau, false))?;
    let growth: Vec<f64> = gen.peff().iter().map(|p| (tau * p).exp()).collect();
    let mut out = Vec::with_capacity(n + 1);
    out.push(y0.to_vec());
    for k in 0..n {
        let rhs: Vec<f64> = out[k]
            .iter()
            .zip(&growth)
            .zip(&gen.mass)
            .map(|((y, e), m)| m * e * y)
            .collect();
        out.push(sys.solve(&rhs)?);
    }
    Ok(out)
}

/// Trotter trajectory on `[0, T]` with one substep per `dt`.
pub fn trotter_trajectory(
    gen: &DiscreteGenerator,
    y0: &State,
    window: &TimeWindow,
    dt: f64,
) -> Result<Trajectory> {
    let idx = window.step_indices(dt)?;
    let states = trotter_path(gen, &y0.bulk, dt, idx[3])?;
    Ok(Trajectory {
        dt,
        times: (0..states.len()).map(|k| k as f64 * dt).collect(),
        states,
        scheme: Scheme::ImplicitEuler,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositivityReport {
    /// `min_{t,x} y(t,x)·e^{Rt}`.
    pub min_scaled: f64,
    /// `max_{t,x} |y| / (e^{RT}‖Y0‖_∞)`.
    pub max_ratio: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
}

pub fn positivity_bound_report(traj: &Trajectory, bounds: &AdmissibleBounds, tol: f64) -> PositivityReport {
    let big_r = bounds.big_r;
    let y0_inf = traj.states[0].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let t_end = *traj.times.last().unwrap();
    let cap = (big_r * t_end).exp() * y0_inf;
    let mut min_scaled = f64::INFINITY;
    let mut max_abs = 0.0_f64;
    for (t, y) in traj.times.iter().zip(&traj.states) {
        let e = (big_r * t).exp();
        for &v in y {
            min_scaled = min_scaled.min(v * e);
            max_abs = max_abs.max(v.abs());
        }
    }
    let max_ratio = max_abs / cap;
    PositivityReport {
        min_scaled,
        max_ratio,
        lower_ok: min_scaled >= bounds.r - tol,
        upper_ok: max_ratio <= 1.0 + tol,
    }
}

/// CSV with columns `t, node, rho, phi, y`.
pub fn write_trajectory_csv(path: &Path, g: &PolarGrid, traj: &Trajectory, every: usize) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,node,rho,phi,y")?;
    for (k, (t, y)) in traj.times.iter().zip(&traj.states).enumerate() {
        if k % every.max(1) != 0 && k + 1 != traj.len() {
            continue;
        }
        for (i, v) in y.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt(*t),
                i,
                fmt(g.rho(i)),
                fmt(g.phi(i)),
                fmt(*v)
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Seventeen significant digits.
pub fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assemble_generator, Coefficients, PotentialPair};
    use sprs::CsMat;

    fn setup(nr: usize, np: usize) -> (PolarGrid, Coefficients) {
        let g = PolarGrid::new(nr, np, 0.3).unwrap();
        let c = Coefficients::from_fns(
            &g,
            |r| 1.0 + 0.2 * r,
            |_| 0.1,
            |x, y| [0.3 * y, -0.2 + 0.1 * x],
            |p| 1.0 + 0.1 * p.sin(),
            |p| 0.2 * p.cos(),
            0.5,
        );
        (g, c)
    }

    #[test]
    fn window_validation() {
        assert!(matches!(TimeWindow::new(1.0, 0.5, 0.5), Err(Error::InvalidWindow(m)) if m == "window requires t0 < t1"));
        let w = TimeWindow::new(1.0, 0.25, 0.75).unwrap();
        assert_eq!(w.theta, 0.5);
        assert_eq!(w.step_indices(w.default_dt()).unwrap(), [64, 128, 192, 256]);
        assert!(matches!(w.step_indices(0.3), Err(Error::MisalignedStep { .. })));
    }

    #[test]
    fn markov_constant_preserved() {
        let (g, c) = setup(16, 32);
        let gen = assemble_generator(&g, &c, &PotentialPair::zero(&g)).unwrap();
        let w = TimeWindow::new(1.0, 0.25, 0.75).unwrap();
        for scheme in [Scheme::ImplicitEuler, Scheme::CrankNicolson] {
            let tr = solve_forward(&gen, &State::constant(&g, 1.0), None, &w, w.default_dt(), scheme).unwrap();
            let drift = tr.states.iter().flatten().fold(0.0_f64, |m, v| m.max((v - 1.0).abs()));
            assert!(drift <= 1e-10, "{drift:e}");
        }
    }

    #[test]
    fn constant_potential_scalar_recurrence() {
        let (g, _) = setup(8, 16);
        let c = Coefficients::isotropic(&g);
        let cst = 0.7;
        let gen = assemble_generator(&g, &c, &PotentialPair::constant(&g, cst)).unwrap();
        let dt = 0.01;
        let tr = solve_steps(&gen, &vec![1.0; g.n_nodes()], None, dt, 20, Scheme::ImplicitEuler).unwrap();
        for (k, y) in tr.states.iter().enumerate() {
            let e = (1.0 - cst * dt).powi(-(k as i32));
            assert!(y.iter().all(|v| (v - e).abs() <= 1e-12 * e));
        }
    }

    fn manufactured_error(nsteps: usize, scheme: Scheme) -> f64 {
        let (g, c) = setup(8, 16);
        let pq = PotentialPair::from_fns(&g, |r, p| 0.2 * r * p.cos(), |p| 0.1 * p.sin());
        let gen = assemble_generator(&g, &c, &pq).unwrap();
        let profile = g.sample(|r, p| 1.0 + r * r * p.cos());
        let gy = gen.apply(&profile);
        let t_end = 0.5;
        let dt = t_end / nsteps as f64;
        // y* = e^{-t}·profile, so f = −y* − G y*
        let src: Vec<Vec<f64>> = (0..=nsteps)
            .map(|k| {
                let e = (-(k as f64) * dt).exp();
                profile.iter().zip(&gy).map(|(y, gy)| e * (-y - gy)).collect()
            })
            .collect();
        let tr = solve_steps(&gen, &profile, Some(&src), dt, nsteps, scheme).unwrap();
        let exact: Vec<f64> = profile.iter().map(|y| y * (-t_end).exp()).collect();
        let diff: Vec<f64> = tr.states[nsteps].iter().zip(&exact).map(|(a, b)| a - b).collect();
        g.l2(&diff)
    }

    #[test]
    fn manufactured_solution_orders() {
        let e1 = manufactured_error(16, Scheme::ImplicitEuler);
        let e2 = manufactured_error(32, Scheme::ImplicitEuler);
        let order = (e1 / e2).log2();
        assert!((order - 1.0).abs() < 0.15, "IE order {order}");
        let c1 = manufactured_error(16, Scheme::CrankNicolson);
        let c2 = manufactured_error(32, Scheme::CrankNicolson);
        let order = (c1 / c2).log2();
        assert!((order - 2.0).abs() < 0.2, "CN order {order}");
    }

    #[test]
    fn trotter_without_potential_is_implicit_euler() {
        let (g, c) = setup(8, 16);
        let gen = assemble_generator(&g, &c, &PotentialPair::zero(&g)).unwrap();
        let y0 = g.sample(|r, p| 1.0 + r * p.sin());
        let a = trotter_solve(&gen, &y0, 0.4, 10).unwrap();
        let b = solve_steps(&gen, &y0, None, 0.04, 10, Scheme::ImplicitEuler).unwrap();
        let d = a.iter().zip(&b.states[10]).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(d <= 1e-12, "{d:e}");
    }

    #[test]
    fn trotter_pure_reaction_is_exact() {
        let (g, _) = setup(8, 16);
        let n = g.n_nodes();
        let gen = DiscreteGenerator {
            s0: CsMat::zero((n, n)),
            pot: PotentialPair::constant(&g, 0.8).weighted_diagonal(&g),
            mass: g.mass.clone(),
        };
        let y0 = g.sample(|r, _| 1.0 + r);
        for steps in [1, 3, 17] {
            let y = trotter_solve(&gen, &y0, 0.6, steps).unwrap();
            for (a, b) in y.iter().zip(&y0) {
                assert!((a - b * (0.48_f64).exp()).abs() <= 1e-13);
            }
        }
    }

    #[test]
    fn equality_case_of_lower_bound() {
        let (g, _) = setup(8, 16);
        let c = Coefficients::isotropic(&g);
        let b = AdmissibleBounds::new(0.5, 2.0).unwrap();
        let gen = assemble_generator(&g, &c, &PotentialPair::constant(&g, -2.0)).unwrap();
        let w = TimeWindow::new(1.0, 0.25, 0.75).unwrap();
        let tr = trotter_trajectory(&gen, &State::constant(&g, 0.5), &w, w.default_dt()).unwrap();
        let rep = positivity_bound_report(&tr, &b, 1e-6);
        assert!((rep.min_scaled - 0.5).abs() < 1e-12 && rep.lower_ok && rep.upper_ok);
        let gen = assemble_generator(&g, &c, &PotentialPair::zero(&g)).unwrap();
        let tr = trotter_trajectory(&gen, &State::constant(&g, 0.5), &w, w.default_dt()).unwrap();
        assert!(positivity_bound_report(&tr, &b, 1e-6).min_scaled >= 0.5 - 1e-12);
    }

    #[test]
    fn trotter_preserves_nonnegativity() {
        let (g, c) = setup(8, 16);
        let pq = PotentialPair::from_fns(&g, |r, p| 1.5 * r * p.cos(), |p| -1.5 * p.sin());
        let gen = assemble_generator(&g, &c, &pq).unwrap();
        let y0: Vec<f64> = (0..g.n_nodes()).map(|k| if k % 7 == 0 { 1.0 } else { 0.0 }).collect();
        for y in trotter_path(&gen, &y0, 0.01, 50).unwrap() {
            assert!(y.iter().all(|v| *v >= 0.0));
        }
    }
}
