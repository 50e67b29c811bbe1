//! Observation operator, adjoint-based reconstruction of `(p, q)`, and the
//! Lipschitz stability harness.
//!
//! Parameters are packed as `[p on non-trace nodes, q]`; the trace-ring `p`
//! never enters the discrete generator (its cell is folded into the ring
//! below), so it is not an unknown. Unpacking copies the ring below onto it.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{solve_steps, Scheme, TimeWindow};
use crate::grid::{DerivativeOps, NormKind, PolarGrid, SobolevNorm, State};
use crate::linalg::{dot, LinearSystem};
use crate::model::{
    assemble_generator, check_admissible_initial, check_admissible_potentials, AdmissibleBounds,
    Coefficients, DiscreteGenerator, PotentialPair,
};
use crate::sampling::{gaussian_vec, max_abs, random_initial, random_potentials, rng, smooth_bulk, Rng64};

/// Measured data: the full state at `θ` and backward differences of `y` on ω
/// at steps `k0+1..=k1`.
#[derive(Debug, Clone)]
pub struct Observations {
    pub state_at_theta: Vec<f64>,
    /// `dty_on_omega[m][i]` is step `k0 + 1 + m` at node `omega[i]`.
    pub dty_on_omega: Vec<Vec<f64>>,
    pub omega: Vec<usize>,
    pub noise_level: f64,
    /// Norm of the added noise in the misfit metric (0 when noiseless).
    pub noise_norm: f64,
}

#[derive(Debug, Clone)]
pub struct InversionConfig {
    pub reg_beta: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub big_r: f64,
    pub initial: PotentialPair,
    /// Starting point of the descent; the Tikhonov anchor `initial` when unset.
    pub start: Option<PotentialPair>,
    /// Stops once an accepted step lowers the misfit by less than this
    /// fraction of its value.
    pub rel_decrease_tol: f64,
    /// Curvature pairs kept by L-BFGS.
    pub memory: usize,
}

impl InversionConfig {
    pub fn new(g: &PolarGrid, reg_beta: f64, max_iter: usize, grad_tol: f64, big_r: f64) -> Result<Self> {
        if !(reg_beta >= 0.0) {
            return Err(Error::InvalidParameter(format!("reg_beta = {reg_beta} must be nonnegative")));
        }
        if !(big_r > 0.0) {
            return Err(Error::InvalidParameter(format!("R = {big_r} must be positive")));
        }
        Ok(Self {
            reg_beta,
            max_iter,
            grad_tol,
            big_r,
            initial: PotentialPair::zero(g),
            start: None,
            rel_decrease_tol: 1e-10,
            memory: 10,
        })
    }
}

/// Fixed data of the forward model shared by all candidate potentials.
#[derive(Debug, Clone)]
pub struct InverseProblem {
    pub grid: PolarGrid,
    pub coeffs: Coefficients,
    pub base: DiscreteGenerator,
    pub y0: Vec<f64>,
    pub window: TimeWindow,
    pub dt: f64,
    pub k0: usize,
    pub k_theta: usize,
    pub k1: usize,
    pub h2: SobolevNorm,
    pub omega: Vec<usize>,
    /// Regularization / ℒ² weights per packed parameter.
    pub par_weights: Vec<f64>,
}

impl InverseProblem {
    pub fn new(g: &PolarGrid, c: &Coefficients, y0: &State, window: TimeWindow, dt: f64) -> Result<Self> {
        let [k0, k_theta, k1, _] = window.step_indices(dt)?;
        let base = assemble_generator(g, c, &PotentialPair::zero(g))?;
        let n_in = g.n_nodes() - g.n_phi;
        let mut par_weights = g.w_pot[..n_in].to_vec();
        par_weights.extend_from_slice(&g.w_surf);
        Ok(Self {
            grid: g.clone(),
            coeffs: c.clone(),
            base,
            y0: y0.bulk.clone(),
            window,
            dt,
            k0,
            k_theta,
            k1,
            h2: SobolevNorm::new(g, NormKind::H2),
            omega: g.omega_nodes(),
            par_weights,
        })
    }

    pub fn n_params(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn pack(&self, pq: &PotentialPair) -> Vec<f64> {
        let n_in = self.grid.n_nodes() - self.grid.n_phi;
        let mut x = pq.p[..n_in].to_vec();
        x.extend_from_slice(&pq.q);
        x
    }

    pub fn unpack(&self, x: &[f64]) -> PotentialPair {
        let g = &self.grid;
        let n_in = g.n_nodes() - g.n_phi;
        let mut p = x[..n_in].to_vec();
        p.extend_from_slice(&x[n_in - g.n_phi..n_in]);
        PotentialPair {
            p,
            q: x[n_in..].to_vec(),
        }
    }

    /// ℒ² norm of a packed parameter vector.
    pub fn par_norm(&self, x: &[f64]) -> f64 {
        self.par_weights.iter().zip(x).map(|(w, v)| w * v * v).sum::<f64>().sqrt()
    }

    pub fn generator(&self, pq: &PotentialPair) -> DiscreteGenerator {
        self.base.with_potentials(&self.grid, pq)
    }

    /// Implicit-Euler states `y_0..=y_{k1}`.
    pub fn states(&self, pq: &PotentialPair) -> Result<Vec<Vec<f64>>> {
        self.states_from(pq, &self.y0)
    }

    pub fn states_from(&self, pq: &PotentialPair, y0: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(solve_steps(&self.generator(pq), y0, None, self.dt, self.k1, Scheme::ImplicitEuler)?.states)
    }

    /// Noiseless observation of a trajectory.
    pub fn observe(&self, states: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = ((self.k0 + 1)..=self.k1)
            .map(|k| {
                self.omega
                    .iter()
                    .map(|&i| (states[k][i] - states[k - 1][i]) / self.dt)
                    .collect()
            })
            .collect();
        (states[self.k_theta].clone(), d)
    }

    /// `(‖Z(θ)‖_{H²}, ‖∂_t z‖_{L²(ω×(t0,t1))})` between two trajectories.
    pub fn data_distance(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, f64) {
        let z: Vec<f64> = a[self.k_theta].iter().zip(&b[self.k_theta]).map(|(x, y)| x - y).collect();
        let (_, da) = self.observe(a);
        let (_, db) = self.observe(b);
        (self.h2.value(&z), self.omega_norm_diff(&da, &db))
    }

    fn omega_norm_diff(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let w = &self.grid.w_bulk;
        let mut s = 0.0;
        for (ra, rb) in a.iter().zip(b) {
            for ((&i, x), y) in self.omega.iter().zip(ra).zip(rb) {
                s += self.dt * w[i] * (x - y) * (x - y);
            }
        }
        s.sqrt()
    }

    /// Data part of the misfit metric, `½‖·‖²_{H²} + ½‖·‖²_{L²(ω)}`.
    fn data_half_sq(&self, theta: &[f64], d: &[Vec<f64>]) -> f64 {
        let zeros: Vec<Vec<f64>> = d.iter().map(|r| vec![0.0; r.len()]).collect();
        0.5 * self.h2.squared(theta) + 0.5 * self.omega_norm_diff(d, &zeros).powi(2)
    }

    /// Tangent-linear observation map at `pq` applied to a packed direction.
    pub fn linearized(&self, pq: &PotentialPair, states: &[Vec<f64>], dx: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let gen = self.generator(pq);
        let sys = LinearSystem::new(gen.shifted(self.dt, true))?;
        let dpot = self.unpack(dx).weighted_diagonal(&self.grid);
        let n = gen.dim();
        let mut dy = vec![vec![0.0; n]];
        for k in 0..self.k1 {
            let rhs: Vec<f64> = (0..n)
                .map(|i| gen.mass[i] * dy[k][i] + self.dt * dpot[i] * states[k + 1][i])
                .collect();
            dy.push(sys.solve(&rhs)?);
        }
        Ok(self.observe(&dy))
    }

    /// Transpose of [`Self::linearized`] with Euclidean pairings on both sides.
    pub fn adjoint(
        &self,
        pq: &PotentialPair,
        states: &[Vec<f64>],
        v_theta: &[f64],
        v_d: &[Vec<f64>],
    ) -> Result<Vec<f64>> {
        let gen = self.generator(pq);
        let sys = LinearSystem::new(gen.shifted(self.dt, true))?;
        let n = gen.dim();
        let mut src = vec![vec![0.0; n]; self.k1 + 1];
        src[self.k_theta].iter_mut().zip(v_theta).for_each(|(s, v)| *s += v);
        for (m, row) in v_d.iter().enumerate() {
            let k = self.k0 + 1 + m;
            for (&i, v) in self.omega.iter().zip(row) {
                src[k][i] += v / self.dt;
                src[k - 1][i] -= v / self.dt;
            }
        }
        let mut gpot = vec![0.0; n];
        let mut lam_next = vec![0.0; n];
        for k in (1..=self.k1).rev() {
            let rhs: Vec<f64> = (0..n).map(|i| src[k][i] + gen.mass[i] * lam_next[i]).collect();
            let lam = sys.solve_transpose(&rhs)?;
            for i in 0..n {
                gpot[i] += self.dt * lam[i] * states[k][i];
            }
            lam_next = lam;
        }
        Ok(self.pot_to_params(&gpot))
    }

    /// Chain rule through the reaction diagonal `m∘p_eff`.
    fn pot_to_params(&self, gpot: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let n_in = g.n_nodes() - g.n_phi;
        let mut out: Vec<f64> = (0..n_in).map(|i| g.w_bulk[i] * gpot[i]).collect();
        for &k in g.trace_map.iter() {
            out[k - g.n_phi] += g.w_bulk[k] * gpot[k];
        }
        out.extend(g.trace_map.iter().enumerate().map(|(j, &k)| g.w_surf[j] * gpot[k]));
        out
    }
}

/// Runs the forward model at `truth` and measures it, optionally with noise.
/// The state at `θ` receives a smooth random field and the `∂_t y` samples
/// white noise, each scaled to exactly `δ·RMS` of the clean signal.
/// Highest angular mode of the noise added to `Y(θ)`. The state is measured
/// in H², so the noise has to be a smooth field for its H² norm to stay
/// comparable to its RMS.
pub const THETA_NOISE_MODES: usize = 2;

pub fn synthesize_observations(
    prob: &InverseProblem,
    truth: &PotentialPair,
    bounds: &AdmissibleBounds,
    noise: f64,
    rng: &mut Rng64,
) -> Result<Observations> {
    let g = &prob.grid;
    let rp = check_admissible_potentials(g, truth, bounds);
    if !rp.admissible {
        return Err(Error::Inadmissible(rp.violations.join("; ")));
    }
    let ops = DerivativeOps::new(g);
    let ri = check_admissible_initial(g, &ops, &State::from_bulk(g, prob.y0.clone()), bounds);
    if !ri.admissible {
        return Err(Error::Inadmissible(ri.violations.join("; ")));
    }
    if !(noise >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise level {noise} must be nonnegative")));
    }
    let states = prob.states(truth)?;
    let (mut theta, mut d) = prob.observe(&states);
    let mut noise_norm = 0.0;
    if noise > 0.0 {
        let mut e_theta = smooth_bulk(g, rng, THETA_NOISE_MODES);
        scale_rms(&mut e_theta, noise * rms(&theta));
        let flat: Vec<f64> = d.iter().flatten().copied().collect();
        let target = noise * rms(&flat);
        let mut e_d: Vec<Vec<f64>> = d.iter().map(|r| gaussian_vec(rng, r.len())).collect();
        let cur = rms(&e_d.iter().flatten().copied().collect::<Vec<_>>());
        e_d.iter_mut().flatten().for_each(|x| *x *= target / cur);
        noise_norm = (2.0 * prob.data_half_sq(&e_theta, &e_d)).sqrt();
        theta.iter_mut().zip(&e_theta).for_each(|(a, b)| *a += b);
        d.iter_mut().zip(&e_d).for_each(|(r, e)| r.iter_mut().zip(e).for_each(|(a, b)| *a += b));
    }
    Ok(Observations {
        state_at_theta: theta,
        dty_on_omega: d,
        omega: prob.omega.clone(),
        noise_level: noise,
        noise_norm,
    })
}

pub fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

fn scale_rms(v: &mut [f64], target: f64) {
    let r = rms(v);
    if r > 0.0 {
        v.iter_mut().for_each(|x| *x *= target / r);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisfitParts {
    pub total: f64,
    pub data: f64,
    pub reg: f64,
}

fn residuals(prob: &InverseProblem, states: &[Vec<f64>], obs: &Observations) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (theta, d) = prob.observe(states);
    let r_theta: Vec<f64> = theta.iter().zip(&obs.state_at_theta).map(|(a, b)| a - b).collect();
    let r_d: Vec<Vec<f64>> = d
        .iter()
        .zip(&obs.dty_on_omega)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    (r_theta, r_d)
}

fn reg_term(prob: &InverseProblem, x: &[f64], cfg: &InversionConfig) -> f64 {
    let x0 = prob.pack(&cfg.initial);
    (0..x.len())
        .map(|i| 0.5 * cfg.reg_beta * prob.par_weights[i] * (x[i] - x0[i]).powi(2))
        .sum()
}

/// Misfit only (one forward solve).
pub fn misfit_packed(prob: &InverseProblem, x: &[f64], obs: &Observations, cfg: &InversionConfig) -> Result<MisfitParts> {
    let states = prob.states(&prob.unpack(x))?;
    let (r_theta, r_d) = residuals(prob, &states, obs);
    let data = prob.data_half_sq(&r_theta, &r_d);
    let reg = reg_term(prob, x, cfg);
    Ok(MisfitParts {
        total: data + reg,
        data,
        reg,
    })
}

/// Misfit and its gradient with respect to the packed parameters.
pub fn misfit_and_gradient_packed(
    prob: &InverseProblem,
    x: &[f64],
    obs: &Observations,
    cfg: &InversionConfig,
) -> Result<(MisfitParts, Vec<f64>)> {
    let pq = prob.unpack(x);
    let states = prob.states(&pq)?;
    let (r_theta, r_d) = residuals(prob, &states, obs);
    let data = prob.data_half_sq(&r_theta, &r_d);
    let v_theta = prob.h2.half_sq_gradient(&r_theta);
    let v_d: Vec<Vec<f64>> = r_d
        .iter()
        .map(|r| {
            prob.omega
                .iter()
                .zip(r)
                .map(|(&i, v)| prob.dt * prob.grid.w_bulk[i] * v)
                .collect()
        })
        .collect();
    let mut grad = prob.adjoint(&pq, &states, &v_theta, &v_d)?;
    let x0 = prob.pack(&cfg.initial);
    for i in 0..x.len() {
        grad[i] += cfg.reg_beta * prob.par_weights[i] * (x[i] - x0[i]);
    }
    let reg = reg_term(prob, x, cfg);
    Ok((
        MisfitParts {
            total: data + reg,
            data,
            reg,
        },
        grad,
    ))
}

pub fn misfit_and_gradient(
    prob: &InverseProblem,
    candidate: &PotentialPair,
    obs: &Observations,
    cfg: &InversionConfig,
) -> Result<(f64, PotentialPair)> {
    let (m, g) = misfit_and_gradient_packed(prob, &prob.pack(candidate), obs, cfg)?;
    Ok((m.total, prob.unpack(&g)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub iter: usize,
    pub misfit: f64,
    pub gnorm: f64,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub estimate: PotentialPair,
    pub history: Vec<HistoryRow>,
    pub converged: bool,
    pub stalled: bool,
    pub parts: MisfitParts,
}

/// Projected L-BFGS in the ℒ²-scaled variables `u = √w·x`, where the box
/// `|x| ≤ R` stays a box.
pub fn reconstruct_potentials(prob: &InverseProblem, obs: &Observations, cfg: &InversionConfig) -> Result<Reconstruction> {
    let sw: Vec<f64> = prob.par_weights.iter().map(|w| w.sqrt()).collect();
    let lim: Vec<f64> = sw.iter().map(|s| cfg.big_r * s).collect();
    let project = |u: &mut [f64]| {
        for (v, l) in u.iter_mut().zip(&lim) {
            *v = v.clamp(-l, *l);
        }
    };
    let to_x = |u: &[f64]| -> Vec<f64> {
        u.iter().zip(&sw).map(|(u, s)| if *s > 0.0 { u / s } else { 0.0 }).collect()
    };
    let eval = |u: &[f64]| -> Result<(MisfitParts, Vec<f64>)> {
        let (m, g) = misfit_and_gradient_packed(prob, &to_x(u), obs, cfg)?;
        Ok((m, g.iter().zip(&sw).map(|(g, s)| if *s > 0.0 { g / s } else { 0.0 }).collect()))
    };
    let pg_norm = |u: &[f64], g: &[f64]| -> f64 {
        let mut t: Vec<f64> = u.iter().zip(g).map(|(u, g)| u - g).collect();
        project(&mut t);
        u.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };

    let start = cfg.start.as_ref().unwrap_or(&cfg.initial);
    let mut u: Vec<f64> = prob.pack(start).iter().zip(&sw).map(|(x, s)| x * s).collect();
    project(&mut u);
    let (mut f, mut gr) = eval(&u)?;
    let mut gn = pg_norm(&u, &gr);
    let mut history = vec![HistoryRow {
        iter: 0,
        misfit: f.total,
        gnorm: gn,
    }];
    let mut pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let (mut converged, mut stalled) = (gn <= cfg.grad_tol, false);
    let mut it = 0;
    while !converged && it < cfg.max_iter {
        it += 1;
        let mut d = two_loop(&gr, &pairs);
        if dot(&d, &gr) >= 0.0 {
            d = gr.iter().map(|v| -v).collect();
            pairs.clear();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let mut trial: Vec<f64> = u.iter().zip(&d).map(|(u, d)| u + step * d).collect();
            project(&mut trial);
            let du: Vec<f64> = trial.iter().zip(&u).map(|(a, b)| a - b).collect();
            let dec = dot(&gr, &du);
            if dec < 0.0 && misfit_packed(prob, &to_x(&trial), obs, cfg)?.total <= f.total + 1e-4 * dec {
                accepted = Some((trial, du));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, s)) = accepted else {
            stalled = true;
            break;
        };
        let (ft, gt) = eval(&trial)?;
        let small_decrease = f.total - ft.total <= cfg.rel_decrease_tol * f.total;
        let y: Vec<f64> = gt.iter().zip(&gr).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            pairs.push((s, y, 1.0 / sy));
            if pairs.len() > cfg.memory {
                pairs.remove(0);
            }
        }
        u = trial;
        f = ft;
        gr = gt;
        gn = pg_norm(&u, &gr);
        history.push(HistoryRow {
            iter: it,
            misfit: f.total,
            gnorm: gn,
        });
        converged = gn <= cfg.grad_tol || small_decrease;
    }
    Ok(Reconstruction {
        estimate: prob.unpack(&to_x(&u)),
        history,
        converged,
        stalled,
        parts: f,
    })
}

fn two_loop(g: &[f64], pairs: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alpha = vec![0.0; pairs.len()];
    for (m, (s, y, rho)) in pairs.iter().enumerate().rev() {
        alpha[m] = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(q, y)| *q -= alpha[m] * y);
    }
    if let Some((s, y, _)) = pairs.last() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (m, (s, y, rho)) in pairs.iter().enumerate() {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(q, s)| *q += (alpha[m] - b) * s);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[derive(Debug, Clone)]
pub struct DiscrepancyResult {
    pub beta: f64,
    pub reconstruction: Reconstruction,
    /// `(β, data residual norm)` for every tried value.
    pub path: Vec<(f64, f64)>,
}

/// Largest `β` on the grid `β₀·q^j` whose data residual is at most
/// `τ·noise_norm`; falls back to the smallest tried value. Each β starts
/// from the estimate of the previous one.
pub fn discrepancy_principle(
    prob: &InverseProblem,
    obs: &Observations,
    cfg: &InversionConfig,
    beta0: f64,
    q: f64,
    n_betas: usize,
    tau: f64,
) -> Result<DiscrepancyResult> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidParameter(format!("β reduction factor {q} must lie in (0, 1)")));
    }
    let mut path = Vec::new();
    let mut cur = cfg.clone();
    let mut last = None;
    for j in 0..n_betas {
        cur.reg_beta = beta0 * q.powi(j as i32);
        let rec = reconstruct_potentials(prob, obs, &cur)?;
        cur.start = Some(rec.estimate.clone());
        let res = (2.0 * rec.parts.data).sqrt();
        path.push((cur.reg_beta, res));
        let beta = cur.reg_beta;
        if res <= tau * obs.noise_norm {
            return Ok(DiscrepancyResult {
                beta,
                reconstruction: rec,
                path,
            });
        }
        last = Some((beta, rec));
    }
    let (beta, reconstruction) =
        last.ok_or_else(|| Error::InvalidParameter("discrepancy principle needs at least one β".into()))?;
    Ok(DiscrepancyResult {
        beta,
        reconstruction,
        path,
    })
}

/// One row of the Lipschitz harness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzSample {
    pub sample: usize,
    pub scale: f64,
    /// `‖(a, ℓ)‖_{ℒ²}`.
    pub lhs: f64,
    /// `‖Z(θ)‖_{H²} + ‖∂_t z‖_{L²(ω×(t0,t1))}`.
    pub rhs: f64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LipschitzStats {
    pub rows: Vec<LipschitzSample>,
    /// `(scale, max ratio, median ratio)`.
    pub per_scale: Vec<(f64, f64, f64)>,
    pub skipped: usize,
}

/// Ratio for one pair of configurations, `None` when both sides vanish.
pub fn lipschitz_ratio(
    prob: &InverseProblem,
    pq: &PotentialPair,
    y0: &[f64],
    pq_t: &PotentialPair,
    y0_t: &[f64],
) -> Result<(f64, f64, Option<f64>)> {
    let a = prob.states_from(pq, y0)?;
    let b = prob.states_from(pq_t, y0_t)?;
    let diff = prob.pack(pq).iter().zip(prob.pack(pq_t)).map(|(x, y)| x - y).collect::<Vec<_>>();
    let lhs = prob.par_norm(&diff);
    let (h2, om) = prob.data_distance(&a, &b);
    let rhs = h2 + om;
    Ok((lhs, rhs, (rhs > 0.0).then(|| lhs / rhs)))
}

/// For each sample draws `(p, q)`, `Y0` and fixed perturbation directions,
/// then evaluates the ratio at every scale. Perturbed potentials are
/// projected back into the `R`-box.
pub fn lipschitz_harness(
    prob: &InverseProblem,
    bounds: &AdmissibleBounds,
    n_samples: usize,
    scales: &[f64],
    perturb_initial: bool,
    seed: u64,
) -> Result<LipschitzStats> {
    let g = &prob.grid;
    let ops = DerivativeOps::new(g);
    let results: Vec<Result<Vec<LipschitzSample>>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut r = rng(seed.wrapping_add(s as u64));
            let big_r = 0.5 * bounds.big_r;
            let pq = random_potentials(g, &mut r, big_r);
            let y0 = random_initial(g, &ops, &mut r, bounds).bulk;
            let dir = random_potentials(g, &mut r, 1.0);
            let ydir = smooth_bulk(g, &mut r, 3);
            let ym = max_abs(&ydir).max(1e-300);
            let mut out = Vec::new();
            for &eps in scales {
                let mut pt = pq.axpy(eps, &dir);
                pt.p.iter_mut().chain(pt.q.iter_mut()).for_each(|v| *v = v.clamp(-bounds.big_r, bounds.big_r));
                let y0t: Vec<f64> = if perturb_initial {
                    y0.iter().zip(&ydir).map(|(a, d)| a + eps * bounds.r * 0.1 * d / ym).collect()
                } else {
                    y0.clone()
                };
                let (lhs, rhs, ratio) = lipschitz_ratio(prob, &pq, &y0, &pt, &y0t)?;
                out.push(LipschitzSample {
                    sample: s,
                    scale: eps,
                    lhs,
                    rhs,
                    ratio,
                });
            }
            Ok(out)
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    let skipped = rows.iter().filter(|r| r.ratio.is_none()).count();
    let per_scale = scales
        .iter()
        .map(|&eps| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.scale == eps).filter_map(|r| r.ratio).collect();
            v.sort_by(f64::total_cmp);
            let max = v.last().copied().unwrap_or(f64::NAN);
            let med = if v.is_empty() { f64::NAN } else { v[v.len() / 2] };
            (eps, max, med)
        })
        .collect();
    Ok(LipschitzStats {
        rows,
        per_scale,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(n_r: usize, n_phi: usize) -> (InverseProblem, AdmissibleBounds) {
        let g = PolarGrid::new(n_r, n_phi, 0.3).unwrap();
        let c = Coefficients::isotropic(&g);
        let y0 = State::from_fns(&g, |r, p| 1.2 + 0.2 * r * p.cos() + 0.1 * r * r * (2.0 * p).sin(), |p| {
            1.2 + 0.2 * p.cos() + 0.1 * (2.0 * p).sin()
        });
        let w = TimeWindow::new(1.0, 0.25, 0.75).unwrap();
        let prob = InverseProblem::new(&g, &c, &y0, w, w.default_dt()).unwrap();
        (prob, AdmissibleBounds::new(0.5, 2.0).unwrap())
    }

    #[test]
    fn pack_roundtrip() {
        let (prob, _) = setup(8, 16);
        let g = &prob.grid;
        let pq = PotentialPair::from_fns(g, |r, p| r * p.cos(), |p| p.sin());
        let x = prob.pack(&pq);
        let back = prob.unpack(&x);
        assert_eq!(back.q, pq.q);
        assert_eq!(back.weighted_diagonal(g), pq.weighted_diagonal(g));
        assert!((prob.par_norm(&x) - pq.l2(g)).abs() < 1e-14);
    }

    #[test]
    fn markov_observations() {
        let (mut prob, b) = setup(8, 16);
        prob.y0 = vec![1.0; prob.grid.n_nodes()];
        let obs = synthesize_observations(&prob, &PotentialPair::zero(&prob.grid), &b, 0.0, &mut rng(0)).unwrap();
        assert!(obs.state_at_theta.iter().all(|v| (v - 1.0).abs() < 1e-10));
        assert!(obs.dty_on_omega.iter().flatten().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn constant_potential_observations() {
        let (mut prob, b) = setup(8, 16);
        prob.y0 = vec![1.0; prob.grid.n_nodes()];
        let c = 0.3;
        let obs = synthesize_observations(&prob, &PotentialPair::constant(&prob.grid, c), &b, 0.0, &mut rng(0)).unwrap();
        let dt = prob.dt;
        for (m, row) in obs.dty_on_omega.iter().enumerate() {
            let k = (prob.k0 + 1 + m) as i32;
            let expect = ((1.0 - c * dt).powi(-k) - (1.0 - c * dt).powi(-(k - 1))) / dt;
            assert!(row.iter().all(|v| (v - expect).abs() <= 1e-9 * expect));
        }
    }

    #[test]
    fn noise_has_requested_level() {
        let (prob, b) = setup(8, 16);
        let truth = PotentialPair::from_fns(&prob.grid, |r, p| 0.5 + 0.3 * r * p.cos(), |p| 0.4 + 0.2 * p.cos());
        let clean = synthesize_observations(&prob, &truth, &b, 0.0, &mut rng(1)).unwrap();
        let noisy = synthesize_observations(&prob, &truth, &b, 0.01, &mut rng(1)).unwrap();
        let e: Vec<f64> = noisy.dty_on_omega.iter().flatten().zip(clean.dty_on_omega.iter().flatten()).map(|(a, b)| a - b).collect();
        let s: Vec<f64> = clean.dty_on_omega.iter().flatten().copied().collect();
        assert!((rms(&e) / rms(&s) - 0.01).abs() <= 0.001);
        let e: Vec<f64> = noisy.state_at_theta.iter().zip(&clean.state_at_theta).map(|(a, b)| a - b).collect();
        assert!((rms(&e) / rms(&clean.state_at_theta) - 0.01).abs() <= 0.001);
        assert!(noisy.noise_norm > 0.0);
    }

    #[test]
    fn inadmissible_truth_rejected() {
        let (prob, b) = setup(8, 16);
        let r = synthesize_observations(&prob, &PotentialPair::constant(&prob.grid, 2.5), &b, 0.0, &mut rng(0));
        assert!(matches!(r, Err(Error::Inadmissible(_))));
    }

    #[test]
    fn zero_misfit_at_truth() {
        let (prob, b) = setup(8, 16);
        let truth = PotentialPair::from_fns(&prob.grid, |r, p| 0.5 + 0.3 * r * p.cos(), |p| 0.4 + 0.2 * p.cos());
        let obs = synthesize_observations(&prob, &truth, &b, 0.0, &mut rng(0)).unwrap();
        let mut cfg = InversionConfig::new(&prob.grid, 0.0, 10, 1e-12, 2.0).unwrap();
        let (v, _) = misfit_and_gradient(&prob, &truth, &obs, &cfg).unwrap();
        assert!(v <= 1e-16);
        cfg.reg_beta = 0.1;
        cfg.initial = truth.clone();
        let (v, _) = misfit_and_gradient(&prob, &truth, &obs, &cfg).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn adjoint_is_transpose_of_tangent() {
        let (prob, _) = setup(8, 16);
        let g = &prob.grid;
        let pq = PotentialPair::from_fns(g, |r, p| 0.5 + 0.3 * r * p.cos(), |p| 0.4 + 0.2 * p.cos());
        let states = prob.states(&pq).unwrap();
        let mut r = rng(3);
        for _ in 0..3 {
            let dx = gaussian_vec(&mut r, prob.n_params());
            let vt = gaussian_vec(&mut r, g.n_nodes());
            let vd: Vec<Vec<f64>> = (0..prob.k1 - prob.k0).map(|_| gaussian_vec(&mut r, prob.omega.len())).collect();
            let (lt, ld) = prob.linearized(&pq, &states, &dx).unwrap();
            let lhs = dot(&lt, &vt) + ld.iter().zip(&vd).map(|(a, b)| dot(a, b)).sum::<f64>();
            let rhs = dot(&dx, &prob.adjoint(&pq, &states, &vt, &vd).unwrap());
            assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn converges_immediately_at_stationary_point() {
        let (prob, b) = setup(8, 16);
        let obs = synthesize_observations(&prob, &PotentialPair::zero(&prob.grid), &b, 0.0, &mut rng(0)).unwrap();
        let cfg = InversionConfig::new(&prob.grid, 0.0, 50, 1e-12, 2.0).unwrap();
        let rec = reconstruct_potentials(&prob, &obs, &cfg).unwrap();
        assert!(rec.converged);
        assert_eq!(rec.history.len(), 1);
    }

    #[test]
    fn misfit_is_monotone_along_iterations() {
        let (prob, b) = setup(8, 16);
        let truth = PotentialPair::from_fns(&prob.grid, |r, p| 0.5 + 0.3 * r * p.cos(), |p| 0.4 + 0.2 * p.cos());
        let obs = synthesize_observations(&prob, &truth, &b, 0.0, &mut rng(0)).unwrap();
        let cfg = InversionConfig::new(&prob.grid, 0.0, 30, 1e-14, 2.0).unwrap();
        let rec = reconstruct_potentials(&prob, &obs, &cfg).unwrap();
        assert!(rec.history.windows(2).all(|w| w[1].misfit <= w[0].misfit));
        assert!(rec.history.last().unwrap().misfit < 1e-3 * rec.history[0].misfit);
    }

    #[test]
    fn identical_pairs_are_degenerate() {
        let (prob, _) = setup(8, 16);
        let pq = PotentialPair::constant(&prob.grid, 0.2);
        let (l, r, ratio) = lipschitz_ratio(&prob, &pq, &prob.y0, &pq, &prob.y0).unwrap();
        assert_eq!((l, r), (0.0, 0.0));
        assert!(ratio.is_none());
    }
}
