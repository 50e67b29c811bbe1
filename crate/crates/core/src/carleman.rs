//! Weight function η⁰ = 1 − ρ², the Carleman weights α, ξ, the operators
//! M1/N1, the I/J integrals and both sides of the Carleman inequality.
//!
//! The factors `e^{−sα}` underflow for the parameters of interest, so all
//! exponentials are scaled by `e^{sα_ref}` with `α_ref = α(θ, 0) = min α`.
//! Every returned integral is therefore multiplied by `e^{2sα_ref}`; the
//! exponent is reported as `log_scale`. Ratios are unaffected.

use crate::error::{Error, Result};
use crate::forward::TimeWindow;
use crate::grid::{surface_gradient, DerivativeOps, PolarGrid};
use crate::linalg::matvec;
use crate::model::{conormal, div_a_grad, drift_bulk, laplace_beltrami, Coefficients};

#[derive(Debug, Clone, PartialEq)]
pub struct Eta0Report {
    pub at_origin: f64,
    pub max_abs_on_boundary: f64,
    pub min_interior: f64,
    pub normal_derivative: (f64, f64),
    pub min_grad_outside_omega: f64,
    pub ok: bool,
}

pub fn build_eta0(g: &PolarGrid) -> Result<(Vec<f64>, Eta0Report)> {
    if !g.omega_mask[0] {
        return Err(Error::OmegaExcludesOrigin);
    }
    let eta = g.sample(|r, _| 1.0 - r * r);
    let ops = DerivativeOps::new(g);
    let ga = matvec(&ops.d1a, &eta);
    let gb = matvec(&ops.d1b, &eta);
    let mut min_interior = f64::INFINITY;
    let mut min_grad = f64::INFINITY;
    for k in 0..g.n_nodes() {
        if !g.is_trace(k) {
            min_interior = min_interior.min(eta[k]);
        }
        if !g.omega_mask[k] {
            min_grad = min_grad.min(ga[k].hypot(gb[k]));
        }
    }
    let dn: Vec<f64> = g.trace_map.iter().map(|&k| ga[k]).collect();
    let dn_range = (
        dn.iter().fold(f64::INFINITY, |m, v| m.min(*v)),
        dn.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)),
    );
    let max_b = g.trace_map.iter().fold(0.0_f64, |m, &k| m.max(eta[k].abs()));
    let rep = Eta0Report {
        at_origin: eta[0],
        max_abs_on_boundary: max_b,
        min_interior,
        normal_derivative: dn_range,
        min_grad_outside_omega: min_grad,
        ok: min_interior > 0.0 && max_b == 0.0 && dn_range.1 < 0.0 && min_grad > 0.0,
    };
    Ok((eta, rep))
}

#[derive(Debug, Clone)]
pub struct WeightFields {
    pub eta0: Vec<f64>,
    pub eta_max: f64,
    pub lambda: f64,
    pub s: f64,
    pub window: TimeWindow,
    /// Evaluation times, strictly inside `(t0, t1)`.
    pub times: Vec<f64>,
    /// `α[t][node]`; surface values are the trace entries.
    pub alpha: Vec<Vec<f64>>,
    pub xi: Vec<Vec<f64>>,
    /// `σ = A∇η⁰·∇η⁰` per bulk node.
    pub sigma: Vec<f64>,
    pub alpha_ref: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

pub fn gamma(w: &TimeWindow, t: f64) -> f64 {
    (t - w.t0) * (w.t1 - t)
}

/// `A∇u·∇v` per bulk node from discrete gradients (polar frame on rings).
pub fn a_grad_dot(g: &PolarGrid, c: &Coefficients, ops: &DerivativeOps, u: &[f64], v: &[f64]) -> Vec<f64> {
    let (ua, ub) = (matvec(&ops.d1a, u), matvec(&ops.d1b, u));
    let (va, vb) = (matvec(&ops.d1a, v), matvec(&ops.d1b, v));
    (0..g.n_nodes())
        .map(|k| {
            let (arr, arp, app) = if k == 0 {
                let [a11, a12, a22] = c.a[0];
                (a11, a12, a22)
            } else {
                c.a_polar(k, g.phi(k))
            };
            ua[k] * (arr * va[k] + arp * vb[k]) + ub[k] * (arp * va[k] + app * vb[k])
        })
        .collect()
}

impl WeightFields {
    pub fn new(
        g: &PolarGrid,
        c: &Coefficients,
        eta0: Vec<f64>,
        lambda: f64,
        s: f64,
        window: TimeWindow,
        times: &[f64],
    ) -> Result<Self> {
        if !(lambda >= 1.0) {
            return Err(Error::InvalidParameter(format!("lambda = {lambda} must be at least 1")));
        }
        if !(s >= 0.0) {
            return Err(Error::InvalidParameter(format!("s = {s} must be nonnegative")));
        }
        for &t in times {
            if !(t > window.t0 && t < window.t1) {
                return Err(Error::OutsideWindow {
                    t,
                    t0: window.t0,
                    t1: window.t1,
                });
            }
        }
        let eta_max = eta0.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let top = (2.0 * lambda * eta_max).exp();
        let el: Vec<f64> = eta0.iter().map(|e| (lambda * e).exp()).collect();
        let mut alpha = Vec::with_capacity(times.len());
        let mut xi = Vec::with_capacity(times.len());
        for &t in times {
            let gm = gamma(&window, t);
            alpha.push(el.iter().map(|e| (top - e) / gm).collect());
            xi.push(el.iter().map(|e| e / gm).collect());
        }
        let ops = DerivativeOps::new(g);
        let sigma = a_grad_dot(g, c, &ops, &eta0, &eta0);
        let e_min = eta_max;
        let alpha_ref = (top - (lambda * e_min).exp()) / gamma(&window, window.theta);
        let d = window.t1 - window.t0;
        Ok(Self {
            eta0,
            eta_max,
            lambda,
            s,
            window,
            times: times.to_vec(),
            alpha,
            xi,
            sigma,
            alpha_ref,
            c1: d.powi(6) / 64.0,
            c2: d.powi(4) / 16.0,
            c3: d * d / 4.0,
        })
    }

    /// Scaled factor `e^{−s(α − α_ref)}` at time index `m`, node `k`.
    pub fn scaled_exp(&self, m: usize, k: usize) -> f64 {
        (-self.s * (self.alpha[m][k] - self.alpha_ref)).exp()
    }

    pub fn log_scale(&self) -> f64 {
        2.0 * self.s * self.alpha_ref
    }

    pub fn report(&self, g: &PolarGrid) -> WeightReport {
        let nt = self.times.len();
        let n = g.n_nodes();
        let mut positive = true;
        let mut xi_lower = true;
        let mut xi_c2 = true;
        let mut one_c3 = true;
        let bound = 4.0 / (self.window.t1 - self.window.t0).powi(2);
        let mut min_xi = f64::INFINITY;
        for m in 0..nt {
            for k in 0..n {
                let (a, x) = (self.alpha[m][k], self.xi[m][k]);
                positive &= a > 0.0 && x > 0.0;
                min_xi = min_xi.min(x);
                xi_lower &= x >= bound * (1.0 - 1e-14);
                xi_c2 &= x <= self.c2 * x * x * x * (1.0 + 1e-14);
                one_c3 &= 1.0 <= self.c3 * x * (1.0 + 1e-14);
            }
        }
        // (b) angle independence on Γ
        let mut boundary_spread = 0.0_f64;
        for m in 0..nt {
            let tr: Vec<f64> = g.trace_map.iter().map(|&k| self.alpha[m][k]).collect();
            let xs: Vec<f64> = g.trace_map.iter().map(|&k| self.xi[m][k]).collect();
            for v in [tr, xs] {
                let lo = v.iter().fold(f64::INFINITY, |a, b| a.min(*b));
                let hi = v.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
                boundary_spread = boundary_spread.max(hi - lo);
            }
        }
        let top = (2.0 * self.lambda * self.eta_max).exp();
        let mut dt_alpha_over_xi2 = 0.0_f64;
        for &t in &self.times {
            let gm = gamma(&self.window, t);
            let dg = self.window.t0 + self.window.t1 - 2.0 * t;
            for e in &self.eta0 {
                let el = (self.lambda * e).exp();
                let dta = -(top - el) * dg / (gm * gm);
                let x = el / gm;
                dt_alpha_over_xi2 = dt_alpha_over_xi2.max(dta.abs() / (x * x));
            }
        }
        // (d) time argmin at θ for each node
        let theta_idx = self
            .times
            .iter()
            .position(|&t| (t - self.window.theta).abs() <= 1e-12 * self.window.theta.abs().max(1.0));
        let argmin_at_theta = theta_idx.map(|ti| {
            (0..n).all(|k| (0..nt).all(|m| self.alpha[m][k] >= self.alpha[ti][k]))
        });
        let xi_theta_boundary = theta_idx.map(|ti| {
            g.trace_map
                .iter()
                .fold(f64::NEG_INFINITY, |a, &k| a.max(self.xi[ti][k]))
        });
        // (e), in logarithms: min_x −2sα(θ,x) and max over t,x of −2sα + 3 ln ξ
        let log_min_weight_theta = {
            let gm = gamma(&self.window, self.window.theta);
            self.eta0
                .iter()
                .map(|e| -2.0 * self.s * (top - (self.lambda * e).exp()) / gm)
                .fold(f64::INFINITY, f64::min)
        };
        let mut log_sup = f64::NEG_INFINITY;
        for m in 0..nt {
            for k in 0..n {
                log_sup = log_sup.max(-2.0 * self.s * self.alpha[m][k] + 3.0 * self.xi[m][k].ln());
            }
        }
        WeightReport {
            positive,
            boundary_spread,
            dt_alpha_over_xi2,
            xi_lower_bound: xi_lower,
            min_xi,
            xi_bound: bound,
            xi_le_c2_xi3: xi_c2,
            one_le_c3_xi: one_c3,
            argmin_at_theta,
            xi_theta_boundary,
            log_min_weight_theta,
            log_sup_weight_xi3: log_sup,
        }
    }
}

/// Properties (a)–(e) of the weights evaluated on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightReport {
    pub positive: bool,
    pub boundary_spread: f64,
    pub dt_alpha_over_xi2: f64,
    pub xi_lower_bound: bool,
    pub min_xi: f64,
    pub xi_bound: f64,
    pub xi_le_c2_xi3: bool,
    pub one_le_c3_xi: bool,
    pub argmin_at_theta: Option<bool>,
    pub xi_theta_boundary: Option<f64>,
    pub log_min_weight_theta: f64,
    pub log_sup_weight_xi3: f64,
}

impl WeightReport {
    pub fn all_hold(&self) -> bool {
        self.positive
            && self.boundary_spread == 0.0
            && self.dt_alpha_over_xi2.is_finite()
            && self.xi_lower_bound
            && self.xi_le_c2_xi3
            && self.one_le_c3_xi
            && self.argmin_at_theta.unwrap_or(false)
            && self.xi_theta_boundary == Some(self.xi_bound)
            && self.log_min_weight_theta.is_finite()
            && self.log_sup_weight_xi3.is_finite()
    }
}

/// `M1 y` and `N1 y_Γ` on interior time nodes, `y = e^{−sα} z` (scaled).
#[derive(Debug, Clone)]
pub struct M1N1 {
    pub times: Vec<f64>,
    pub m1: Vec<Vec<f64>>,
    pub n1: Vec<Vec<f64>>,
    pub log_scale: f64,
}

fn centered(states: &[Vec<f64>], m: usize, dt: f64) -> Vec<f64> {
    states[m + 1]
        .iter()
        .zip(&states[m - 1])
        .map(|(a, b)| (a - b) / (2.0 * dt))
        .collect()
}

fn uniform_step(times: &[f64]) -> Result<f64> {
    if times.len() < 3 {
        return Err(Error::TooFewTimeNodes(times.len()));
    }
    Ok(times[1] - times[0])
}

/// `M1 y` per bulk node and `N1 y_Γ` per surface node, for one time index.
fn m1_n1_at(
    g: &PolarGrid,
    c: &Coefficients,
    ops: &DerivativeOps,
    w: &WeightFields,
    m: usize,
    y: &[f64],
    dty: &[f64],
    dn_eta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (s, l) = (w.s, w.lambda);
    let ag = a_grad_dot(g, c, ops, &w.eta0, y);
    let m1 = (0..g.n_nodes())
        .map(|k| {
            let x = w.xi[m][k];
            dty[k] + 2.0 * s * l * x * ag[k] + 2.0 * s * l * l * x * w.sigma[k] * y[k]
        })
        .collect();
    let n1 = g
        .trace_map
        .iter()
        .enumerate()
        .map(|(j, &k)| dty[k] - s * l * w.xi[m][k] * y[k] * dn_eta[j])
        .collect();
    (m1, n1)
}

/// Applies M1/N1 to `y = e^{−sα}z`. `weights.times` must equal `times`;
/// outputs live on `times[1..len-1]` (centered time differences).
pub fn apply_m1_n1(
    g: &PolarGrid,
    c: &Coefficients,
    w: &WeightFields,
    z: &[Vec<f64>],
) -> Result<M1N1> {
    let dt = uniform_step(&w.times)?;
    if z.len() != w.times.len() {
        return Err(Error::Dimension("trajectory and weight times differ".into()));
    }
    let ops = DerivativeOps::new(g);
    let y: Vec<Vec<f64>> = z
        .iter()
        .enumerate()
        .map(|(m, zm)| zm.iter().enumerate().map(|(k, v)| w.scaled_exp(m, k) * v).collect())
        .collect();
    let dn_eta = conormal(g, c, &w.eta0);
    let mut out = M1N1 {
        times: w.times[1..w.times.len() - 1].to_vec(),
        m1: Vec::new(),
        n1: Vec::new(),
        log_scale: w.s * w.alpha_ref,
    };
    for m in 1..w.times.len() - 1 {
        let dty = centered(&y, m, dt);
        let (a, b) = m1_n1_at(g, c, &ops, w, m, &y[m], &dty, &dn_eta);
        out.m1.push(a);
        out.n1.push(b);
    }
    Ok(out)
}

/// I and J over `(t0, θ)` together with the right side of the
/// integration-by-parts identity for I.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IJ {
    pub i: f64,
    pub j: f64,
    pub i_identity: f64,
    pub log_scale: f64,
}

/// `v` is sampled at `t0 + k·dt`, `k = 0..`, reaching at least `θ + dt`.
/// At `t0` the weighted field vanishes unless `s = 0`.
pub fn compute_ij(
    g: &PolarGrid,
    c: &Coefficients,
    eta0: &[f64],
    lambda: f64,
    s: f64,
    window: TimeWindow,
    dt: f64,
    v: &[Vec<f64>],
) -> Result<IJ> {
    let k_theta = ((window.theta - window.t0) / dt).round() as usize;
    if v.len() < k_theta + 2 {
        return Err(Error::Dimension("trajectory does not reach θ + dt".into()));
    }
    let times: Vec<f64> = (1..=k_theta + 1).map(|k| window.t0 + k as f64 * dt).collect();
    let w = WeightFields::new(g, c, eta0.to_vec(), lambda, s, window, &times)?;
    let ops = DerivativeOps::new(g);
    let mut u = vec![if s == 0.0 { v[0].clone() } else { vec![0.0; g.n_nodes()] }];
    for (m, vm) in v[1..=k_theta + 1].iter().enumerate() {
        u.push(vm.iter().enumerate().map(|(k, x)| w.scaled_exp(m, k) * x).collect());
    }
    let dn_eta = conormal(g, c, eta0);
    let div_eta = div_a_grad(g, c, eta0);
    let (mut i_sum, mut j_sum, mut alt) = (0.0, 0.0, 0.0);
    for k in 1..=k_theta {
        let m = k - 1;
        let tw = if k == k_theta { 0.5 * dt } else { dt };
        let du = centered(&u, k, dt);
        let (m1, n1) = m1_n1_at(g, c, &ops, &w, m, &u[k], &du, &dn_eta);
        let mut bi = 0.0;
        let mut ai = 0.0;
        for q in 0..g.n_nodes() {
            let x = w.xi[m][q];
            let uu = u[k][q] * u[k][q];
            bi += g.w_bulk[q] * m1[q] * u[k][q];
            ai += g.w_bulk[q] * (s * lambda * lambda * x * w.sigma[q] - s * lambda * x * div_eta[q]) * uu;
        }
        let mut bj = 0.0;
        for (jj, &q) in g.trace_map.iter().enumerate() {
            bj += g.w_surf[jj] * n1[jj] * u[k][q];
            ai += g.w_surf[jj] * s * lambda * w.xi[m][q] * dn_eta[jj] * u[k][q] * u[k][q];
        }
        i_sum += tw * bi;
        j_sum += tw * bj;
        alt += tw * ai;
    }
    let half_sq = |x: &[f64]| 0.5 * g.w_bulk.iter().zip(x).map(|(w, x)| w * x * x).sum::<f64>();
    let half = half_sq(&u[k_theta]) - half_sq(&u[0]);
    Ok(IJ {
        i: i_sum,
        j: j_sum,
        i_identity: half + alt,
        log_scale: 2.0 * s * w.alpha_ref,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CarlemanSides {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: Option<f64>,
    /// Left side of the M1/N1 variant.
    pub lhs_m1n1: f64,
    pub ratio_m1n1: Option<f64>,
    /// Share of `rhs` coming from the observation term on ω.
    pub omega_share: f64,
    pub log_scale: f64,
}

/// Both sides of the Carleman inequality for a trace-compatible trajectory
/// `z` sampled at `w.times`. Time integrals use the interior nodes.
pub fn carleman_sides(
    g: &PolarGrid,
    c: &Coefficients,
    w: &WeightFields,
    z: &[Vec<f64>],
) -> Result<CarlemanSides> {
    let dt = uniform_step(&w.times)?;
    if !(w.s > 0.0) {
        return Err(Error::InvalidParameter("Carleman sides need s > 0".into()));
    }
    if z.len() != w.times.len() {
        return Err(Error::Dimension("trajectory and weight times differ".into()));
    }
    let ops = DerivativeOps::new(g);
    let mm = apply_m1_n1(g, c, w, z)?;
    let (s, l) = (w.s, w.lambda);
    let (mut lhs, mut rhs_obs, mut rhs_l, mut lhs_mn) = (0.0, 0.0, 0.0, 0.0);
    for m in 1..w.times.len() - 1 {
        let zm = &z[m];
        let dz = centered(z, m, dt);
        let div = div_a_grad(g, c, zm);
        let drift = drift_bulk(g, c, zm);
        let ga = matvec(&ops.d1a, zm);
        let gb = matvec(&ops.d1b, zm);
        let surf = g.trace(zm);
        let lb = laplace_beltrami(g, c, &surf);
        let sg = surface_gradient(g, &surf);
        let cn = conormal(g, c, zm);
        for k in 0..g.n_nodes() {
            let e2 = w.scaled_exp(m, k).powi(2);
            if e2 == 0.0 {
                continue;
            }
            let x = w.xi[m][k];
            let wq = g.w_bulk[k] * dt * e2;
            let grad2 = ga[k] * ga[k] + gb[k] * gb[k];
            lhs += wq
                * ((dz[k] * dz[k] + div[k] * div[k]) / (s * x)
                    + s * l * l * x * grad2
                    + s.powi(3) * l.powi(4) * x.powi(3) * zm[k] * zm[k]);
            let lz = dz[k] - div[k] - drift[k];
            rhs_l += wq * lz * lz;
            let obs = wq * s.powi(3) * l.powi(4) * x.powi(3) * zm[k] * zm[k];
            if g.omega_mask[k] {
                rhs_obs += obs;
            }
            lhs_mn += wq * s.powi(3) * l.powi(4) * x.powi(3) * zm[k] * zm[k];
        }
        for (j, &k) in g.trace_map.iter().enumerate() {
            let e2 = w.scaled_exp(m, k).powi(2);
            if e2 == 0.0 {
                continue;
            }
            let x = w.xi[m][k];
            let wq = g.w_surf[j] * dt * e2;
            lhs += wq
                * ((dz[k] * dz[k] + lb[j] * lb[j]) / (s * x)
                    + s * l * x * sg[j] * sg[j]
                    + s.powi(3) * l.powi(3) * x.powi(3) * zm[k] * zm[k]
                    + s * l * x * cn[j] * cn[j]);
            let lg = dz[k] - lb[j] + cn[j] - c.b_tan[j] * sg[j];
            rhs_l += wq * lg * lg;
            lhs_mn += wq * s.powi(3) * l.powi(3) * x.powi(3) * zm[k] * zm[k];
        }
        let mi = m - 1;
        lhs_mn += dt * g.w_bulk.iter().zip(&mm.m1[mi]).map(|(w, v)| w * v * v).sum::<f64>();
        lhs_mn += dt * g.w_surf.iter().zip(&mm.n1[mi]).map(|(w, v)| w * v * v).sum::<f64>();
    }
    let rhs = rhs_obs + rhs_l;
    let ratio = (rhs > 0.0).then(|| lhs / rhs);
    Ok(CarlemanSides {
        lhs,
        rhs,
        ratio,
        lhs_m1n1: lhs_mn,
        ratio_m1n1: (rhs > 0.0).then(|| lhs_mn / rhs),
        omega_share: if rhs > 0.0 { rhs_obs / rhs } else { 0.0 },
        log_scale: w.log_scale(),
    })
}

/// Interior time nodes `t0 + k·dt`, `k = 1..n`, for a window split into `n + 1` steps.
pub fn interior_times(window: &TimeWindow, n_steps: usize) -> Vec<f64> {
    let dt = (window.t1 - window.t0) / n_steps as f64;
    (1..n_steps).map(|k| window.t0 + k as f64 * dt).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{solve_steps, Scheme};
    use crate::model::{assemble_generator, PotentialPair};
    use crate::sampling::{rng, smooth_space_time};

    fn window() -> TimeWindow {
        TimeWindow::new(1.0, 0.25, 0.75).unwrap()
    }

    #[test]
    fn eta0_examples() {
        let g = PolarGrid::new(32, 64, 0.3).unwrap();
        let (eta, rep) = build_eta0(&g).unwrap();
        assert_eq!(eta[0], 1.0);
        assert_eq!(rep.max_abs_on_boundary, 0.0);
        assert!((rep.normal_derivative.0 + 2.0).abs() < 1e-10 && (rep.normal_derivative.1 + 2.0).abs() < 1e-10);
        assert!((rep.min_grad_outside_omega - 0.6).abs() <= 2.0 * g.h);
        assert!(rep.ok);
        let mut g2 = g.clone();
        g2.omega_mask[0] = false;
        assert!(matches!(build_eta0(&g2), Err(Error::OmegaExcludesOrigin)));
    }

    #[test]
    fn weight_examples() {
        let g = PolarGrid::new(16, 32, 0.3).unwrap();
        let c = Coefficients::isotropic(&g);
        let (eta, _) = build_eta0(&g).unwrap();
        let w = window();
        assert_eq!(gamma(&w, w.theta), 0.0625);
        let ws = WeightFields::new(&g, &c, eta.clone(), 2.0, 4.0, w, &[w.theta]).unwrap();
        let kb = g.trace_map[5];
        assert_eq!(ws.xi[0][kb], 16.0);
        let expect = ((4.0_f64).exp() - 1.0) / 0.0625;
        assert!((ws.alpha[0][kb] - expect).abs() <= 1e-12 * expect);
        assert!(matches!(
            WeightFields::new(&g, &c, eta.clone(), 2.0, 4.0, w, &[w.t0]),
            Err(Error::OutsideWindow { .. })
        ));
        assert!(WeightFields::new(&g, &c, eta, 2.0, 4.0, w, &[w.t1]).is_err());
    }

    #[test]
    fn weight_properties_hold() {
        let g = PolarGrid::new(16, 32, 0.3).unwrap();
        let c = Coefficients::isotropic(&g);
        let (eta, _) = build_eta0(&g).unwrap();
        let w = window();
        for (l, s) in [(1.0, 1.0), (2.0, 16.0), (3.0, 64.0)] {
            let ws = WeightFields::new(&g, &c, eta.clone(), l, s, w, &interior_times(&w, 64)).unwrap();
            let rep = ws.report(&g);
            assert!(rep.all_hold(), "{rep:?}");
        }
    }

    #[test]
    fn m1_n1_trivial_cases() {
        let g = PolarGrid::new(8, 16, 0.3).unwrap();
        let c = Coefficients::isotropic(&g);
        let (eta, _) = build_eta0(&g).unwrap();
        let w = window();
        let times = interior_times(&w, 16);
        let zf = smooth_space_time(&g, &mut rng(1), &times, w.theta);
        let ws0 = WeightFields::new(&g, &c, eta.clone(), 2.0, 0.0, w, &times).unwrap();
        let out = apply_m1_n1(&g, &c, &ws0, &zf).unwrap();
        let dt = times[1] - times[0];
        for (m, row) in out.m1.iter().enumerate() {
            for k in 0..g.n_nodes() {
                let d = (zf[m + 2][k] - zf[m][k]) / (2.0 * dt);
                assert!((row[k] - d).abs() < 1e-9);
            }
        }
        let zero = vec![vec![0.0; g.n_nodes()]; times.len()];
        let ws = WeightFields::new(&g, &c, eta.clone(), 2.0, 8.0, w, &times).unwrap();
        let out = apply_m1_n1(&g, &c, &ws, &zero).unwrap();
        assert!(out.m1.iter().flatten().chain(out.n1.iter().flatten()).all(|v| *v == 0.0));
        let flat = vec![zf[0].clone(); times.len()];
        let out = apply_m1_n1(&g, &c, &ws0, &flat).unwrap();
        assert!(out.m1.iter().flatten().all(|v| *v == 0.0));
        let ws2 = WeightFields::new(&g, &c, eta, 2.0, 1.0, w, &times[..2]).unwrap();
        assert!(matches!(apply_m1_n1(&g, &c, &ws2, &zf[..2]), Err(Error::TooFewTimeNodes(2))));
    }

    #[test]
    fn ij_trivial_cases() {
        let g = PolarGrid::new(8, 16, 0.3).unwrap();
        let c = Coefficients::isotropic(&g);
        let (eta, _) = build_eta0(&g).unwrap();
        let w = window();
        let dt = (w.t1 - w.t0) / 32.0;
        let zero = vec![vec![0.0; g.n_nodes()]; 33];
        let r = compute_ij(&g, &c, &eta, 2.0, 4.0, w, dt, &zero).unwrap();
        assert_eq!((r.i, r.j), (0.0, 0.0));
        let flat = vec![g.sample(|r, p| 1.0 + r * p.cos()); 33];
        let r = compute_ij(&g, &c, &eta, 2.0, 0.0, w, dt, &flat).unwrap();
        assert!(r.i.abs() < 1e-12 && r.j.abs() < 1e-12);
    }

    #[test]
    fn ij_matches_integration_by_parts() {
        let g = PolarGrid::new(64, 128, 0.3).unwrap();
        let c = Coefficients::isotropic(&g);
        let (eta, _) = build_eta0(&g).unwrap();
        let w = TimeWindow::new(2.0, 0.1, 1.9).unwrap();
        let n = 1024;
        let dt = (w.t1 - w.t0) / n as f64;
        let times: Vec<f64> = (0..=n).map(|k| w.t0 + k as f64 * dt).collect();
        let mut r = rng(11);
        for _ in 0..3 {
            let v = smooth_space_time(&g, &mut r, &times, w.theta);
            let ij = compute_ij(&g, &c, &eta, 1.0, 1.0, w, dt, &v).unwrap();
            let rel = (ij.i - ij.i_identity).abs() / ij.i.abs();
            assert!(rel <= 1e-3, "I = {}, identity = {}, rel {rel:e}", ij.i, ij.i_identity);
        }
    }

    #[test]
    fn homogeneous_solution_has_finite_ratio() {
        let g = PolarGrid::new(16, 32, 0.3).unwrap();
        let c = Coefficients::isotropic(&g);
        let gen = assemble_generator(&g, &c, &PotentialPair::zero(&g)).unwrap();
        let w = window();
        let dt = (w.t1 - w.t0) / 64.0;
        let y0 = g.sample(|r, p| 1.0 + 0.5 * r * p.cos() + 0.3 * r * r * (2.0 * p).sin());
        let n0 = (w.t0 / dt).round() as usize;
        let tr = solve_steps(&gen, &y0, None, dt, n0 + 64, Scheme::ImplicitEuler).unwrap();
        let z: Vec<Vec<f64>> = tr.states[n0 + 1..n0 + 64].to_vec();
        let (eta, _) = build_eta0(&g).unwrap();
        let ws = WeightFields::new(&g, &c, eta, 2.0, 8.0, w, &interior_times(&w, 64)).unwrap();
        let sides = carleman_sides(&g, &c, &ws, &z).unwrap();
        let ratio = sides.ratio.unwrap();
        assert!(ratio.is_finite() && ratio > 0.0);
        assert!(sides.omega_share > 0.9, "{}", sides.omega_share);
    }

    #[test]
    fn zero_field_is_degenerate() {
        let g = PolarGrid::new(8, 16, 0.3).unwrap();
        let c = Coefficients::isotropic(&g);
        let (eta, _) = build_eta0(&g).unwrap();
        let w = window();
        let times = interior_times(&w, 16);
        let ws = WeightFields::new(&g, &c, eta, 2.0, 4.0, w, &times).unwrap();
        let z = vec![vec![0.0; g.n_nodes()]; times.len()];
        let s = carleman_sides(&g, &c, &ws, &z).unwrap();
        assert_eq!(s.lhs, 0.0);
        assert!(s.ratio.is_none());
    }
}
