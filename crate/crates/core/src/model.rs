//! Coefficients, potentials, admissible sets, the spatial operators L and L_Γ,
//! and the discrete generator `𝒜 = 𝒜₀ + P`.
//!
//! The generator is assembled in mass-weighted finite-volume form:
//! `M·gen0 = S0`, where `S0` collects edge fluxes (symmetric part) and drift
//! stencils. On a trace node the bulk half-cell and the surface arc share one
//! unknown; their equations are summed, so the conormal flux leaving the bulk
//! cell enters the surface equation and cancels. `apply_L`/`apply_L_gamma`
//! evaluate the two equations separately and keep the conormal term.

use sprs::CsMat;

use crate::error::{Error, Result};
use crate::grid::{w2inf_norm, DerivativeOps, PolarGrid, State};
use crate::linalg::{diag_plus_scaled, Triplets};

/// Diffusion and drift coefficients. `a` holds Cartesian `(a11, a12, a22)`
/// per bulk node, `b_vec` the Cartesian drift; `d` and `b_tan` live on Γ.
#[derive(Debug, Clone)]
pub struct Coefficients {
    pub a: Vec<[f64; 3]>,
    pub b_vec: Vec<[f64; 2]>,
    pub d: Vec<f64>,
    pub b_tan: Vec<f64>,
    pub beta: f64,
}

impl Coefficients {
    /// `A = I`, `D = 1`, no drift.
    pub fn isotropic(g: &PolarGrid) -> Self {
        let n = g.n_nodes();
        Self {
            a: vec![[1.0, 0.0, 1.0]; n],
            b_vec: vec![[0.0, 0.0]; n],
            d: vec![1.0; g.n_phi],
            b_tan: vec![0.0; g.n_phi],
            beta: 0.5,
        }
    }

    /// Radially anisotropic diffusion `A = a(ρ)I + c(ρ)·x xᵀ`, with Cartesian
    /// drift `B(x, y)`, surface diffusion `D(φ)` and tangential drift `b(φ)`.
    pub fn from_fns(
        g: &PolarGrid,
        a_iso: impl Fn(f64) -> f64,
        a_rad: impl Fn(f64) -> f64,
        drift: impl Fn(f64, f64) -> [f64; 2],
        d: impl Fn(f64) -> f64,
        b_tan: impl Fn(f64) -> f64,
        beta: f64,
    ) -> Self {
        let n = g.n_nodes();
        let mut a = Vec::with_capacity(n);
        let mut b_vec = Vec::with_capacity(n);
        for k in 0..n {
            let rho = g.rho(k);
            let (x, y) = g.xy(k);
            let (ai, ar) = (a_iso(rho), a_rad(rho));
            a.push([ai + ar * x * x, ar * x * y, ai + ar * y * y]);
            b_vec.push(drift(x, y));
        }
        Self {
            a,
            b_vec,
            d: g.angles.iter().map(|&p| d(p)).collect(),
            b_tan: g.angles.iter().map(|&p| b_tan(p)).collect(),
            beta,
        }
    }

    /// Copy without drift terms.
    pub fn without_drift(&self) -> Self {
        Self {
            b_vec: vec![[0.0, 0.0]; self.b_vec.len()],
            b_tan: vec![0.0; self.b_tan.len()],
            ..self.clone()
        }
    }

    /// Polar components `(a_ρρ, a_ρφ, a_φφ)` of `A` at node `k` along angle φ.
    pub fn a_polar(&self, k: usize, phi: f64) -> (f64, f64, f64) {
        let [a11, a12, a22] = self.a[k];
        let (c, s) = (phi.cos(), phi.sin());
        (
            c * c * a11 + 2.0 * c * s * a12 + s * s * a22,
            -c * s * a11 + (c * c - s * s) * a12 + c * s * a22,
            s * s * a11 - 2.0 * c * s * a12 + c * c * a22,
        )
    }

    /// Polar components `(B_ρ, B_φ)` of the drift at node `k`.
    pub fn b_polar(&self, k: usize, phi: f64) -> (f64, f64) {
        let [b1, b2] = self.b_vec[k];
        let (c, s) = (phi.cos(), phi.sin());
        (c * b1 + s * b2, -s * b1 + c * b2)
    }

    /// Nodewise ellipticity and polar alignment of `A`, ellipticity of `D`.
    pub fn validate(&self, g: &PolarGrid) -> Result<()> {
        if self.a.len() != g.n_nodes() || self.d.len() != g.n_phi {
            return Err(Error::Dimension("coefficient fields do not match the grid".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidParameter(format!("beta = {} must be positive", self.beta)));
        }
        for (k, &[a11, a12, a22]) in self.a.iter().enumerate() {
            let tr = 0.5 * (a11 + a22);
            let det = (0.25 * (a11 - a22).powi(2) + a12 * a12).sqrt();
            let eig = tr - det;
            if !(eig >= self.beta) {
                return Err(Error::NonElliptic {
                    field: "A",
                    node: k,
                    eig,
                    beta: self.beta,
                });
            }
            if k > 0 {
                let (_, cross, _) = self.a_polar(k, g.phi(k));
                if cross.abs() > 1e-12 * (a11.abs() + a22.abs()) {
                    return Err(Error::CrossDiffusion { node: k, value: cross });
                }
            }
        }
        for (j, &d) in self.d.iter().enumerate() {
            if !(d >= self.beta) {
                return Err(Error::NonElliptic {
                    field: "D",
                    node: g.trace_map[j],
                    eig: d,
                    beta: self.beta,
                });
            }
        }
        Ok(())
    }
}

/// Radiative potentials: `p` per bulk node (trace-ring values unused), `q` on Γ.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialPair {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl PotentialPair {
    pub fn zero(g: &PolarGrid) -> Self {
        Self {
            p: vec![0.0; g.n_nodes()],
            q: vec![0.0; g.n_phi],
        }
    }

    pub fn constant(g: &PolarGrid, c: f64) -> Self {
        Self {
            p: vec![c; g.n_nodes()],
            q: vec![c; g.n_phi],
        }
    }

    pub fn from_fns(g: &PolarGrid, p: impl Fn(f64, f64) -> f64, q: impl Fn(f64) -> f64) -> Self {
        Self {
            p: g.sample(p),
            q: g.angles.iter().map(|&t| q(t)).collect(),
        }
    }

    pub fn sub(&self, o: &Self) -> Self {
        Self {
            p: self.p.iter().zip(&o.p).map(|(a, b)| a - b).collect(),
            q: self.q.iter().zip(&o.q).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn axpy(&self, c: f64, o: &Self) -> Self {
        Self {
            p: self.p.iter().zip(&o.p).map(|(a, b)| a + c * b).collect(),
            q: self.q.iter().zip(&o.q).map(|(a, b)| a + c * b).collect(),
        }
    }

    /// ℒ² norm using the potential quadrature (trace-ring `p` carries no weight).
    pub fn l2(&self, g: &PolarGrid) -> f64 {
        let a: f64 = g.w_pot.iter().zip(&self.p).map(|(w, v)| w * v * v).sum();
        let b: f64 = g.w_surf.iter().zip(&self.q).map(|(w, v)| w * v * v).sum();
        (a + b).sqrt()
    }

    pub fn linf(&self, g: &PolarGrid) -> f64 {
        let mp = self
            .p
            .iter()
            .enumerate()
            .filter(|(k, _)| !g.is_trace(*k))
            .fold(0.0_f64, |m, (_, v)| m.max(v.abs()));
        self.q.iter().fold(mp, |m, v| m.max(v.abs()))
    }

    /// Mass-weighted reaction diagonal `m∘p_eff`: `w_k p_k` off Γ, and
    /// `w_b p_{inner} + w_s q_j` on trace node `j`.
    pub fn weighted_diagonal(&self, g: &PolarGrid) -> Vec<f64> {
        let mut d: Vec<f64> = g.w_bulk.iter().zip(&self.p).map(|(w, p)| w * p).collect();
        for (j, &k) in g.trace_map.iter().enumerate() {
            d[k] = g.w_bulk[k] * self.p[k - g.n_phi] + g.w_surf[j] * self.q[j];
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmissibleBounds {
    pub r: f64,
    pub big_r: f64,
}

impl AdmissibleBounds {
    pub fn new(r: f64, big_r: f64) -> Result<Self> {
        if !(r > 0.0 && r <= big_r) {
            return Err(Error::InvalidParameter(format!(
                "admissible bounds require 0 < r <= R, got r = {r}, R = {big_r}"
            )));
        }
        Ok(Self { r, big_r })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityReport {
    pub admissible: bool,
    pub violations: Vec<String>,
    /// Smallest nodal value (initial data) or `‖·‖_∞` (potentials).
    pub min_value: f64,
    pub norm: f64,
}

pub fn check_admissible_initial(
    g: &PolarGrid,
    ops: &DerivativeOps,
    y0: &State,
    bounds: &AdmissibleBounds,
) -> AdmissibilityReport {
    let min_value = y0.bulk.iter().chain(&y0.surf).fold(f64::INFINITY, |m, &v| m.min(v));
    let norm = w2inf_norm(g, ops, &y0.bulk);
    let mut violations = Vec::new();
    if min_value < bounds.r {
        violations.push(format!("lower bound violated: min {min_value} < r = {}", bounds.r));
    }
    if norm > bounds.big_r {
        violations.push(format!("‖Y0‖_(2,∞) = {norm} exceeds R = {}", bounds.big_r));
    }
    AdmissibilityReport {
        admissible: violations.is_empty(),
        violations,
        min_value,
        norm,
    }
}

pub fn check_admissible_potentials(
    g: &PolarGrid,
    pq: &PotentialPair,
    bounds: &AdmissibleBounds,
) -> AdmissibilityReport {
    let mut violations = Vec::new();
    let np = pq
        .p
        .iter()
        .enumerate()
        .filter(|(k, _)| !g.is_trace(*k))
        .fold(0.0_f64, |m, (_, v)| m.max(v.abs()));
    let nq = pq.q.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if np > bounds.big_r {
        violations.push(format!("‖p‖_∞ exceeds R: {np} > {}", bounds.big_r));
    }
    if nq > bounds.big_r {
        violations.push(format!("‖q‖_∞ exceeds R: {nq} > {}", bounds.big_r));
    }
    AdmissibilityReport {
        admissible: violations.is_empty(),
        violations,
        min_value: np.max(nq),
        norm: np.max(nq),
    }
}

/// `gen = M⁻¹(S0 + diag(pot))`.
#[derive(Debug, Clone)]
pub struct DiscreteGenerator {
    pub s0: CsMat<f64>,
    /// Mass-weighted potential diagonal `m∘p_eff`.
    pub pot: Vec<f64>,
    pub mass: Vec<f64>,
}

impl DiscreteGenerator {
    pub fn dim(&self) -> usize {
        self.mass.len()
    }

    /// `S0·u` in difference form `Σ_j s_ij (u_j − u_i)`; rows of `S0` sum
    /// to zero, so constants are annihilated exactly.
    pub fn s0_apply(&self, u: &[f64]) -> Vec<f64> {
        self.s0
            .outer_iterator()
            .enumerate()
            .map(|(i, row)| {
                row.iter()
                    .filter(|(j, _)| *j != i)
                    .map(|(j, &v)| v * (u[j] - u[i]))
                    .sum()
            })
            .collect()
    }

    pub fn gen0_apply(&self, u: &[f64]) -> Vec<f64> {
        self.s0_apply(u).iter().zip(&self.mass).map(|(v, m)| v / m).collect()
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let s = self.s0_apply(u);
        s.iter()
            .zip(&self.pot)
            .zip(u)
            .zip(&self.mass)
            .map(|(((s, p), u), m)| (s + p * u) / m)
            .collect()
    }

    /// Effective pointwise potential `p_eff = pot / m`.
    pub fn peff(&self) -> Vec<f64> {
        self.pot.iter().zip(&self.mass).map(|(p, m)| p / m).collect()
    }

    /// `M − c·(S0 + diag(pot))`, or `M − c·S0` when `with_pot` is false.
    pub fn shifted(&self, c: f64, with_pot: bool) -> CsMat<f64> {
        let d: Vec<f64> = if with_pot {
            self.mass.iter().zip(&self.pot).map(|(m, p)| m - c * p).collect()
        } else {
            self.mass.clone()
        };
        diag_plus_scaled(&d, -c, &self.s0)
    }

    pub fn with_potentials(&self, g: &PolarGrid, pq: &PotentialPair) -> Self {
        Self {
            s0: self.s0.clone(),
            pot: pq.weighted_diagonal(g),
            mass: self.mass.clone(),
        }
    }
}

/// Edge conductances `(i, j, κ)` of the symmetric diffusion part.
fn edges(g: &PolarGrid, c: &Coefficients) -> Vec<(usize, usize, f64)> {
    let (nr, np) = (g.n_r, g.n_phi);
    let (h, dp) = (g.h, g.dphi);
    let arr = |k: usize| c.a_polar(k, g.phi(k)).0;
    let app = |k: usize| c.a_polar(k, g.phi(k)).2;
    let mut e = Vec::new();
    for j in 0..np {
        let k = g.node(1, j as isize);
        let a0 = c.a_polar(0, g.angles[j]).0;
        e.push((0, k, 0.5 * (a0 + arr(k)) * 0.5 * dp));
    }
    for i in 1..=nr {
        let rho = i as f64 * h;
        for j in 0..np as isize {
            let k = g.node(i, j);
            if i < nr {
                let kn = g.node(i + 1, j);
                e.push((k, kn, 0.5 * (arr(k) + arr(kn)) * (rho + 0.5 * h) * dp / h));
            }
            let kj = g.node(i, j + 1);
            let face = if i < nr { h / rho } else { 0.5 * h };
            e.push((k, kj, 0.5 * (app(k) + app(kj)) * face / dp));
        }
    }
    for j in 0..np as isize {
        let k = g.node(nr, j);
        let kj = g.node(nr, j + 1);
        let jj = j as usize;
        e.push((k, kj, 0.5 * (c.d[jj] + c.d[(jj + 1) % np]) / dp));
    }
    e
}

pub fn assemble_generator(
    g: &PolarGrid,
    c: &Coefficients,
    pq: &PotentialPair,
) -> Result<DiscreteGenerator> {
    c.validate(g)?;
    if pq.p.len() != g.n_nodes() || pq.q.len() != g.n_phi {
        return Err(Error::Dimension("potential fields do not match the grid".into()));
    }
    let n = g.n_nodes();
    let (nr, np) = (g.n_r, g.n_phi);
    let (h, dp) = (g.h, g.dphi);
    let mut t = Triplets::new(n, n);
    for (a, b, kappa) in edges(g, c) {
        t.push(a, b, kappa);
        t.push(b, a, kappa);
        t.push(a, a, -kappa);
        t.push(b, b, -kappa);
    }
    // drift, mass-weighted
    let co = 2.0 / (np as f64 * h);
    for j in 0..np {
        let k = g.node(1, j as isize);
        let phi = g.angles[j];
        let bj = c.b_vec[0][0] * phi.cos() + c.b_vec[0][1] * phi.sin();
        let v = g.w_bulk[0] * co * bj;
        t.push(0, k, v);
        t.push(0, 0, -v);
    }
    for i in 1..=nr {
        let rho = i as f64 * h;
        for j in 0..np as isize {
            let k = g.node(i, j);
            let w = g.w_bulk[k];
            let (br, bp) = c.b_polar(k, g.phi(k));
            if i < nr {
                t.push(k, g.node(i + 1, j), w * br / (2.0 * h));
                t.push(k, g.node(i - 1, j), -w * br / (2.0 * h));
            } else {
                t.push(k, k, w * br / h);
                t.push(k, g.node(i - 1, j), -w * br / h);
            }
            let a = w * bp / (2.0 * rho * dp);
            t.push(k, g.node(i, j + 1), a);
            t.push(k, g.node(i, j - 1), -a);
            if i == nr {
                let a = g.w_surf[j as usize] * c.b_tan[j as usize] / (2.0 * dp);
                t.push(k, g.node(i, j + 1), a);
                t.push(k, g.node(i, j - 1), -a);
            }
        }
    }
    let mut s0 = t.into_csr();
    // exact zero row sums
    for i in 0..n {
        let off: f64 = s0
            .outer_view(i)
            .unwrap()
            .iter()
            .filter(|(j, _)| *j != i)
            .map(|(_, &v)| v)
            .sum();
        if let Some(d) = s0.get_mut(i, i) {
            *d = -off;
        }
    }
    Ok(DiscreteGenerator {
        s0,
        pot: pq.weighted_diagonal(g),
        mass: g.mass.clone(),
    })
}

/// `B·∇u` per bulk node, with a two-point radial difference on the trace ring.
pub fn drift_bulk(g: &PolarGrid, c: &Coefficients, u: &[f64]) -> Vec<f64> {
    let (nr, np) = (g.n_r, g.n_phi);
    let (h, dp) = (g.h, g.dphi);
    let mut out = vec![0.0; g.n_nodes()];
    let co = 2.0 / (np as f64 * h);
    out[0] = (0..np)
        .map(|j| {
            let phi = g.angles[j];
            let bj = c.b_vec[0][0] * phi.cos() + c.b_vec[0][1] * phi.sin();
            co * bj * (u[1 + j] - u[0])
        })
        .sum();
    for i in 1..=nr {
        let rho = i as f64 * h;
        for j in 0..np as isize {
            let k = g.node(i, j);
            let (br, bp) = c.b_polar(k, g.phi(k));
            let ur = if i < nr {
                (u[g.node(i + 1, j)] - u[g.node(i - 1, j)]) / (2.0 * h)
            } else {
                (u[k] - u[g.node(i - 1, j)]) / h
            };
            let up = (u[g.node(i, j + 1)] - u[g.node(i, j - 1)]) / (2.0 * rho * dp);
            out[k] = br * ur + bp * up;
        }
    }
    out
}

/// Flux-form `div(A∇u)` per bulk node. On the trace ring the outer flux of
/// the half cell is the discrete conormal derivative.
pub fn div_a_grad(g: &PolarGrid, c: &Coefficients, u: &[f64]) -> Vec<f64> {
    let (nr, np) = (g.n_r, g.n_phi);
    let (h, dp) = (g.h, g.dphi);
    let arr = |k: usize| c.a_polar(k, g.phi(k)).0;
    let app = |k: usize| c.a_polar(k, g.phi(k)).2;
    let mut out = vec![0.0; g.n_nodes()];
    // origin: flux through the circle of radius h/2
    let mut f0 = 0.0;
    for j in 0..np {
        let k = 1 + j;
        let a = 0.5 * (c.a_polar(0, g.angles[j]).0 + arr(k));
        f0 += a * (u[k] - u[0]) / h * (0.5 * h * dp);
    }
    out[0] = f0 / g.w_bulk[0];
    let cn = conormal(g, c, u);
    for i in 1..=nr {
        let rho = i as f64 * h;
        let (r_in, r_out) = (rho - 0.5 * h, rho + 0.5 * h);
        for j in 0..np as isize {
            let k = g.node(i, j);
            let ki = g.node(i - 1, j);
            let a_in = if i == 1 {
                0.5 * (c.a_polar(0, g.phi(k)).0 + arr(k))
            } else {
                0.5 * (arr(k) + arr(ki))
            };
            let mut flux = a_in * (u[ki] - u[k]) / h * (r_in * dp);
            let radial_len;
            if i < nr {
                let ko = g.node(i + 1, j);
                flux += 0.5 * (arr(k) + arr(ko)) * (u[ko] - u[k]) / h * (r_out * dp);
                radial_len = h;
            } else {
                flux += cn[j as usize] * dp;
                radial_len = 0.5 * h;
            }
            for s in [-1, 1] {
                let kj = g.node(i, j + s);
                flux += 0.5 * (app(k) + app(kj)) * (u[kj] - u[k]) / (rho * dp) * radial_len;
            }
            out[k] = flux / g.w_bulk[k];
        }
    }
    out
}

/// `∂_ν^A u = a_ρρ ∂_ρ u` on Γ, second-order one-sided.
pub fn conormal(g: &PolarGrid, c: &Coefficients, u: &[f64]) -> Vec<f64> {
    let n = g.n_r;
    (0..g.n_phi as isize)
        .map(|j| {
            let k = g.node(n, j);
            let d = (3.0 * u[k] - 4.0 * u[g.node(n - 1, j)] + u[g.node(n - 2, j)]) / (2.0 * g.h);
            c.a_polar(k, g.phi(k)).0 * d
        })
        .collect()
}

/// `div_Γ(D∇_Γ u)` on Γ in flux form.
pub fn laplace_beltrami(g: &PolarGrid, c: &Coefficients, surf: &[f64]) -> Vec<f64> {
    let n = surf.len();
    (0..n)
        .map(|j| {
            let (jp, jm) = ((j + 1) % n, (j + n - 1) % n);
            let fp = 0.5 * (c.d[j] + c.d[jp]) * (surf[jp] - surf[j]);
            let fm = 0.5 * (c.d[j] + c.d[jm]) * (surf[jm] - surf[j]);
            (fp + fm) / (g.dphi * g.dphi)
        })
        .collect()
}

/// Spatial part of `L`: `div(A∇y) + B·∇y + p·y`. On the trace ring the
/// reaction uses `p` from the adjacent inner ring.
pub fn apply_l(g: &PolarGrid, c: &Coefficients, p: &[f64], y: &[f64]) -> Vec<f64> {
    let d = div_a_grad(g, c, y);
    let b = drift_bulk(g, c, y);
    (0..g.n_nodes())
        .map(|k| {
            let pk = if g.is_trace(k) { p[k - g.n_phi] } else { p[k] };
            d[k] + b[k] + pk * y[k]
        })
        .collect()
}

/// Spatial part of `L_Γ`: `div_Γ(D∇_Γ y_Γ) − ∂_ν^A y + ⟨b, ∇_Γ y_Γ⟩ + q·y_Γ`.
pub fn apply_l_gamma(g: &PolarGrid, c: &Coefficients, q: &[f64], y: &State) -> Result<Vec<f64>> {
    for (j, &k) in g.trace_map.iter().enumerate() {
        if y.bulk[k] != y.surf[j] {
            return Err(Error::TraceIncompatible {
                node: k,
                bulk: y.bulk[k],
                surf: y.surf[j],
            });
        }
    }
    let lb = laplace_beltrami(g, c, &y.surf);
    let cn = conormal(g, c, &y.bulk);
    let gs = crate::grid::surface_gradient(g, &y.surf);
    Ok((0..g.n_phi)
        .map(|j| lb[j] - cn[j] + c.b_tan[j] * gs[j] + q[j] * y.surf[j])
        .collect())
}

/// Discrete bilinear form `𝔞₀[u, v]` by face-gradient quadrature of
/// `∫A∇u·∇v − (B·∇u)v` plus the surface counterpart.
pub fn bilinear_form(g: &PolarGrid, c: &Coefficients, u: &[f64], v: &[f64]) -> f64 {
    let (nr, np) = (g.n_r, g.n_phi);
    let (h, dp) = (g.h, g.dphi);
    let mut total = 0.0;
    // radial faces: gradient (u_o − u_i)/h, face length ρ_face·Δφ, width h
    for i in 0..nr {
        let rface = (i as f64 + 0.5) * h;
        for j in 0..np as isize {
            let (ki, ko) = (g.node(i, j), g.node(i + 1, j));
            let phi = g.angles[j as usize];
            let a = 0.5 * (c.a_polar(ki, phi).0 + c.a_polar(ko, phi).0);
            let (du, dv) = ((u[ko] - u[ki]) / h, (v[ko] - v[ki]) / h);
            let len = if i == 0 { 0.5 * h * dp } else { rface * dp };
            total += a * du * dv * len * h;
        }
    }
    // angular faces: gradient difference / (ρΔφ), face length (h or h/2), width ρΔφ
    for i in 1..=nr {
        let rho = i as f64 * h;
        let len = if i < nr { h } else { 0.5 * h };
        for j in 0..np as isize {
            let (ka, kb) = (g.node(i, j), g.node(i, j + 1));
            let a = 0.5
                * (c.a_polar(ka, g.phi(ka)).2 + c.a_polar(kb, g.phi(kb)).2);
            let (du, dv) = ((u[kb] - u[ka]) / (rho * dp), (v[kb] - v[ka]) / (rho * dp));
            total += a * du * dv * len * rho * dp;
        }
    }
    let drift = drift_bulk(g, c, u);
    total -= g.w_bulk.iter().zip(&drift).zip(v).map(|((w, d), v)| w * d * v).sum::<f64>();
    let us = g.trace(u);
    let vs = g.trace(v);
    for j in 0..np {
        let jp = (j + 1) % np;
        let dd = 0.5 * (c.d[j] + c.d[jp]);
        total += dd * (us[jp] - us[j]) / dp * (vs[jp] - vs[j]) / dp * dp;
    }
    let gs = crate::grid::surface_gradient(g, &us);
    for j in 0..np {
        total -= g.w_surf[j] * c.b_tan[j] * gs[j] * vs[j];
    }
    total
}
