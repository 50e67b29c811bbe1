//! Polar grid on the unit disk, boundary circle, quadrature and discrete calculus.
//!
//! Node 0 is the origin. Ring `i = 1..=n_r` sits at `ρ_i = i/n_r` with `n_phi`
//! equispaced angles; node `(i, j)` has index `1 + (i-1)·n_phi + j`. The outer
//! ring is Γ. Bulk and surface values share degrees of freedom on Γ, so a
//! state is stored as one stacked bulk vector whose trace is the surface field.

use std::f64::consts::PI;

use sprs::CsMat;

use crate::error::{Error, Result};
use crate::linalg::{matvec, matvec_t, Triplets};

/// Averaging rule for the polar center: the origin couples to every node of
/// the first ring with equal weight.
#[derive(Debug, Clone)]
pub struct OriginStencil {
    pub ring: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PolarGrid {
    pub n_r: usize,
    pub n_phi: usize,
    pub h: f64,
    pub dphi: f64,
    pub omega_radius: f64,
    /// Ring radii `ρ_1 < … < ρ_{n_r} = 1`.
    pub radii: Vec<f64>,
    pub angles: Vec<f64>,
    /// Control-volume areas; they sum to π exactly.
    pub w_bulk: Vec<f64>,
    pub w_surf: Vec<f64>,
    pub trace_map: Vec<usize>,
    pub omega_mask: Vec<bool>,
    pub origin_stencil: OriginStencil,
    /// Lumped mass of the stacked state: `w_bulk` plus `w_surf` on Γ.
    pub mass: Vec<f64>,
    /// Quadrature for a bulk potential. The trace ring's cell is folded into
    /// ring `n_r - 1`, whose potential value drives it.
    pub w_pot: Vec<f64>,
}

impl PolarGrid {
    pub fn new(n_r: usize, n_phi: usize, omega_radius: f64) -> Result<Self> {
        if n_phi % 2 == 1 {
            return Err(Error::OddAngularCount(n_phi));
        }
        if n_r < 4 {
            return Err(Error::InvalidGrid(format!("n_r = {n_r} must be at least 4")));
        }
        if n_phi < 8 {
            return Err(Error::InvalidGrid(format!("n_phi = {n_phi} must be at least 8")));
        }
        let limit = 1.0 - 2.0 / n_r as f64;
        if !(omega_radius > 0.0 && omega_radius < limit) {
            return Err(Error::OmegaTouchesBoundary {
                radius: omega_radius,
                limit,
            });
        }
        let h = 1.0 / n_r as f64;
        let dphi = 2.0 * PI / n_phi as f64;
        let radii: Vec<f64> = (1..=n_r).map(|i| i as f64 / n_r as f64).collect();
        let angles: Vec<f64> = (0..n_phi).map(|j| j as f64 * dphi).collect();
        let n = 1 + n_r * n_phi;

        let mut w_bulk = vec![0.0; n];
        w_bulk[0] = PI * h * h / 4.0;
        for i in 1..=n_r {
            let w = if i < n_r {
                radii[i - 1] * h * dphi
            } else {
                0.5 * h * (1.0 - 0.25 * h) * dphi
            };
            for j in 0..n_phi {
                w_bulk[1 + (i - 1) * n_phi + j] = w;
            }
        }
        let w_surf = vec![dphi; n_phi];
        let trace_map: Vec<usize> = (0..n_phi).map(|j| 1 + (n_r - 1) * n_phi + j).collect();

        let mut omega_mask = vec![false; n];
        omega_mask[0] = true;
        for i in 1..n_r {
            if radii[i - 1] < omega_radius {
                for j in 0..n_phi {
                    omega_mask[1 + (i - 1) * n_phi + j] = true;
                }
            }
        }

        let mut mass = w_bulk.clone();
        let mut w_pot = w_bulk.clone();
        for (j, &k) in trace_map.iter().enumerate() {
            mass[k] += w_surf[j];
            w_pot[k - n_phi] += w_bulk[k];
            w_pot[k] = 0.0;
        }

        let origin_stencil = OriginStencil {
            ring: (0..n_phi).map(|j| 1 + j).collect(),
            weights: vec![1.0 / n_phi as f64; n_phi],
        };

        Ok(Self {
            n_r,
            n_phi,
            h,
            dphi,
            omega_radius,
            radii,
            angles,
            w_bulk,
            w_surf,
            trace_map,
            omega_mask,
            origin_stencil,
            mass,
            w_pot,
        })
    }

    pub fn n_nodes(&self) -> usize {
        1 + self.n_r * self.n_phi
    }

    /// Index of ring node `(i, j)`; `i = 0` is the origin, `j` wraps.
    #[inline]
    pub fn node(&self, i: usize, j: isize) -> usize {
        if i == 0 {
            return 0;
        }
        let n = self.n_phi as isize;
        1 + (i - 1) * self.n_phi + j.rem_euclid(n) as usize
    }

    /// `(ring, angle index)` of a node; the origin is `(0, 0)`.
    #[inline]
    pub fn ring_of(&self, k: usize) -> (usize, usize) {
        if k == 0 {
            (0, 0)
        } else {
            (1 + (k - 1) / self.n_phi, (k - 1) % self.n_phi)
        }
    }

    pub fn rho(&self, k: usize) -> f64 {
        let (i, _) = self.ring_of(k);
        i as f64 / self.n_r as f64
    }

    pub fn phi(&self, k: usize) -> f64 {
        let (_, j) = self.ring_of(k);
        self.angles[j]
    }

    pub fn xy(&self, k: usize) -> (f64, f64) {
        let (r, p) = (self.rho(k), self.phi(k));
        (r * p.cos(), r * p.sin())
    }

    pub fn is_trace(&self, k: usize) -> bool {
        k > (self.n_r - 1) * self.n_phi
    }

    /// Field with one value per bulk node, sampled from `f(ρ, φ)`.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        (0..self.n_nodes()).map(|k| f(self.rho(k), self.phi(k))).collect()
    }

    pub fn trace(&self, bulk: &[f64]) -> Vec<f64> {
        self.trace_map.iter().map(|&k| bulk[k]).collect()
    }

    pub fn embed_surface(&self, bulk: &mut [f64], surf: &[f64]) {
        for (&k, &v) in self.trace_map.iter().zip(surf) {
            bulk[k] = v;
        }
    }

    pub fn omega_nodes(&self) -> Vec<usize> {
        (0..self.n_nodes()).filter(|&k| self.omega_mask[k]).collect()
    }

    /// Lumped ℒ² inner product of two stacked states.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> f64 {
        self.mass.iter().zip(u).zip(v).map(|((m, a), b)| m * a * b).sum()
    }

    pub fn l2(&self, u: &[f64]) -> f64 {
        self.inner(u, u).sqrt()
    }
}

/// Paired bulk and surface field. Surface values equal the bulk trace.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub bulk: Vec<f64>,
    pub surf: Vec<f64>,
}

impl State {
    pub fn new(grid: &PolarGrid, bulk: Vec<f64>, surf: Vec<f64>) -> Result<Self> {
        if bulk.len() != grid.n_nodes() || surf.len() != grid.n_phi {
            return Err(Error::Dimension(format!(
                "state of sizes ({}, {}) on grid with ({}, {})",
                bulk.len(),
                surf.len(),
                grid.n_nodes(),
                grid.n_phi
            )));
        }
        for (j, &k) in grid.trace_map.iter().enumerate() {
            if bulk[k] != surf[j] {
                return Err(Error::TraceIncompatible {
                    node: k,
                    bulk: bulk[k],
                    surf: surf[j],
                });
            }
        }
        Ok(Self { bulk, surf })
    }

    pub fn from_bulk(grid: &PolarGrid, bulk: Vec<f64>) -> Self {
        let surf = grid.trace(&bulk);
        Self { bulk, surf }
    }

    pub fn constant(grid: &PolarGrid, c: f64) -> Self {
        Self::from_bulk(grid, vec![c; grid.n_nodes()])
    }

    /// Builds a state from a bulk function `f(ρ, φ)` and a surface function
    /// `g(φ)`, overwriting the trace with `g`.
    pub fn from_fns(grid: &PolarGrid, f: impl Fn(f64, f64) -> f64, g: impl Fn(f64) -> f64) -> Self {
        let mut bulk = grid.sample(f);
        let surf: Vec<f64> = grid.angles.iter().map(|&p| g(p)).collect();
        grid.embed_surface(&mut bulk, &surf);
        Self { bulk, surf }
    }

    pub fn stacked(&self) -> &[f64] {
        &self.bulk
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    L2,
    Linf,
    H1,
    H2,
}

/// Discrete first and second derivatives on the stacked vector.
///
/// Ring nodes use the polar frame: `d1a = u_ρ`, `d1b = u_φ/ρ`, and the
/// Hessian components `h11 = u_ρρ`, `h12 = u_ρφ/ρ − u_φ/ρ²`,
/// `h22 = u_φφ/ρ² + u_ρ/ρ`. The origin row uses Cartesian components built
/// from the first ring. Surface operators act on trace nodes.
#[derive(Debug, Clone)]
pub struct DerivativeOps {
    pub d1a: CsMat<f64>,
    pub d1b: CsMat<f64>,
    pub h11: CsMat<f64>,
    pub h12: CsMat<f64>,
    pub h22: CsMat<f64>,
    pub s1: CsMat<f64>,
    pub s2: CsMat<f64>,
}

impl DerivativeOps {
    pub fn new(g: &PolarGrid) -> Self {
        let n = g.n_nodes();
        let (nr, np) = (g.n_r, g.n_phi);
        let (h, dp) = (g.h, g.dphi);
        let mut d1a = Triplets::new(n, n);
        let mut d1b = Triplets::new(n, n);
        let mut h11 = Triplets::new(n, n);
        let mut h12 = Triplets::new(n, n);
        let mut h22 = Triplets::new(n, n);

        // origin
        let c = 2.0 / (np as f64 * h);
        let c2 = 4.0 / (np as f64 * h * h);
        for j in 0..np {
            let k = g.node(1, j as isize);
            let phi = g.angles[j];
            let (cs, sn) = (phi.cos(), phi.sin());
            let (c2p, s2p) = ((2.0 * phi).cos(), (2.0 * phi).sin());
            d1a.push(0, k, c * cs);
            d1a.push(0, 0, -c * cs);
            d1b.push(0, k, c * sn);
            d1b.push(0, 0, -c * sn);
            // trace T = 4·mean(u_j − u_0)/h², difference Hxx − Hyy = 2·c2·Σ u_j cos 2φ_j
            let t = c2;
            let d = 2.0 * c2 * c2p;
            h11.push(0, k, 0.5 * (t + d));
            h11.push(0, 0, -0.5 * (t + d));
            h22.push(0, k, 0.5 * (t - d));
            h22.push(0, 0, -0.5 * (t - d));
            h12.push(0, k, c2 * s2p);
            h12.push(0, 0, -c2 * s2p);
        }

        // radial first-derivative stencil at ring i: (ring offset, coefficient)
        let dr = |i: usize| -> Vec<(usize, f64)> {
            if i < nr {
                vec![(i + 1, 0.5 / h), (i - 1, -0.5 / h)]
            } else {
                vec![(i, 1.5 / h), (i - 1, -2.0 / h), (i - 2, 0.5 / h)]
            }
        };
        let drr = |i: usize| -> Vec<(usize, f64)> {
            let h2 = h * h;
            if i < nr {
                vec![(i + 1, 1.0 / h2), (i, -2.0 / h2), (i - 1, 1.0 / h2)]
            } else {
                vec![(i, 2.0 / h2), (i - 1, -5.0 / h2), (i - 2, 4.0 / h2), (i - 3, -1.0 / h2)]
            }
        };

        for i in 1..=nr {
            let rho = i as f64 * h;
            for j in 0..np as isize {
                let k = g.node(i, j);
                for &(ii, cf) in &dr(i) {
                    d1a.push(k, g.node(ii, j), cf);
                    h22.push(k, g.node(ii, j), cf / rho);
                    // u_ρφ/ρ: radial difference of the centered angular difference
                    if ii > 0 {
                        let a = cf / (2.0 * dp * rho);
                        h12.push(k, g.node(ii, j + 1), a);
                        h12.push(k, g.node(ii, j - 1), -a);
                    }
                }
                for &(ii, cf) in &drr(i) {
                    h11.push(k, g.node(ii, j), cf);
                }
                let a = 1.0 / (2.0 * dp * rho);
                d1b.push(k, g.node(i, j + 1), a);
                d1b.push(k, g.node(i, j - 1), -a);
                let b = 1.0 / (2.0 * dp * rho * rho);
                h12.push(k, g.node(i, j + 1), -b);
                h12.push(k, g.node(i, j - 1), b);
                let e = 1.0 / (dp * dp * rho * rho);
                h22.push(k, g.node(i, j + 1), e);
                h22.push(k, g.node(i, j), -2.0 * e);
                h22.push(k, g.node(i, j - 1), e);
            }
        }

        let mut s1 = Triplets::new(np, n);
        let mut s2 = Triplets::new(np, n);
        for j in 0..np as isize {
            let row = j as usize;
            s1.push(row, g.node(nr, j + 1), 0.5 / dp);
            s1.push(row, g.node(nr, j - 1), -0.5 / dp);
            let e = 1.0 / (dp * dp);
            s2.push(row, g.node(nr, j + 1), e);
            s2.push(row, g.node(nr, j), -2.0 * e);
            s2.push(row, g.node(nr, j - 1), e);
        }

        Self {
            d1a: d1a.into_csr(),
            d1b: d1b.into_csr(),
            h11: h11.into_csr(),
            h12: h12.into_csr(),
            h22: h22.into_csr(),
            s1: s1.into_csr(),
            s2: s2.into_csr(),
        }
    }
}

/// A squared discrete Sobolev norm written as `Σ_k Σ_i w_k[i]·(O_k u)[i]²`.
#[derive(Debug, Clone)]
pub struct SobolevNorm {
    pub terms: Vec<(CsMat<f64>, Vec<f64>)>,
}

impl SobolevNorm {
    pub fn new(g: &PolarGrid, kind: NormKind) -> Self {
        let n = g.n_nodes();
        let mut id = Triplets::new(n, n);
        for k in 0..n {
            id.push(k, k, 1.0);
        }
        let mut terms = vec![(id.into_csr(), g.mass.clone())];
        if matches!(kind, NormKind::H1 | NormKind::H2) {
            let ops = DerivativeOps::new(g);
            terms.push((ops.d1a.clone(), g.w_bulk.clone()));
            terms.push((ops.d1b.clone(), g.w_bulk.clone()));
            terms.push((ops.s1.clone(), g.w_surf.clone()));
            if kind == NormKind::H2 {
                terms.push((ops.h11.clone(), g.w_bulk.clone()));
                terms.push((ops.h12, g.w_bulk.iter().map(|w| 2.0 * w).collect()));
                terms.push((ops.h22, g.w_bulk.clone()));
                terms.push((ops.s2, g.w_surf.clone()));
            }
        }
        Self { terms }
    }

    pub fn squared(&self, u: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(op, w)| {
                let du = matvec(op, u);
                du.iter().zip(w).map(|(d, w)| w * d * d).sum::<f64>()
            })
            .sum()
    }

    pub fn value(&self, u: &[f64]) -> f64 {
        self.squared(u).sqrt()
    }

    /// Gradient of `½·squared(u)`.
    pub fn half_sq_gradient(&self, u: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; u.len()];
        for (op, w) in &self.terms {
            let du: Vec<f64> = matvec(op, u).iter().zip(w).map(|(d, w)| d * w).collect();
            for (gi, v) in g.iter_mut().zip(matvec_t(op, &du)) {
                *gi += v;
            }
        }
        g
    }
}

pub fn discrete_norm(g: &PolarGrid, u: &State, kind: NormKind) -> f64 {
    match kind {
        NormKind::Linf => u
            .bulk
            .iter()
            .chain(&u.surf)
            .fold(0.0_f64, |m, v| m.max(v.abs())),
        _ => SobolevNorm::new(g, kind).value(&u.bulk),
    }
}

/// Max over nodes of |value| and all first and second difference quotients,
/// bulk and surface.
pub fn w2inf_norm(g: &PolarGrid, ops: &DerivativeOps, u: &[f64]) -> f64 {
    let mut m = u.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    for op in [&ops.d1a, &ops.d1b, &ops.h11, &ops.h12, &ops.h22, &ops.s1, &ops.s2] {
        m = matvec(op, u).iter().fold(m, |m, v| m.max(v.abs()));
    }
    debug_assert_eq!(u.len(), g.n_nodes());
    m
}

/// Centered periodic tangential derivative on Γ (arc length = angle).
pub fn surface_gradient(g: &PolarGrid, z: &[f64]) -> Vec<f64> {
    let n = z.len();
    (0..n)
        .map(|j| (z[(j + 1) % n] - z[(j + n - 1) % n]) / (2.0 * g.dphi))
        .collect()
}

/// Residual of the discrete divergence formula on Γ:
/// `|Σ w (div_Γ X) z + Σ w X·∇_Γ z|`.
pub fn surface_calculus(g: &PolarGrid, x: &[f64], z: &[f64]) -> f64 {
    let div = surface_gradient(g, x);
    let grad = surface_gradient(g, z);
    let a: f64 = g.w_surf.iter().zip(&div).zip(z).map(|((w, d), z)| w * d * z).sum();
    let b: f64 = g.w_surf.iter().zip(x).zip(&grad).map(|((w, x), d)| w * x * d).sum();
    (a + b).abs()
}
