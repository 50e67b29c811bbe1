//! Seeded random smooth fields, admissible potentials and initial data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::grid::{w2inf_norm, DerivativeOps, PolarGrid, State};
use crate::model::{AdmissibleBounds, PotentialPair};

pub type Rng64 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut Rng64) -> f64 {
    rng.sample(StandardNormal)
}

pub fn gaussian_vec(rng: &mut Rng64, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

/// Random polynomial field `Σ ρ^{m+2l}(a cos mφ + b sin mφ)`, smooth at the origin.
pub fn smooth_bulk(g: &PolarGrid, rng: &mut Rng64, max_mode: usize) -> Vec<f64> {
    let mut coef = Vec::new();
    for m in 0..=max_mode {
        for l in 0..2 {
            let decay = 1.0 / (1.0 + (m + l) as f64);
            coef.push((m, m + 2 * l, decay * normal(rng), decay * normal(rng)));
        }
    }
    g.sample(|r, p| {
        coef.iter()
            .map(|&(m, e, a, b)| {
                let mp = m as f64 * p;
                r.powi(e as i32) * (a * mp.cos() + b * mp.sin())
            })
            .sum()
    })
}

/// Random trigonometric polynomial on Γ.
pub fn smooth_surface(g: &PolarGrid, rng: &mut Rng64, max_mode: usize) -> Vec<f64> {
    let coef: Vec<(f64, f64)> = (0..=max_mode)
        .map(|m| {
            let d = 1.0 / (1.0 + m as f64);
            (d * normal(rng), d * normal(rng))
        })
        .collect();
    g.angles
        .iter()
        .map(|&p| {
            coef.iter()
                .enumerate()
                .map(|(m, &(a, b))| a * (m as f64 * p).cos() + b * (m as f64 * p).sin())
                .sum()
        })
        .collect()
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn scale_to(v: &mut [f64], target: f64) {
    let m = max_abs(v);
    if m > 0.0 {
        v.iter_mut().for_each(|x| *x *= target / m);
    }
}

/// Smooth `(p, q)` with `‖·‖_∞` drawn uniformly in `[0.2R, 0.9R]`.
pub fn random_potentials(g: &PolarGrid, rng: &mut Rng64, big_r: f64) -> PotentialPair {
    let mut p = smooth_bulk(g, rng, 3);
    let mut q = smooth_surface(g, rng, 3);
    let tp = big_r * rng.gen_range(0.2..0.9);
    let tq = big_r * rng.gen_range(0.2..0.9);
    scale_to(&mut p, tp);
    scale_to(&mut q, tq);
    PotentialPair { p, q }
}

/// Smooth initial datum in `ℐ`: a level between `r` and `R` plus a
/// perturbation whose discrete `W^{2,∞}` norm keeps the state admissible.
pub fn random_initial(
    g: &PolarGrid,
    ops: &DerivativeOps,
    rng: &mut Rng64,
    bounds: &AdmissibleBounds,
) -> State {
    let (r, big_r) = (bounds.r, bounds.big_r);
    let level = r + (big_r - r) * rng.gen_range(0.3..0.5);
    let mut delta = smooth_bulk(g, rng, 3);
    let d = w2inf_norm(g, ops, &delta);
    let room = 0.9 * (level - r).min(big_r - level);
    if d > 0.0 {
        delta.iter_mut().for_each(|x| *x *= room / d);
    }
    State::from_bulk(g, delta.iter().map(|x| level + x).collect())
}

/// Space–time test field `z(t) = Σ_i T_i(t)·f_i` with smooth `f_i` and
/// `T ∈ {1, t − c, (t − c)², cos 2πt}`.
pub fn smooth_space_time(g: &PolarGrid, rng: &mut Rng64, times: &[f64], center: f64) -> Vec<Vec<f64>> {
    let fields: Vec<Vec<f64>> = (0..4).map(|_| smooth_bulk(g, rng, 4)).collect();
    times
        .iter()
        .map(|&t| {
            let s = t - center;
            let tf = [1.0, s, s * s, (2.0 * std::f64::consts::PI * t).cos()];
            (0..g.n_nodes())
                .map(|k| tf.iter().zip(&fields).map(|(a, f)| a * f[k]).sum())
                .collect()
        })
        .collect()
}
