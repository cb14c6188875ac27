//! Discretization primitives: the `(t, x, y)` lattice, the truncated
//! exponential quadrature for the jump integral, and the precomputed
//! interpolation table for post-jump positions.
//!
//! The inventory and volume axes share one mesh width (`dx = dy`) so that
//! purchases move states along exact diagonals of the lattice. Time steps obey
//! `dt <= cfl_c * min(dx^2, dy^2)`, which keeps the explicitly-treated terms
//! stable.

use crate::error::{Error, Result};
use crate::model::Coefficients;
use serde::{Deserialize, Serialize};

/// Snap tolerance for aligning jump targets to mesh nodes.
const ALIGN_EPS: f64 = 1e-9;

/// Relative slack when comparing mesh widths and the CFL bound.
const GEOM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverGrid {
    pub n_x: usize,
    pub n_y: usize,
    pub n_t: usize,
    pub x_bar: f64,
    pub y_bar: f64,
    pub t_horizon: f64,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
}

impl SolverGrid {
    pub fn x_at(&self, k: usize) -> f64 {
        k as f64 * self.dx
    }
    pub fn y_at(&self, l: usize) -> f64 {
        l as f64 * self.dy
    }
    /// Time of level `n`; level `n_t` is the horizon.
    pub fn t_at(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }
    pub fn nodes_per_slice(&self) -> usize {
        (self.n_x + 1) * (self.n_y + 1)
    }
}

/// Builds and validates the lattice. Rejects `dx != dy` and time steps in
/// violation of the parabolic CFL bound.
#[allow(clippy::too_many_arguments)]
pub fn build_grid(
    n_x: usize,
    n_y: usize,
    n_t: usize,
    x_bar: f64,
    y_bar: f64,
    t_horizon: f64,
    cfl_c: f64,
) -> Result<SolverGrid> {
    for (name, v) in [("n_x", n_x), ("n_y", n_y), ("n_t", n_t)] {
        if v == 0 {
            return Err(Error::Config(format!("grid.{name} must be at least 1")));
        }
    }
    for (name, v) in [
        ("x_bar", x_bar),
        ("y_bar", y_bar),
        ("t_horizon", t_horizon),
        ("cfl_c", cfl_c),
    ] {
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::Config(format!("grid.{name} must be positive, got {v}")));
        }
    }
    let dx = x_bar / n_x as f64;
    let dy = y_bar / n_y as f64;
    if (dx - dy).abs() > GEOM_EPS * dx.max(dy) {
        return Err(Error::Config(format!(
            "grid must have dx = dy so purchases stay on lattice diagonals; got dx = {dx}, dy = {dy} \
             (choose n_x, n_y with x_bar / n_x = y_bar / n_y)"
        )));
    }
    let dt = t_horizon / n_t as f64;
    let bound = cfl_c * (dx * dx).min(dy * dy);
    if dt > bound * (1.0 + GEOM_EPS) {
        return Err(Error::Config(format!(
            "grid.n_t = {n_t} gives dt = {dt}, above the stability bound {bound} \
             (need dt <= cfl_c * min(dx^2, dy^2); raise n_t to at least {})",
            (t_horizon / bound).ceil() as usize
        )));
    }
    Ok(SolverGrid { n_x, n_y, n_t, x_bar, y_bar, t_horizon, dx, dy, dt })
}

/// Quadrature for `∫_0^∞ f(z) eta e^{-eta z} dz`, truncated where the tail
/// mass drops to `tail_eps`. Nodes are equally spaced on `[0, z_max]`; each
/// weight is the exact integral of the node's piecewise-linear hat function
/// against the exponential density, renormalized to sum to one, so affine
/// integrands are reproduced exactly.
#[derive(Debug, Clone)]
pub struct QuadratureTable {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub eta: f64,
    pub z_max: f64,
}

pub fn build_quadrature(eta: f64, n_z: usize, tail_eps: f64) -> Result<QuadratureTable> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Config(format!("dynamics.eta must be positive, got {eta}")));
    }
    if n_z < 2 {
        return Err(Error::Config(format!("grid.n_z must be at least 2, got {n_z}")));
    }
    if !(tail_eps > 0.0 && tail_eps < 1.0) {
        return Err(Error::Config(format!("grid.tail_eps must lie in (0, 1), got {tail_eps}")));
    }
    let z_max = -tail_eps.ln() / eta;
    let h = z_max / (n_z - 1) as f64;
    let nodes: Vec<f64> = (0..n_z).map(|p| p as f64 * h).collect();
    // Exact moments of the density over a cell:
    //   i0(a, b) = ∫_a^b eta e^{-eta z} dz,  i1(a, b) = ∫_a^b z eta e^{-eta z} dz.
    let i0 = |a: f64, b: f64| (-eta * a).exp() - (-eta * b).exp();
    let i1 = |a: f64, b: f64| (a + 1.0 / eta) * (-eta * a).exp() - (b + 1.0 / eta) * (-eta * b).exp();
    let mut weights = vec![0.0; n_z];
    for p in 0..n_z {
        if p > 0 {
            let (a, b) = (nodes[p - 1], nodes[p]);
            weights[p] += (i1(a, b) - a * i0(a, b)) / h;
        }
        if p + 1 < n_z {
            let (a, b) = (nodes[p], nodes[p + 1]);
            weights[p] += (b * i0(a, b) - i1(a, b)) / h;
        }
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Config("quadrature weights degenerate; raise n_z or tail_eps".into()));
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(QuadratureTable { nodes, weights, eta, z_max })
}

/// Precomputed linear-interpolation coefficients for post-jump volume levels.
///
/// For row `l` and quadrature node `p`, the post-jump position
/// `y_l + q(y_l, z_p)` falls between mesh rows `lower` and `lower + 1` with
/// fraction `frac`; positions beyond `y_bar` keep `lower = n_y - 1` with
/// `frac >= 1`, marking the pair as an overshoot. [`interpolate`] continues
/// such pairs linearly along the top edge; the solver instead substitutes a
/// completion-anchored estimate there, since on a convex book the linear
/// continuation undervalues the post-jump state. (Clamping overshoots to the
/// top node is worse still: it flattens the surface in a layer one jump-scale
/// wide and spawns a spurious buy pocket there.)
///
/// [`interpolate`]: JumpShiftTable::interpolate
#[derive(Debug, Clone)]
pub struct JumpShiftTable {
    pub n_z: usize,
    pub n_y: usize,
    lower: Vec<u32>,
    frac: Vec<f64>,
}

impl JumpShiftTable {
    #[inline]
    pub fn entry(&self, l: usize, p: usize) -> (usize, f64) {
        let i = l * self.n_z + p;
        (self.lower[i] as usize, self.frac[i])
    }

    /// Interpolates `values` (one per mesh row) at the post-jump position.
    #[inline]
    pub fn interpolate(&self, values: &[f64], l: usize, p: usize) -> f64 {
        let (j, a) = self.entry(l, p);
        (1.0 - a) * values[j] + a * values[j + 1]
    }
}

pub fn build_jump_shift_table(
    grid: &SolverGrid,
    quad: &QuadratureTable,
    coeffs: &dyn Coefficients,
) -> Result<JumpShiftTable> {
    let n_z = quad.nodes.len();
    let rows = grid.n_y + 1;
    let mut lower = Vec::with_capacity(rows * n_z);
    let mut frac = Vec::with_capacity(rows * n_z);
    for l in 0..rows {
        let y = grid.y_at(l);
        for &z in &quad.nodes {
            let q = coeffs.jump_size(y, z);
            if !q.is_finite() || q < 0.0 {
                return Err(Error::Domain(format!(
                    "jump size q({y}, {z}) = {q} must be finite and non-negative"
                )));
            }
            let pos = (y + q) / grid.dy;
            let (j, a) = if pos >= grid.n_y as f64 {
                (grid.n_y - 1, pos - (grid.n_y - 1) as f64)
            } else {
                let j = pos.floor() as usize;
                let mut a = pos - j as f64;
                let mut j = j;
                if a < ALIGN_EPS {
                    a = 0.0;
                } else if a > 1.0 - ALIGN_EPS {
                    j += 1;
                    a = 0.0;
                }
                if j >= grid.n_y {
                    (grid.n_y - 1, 1.0)
                } else {
                    (j, a)
                }
            };
            lower.push(j as u32);
            frac.push(a);
        }
    }
    Ok(JumpShiftTable { n_z, n_y: grid.n_y, lower, frac })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CoefficientSpec;

    #[test]
    fn grid_accepts_matched_meshes_and_cfl() {
        let g = build_grid(80, 80, 1600, 4.0, 4.0, 4.0, 1.0).unwrap();
        assert!((g.dx - 0.05).abs() < 1e-15);
        assert!((g.dt - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn grid_rejects_mismatched_meshes() {
        let err = build_grid(80, 80, 1600, 4.0, 5.0, 4.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("dx = dy"), "{err}");
        assert!(build_grid(80, 100, 1600, 4.0, 5.0, 4.0, 1.0).is_ok());
    }

    #[test]
    fn grid_rejects_cfl_violations() {
        // dy = 0.05 with C = 1 demands dt <= 0.0025, i.e. n_t >= 1600 at T = 4.
        assert!(build_grid(80, 80, 100, 4.0, 4.0, 4.0, 1.0).is_err());
        assert!(build_grid(80, 80, 1599, 4.0, 4.0, 4.0, 1.0).is_err());
        assert!(build_grid(80, 80, 1600, 4.0, 4.0, 4.0, 1.0).is_ok());
    }

    #[test]
    fn quadrature_truncation_point() {
        let q = build_quadrature(1.0, 64, 1e-8).unwrap();
        assert!((q.z_max - 18.420680743952367).abs() < 1e-12);
        let total: f64 = q.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quadrature_first_moment() {
        let q = build_quadrature(1.0, 200, 1e-8).unwrap();
        let m1: f64 = q.nodes.iter().zip(&q.weights).map(|(z, w)| z * w).sum();
        assert!((m1 - 1.0).abs() < 1e-3, "first moment {m1}");
    }

    #[test]
    fn quadrature_laplace_transform() {
        let q = build_quadrature(1.0, 200, 1e-8).unwrap();
        for s in [0.5, 1.0, 2.0] {
            let est: f64 = q.nodes.iter().zip(&q.weights).map(|(z, w)| w * (-s * z).exp()).sum();
            let exact = 1.0 / (1.0 + s);
            assert!(
                (est - exact).abs() <= 0.02 * exact,
                "Laplace transform at s = {s}: {est} vs {exact}"
            );
        }
    }

    #[test]
    fn shift_table_is_identity_without_jumps() {
        let g = build_grid(8, 10, 40, 4.0, 5.0, 4.0, 1.0).unwrap();
        let quad = build_quadrature(1.0, 16, 1e-8).unwrap();
        let coeffs = CoefficientSpec { c: 0.5, d: 0.1, e: 0.0, eta: 1.0 };
        let table = build_jump_shift_table(&g, &quad, &coeffs).unwrap();
        for l in 0..=g.n_y {
            for p in 0..quad.nodes.len() {
                let (j, a) = table.entry(l, p);
                let value = if a == 1.0 { j + 1 } else { j };
                assert_eq!(value, l, "row {l} node {p} moved");
                assert!(a == 0.0 || a == 1.0);
            }
        }
    }

    #[test]
    fn shift_table_snaps_exact_node_hits() {
        // One mesh step per unit mark: y = 1, e z y = dy exactly.
        let g = build_grid(8, 10, 40, 4.0, 5.0, 4.0, 1.0).unwrap();
        let quad = QuadratureTable {
            nodes: vec![0.0, 1.0],
            weights: vec![0.5, 0.5],
            eta: 1.0,
            z_max: 1.0,
        };
        let coeffs = CoefficientSpec { c: 0.0, d: 0.0, e: 0.5, eta: 1.0 };
        let table = build_jump_shift_table(&g, &quad, &coeffs).unwrap();
        // Row l = 2 (y = 1.0): jump size 0.5 * 1.0 * 1.0 = 0.5 = dy.
        let (j, a) = table.entry(2, 1);
        assert_eq!((j, a), (3, 0.0));
    }

    #[test]
    fn shift_table_reproduces_affine_functions() {
        let g = build_grid(8, 10, 40, 4.0, 5.0, 4.0, 1.0).unwrap();
        let quad = build_quadrature(1.0, 32, 1e-6).unwrap();
        let coeffs = CoefficientSpec { c: 0.5, d: 0.1, e: 0.01, eta: 1.0 };
        let table = build_jump_shift_table(&g, &quad, &coeffs).unwrap();
        let values: Vec<f64> = (0..=g.n_y).map(|l| 2.0 * g.y_at(l) - 0.7).collect();
        for l in 0..=g.n_y {
            let y = g.y_at(l);
            for (p, &z) in quad.nodes.iter().enumerate() {
                // Affine data is reproduced exactly, overshoot included: the
                // top-edge extrapolation is itself affine.
                let target = y + coeffs.e * y * z;
                let got = table.interpolate(&values, l, p);
                let expect = 2.0 * target - 0.7;
                assert!(
                    (got - expect).abs() < 1e-10,
                    "row {l} node {p}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn shift_table_extrapolates_overshoot_along_top_edge() {
        let g = build_grid(8, 10, 40, 4.0, 5.0, 4.0, 1.0).unwrap();
        let quad = QuadratureTable {
            nodes: vec![0.0, 2.0],
            weights: vec![0.5, 0.5],
            eta: 1.0,
            z_max: 2.0,
        };
        let coeffs = CoefficientSpec { c: 0.0, d: 0.0, e: 1.0, eta: 1.0 };
        let table = build_jump_shift_table(&g, &quad, &coeffs).unwrap();
        // y = 4, jump 8: lands at 12 = mesh position 24, fraction 15 past row 9.
        let (j, a) = table.entry(8, 1);
        assert_eq!(j, g.n_y - 1);
        assert!((a - 15.0).abs() < 1e-12, "frac = {a}");
        let values: Vec<f64> = (0..=g.n_y).map(|l| 0.5 * l as f64 + 1.0).collect();
        let got = table.interpolate(&values, 8, 1);
        assert!((got - (0.5 * 24.0 + 1.0)).abs() < 1e-12, "got {got}");
    }

    proptest::proptest! {
        #[test]
        fn quadrature_weights_always_normalized(
            eta in 0.2f64..4.0,
            n_z in 2usize..300,
            tail_exp in 2.0f64..12.0,
        ) {
            let q = build_quadrature(eta, n_z, 10f64.powf(-tail_exp)).unwrap();
            let total: f64 = q.weights.iter().sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
            proptest::prop_assert!(q.weights.iter().all(|&w| w >= 0.0));
        }
    }
}
