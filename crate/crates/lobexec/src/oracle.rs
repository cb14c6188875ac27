//! Independent small-grid cross-check of the PDE solver.
//!
//! The controlled problem is re-solved as backward induction on a Markov
//! chain: the volume effect moves on a drift-shifted trinomial tree matched
//! to the first two moments, jumps form an exclusive branch with probability
//! `lambda dt` spread over the mark quadrature, and the regime chain mixes
//! through `P = I + dt Q`. Purchases are enumerated directly — the minimum
//! over every grid-aligned block — so none of the production solver's
//! operator splitting, banded algebra, or obstacle sweep is involved. Values
//! from the two paths must agree on grids coarse enough for the chain to be
//! valid.

use crate::error::{Error, Result};
use crate::grid::{build_quadrature, QuadratureTable};
use crate::model::{Coefficients, GeneratorSchedule, ModelSpec};
use serde::Serialize;

/// Hard caps keeping the chain solver in its accurate-and-cheap regime.
pub const ORACLE_MAX_SPACE: usize = 12;
pub const ORACLE_MAX_TIME: usize = 60;

const GEOM_EPS: f64 = 1e-9;

/// Geometry and quadrature resolution for the chain solver.
#[derive(Debug, Clone, Serialize)]
pub struct OracleConfig {
    pub n_x: usize,
    pub n_y: usize,
    pub n_t: usize,
    pub x_bar: f64,
    pub y_bar: f64,
    pub t_horizon: f64,
    pub n_z: usize,
    pub tail_eps: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            n_x: 8,
            n_y: 10,
            n_t: 40,
            x_bar: 4.0,
            y_bar: 5.0,
            t_horizon: 4.0,
            n_z: 64,
            tail_eps: 1e-8,
        }
    }
}

impl OracleConfig {
    pub fn dx(&self) -> f64 {
        self.x_bar / self.n_x as f64
    }
    pub fn dy(&self) -> f64 {
        self.y_bar / self.n_y as f64
    }
    pub fn dt(&self) -> f64 {
        self.t_horizon / self.n_t as f64
    }

    /// Checks the caps, the diagonal lattice constraint, and that every
    /// branch of the chain carries a probability in `[0, 1]`.
    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        for (name, v, cap) in [
            ("n_x", self.n_x, ORACLE_MAX_SPACE),
            ("n_y", self.n_y, ORACLE_MAX_SPACE),
            ("n_t", self.n_t, ORACLE_MAX_TIME),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("oracle.{name} must be at least 1")));
            }
            if v > cap {
                return Err(Error::Config(format!(
                    "oracle.{name} = {v} exceeds the cap {cap}; the chain approximation \
                     is only used as a coarse cross-check"
                )));
            }
        }
        for (name, v) in [
            ("x_bar", self.x_bar),
            ("y_bar", self.y_bar),
            ("t_horizon", self.t_horizon),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("oracle.{name} must be positive, got {v}")));
            }
        }
        let (dx, dy, dt) = (self.dx(), self.dy(), self.dt());
        if (dx - dy).abs() > GEOM_EPS * dx.max(dy) {
            return Err(Error::Config(format!(
                "oracle grid must have dx = dy so purchases stay on lattice diagonals; \
                 got dx = {dx}, dy = {dy}"
            )));
        }
        // Diffusion branch mass: p_up + p_down = sigma^2 dt / dy^2.
        let mut sigma_max: f64 = 0.0;
        for l in 0..=self.n_y {
            sigma_max = sigma_max.max(model.dynamics.volatility(l as f64 * dy).abs());
        }
        let diff_mass = sigma_max * sigma_max * dt / (dy * dy);
        if diff_mass > 1.0 + GEOM_EPS {
            return Err(Error::Config(format!(
                "probability overflow: diffusion branches carry sigma^2 dt / dy^2 = \
                 {diff_mass:.4} > 1; refine the time grid or coarsen the volume grid"
            )));
        }
        let jump_mass = model.regimes.intensity.upper_bound() * dt;
        if jump_mass > 1.0 + GEOM_EPS {
            return Err(Error::Config(format!(
                "probability overflow: jump branch carries lambda dt = {jump_mass:.4} > 1"
            )));
        }
        let exit = max_exit_rate(&model.regimes.generator) * dt;
        if exit > 1.0 + GEOM_EPS {
            return Err(Error::Config(format!(
                "probability overflow: regime mixing carries -Q_ii dt = {exit:.4} > 1"
            )));
        }
        Ok(())
    }
}

fn max_exit_rate(schedule: &GeneratorSchedule) -> f64 {
    let rate_of = |q: &Vec<Vec<f64>>| {
        q.iter()
            .enumerate()
            .map(|(i, row)| -row[i])
            .fold(0.0f64, f64::max)
    };
    match schedule {
        GeneratorSchedule::Constant(q) => rate_of(q),
        GeneratorSchedule::Piecewise(entries) => {
            entries.iter().map(|(_, q)| rate_of(q)).fold(0.0, f64::max)
        }
    }
}

/// Value table from the chain solver, indexed like the PDE surface:
/// level `n` holds values at time `n * dt`.
pub struct OracleSolution {
    pub config: OracleConfig,
    pub m: usize,
    values: Vec<f64>,
}

impl OracleSolution {
    #[inline]
    fn nodes(&self) -> usize {
        (self.config.n_x + 1) * (self.config.n_y + 1)
    }

    #[inline]
    pub fn value(&self, n: usize, i: usize, k: usize, l: usize) -> f64 {
        let rows = self.config.n_y + 1;
        self.values[(n * self.m + i) * self.nodes() + k * rows + l]
    }
}

/// Linear interpolation on the volume lattice; constant below the origin
/// (the state reflects at zero) and linear along the last cell above the top
/// node, matching how value growth continues past the grid.
fn interp_column(col: &[f64], pos: f64) -> f64 {
    if pos <= 0.0 {
        return col[0];
    }
    let top = col.len() - 1;
    let (j, a) = if pos >= top as f64 {
        (top - 1, pos - (top - 1) as f64)
    } else {
        (pos.floor() as usize, pos - pos.floor())
    };
    (1.0 - a) * col[j] + a * col[j + 1]
}

/// Expected next-level value starting one step of the chain at volume node
/// `l` of column `col` (already the correct regime and inventory).
fn chain_expectation(
    col: &[f64],
    l: usize,
    dy: f64,
    dt: f64,
    lambda: f64,
    dynamics: &dyn Coefficients,
    quad: &QuadratureTable,
) -> f64 {
    let y = l as f64 * dy;
    let sigma = dynamics.volatility(y);
    let center = (y - dynamics.resilience(y) * dt).max(0.0);
    let side = sigma * sigma * dt / (2.0 * dy * dy);
    let pos_c = center / dy;
    let mut diffusion = (1.0 - 2.0 * side) * interp_column(col, pos_c);
    if side > 0.0 {
        diffusion += side * interp_column(col, pos_c + 1.0);
        diffusion += side * interp_column(col, pos_c - 1.0);
    }
    let p_jump = lambda * dt;
    if p_jump <= 0.0 {
        return diffusion;
    }
    let mut jumped = 0.0;
    for (p, &w) in quad.weights.iter().enumerate() {
        let target = y + dynamics.jump_size(y, quad.nodes[p]);
        jumped += w * interp_column(col, target / dy);
    }
    (1.0 - p_jump) * diffusion + p_jump * jumped
}

/// Backward induction on the chain. Deliberately single-threaded and free of
/// shared machinery beyond the shape functions and mark quadrature.
pub fn solve_oracle(model: &ModelSpec, config: &OracleConfig) -> Result<OracleSolution> {
    model.validate()?;
    config.validate(model)?;
    let m = model.regimes.m;
    let (n_x, n_y, n_t) = (config.n_x, config.n_y, config.n_t);
    let rows = n_y + 1;
    let nodes = (n_x + 1) * rows;
    let (dy, dt) = (config.dy(), config.dt());
    let quad = build_quadrature(model.dynamics.eta, config.n_z, config.tail_eps)?;

    let mut values = vec![0.0; (n_t + 1) * m * nodes];
    // Terminal deadline: the remaining inventory is bought in one block.
    for i in 0..m {
        for k in 0..=n_x {
            let remaining = config.x_bar - k as f64 * config.dx();
            for l in 0..rows {
                let y = l as f64 * dy;
                values[(n_t * m + i) * nodes + k * rows + l] =
                    model.shapes[i].block_cost(y, remaining)?;
            }
        }
    }

    let mut marginal = vec![Vec::with_capacity(n_y); m];
    for i in 0..m {
        for l in 0..n_y {
            marginal[i].push(model.shapes[i].block_cost(l as f64 * dy, dy)?);
        }
    }

    for n in (0..n_t).rev() {
        let t_known = (n + 1) as f64 * dt;
        let q_matrix = model.regimes.generator.at(t_known);
        let lambda = model.regimes.intensity.at(t_known);
        let (head, tail) = values.split_at_mut((n + 1) * m * nodes);
        let level = &mut head[n * m * nodes..];
        let known = &tail[..m * nodes];

        // One chain step from every node, before mixing regimes.
        let mut stepped = vec![0.0; m * nodes];
        for i in 0..m {
            for k in 0..=n_x {
                let col = &known[i * nodes + k * rows..i * nodes + k * rows + rows];
                for l in 0..rows {
                    stepped[i * nodes + k * rows + l] =
                        chain_expectation(col, l, dy, dt, lambda, &model.dynamics, &quad);
                }
            }
        }

        for i in 0..m {
            for k in 0..=n_x {
                for l in 0..rows {
                    // Regime mixing: P = I + dt Q applied to the stepped values.
                    let mut expect = stepped[i * nodes + k * rows + l];
                    for j in 0..m {
                        if j != i {
                            expect += dt
                                * q_matrix[i][j]
                                * (stepped[j * nodes + k * rows + l]
                                    - stepped[i * nodes + k * rows + l]);
                        }
                    }
                    level[i * nodes + k * rows + l] = expect;
                }
            }
        }

        // Purchases: enumerate every diagonal block directly. Partial blocks
        // stay inside the grid; completing the inventory outright is always
        // available because the value after completion is zero at any
        // displacement, even past the top row.
        for i in 0..m {
            for k in 0..=n_x {
                let remaining = config.x_bar - k as f64 * config.dx();
                for l in 0..rows {
                    let y = l as f64 * dy;
                    let mut best = level[i * nodes + k * rows + l];
                    if k < n_x {
                        best = best.min(model.shapes[i].block_cost(y, remaining)?);
                    }
                    let mut cost = 0.0;
                    let j_max = (n_x - k).min(n_y - l);
                    for j in 1..=j_max {
                        cost += marginal[i][l + j - 1];
                        let cand = cost + level[i * nodes + (k + j) * rows + (l + j)];
                        if cand < best {
                            best = cand;
                        }
                    }
                    level[i * nodes + k * rows + l] = best;
                }
            }
        }
    }
    Ok(OracleSolution { config: config.clone(), m, values })
}

/// Absolute deviations between the chain solver and a PDE surface sharing
/// its geometry.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationReport {
    pub max_abs: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub n_nodes: usize,
}

pub fn compare(
    oracle: &OracleSolution,
    surface: &crate::solver::ValueSurface,
) -> Result<DeviationReport> {
    let grid = &surface.grid;
    let c = &oracle.config;
    let geometry_ok = grid.n_x == c.n_x
        && grid.n_y == c.n_y
        && grid.n_t == c.n_t
        && surface.m == oracle.m
        && (grid.x_bar - c.x_bar).abs() <= GEOM_EPS * c.x_bar
        && (grid.y_bar - c.y_bar).abs() <= GEOM_EPS * c.y_bar
        && (grid.t_horizon - c.t_horizon).abs() <= GEOM_EPS * c.t_horizon;
    if !geometry_ok {
        return Err(Error::Geometry(format!(
            "cannot compare: oracle grid {}x{}x{} (m = {}) vs surface {}x{}x{} (m = {})",
            c.n_x, c.n_y, c.n_t, oracle.m, grid.n_x, grid.n_y, grid.n_t, surface.m
        )));
    }
    let mut diffs = Vec::with_capacity((c.n_t + 1) * oracle.m * (c.n_x + 1) * (c.n_y + 1));
    for n in 0..=c.n_t {
        for i in 0..oracle.m {
            for k in 0..=c.n_x {
                for l in 0..=c.n_y {
                    diffs.push((oracle.value(n, i, k, l) - surface.value(n, i, k, l)).abs());
                }
            }
        }
    }
    diffs.sort_by(|a, b| a.partial_cmp(b).expect("finite deviations"));
    let n = diffs.len();
    let quantile = |q: f64| diffs[((n - 1) as f64 * q).round() as usize];
    Ok(DeviationReport {
        max_abs: diffs[n - 1],
        p50: quantile(0.50),
        p90: quantile(0.90),
        p99: quantile(0.99),
        n_nodes: n,
    })
}
