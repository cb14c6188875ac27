//! Monte Carlo execution of the solved policy.
//!
//! The policy reads the exercise boundary: inside the buy region it purchases
//! the smallest grid-aligned block that moves the state `(x, y)` diagonally
//! back into the waiting region, and at the deadline it buys whatever
//! remains. Costs are charged through the block formula
//! `Phi_i(y + a) - Phi_i(y)` at the pre-purchase displacement, so per-step
//! small blocks converge to the continuous-trading integral as the
//! simulation step shrinks.

use crate::boundary::FreeBoundarySurface;
use crate::error::{Error, Result};
use crate::grid::SolverGrid;
use crate::model::{sample_regime_path, Coefficients, ModelSpec, SimulationPath};
use crate::shapes::LobShape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use rayon::prelude::*;
use serde::Serialize;

/// Feedback execution rule built from a solved boundary.
pub struct ExecutionPolicy<'a> {
    pub boundary: &'a FreeBoundarySurface,
    pub grid: SolverGrid,
}

impl<'a> ExecutionPolicy<'a> {
    pub fn new(boundary: &'a FreeBoundarySurface, grid: SolverGrid) -> Result<Self> {
        if boundary.n_t != grid.n_t || boundary.n_x != grid.n_x {
            return Err(Error::Geometry(format!(
                "boundary geometry {}x{} does not match grid {}x{}",
                boundary.n_t, boundary.n_x, grid.n_t, grid.n_x
            )));
        }
        Ok(ExecutionPolicy { boundary, grid })
    }

    #[inline]
    fn snap(v: f64, step: f64, max_idx: usize) -> usize {
        ((v / step).round().max(0.0) as usize).min(max_idx)
    }

    /// Is the snapped node `(k, l)` inside the buy region at level `n`?
    fn buys(&self, n: usize, i: usize, k: usize, l: usize) -> bool {
        if k >= self.grid.n_x || l > self.grid.n_y {
            return false;
        }
        match self.boundary.at(n, i, k) {
            Some(ystar) => self.grid.y_at(l) <= ystar + 1e-12,
            None => false,
        }
    }

    /// Block size prescribed at `(t, regime, x, y)`: zero while waiting, the
    /// smallest diagonal escape while buying, the full remainder at the
    /// deadline; always in `[0, x_bar - x]`.
    pub fn action(&self, t: f64, i: usize, x: f64, y: f64) -> f64 {
        let remaining = (self.grid.x_bar - x).max(0.0);
        let n = Self::snap(t, self.grid.dt, self.grid.n_t);
        if n >= self.grid.n_t {
            return remaining;
        }
        let k = Self::snap(x, self.grid.dx, self.grid.n_x);
        let l = Self::snap(y, self.grid.dy, self.grid.n_y);
        if !self.buys(n, i, k, l) {
            return 0.0;
        }
        // The walk terminates: `buys` is false once k + j reaches the full
        // inventory column.
        let mut j = 1usize;
        while self.buys(n, i, k + j, l + j) {
            j += 1;
        }
        (j as f64 * self.grid.dx).min(remaining)
    }
}

/// Summary statistics of simulated policy costs.
#[derive(Debug, Clone, Serialize)]
pub struct CostStats {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Per-path totals (not serialized in reports).
    #[serde(skip)]
    pub costs: Vec<f64>,
}

impl CostStats {
    fn from_costs(costs: Vec<f64>, seed: u64) -> CostStats {
        let n = costs.len();
        let mean = costs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        CostStats { mean, stderr: (var / n as f64).sqrt(), n_paths: n, seed, costs }
    }
}

/// Runs `n_paths` of the controlled dynamics under `policy`, charging block
/// costs at the pre-purchase displacement, and returns cost statistics.
/// Paths use deterministic per-path seeds derived from `seed`, so results do
/// not depend on thread scheduling.
#[allow(clippy::too_many_arguments)]
pub fn simulate_execution(
    policy: &ExecutionPolicy,
    model: &ModelSpec,
    t0: f64,
    i0: usize,
    x0: f64,
    y0: f64,
    n_paths: usize,
    dt_sim: f64,
    seed: u64,
) -> Result<CostStats> {
    model.validate()?;
    if n_paths == 0 {
        return Err(Error::Config("simulate.n_paths must be at least 1".into()));
    }
    if !(dt_sim > 0.0) {
        return Err(Error::Config(format!("simulate.dt_sim must be positive, got {dt_sim}")));
    }
    if i0 >= model.regimes.m {
        return Err(Error::Config(format!(
            "initial regime {} out of range 1..={}",
            i0 + 1,
            model.regimes.m
        )));
    }
    let horizon = policy.grid.t_horizon;
    if t0 < 0.0 || t0 > horizon {
        return Err(Error::Config(format!("start time {t0} outside [0, {horizon}]")));
    }
    let n_steps = (((horizon - t0) / dt_sim).ceil() as usize).max(1);
    let step = (horizon - t0) / n_steps as f64;

    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let path_seeds: Vec<u64> = (0..n_paths).map(|_| seeder.random()).collect();
    let costs: Result<Vec<f64>> = path_seeds
        .par_iter()
        .map(|&ps| {
            let mut rng = ChaCha8Rng::seed_from_u64(ps);
            simulate_one_path(policy, model, t0, i0, x0, y0, n_steps, step, &mut rng)
        })
        .collect();
    Ok(CostStats::from_costs(costs?, seed))
}

fn simulate_one_path(
    policy: &ExecutionPolicy,
    model: &ModelSpec,
    t0: f64,
    i0: usize,
    x0: f64,
    y0: f64,
    n_steps: usize,
    step: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let horizon = policy.grid.t_horizon;
    let regimes = sample_regime_path(rng, &model.regimes, t0, horizon, i0)?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let exp = Exp::new(model.dynamics.eta).expect("validated eta");
    let mut x = x0;
    let mut y = y0;
    let mut cost = 0.0;
    for s in 0..n_steps {
        let t = t0 + s as f64 * step;
        let i = regimes.state_at(t);
        let a = policy.action(t, i, x, y);
        if a > 0.0 {
            cost += model.shapes[i].block_cost(y, a)?;
            y += a;
            x += a;
        }
        // Same draw order as the plain path simulator: one normal, one
        // Poisson count, then the marks.
        let dw = normal.sample(rng) * step.sqrt();
        let lambda = model.regimes.intensity.at(t);
        let n_jumps = if lambda > 0.0 {
            Poisson::new(lambda * step).expect("positive rate").sample(rng) as usize
        } else {
            0
        };
        let drift = -model.dynamics.resilience(y) * step;
        let diff = model.dynamics.volatility(y) * dw;
        let mut jump = 0.0;
        for _ in 0..n_jumps {
            let z = exp.sample(rng);
            jump += model.dynamics.jump_size(y, z);
        }
        y = (y + drift + diff + jump).max(0.0);
    }
    let i = regimes.state_at(horizon);
    let remaining = (policy.grid.x_bar - x).max(0.0);
    if remaining > 0.0 {
        cost += model.shapes[i].block_cost(y, remaining)?;
    }
    Ok(cost)
}

/// Total impact cost of a recorded path: block formula per step at the
/// pre-purchase displacement. `path.y` holds post-purchase values and
/// `path.purchases` cumulative totals, so the pre-purchase displacement is
/// recovered as `y - delta`.
pub fn account_cost(path: &SimulationPath, shapes: &[LobShape]) -> Result<f64> {
    let mut cost = 0.0;
    let mut prev_bought = 0.0;
    for s in 0..path.times.len() {
        let bought = path.purchases[s];
        let delta = bought - prev_bought;
        prev_bought = bought;
        if delta > 0.0 {
            let i = path.regime[s];
            let pre = path.y[s] - delta;
            cost += shapes[i].block_cost(pre, delta)?;
        }
    }
    Ok(cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::extract_boundary;
    use crate::grid::build_grid;
    use crate::model::{
        simulate_volume_path, CoefficientSpec, GeneratorSchedule, IntensitySchedule,
        PurchaseSchedule, RegimeModel,
    };
    use crate::solver::{solve, SolverOptions};

    fn single_regime(
        lambda: f64,
        shape: LobShape,
        dynamics: CoefficientSpec,
    ) -> ModelSpec {
        ModelSpec {
            dynamics,
            regimes: RegimeModel {
                m: 1,
                generator: GeneratorSchedule::Constant(vec![vec![0.0]]),
                intensity: IntensitySchedule::Constant(lambda),
            },
            shapes: vec![shape],
        }
    }

    #[test]
    fn diagonal_escape_matches_hand_computed_step() {
        // Boundary ystar(x) = 1 - x on the unit square, grid step 0.1:
        // from (0, 0) the first diagonal node past the boundary is j = 6,
        // so the action is 0.5 plus one grid step.
        let grid = build_grid(10, 10, 10, 1.0, 1.0, 1.0, 16.0).unwrap();
        let heights: Vec<Option<f64>> = (0..=10)
            .map(|k| Some(1.0 - grid.x_at(k)))
            .collect();
        let b = FreeBoundarySurface::from_levels(&grid, 1, |_n, _i, k| heights[k]);
        let policy = ExecutionPolicy::new(&b, grid).unwrap();
        let a = policy.action(0.0, 0, 0.0, 0.0);
        assert!((a - 0.6).abs() < 1e-12, "a = {a}");
        // Waiting state: above the boundary (ystar(0.5) = 0.5).
        assert_eq!(policy.action(0.0, 0, 0.5, 0.9), 0.0);
        // Nothing left to buy.
        assert_eq!(policy.action(0.0, 0, 1.0, 0.0), 0.0);
        // Deadline: finish the remainder regardless of region.
        assert!((policy.action(1.0, 0, 0.3, 0.9) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn all_buy_boundary_purchases_everything_at_once() {
        let grid = build_grid(8, 10, 40, 4.0, 5.0, 4.0, 1.0).unwrap();
        let shape = LobShape::PowerLaw { kappa: 1.0, gamma: 0.0 };
        let model = single_regime(0.0, shape.clone(), CoefficientSpec {
            c: 0.5,
            d: 0.1,
            e: 0.2,
            eta: 1.0,
        });
        let b = FreeBoundarySurface::from_levels(&grid, 1, |_, _, _| Some(grid.y_bar));
        let policy = ExecutionPolicy::new(&b, grid).unwrap();
        let stats =
            simulate_execution(&policy, &model, 0.0, 0, 0.0, 0.0, 32, grid.dt, 7).unwrap();
        // One block of the full inventory at t = 0, identical on every path.
        let expect = shape.block_cost(0.0, 4.0).unwrap();
        assert!((stats.mean - expect).abs() < 1e-12, "{} vs {expect}", stats.mean);
        assert_eq!(stats.stderr, 0.0);
        assert_eq!(stats.n_paths, 32);
    }

    #[test]
    fn deterministic_book_policy_reproduces_closed_form_cost() {
        // Deterministic resilience, flat book: the simulated policy cost must
        // land on the known optimum (X-bar - x + y)^2 / (2 + T - t) - y^2/2.
        let shape = LobShape::PowerLaw { kappa: 1.0, gamma: 0.0 };
        let model = single_regime(0.0, shape, CoefficientSpec {
            c: 1.0,
            d: 0.0,
            e: 0.0,
            eta: 1.0,
        });
        let grid = build_grid(40, 40, 1600, 4.0, 4.0, 4.0, 1.0).unwrap();
        let surface = solve(&model, &grid, &SolverOptions { upwind: true, ..Default::default() })
            .unwrap();
        let b = extract_boundary(&surface);
        let policy = ExecutionPolicy::new(&b, grid).unwrap();
        let stats = simulate_execution(&policy, &model, 0.0, 0, 0.0, 0.0, 4, grid.dt, 1).unwrap();
        let closed = 16.0 / 6.0;
        assert_eq!(stats.stderr, 0.0, "deterministic dynamics");
        assert!(
            (stats.mean - closed).abs() <= 0.02 * closed,
            "{} vs {closed}",
            stats.mean
        );
    }

    #[test]
    fn same_seed_reproduces_identical_statistics() {
        let shape = LobShape::PowerLaw { kappa: 0.8, gamma: -1.0 };
        let model = single_regime(0.5, shape, CoefficientSpec {
            c: 0.5,
            d: 0.1,
            e: 0.2,
            eta: 1.0,
        });
        let grid = build_grid(16, 20, 160, 4.0, 5.0, 4.0, 1.0).unwrap();
        let surface = solve(&model, &grid, &SolverOptions { n_z: 24, ..Default::default() })
            .unwrap();
        let b = extract_boundary(&surface);
        let policy = ExecutionPolicy::new(&b, grid).unwrap();
        let run = || {
            simulate_execution(&policy, &model, 0.0, 0, 0.0, 0.5, 64, 0.05, 42).unwrap()
        };
        let (a, b2) = (run(), run());
        assert_eq!(a.mean, b2.mean);
        assert_eq!(a.stderr, b2.stderr);
        assert_eq!(a.costs, b2.costs);
        // The policy cost never beats zero and never exceeds the trivial
        // immediate-purchase cost on average.
        let bound = model.shapes[0].block_cost(0.5, 4.0).unwrap();
        assert!(a.mean >= 0.0);
        assert!(a.mean <= bound + 3.0 * a.stderr, "{} vs bound {bound}", a.mean);
    }

    #[test]
    fn frozen_book_charges_telescope_exactly() {
        // With no decay the per-step block formula telescopes to a single
        // block, whatever the step size.
        let shape = LobShape::PowerLaw { kappa: 0.8, gamma: -1.0 };
        let coeffs = CoefficientSpec { c: 0.0, d: 0.0, e: 0.0, eta: 1.0 };
        let model = single_regime(0.0, shape.clone(), coeffs);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let regimes = sample_regime_path(&mut rng, &model.regimes, 0.0, 1.0, 0).unwrap();
        let path = simulate_volume_path(
            &mut rng,
            &model.dynamics,
            model.dynamics.eta,
            &model.regimes.intensity,
            &regimes,
            0.6,
            1e-2,
            &PurchaseSchedule::Rate { rate: 1.5, from: 0.0, until: 1.0 },
        )
        .unwrap();
        let got = account_cost(&path, &model.shapes).unwrap();
        let expect = shape.block_cost(0.6, 1.5).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn rate_purchase_cost_converges_to_analytic_integral_first_order() {
        // Resilience on, no noise: y solves y' = -c y + r, so the continuous
        // cost is the integral of psi(y(t)) r dt with
        // y(t) = (y0 - r/c) exp(-c t) + r/c. Composite Simpson on the exact
        // trajectory is the reference; the per-step block accounting should
        // approach it at first order in the step.
        let shape = LobShape::PowerLaw { kappa: 0.8, gamma: -1.0 };
        let c = 0.7;
        let r = 1.5;
        let y0 = 0.4;
        let coeffs = CoefficientSpec { c, d: 0.0, e: 0.0, eta: 1.0 };
        let model = single_regime(0.0, shape.clone(), coeffs);
        let y_exact = |t: f64| (y0 - r / c) * (-c * t).exp() + r / c;
        let n_ref = 4096;
        let h = 1.0 / n_ref as f64;
        let mut reference = 0.0;
        for s in 0..n_ref {
            let (a, b) = (s as f64 * h, (s + 1) as f64 * h);
            let f = |t: f64| shape.displacement(y_exact(t)).unwrap() * r;
            reference += h / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b));
        }
        let run = |dt: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let regimes = sample_regime_path(&mut rng, &model.regimes, 0.0, 1.0, 0).unwrap();
            let path = simulate_volume_path(
                &mut rng,
                &model.dynamics,
                model.dynamics.eta,
                &model.regimes.intensity,
                &regimes,
                y0,
                dt,
                &PurchaseSchedule::Rate { rate: r, from: 0.0, until: 1.0 },
            )
            .unwrap();
            account_cost(&path, &model.shapes).unwrap()
        };
        let err_coarse = (run(1e-2) - reference).abs();
        let err_fine = (run(5e-3) - reference).abs();
        assert!(err_coarse < 5e-3, "coarse error {err_coarse}");
        assert!(
            err_fine < 0.65 * err_coarse,
            "halving the step cut the error from {err_coarse} only to {err_fine}"
        );
    }

    #[test]
    fn empty_path_costs_nothing() {
        let shape = LobShape::PowerLaw { kappa: 0.8, gamma: -1.0 };
        let coeffs = CoefficientSpec { c: 0.5, d: 0.1, e: 0.2, eta: 1.0 };
        let model = single_regime(0.5, shape, coeffs);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let regimes = sample_regime_path(&mut rng, &model.regimes, 0.0, 2.0, 0).unwrap();
        let path = simulate_volume_path(
            &mut rng,
            &model.dynamics,
            model.dynamics.eta,
            &model.regimes.intensity,
            &regimes,
            0.8,
            0.01,
            &PurchaseSchedule::None,
        )
        .unwrap();
        assert_eq!(account_cost(&path, &model.shapes).unwrap(), 0.0);
    }
}
