//! Market dynamics: the volume-effect process, the regime chain, and path
//! simulation.
//!
//! Between purchases the volume effect `Y` mean-reverts toward zero and is
//! hit by adverse jumps:
//!
//! `dY = -h(Y) dt + sigma(Y) dW + ∫ q(Y, z) N(dt, dz)`,
//!
//! where jump marks `z` arrive at intensity `lambda_t` with sizes `Exp(eta)`.
//! The validated fast path is the multiplicative family `h(y) = c y`,
//! `sigma(y) = d y`, `q(y, z) = e y z`, which keeps `Y >= 0` automatically;
//! arbitrary coefficient callables are accepted through [`Coefficients`].
//! Regimes follow a continuous-time Markov chain with generator `Q_t`
//! (piecewise-constant in time), independent of the Brownian and jump noise.

use crate::error::{Error, Result};
use crate::shapes::LobShape;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

/// State-dependent dynamics of the volume effect.
pub trait Coefficients: Sync {
    /// Resilience drift `h(y)`; pulls the displacement back toward zero.
    fn resilience(&self, y: f64) -> f64;
    /// Diffusion coefficient `sigma(y)`.
    fn volatility(&self, y: f64) -> f64;
    /// Jump size `q(y, z) >= 0` for a mark `z`.
    fn jump_size(&self, y: f64, z: f64) -> f64;
}

/// Multiplicative coefficient family `(c y, d y, e y z)` with `Exp(eta)` marks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSpec {
    /// Resilience rate: `h(y) = c y`.
    pub c: f64,
    /// Volatility scale: `sigma(y) = d y`.
    pub d: f64,
    /// Jump scale: `q(y, z) = e y z`.
    pub e: f64,
    /// Rate of the exponential jump-mark law.
    pub eta: f64,
}

impl CoefficientSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c", self.c), ("d", self.d), ("e", self.e)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("dynamics.{name} must be finite and >= 0, got {v}")));
            }
        }
        if !self.eta.is_finite() || self.eta <= 0.0 {
            return Err(Error::Config(format!("dynamics.eta must be positive, got {}", self.eta)));
        }
        Ok(())
    }
}

impl Coefficients for CoefficientSpec {
    fn resilience(&self, y: f64) -> f64 {
        self.c * y
    }
    fn volatility(&self, y: f64) -> f64 {
        self.d * y
    }
    fn jump_size(&self, y: f64, z: f64) -> f64 {
        self.e * y * z
    }
}

/// Arbitrary coefficient callables for non-multiplicative experiments.
pub struct GeneralCoefficients {
    pub resilience: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub volatility: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub jump_size: Box<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

impl Coefficients for GeneralCoefficients {
    fn resilience(&self, y: f64) -> f64 {
        (self.resilience)(y)
    }
    fn volatility(&self, y: f64) -> f64 {
        (self.volatility)(y)
    }
    fn jump_size(&self, y: f64, z: f64) -> f64 {
        (self.jump_size)(y, z)
    }
}

pub type Generator = Vec<Vec<f64>>;

/// Checks that `q` is a conservative generator matrix: square, non-negative
/// off-diagonal, rows summing to zero.
pub fn validate_generator(q: &Generator) -> Result<()> {
    let m = q.len();
    if m == 0 {
        return Err(Error::Config("regimes.q_matrix must be non-empty".into()));
    }
    let mut max_abs = 0.0f64;
    for row in q {
        if row.len() != m {
            return Err(Error::Config(format!(
                "regimes.q_matrix must be square, got a row of length {} in a {m}-state matrix",
                row.len()
            )));
        }
        for &v in row {
            if !v.is_finite() {
                return Err(Error::Config("regimes.q_matrix entries must be finite".into()));
            }
            max_abs = max_abs.max(v.abs());
        }
    }
    let tol = 1e-9 * (1.0 + max_abs);
    for (i, row) in q.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i != j && v < -tol {
                return Err(Error::Config(format!(
                    "regimes.q_matrix off-diagonal entry ({i}, {j}) = {v} must be non-negative"
                )));
            }
        }
        let sum: f64 = row.iter().sum();
        if sum.abs() > tol {
            return Err(Error::Config(format!(
                "regimes.q_matrix row {i} sums to {sum}, expected 0"
            )));
        }
    }
    Ok(())
}

/// Piecewise-constant schedule of generator matrices on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GeneratorSchedule {
    Constant(Generator),
    /// `(from_time, matrix)` entries with strictly increasing times starting at 0.
    Piecewise(Vec<(f64, Generator)>),
}

impl GeneratorSchedule {
    pub fn validate(&self, m: usize) -> Result<()> {
        let check_dim = |q: &Generator| -> Result<()> {
            validate_generator(q)?;
            if q.len() != m {
                return Err(Error::Config(format!(
                    "regimes.q_matrix is {}x{} but m = {m}",
                    q.len(),
                    q.len()
                )));
            }
            Ok(())
        };
        match self {
            GeneratorSchedule::Constant(q) => check_dim(q),
            GeneratorSchedule::Piecewise(entries) => {
                if entries.is_empty() {
                    return Err(Error::Config("regimes.q_schedule must be non-empty".into()));
                }
                if entries[0].0 != 0.0 {
                    return Err(Error::Config("regimes.q_schedule must start at time 0".into()));
                }
                for w in entries.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return Err(Error::Config("regimes.q_schedule times must be strictly increasing".into()));
                    }
                }
                entries.iter().try_for_each(|(_, q)| check_dim(q))
            }
        }
    }

    pub fn at(&self, t: f64) -> &Generator {
        match self {
            GeneratorSchedule::Constant(q) => q,
            GeneratorSchedule::Piecewise(entries) => {
                let idx = entries.partition_point(|(from, _)| *from <= t);
                &entries[idx.saturating_sub(1)].1
            }
        }
    }

    /// Segment boundaries after `t` (used by the exact chain sampler).
    fn next_change(&self, t: f64) -> Option<f64> {
        match self {
            GeneratorSchedule::Constant(_) => None,
            GeneratorSchedule::Piecewise(entries) => {
                entries.iter().map(|(from, _)| *from).find(|&from| from > t)
            }
        }
    }
}

/// Piecewise-constant jump intensity `lambda_t >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IntensitySchedule {
    Constant(f64),
    Piecewise(Vec<(f64, f64)>),
}

impl IntensitySchedule {
    pub fn validate(&self) -> Result<()> {
        let check = |v: f64| -> Result<()> {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("regimes.lambda must be finite and >= 0, got {v}")));
            }
            Ok(())
        };
        match self {
            IntensitySchedule::Constant(v) => check(*v),
            IntensitySchedule::Piecewise(entries) => {
                if entries.is_empty() {
                    return Err(Error::Config("regimes.lambda schedule must be non-empty".into()));
                }
                if entries[0].0 != 0.0 {
                    return Err(Error::Config("regimes.lambda schedule must start at time 0".into()));
                }
                for w in entries.windows(2) {
                    if w[1].0 <= w[0].0 {
                        return Err(Error::Config("regimes.lambda schedule times must be strictly increasing".into()));
                    }
                }
                entries.iter().try_for_each(|(_, v)| check(*v))
            }
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        match self {
            IntensitySchedule::Constant(v) => *v,
            IntensitySchedule::Piecewise(entries) => {
                let idx = entries.partition_point(|(from, _)| *from <= t);
                entries[idx.saturating_sub(1)].1
            }
        }
    }

    pub fn upper_bound(&self) -> f64 {
        match self {
            IntensitySchedule::Constant(v) => *v,
            IntensitySchedule::Piecewise(entries) => {
                entries.iter().map(|(_, v)| *v).fold(0.0, f64::max)
            }
        }
    }
}

/// Regime layer of the model: chain size, generator schedule, jump intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeModel {
    pub m: usize,
    pub generator: GeneratorSchedule,
    pub intensity: IntensitySchedule,
}

impl RegimeModel {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("regimes.m must be at least 1".into()));
        }
        self.generator.validate(self.m)?;
        self.intensity.validate()
    }
}

/// Full model: volume dynamics, regime layer, and one depth profile per
/// regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dynamics: CoefficientSpec,
    pub regimes: RegimeModel,
    pub shapes: Vec<LobShape>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.dynamics.validate()?;
        self.regimes.validate()?;
        if self.shapes.len() != self.regimes.m {
            return Err(Error::Config(format!(
                "expected {} depth profiles (one per regime), found {}",
                self.regimes.m,
                self.shapes.len()
            )));
        }
        for (i, shape) in self.shapes.iter().enumerate() {
            shape.validate().map_err(|e| {
                Error::Config(format!("depth profile for regime {}: {e}", i + 1))
            })?;
        }
        Ok(())
    }
}

/// A realized regime trajectory: right-continuous step function.
#[derive(Debug, Clone)]
pub struct RegimePath {
    /// Event times; `times[0]` is the start time.
    pub times: Vec<f64>,
    /// State after each event; `states[0]` is the initial state.
    pub states: Vec<usize>,
    pub t_end: f64,
}

impl RegimePath {
    pub fn state_at(&self, t: f64) -> usize {
        let idx = self.times.partition_point(|&s| s <= t);
        self.states[idx.saturating_sub(1)]
    }

    pub fn switch_count(&self) -> usize {
        self.states.len() - 1
    }

    /// Fraction of `[start, t_end]` spent in `state`.
    pub fn occupancy(&self, state: usize) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.states.len() {
            let t0 = self.times[i];
            let t1 = if i + 1 < self.times.len() { self.times[i + 1] } else { self.t_end };
            if self.states[i] == state {
                acc += t1 - t0;
            }
        }
        acc / (self.t_end - self.times[0])
    }
}

/// Samples the regime chain exactly on `[t0, t1]`: exponential holding times
/// with the piecewise-constant exit rate, embedded-chain jump draws.
pub fn sample_regime_path<R: Rng>(
    rng: &mut R,
    model: &RegimeModel,
    t0: f64,
    t1: f64,
    initial_state: usize,
) -> Result<RegimePath> {
    model.validate()?;
    if initial_state >= model.m {
        return Err(Error::Config(format!(
            "initial regime {initial_state} out of range for m = {}",
            model.m
        )));
    }
    if !(t1 > t0) {
        return Err(Error::Config(format!("regime path needs t1 > t0, got [{t0}, {t1}]")));
    }
    let mut times = vec![t0];
    let mut states = vec![initial_state];
    let mut t = t0;
    let mut state = initial_state;
    loop {
        // Consume one Exp(1) variate across schedule segments with rate -Q_ii.
        let mut budget: f64 = rng.sample(Exp::new(1.0).expect("unit rate"));
        let event_time = loop {
            let q = model.generator.at(t);
            let rate = -q[state][state];
            let seg_end = model.generator.next_change(t).unwrap_or(t1).min(t1);
            if rate <= 0.0 {
                if seg_end >= t1 {
                    break t1;
                }
                t = seg_end;
                continue;
            }
            let dt_needed = budget / rate;
            if t + dt_needed <= seg_end {
                break t + dt_needed;
            }
            budget -= rate * (seg_end - t);
            t = seg_end;
            if t >= t1 {
                break t1;
            }
        };
        if event_time >= t1 {
            break;
        }
        t = event_time;
        let q = model.generator.at(t);
        let rate = -q[state][state];
        let mut u = rng.random::<f64>() * rate;
        let mut next = state;
        for j in 0..model.m {
            if j == state {
                continue;
            }
            u -= q[state][j];
            if u <= 0.0 {
                next = j;
                break;
            }
        }
        if next == state {
            // Fell through on rounding; pick the largest off-diagonal rate.
            next = (0..model.m)
                .filter(|&j| j != state)
                .max_by(|&a, &b| q[state][a].partial_cmp(&q[state][b]).unwrap())
                .unwrap_or(state);
        }
        state = next;
        times.push(t);
        states.push(state);
    }
    Ok(RegimePath { times, states, t_end: t1 })
}

/// Externally imposed purchase flow for open-loop path simulation.
#[derive(Debug, Clone)]
pub enum PurchaseSchedule {
    None,
    /// `(time, size)` block purchases; times inside `[t0, t1]`.
    Blocks(Vec<(f64, f64)>),
    /// Constant-rate purchasing on `[from, until]`.
    Rate { rate: f64, from: f64, until: f64 },
}

/// One simulated trajectory of the volume effect under a purchase schedule.
///
/// Conventions: `y[s]` is the volume effect at `times[s]` immediately *after*
/// the purchase applied at that step, and `purchases[s]` is cumulative through
/// step `s`, so the pre-purchase level is `y[s] - (purchases[s] - purchases[s-1])`.
#[derive(Debug, Clone)]
pub struct SimulationPath {
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub regime: Vec<usize>,
    pub purchases: Vec<f64>,
    /// Jump marks as `(time, z)` in arrival order.
    pub jump_marks: Vec<(f64, f64)>,
}

/// Euler–Maruyama simulation of the volume effect on a fixed step grid, with
/// compound-Poisson jumps and an exogenous regime path. The per-step draw
/// order (normal, Poisson count, marks) is fixed so that runs sharing a seed
/// see identical noise regardless of the purchase schedule.
#[allow(clippy::too_many_arguments)]
pub fn simulate_volume_path<R: Rng>(
    rng: &mut R,
    coeffs: &dyn Coefficients,
    eta: f64,
    intensity: &IntensitySchedule,
    regimes: &RegimePath,
    y0: f64,
    dt: f64,
    schedule: &PurchaseSchedule,
) -> Result<SimulationPath> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("simulate.dt_sim must be positive, got {dt}")));
    }
    if !(y0 >= 0.0) {
        return Err(Error::Config(format!("simulate.y0 must be >= 0, got {y0}")));
    }
    if let PurchaseSchedule::Blocks(blocks) = schedule {
        for w in blocks.windows(2) {
            if w[1].0 < w[0].0 {
                return Err(Error::Config("purchase blocks must be sorted by time".into()));
            }
        }
        if blocks.iter().any(|&(_, a)| !(a >= 0.0)) {
            return Err(Error::Config("purchase block sizes must be >= 0".into()));
        }
    }
    let (t0, t1) = (regimes.times[0], regimes.t_end);
    let n_steps = ((t1 - t0) / dt).ceil() as usize;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let exp_marks = Exp::new(eta).map_err(|_| Error::Config(format!("dynamics.eta must be positive, got {eta}")))?;

    let mut times = Vec::with_capacity(n_steps + 1);
    let mut ys = Vec::with_capacity(n_steps + 1);
    let mut regime = Vec::with_capacity(n_steps + 1);
    let mut purchases = Vec::with_capacity(n_steps + 1);
    let mut jump_marks = Vec::new();

    let mut y = y0;
    let mut bought = 0.0;
    let mut blocks_done = 0usize;
    for s in 0..=n_steps {
        let t = (t0 + s as f64 * dt).min(t1);
        let step = if s < n_steps { (t1 - t).min(dt) } else { 0.0 };
        // Purchases scheduled in [t, t + step) land at the step start.
        let mut da = 0.0;
        match schedule {
            PurchaseSchedule::None => {}
            PurchaseSchedule::Blocks(blocks) => {
                // Blocks are consumed in order; each lands at the start of the
                // step covering its time (the final step absorbs the rest).
                while blocks_done < blocks.len() {
                    let (bt, ba) = blocks[blocks_done];
                    if s < n_steps && bt >= t + step {
                        break;
                    }
                    da += ba;
                    blocks_done += 1;
                }
            }
            PurchaseSchedule::Rate { rate, from, until } => {
                if step > 0.0 {
                    let lo = t.max(*from);
                    let hi = (t + step).min(*until);
                    if hi > lo {
                        da += rate * (hi - lo);
                    }
                }
            }
        }
        y += da;
        bought += da;
        times.push(t);
        ys.push(y);
        regime.push(regimes.state_at(t));
        purchases.push(bought);
        if step <= 0.0 {
            continue;
        }
        // Dynamics over [t, t + step]; fixed draw order.
        let dw: f64 = rng.sample(normal);
        let lam = intensity.at(t);
        let count = if lam * step > 0.0 {
            Poisson::new(lam * step).map_err(|_| Error::Config("invalid jump intensity".into()))?.sample(rng) as usize
        } else {
            0
        };
        let mut jump_total = 0.0;
        for _ in 0..count {
            let z: f64 = rng.sample(exp_marks);
            jump_marks.push((t, z));
            jump_total += coeffs.jump_size(y, z);
        }
        if jump_total < 0.0 {
            return Err(Error::Domain("jump sizes must be non-negative".into()));
        }
        y += -coeffs.resilience(y) * step + coeffs.volatility(y) * step.sqrt() * dw + jump_total;
        y = y.max(0.0); // state constraint: the displacement volume cannot go negative
    }
    Ok(SimulationPath { times, y: ys, regime, purchases, jump_marks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_state(q1: f64, q2: f64) -> RegimeModel {
        RegimeModel {
            m: 2,
            generator: GeneratorSchedule::Constant(vec![vec![-q1, q1], vec![q2, -q2]]),
            intensity: IntensitySchedule::Constant(0.0),
        }
    }

    #[test]
    fn generator_validation() {
        assert!(validate_generator(&vec![vec![-0.2, 0.2], vec![0.2, -0.2]]).is_ok());
        assert!(validate_generator(&vec![vec![0.0, 0.0], vec![0.0, 0.0]]).is_ok());
        assert!(validate_generator(&vec![vec![-1.0, 0.5], vec![0.2, -0.2]]).is_err());
        assert!(validate_generator(&vec![vec![-0.2, 0.2]]).is_err());
        assert!(validate_generator(&vec![vec![0.2, -0.2], vec![-0.2, 0.2]]).is_err());
    }

    #[test]
    fn coefficient_spec_evaluates_multiplicative_family() {
        let c = CoefficientSpec { c: 0.5, d: 0.1, e: 0.2, eta: 1.0 };
        c.validate().unwrap();
        assert!((c.resilience(5.0) - 2.5).abs() < 1e-15);
        assert!((c.volatility(5.0) - 0.5).abs() < 1e-15);
        assert!((c.jump_size(5.0, 1.0) - 1.0).abs() < 1e-15);
        assert_eq!(c.resilience(0.0), 0.0);
        assert!(CoefficientSpec { c: -0.1, ..c }.validate().is_err());
        assert!(CoefficientSpec { eta: 0.0, ..c }.validate().is_err());
    }

    #[test]
    fn mean_switch_count_matches_symmetric_chain() {
        let model = two_state(0.2, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut total = 0.0;
        let mut total_sq = 0.0;
        for _ in 0..n {
            let p = sample_regime_path(&mut rng, &model, 0.0, 4.0, 0).unwrap();
            let k = p.switch_count() as f64;
            total += k;
            total_sq += k * k;
        }
        let mean = total / n as f64;
        let var = total_sq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - 0.8).abs() <= 3.0 * se,
            "mean switches {mean}, expected 0.8 +- {}",
            3.0 * se
        );
    }

    #[test]
    fn occupancy_matches_stationary_distribution() {
        // Stationary mass of state 0 is q2 / (q1 + q2) = 0.75.
        let model = two_state(0.2, 0.6);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 2_000;
        let mut occ = Vec::with_capacity(n);
        for _ in 0..n {
            let p = sample_regime_path(&mut rng, &model, 0.0, 400.0, 0).unwrap();
            occ.push(p.occupancy(0));
        }
        let mean = occ.iter().sum::<f64>() / n as f64;
        let var = occ.iter().map(|o| (o - mean) * (o - mean)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - 0.75).abs() <= 3.0 * se,
            "occupancy {mean}, expected 0.75 +- {}",
            3.0 * se
        );
    }

    #[test]
    fn holding_times_are_exponential() {
        // Kolmogorov–Smirnov against Exp(0.2) at the 1% level.
        let model = two_state(0.2, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut samples = Vec::new();
        while samples.len() < 10_000 {
            let p = sample_regime_path(&mut rng, &model, 0.0, 2000.0, 0).unwrap();
            for w in p.times.windows(2) {
                samples.push(w[1] - w[0]);
                if samples.len() == 10_000 {
                    break;
                }
            }
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len() as f64;
        let mut ks = 0.0f64;
        for (i, &x) in samples.iter().enumerate() {
            let cdf = 1.0 - (-0.2 * x).exp();
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            ks = ks.max((cdf - lo).abs()).max((hi - cdf).abs());
        }
        let critical = 1.628 / n.sqrt(); // 1% asymptotic quantile
        assert!(ks <= critical, "KS statistic {ks} exceeds {critical}");
    }

    #[test]
    fn piecewise_generator_schedule_lookup() {
        let q_slow = vec![vec![-0.1, 0.1], vec![0.1, -0.1]];
        let q_fast = vec![vec![-2.0, 2.0], vec![2.0, -2.0]];
        let sched = GeneratorSchedule::Piecewise(vec![(0.0, q_slow.clone()), (1.0, q_fast.clone())]);
        sched.validate(2).unwrap();
        assert_eq!(sched.at(0.5), &q_slow);
        assert_eq!(sched.at(1.0), &q_fast);
        assert_eq!(sched.at(3.0), &q_fast);
        assert!(GeneratorSchedule::Piecewise(vec![(0.5, q_slow)]).validate(2).is_err());
    }

    #[test]
    fn volume_path_is_deterministic_per_seed() {
        let coeffs = CoefficientSpec { c: 0.5, d: 0.1, e: 0.2, eta: 1.0 };
        let model = two_state(0.2, 0.2);
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let regimes = sample_regime_path(&mut rng, &model, 0.0, 4.0, 0).unwrap();
            simulate_volume_path(
                &mut rng,
                &coeffs,
                coeffs.eta,
                &IntensitySchedule::Constant(0.5),
                &regimes,
                1.0,
                0.01,
                &PurchaseSchedule::None,
            )
            .unwrap()
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a.y, b.y);
        assert_eq!(a.jump_marks, b.jump_marks);
        let c = run(43);
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn shared_noise_preserves_initial_ordering() {
        // Multiplicative coefficients keep paths ordered when they share noise.
        let coeffs = CoefficientSpec { c: 0.5, d: 0.1, e: 0.2, eta: 1.0 };
        let model = two_state(0.0, 0.0);
        let run = |y0: f64| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let regimes = sample_regime_path(&mut rng, &model, 0.0, 4.0, 0).unwrap();
            simulate_volume_path(
                &mut rng,
                &coeffs,
                coeffs.eta,
                &IntensitySchedule::Constant(0.5),
                &regimes,
                y0,
                0.005,
                &PurchaseSchedule::None,
            )
            .unwrap()
        };
        let lo = run(0.5);
        let hi = run(0.8);
        assert_eq!(lo.jump_marks.len(), hi.jump_marks.len());
        for (a, b) in lo.y.iter().zip(&hi.y) {
            assert!(a <= b, "ordering violated: {a} > {b}");
        }
    }

    #[test]
    fn mean_jump_count_matches_intensity() {
        let coeffs = CoefficientSpec { c: 0.0, d: 0.0, e: 0.2, eta: 1.0 };
        let model = RegimeModel {
            m: 1,
            generator: GeneratorSchedule::Constant(vec![vec![0.0]]),
            intensity: IntensitySchedule::Constant(0.5),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let mut total = 0.0;
        let mut total_sq = 0.0;
        for _ in 0..n {
            let regimes = sample_regime_path(&mut rng, &model, 0.0, 4.0, 0).unwrap();
            let p = simulate_volume_path(
                &mut rng,
                &coeffs,
                coeffs.eta,
                &IntensitySchedule::Constant(0.5),
                &regimes,
                1.0,
                0.05,
                &PurchaseSchedule::None,
            )
            .unwrap();
            let k = p.jump_marks.len() as f64;
            total += k;
            total_sq += k * k;
        }
        let mean = total / n as f64;
        let var = total_sq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - 2.0).abs() <= 3.0 * se,
            "mean jump count {mean}, expected 2.0 +- {}",
            3.0 * se
        );
    }
}
