//! Order book shape families: cumulative depth `F`, its generalized inverse
//! `psi`, and the impact cost `Phi`.
//!
//! `F(x)` is the quantity offered at price displacements in `[0, x]` relative
//! to the unaffected quote. After `y` shares have been consumed the quote is
//! displaced by `psi(y) = sup{a >= 0 : F(a) < y}` (with `psi(0) = 0`), and the
//! displacement cost of eating through the book is `Phi(y) = ∫_0^y psi(u) du`.
//! A block purchase of `a` shares arriving at displacement volume `y` costs
//! `Phi(y + a) - Phi(y)` on top of the unaffected price.
//!
//! `Phi` is convex whenever `F` is a genuine depth profile, and bounded books
//! (`sup F < ∞`) make `psi`/`Phi` undefined past the saturation level; those
//! queries are reported as domain errors rather than extrapolated.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Slack for snapping queries to knots / zero.
const DOMAIN_EPS: f64 = 1e-12;

/// Relative tolerance for the quadrature fallback of `Phi`.
const QUAD_REL_TOL: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LobShape {
    /// Density `dF(x) = kappa (1 + x)^{-gamma} dx`. `gamma < 1` grows without
    /// bound, `gamma = 1` grows logarithmically, `gamma > 1` saturates at
    /// `kappa / (gamma - 1)`.
    PowerLaw { kappa: f64, gamma: f64 },
    /// Constant density `kappa`: `F(x) = kappa x`.
    Block { kappa: f64 },
    /// Piecewise-linear `F` through the given `(x, F(x))` knots. The origin is
    /// implicit; `x` must be strictly increasing and `F` non-decreasing. Flat
    /// stretches of `F` are allowed and produce jumps of `psi`. Beyond the
    /// last knot the book is treated as exhausted (constant `F`).
    Tabulated { knots: Vec<(f64, f64)> },
}

impl LobShape {
    /// Checks the shape's own parameters. Called by every public operation
    /// that could otherwise silently produce nonsense.
    pub fn validate(&self) -> Result<()> {
        match self {
            LobShape::PowerLaw { kappa, gamma } => {
                if !kappa.is_finite() || *kappa <= 0.0 {
                    return Err(Error::Config(format!("shape kappa must be positive, got {kappa}")));
                }
                if !gamma.is_finite() {
                    return Err(Error::Config("shape gamma must be finite".into()));
                }
                Ok(())
            }
            LobShape::Block { kappa } => {
                if !kappa.is_finite() || *kappa <= 0.0 {
                    return Err(Error::Config(format!("shape kappa must be positive, got {kappa}")));
                }
                Ok(())
            }
            LobShape::Tabulated { knots } => validate_knots(knots),
        }
    }

    /// Total depth available at price displacements up to `x`.
    pub fn depth(&self, x: f64) -> Result<f64> {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::Domain(format!("depth query at x = {x} outside [0, inf)")));
        }
        match self {
            LobShape::Block { kappa } => Ok(kappa * x),
            LobShape::PowerLaw { kappa, gamma } => Ok(power_depth(*kappa, *gamma, x)),
            LobShape::Tabulated { knots } => {
                let kn = Knots::new(knots)?;
                Ok(kn.depth(x))
            }
        }
    }

    /// Supremum of `F`, i.e. the total size of the book, when finite.
    pub fn saturation(&self) -> Option<f64> {
        match self {
            LobShape::Block { .. } => None,
            LobShape::PowerLaw { kappa, gamma } => {
                (*gamma > 1.0).then(|| kappa / (gamma - 1.0))
            }
            LobShape::Tabulated { knots } => knots.last().map(|&(_, f)| f),
        }
    }

    /// Price displacement after `y` shares have been consumed:
    /// `psi(y) = sup{a >= 0 : F(a) < y}`, with `psi(0) = 0`.
    pub fn displacement(&self, y: f64) -> Result<f64> {
        if !y.is_finite() || y < 0.0 {
            return Err(Error::Domain(format!("displacement query at y = {y} outside [0, inf)")));
        }
        if y == 0.0 {
            return Ok(0.0);
        }
        match self {
            LobShape::Block { kappa } => Ok(y / kappa),
            LobShape::PowerLaw { kappa, gamma } => power_displacement(*kappa, *gamma, y),
            LobShape::Tabulated { knots } => {
                let kn = Knots::new(knots)?;
                kn.displacement(y)
            }
        }
    }

    /// Impact cost `Phi(y) = ∫_0^y psi(u) du`. Convex, `Phi(0) = 0`.
    pub fn impact_cost(&self, y: f64) -> Result<f64> {
        if !y.is_finite() || y < 0.0 {
            return Err(Error::Domain(format!("impact cost query at y = {y} outside [0, inf)")));
        }
        if y == 0.0 {
            return Ok(0.0);
        }
        match self {
            LobShape::Block { kappa } => Ok(y * y / (2.0 * kappa)),
            LobShape::PowerLaw { kappa, gamma } => power_impact_cost(*kappa, *gamma, y),
            LobShape::Tabulated { knots } => {
                let kn = Knots::new(knots)?;
                kn.impact_cost(y)
            }
        }
    }

    /// Cost of a block purchase of `a >= 0` shares arriving at displacement
    /// volume `y`: `Phi(y + a) - Phi(y)`.
    pub fn block_cost(&self, y: f64, a: f64) -> Result<f64> {
        if !a.is_finite() || a < 0.0 {
            return Err(Error::Domain(format!("block size a = {a} must be non-negative")));
        }
        Ok(self.impact_cost(y + a)? - self.impact_cost(y)?)
    }
}

fn power_depth(kappa: f64, gamma: f64, x: f64) -> f64 {
    if gamma == 0.0 {
        kappa * x
    } else if gamma == 1.0 {
        kappa * x.ln_1p()
    } else {
        kappa / (1.0 - gamma) * ((1.0 + x).powf(1.0 - gamma) - 1.0)
    }
}

fn power_displacement(kappa: f64, gamma: f64, y: f64) -> Result<f64> {
    if gamma == 0.0 {
        return Ok(y / kappa);
    }
    if gamma == 1.0 {
        return Ok((y / kappa).exp_m1());
    }
    if gamma > 1.0 {
        let sat = kappa / (gamma - 1.0);
        if y >= sat * (1.0 - DOMAIN_EPS) {
            return Err(Error::Domain(format!(
                "book saturates at {sat} shares; displacement undefined at y = {y}"
            )));
        }
    }
    let u = 1.0 + (1.0 - gamma) * y / kappa;
    Ok(u.powf(1.0 / (1.0 - gamma)) - 1.0)
}

fn power_impact_cost(kappa: f64, gamma: f64, y: f64) -> Result<f64> {
    if gamma == 0.0 {
        return Ok(y * y / (2.0 * kappa));
    }
    if gamma == 1.0 {
        return Ok(kappa * (y / kappa).exp_m1() - y);
    }
    if gamma > 1.0 {
        let sat = kappa / (gamma - 1.0);
        if y >= sat * (1.0 - DOMAIN_EPS) {
            return Err(Error::Domain(format!(
                "book saturates at {sat} shares; impact cost undefined at y = {y}"
            )));
        }
    }
    if gamma == 2.0 {
        // The antiderivative degenerates at gamma = 2; integrate psi directly.
        return integrate_adaptive(
            &|u| power_displacement(kappa, gamma, u).expect("domain pre-checked"),
            0.0,
            y,
            QUAD_REL_TOL,
        );
    }
    let u = 1.0 + (1.0 - gamma) * y / kappa;
    let p = (2.0 - gamma) / (1.0 - gamma);
    Ok(kappa / (2.0 - gamma) * (u.powf(p) - 1.0) - y)
}

/// Validated, origin-anchored knot list for tabulated shapes.
struct Knots<'a> {
    xs: Vec<f64>,
    fs: Vec<f64>,
    _raw: &'a [(f64, f64)],
}

fn validate_knots(knots: &[(f64, f64)]) -> Result<()> {
    Knots::new(knots).map(|_| ())
}

impl<'a> Knots<'a> {
    fn new(raw: &'a [(f64, f64)]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Config("tabulated shape needs at least one knot".into()));
        }
        let mut xs = Vec::with_capacity(raw.len() + 1);
        let mut fs = Vec::with_capacity(raw.len() + 1);
        if raw[0].0 != 0.0 {
            xs.push(0.0);
            fs.push(0.0);
        } else if raw[0].1 != 0.0 {
            return Err(Error::Config("tabulated shape must satisfy F(0) = 0".into()));
        }
        for &(x, f) in raw {
            if !x.is_finite() || !f.is_finite() || x < 0.0 || f < 0.0 {
                return Err(Error::Config(format!("tabulated knot ({x}, {f}) must be finite and non-negative")));
            }
            if let Some(&px) = xs.last() {
                if x <= px {
                    return Err(Error::Config(format!("tabulated knot x-values must be strictly increasing at x = {x}")));
                }
            }
            if let Some(&pf) = fs.last() {
                if f < pf {
                    return Err(Error::Config(format!("tabulated depth must be non-decreasing at x = {x}")));
                }
            }
            xs.push(x);
            fs.push(f);
        }
        Ok(Knots { xs, fs, _raw: raw })
    }

    fn depth(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x >= self.xs[n - 1] {
            return self.fs[n - 1];
        }
        let i = self.xs.partition_point(|&k| k <= x);
        // x lies in [xs[i-1], xs[i])
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        let (f0, f1) = (self.fs[i - 1], self.fs[i]);
        f0 + (f1 - f0) * (x - x0) / (x1 - x0)
    }

    /// Left-continuous generalized inverse: the x at which F first reaches y.
    fn displacement(&self, y: f64) -> Result<f64> {
        let n = self.xs.len();
        let total = self.fs[n - 1];
        if y > total * (1.0 + DOMAIN_EPS) {
            return Err(Error::Domain(format!(
                "book saturates at {total} shares; displacement undefined at y = {y}"
            )));
        }
        let y = y.min(total);
        let i = self.fs.partition_point(|&f| f < y);
        // fs[i] is the first level >= y; the crossing lies in segment (i-1, i].
        debug_assert!(i >= 1);
        let (f0, f1) = (self.fs[i - 1], self.fs[i]);
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        if f1 == f0 {
            return Ok(x0); // should not happen: partition_point skips flats below y
        }
        Ok(x0 + (x1 - x0) * (y - f0) / (f1 - f0))
    }

    /// Exact integral of the piecewise-linear inverse. Flat segments of F have
    /// zero width in y and contribute nothing, keeping Phi continuous.
    fn impact_cost(&self, y: f64) -> Result<f64> {
        let n = self.xs.len();
        let total = self.fs[n - 1];
        if y > total * (1.0 + DOMAIN_EPS) {
            return Err(Error::Domain(format!(
                "book saturates at {total} shares; impact cost undefined at y = {y}"
            )));
        }
        let y = y.min(total);
        let mut acc = 0.0;
        for i in 1..n {
            let (f0, f1) = (self.fs[i - 1], self.fs[i]);
            if f1 == f0 {
                continue;
            }
            let (x0, x1) = (self.xs[i - 1], self.xs[i]);
            if y >= f1 {
                acc += (f1 - f0) * (x0 + x1) / 2.0;
            } else {
                if y > f0 {
                    let xy = x0 + (x1 - x0) * (y - f0) / (f1 - f0);
                    acc += (y - f0) * (x0 + xy) / 2.0;
                }
                break;
            }
        }
        Ok(acc)
    }
}

/// Outcome of the lower-depth-bound check `F(x) >= b x^beta` on a range.
#[derive(Debug, Clone)]
pub struct DepthBoundReport {
    pub holds: bool,
    /// A sampled point violating the bound, when one exists: `(x, F(x), b x^beta)`.
    pub witness: Option<(f64, f64, f64)>,
}

/// Checks the polynomial lower bound `F(x) >= b x^beta` for `x` in
/// `[range.0, range.1]` by geometric sampling. Books with logarithmic or
/// bounded growth (power-law `gamma >= 1`, tabulated) eventually violate any
/// such bound, so for those the search is extended past the range until a
/// witness is found.
pub fn check_depth_lower_bound(
    shape: &LobShape,
    b: f64,
    beta: f64,
    range: (f64, f64),
) -> Result<DepthBoundReport> {
    shape.validate()?;
    if !(b > 0.0) || !(beta > 0.0) {
        return Err(Error::Config(format!("depth bound needs b > 0 and beta > 0, got b = {b}, beta = {beta}")));
    }
    let (lo, hi) = range;
    if !(lo > 0.0) || !(hi > lo) {
        return Err(Error::Config(format!("depth bound range ({lo}, {hi}) must satisfy 0 < lo < hi")));
    }
    const SAMPLES: usize = 512;
    let ratio = (hi / lo).powf(1.0 / (SAMPLES - 1) as f64);
    let mut x = lo;
    for _ in 0..SAMPLES {
        let f = shape.depth(x)?;
        let bound = b * x.powf(beta);
        if f < bound {
            return Ok(DepthBoundReport { holds: false, witness: Some((x, f, bound)) });
        }
        x *= ratio;
    }
    let sublinear = match shape {
        LobShape::PowerLaw { gamma, .. } => *gamma >= 1.0,
        LobShape::Tabulated { .. } => true,
        LobShape::Block { .. } => false,
    };
    if sublinear {
        // Saturating or log growth loses to b x^beta for large enough x.
        let mut x = hi;
        while x < 1e15 {
            x *= 2.0;
            let f = shape.depth(x)?;
            let bound = b * x.powf(beta);
            if f < bound {
                return Ok(DepthBoundReport { holds: false, witness: Some((x, f, bound)) });
            }
        }
    }
    Ok(DepthBoundReport { holds: true, witness: None })
}

/// Adaptive Simpson quadrature with Richardson acceptance.
pub(crate) fn integrate_adaptive(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    rel_tol: f64,
) -> Result<f64> {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), fm)
    }
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (left, flm) = simpson(f, a, fa, m, fm);
        let (right, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, flm, tol / 2.0, depth - 1)
                + recurse(f, m, fm, b, fb, right, frm, tol / 2.0, depth - 1)
        }
    }
    if b < a {
        return Err(Error::Domain(format!("integration bounds reversed: [{a}, {b}]")));
    }
    if a == b {
        return Ok(0.0);
    }
    let (fa, fb) = (f(a), f(b));
    let (whole, fm) = simpson(f, a, fa, b, fb);
    let scale = whole.abs().max(1e-300);
    let out = recurse(f, a, fa, b, fb, whole, fm, rel_tol * scale, 48);
    if !out.is_finite() {
        return Err(Error::Numerical { level: 0, msg: format!("quadrature diverged on [{a}, {b}]") });
    }
    Ok(out)
}
