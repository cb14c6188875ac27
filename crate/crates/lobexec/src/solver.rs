//! Backward-in-time solver for the buy-or-wait quasi-variational inequality.
//!
//! At each node the value satisfies the coupled system
//!
//! `max( dV_i/dt_remaining - L_i V, -dV_i/dx - dV_i/dy - psi_i(y) ) = 0`
//!
//! where `L_i` collects resilience drift, diffusion, the jump integral, and
//! regime coupling `sum_j Q_ij (V_j - V_i)`. One backward step treats the
//! drift/diffusion part implicitly (a banded solve per regime and inventory
//! slice) and lags the jump integral and regime coupling explicitly, then
//! applies the purchase obstacle along lattice diagonals and classifies each
//! node as buy (exercise) or wait (continuation) from the two residuals.
//!
//! Storage is dense: every time level is kept so that policies, boundaries,
//! and region masks can be read back at any `(t, regime, x, y)`.

use crate::error::{Error, Result};
use crate::grid::{build_jump_shift_table, build_quadrature, JumpShiftTable, QuadratureTable, SolverGrid};
use crate::model::{Coefficients, Generator, ModelSpec};
use crate::shapes::LobShape;
use rayon::prelude::*;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Classification margin, in units of the value scale per unit time. The
/// scale is the worst-regime cost of the whole program from an undisplaced
/// book, `max_i Phi_i(x_bar)` — a representative value magnitude, unlike the
/// terminal-surface maximum, which on convex books is dominated by the
/// `y_bar` corner and would inflate the margin several-fold. A node counts
/// as buying only when the obstacle pushes its value down faster than this
/// rate; anything slower is numerically indifferent and resolves to
/// continuation. Calibrated against solved surfaces: clamp pressure inside
/// indifference plateaus stays below roughly half this margin, while inside
/// genuine buy bands it exceeds the margin severalfold.
const REGION_TIE_EPS: f64 = 1.5e-4;

/// Column header of the exported value-surface table.
pub const SURFACE_CSV_HEADER: &str = "time_index,t,regime,x,y,value,region";

/// Banded spatial operator `A` in the volume direction: tridiagonal, with
/// optional corner entries two columns off the diagonal in the first and last
/// rows (zero under the mirror boundary treatment; the solver handles them so
/// alternative three-point boundary closures stay expressible).
#[derive(Debug, Clone)]
pub struct DiffusionBands {
    /// `sub[l]` multiplies `v[l-1]` (defined for rows `1..=n_y`).
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    /// `sup[l]` multiplies `v[l+1]` (defined for rows `0..n_y`).
    pub sup: Vec<f64>,
    /// Row 0 entry on `v[2]`.
    pub sup2: f64,
    /// Row `n_y` entry on `v[n_y - 2]`.
    pub sub2: f64,
    /// `sigma^2(y_bar) / (2 dy^2)`: curvature weight restored explicitly at
    /// the top row, where the implicit part keeps drift only.
    pub top_curv: f64,
    pub upwind: bool,
}

impl DiffusionBands {
    pub fn rows(&self) -> usize {
        self.diag.len()
    }

    /// Applies `A` to a single volume column.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let r = self.rows();
        debug_assert_eq!(v.len(), r);
        out[0] = self.diag[0] * v[0] + self.sup[0] * v[1] + self.sup2 * v[2];
        for l in 1..r - 1 {
            out[l] = self.sub[l] * v[l - 1] + self.diag[l] * v[l] + self.sup[l] * v[l + 1];
        }
        out[r - 1] =
            self.sub2 * v[r - 3] + self.sub[r - 1] * v[r - 2] + self.diag[r - 1] * v[r - 1];
    }
}

/// Assembles the drift/diffusion bands on the volume axis.
///
/// Interior rows discretize `sigma^2(y)/2 d_yy - h(y) d_y`; with `upwind` the
/// drift uses one-sided differences picked by the sign of `h`, which keeps all
/// off-diagonal entries non-negative (an M-matrix) at the price of first-order
/// accuracy in the drift. The bottom row reflects (mirror ghost, zero
/// gradient): the second difference collapses to `sigma^2/dy^2 (v[1] - v[0])`
/// and vanishes with `sigma(0) = 0`. The top row keeps only the inward drift
/// in the implicit matrix, one-sided; its diffusion term is restored in the
/// explicit part of the step from the one-sided curvature below the edge
/// (`top_curv`), which stays well inside the explicit stability limit on any
/// admissible grid. Dropping that curvature entirely biases the top row low
/// on a convex surface, and an exercise band anchored to the edge then casts
/// spurious buy shadows along the lattice diagonals beneath it. Both boundary
/// rows annihilate constants and keep the diagonal non-positive. The other
/// closures fail harder: a one-sided three-point second difference in the
/// implicit matrix makes the step amplifying (spectral radius > 1 under
/// default dynamics), and a mirror condition at the top forces a flat layer
/// into the surface whose kink misclassifies the row below it as a buy node.
pub fn assemble_diffusion(grid: &SolverGrid, coeffs: &dyn Coefficients, upwind: bool) -> DiffusionBands {
    let r = grid.n_y + 1;
    let dy = grid.dy;
    let mut sub = vec![0.0; r];
    let mut diag = vec![0.0; r];
    let mut sup = vec![0.0; r];
    for l in 1..r - 1 {
        let y = grid.y_at(l);
        let s2 = coeffs.volatility(y).powi(2);
        let h = coeffs.resilience(y);
        let d2 = s2 / (2.0 * dy * dy);
        if upwind {
            let hp = h.max(0.0);
            let hm = (-h).max(0.0);
            sub[l] = d2 + hp / dy;
            sup[l] = d2 + hm / dy;
            diag[l] = -2.0 * d2 - (hp + hm) / dy;
        } else {
            sub[l] = d2 + h / (2.0 * dy);
            sup[l] = d2 - h / (2.0 * dy);
            diag[l] = -2.0 * d2;
        }
    }
    let s0 = coeffs.volatility(grid.y_at(0)).powi(2) / (dy * dy);
    diag[0] = -s0;
    sup[0] = s0;
    let ht = coeffs.resilience(grid.y_at(r - 1)).max(0.0);
    diag[r - 1] = -ht / dy;
    sub[r - 1] = ht / dy;
    let top_curv = coeffs.volatility(grid.y_at(r - 1)).powi(2) / (2.0 * dy * dy);
    DiffusionBands { sub, diag, sup, sup2: 0.0, sub2: 0.0, top_curv, upwind }
}

/// Solves `(I - dt A) x = rhs` in place for one volume column.
///
/// Gaussian elimination specialized to the band-plus-corners shape; the matrix
/// is strictly diagonally dominant for admissible `dt`, so no pivoting.
fn solve_implicit_column(
    bands: &DiffusionBands,
    dt: f64,
    rhs: &mut [f64],
    dd: &mut [f64],
    uu: &mut [f64],
    level: usize,
) -> Result<()> {
    let r = bands.rows();
    debug_assert!(r >= 3);
    let singular = |l: usize| Error::Numerical {
        level,
        msg: format!("singular implicit system at volume row {l}"),
    };
    let w0 = -dt * bands.sup2;
    dd[0] = 1.0 - dt * bands.diag[0];
    uu[0] = -dt * bands.sup[0];
    if dd[0].abs() < 1e-300 {
        return Err(singular(0));
    }
    // Row 1 absorbs part of row 0's second superdiagonal.
    {
        let m = -dt * bands.sub[1] / dd[0];
        dd[1] = 1.0 - dt * bands.diag[1] - m * uu[0];
        uu[1] = -dt * bands.sup[1] - m * w0;
        rhs[1] -= m * rhs[0];
        if dd[1].abs() < 1e-300 {
            return Err(singular(1));
        }
    }
    for l in 2..r - 1 {
        let m = -dt * bands.sub[l] / dd[l - 1];
        dd[l] = 1.0 - dt * bands.diag[l] - m * uu[l - 1];
        uu[l] = -dt * bands.sup[l];
        rhs[l] -= m * rhs[l - 1];
        if dd[l].abs() < 1e-300 {
            return Err(singular(l));
        }
    }
    // Last row: eliminate the second subdiagonal against row r-3, then the
    // subdiagonal against row r-2.
    {
        let l = r - 1;
        let mut sub_entry = -dt * bands.sub[l];
        let mut diag_entry = 1.0 - dt * bands.diag[l];
        let m2 = -dt * bands.sub2 / dd[r - 3];
        sub_entry -= m2 * uu[r - 3];
        if r == 3 {
            // Row 0's own corner entry sits in this column.
            diag_entry -= m2 * w0;
        }
        rhs[l] -= m2 * rhs[r - 3];
        let m3 = sub_entry / dd[r - 2];
        dd[l] = diag_entry - m3 * uu[r - 2];
        rhs[l] -= m3 * rhs[r - 2];
        if dd[l].abs() < 1e-300 {
            return Err(singular(l));
        }
    }
    rhs[r - 1] /= dd[r - 1];
    rhs[r - 2] = (rhs[r - 2] - uu[r - 2] * rhs[r - 1]) / dd[r - 2];
    for l in (1..r - 2).rev() {
        rhs[l] = (rhs[l] - uu[l] * rhs[l + 1]) / dd[l];
    }
    rhs[0] = (rhs[0] - uu[0] * rhs[1] - w0 * rhs[2]) / dd[0];
    Ok(())
}

/// Terminal condition: the cost of buying the full remaining inventory in one
/// block, `Phi_i(y + x_bar - x) - Phi_i(y)`, per regime.
pub fn terminal_values(grid: &SolverGrid, shapes: &[LobShape]) -> Result<Vec<f64>> {
    let nodes = grid.nodes_per_slice();
    let mut out = vec![0.0; shapes.len() * nodes];
    for (i, shape) in shapes.iter().enumerate() {
        for k in 0..=grid.n_x {
            let remaining = grid.x_bar - grid.x_at(k);
            for l in 0..=grid.n_y {
                let y = grid.y_at(l);
                out[i * nodes + k * (grid.n_y + 1) + l] = shape.block_cost(y, remaining.max(0.0))?;
            }
        }
    }
    Ok(out)
}

/// Completion costs at post-jump volumes that escape the mesh.
///
/// A jump from a high volume row can land beyond `y_bar`, where no grid value
/// exists. The value there is estimated in completion-anchored form:
/// `Phi_i(y + rem) - Phi_i(y)` evaluated at the off-grid target, minus the
/// wait margin (completion cost minus value) frozen at its top-row level.
/// The completion cost is exact at any volume and carries all of the book's
/// convexity; only the small, slowly varying margin is approximated. Linear
/// continuation of the value itself undervalues convex columns enough to
/// anchor spurious buy bands to the top edge.
pub struct OvershootTable {
    /// Completion cost at the off-grid target per `(regime, x, row, node)`;
    /// NAN outside the overshoot set.
    bound: Vec<f64>,
    /// Completion cost at the top row per `(regime, x)`.
    top: Vec<f64>,
    cols: usize,
    rows: usize,
    n_z: usize,
}

impl OvershootTable {
    #[inline]
    pub fn bound_at(&self, i: usize, k: usize, l: usize, p: usize) -> f64 {
        self.bound[((i * self.cols + k) * self.rows + l) * self.n_z + p]
    }

    #[inline]
    pub fn top(&self, i: usize, k: usize) -> f64 {
        self.top[i * self.cols + k]
    }
}

/// Tabulates [`OvershootTable`] for every overshooting `(row, node)` pair.
pub fn build_overshoot_table(
    grid: &SolverGrid,
    shapes: &[LobShape],
    shift: &JumpShiftTable,
) -> Result<OvershootTable> {
    let rows = grid.n_y + 1;
    let n_z = shift.n_z;
    let cols = grid.n_x + 1;
    let m = shapes.len();
    let mut bound = vec![f64::NAN; m * cols * rows * n_z];
    let mut top = vec![0.0; m * cols];
    for (i, shape) in shapes.iter().enumerate() {
        for k in 0..cols {
            let rem = (grid.x_bar - grid.x_at(k)).max(0.0);
            top[i * cols + k] = shape.block_cost(grid.y_at(grid.n_y), rem)?;
            for l in 0..rows {
                for p in 0..n_z {
                    let (j, a) = shift.entry(l, p);
                    if a > 1.0 {
                        let target = (j as f64 + a) * grid.dy;
                        bound[((i * cols + k) * rows + l) * n_z + p] =
                            shape.block_cost(target, rem)?;
                    }
                }
            }
        }
    }
    Ok(OvershootTable { bound, top, cols, rows, n_z })
}

/// One implicit-diffusion / explicit-jump backward step for all regimes.
///
/// `known` is the later time level and `new` receives the earlier one. The
/// jump integral and regime coupling are evaluated on `lagged` — pass `known`
/// for a plain lagged step, or a predicted earlier level to correct the lag
/// (see [`solve`]). Overshooting jumps read `over` instead of the mesh, and
/// the top row regains its diffusion term explicitly (`bands.top_curv`).
/// The inventory boundary `x = x_bar` is held at zero.
#[allow(clippy::too_many_arguments)]
pub fn pde_step(
    grid: &SolverGrid,
    m: usize,
    bands: &DiffusionBands,
    quad: &QuadratureTable,
    shift: &JumpShiftTable,
    over: &OvershootTable,
    q_matrix: &Generator,
    lambda: f64,
    dt: f64,
    known: &[f64],
    lagged: &[f64],
    new: &mut [f64],
    level: usize,
) -> Result<()> {
    let rows = grid.n_y + 1;
    let nodes = grid.nodes_per_slice();
    debug_assert_eq!(known.len(), m * nodes);
    debug_assert_eq!(lagged.len(), m * nodes);
    debug_assert_eq!(new.len(), m * nodes);
    let n_z = quad.nodes.len();
    let slices: Vec<(usize, usize)> =
        (0..m).flat_map(|i| (0..=grid.n_x).map(move |k| (i, k))).collect();
    let results: Result<Vec<()>> = new
        .par_chunks_mut(rows)
        .zip(slices.par_iter())
        .map(|(new_col, &(i, k))| {
            if k == grid.n_x {
                new_col.fill(0.0);
                return Ok(());
            }
            let base = &known[i * nodes + k * rows..i * nodes + k * rows + rows];
            let col = &lagged[i * nodes + k * rows..i * nodes + k * rows + rows];
            // Wait margin at the top row, frozen for off-grid jump targets.
            let margin = (over.top(i, k) - col[rows - 1]).max(0.0);
            for l in 0..rows {
                let mut expl = 0.0;
                if lambda > 0.0 {
                    let mut integral = 0.0;
                    for p in 0..n_z {
                        let (j, a) = shift.entry(l, p);
                        let est = if a > 1.0 {
                            over.bound_at(i, k, l, p) - margin
                        } else {
                            (1.0 - a) * col[j] + a * col[j + 1]
                        };
                        integral += quad.weights[p] * est;
                    }
                    expl += lambda * (integral - col[l]);
                }
                if l == rows - 1 && l >= 2 {
                    expl += bands.top_curv * (col[l - 2] - 2.0 * col[l - 1] + col[l]);
                }
                if m > 1 {
                    let vi = col[l];
                    let row = &q_matrix[i];
                    let mut coupling = 0.0;
                    for (j, &q_ij) in row.iter().enumerate() {
                        if j != i && q_ij != 0.0 {
                            coupling += q_ij * (lagged[j * nodes + k * rows + l] - vi);
                        }
                    }
                    expl += coupling;
                }
                new_col[l] = base[l] + dt * expl;
            }
            let mut dd = vec![0.0; rows];
            let mut uu = vec![0.0; rows];
            solve_implicit_column(bands, dt, new_col, &mut dd, &mut uu, level)
        })
        .collect();
    results?;
    Ok(())
}

/// Applies the purchase obstacle: each node is relaxed against its upper
/// diagonal neighbor at marginal cost `Phi_i(y + dy) - Phi_i(y)`, and against
/// completing the whole remaining inventory in one block. A single backward
/// sweep in `x` realizes the full diagonal infimum because the costs
/// telescope. Partial blocks may not leave the volume domain, but the
/// completion block may: once `x = x_bar` the value is zero at any
/// displacement, so its cost `Phi_i(y + rem) - Phi_i(y)` needs no off-grid
/// continuation value. `completion` is that cost table (the terminal level);
/// `delta` records how much each node was lowered.
pub fn impulse_update(
    grid: &SolverGrid,
    m: usize,
    marginal_cost: &[Vec<f64>],
    completion: &[f64],
    level: &mut [f64],
    delta: &mut [f64],
) {
    let rows = grid.n_y + 1;
    let nodes = grid.nodes_per_slice();
    delta.fill(0.0);
    for i in 0..m {
        let base = i * nodes;
        let mc = &marginal_cost[i];
        for k in (0..grid.n_x).rev() {
            for l in 0..=grid.n_y {
                let mut cand = completion[base + k * rows + l];
                if l < grid.n_y {
                    let diag = level[base + (k + 1) * rows + l + 1] + mc[l];
                    if diag < cand {
                        cand = diag;
                    }
                }
                let cur = level[base + k * rows + l];
                if cand < cur {
                    level[base + k * rows + l] = cand;
                    delta[base + k * rows + l] = cur - cand;
                }
            }
        }
    }
}

/// Buy/wait decision from the obstacle's clamp pressure: the node exercises
/// when the pressure strictly exceeds the margin; ties go to continuation.
#[inline]
pub fn region_from_pressure(pressure: f64, margin: f64) -> bool {
    pressure > margin
}

/// Classifies every node of the freshly computed level.
///
/// The evidence is the clamp pressure `delta / dt`: how fast the purchase
/// obstacle pushes the node's value down, per unit time. Nodes the obstacle
/// left alone have exactly zero pressure. Nodes pinned to the obstacle
/// split in two: across indifference plateaus — where completing now and
/// continuing cost the same to within the scheme's resolution — the
/// pressure stays under half the margin, while inside genuine buy bands it
/// exceeds the margin severalfold. (Signed equation residuals cannot draw
/// this line: at a pinned node they mix in the clamping of its neighbours,
/// and deep inside a pinned region they can even flip sign; the clamp
/// amount is per-node and sign-free.)
///
/// Each column is swept from `y = 0` upward with two thresholds. A buy run
/// opens only once the pressure clears one-and-a-half margins and stays
/// open while it exceeds half a margin. At a band edge the pressure crosses
/// the margin smoothly over a few nodes, so a single threshold would let
/// sub-noise wiggles flip isolated nodes right at the crossing; the spread
/// between the two thresholds absorbs those wiggles without moving the edge
/// by more than a node. Genuinely separate bands — e.g. the near-deadline
/// band that reopens above a wait valley when a regime switch threatens a
/// thinner book — still open, because their pressure exceeds the entry
/// threshold severalfold. The inventory boundary `x = x_bar` always waits.
#[allow(clippy::too_many_arguments)]
pub fn classify_regions(
    grid: &SolverGrid,
    m: usize,
    delta: &[f64],
    dt: f64,
    value_scale: f64,
    mask: &mut [bool],
) {
    let rows = grid.n_y + 1;
    let nodes = grid.nodes_per_slice();
    let horizon = grid.t_at(grid.n_t).max(f64::MIN_POSITIVE);
    let tol = REGION_TIE_EPS * value_scale.max(1.0) / horizon;
    let slices: Vec<(usize, usize)> =
        (0..m).flat_map(|i| (0..=grid.n_x).map(move |k| (i, k))).collect();
    mask.par_chunks_mut(rows)
        .zip(slices.par_iter())
        .for_each(|(mask_col, &(i, k))| {
            if k == grid.n_x {
                mask_col.fill(false);
                return;
            }
            let base = i * nodes + k * rows;
            let mut in_run = false;
            for l in 0..rows {
                let pressure = delta[base + l] / dt;
                let margin = if in_run { 0.5 * tol } else { 1.5 * tol };
                in_run = region_from_pressure(pressure, margin);
                mask_col[l] = in_run;
            }
        });
}

/// Scheme options beyond the grid itself.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// One-sided drift differencing (use for degenerate diffusion).
    pub upwind: bool,
    /// Quadrature nodes for the jump integral.
    pub n_z: usize,
    /// Mass of the jump-size law allowed past the truncation point.
    pub tail_eps: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { upwind: false, n_z: 64, tail_eps: 1e-8 }
    }
}

/// Dense value surface with buy/wait masks for every `(level, regime, x, y)`.
pub struct ValueSurface {
    pub grid: SolverGrid,
    pub m: usize,
    values: Vec<f64>,
    exercise: Vec<bool>,
}

impl ValueSurface {
    #[inline]
    fn node_index(&self, n: usize, i: usize, k: usize, l: usize) -> usize {
        ((n * self.m + i) * (self.grid.n_x + 1) + k) * (self.grid.n_y + 1) + l
    }

    #[inline]
    pub fn value(&self, n: usize, i: usize, k: usize, l: usize) -> f64 {
        self.values[self.node_index(n, i, k, l)]
    }

    #[inline]
    pub fn is_exercise(&self, n: usize, i: usize, k: usize, l: usize) -> bool {
        self.exercise[self.node_index(n, i, k, l)]
    }

    #[cfg(test)]
    pub(crate) fn set_exercise_for_test(&mut self, n: usize, i: usize, k: usize, l: usize, e: bool) {
        let idx = self.node_index(n, i, k, l);
        self.exercise[idx] = e;
    }

    /// All values of one time level, regimes concatenated.
    pub fn level_values(&self, n: usize) -> &[f64] {
        let len = self.m * self.grid.nodes_per_slice();
        &self.values[n * len..(n + 1) * len]
    }

    /// Largest value on the terminal level; the natural cost scale of the run.
    pub fn terminal_scale(&self) -> f64 {
        self.level_values(self.grid.n_t).iter().cloned().fold(0.0, f64::max)
    }

    /// Writes the full surface as CSV (`time_index,t,regime,x,y,value,region`),
    /// levels outermost, regimes 1-based, region `E` (buy) or `C` (wait).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::with_capacity(1 << 20, file);
        writeln!(w, "{SURFACE_CSV_HEADER}")?;
        for n in 0..=self.grid.n_t {
            let t = self.grid.t_at(n);
            for i in 0..self.m {
                for k in 0..=self.grid.n_x {
                    let x = self.grid.x_at(k);
                    for l in 0..=self.grid.n_y {
                        let y = self.grid.y_at(l);
                        let v = self.value(n, i, k, l);
                        let r = if self.is_exercise(n, i, k, l) { 'E' } else { 'C' };
                        writeln!(w, "{},{},{},{},{},{},{}", n, t, i + 1, x, y, v, r)?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One parsed row of a surface CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceRow {
    pub time_index: usize,
    pub t: f64,
    pub regime: usize,
    pub x: f64,
    pub y: f64,
    pub value: f64,
    pub exercise: bool,
}

/// Reads a surface CSV produced by [`ValueSurface::write_csv`].
pub fn read_surface_csv(path: &Path) -> Result<Vec<SurfaceRow>> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Geometry(format!("{}: empty surface file", path.display())))??;
    if header.trim() != SURFACE_CSV_HEADER {
        return Err(Error::Geometry(format!(
            "{}: unexpected surface header {header:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Geometry(format!(
                "{}: row {} has {} fields, expected 7",
                path.display(),
                idx + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| {
                Error::Geometry(format!("{}: row {}: bad {what} {s:?}", path.display(), idx + 2))
            })
        };
        let exercise = match fields[6] {
            "E" => true,
            "C" => false,
            other => {
                return Err(Error::Geometry(format!(
                    "{}: row {}: bad region {other:?}",
                    path.display(),
                    idx + 2
                )))
            }
        };
        rows.push(SurfaceRow {
            time_index: fields[0].parse().map_err(|_| {
                Error::Geometry(format!("{}: row {}: bad time_index", path.display(), idx + 2))
            })?,
            t: parse_f(fields[1], "t")?,
            regime: fields[2].parse().map_err(|_| {
                Error::Geometry(format!("{}: row {}: bad regime", path.display(), idx + 2))
            })?,
            x: parse_f(fields[3], "x")?,
            y: parse_f(fields[4], "y")?,
            value: parse_f(fields[5], "value")?,
            exercise,
        });
    }
    Ok(rows)
}

/// Solves the full backward problem and returns the dense surface.
pub fn solve(model: &ModelSpec, grid: &SolverGrid, opts: &SolverOptions) -> Result<ValueSurface> {
    model.validate()?;
    if grid.n_y < 2 {
        return Err(Error::Config("grid.n_y must be at least 2 for the volume stencil".into()));
    }
    let m = model.regimes.m;
    let rows = grid.n_y + 1;
    let nodes = grid.nodes_per_slice();
    let bands = assemble_diffusion(grid, &model.dynamics, opts.upwind);
    let quad = build_quadrature(model.dynamics.eta, opts.n_z, opts.tail_eps)?;
    let shift = build_jump_shift_table(grid, &quad, &model.dynamics)?;
    let over = build_overshoot_table(grid, &model.shapes, &shift)?;
    let mut marginal_cost = Vec::with_capacity(m);
    for shape in &model.shapes {
        let phi: Result<Vec<f64>> = (0..rows).map(|l| shape.impact_cost(grid.y_at(l))).collect();
        let phi = phi?;
        let mc: Vec<f64> = (0..grid.n_y).map(|l| phi[l + 1] - phi[l]).collect();
        marginal_cost.push(mc);
    }

    let level_len = m * nodes;
    let mut values = vec![0.0; (grid.n_t + 1) * level_len];
    let mut exercise = vec![false; (grid.n_t + 1) * level_len];

    let terminal = terminal_values(grid, &model.shapes)?;
    values[grid.n_t * level_len..].copy_from_slice(&terminal);
    let mut value_scale = 0.0f64;
    for shape in &model.shapes {
        value_scale = value_scale.max(shape.block_cost(0.0, grid.x_bar)?);
    }
    // Terminal level: the whole remaining inventory is bought, so every node
    // with inventory left is marked as buying.
    for i in 0..m {
        for k in 0..grid.n_x {
            let base = grid.n_t * level_len + i * nodes + k * rows;
            exercise[base..base + rows].fill(true);
        }
    }

    let mut delta = vec![0.0; level_len];
    let mut predicted = vec![0.0; level_len];
    for n in (0..grid.n_t).rev() {
        let (head, tail) = values.split_at_mut((n + 1) * level_len);
        let known = &tail[..level_len];
        let new = &mut head[n * level_len..];
        let t_known = grid.t_at(n + 1);
        let lambda = model.regimes.intensity.at(t_known);
        let q_matrix = model.regimes.generator.at(t_known);
        // Predictor: jump and coupling terms lagged to the known level.
        pde_step(
            grid, m, &bands, &quad, &shift, &over, q_matrix, lambda, grid.dt, known, known, new, n,
        )?;
        impulse_update(grid, m, &marginal_cost, &terminal, new, &mut delta);
        // Corrector: re-evaluate the lagged terms on the predicted level. The
        // plain lagged step misprices the regime exchange by O(dt * step
        // change) — enough to flip near-tie nodes by the deadline, where the
        // exchanged values move fastest.
        predicted.copy_from_slice(new);
        pde_step(
            grid, m, &bands, &quad, &shift, &over, q_matrix, lambda, grid.dt, known, &predicted,
            new, n,
        )?;
        impulse_update(grid, m, &marginal_cost, &terminal, new, &mut delta);
        if let Some(bad) = new.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                level: n,
                msg: format!("non-finite value at node offset {bad}"),
            });
        }
        classify_regions(
            grid,
            m,
            &delta,
            grid.dt,
            value_scale,
            &mut exercise[n * level_len..(n + 1) * level_len],
        );
    }
    Ok(ValueSurface { grid: *grid, m, values, exercise })
}
