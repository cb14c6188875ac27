//! Exercise-boundary extraction and structural checks of the buy region.
//!
//! For each time level, regime, and inventory column the boundary height
//! `y*` is the largest volume node still classified as a buy; the theory
//! says the buy region is a down-set in the volume variable (buy at `y`
//! implies buy at every smaller volume) and, along `y = 0`, a down-set in
//! inventory. [`downset_report`] lists every node breaking that shape.

use crate::error::{Error, Result};
use crate::grid::SolverGrid;
use crate::solver::ValueSurface;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Column header of the exported boundary table.
pub const BOUNDARY_CSV_HEADER: &str = "time_index,t,regime,x,ystar";

/// Boundary heights `y*(t_n, x_k)` per regime; `None` where the column has
/// no buy node.
pub struct FreeBoundarySurface {
    pub n_t: usize,
    pub m: usize,
    pub n_x: usize,
    /// `ystar[(n * m + i) * (n_x + 1) + k]`, in volume units.
    ystar: Vec<Option<f64>>,
    /// Time and inventory coordinates for export.
    times: Vec<f64>,
    xs: Vec<f64>,
}

impl FreeBoundarySurface {
    #[inline]
    pub fn at(&self, n: usize, i: usize, k: usize) -> Option<f64> {
        self.ystar[(n * self.m + i) * (self.n_x + 1) + k]
    }

    /// Builds a boundary table from an explicit height function; used when
    /// the boundary comes from somewhere other than a solved surface.
    pub fn from_levels(
        grid: &SolverGrid,
        m: usize,
        height: impl Fn(usize, usize, usize) -> Option<f64>,
    ) -> FreeBoundarySurface {
        let mut ystar = Vec::with_capacity((grid.n_t + 1) * m * (grid.n_x + 1));
        for n in 0..=grid.n_t {
            for i in 0..m {
                for k in 0..=grid.n_x {
                    ystar.push(height(n, i, k));
                }
            }
        }
        FreeBoundarySurface {
            n_t: grid.n_t,
            m,
            n_x: grid.n_x,
            ystar,
            times: (0..=grid.n_t).map(|n| grid.t_at(n)).collect(),
            xs: (0..=grid.n_x).map(|k| grid.x_at(k)).collect(),
        }
    }

    /// Writes `time_index,t,regime,x,ystar` rows (regime 1-based, empty
    /// `ystar` where the column never buys).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{BOUNDARY_CSV_HEADER}")?;
        for n in 0..=self.n_t {
            for i in 0..self.m {
                for k in 0..=self.n_x {
                    match self.at(n, i, k) {
                        Some(y) => {
                            writeln!(w, "{},{},{},{},{}", n, self.times[n], i + 1, self.xs[k], y)?
                        }
                        None => {
                            writeln!(w, "{},{},{},{},", n, self.times[n], i + 1, self.xs[k])?
                        }
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// One parsed row of a boundary CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryRow {
    pub time_index: usize,
    pub t: f64,
    pub regime: usize,
    pub x: f64,
    pub ystar: Option<f64>,
}

/// Reads a boundary CSV produced by [`FreeBoundarySurface::write_csv`].
pub fn read_boundary_csv(path: &Path) -> Result<Vec<BoundaryRow>> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Geometry(format!("{}: empty boundary file", path.display())))??;
    if header.trim() != BOUNDARY_CSV_HEADER {
        return Err(Error::Geometry(format!(
            "{}: unexpected boundary header {header:?}",
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
        if fields.len() != 5 {
            return Err(Error::Geometry(format!(
                "{}: row {} has {} fields, expected 5",
                path.display(),
                idx + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| {
            Error::Geometry(format!("{}: row {}: bad {what}", path.display(), idx + 2))
        };
        rows.push(BoundaryRow {
            time_index: fields[0].parse().map_err(|_| bad("time_index"))?,
            t: fields[1].parse().map_err(|_| bad("t"))?,
            regime: fields[2].parse().map_err(|_| bad("regime"))?,
            x: fields[3].parse().map_err(|_| bad("x"))?,
            ystar: if fields[4].is_empty() {
                None
            } else {
                Some(fields[4].parse().map_err(|_| bad("ystar"))?)
            },
        });
    }
    Ok(rows)
}

/// Highest buy node per column, across all levels and regimes.
pub fn extract_boundary(surface: &ValueSurface) -> FreeBoundarySurface {
    let grid = &surface.grid;
    let mut ystar = Vec::with_capacity((grid.n_t + 1) * surface.m * (grid.n_x + 1));
    for n in 0..=grid.n_t {
        for i in 0..surface.m {
            for k in 0..=grid.n_x {
                let mut top = None;
                for l in 0..=grid.n_y {
                    if surface.is_exercise(n, i, k, l) {
                        top = Some(l);
                    }
                }
                ystar.push(top.map(|l| grid.y_at(l)));
            }
        }
    }
    FreeBoundarySurface {
        n_t: grid.n_t,
        m: surface.m,
        n_x: grid.n_x,
        ystar,
        times: (0..=grid.n_t).map(|n| grid.t_at(n)).collect(),
        xs: (0..=grid.n_x).map(|k| grid.x_at(k)).collect(),
    }
}

/// Which down-set axis a violation breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationAxis {
    /// Buy node with a wait node below it in the same volume column.
    Volume,
    /// Buy node at `y = 0` with a wait node at smaller inventory.
    Inventory,
}

/// A buy node that sits above a wait node along the checked axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DownsetViolation {
    pub level: usize,
    pub regime: usize,
    pub x_index: usize,
    pub y_index: usize,
    pub axis: ViolationAxis,
}

impl fmt::Display for DownsetViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let axis = match self.axis {
            ViolationAxis::Volume => "volume",
            ViolationAxis::Inventory => "inventory",
        };
        write!(
            f,
            "level {} regime {} x {} y {}: buy node above a wait node ({axis} axis)",
            self.level,
            self.regime + 1,
            self.x_index,
            self.y_index
        )
    }
}

/// Lists every buy node with a wait node beneath it: per volume column, and
/// along the inventory axis at `y = 0`.
pub fn downset_report(surface: &ValueSurface) -> Vec<DownsetViolation> {
    let grid = &surface.grid;
    let mut out = Vec::new();
    for n in 0..=grid.n_t {
        for i in 0..surface.m {
            for k in 0..=grid.n_x {
                let mut seen_wait = false;
                for l in 0..=grid.n_y {
                    if surface.is_exercise(n, i, k, l) {
                        if seen_wait {
                            out.push(DownsetViolation {
                                level: n,
                                regime: i,
                                x_index: k,
                                y_index: l,
                                axis: ViolationAxis::Volume,
                            });
                        }
                    } else {
                        seen_wait = true;
                    }
                }
            }
            let mut seen_wait = false;
            for k in 0..=grid.n_x {
                if surface.is_exercise(n, i, k, 0) {
                    if seen_wait {
                        out.push(DownsetViolation {
                            level: n,
                            regime: i,
                            x_index: k,
                            y_index: 0,
                            axis: ViolationAxis::Inventory,
                        });
                    }
                } else {
                    seen_wait = true;
                }
            }
        }
    }
    out
}
