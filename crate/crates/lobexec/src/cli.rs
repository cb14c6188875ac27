//! Configuration file parsing and command dispatch.
//!
//! A run is described by a TOML file with sections for the dynamics, the
//! regime chain, one depth profile per regime, the lattice, the Monte Carlo
//! settings, the cross-check geometry, and the parameter sweep. Every key is
//! optional and defaults to the baseline parameter set (c = 0.5, d = 0.1,
//! e = 0.2, eta = 1, kappa = 0.8, gamma = -1, lambda = 0.5, x_bar = 4,
//! y_bar = 5, horizon 4); unknown keys are rejected. Identical config and
//! seed produce bit-identical artifact files.

use crate::boundary::extract_boundary;
use crate::error::{Error, Result};
use crate::grid::{build_grid, SolverGrid};
use crate::model::{
    GeneratorSchedule, IntensitySchedule, ModelSpec, RegimeModel,
};
use crate::oracle::{compare, solve_oracle, OracleConfig};
use crate::shapes::LobShape;
use crate::simulate::{simulate_execution, ExecutionPolicy};
use crate::solver::{solve, SolverOptions};
use clap::{Parser, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsConfig {
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub eta: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig { c: 0.5, d: 0.1, e: 0.2, eta: 1.0 }
    }
}

/// A scalar that may change at listed times: `0.5` or `[[0.0, 0.5], [2.0, 1.0]]`.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScheduleValue {
    Constant(f64),
    Pieces(Vec<(f64, f64)>),
}

/// A generator matrix that may change at listed times.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum GeneratorValue {
    Constant(Vec<Vec<f64>>),
    Pieces(Vec<(f64, Vec<Vec<f64>>)>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimesConfig {
    pub m: usize,
    pub generator: GeneratorValue,
    pub lambda: ScheduleValue,
}

impl Default for RegimesConfig {
    fn default() -> Self {
        RegimesConfig {
            m: 1,
            generator: GeneratorValue::Constant(vec![vec![0.0]]),
            lambda: ScheduleValue::Constant(0.5),
        }
    }
}

/// One depth profile, tagged by `kind`.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeConfig {
    PowerLaw { kappa: f64, gamma: f64 },
    Block { kappa: f64 },
    Tabulated { knots: Vec<(f64, f64)> },
}

impl ShapeConfig {
    fn to_shape(&self) -> LobShape {
        match self {
            ShapeConfig::PowerLaw { kappa, gamma } => {
                LobShape::PowerLaw { kappa: *kappa, gamma: *gamma }
            }
            ShapeConfig::Block { kappa } => LobShape::Block { kappa: *kappa },
            ShapeConfig::Tabulated { knots } => LobShape::Tabulated { knots: knots.clone() },
        }
    }
}

fn default_shapes() -> Vec<ShapeConfig> {
    vec![ShapeConfig::PowerLaw { kappa: 0.8, gamma: -1.0 }]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub n_x: usize,
    pub n_y: usize,
    /// Omitted: smallest count satisfying the parabolic stability bound.
    pub n_t: Option<usize>,
    pub x_bar: f64,
    pub y_bar: f64,
    pub t_horizon: f64,
    pub cfl_c: f64,
    pub n_z: usize,
    pub tail_eps: f64,
    pub upwind: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n_x: 80,
            n_y: 100,
            n_t: None,
            x_bar: 4.0,
            y_bar: 5.0,
            t_horizon: 4.0,
            cfl_c: 1.0,
            n_z: 64,
            tail_eps: 1e-8,
            upwind: false,
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<SolverGrid> {
        let n_t = match self.n_t {
            Some(n) => n,
            None => {
                let dx = self.x_bar / self.n_x.max(1) as f64;
                let dy = self.y_bar / self.n_y.max(1) as f64;
                let bound = self.cfl_c * (dx * dx).min(dy * dy);
                if !(bound > 0.0) {
                    return Err(Error::Config(
                        "grid.cfl_c and the mesh widths must be positive".into(),
                    ));
                }
                (self.t_horizon / bound).ceil() as usize
            }
        };
        build_grid(self.n_x, self.n_y, n_t, self.x_bar, self.y_bar, self.t_horizon, self.cfl_c)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions { upwind: self.upwind, n_z: self.n_z, tail_eps: self.tail_eps }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub n_paths: usize,
    /// Omitted: the solver's time step.
    pub dt_sim: Option<f64>,
    pub t0: f64,
    /// 1-based starting regime.
    pub i0: usize,
    pub x0: f64,
    pub y0: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { n_paths: 10_000, dt_sim: None, t0: 0.0, i0: 1, x0: 0.0, y0: 0.5 }
    }
}

/// Geometry of the small-grid cross-check; the domain bars come from `[grid]`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub n_x: usize,
    pub n_y: usize,
    pub n_t: usize,
    pub n_z: usize,
    pub tail_eps: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { n_x: 8, n_y: 10, n_t: 40, n_z: 64, tail_eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Lambda,
    C,
    D,
    Gamma2,
    Q0,
    Q2,
}

impl SweepParameter {
    fn name(&self) -> &'static str {
        match self {
            SweepParameter::Lambda => "lambda",
            SweepParameter::C => "c",
            SweepParameter::D => "d",
            SweepParameter::Gamma2 => "gamma2",
            SweepParameter::Q0 => "q0",
            SweepParameter::Q2 => "q2",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { parameter: SweepParameter::Lambda, values: vec![0.25, 0.5, 1.0] }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dynamics: DynamicsConfig,
    pub regimes: RegimesConfig,
    pub shapes: Vec<ShapeConfig>,
    pub grid: GridConfig,
    pub simulate: SimulateConfig,
    pub oracle: OracleSection,
    pub sweep: SweepConfig,
    pub output_dir: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dynamics: DynamicsConfig::default(),
            regimes: RegimesConfig::default(),
            shapes: default_shapes(),
            grid: GridConfig::default(),
            simulate: SimulateConfig::default(),
            oracle: OracleSection::default(),
            sweep: SweepConfig::default(),
            output_dir: "out".into(),
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn model(&self) -> Result<ModelSpec> {
        let generator = match &self.regimes.generator {
            GeneratorValue::Constant(q) => GeneratorSchedule::Constant(q.clone()),
            GeneratorValue::Pieces(p) => GeneratorSchedule::Piecewise(p.clone()),
        };
        let intensity = match &self.regimes.lambda {
            ScheduleValue::Constant(v) => IntensitySchedule::Constant(*v),
            ScheduleValue::Pieces(p) => IntensitySchedule::Piecewise(p.clone()),
        };
        let model = ModelSpec {
            dynamics: crate::model::CoefficientSpec {
                c: self.dynamics.c,
                d: self.dynamics.d,
                e: self.dynamics.e,
                eta: self.dynamics.eta,
            },
            regimes: RegimeModel { m: self.regimes.m, generator, intensity },
            shapes: self.shapes.iter().map(ShapeConfig::to_shape).collect(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig {
            n_x: self.oracle.n_x,
            n_y: self.oracle.n_y,
            n_t: self.oracle.n_t,
            x_bar: self.grid.x_bar,
            y_bar: self.grid.y_bar,
            t_horizon: self.grid.t_horizon,
            n_z: self.oracle.n_z,
            tail_eps: self.oracle.tail_eps,
        }
    }
}

/// Replaces one scalar of the model for a sweep point.
pub fn apply_sweep(model: &ModelSpec, parameter: SweepParameter, value: f64) -> Result<ModelSpec> {
    let mut out = model.clone();
    match parameter {
        SweepParameter::Lambda => out.regimes.intensity = IntensitySchedule::Constant(value),
        SweepParameter::C => out.dynamics.c = value,
        SweepParameter::D => out.dynamics.d = value,
        SweepParameter::Gamma2 => {
            let shape = out.shapes.get_mut(1).ok_or_else(|| {
                Error::Config("sweep.parameter = gamma2 needs at least two regimes".into())
            })?;
            match shape {
                LobShape::PowerLaw { gamma, .. } => *gamma = value,
                _ => {
                    return Err(Error::Config(
                        "sweep.parameter = gamma2 needs a power_law shape in regime 2".into(),
                    ))
                }
            }
        }
        SweepParameter::Q0 => {
            if out.regimes.m != 2 {
                return Err(Error::Config(
                    "sweep.parameter = q0 needs exactly two regimes".into(),
                ));
            }
            out.regimes.generator =
                GeneratorSchedule::Constant(vec![vec![-value, value], vec![value, -value]]);
        }
        SweepParameter::Q2 => {
            if out.regimes.m != 2 {
                return Err(Error::Config(
                    "sweep.parameter = q2 needs exactly two regimes".into(),
                ));
            }
            let q1 = match &out.regimes.generator {
                GeneratorSchedule::Constant(q) if q.len() == 2 => q[0][1],
                _ => {
                    return Err(Error::Config(
                        "sweep.parameter = q2 needs a constant two-regime generator".into(),
                    ))
                }
            };
            out.regimes.generator =
                GeneratorSchedule::Constant(vec![vec![-q1, q1], vec![value, -value]]);
        }
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CommandKind {
    /// Full surface + boundary export.
    Solve,
    /// Boundary export only.
    Boundary,
    /// Monte Carlo execution of the solved policy.
    Simulate,
    /// Deviation report against the small-grid chain solver.
    OracleCompare,
    /// One boundary file per value of the swept parameter.
    Sweep,
}

#[derive(Debug, Parser)]
#[command(name = "lobexec", about = "Optimal execution scheduling against a resilient LOB")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: the config's output_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub command: CommandKind,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    seed: u64,
    config_digest: &'a str,
    grid: SolverGrid,
    n_z: usize,
    artifacts: Vec<String>,
}

#[derive(Serialize)]
struct StatsOut<'a> {
    mean: f64,
    stderr: f64,
    n_paths: usize,
    seed: u64,
    config_digest: &'a str,
}

#[derive(Serialize)]
struct DeviationOut<'a> {
    max_abs: f64,
    p50: f64,
    p90: f64,
    p99: f64,
    n_nodes: usize,
    terminal_scale: f64,
    config_digest: &'a str,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn command_name(kind: CommandKind) -> &'static str {
    match kind {
        CommandKind::Solve => "solve",
        CommandKind::Boundary => "boundary",
        CommandKind::Simulate => "simulate",
        CommandKind::OracleCompare => "oracle-compare",
        CommandKind::Sweep => "sweep",
    }
}

/// Runs one command end to end; artifacts land in `out_dir`.
pub fn execute(
    cfg: &RunConfig,
    command: CommandKind,
    out_dir: &Path,
    seed: u64,
    config_digest: &str,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let model = cfg.model()?;
    let mut artifacts = Vec::new();
    let meta_grid: (SolverGrid, usize);

    match command {
        CommandKind::Solve | CommandKind::Boundary => {
            let grid = cfg.grid.build()?;
            let surface = solve(&model, &grid, &cfg.grid.solver_options())?;
            if command == CommandKind::Solve {
                surface.write_csv(&out_dir.join("surface.csv"))?;
                artifacts.push("surface.csv".to_string());
            }
            extract_boundary(&surface).write_csv(&out_dir.join("boundary.csv"))?;
            artifacts.push("boundary.csv".to_string());
            meta_grid = (grid, cfg.grid.n_z);
        }
        CommandKind::Simulate => {
            let grid = cfg.grid.build()?;
            let surface = solve(&model, &grid, &cfg.grid.solver_options())?;
            let boundary = extract_boundary(&surface);
            let policy = ExecutionPolicy::new(&boundary, grid)?;
            let sim = &cfg.simulate;
            if sim.i0 == 0 {
                return Err(Error::Config("simulate.i0 is 1-based; use 1 for the first regime".into()));
            }
            let stats = simulate_execution(
                &policy,
                &model,
                sim.t0,
                sim.i0 - 1,
                sim.x0,
                sim.y0,
                sim.n_paths,
                sim.dt_sim.unwrap_or(grid.dt),
                seed,
            )?;
            write_json(
                &out_dir.join("stats.json"),
                &StatsOut {
                    mean: stats.mean,
                    stderr: stats.stderr,
                    n_paths: stats.n_paths,
                    seed: stats.seed,
                    config_digest,
                },
            )?;
            artifacts.push("stats.json".to_string());
            meta_grid = (grid, cfg.grid.n_z);
        }
        CommandKind::OracleCompare => {
            let oc = cfg.oracle_config();
            let chain = solve_oracle(&model, &oc)?;
            let grid = build_grid(
                oc.n_x,
                oc.n_y,
                oc.n_t,
                oc.x_bar,
                oc.y_bar,
                oc.t_horizon,
                cfg.grid.cfl_c,
            )?;
            let opts = SolverOptions {
                upwind: cfg.grid.upwind,
                n_z: oc.n_z,
                tail_eps: oc.tail_eps,
            };
            let surface = solve(&model, &grid, &opts)?;
            let report = compare(&chain, &surface)?;
            write_json(
                &out_dir.join("deviation.json"),
                &DeviationOut {
                    max_abs: report.max_abs,
                    p50: report.p50,
                    p90: report.p90,
                    p99: report.p99,
                    n_nodes: report.n_nodes,
                    terminal_scale: surface.terminal_scale(),
                    config_digest,
                },
            )?;
            artifacts.push("deviation.json".to_string());
            meta_grid = (grid, oc.n_z);
        }
        CommandKind::Sweep => {
            if cfg.sweep.values.is_empty() {
                return Err(Error::Config("sweep.values must not be empty".into()));
            }
            let grid = cfg.grid.build()?;
            let opts = cfg.grid.solver_options();
            let files: Result<Vec<String>> = cfg
                .sweep
                .values
                .par_iter()
                .map(|&v| {
                    let point = apply_sweep(&model, cfg.sweep.parameter, v)?;
                    let surface = solve(&point, &grid, &opts)?;
                    let name = format!("boundary_{}_{v}.csv", cfg.sweep.parameter.name());
                    extract_boundary(&surface).write_csv(&out_dir.join(&name))?;
                    Ok(name)
                })
                .collect();
            artifacts = files?;
            meta_grid = (grid, cfg.grid.n_z);
        }
    }

    let (grid, n_z) = meta_grid;
    write_json(
        &out_dir.join("run_meta.json"),
        &RunMeta {
            command: command_name(command),
            seed,
            config_digest,
            grid,
            n_z,
            artifacts,
        },
    )?;
    Ok(())
}

/// Entry point used by the binary: parses flags, loads the config, runs the
/// command, and maps failures to exit codes (2 configuration, 3 numerical).
pub fn run() -> i32 {
    let cli = Cli::parse();
    match run_cli(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_cli(cli: &Cli) -> Result<()> {
    let bytes = std::fs::read(&cli.config).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", cli.config.display()))
    })?;
    let digest = hex_digest(&bytes);
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Config(format!("{} is not UTF-8", cli.config.display())))?;
    let cfg = RunConfig::parse(&text)?;
    let out_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let seed = cli.seed.unwrap_or(cfg.seed);
    execute(&cfg, cli.command, &out_dir, seed, &digest)
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_yields_baseline_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.dynamics.c, 0.5);
        assert_eq!(cfg.dynamics.eta, 1.0);
        assert_eq!(cfg.regimes.m, 1);
        assert_eq!(cfg.grid.n_x, 80);
        assert_eq!(cfg.grid.n_y, 100);
        assert_eq!(cfg.grid.n_t, None);
        assert_eq!(cfg.seed, 42);
        let grid = cfg.grid.build().unwrap();
        // CFL-derived level count at the default mesh: 4 / 0.05^2.
        assert_eq!(grid.n_t, 1600);
        let model = cfg.model().unwrap();
        assert_eq!(model.shapes.len(), 1);
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let err = RunConfig::parse("[dynamics]\nresilience = 0.5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("resilience"), "message should name the key: {msg}");
        let err = RunConfig::parse("wibble = 3\n").unwrap_err();
        assert!(err.to_string().contains("wibble"));
    }

    #[test]
    fn two_regime_config_round_trips_schedules() {
        let text = r#"
            seed = 7
            [dynamics]
            c = 0.4
            [regimes]
            m = 2
            generator = [[-0.2, 0.2], [0.3, -0.3]]
            lambda = [[0.0, 0.5], [2.0, 1.0]]
            [[shapes]]
            kind = "power_law"
            kappa = 0.8
            gamma = 0.0
            [[shapes]]
            kind = "power_law"
            kappa = 0.8
            gamma = 0.5
        "#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 7);
        let model = cfg.model().unwrap();
        assert_eq!(model.regimes.m, 2);
        assert_eq!(model.regimes.intensity.at(3.0), 1.0);
        assert_eq!(model.regimes.generator.at(0.0)[1][0], 0.3);
        assert!(matches!(model.shapes[1], LobShape::PowerLaw { gamma, .. } if gamma == 0.5));
    }

    #[test]
    fn shape_count_must_match_regime_count() {
        let text = "[regimes]\nm = 2\ngenerator = [[-0.1, 0.1], [0.1, -0.1]]\n";
        let cfg = RunConfig::parse(text).unwrap();
        let err = cfg.model().unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err:?}");
    }

    #[test]
    fn sweep_patches_replace_one_scalar() {
        let text = r#"
            [regimes]
            m = 2
            generator = [[-0.2, 0.2], [0.2, -0.2]]
            [[shapes]]
            kind = "power_law"
            kappa = 0.8
            gamma = 0.0
            [[shapes]]
            kind = "power_law"
            kappa = 0.8
            gamma = 0.25
        "#;
        let model = RunConfig::parse(text).unwrap().model().unwrap();
        let swept = apply_sweep(&model, SweepParameter::Gamma2, 0.5).unwrap();
        assert!(matches!(swept.shapes[1], LobShape::PowerLaw { gamma, .. } if gamma == 0.5));
        assert!(matches!(swept.shapes[0], LobShape::PowerLaw { gamma, .. } if gamma == 0.0));

        let swept = apply_sweep(&model, SweepParameter::Q2, 0.4).unwrap();
        match &swept.regimes.generator {
            GeneratorSchedule::Constant(q) => {
                assert_eq!(q[0], vec![-0.2, 0.2]);
                assert_eq!(q[1], vec![0.4, -0.4]);
            }
            _ => panic!("expected constant generator"),
        }

        let swept = apply_sweep(&model, SweepParameter::Lambda, 1.0).unwrap();
        assert_eq!(swept.regimes.intensity.at(0.0), 1.0);

        let single = RunConfig::parse("").unwrap().model().unwrap();
        assert!(apply_sweep(&single, SweepParameter::Q0, 0.1).is_err());
    }

    #[test]
    fn digest_is_stable_hex() {
        let d = hex_digest(b"abc");
        assert_eq!(d, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
