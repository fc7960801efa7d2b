//! Configuration-driven experiment harness.
//!
//! A flat `key = value` text file selects one of five case studies and pins
//! every knob: reference-solver settings, dataset grids, network shape,
//! optimizer settings, replicate counts, and seeds. Each run of a case
//! produces a fully resolved copy of its configuration, cached solver fields,
//! train/test/collocation CSVs, per-run checkpoints and convergence logs, a
//! metrics table, and a quartile summary — everything needed to reproduce or
//! re-plot the run from the output directory alone.
//!
//! Replicates and strategy variants may execute on a thread pool; results are
//! merged single-threaded in a fixed canonical order, so output files are
//! byte-identical across reruns at any thread count.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{
    add_noise, make_collocation_set, make_training_set, read_csv, subsample, write_csv, Dataset,
    DatasetError,
};
use crate::network::{init_xavier, save_checkpoint, NetworkError, NetworkSpec, ParameterSet};
use crate::physics::LidProfile;
use crate::solver::{solve_cavity_with_stats, FlowField, SolverConfig, SolverError};
use crate::training::{
    build_strategy, evaluate_test_mse, run_stage, PhysicsMode, StageInit, StageSpec, StopRule,
    StrategyName, TrainContext, TrainingError,
};

/// Binary name used when error messages suggest commands to run.
pub const BIN_NAME: &str = "cavity-pinn";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}:{line}: {msg}")]
    Config {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("missing solved flow fields; run:\n{0}")]
    MissingFields(String),
    #[error(
        "solver did not converge after {iters} sweeps (last residual {last_residual:e}); \
         residual history written to {}",
        history_path.display()
    )]
    SolveNonConvergence {
        iters: usize,
        last_residual: f64,
        history_path: PathBuf,
    },
    #[error("no run finished: every training replicate diverged")]
    AllReplicatesDiverged,
    #[error("metrics table at {0} has no data rows")]
    EmptyMetrics(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// Process exit status for this failure: 2 for numerical failures
    /// (non-convergence, divergence with no surviving replicate), 1 for
    /// configuration and usage problems.
    pub fn exit_code(&self) -> u8 {
        match self {
            ExperimentError::SolveNonConvergence { .. }
            | ExperimentError::AllReplicatesDiverged
            | ExperimentError::Solver(SolverError::NonConvergence { .. })
            | ExperimentError::Dataset(DatasetError::Solver(SolverError::NonConvergence {
                ..
            }))
            | ExperimentError::Training(TrainingError::Diverged { .. }) => 2,
            _ => 1,
        }
    }
}

/// The five built-in case studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaseName {
    /// Single condition, physics weight swept over a list.
    LambdaSweep,
    /// Several Reynolds numbers, mass conservation only.
    MultiReContinuity,
    /// Several Reynolds numbers, full governing equations.
    MultiReFull,
    /// Sub-sampled, noise-injected data at several Reynolds numbers.
    NoisySparse,
    /// Warm-start comparison matrix for new conditions without data.
    Transfer,
}

impl CaseName {
    pub fn as_str(&self) -> &'static str {
        match self {
            CaseName::LambdaSweep => "lambda_sweep",
            CaseName::MultiReContinuity => "multi_re_continuity",
            CaseName::MultiReFull => "multi_re_full",
            CaseName::NoisySparse => "noisy_sparse",
            CaseName::Transfer => "transfer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "lambda_sweep" => Some(CaseName::LambdaSweep),
            "multi_re_continuity" => Some(CaseName::MultiReContinuity),
            "multi_re_full" => Some(CaseName::MultiReFull),
            "noisy_sparse" => Some(CaseName::NoisySparse),
            "transfer" => Some(CaseName::Transfer),
            _ => None,
        }
    }

    pub fn is_transfer(&self) -> bool {
        matches!(self, CaseName::Transfer)
    }
}

/// Fully resolved experiment settings. Every field has a documented default,
/// and the resolved value of every field is written back next to the outputs
/// so a run can be reproduced from that file alone.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub case: CaseName,
    pub out_dir: PathBuf,
    /// Base seed; replicate r trains from seed + r.
    pub seed: u64,
    // Reference solver.
    pub solver_n: usize,
    pub lid: LidProfile,
    pub solver_tol: f64,
    pub solver_max_iters: usize,
    // Datasets.
    pub train_grid: usize,
    pub test_grid: usize,
    /// Conditions with labelled training data.
    pub data_re: Vec<f64>,
    /// Conditions the test table is evaluated at.
    pub test_re: Vec<f64>,
    /// Conditions the physics terms are collocated at (non-transfer cases).
    pub physics_re: Vec<f64>,
    pub subsample_fraction: f64,
    pub noise_amplitude: f64,
    pub subsample_seed: u64,
    pub noise_seed: u64,
    /// Collocation node count per side; interior points are the strictly
    /// inner (collocation_m - 2)^2 nodes.
    pub collocation_m: usize,
    /// Boundary collocation points per edge.
    pub boundary_m: usize,
    // Network.
    pub input_dim: usize,
    pub trunk_depth: usize,
    pub head_depth: usize,
    pub width: usize,
    // Training.
    pub lambda_list: Vec<f64>,
    /// Physics weight for transfer strategies.
    pub lambda: f64,
    pub physics_mode: PhysicsMode,
    pub replicates: usize,
    pub max_epochs: usize,
    pub loss_threshold: Option<f64>,
    pub learning_rate: f64,
    // Transfer case only.
    pub strategies: Vec<StrategyName>,
    pub transfer_re: Vec<f64>,
    pub stage2_max_epochs: usize,
    pub stage2_threshold: Option<f64>,
}

/// Command-line values that take precedence over the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Shortest exact decimal form; `parse::<f64>()` recovers the value bit for
/// bit, so configuration files and labels round-trip.
fn fmt_num(v: f64) -> String {
    v.to_string()
}

/// Fixed-width scientific form used in data tables (17 significant digits,
/// enough to reproduce any f64 exactly).
fn csv_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct RawConfig {
    path: String,
    pairs: Vec<(String, String, usize)>,
}

impl RawConfig {
    fn parse(path_label: &str, text: &str) -> Result<Self, ExperimentError> {
        let mut pairs: Vec<(String, String, usize)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ExperimentError::Config {
                    path: path_label.to_string(),
                    line: line_no,
                    msg: format!("expected `key = value`, found {line:?}"),
                });
            };
            let key = k.trim().to_string();
            let value = v.trim().to_string();
            if key.is_empty() {
                return Err(ExperimentError::Config {
                    path: path_label.to_string(),
                    line: line_no,
                    msg: "empty key".into(),
                });
            }
            if let Some((_, _, first)) = pairs.iter().find(|(k2, _, _)| *k2 == key) {
                return Err(ExperimentError::Config {
                    path: path_label.to_string(),
                    line: line_no,
                    msg: format!("duplicate key `{key}` (first set on line {first})"),
                });
            }
            pairs.push((key, value, line_no));
        }
        Ok(RawConfig {
            path: path_label.to_string(),
            pairs,
        })
    }

    fn err(&self, line: usize, msg: String) -> ExperimentError {
        ExperimentError::Config {
            path: self.path.clone(),
            line,
            msg,
        }
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        let idx = self.pairs.iter().position(|(k, _, _)| k == key)?;
        let (_, value, line) = self.pairs.remove(idx);
        Some((value, line))
    }

    fn string_or(&mut self, key: &str, default: &str) -> String {
        self.take(key).map(|(v, _)| v).unwrap_or_else(|| default.to_string())
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64, ExperimentError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .map_err(|e| self.err(line, format!("bad value for {key}: {e}"))),
        }
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize, ExperimentError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .map_err(|e| self.err(line, format!("bad value for {key}: {e}"))),
        }
    }

    fn u64_or(&mut self, key: &str, default: u64) -> Result<u64, ExperimentError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .map_err(|e| self.err(line, format!("bad value for {key}: {e}"))),
        }
    }

    /// Optional threshold-style value: the literal `none` disables it.
    fn opt_f64_or(
        &mut self,
        key: &str,
        default: Option<f64>,
    ) -> Result<Option<f64>, ExperimentError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, _)) if v == "none" => Ok(None),
            Some((v, line)) => v
                .parse()
                .map(Some)
                .map_err(|e| self.err(line, format!("bad value for {key}: {e}"))),
        }
    }

    fn list_f64_or(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>, ExperimentError> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some((v, line)) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| self.err(line, format!("bad value in {key}: {e}")))
                })
                .collect(),
        }
    }

    fn lid_or(&mut self, key: &str, default: LidProfile) -> Result<LidProfile, ExperimentError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => LidProfile::parse(&v)
                .ok_or_else(|| self.err(line, format!("unknown lid profile {v:?}"))),
        }
    }

    fn mode_or(&mut self, key: &str, default: PhysicsMode) -> Result<PhysicsMode, ExperimentError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => PhysicsMode::parse(&v)
                .ok_or_else(|| self.err(line, format!("unknown physics mode {v:?}"))),
        }
    }

    fn strategies_or(
        &mut self,
        key: &str,
        default: &[StrategyName],
    ) -> Result<Vec<StrategyName>, ExperimentError> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some((v, line)) => v
                .split(',')
                .map(|s| {
                    StrategyName::parse(s)
                        .ok_or_else(|| self.err(line, format!("unknown strategy {:?}", s.trim())))
                })
                .collect(),
        }
    }

    /// Errors on the first key this case does not consume: either a typo or a
    /// setting that belongs to a different case.
    fn finish(self, case: CaseName) -> Result<(), ExperimentError> {
        if let Some((key, _, line)) = self.pairs.first() {
            return Err(ExperimentError::Config {
                path: self.path,
                line: *line,
                msg: format!("key `{key}` is not used by case `{}`", case.as_str()),
            });
        }
        Ok(())
    }
}

/// Parses and resolves a configuration file; every omitted key takes its
/// case-specific default. `overrides` (command-line flags) win over both.
pub fn parse_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| {
        ExperimentError::Invalid(format!("cannot read config {}: {e}", path.display()))
    })?;
    parse_config_text(&path.display().to_string(), &text, overrides)
}

/// Same as [`parse_config`] for configuration text already in memory.
pub fn parse_config_text(
    path_label: &str,
    text: &str,
    overrides: &Overrides,
) -> Result<ExperimentConfig, ExperimentError> {
    let mut raw = RawConfig::parse(path_label, text)?;

    let case = match raw.take("case") {
        None => {
            return Err(ExperimentError::Invalid(format!(
                "{path_label}: missing required key `case` \
                 (one of lambda_sweep, multi_re_continuity, multi_re_full, noisy_sparse, transfer)"
            )))
        }
        Some((v, line)) => CaseName::parse(&v)
            .ok_or_else(|| raw.err(line, format!("unknown case {v:?}")))?,
    };

    let seed = match overrides.seed {
        Some(s) => {
            raw.take("seed");
            s
        }
        None => raw.u64_or("seed", 1234)?,
    };
    let out_dir = match &overrides.out_dir {
        Some(d) => {
            raw.take("out_dir");
            d.clone()
        }
        None => PathBuf::from(raw.string_or("out_dir", &format!("runs/{}", case.as_str()))),
    };

    let solver_n = raw.usize_or("solver_n", 129)?;
    let lid = raw.lid_or("lid", LidProfile::Regularized)?;
    let solver_tol = raw.f64_or("solver_tol", 1e-9)?;
    let solver_max_iters = raw.usize_or("solver_max_iters", 200_000)?;

    let train_grid = raw.usize_or("train_grid", 96)?;
    let test_grid = raw.usize_or("test_grid", 128)?;
    let (data_def, test_def): (&[f64], &[f64]) = match case {
        CaseName::LambdaSweep => (&[100.0], &[100.0]),
        CaseName::MultiReContinuity | CaseName::MultiReFull | CaseName::NoisySparse => {
            (&[50.0, 150.0], &[50.0, 100.0, 150.0, 200.0])
        }
        CaseName::Transfer => (&[50.0, 100.0], &[50.0, 100.0, 150.0, 200.0, 300.0]),
    };
    let data_re = raw.list_f64_or("data_re", data_def)?;
    let test_re = raw.list_f64_or("test_re", test_def)?;
    let (frac_def, noise_def) = match case {
        CaseName::NoisySparse => (0.1, 0.01),
        _ => (1.0, 0.0),
    };
    let subsample_fraction = raw.f64_or("subsample_fraction", frac_def)?;
    let noise_amplitude = raw.f64_or("noise_amplitude", noise_def)?;
    let subsample_seed = raw.u64_or("subsample_seed", seed.wrapping_add(101))?;
    let noise_seed = raw.u64_or("noise_seed", seed.wrapping_add(202))?;
    let collocation_m = raw.usize_or("collocation_m", 24)?;
    let boundary_m = raw.usize_or("boundary_m", 24)?;

    let input_dim = raw.usize_or(
        "input_dim",
        if case == CaseName::LambdaSweep { 2 } else { 3 },
    )?;
    let trunk_depth = raw.usize_or("trunk_depth", 3)?;
    let head_depth = raw.usize_or("head_depth", 3)?;
    let width = raw.usize_or("width", 32)?;

    let physics_mode = raw.mode_or(
        "physics_mode",
        if case == CaseName::MultiReContinuity {
            PhysicsMode::ContinuityOnly
        } else {
            PhysicsMode::Full
        },
    )?;
    let replicates = raw.usize_or("replicates", 10)?;
    let max_epochs = raw.usize_or("max_epochs", 2000)?;
    let threshold_def = match (case, physics_mode) {
        (CaseName::LambdaSweep, _) | (CaseName::Transfer, _) => None,
        (_, PhysicsMode::ContinuityOnly) => Some(2e-4),
        (_, PhysicsMode::Full) => Some(5e-4),
    };
    let loss_threshold = raw.opt_f64_or("loss_threshold", threshold_def)?;
    let learning_rate = raw.f64_or("learning_rate", 1e-3)?;

    let (physics_re, lambda_list, lambda, strategies, transfer_re, stage2_max_epochs, stage2_threshold);
    if case.is_transfer() {
        physics_re = Vec::new();
        lambda_list = Vec::new();
        lambda = raw.f64_or("lambda", 1.0)?;
        strategies = raw.strategies_or("strategies", &StrategyName::all())?;
        transfer_re = raw.list_f64_or("transfer_re", &[150.0, 200.0, 300.0])?;
        stage2_max_epochs = raw.usize_or("stage2_max_epochs", max_epochs)?;
        let s2_def = Some(match physics_mode {
            PhysicsMode::ContinuityOnly => 2e-4,
            PhysicsMode::Full => 5e-4,
        });
        stage2_threshold = raw.opt_f64_or("stage2_threshold", s2_def)?;
    } else {
        let lambda_def: &[f64] = match case {
            CaseName::LambdaSweep => &[0.0, 1e-3, 1e-2, 1e-1, 1.0],
            _ => &[0.0, 1.0],
        };
        lambda_list = raw.list_f64_or("lambda_list", lambda_def)?;
        physics_re = raw.list_f64_or("physics_re", &test_re.clone())?;
        lambda = 1.0;
        strategies = Vec::new();
        transfer_re = Vec::new();
        stage2_max_epochs = max_epochs;
        stage2_threshold = None;
    }

    raw.finish(case)?;

    let cfg = ExperimentConfig {
        case,
        out_dir,
        seed,
        solver_n,
        lid,
        solver_tol,
        solver_max_iters,
        train_grid,
        test_grid,
        data_re,
        test_re,
        physics_re,
        subsample_fraction,
        noise_amplitude,
        subsample_seed,
        noise_seed,
        collocation_m,
        boundary_m,
        input_dim,
        trunk_depth,
        head_depth,
        width,
        lambda_list,
        lambda,
        physics_mode,
        replicates,
        max_epochs,
        loss_threshold,
        learning_rate,
        strategies,
        transfer_re,
        stage2_max_epochs,
        stage2_threshold,
    };
    validate_config(&cfg)?;
    Ok(cfg)
}

fn validate_config(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    let bad = |msg: String| Err(ExperimentError::Invalid(msg));
    if cfg.train_grid < 2 || cfg.train_grid > cfg.solver_n {
        return bad(format!(
            "train_grid must be in [2, solver_n]; got {} with solver_n {}",
            cfg.train_grid, cfg.solver_n
        ));
    }
    if cfg.test_grid < 2 || cfg.test_grid > cfg.solver_n {
        return bad(format!(
            "test_grid must be in [2, solver_n]; got {} with solver_n {}",
            cfg.test_grid, cfg.solver_n
        ));
    }
    if cfg.collocation_m < 3 {
        return bad(format!(
            "collocation_m must be at least 3 (no interior points below that); got {}",
            cfg.collocation_m
        ));
    }
    if cfg.boundary_m < 2 {
        return bad(format!("boundary_m must be at least 2; got {}", cfg.boundary_m));
    }
    if cfg.replicates == 0 {
        return bad("replicates must be at least 1".into());
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return bad(format!("learning_rate must be positive; got {}", cfg.learning_rate));
    }
    if !(cfg.subsample_fraction.is_finite()
        && cfg.subsample_fraction > 0.0
        && cfg.subsample_fraction <= 1.0)
    {
        return bad(format!(
            "subsample_fraction must lie in (0, 1]; got {}",
            cfg.subsample_fraction
        ));
    }
    if !(cfg.noise_amplitude.is_finite() && cfg.noise_amplitude >= 0.0) {
        return bad(format!(
            "noise_amplitude must be non-negative; got {}",
            cfg.noise_amplitude
        ));
    }
    if cfg.data_re.is_empty() {
        return bad("data_re must name at least one condition".into());
    }
    if cfg.test_re.is_empty() {
        return bad("test_re must name at least one condition".into());
    }
    if cfg.case.is_transfer() {
        if cfg.strategies.is_empty() {
            return bad("strategies must name at least one plan".into());
        }
        if cfg.transfer_re.is_empty() {
            return bad("transfer_re must name at least one condition".into());
        }
    } else if cfg.lambda_list.is_empty() {
        return bad("lambda_list must name at least one weight".into());
    }
    if cfg.input_dim == 2 {
        let mut all: Vec<f64> = cfg.data_re.clone();
        all.extend(&cfg.test_re);
        all.extend(&cfg.physics_re);
        all.extend(&cfg.transfer_re);
        let distinct: HashSet<u64> = all.iter().map(|r| r.to_bits()).collect();
        if distinct.len() > 1 {
            return bad(
                "input_dim = 2 supports a single Reynolds number; \
                 use input_dim = 3 for multi-condition cases"
                    .into(),
            );
        }
    }
    // NetworkSpec and SolverConfig re-validate their own fields at use time.
    NetworkSpec::new(cfg.input_dim, cfg.trunk_depth, cfg.head_depth, cfg.width)
        .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
    Ok(())
}

/// Renders the fully resolved configuration; parsing the result reproduces
/// the same `ExperimentConfig`.
pub fn serialize_config(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    let list = |v: &[f64]| {
        v.iter()
            .map(|x| fmt_num(*x))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let opt = |v: Option<f64>| v.map(fmt_num).unwrap_or_else(|| "none".into());
    let _ = writeln!(s, "# resolved experiment configuration");
    let _ = writeln!(s, "case = {}", cfg.case.as_str());
    let _ = writeln!(s, "out_dir = {}", cfg.out_dir.display());
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "solver_n = {}", cfg.solver_n);
    let _ = writeln!(s, "lid = {}", cfg.lid.name());
    let _ = writeln!(s, "solver_tol = {}", fmt_num(cfg.solver_tol));
    let _ = writeln!(s, "solver_max_iters = {}", cfg.solver_max_iters);
    let _ = writeln!(s, "train_grid = {}", cfg.train_grid);
    let _ = writeln!(s, "test_grid = {}", cfg.test_grid);
    let _ = writeln!(s, "data_re = {}", list(&cfg.data_re));
    let _ = writeln!(s, "test_re = {}", list(&cfg.test_re));
    let _ = writeln!(s, "subsample_fraction = {}", fmt_num(cfg.subsample_fraction));
    let _ = writeln!(s, "noise_amplitude = {}", fmt_num(cfg.noise_amplitude));
    let _ = writeln!(s, "subsample_seed = {}", cfg.subsample_seed);
    let _ = writeln!(s, "noise_seed = {}", cfg.noise_seed);
    let _ = writeln!(s, "collocation_m = {}", cfg.collocation_m);
    let _ = writeln!(s, "boundary_m = {}", cfg.boundary_m);
    let _ = writeln!(s, "input_dim = {}", cfg.input_dim);
    let _ = writeln!(s, "trunk_depth = {}", cfg.trunk_depth);
    let _ = writeln!(s, "head_depth = {}", cfg.head_depth);
    let _ = writeln!(s, "width = {}", cfg.width);
    let _ = writeln!(s, "physics_mode = {}", cfg.physics_mode.name());
    let _ = writeln!(s, "replicates = {}", cfg.replicates);
    let _ = writeln!(s, "max_epochs = {}", cfg.max_epochs);
    let _ = writeln!(s, "loss_threshold = {}", opt(cfg.loss_threshold));
    let _ = writeln!(s, "learning_rate = {}", fmt_num(cfg.learning_rate));
    if cfg.case.is_transfer() {
        let _ = writeln!(s, "lambda = {}", fmt_num(cfg.lambda));
        let names = cfg
            .strategies
            .iter()
            .map(|n| n.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        let _ = writeln!(s, "strategies = {names}");
        let _ = writeln!(s, "transfer_re = {}", list(&cfg.transfer_re));
        let _ = writeln!(s, "stage2_max_epochs = {}", cfg.stage2_max_epochs);
        let _ = writeln!(s, "stage2_threshold = {}", opt(cfg.stage2_threshold));
    } else {
        let _ = writeln!(s, "lambda_list = {}", list(&cfg.lambda_list));
        let _ = writeln!(s, "physics_re = {}", list(&cfg.physics_re));
    }
    s
}

// ---------------------------------------------------------------------------
// Solver fields on disk
// ---------------------------------------------------------------------------

/// Canonical file name for a cached solver field.
pub fn field_file_name(re: f64, n: usize, lid: LidProfile) -> String {
    format!("field_re{}_n{}_{}.csv", fmt_num(re), n, lid.name())
}

/// Writes a solved field as a dataset CSV (one row per grid node, provenance
/// lines carrying the grid size and lid profile).
pub fn write_field_csv(field: &FlowField, path: &Path) -> Result<(), ExperimentError> {
    let ds = make_training_set(&[(field.re, field.clone())], field.n)?;
    write_csv(&ds, path)?;
    Ok(())
}

/// Reads a field CSV back into a grid, verifying the node layout.
pub fn read_field_csv(path: &Path) -> Result<FlowField, ExperimentError> {
    let ds = read_csv(path)?;
    let n = ds.provenance.sample_grid;
    if n < 2 || ds.samples.len() != n * n {
        return Err(ExperimentError::Invalid(format!(
            "{}: expected {} rows for an {n}x{n} field, found {}",
            path.display(),
            n * n,
            ds.samples.len()
        )));
    }
    let re = match ds.provenance.re_list.as_slice() {
        [one] => *one,
        other => {
            return Err(ExperimentError::Invalid(format!(
                "{}: a field file must hold exactly one condition, found {}",
                path.display(),
                other.len()
            )))
        }
    };
    let mut field = FlowField {
        n,
        re,
        lid: ds.provenance.lid,
        u: vec![0.0; n * n],
        v: vec![0.0; n * n],
        p: vec![0.0; n * n],
    };
    let step = (n - 1) as f64;
    for (k, s) in ds.samples.iter().enumerate() {
        let (i, j) = (k % n, k / n);
        let x = i as f64 / step;
        let y = j as f64 / step;
        if s.x.to_bits() != x.to_bits() || s.y.to_bits() != y.to_bits() {
            return Err(ExperimentError::Invalid(format!(
                "{}: row {} is not on the expected uniform grid",
                path.display(),
                k + 1
            )));
        }
        field.u[k] = s.u;
        field.v[k] = s.v;
        field.p[k] = s.p;
    }
    Ok(field)
}

/// Conditions that need a solved field: those carrying data or test targets
/// (physics collocation points need no field), in first-appearance order.
fn required_res(cfg: &ExperimentConfig) -> Vec<f64> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for &re in cfg.data_re.iter().chain(&cfg.test_re) {
        if seen.insert(re.to_bits()) {
            out.push(re);
        }
    }
    out
}

fn solver_config(cfg: &ExperimentConfig, re: f64) -> Result<SolverConfig, ExperimentError> {
    let mut sc = SolverConfig::new(cfg.solver_n, re, cfg.lid)?;
    sc.tol = cfg.solver_tol;
    sc.max_iters = cfg.solver_max_iters;
    sc.validate()?;
    Ok(sc)
}

/// Loads every required field from `<out_dir>/fields/`. Missing ones are
/// either solved and cached (`solve_missing`) or reported with the exact
/// `solve` commands that would create them.
pub fn ensure_fields(
    cfg: &ExperimentConfig,
    solve_missing: bool,
) -> Result<Vec<(f64, FlowField)>, ExperimentError> {
    let dir = cfg.out_dir.join("fields");
    fs::create_dir_all(&dir)?;
    let mut fields = Vec::new();
    let mut missing = String::new();
    for re in required_res(cfg) {
        let path = dir.join(field_file_name(re, cfg.solver_n, cfg.lid));
        if path.exists() {
            fields.push((re, read_field_csv(&path)?));
        } else if solve_missing {
            let sc = solver_config(cfg, re)?;
            let (field, _) = solve_cavity_with_stats(&sc)?;
            write_field_csv(&field, &path)?;
            fields.push((re, field));
        } else {
            let _ = writeln!(
                missing,
                "  {BIN_NAME} solve --re {} --n {} --lid {} --tol {} --out {}",
                fmt_num(re),
                cfg.solver_n,
                cfg.lid.name(),
                fmt_num(cfg.solver_tol),
                path.display()
            );
        }
    }
    if !missing.is_empty() {
        return Err(ExperimentError::MissingFields(
            missing.trim_end().to_string(),
        ));
    }
    Ok(fields)
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Train and test tables for one case.
pub struct CaseData {
    pub train: Dataset,
    pub test: Dataset,
}

fn pick_fields(
    fields: &[(f64, FlowField)],
    res: &[f64],
) -> Result<Vec<(f64, FlowField)>, ExperimentError> {
    res.iter()
        .map(|re| {
            fields
                .iter()
                .find(|(r, _)| r.to_bits() == re.to_bits())
                .map(|(r, f)| (*r, f.clone()))
                .ok_or_else(|| {
                    ExperimentError::Invalid(format!("no solved field loaded for re = {}", fmt_num(*re)))
                })
        })
        .collect()
}

/// Builds the training table (resampled, optionally thinned and noised) and
/// the test table from already-solved fields.
pub fn build_datasets(
    cfg: &ExperimentConfig,
    fields: &[(f64, FlowField)],
) -> Result<CaseData, ExperimentError> {
    let mut train = make_training_set(&pick_fields(fields, &cfg.data_re)?, cfg.train_grid)?;
    if cfg.subsample_fraction < 1.0 {
        train = subsample(&train, cfg.subsample_fraction, cfg.subsample_seed)?;
    }
    if cfg.noise_amplitude > 0.0 {
        train = add_noise(&train, cfg.noise_amplitude, cfg.noise_seed)?;
    }
    let test = make_training_set(&pick_fields(fields, &cfg.test_re)?, cfg.test_grid)?;
    Ok(CaseData { train, test })
}

/// Conditions whose physics terms appear anywhere in the case.
fn collocated_res(cfg: &ExperimentConfig) -> Vec<f64> {
    if cfg.case.is_transfer() {
        let mut out = cfg.data_re.clone();
        let mut seen: HashSet<u64> = out.iter().map(|r| r.to_bits()).collect();
        for &x in &cfg.transfer_re {
            if seen.insert(x.to_bits()) {
                out.push(x);
            }
        }
        out
    } else {
        cfg.physics_re.clone()
    }
}

fn write_collocation_csvs(
    cfg: &ExperimentConfig,
    dir: &Path,
) -> Result<(usize, usize), ExperimentError> {
    let res = collocated_res(cfg);
    let set = make_collocation_set(&res, cfg.collocation_m, cfg.boundary_m, cfg.lid)?;
    let mut s = String::from("# physics collocation points, interior\nx,y,re\n");
    for (x, y, re) in &set.interior {
        let _ = writeln!(s, "{},{},{}", csv_f64(*x), csv_f64(*y), csv_f64(*re));
    }
    fs::write(dir.join("colloc_interior.csv"), s)?;
    let mut s = String::from("# physics collocation points, boundary with velocity targets\nx,y,re,u,v\n");
    for (x, y, re, u, v) in &set.boundary {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            csv_f64(*x),
            csv_f64(*y),
            csv_f64(*re),
            csv_f64(*u),
            csv_f64(*v)
        );
    }
    fs::write(dir.join("colloc_boundary.csv"), s)?;
    Ok((set.interior.len(), set.boundary.len()))
}

fn write_data_csvs(
    cfg: &ExperimentConfig,
    data: &CaseData,
) -> Result<(PathBuf, PathBuf), ExperimentError> {
    let dir = cfg.out_dir.join("data");
    fs::create_dir_all(&dir)?;
    let train_path = dir.join("train.csv");
    let test_path = dir.join("test.csv");
    write_csv(&data.train, &train_path)?;
    write_csv(&data.test, &test_path)?;
    write_collocation_csvs(cfg, &dir)?;
    Ok((train_path, test_path))
}

fn write_resolved_config(cfg: &ExperimentConfig) -> Result<PathBuf, ExperimentError> {
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("resolved_config.txt");
    fs::write(&path, serialize_config(cfg))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

/// One schedulable training run: a strategy (or one physics weight) at one
/// replicate index.
#[derive(Debug, Clone)]
pub struct RunUnit {
    /// Metrics label, e.g. `lambda=0.01` or `B2@re200`.
    pub label: String,
    /// File-system-friendly variant of the label.
    pub file_label: String,
    pub replicate: usize,
    pub stages: Vec<StageSpec>,
}

fn make_stop(max_epochs: usize, threshold: Option<f64>) -> StopRule {
    match threshold {
        None => StopRule::epochs(max_epochs),
        Some(t) => StopRule::threshold(max_epochs, t),
    }
}

/// Enumerates all runs in canonical order: physics weights (or strategy ×
/// new-condition pairs) in configured order, replicates innermost. The merge
/// step relies on this order, so outputs are thread-count independent.
pub fn build_run_units(cfg: &ExperimentConfig) -> Result<Vec<RunUnit>, ExperimentError> {
    let mut units = Vec::new();
    if cfg.case.is_transfer() {
        let stop1 = make_stop(cfg.max_epochs, cfg.loss_threshold);
        let stop2 = make_stop(cfg.stage2_max_epochs, cfg.stage2_threshold);
        for &name in &cfg.strategies {
            for &x in &cfg.transfer_re {
                for r in 0..cfg.replicates {
                    let seed = cfg.seed.wrapping_add(r as u64);
                    let plan =
                        build_strategy(name, &cfg.data_re, Some(x), seed, stop1, stop2, cfg.lambda)?;
                    units.push(RunUnit {
                        label: format!("{}@re{}", name.as_str(), fmt_num(x)),
                        file_label: format!("{}_re{}", name.as_str(), fmt_num(x)),
                        replicate: r,
                        stages: plan.stages,
                    });
                }
            }
        }
    } else {
        let stop = make_stop(cfg.max_epochs, cfg.loss_threshold);
        for &lambda in &cfg.lambda_list {
            for r in 0..cfg.replicates {
                let seed = cfg.seed.wrapping_add(r as u64);
                let physics_re = if lambda == 0.0 {
                    Vec::new()
                } else {
                    cfg.physics_re.clone()
                };
                units.push(RunUnit {
                    label: format!("lambda={}", fmt_num(lambda)),
                    file_label: format!("lambda{}", fmt_num(lambda)),
                    replicate: r,
                    stages: vec![StageSpec {
                        init: StageInit::Random { seed },
                        data_re: cfg.data_re.clone(),
                        physics_re,
                        lambda,
                        stop,
                    }],
                });
            }
        }
    }
    Ok(units)
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub strategy: String,
    pub stage: usize,
    pub re: f64,
    pub variable: String,
    pub replicate: usize,
    pub test_mse: f64,
    pub epochs_to_stop: usize,
    pub stop_reason: String,
}

pub const METRICS_HEADER: &str =
    "strategy,stage,re,variable,replicate,test_mse,epochs_to_stop,stop_reason";

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<(), ExperimentError> {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.strategy,
            r.stage,
            fmt_num(r.re),
            r.variable,
            r.replicate,
            csv_f64(r.test_mse),
            r.epochs_to_stop,
            r.stop_reason
        );
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| {
        ExperimentError::Invalid(format!("cannot read metrics {}: {e}", path.display()))
    })?;
    let label = path.display().to_string();
    let err = |line: usize, msg: String| ExperimentError::Config {
        path: label.clone(),
        line,
        msg,
    };
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            if line != METRICS_HEADER {
                return Err(err(line_no, format!("expected header {METRICS_HEADER:?}")));
            }
            saw_header = true;
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(err(line_no, format!("expected 8 columns, found {}", parts.len())));
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|e| err(line_no, format!("bad {what}: {e}")))
        };
        let parse_f64 = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|e| err(line_no, format!("bad {what}: {e}")))
        };
        rows.push(MetricsRow {
            strategy: parts[0].to_string(),
            stage: parse_usize(parts[1], "stage")?,
            re: parse_f64(parts[2], "re")?,
            variable: parts[3].to_string(),
            replicate: parse_usize(parts[4], "replicate")?,
            test_mse: parse_f64(parts[5], "test_mse")?,
            epochs_to_stop: parse_usize(parts[6], "epochs_to_stop")?,
            stop_reason: parts[7].to_string(),
        });
    }
    if !saw_header {
        return Err(ExperimentError::EmptyMetrics(label));
    }
    Ok(rows)
}

struct RunResult {
    rows: Vec<MetricsRow>,
    survived: bool,
}

struct RunCtx<'a> {
    cfg: &'a ExperimentConfig,
    spec: &'a NetworkSpec,
    train: &'a Dataset,
    test: &'a Dataset,
    checkpoint_dir: &'a Path,
    log_dir: &'a Path,
}

/// Executes one run: every stage in order, warm starts wired through. A
/// diverging stage is recorded (with its last finite parameters) and ends the
/// run; configuration-class failures abort instead.
fn run_one(ctx: &RunCtx<'_>, unit: &RunUnit) -> Result<RunResult, ExperimentError> {
    let train_ctx = TrainContext {
        spec: ctx.spec,
        data: ctx.train,
        interior_m: ctx.cfg.collocation_m,
        boundary_m: ctx.cfg.boundary_m,
        lid: ctx.cfg.lid,
        mode: ctx.cfg.physics_mode,
        lr: ctx.cfg.learning_rate,
    };
    let mut rows = Vec::new();
    let mut prev: Option<ParameterSet> = None;
    let mut survived = true;
    for (k, stage) in unit.stages.iter().enumerate() {
        let stage_no = k + 1;
        let init = match stage.init {
            StageInit::Random { seed } => init_xavier(ctx.spec, seed),
            StageInit::FromPrevious => prev
                .clone()
                .ok_or(TrainingError::MissingCheckpoint(k))
                .map_err(ExperimentError::from)?,
        };
        let (params, log, reason, epochs, ok) = match run_stage(&train_ctx, stage, init) {
            Ok(o) => (o.params, o.log, o.reason.as_str().to_string(), o.steps, true),
            Err(TrainingError::Diverged { epoch, last, log }) => {
                (*last, log, "diverged".to_string(), epoch, false)
            }
            Err(e) => return Err(e.into()),
        };
        let base = format!("{}_rep{}_stage{}", unit.file_label, unit.replicate, stage_no);
        save_checkpoint(&ctx.checkpoint_dir.join(format!("{base}.ckpt")), ctx.spec, &params)?;
        log.write_csv(&ctx.log_dir.join(format!("{base}.csv")))?;
        for r in evaluate_test_mse(ctx.spec, &params, ctx.test)? {
            rows.push(MetricsRow {
                strategy: unit.label.clone(),
                stage: stage_no,
                re: r.re,
                variable: r.variable.to_string(),
                replicate: unit.replicate,
                test_mse: r.mse,
                epochs_to_stop: epochs,
                stop_reason: reason.clone(),
            });
        }
        if !ok {
            survived = false;
            break;
        }
        prev = Some(params);
    }
    Ok(RunResult { rows, survived })
}

// ---------------------------------------------------------------------------
// Summary statistics
// ---------------------------------------------------------------------------

/// Linear interpolation between order statistics: rank h = (n-1)p, value
/// x[floor(h)] + frac(h) * (x[floor(h)+1] - x[floor(h)]). With one sample
/// every quantile is that sample, so the interquartile range is zero.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty slice");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Five-number summary of one metrics group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub group: String,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn stats_for(group: String, mut values: Vec<f64>) -> GroupStats {
    values.sort_by(f64::total_cmp);
    GroupStats {
        group,
        count: values.len(),
        min: values[0],
        q1: quantile(&values, 0.25),
        median: quantile(&values, 0.5),
        q3: quantile(&values, 0.75),
        max: values[values.len() - 1],
    }
}

/// Groups test errors by (strategy, stage, condition, variable) and epoch
/// counts by (strategy, stage), in first-appearance order of the rows.
pub fn summarize_metrics(rows: &[MetricsRow]) -> Vec<GroupStats> {
    let mut order: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut push = |key: String, v: f64, order: &mut Vec<String>, values: &mut Vec<Vec<f64>>| {
        let idx = *index.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            values.push(Vec::new());
            values.len() - 1
        });
        values[idx].push(v);
    };
    for r in rows {
        let key = format!("{}/stage{}/re{}/{}", r.strategy, r.stage, fmt_num(r.re), r.variable);
        push(key, r.test_mse, &mut order, &mut values);
    }
    // Every row of one run repeats that run's epoch count; count it once.
    let mut seen: HashSet<(String, usize, usize)> = HashSet::new();
    for r in rows {
        if seen.insert((r.strategy.clone(), r.stage, r.replicate)) {
            let key = format!("{}/stage{}/epochs", r.strategy, r.stage);
            push(key, r.epochs_to_stop as f64, &mut order, &mut values);
        }
    }
    order
        .into_iter()
        .zip(values)
        .map(|(group, vals)| stats_for(group, vals))
        .collect()
}

pub const REPORT_HEADER: &str = "group,stat,value";

pub fn write_report_csv(stats: &[GroupStats], path: &Path) -> Result<(), ExperimentError> {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for g in stats {
        let _ = writeln!(s, "{},median,{}", g.group, csv_f64(g.median));
        let _ = writeln!(s, "{},q1,{}", g.group, csv_f64(g.q1));
        let _ = writeln!(s, "{},q3,{}", g.group, csv_f64(g.q3));
        let _ = writeln!(s, "{},min,{}", g.group, csv_f64(g.min));
        let _ = writeln!(s, "{},max,{}", g.group, csv_f64(g.max));
        let _ = writeln!(s, "{},count,{}", g.group, g.count);
    }
    fs::write(path, s)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct SolveSummary {
    pub out_path: PathBuf,
    pub iters: usize,
    pub final_residual: f64,
}

/// Solves one cavity flow and writes the field CSV. On non-convergence the
/// residual history lands next to the requested output.
pub fn run_solve(
    re: f64,
    n: usize,
    lid: LidProfile,
    tol: f64,
    out: &Path,
) -> Result<SolveSummary, ExperimentError> {
    let mut sc = SolverConfig::new(n, re, lid)?;
    sc.tol = tol;
    sc.validate()?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    match solve_cavity_with_stats(&sc) {
        Ok((field, stats)) => {
            write_field_csv(&field, out)?;
            Ok(SolveSummary {
                out_path: out.to_path_buf(),
                iters: stats.iters,
                final_residual: stats.final_residual,
            })
        }
        Err(SolverError::NonConvergence { iters, last, history }) => {
            let history_path = out.with_extension("history.csv");
            let mut s = String::from("sweep,residual\n");
            for (k, r) in history.iter().enumerate() {
                let _ = writeln!(s, "{},{}", k + 1, csv_f64(*r));
            }
            fs::write(&history_path, s)?;
            Err(ExperimentError::SolveNonConvergence {
                iters,
                last_residual: last,
                history_path,
            })
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug)]
pub struct GenerateSummary {
    pub out_dir: PathBuf,
    pub train_rows: usize,
    pub test_rows: usize,
}

/// Builds every dataset of a case from already-solved fields; missing fields
/// are an error naming the exact `solve` invocations required.
pub fn run_generate(cfg: &ExperimentConfig) -> Result<GenerateSummary, ExperimentError> {
    write_resolved_config(cfg)?;
    let fields = ensure_fields(cfg, false)?;
    let data = build_datasets(cfg, &fields)?;
    write_data_csvs(cfg, &data)?;
    Ok(GenerateSummary {
        out_dir: cfg.out_dir.clone(),
        train_rows: data.train.len(),
        test_rows: data.test.len(),
    })
}

#[derive(Debug)]
pub struct StageSummary {
    pub stage: usize,
    pub epochs: usize,
    pub stop_reason: String,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub label: String,
    pub stages: Vec<StageSummary>,
    pub metrics_path: PathBuf,
}

/// Runs the first configured unit (replicate 0) end to end, solving missing
/// fields on the way, and records its metrics rows.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainSummary, ExperimentError> {
    write_resolved_config(cfg)?;
    let fields = ensure_fields(cfg, true)?;
    let data = build_datasets(cfg, &fields)?;
    write_data_csvs(cfg, &data)?;
    let spec = NetworkSpec::new(cfg.input_dim, cfg.trunk_depth, cfg.head_depth, cfg.width)?;
    let units = build_run_units(cfg)?;
    let unit = units
        .into_iter()
        .next()
        .ok_or_else(|| ExperimentError::Invalid("configuration defines no runs".into()))?;
    let checkpoint_dir = cfg.out_dir.join("checkpoints");
    let log_dir = cfg.out_dir.join("logs");
    fs::create_dir_all(&checkpoint_dir)?;
    fs::create_dir_all(&log_dir)?;
    let ctx = RunCtx {
        cfg,
        spec: &spec,
        train: &data.train,
        test: &data.test,
        checkpoint_dir: &checkpoint_dir,
        log_dir: &log_dir,
    };
    let result = run_one(&ctx, &unit)?;
    let metrics_path = cfg.out_dir.join("train_metrics.csv");
    write_metrics_csv(&result.rows, &metrics_path)?;
    if !result.survived {
        return Err(ExperimentError::AllReplicatesDiverged);
    }
    let mut stages = Vec::new();
    let mut seen = HashSet::new();
    for r in &result.rows {
        if seen.insert(r.stage) {
            stages.push(StageSummary {
                stage: r.stage,
                epochs: r.epochs_to_stop,
                stop_reason: r.stop_reason.clone(),
            });
        }
    }
    Ok(TrainSummary {
        label: unit.label,
        stages,
        metrics_path,
    })
}

#[derive(Debug)]
pub struct ExperimentSummary {
    pub runs: usize,
    pub survivors: usize,
    pub divergences: usize,
    pub metrics_path: PathBuf,
    pub report_path: PathBuf,
}

/// Runs the full case: every unit on a thread pool, metrics merged in
/// canonical order, quartile report written last. Divergent replicates are
/// recorded and skipped; only a case with zero survivors fails.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<ExperimentSummary, ExperimentError> {
    write_resolved_config(cfg)?;
    let fields = ensure_fields(cfg, true)?;
    let data = build_datasets(cfg, &fields)?;
    write_data_csvs(cfg, &data)?;
    let spec = NetworkSpec::new(cfg.input_dim, cfg.trunk_depth, cfg.head_depth, cfg.width)?;
    let units = build_run_units(cfg)?;
    let checkpoint_dir = cfg.out_dir.join("checkpoints");
    let log_dir = cfg.out_dir.join("logs");
    fs::create_dir_all(&checkpoint_dir)?;
    fs::create_dir_all(&log_dir)?;
    let ctx = RunCtx {
        cfg,
        spec: &spec,
        train: &data.train,
        test: &data.test,
        checkpoint_dir: &checkpoint_dir,
        log_dir: &log_dir,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| ExperimentError::Invalid(format!("thread pool: {e}")))?;
    let results: Vec<Result<RunResult, ExperimentError>> =
        pool.install(|| units.par_iter().map(|u| run_one(&ctx, u)).collect());

    let mut rows = Vec::new();
    let mut survivors = 0usize;
    let mut divergences = 0usize;
    for result in results {
        let r = result?;
        if r.survived {
            survivors += 1;
        } else {
            divergences += 1;
        }
        rows.extend(r.rows);
    }
    let metrics_path = cfg.out_dir.join("metrics.csv");
    write_metrics_csv(&rows, &metrics_path)?;
    let report_path = cfg.out_dir.join("report.csv");
    write_report_csv(&summarize_metrics(&rows), &report_path)?;
    if survivors == 0 {
        return Err(ExperimentError::AllReplicatesDiverged);
    }
    Ok(ExperimentSummary {
        runs: units.len(),
        survivors,
        divergences,
        metrics_path,
        report_path,
    })
}

#[derive(Debug)]
pub struct ReportSummary {
    pub groups: usize,
    pub out_path: PathBuf,
}

/// Reads a metrics table and writes its per-group quartile summary.
pub fn run_report(input: &Path, out: &Path) -> Result<ReportSummary, ExperimentError> {
    let rows = read_metrics_csv(input)?;
    if rows.is_empty() {
        return Err(ExperimentError::EmptyMetrics(input.display().to_string()));
    }
    let stats = summarize_metrics(&rows);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_report_csv(&stats, out)?;
    Ok(ReportSummary {
        groups: stats.len(),
        out_path: out.to_path_buf(),
    })
}
