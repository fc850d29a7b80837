//! Run configuration: a JSON file overlaid with command-line flags.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use invpca::solve::SolverOptions;
use invpca::{Error, FitConfig, Result, SynthSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Functional,
    Covariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SelectCriterion {
    Cv,
    Lcurve,
}

/// Every parameter a command may use. Fields a command does not need are ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mesh: Option<PathBuf>,
    /// Build an icosphere with this many subdivisions instead of loading a mesh.
    pub icosphere: Option<u32>,
    pub radius: f64,
    pub channels: usize,
    /// Shared operator: a matrix file, or `identity`.
    pub operator: Option<String>,
    /// One operator per sample.
    pub operators: Vec<PathBuf>,
    /// `m × s` observations.
    pub data: Option<PathBuf>,
    pub covariances: Vec<PathBuf>,
    /// `T × s` signal matrices, one per sample.
    pub signals: Vec<PathBuf>,
    pub lambda: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub rank: usize,
    pub folds: usize,
    pub criterion: Option<SelectCriterion>,
    pub iters: usize,
    pub tol: f64,
    pub solver_tol: f64,
    pub sparse_lsq: bool,
    pub center: bool,
    pub seed: u64,
    pub spec: Option<SynthSpec>,
    pub kind: Option<DatasetKind>,
    pub threads: Option<usize>,
    pub reproducible: bool,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fit = FitConfig::default();
        RunConfig {
            mesh: None,
            icosphere: None,
            radius: 1.0,
            channels: 1,
            operator: None,
            operators: Vec::new(),
            data: None,
            covariances: Vec::new(),
            signals: Vec::new(),
            lambda: None,
            lambda_grid: Vec::new(),
            rank: 1,
            folds: 2,
            criterion: None,
            iters: fit.max_outer,
            tol: fit.tol,
            solver_tol: fit.solver.tol,
            sparse_lsq: false,
            center: fit.center,
            seed: 0,
            spec: None,
            kind: None,
            threads: None,
            reproducible: false,
            out_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            max_outer: self.iters,
            tol: self.tol,
            center: self.center,
            sparse_lsq: self.sparse_lsq,
            solver: SolverOptions::with_tol(self.solver_tol),
            ..FitConfig::default()
        }
    }

    /// Checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::InvalidConfig("channels must be at least 1".into()));
        }
        if self.rank == 0 {
            return Err(Error::InvalidConfig("rank must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidConfig("threads must be at least 1".into()));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(Error::InvalidConfig("radius must be positive".into()));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::InvalidConfig(format!("lambda must be finite and nonnegative, got {l}")));
            }
        }
        if self.mesh.is_some() && self.icosphere.is_some() {
            return Err(Error::InvalidConfig("give either mesh or icosphere, not both".into()));
        }
        if self.operator.is_some() && !self.operators.is_empty() {
            return Err(Error::InvalidConfig("give either one shared operator or per-sample operators".into()));
        }
        self.fit_config().validate()
    }

    pub fn lambda(&self) -> Result<f64> {
        self.lambda.ok_or_else(|| Error::InvalidConfig("lambda is required".into()))
    }
}

/// Flags shared by all subcommands; each one overrides the matching config key.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run configuration; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Mesh: an .off file or a directory with nodes/triangles files.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Use an icosphere with this many subdivisions as the mesh.
    #[arg(long)]
    pub icosphere: Option<u32>,
    #[arg(long)]
    pub radius: Option<f64>,
    /// Components per node (1 for scalar functions, 3 for vector fields).
    #[arg(long)]
    pub channels: Option<usize>,
    /// Shared forward operator file, or `identity`.
    #[arg(long)]
    pub operator: Option<String>,
    /// Per-sample operator files, comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    pub operators: Vec<PathBuf>,
    /// Observation matrix, one sample per row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Sensor covariance files.
    #[arg(long, value_delimiter = ',')]
    pub covariances: Vec<PathBuf>,
    /// Raw signal matrices (time × sensors) to build covariances from.
    #[arg(long, value_delimiter = ',')]
    pub signals: Vec<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Vec<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long, value_enum)]
    pub criterion: Option<SelectCriterion>,
    /// Maximum outer iterations per component.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Outer convergence tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Relative residual tolerance of the inner linear solves.
    #[arg(long)]
    pub solver_tol: Option<f64>,
    /// Solve the stacked least-squares form when the operator is shared.
    #[arg(long)]
    pub sparse_lsq: bool,
    /// Subtract the per-sensor mean (functional fits).
    #[arg(long, overrides_with = "no_center")]
    pub center: bool,
    #[arg(long)]
    pub no_center: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Synthetic dataset specification (JSON file).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub kind: Option<DatasetKind>,
    /// Worker threads for the internal pool.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Single-threaded run with no timing fields, for byte-identical outputs.
    #[arg(long)]
    pub reproducible: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone().into();
                }
            )*};
        }
        set!(mesh, icosphere, operator, data, lambda, criterion, kind, threads);
        macro_rules! set_plain {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            )*};
        }
        set_plain!(radius, channels, rank, folds, iters, tol, solver_tol, seed);
        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        for (src, dst) in [
            (&self.operators, &mut cfg.operators),
            (&self.covariances, &mut cfg.covariances),
            (&self.signals, &mut cfg.signals),
        ] {
            if !src.is_empty() {
                *dst = src.clone();
            }
        }
        if !self.lambda_grid.is_empty() {
            cfg.lambda_grid = self.lambda_grid.clone();
        }
        if self.sparse_lsq {
            cfg.sparse_lsq = true;
        }
        if self.center {
            cfg.center = true;
        }
        if self.no_center {
            cfg.center = false;
        }
        if self.reproducible {
            cfg.reproducible = true;
        }
        if let Some(p) = &self.spec {
            let text = std::fs::read_to_string(p)?;
            let spec: SynthSpec =
                serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?;
            cfg.spec = Some(spec);
        }
        if let (Some(seed), Some(spec)) = (self.seed, cfg.spec.as_mut()) {
            spec.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
