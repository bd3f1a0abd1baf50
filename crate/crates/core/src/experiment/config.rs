//! Experiment configuration: a flat TOML file mapped onto [`ExperimentConfig`].
//!
//! Recognized keys (all optional except `dataset`):
//!
//! ```toml
//! dataset = "airfoil"          # registry name, "synthetic", or any label
//! path = "data/airfoil.csv"    # CSV to load; omit for the synthetic generator
//! target = "sound"             # column name or 0-based index; default last
//! features = [0, 1, 2]         # default: every column but the target
//! test_size = 400              # overrides the registry and protocol rule
//! n_total = 2000               # synthetic only
//! synthetic_lengthscale = 0.5  # synthetic generator, unit signal variance
//! synthetic_noise = 0.05
//! data_seed = 0                # split shuffle, generator and KL subset
//! methods = ["pf-dtc", "vfe", "sor", "subsample"]
//! m_grid = [10, 20, 50, 100, 200]
//! seeds = [0, 1, 2]
//! aux_kind = "sor"             # or "subset" (certified eps bound)
//! aux_fraction = 0.1           # used when the dataset has no prescribed size
//! aux_size = 100               # fixed size, wins over everything else
//! optimizer = "adam"           # or "gd"
//! step_size = 0.01
//! max_iters = 500
//! restarts = 5
//! grad_tol = 1e-6
//! m_pilot = 200
//! pilot_max_iters = 400
//! kl_points = 200
//! out_dir = "results"
//! emit_svg = true
//! validation_mode = false
//! compute_eps = false
//! bench_n = [1000, 2000, 4000, 8000]
//! bench_m = 20
//! bench_aux_size = 100
//! bench_repeats = 5
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{registry_entry, ColumnRef, DatasetSpec};
use crate::error::{Error, Result};
use crate::optim::{Algorithm, OptimizerConfig};
use crate::pf::AuxKind;
use crate::sparse::PilotConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "pf-dtc")]
    PfDtc,
    #[serde(rename = "vfe")]
    Vfe,
    #[serde(rename = "sor")]
    Sor,
    #[serde(rename = "subsample")]
    Subsample,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::PfDtc, Method::Vfe, Method::Sor, Method::Subsample];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::PfDtc => "pf-dtc",
            Method::Vfe => "vfe",
            Method::Sor => "sor",
            Method::Subsample => "subsample",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// GP-prior draws split by the held-out protocol.
    Synthetic {
        n_total: usize,
        test_size: Option<usize>,
        /// Generating hyperparameters (isotropic, unit signal variance).
        lengthscale: f64,
        noise_variance: f64,
    },
    Csv(DatasetSpec),
}

/// How many training points the auxiliary subset gets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AuxSize {
    /// Prescribed size for the dataset if any, else this fraction of `N`.
    Fraction(f64),
    Fixed(usize),
}

/// Timing sweep settings for the objective cost check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub n_grid: Vec<usize>,
    pub m: usize,
    pub aux_size: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_grid: vec![1000, 2000, 4000, 8000],
            m: 20,
            aux_size: 100,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub data_seed: u64,
    pub methods: Vec<Method>,
    pub m_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub aux_kind: AuxKind,
    pub aux_size: AuxSize,
    /// `seed` is ignored; each cell uses its own seed.
    pub optimizer: OptimizerConfig,
    pub pilot: PilotConfig,
    pub kl_points: usize,
    pub out_dir: PathBuf,
    pub emit_svg: bool,
    pub validation_mode: bool,
    pub compute_eps: bool,
    pub bench: BenchConfig,
}

pub const DEFAULT_M_GRID: [usize; 5] = [10, 20, 50, 100, 200];
pub const SYNTHETIC_LENGTHSCALE: f64 = 0.5;
pub const SYNTHETIC_NOISE: f64 = 0.05;

impl ExperimentConfig {
    /// Synthetic run with every default filled in.
    pub fn synthetic(n_total: usize) -> Self {
        Self {
            name: "synthetic".into(),
            dataset: DatasetSource::Synthetic {
                n_total,
                test_size: None,
                lengthscale: SYNTHETIC_LENGTHSCALE,
                noise_variance: SYNTHETIC_NOISE,
            },
            data_seed: 0,
            methods: Method::ALL.to_vec(),
            m_grid: DEFAULT_M_GRID.to_vec(),
            seeds: (0..10).collect(),
            aux_kind: AuxKind::SorLowRank,
            aux_size: AuxSize::Fraction(0.1),
            optimizer: OptimizerConfig::default(),
            pilot: PilotConfig::default(),
            kl_points: 200,
            out_dir: PathBuf::from("results"),
            emit_svg: false,
            validation_mode: false,
            compute_eps: false,
            bench: BenchConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("method '{m}' listed twice")));
            }
        }
        if self.m_grid.is_empty() {
            return Err(Error::Config("m_grid must not be empty".into()));
        }
        if self.m_grid[0] == 0 || self.m_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "m_grid must be positive and strictly ascending, got {:?}",
                self.m_grid
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("seeds must be distinct, got {:?}", self.seeds)));
        }
        match self.aux_size {
            AuxSize::Fraction(f) if !(f > 0.0 && f <= 1.0) => {
                return Err(Error::Config(format!("aux_fraction must lie in (0, 1], got {f}")))
            }
            AuxSize::Fixed(0) => return Err(Error::Config("aux_size must be positive".into())),
            _ => {}
        }
        if let DatasetSource::Synthetic {
            n_total,
            test_size,
            lengthscale,
            noise_variance,
        } = self.dataset
        {
            if !(lengthscale > 0.0 && noise_variance > 0.0) {
                return Err(Error::Config("synthetic lengthscale and noise must be positive".into()));
            }
            if n_total < 4 {
                return Err(Error::Config(format!("n_total must be at least 4, got {n_total}")));
            }
            if test_size.is_some_and(|t| t == 0 || t >= n_total) {
                return Err(Error::Config(format!("test_size must lie in [1, {n_total})")));
            }
        }
        if self.pilot.m_pilot == 0 {
            return Err(Error::Config("m_pilot must be positive".into()));
        }
        if self.kl_points == 0 {
            return Err(Error::Config("kl_points must be positive".into()));
        }
        if self.bench.n_grid.len() < 2 || self.bench.m == 0 || self.bench.aux_size == 0 || self.bench.repeats == 0 {
            return Err(Error::Config("bench settings need two or more sizes and positive counts".into()));
        }
        self.optimizer.validate()
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        raw.into_config(base_dir)
    }

    /// Reads a config file; relative data and output paths resolve against
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: String,
    path: Option<PathBuf>,
    target: Option<ColumnRef>,
    features: Option<Vec<ColumnRef>>,
    test_size: Option<usize>,
    shuffle: Option<bool>,
    n_total: Option<usize>,
    synthetic_lengthscale: Option<f64>,
    synthetic_noise: Option<f64>,
    data_seed: Option<u64>,
    methods: Option<Vec<String>>,
    m_grid: Option<Vec<usize>>,
    seeds: Option<Vec<u64>>,
    aux_kind: Option<String>,
    aux_fraction: Option<f64>,
    aux_size: Option<usize>,
    optimizer: Option<String>,
    step_size: Option<f64>,
    max_iters: Option<usize>,
    restarts: Option<usize>,
    grad_tol: Option<f64>,
    m_pilot: Option<usize>,
    pilot_max_iters: Option<u64>,
    kl_points: Option<usize>,
    out_dir: Option<PathBuf>,
    emit_svg: Option<bool>,
    validation_mode: Option<bool>,
    compute_eps: Option<bool>,
    bench_n: Option<Vec<usize>>,
    bench_m: Option<usize>,
    bench_aux_size: Option<usize>,
    bench_repeats: Option<usize>,
}

impl RawConfig {
    fn into_config(self, base: &Path) -> Result<ExperimentConfig> {
        let dataset = match &self.path {
            Some(p) => DatasetSource::Csv(DatasetSpec {
                name: self.dataset.clone(),
                path: crate::data::resolve_relative(base, p),
                target: self.target,
                features: self.features,
                test_size: self.test_size,
                shuffle: self.shuffle.unwrap_or(true),
            }),
            None if self.dataset.eq_ignore_ascii_case("synthetic") => {
                let reg = registry_entry("synthetic").expect("synthetic is registered");
                DatasetSource::Synthetic {
                    n_total: self.n_total.unwrap_or(reg.n_train + reg.n_test),
                    test_size: self.test_size,
                    lengthscale: self.synthetic_lengthscale.unwrap_or(SYNTHETIC_LENGTHSCALE),
                    noise_variance: self.synthetic_noise.unwrap_or(SYNTHETIC_NOISE),
                }
            }
            None => {
                return Err(Error::Config(format!(
                    "dataset '{}' needs a `path` (only \"synthetic\" is generated)",
                    self.dataset
                )))
            }
        };
        let mut cfg = ExperimentConfig::synthetic(0);
        cfg.name = self.dataset;
        cfg.dataset = dataset;
        if let Some(v) = self.data_seed {
            cfg.data_seed = v;
        }
        if let Some(ms) = self.methods {
            cfg.methods = ms.iter().map(|s| s.parse()).collect::<Result<_>>()?;
        }
        if let Some(v) = self.m_grid {
            cfg.m_grid = v;
        }
        if let Some(v) = self.seeds {
            cfg.seeds = v;
        }
        if let Some(k) = self.aux_kind {
            cfg.aux_kind = k.parse().map_err(|_| Error::Config(format!("unknown aux_kind '{k}'")))?;
        }
        cfg.aux_size = match (self.aux_size, self.aux_fraction) {
            (Some(k), _) => AuxSize::Fixed(k),
            (None, Some(f)) => AuxSize::Fraction(f),
            (None, None) => AuxSize::Fraction(0.1),
        };
        if let Some(a) = self.optimizer {
            cfg.optimizer.algorithm = a.parse::<Algorithm>()?;
        }
        if let Some(v) = self.step_size {
            cfg.optimizer.step_size = v;
        }
        if let Some(v) = self.max_iters {
            cfg.optimizer.max_iters = v;
        }
        if let Some(v) = self.restarts {
            cfg.optimizer.restarts = v;
        }
        if let Some(v) = self.grad_tol {
            cfg.optimizer.grad_tol = v;
        }
        if let Some(v) = self.m_pilot {
            cfg.pilot.m_pilot = v;
        }
        if let Some(v) = self.pilot_max_iters {
            cfg.pilot.max_iters = v;
        }
        cfg.pilot.seed = cfg.data_seed;
        if let Some(v) = self.kl_points {
            cfg.kl_points = v;
        }
        cfg.out_dir = crate::data::resolve_relative(base, &self.out_dir.unwrap_or_else(|| PathBuf::from("results")));
        cfg.emit_svg = self.emit_svg.unwrap_or(false);
        cfg.validation_mode = self.validation_mode.unwrap_or(false);
        cfg.compute_eps = self.compute_eps.unwrap_or(false);
        if let Some(v) = self.bench_n {
            cfg.bench.n_grid = v;
        }
        if let Some(v) = self.bench_m {
            cfg.bench.m = v;
        }
        if let Some(v) = self.bench_aux_size {
            cfg.bench.aux_size = v;
        }
        if let Some(v) = self.bench_repeats {
            cfg.bench.repeats = v;
        }
        cfg.bench.seed = cfg.data_seed;
        cfg.validate()?;
        Ok(cfg)
    }
}
