//! Multi-restart first-order minimization over inducing-input matrices.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::InputSet;
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Adam,
    /// Gradient descent with Armijo backtracking; accepted steps never
    /// increase the objective.
    GradientDescent,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Algorithm::Adam),
            "gd" | "gradient-descent" | "backtracking" => Ok(Algorithm::GradientDescent),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub step_size: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Adam,
            step_size: 1e-2,
            max_iters: 500,
            grad_tol: 1e-6,
            restarts: 5,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step_size must be positive, got {}", self.step_size)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::Config(format!("grad_tol must be non-negative, got {}", self.grad_tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RestartTrace {
    pub restart: usize,
    /// Objective at every iterate that was evaluated along the path.
    pub objective: Vec<f64>,
    pub best_objective: f64,
    #[serde(skip)]
    pub best_x: Mat,
    pub iterations: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct OptTrace {
    pub restarts: Vec<RestartTrace>,
    pub winner: usize,
    pub final_x: Mat,
    pub final_objective: f64,
}

impl OptTrace {
    pub fn winning(&self) -> &RestartTrace {
        &self.restarts[self.winner]
    }

    pub fn iterations(&self) -> usize {
        self.winning().iterations
    }

    /// Rows `(iteration, objective, restart)` as CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "objective", "restart"])?;
        for r in &self.restarts {
            for (i, v) in r.objective.iter().enumerate() {
                w.write_record([i.to_string(), format!("{v:.17e}"), r.restart.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

fn finite_eval<F>(f: &F, x: &Mat) -> Result<(f64, Mat)>
where
    F: Fn(&Mat) -> Result<(f64, Mat)>,
{
    let (v, g) = f(x)?;
    if !v.is_finite() || g.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFiniteObjective);
    }
    Ok((v, g))
}

fn run_adam<F>(f: &F, x0: Mat, cfg: &OptimizerConfig, restart: usize) -> RestartTrace
where
    F: Fn(&Mat) -> Result<(f64, Mat)>,
{
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut x = x0;
    let mut m = Mat::zeros(x.nrows(), x.ncols());
    let mut v = m.clone();
    let mut trace = RestartTrace {
        restart,
        objective: Vec::new(),
        best_objective: f64::INFINITY,
        best_x: x.clone(),
        iterations: 0,
        error: None,
    };
    for it in 0..cfg.max_iters {
        let (val, g) = match finite_eval(f, &x) {
            Ok(r) => r,
            Err(e) => {
                trace.error = Some(e.to_string());
                return trace;
            }
        };
        trace.objective.push(val);
        if val < trace.best_objective {
            trace.best_objective = val;
            trace.best_x = x.clone();
        }
        trace.iterations = it + 1;
        if max_abs(&g) <= cfg.grad_tol {
            break;
        }
        let t = (it + 1) as i32;
        m = &m * b1 + &g * (1.0 - b1);
        v = &v * b2 + g.component_mul(&g) * (1.0 - b2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        x.zip_zip_apply(&m, &v, |xi, mi, vi| {
            *xi -= cfg.step_size * (mi / c1) / ((vi / c2).sqrt() + eps);
        });
    }
    trace
}

fn run_backtracking<F>(f: &F, x0: Mat, cfg: &OptimizerConfig, restart: usize) -> RestartTrace
where
    F: Fn(&Mat) -> Result<(f64, Mat)>,
{
    let mut trace = RestartTrace {
        restart,
        objective: Vec::new(),
        best_objective: f64::INFINITY,
        best_x: x0.clone(),
        iterations: 0,
        error: None,
    };
    let (mut val, mut g) = match finite_eval(f, &x0) {
        Ok(r) => r,
        Err(e) => {
            trace.error = Some(e.to_string());
            return trace;
        }
    };
    let mut x = x0;
    let mut step = cfg.step_size;
    trace.objective.push(val);
    trace.best_objective = val;
    for it in 0..cfg.max_iters {
        trace.iterations = it + 1;
        let gn2 = g.norm_squared();
        if max_abs(&g) <= cfg.grad_tol {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &x - &g * step;
            if let Ok((tv, tg)) = finite_eval(f, &trial) {
                if tv <= val - 1e-4 * step * gn2 {
                    x = trial;
                    val = tv;
                    g = tg;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.objective.push(val);
        step *= 2.0;
    }
    trace.best_objective = val;
    trace.best_x = x;
    trace
}

/// Runs every restart from its own starting point (in parallel) and keeps the
/// best final objective.
pub fn optimize_from<F>(f: F, starts: Vec<Mat>, cfg: &OptimizerConfig) -> Result<OptTrace>
where
    F: Fn(&Mat) -> Result<(f64, Mat)> + Sync,
{
    cfg.validate()?;
    if starts.is_empty() {
        return Err(Error::InvalidInput("no starting points".into()));
    }
    let restarts: Vec<RestartTrace> = starts
        .into_par_iter()
        .enumerate()
        .map(|(r, x0)| match cfg.algorithm {
            Algorithm::Adam => run_adam(&f, x0, cfg, r),
            Algorithm::GradientDescent => run_backtracking(&f, x0, cfg, r),
        })
        .collect();
    for r in &restarts {
        if let Some(e) = &r.error {
            log::warn!("restart {} aborted: {e}", r.restart);
        }
    }
    let winner = restarts
        .iter()
        .filter(|r| r.error.is_none() && r.best_objective.is_finite())
        .min_by(|a, b| a.best_objective.total_cmp(&b.best_objective).then(a.restart.cmp(&b.restart)))
        .map(|r| r.restart)
        .ok_or(Error::AllRestartsFailed(restarts.len()))?;
    Ok(OptTrace {
        final_x: restarts[winner].best_x.clone(),
        final_objective: restarts[winner].best_objective,
        winner,
        restarts,
    })
}

/// Seeded random subsets of `pool` (without replacement) as starting points.
pub fn random_subset_starts(pool: &InputSet, m: usize, restarts: usize, seed: u64) -> Result<Vec<Mat>> {
    if m == 0 || m > pool.len() {
        return Err(Error::InvalidInput(format!(
            "need 1 <= M <= {} inducing points, got {m}",
            pool.len()
        )));
    }
    (0..restarts)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64 + 1);
            let mut idx = rand::seq::index::sample(&mut rng, pool.len(), m).into_vec();
            idx.sort_unstable();
            Ok(pool.select(&idx)?.into_matrix())
        })
        .collect()
}

/// Minimizes `f` over M×d inducing matrices, restarting from seeded random
/// subsets of `pool`.
pub fn optimize_inducing<F>(f: F, pool: &InputSet, m: usize, cfg: &OptimizerConfig) -> Result<OptTrace>
where
    F: Fn(&Mat) -> Result<(f64, Mat)> + Sync,
{
    cfg.validate()?;
    optimize_from(f, random_subset_starts(pool, m, cfg.restarts, cfg.seed)?, cfg)
}

/// Central differences, coordinate by coordinate.
pub fn finite_diff_gradient<F>(f: F, x: &Mat, h: f64) -> Result<Mat>
where
    F: Fn(&Mat) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("step must be positive, got {h}")));
    }
    let mut g = Mat::zeros(x.nrows(), x.ncols());
    let mut probe = x.clone();
    for j in 0..x.ncols() {
        for i in 0..x.nrows() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + h;
            let up = f(&probe)?;
            probe[(i, j)] = orig - h;
            let down = f(&probe)?;
            probe[(i, j)] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFiniteObjective);
            }
            g[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    Ok(g)
}
