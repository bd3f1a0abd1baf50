//! The method × M × seed sweep and its on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AuxSize, DatasetSource, ExperimentConfig, Method};
use super::metrics::{kl_to_exact, pointwise_rmse};
use super::report::emit_report;
use crate::data::{draw_indices, generate_synthetic_split, load_csv, protocol_test_size, Dataset};
use crate::error::{Error, Result};
use crate::exact::{fit_exact, predict_exact, predict_exact_diag, GaussianPosterior};
use crate::kernel::{InputSet, KernelParams};
use crate::linalg::{Mat, Vector};
use crate::optim::{optimize_inducing, OptTrace, OptimizerConfig};
use crate::pf::{
    build_aux, eps_bound_any_aux, pf_constant_term, pf_value_from_full, AuxKind, AuxiliaryDistribution, PfObjective,
    DEFAULT_VALIDATION_CAP,
};
use crate::sparse::{
    build_nystrom, dtc_predict, dtc_predict_diag, fit_hyperparams_pilot, sor_log_evidence_with_gradient, sor_predict,
    sor_predict_diag, subsample_predict, subsample_predict_diag, vfe_elbo_with_gradient, InducingSet, NystromCache,
    PilotConfig, PilotFit,
};

pub const RESULTS_HEADER: &str = "dataset,method,M,seed,mean_rmse,std_rmse,pred_rmse,kl_to_exact,objective_final,eps_bound,wall_time_seconds,status";

pub const STATUS_OK: &str = "ok";

/// One (method, M, seed) cell. Failed cells carry `NaN` metrics and a status
/// starting with `error`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub method: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    pub pred_rmse: f64,
    pub kl_to_exact: f64,
    pub objective_final: Option<f64>,
    pub eps_bound: Option<f64>,
    pub wall_time_seconds: f64,
    pub status: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == STATUS_OK
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidInput(format!("{what} = {v} in row {self:?}")));
        if !(self.wall_time_seconds > 0.0 && self.wall_time_seconds.is_finite()) {
            return bad("wall_time_seconds", self.wall_time_seconds);
        }
        if !self.is_ok() {
            return if self.status.starts_with("error") {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("unknown status '{}'", self.status)))
            };
        }
        for (what, v) in [
            ("mean_rmse", self.mean_rmse),
            ("std_rmse", self.std_rmse),
            ("pred_rmse", self.pred_rmse),
            ("kl_to_exact", self.kl_to_exact),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(what, v);
            }
        }
        if let Some(v) = self.objective_final.filter(|v| !v.is_finite()) {
            return bad("objective_final", v);
        }
        if let Some(v) = self.eps_bound.filter(|v| !(*v >= 0.0 && v.is_finite())) {
            return bad("eps_bound", v);
        }
        Ok(())
    }

    fn failed(dataset: &str, method: Method, m: usize, seed: u64, secs: f64, err: &Error) -> Self {
        Self {
            dataset: dataset.to_string(),
            method: method.to_string(),
            m,
            seed,
            mean_rmse: f64::NAN,
            std_rmse: f64::NAN,
            pred_rmse: f64::NAN,
            kl_to_exact: f64::NAN,
            objective_final: None,
            eps_bound: None,
            wall_time_seconds: secs,
            status: format!("error: {err}"),
        }
    }
}

pub fn write_results_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(RESULTS_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a results table.
pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != RESULTS_HEADER {
        return Err(Error::Parse {
            row: 0,
            column: header.join(","),
            message: format!("expected header {RESULTS_HEADER}"),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        let row: ResultRow = rec?;
        row.validate()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Everything a cell reads: shared and immutable during the sweep.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    data: Dataset,
    params: KernelParams,
    aux_size: usize,
    cap: usize,
    exact_mean: Vector,
    exact_var: Vector,
    x_kl: InputSet,
    exact_joint: GaussianPosterior,
}

/// Per-cell artifact written as JSON.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub row: ResultRow,
    pub params: KernelParams,
    pub aux_kind: Option<AuxKind>,
    pub aux_indices: Option<Vec<usize>>,
    /// `false` when `eps_bound` came from a SoR auxiliary and is heuristic.
    pub eps_certified: Option<bool>,
    pub subset_indices: Option<Vec<usize>>,
    pub inducing_points: Option<Vec<Vec<f64>>>,
    pub optimizer_iterations: Option<usize>,
    pub winning_restart: Option<usize>,
    pub restart_objectives: Option<Vec<f64>>,
}

struct CellOutput {
    record: RunRecord,
    trace: Option<OptTrace>,
}

/// A fitted sparse predictor plus the bookkeeping that produced it.
struct Fitted {
    mean: Vector,
    var: Vector,
    joint: GaussianPosterior,
    objective: Option<f64>,
    eps: Option<(f64, bool)>,
    aux_indices: Option<Vec<usize>>,
    subset_indices: Option<Vec<usize>>,
    inducing: Option<Mat>,
    trace: Option<OptTrace>,
}

impl Context<'_> {
    fn opt_cfg(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            seed,
            ..self.cfg.optimizer.clone()
        }
    }

    fn x(&self) -> &InputSet {
        &self.data.x_train
    }

    fn y(&self) -> &Vector {
        &self.data.y_train
    }

    fn check_m(&self, m: usize) -> Result<()> {
        if m > self.data.n_train() {
            return Err(Error::InvalidInput(format!(
                "M = {m} exceeds the {} training points",
                self.data.n_train()
            )));
        }
        Ok(())
    }

    fn cache_for(&self, xt: &Mat) -> Result<NystromCache> {
        build_nystrom(self.x(), &InducingSet::new_unchecked(InputSet::new(xt.clone())?), &self.params)
    }

    /// `ε` from the optimized relative objective; needs the dense constant.
    fn eps_for(&self, aux: &AuxiliaryDistribution, relative: f64) -> Result<(f64, bool)> {
        let c = pf_constant_term(self.x(), self.y(), aux, &self.params)?;
        let pf = pf_value_from_full((relative + c).max(0.0), self.params.noise_variance);
        eps_bound_any_aux(self.x(), self.y(), aux, &self.params, pf)
    }

    /// Minimizes `objective` over inducing inputs, then predicts with the
    /// DTC or SoR predictive at the optimum.
    fn fit_inducing<F>(&self, m: usize, seed: u64, objective: F, sor: bool) -> Result<(Fitted, Mat)>
    where
        F: Fn(&Mat) -> Result<(f64, Mat)> + Sync,
    {
        self.check_m(m)?;
        let trace = optimize_inducing(objective, self.x(), m, &self.opt_cfg(seed))?;
        let cache = self.cache_for(&trace.final_x)?;
        let ((mean, var), joint) = if sor {
            (
                sor_predict_diag(&cache, self.y(), &self.data.x_test)?,
                sor_predict(&cache, self.y(), &self.x_kl)?,
            )
        } else {
            (
                dtc_predict_diag(&cache, self.y(), &self.data.x_test)?,
                dtc_predict(&cache, self.y(), &self.x_kl)?,
            )
        };
        let xt = trace.final_x.clone();
        Ok((
            Fitted {
                mean,
                var,
                joint,
                objective: Some(trace.final_objective),
                eps: None,
                aux_indices: None,
                subset_indices: None,
                inducing: Some(xt.clone()),
                trace: Some(trace),
            },
            xt,
        ))
    }

    fn fit_pf(&self, m: usize, seed: u64) -> Result<Fitted> {
        let idx = draw_indices(self.data.n_train(), self.aux_size, seed)?;
        let aux = build_aux(self.cfg.aux_kind, self.x(), self.y(), &idx, &self.params, self.cap)?;
        let obj = PfObjective {
            x: self.x(),
            y: self.y(),
            aux: &aux,
            params: &self.params,
        };
        let (mut fit, _) = self.fit_inducing(m, seed, |xt| obj.value_and_gradient(xt), false)?;
        if self.cfg.compute_eps {
            let relative = fit.objective.unwrap_or(f64::NAN);
            match self.eps_for(&aux, relative) {
                Ok(e) => fit.eps = Some(e),
                Err(e) => log::warn!("eps bound skipped for M={m} seed={seed}: {e}"),
            }
        }
        fit.aux_indices = Some(idx);
        Ok(fit)
    }

    fn fit_vfe(&self, m: usize, seed: u64) -> Result<Fitted> {
        let neg_elbo = |xt: &Mat| -> Result<(f64, Mat)> {
            let (e, g) = vfe_elbo_with_gradient(&self.cache_for(xt)?, self.y())?;
            Ok((-e, -g))
        };
        Ok(self.fit_inducing(m, seed, neg_elbo, false)?.0)
    }

    /// SoR with inducing inputs that maximize its own evidence.
    fn fit_sor(&self, m: usize, seed: u64) -> Result<Fitted> {
        let neg_evidence = |xt: &Mat| -> Result<(f64, Mat)> {
            let (e, g) = sor_log_evidence_with_gradient(&self.cache_for(xt)?, self.y())?;
            Ok((-e, -g))
        };
        Ok(self.fit_inducing(m, seed, neg_evidence, true)?.0)
    }

    fn fit_subsample(&self, m: usize, seed: u64) -> Result<Fitted> {
        let n = self.data.n_train();
        let idx = if m >= n {
            (0..n).collect()
        } else {
            draw_indices(n, m, seed)?
        };
        let (mean, var) = subsample_predict_diag(self.x(), self.y(), &idx, &self.data.x_test, &self.params)?;
        Ok(Fitted {
            mean,
            var,
            joint: subsample_predict(self.x(), self.y(), &idx, &self.x_kl, &self.params)?,
            objective: None,
            eps: None,
            aux_indices: None,
            subset_indices: Some(idx),
            inducing: None,
            trace: None,
        })
    }

    fn row_from(&self, method: Method, m: usize, seed: u64, fit: &Fitted, secs: f64) -> Result<ResultRow> {
        let (mean_rmse, std_rmse, pred_rmse) =
            pointwise_rmse(&fit.mean, &fit.var, &self.exact_mean, &self.exact_var, &self.data.y_test)?;
        let row = ResultRow {
            dataset: self.cfg.name.clone(),
            method: method.to_string(),
            m,
            seed,
            mean_rmse,
            std_rmse,
            pred_rmse,
            kl_to_exact: kl_to_exact(&fit.joint, &self.exact_joint)?,
            objective_final: fit.objective,
            eps_bound: fit.eps.map(|e| e.0),
            wall_time_seconds: secs.max(f64::MIN_POSITIVE),
            status: STATUS_OK.into(),
        };
        row.validate()?;
        Ok(row)
    }

    /// One (method, M, seed) cell; failures become error rows.
    fn run_cell(&self, method: Method, m: usize, seed: u64) -> CellOutput {
        let t0 = Instant::now();
        let fitted = match method {
            Method::PfDtc => self.fit_pf(m, seed),
            Method::Vfe => self.fit_vfe(m, seed),
            Method::Sor => self.fit_sor(m, seed),
            Method::Subsample => self.fit_subsample(m, seed),
        };
        let result = fitted.and_then(|fit| {
            let secs = t0.elapsed().as_secs_f64();
            Ok((self.row_from(method, m, seed, &fit, secs)?, fit))
        });
        match result {
            Ok((row, fit)) => CellOutput {
                record: RunRecord {
                    row,
                    params: self.params.clone(),
                    aux_kind: fit.aux_indices.as_ref().map(|_| self.cfg.aux_kind),
                    aux_indices: fit.aux_indices,
                    eps_certified: fit.eps.map(|e| e.1),
                    subset_indices: fit.subset_indices,
                    inducing_points: fit
                        .inducing
                        .map(|z| z.row_iter().map(|r| r.iter().copied().collect()).collect()),
                    optimizer_iterations: fit.trace.as_ref().map(OptTrace::iterations),
                    winning_restart: fit.trace.as_ref().map(|t| t.winner),
                    restart_objectives: fit
                        .trace
                        .as_ref()
                        .map(|t| t.restarts.iter().map(|r| r.best_objective).collect()),
                },
                trace: fit.trace,
            },
            Err(e) => {
                log::warn!("{method} M={m} seed={seed} failed: {e}");
                let secs = t0.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
                CellOutput {
                    record: RunRecord {
                        row: ResultRow::failed(&self.cfg.name, method, m, seed, secs, &e),
                        params: self.params.clone(),
                        aux_kind: None,
                        aux_indices: None,
                        eps_certified: None,
                        subset_indices: None,
                        inducing_points: None,
                        optimizer_iterations: None,
                        winning_restart: None,
                        restart_objectives: None,
                    },
                    trace: None,
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub rows: Vec<ResultRow>,
    pub pilot: PilotFit,
    pub results_path: PathBuf,
    pub svg_paths: Vec<PathBuf>,
}

impl ExperimentOutcome {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.is_ok()).count()
    }

    /// 0 when every cell succeeded, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.failures() == 0 {
            0
        } else {
            2
        }
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Synthetic {
            n_total,
            test_size,
            lengthscale,
            noise_variance,
        } => {
            let n_test = test_size.unwrap_or_else(|| protocol_test_size(*n_total));
            let gen = KernelParams::isotropic(1, *lengthscale, 1.0, *noise_variance)?;
            let mut ds = generate_synthetic_split(*n_total, n_test, cfg.data_seed, &gen)?;
            ds.name = cfg.name.clone();
            Ok(ds)
        }
        DatasetSource::Csv(spec) => load_csv(spec, cfg.data_seed),
    }
}

fn file_stem(method: &str, m: usize, seed: u64) -> String {
    format!("{method}_M{m}_seed{seed}")
}

/// Pilot fit and exact posterior once, then every (method, M, seed) cell.
/// Cell failures are recorded in their rows and do not stop the sweep.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    log::info!(
        "{}: {} train / {} test points in {} dimensions",
        cfg.name,
        data.n_train(),
        data.n_test(),
        data.dim()
    );

    let pilot_cfg = PilotConfig {
        m_pilot: cfg.pilot.m_pilot.min(data.n_train()),
        ..cfg.pilot.clone()
    };
    let pilot = fit_hyperparams_pilot(&data.x_train, &data.y_train, &pilot_cfg)?;
    let params = pilot.params.clone();
    log::info!("pilot hyperparameters: {params:?}");

    let exact = fit_exact(&data.x_train, &data.y_train, &params)?;
    let (exact_mean, exact_var) = predict_exact_diag(&exact, &data.x_test)?;
    let n_kl = cfg.kl_points.min(data.n_test());
    let kl_idx = draw_indices(data.n_test(), n_kl, cfg.data_seed)?;
    let x_kl = data.x_test.select(&kl_idx)?;
    let exact_joint = predict_exact(&exact, &x_kl)?;

    let aux_size = match cfg.aux_size {
        AuxSize::Fixed(k) => k.min(data.n_train()),
        AuxSize::Fraction(f) => data.aux_size(f),
    };
    let ctx = Context {
        cfg,
        data,
        params,
        aux_size,
        cap: if cfg.validation_mode {
            usize::MAX
        } else {
            DEFAULT_VALIDATION_CAP
        },
        exact_mean,
        exact_var,
        x_kl,
        exact_joint,
    };

    let cells_todo: Vec<(Method, usize, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&method| {
            cfg.m_grid
                .iter()
                .flat_map(move |&m| cfg.seeds.iter().map(move |&s| (method, m, s)))
        })
        .collect();
    let mut cells: Vec<CellOutput> = cells_todo
        .into_par_iter()
        .map(|(method, m, seed)| ctx.run_cell(method, m, seed))
        .collect();
    let method_rank = |name: &str| cfg.methods.iter().position(|m| m.as_str() == name);
    cells.sort_by_key(|c| (method_rank(&c.record.row.method), c.record.row.m, c.record.row.seed));

    let runs_dir = cfg.out_dir.join("runs");
    let traces_dir = cfg.out_dir.join("traces");
    fs::create_dir_all(&runs_dir)?;
    fs::create_dir_all(&traces_dir)?;
    fs::write(cfg.out_dir.join("pilot.json"), serde_json::to_string_pretty(&pilot)?)?;
    for c in &cells {
        let r = &c.record.row;
        let stem = file_stem(&r.method, r.m, r.seed);
        fs::write(runs_dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&c.record)?)?;
        if let Some(t) = &c.trace {
            t.write_csv(&traces_dir.join(format!("{stem}.csv")))?;
        }
    }
    let rows: Vec<ResultRow> = cells.into_iter().map(|c| c.record.row).collect();
    let results_path = cfg.out_dir.join("results.csv");
    write_results_csv(&rows, &results_path)?;
    let svg_paths = if cfg.emit_svg && rows.iter().any(ResultRow::is_ok) {
        emit_report(&rows, &cfg.out_dir)?
    } else {
        Vec::new()
    };
    Ok(ExperimentOutcome {
        rows,
        pilot,
        results_path,
        svg_paths,
    })
}
