//! Wall-time scaling of one objective-and-gradient evaluation in `N`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::config::BenchConfig;
use crate::data::draw_indices;
use crate::error::{Error, Result};
use crate::kernel::{InputSet, KernelParams};
use crate::linalg::{Mat, Vector};
use crate::pf::{build_aux_sor, pf_dtc_objective_with_gradient};
use crate::sparse::{build_nystrom, InducingSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchPoint {
    pub n: usize,
    /// Median over repeats.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub m: usize,
    pub aux_size: usize,
    pub points: Vec<BenchPoint>,
    /// Least-squares slope of `log t` against `log N`.
    pub slope: f64,
}

/// Least-squares slope of `log y` on `log x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidInput("slope needs two or more positive pairs".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("slope needs distinct sizes".into()));
    }
    Ok(sxy / sxx)
}

/// Smooth 1-d regression data: `sin(2x)` plus noise on `[−3, 3]`. Avoids
/// the cubic cost of prior sampling at large `N`.
pub fn bench_data(n: usize, seed: u64) -> Result<(InputSet, Vector)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = InputSet::new(Mat::from_fn(n, 1, |_, _| rng.random_range(-3.0..3.0)))?;
    let y = Vector::from_fn(n, |i, _| {
        (2.0 * x.matrix()[(i, 0)]).sin() + 0.2 * Distribution::<f64>::sample(&StandardNormal, &mut rng)
    });
    Ok((x, y))
}

pub fn bench_params() -> KernelParams {
    KernelParams::isotropic(1, 0.5, 1.0, 0.05).expect("valid constants")
}

/// Median time of one pF-DTC objective-and-gradient evaluation (Nyström
/// factors included) for each `N`, with a fixed-size SoR auxiliary.
pub fn bench_scaling(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.n_grid.len() < 2 || cfg.repeats == 0 {
        return Err(Error::Config("bench needs two or more sizes and one or more repeats".into()));
    }
    let p = bench_params();
    let mut points = Vec::with_capacity(cfg.n_grid.len());
    for &n in &cfg.n_grid {
        if cfg.m > n || cfg.aux_size > n {
            return Err(Error::Config(format!("N = {n} is smaller than M or the auxiliary size")));
        }
        let (x, y) = bench_data(n, cfg.seed)?;
        let aux = build_aux_sor(&x, &y, &draw_indices(n, cfg.aux_size, cfg.seed)?, &p)?;
        let xt = InducingSet::new_unchecked(x.select(&draw_indices(n, cfg.m, cfg.seed + 1)?)?);
        // Warm-up evaluation, not timed.
        pf_dtc_objective_with_gradient(&build_nystrom(&x, &xt, &p)?, &y, &aux)?;
        let mut times = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let t0 = Instant::now();
            let cache = build_nystrom(&x, &xt, &p)?;
            let (terms, grad) = pf_dtc_objective_with_gradient(&cache, &y, &aux)?;
            std::hint::black_box((terms, grad));
            times.push(t0.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        let seconds = times[times.len() / 2].max(1e-9);
        log::info!("N = {n}: {seconds:.3e} s per objective and gradient");
        points.push(BenchPoint { n, seconds });
    }
    let ns: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let ts: Vec<f64> = points.iter().map(|p| p.seconds).collect();
    Ok(BenchReport {
        m: cfg.m,
        aux_size: cfg.aux_size,
        slope: log_log_slope(&ns, &ts)?,
        points,
    })
}

/// Writes `bench_scaling.csv` (one row per `N`) and `bench_scaling.json`
/// into `out_dir`.
pub fn write_bench_report(report: &BenchReport, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("bench_scaling.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["N", "M", "aux_size", "seconds"])?;
    for p in &report.points {
        w.write_record([
            p.n.to_string(),
            report.m.to_string(),
            report.aux_size.to_string(),
            format!("{:e}", p.seconds),
        ])?;
    }
    w.flush()?;
    let json_path = out_dir.join("bench_scaling.json");
    fs::write(&json_path, serde_json::to_string_pretty(report)?)?;
    Ok((csv_path, json_path))
}
