//! Simulation studies and the method benchmark.
//!
//! Three desk-scale studies: parameter recovery with greedy model selection,
//! estimation error under a growing actor count, and the wall-time /
//! peak-memory comparison of the block-coordinate fitter against the
//! classical Newton-Raphson reference. Scales are configurable; the defaults
//! keep everything laptop-sized.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::time::Instant;

use thiserror::Error;

use crate::estimator::{
    fit_block_coordinate, fit_newton_raphson, nr_expanded_bytes, Engine, FitOptions,
};
use crate::event_data::{CovariateTable, RiskSetPolicy, TransitionKind};
use crate::inference::{alpha_covariance, greedy_select, AicFlavor};
use crate::likelihood::{BaselineGrid, LikelihoodGrid, ParamVector};
use crate::model::{ModelSpec, SubModelSpec};
use crate::oracle::Lcg;
use crate::simulator::{derive_seed, simulate, SimConfig, SubModelParams};
use crate::statistics::StatisticKind;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("need at least two replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("every replicate failed; first error: {0}")]
    AllReplicatesFailed(String),
    #[error("benchmark worker failed: {0}")]
    Worker(String),
    #[error(transparent)]
    Sim(#[from] crate::simulator::SimError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// small numerical helpers

/// Two-sided Kolmogorov-Smirnov statistic of sorted samples against a CDF.
pub fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (k, &x) in sorted.iter().enumerate() {
        let f = cdf(x);
        let hi = (k as f64 + 1.0) / n - f;
        let lo = f - k as f64 / n;
        d = d.max(hi).max(lo);
    }
    d
}

/// Asymptotic two-sided KS p-value (Kolmogorov distribution tail).
pub fn ks_pvalue(n: usize, d: f64) -> f64 {
    let n = n as f64;
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
    }
    p.clamp(0.0, 1.0)
}

/// KS test of samples against the unit exponential.
pub fn ks_test_exp1(samples: &[f64]) -> (f64, f64) {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let d = ks_statistic(&sorted, |x| 1.0 - (-x).exp());
    (d, ks_pvalue(sorted.len(), d))
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman_rho(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut j = k;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[k]] {
                j += 1;
            }
            let avg = (k + j) as f64 / 2.0 + 1.0;
            for &i in &idx[k..=j] {
                r[i] = avg;
            }
            k = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for k in 0..x.len() {
        num += (rx[k] - mx) * (ry[k] - my);
        dx += (rx[k] - mx) * (rx[k] - mx);
        dy += (ry[k] - my) * (ry[k] - my);
    }
    num / (dx * dy).sqrt().max(1e-300)
}

/// Standard normal quantile function (Acklam's rational approximation,
/// relative error below 1.2e-9).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

// ---------------------------------------------------------------------------
// performance metrics

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRow {
    pub name: String,
    pub truth: f64,
    pub ave: f64,
    pub rmse: f64,
    /// Fraction of replicates with |estimate - truth| <= 1.96 SE; NaN when no
    /// standard errors were supplied.
    pub cp: f64,
}

/// AVE, per-coordinate RMSE, and coverage over replicated estimates.
pub fn compute_metrics(
    names: &[String],
    truth: &[f64],
    estimates: &[Vec<f64>],
    ses: Option<&[Vec<f64>]>,
) -> Result<Vec<MetricsRow>, ExperimentError> {
    let s = estimates.len();
    if s < 2 {
        return Err(ExperimentError::TooFewReplicates(s));
    }
    let p = truth.len();
    if names.len() != p || estimates.iter().any(|e| e.len() != p) {
        return Err(ExperimentError::DimensionMismatch("estimates vs truth".into()));
    }
    if let Some(ses) = ses {
        if ses.len() != s || ses.iter().any(|e| e.len() != p) {
            return Err(ExperimentError::DimensionMismatch("ses vs estimates".into()));
        }
    }
    let mut rows = Vec::with_capacity(p);
    for k in 0..p {
        let ave = estimates.iter().map(|e| e[k]).sum::<f64>() / s as f64;
        let mse = estimates.iter().map(|e| (e[k] - truth[k]) * (e[k] - truth[k])).sum::<f64>() / s as f64;
        let cp = match ses {
            Some(ses) => {
                let covered = estimates
                    .iter()
                    .zip(ses)
                    .filter(|(e, se)| (e[k] - truth[k]).abs() <= 1.96 * se[k])
                    .count();
                covered as f64 / s as f64
            }
            None => f64::NAN,
        };
        rows.push(MetricsRow { name: names[k].clone(), truth: truth[k], ave, rmse: mse.sqrt(), cp });
    }
    Ok(rows)
}

/// Standardized errors (estimate - truth) / SE pooled over coordinates and
/// replicates, for normal-approximation QQ checks.
pub fn pooled_z(truth: &[f64], estimates: &[Vec<f64>], ses: &[Vec<f64>]) -> Vec<f64> {
    let mut z = Vec::new();
    for (e, se) in estimates.iter().zip(ses) {
        for k in 0..truth.len() {
            if se[k] > 0.0 {
                z.push((e[k] - truth[k]) / se[k]);
            }
        }
    }
    z
}

/// Per-pair integrated intensities between consecutive events of the pair,
/// computed on a likelihood grid under the supplied (true) parameters. Unit
/// exponential under the generating model; censored tail spans are dropped.
pub fn time_change_residuals(grid: &LikelihoodGrid, theta: &ParamVector) -> Vec<f64> {
    let exp_gamma: Vec<f64> = theta.gamma.iter().map(|&g| g.exp()).collect();
    let mut residuals = Vec::new();
    let mut acc = 0.0f64;
    let mut current_pair: Option<(u32, u32)> = None;
    for s in 0..grid.n_segments() {
        let pair = grid.seg_pair[s];
        if current_pair != Some(pair) {
            current_pair = Some(pair);
            acc = 0.0;
        }
        let p = grid.n_stats();
        let stats = &grid.seg_stats[s * p..s * p + p];
        let mut lin = theta.beta[pair.0 as usize] + theta.beta[pair.1 as usize];
        for (a, v) in theta.alpha.iter().zip(stats) {
            lin += a * v;
        }
        let (lo, hi) = (grid.seg_w_off[s] as usize, grid.seg_w_off[s + 1] as usize);
        let mut base = 0.0;
        for k in lo..hi {
            base += exp_gamma[grid.w_piece[k] as usize] * grid.w_len[k];
        }
        acc += lin.exp() * base;
        if grid.seg_y[s] == 1 {
            residuals.push(acc);
            acc = 0.0;
        }
    }
    residuals
}

// ---------------------------------------------------------------------------
// study 1 generator

/// Generating model of the recovery study: incidence statistics
/// (ccp, absdiff:x1, match:x2) with effects (-1/2, 1, 1/2); duration
/// statistics (ni, absdiff:x1, match:x2) with effects (1/2, 1/2, 1/2);
/// popularity effects Gaussian with means -6 - log(N)/10 and
/// 8/5 - log(N)/10; both baselines decrease linearly from 0 to -1/10 over
/// ten equal pieces.
#[derive(Debug, Clone)]
pub struct StudySetup {
    pub cfg: SimConfig,
    pub covs: CovariateTable,
    pub spec: ModelSpec,
}

pub const STUDY1_ALPHA_INC: [f64; 3] = [-0.5, 1.0, 0.5];
pub const STUDY1_ALPHA_DUR: [f64; 3] = [0.5, 0.5, 0.5];

pub fn study1_stats_incidence() -> Vec<StatisticKind> {
    vec![
        StatisticKind::CurrentCommonPartner,
        StatisticKind::AbsoluteDifference("x1".into()),
        StatisticKind::CategoricalMatch("x2".into()),
    ]
}

pub fn study1_stats_duration() -> Vec<StatisticKind> {
    vec![
        StatisticKind::NumberInteraction,
        StatisticKind::AbsoluteDifference("x1".into()),
        StatisticKind::CategoricalMatch("x2".into()),
    ]
}

pub fn study1_setup(n_actors: usize, window_end: f64, n_pieces: usize, seed: u64) -> StudySetup {
    let mut rng = Lcg(derive_seed(seed, u64::MAX));
    let mut covs = CovariateTable::new(n_actors);
    covs.insert_continuous("x1", (0..n_actors).map(|_| rng.normal()).collect());
    covs.insert_categorical("x2", (0..n_actors).map(|_| rng.below(3) as i64).collect());

    // Popularity intercepts are calibrated for the desk scale (T = 1e4,
    // N ~ 50-200): the dissolution mean must sit low enough that many ties
    // coexist (otherwise the current-common-partner statistic is identically
    // zero and its effect unidentifiable), and the overall event density high
    // enough that the profile-likelihood small-sample bias of the endogenous
    // statistic effects stays well inside the Monte-Carlo bands.
    let drift = (n_actors as f64).ln() / 10.0;
    let beta_inc: Vec<f64> = (0..n_actors).map(|_| -5.0 - drift + rng.normal()).collect();
    let beta_dur: Vec<f64> = (0..n_actors).map(|_| -3.0 - drift + rng.normal()).collect();
    let baseline = BaselineGrid::uniform(window_end, n_pieces).unwrap();
    let gamma: Vec<f64> = (0..n_pieces)
        .map(|q| -0.1 * q as f64 / (n_pieces as f64 - 1.0))
        .collect();

    let cfg = SimConfig {
        n_actors,
        window_end,
        incidence: SubModelParams {
            stats: study1_stats_incidence(),
            alpha: STUDY1_ALPHA_INC.to_vec(),
            beta: beta_inc,
            baseline: baseline.clone(),
            gamma: gamma.clone(),
        },
        duration: Some(SubModelParams {
            stats: study1_stats_duration(),
            alpha: STUDY1_ALPHA_DUR.to_vec(),
            beta: beta_dur,
            baseline: baseline.clone(),
            gamma,
        }),
        policy: RiskSetPolicy::Unrestricted,
        seed,
        max_events: 2_000_000,
    };
    let spec = ModelSpec {
        incidence: SubModelSpec { stats: study1_stats_incidence(), baseline: baseline.clone() },
        duration: Some(SubModelSpec { stats: study1_stats_duration(), baseline }),
        policy: RiskSetPolicy::Unrestricted,
    };
    StudySetup { cfg, covs, spec }
}

// ---------------------------------------------------------------------------
// study 1: recovery and selection

#[derive(Debug, Clone)]
pub struct RecoveryConfig {
    pub n_actors: usize,
    pub replicates: usize,
    pub window_end: f64,
    pub n_pieces: usize,
    pub seed: u64,
    /// Run greedy selection per replicate and score recovery of the
    /// generating statistic sets.
    pub select: bool,
    pub fit: FitOptions,
    pub aic: AicFlavor,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            n_actors: 100,
            replicates: 200,
            window_end: 10_000.0,
            n_pieces: 10,
            seed: 20_240_501,
            select: true,
            fit: FitOptions::default(),
            aic: AicFlavor::Standard,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RecoveryReport {
    pub incidence: Vec<MetricsRow>,
    pub duration: Vec<MetricsRow>,
    /// Pooled standardized errors over both sub-models' statistic effects.
    pub z_pool: Vec<f64>,
    pub selection_correct: usize,
    pub selection_total: usize,
    pub replicates_used: usize,
    pub replicates_failed: usize,
    pub wall_seconds: f64,
}

struct RepOutcome {
    alpha_inc: Vec<f64>,
    se_inc: Vec<f64>,
    alpha_dur: Vec<f64>,
    se_dur: Vec<f64>,
    selection_correct: Option<bool>,
}

pub fn run_recovery_study(cfg: &RecoveryConfig) -> Result<RecoveryReport, ExperimentError> {
    let start = Instant::now();
    let setup = study1_setup(cfg.n_actors, cfg.window_end, cfg.n_pieces, cfg.seed);
    let outcomes: Vec<Result<RepOutcome, String>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_recovery_replicate(cfg, &setup, r as u64).map_err(|e| e.to_string()))
        .collect();

    let mut ok = Vec::new();
    let mut failed = 0usize;
    let mut first_err = None;
    for o in outcomes {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => {
                failed += 1;
                first_err.get_or_insert(e);
            }
        }
    }
    if ok.len() < 2 {
        return Err(ExperimentError::AllReplicatesFailed(
            first_err.unwrap_or_else(|| "fewer than two successful replicates".into()),
        ));
    }

    let names_inc: Vec<String> = study1_stats_incidence().iter().map(|s| s.to_string()).collect();
    let names_dur: Vec<String> = study1_stats_duration().iter().map(|s| s.to_string()).collect();
    let est_inc: Vec<Vec<f64>> = ok.iter().map(|o| o.alpha_inc.clone()).collect();
    let se_inc: Vec<Vec<f64>> = ok.iter().map(|o| o.se_inc.clone()).collect();
    let est_dur: Vec<Vec<f64>> = ok.iter().map(|o| o.alpha_dur.clone()).collect();
    let se_dur: Vec<Vec<f64>> = ok.iter().map(|o| o.se_dur.clone()).collect();

    let incidence = compute_metrics(&names_inc, &STUDY1_ALPHA_INC, &est_inc, Some(&se_inc))?;
    let duration = compute_metrics(&names_dur, &STUDY1_ALPHA_DUR, &est_dur, Some(&se_dur))?;
    let mut z_pool = pooled_z(&STUDY1_ALPHA_INC, &est_inc, &se_inc);
    z_pool.extend(pooled_z(&STUDY1_ALPHA_DUR, &est_dur, &se_dur));

    let selection_total = ok.iter().filter(|o| o.selection_correct.is_some()).count();
    let selection_correct = ok.iter().filter(|o| o.selection_correct == Some(true)).count();
    Ok(RecoveryReport {
        incidence,
        duration,
        z_pool,
        selection_correct,
        selection_total,
        replicates_used: ok.len(),
        replicates_failed: failed,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

fn run_recovery_replicate(
    cfg: &RecoveryConfig,
    setup: &StudySetup,
    rep: u64,
) -> Result<RepOutcome, crate::DemError> {
    let mut sim_cfg = setup.cfg.clone();
    sim_cfg.seed = derive_seed(cfg.seed, rep);
    let out = simulate(&sim_cfg, &setup.covs)?;

    // Fit the generating specification.
    let fit = crate::estimator::fit_stream(
        &out.stream,
        &setup.covs,
        &setup.spec,
        &cfg.fit,
        Engine::BlockCoordinate,
    )?;
    let cov_inc = alpha_covariance(&fit.incidence.grid, &fit.incidence.result.theta)?;
    let dur = fit.duration.as_ref().expect("durational study");
    let cov_dur = alpha_covariance(&dur.grid, &dur.result.theta)?;

    // Greedy selection from the base model (incidence: ccp only; duration:
    // empty) over the generating covariate pool.
    let selection_correct = if cfg.select {
        let base = ModelSpec {
            incidence: SubModelSpec {
                stats: vec![StatisticKind::CurrentCommonPartner],
                baseline: setup.spec.incidence.baseline.clone(),
            },
            duration: Some(SubModelSpec {
                stats: vec![],
                baseline: setup.spec.duration.as_ref().unwrap().baseline.clone(),
            }),
            policy: setup.spec.policy,
        };
        let inc_pool = vec![
            StatisticKind::AbsoluteDifference("x1".into()),
            StatisticKind::CategoricalMatch("x2".into()),
        ];
        let dur_pool = vec![
            StatisticKind::NumberInteraction,
            StatisticKind::AbsoluteDifference("x1".into()),
            StatisticKind::CategoricalMatch("x2".into()),
        ];
        let sel = greedy_select(&out.stream, &setup.covs, &base, &inc_pool, &dur_pool, &cfg.fit, cfg.aic)?;
        let as_set = |v: &[StatisticKind]| {
            let mut s: Vec<String> = v.iter().map(|k| k.to_string()).collect();
            s.sort();
            s
        };
        let correct = as_set(&sel.spec.incidence.stats) == as_set(&setup.spec.incidence.stats)
            && as_set(&sel.spec.duration.as_ref().unwrap().stats)
                == as_set(&setup.spec.duration.as_ref().unwrap().stats);
        Some(correct)
    } else {
        None
    };

    Ok(RepOutcome {
        alpha_inc: fit.incidence.result.theta.alpha.clone(),
        se_inc: cov_inc.se,
        alpha_dur: dur.result.theta.alpha.clone(),
        se_dur: cov_dur.se,
        selection_correct,
    })
}

// ---------------------------------------------------------------------------
// study 2: scaling in the number of actors

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub window_end: f64,
    pub n_pieces: usize,
    pub seed: u64,
    pub fit: FitOptions,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            n_grid: vec![50, 100, 150, 200],
            replicates: 30,
            window_end: 10_000.0,
            n_pieces: 10,
            seed: 20_240_502,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub n_actors: usize,
    pub sub_model: String,
    /// Per-coordinate-normalized block RMSEs, comparable across N.
    pub alpha_rmse: f64,
    pub beta_rmse: f64,
    pub gamma_rmse: f64,
    pub replicates_used: usize,
}

#[derive(Debug, Serialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub wall_seconds: f64,
}

fn block_rmse(errors: &[Vec<f64>]) -> f64 {
    let total: f64 = errors.iter().flat_map(|e| e.iter()).map(|x| x * x).sum();
    let count: usize = errors.iter().map(|e| e.len()).sum();
    (total / count as f64).sqrt()
}

pub fn run_scaling_study(cfg: &ScalingConfig) -> Result<ScalingReport, ExperimentError> {
    let start = Instant::now();
    let mut rows = Vec::new();
    for (gi, &n) in cfg.n_grid.iter().enumerate() {
        let setup = study1_setup(n, cfg.window_end, cfg.n_pieces, derive_seed(cfg.seed, gi as u64));
        let reps: Vec<Result<_, String>> = (0..cfg.replicates)
            .into_par_iter()
            .map(|r| {
                let mut sim_cfg = setup.cfg.clone();
                sim_cfg.seed = derive_seed(sim_cfg.seed, 1_000_000 + r as u64);
                (|| -> Result<_, crate::DemError> {
                    let out = simulate(&sim_cfg, &setup.covs)?;
                    let fit = crate::estimator::fit_stream(
                        &out.stream,
                        &setup.covs,
                        &setup.spec,
                        &cfg.fit,
                        Engine::BlockCoordinate,
                    )?;
                    Ok(fit)
                })()
                .map_err(|e| e.to_string())
            })
            .collect();

        for (kind, truth_sub) in [
            (TransitionKind::Formation, &setup.cfg.incidence),
            (TransitionKind::Dissolution, setup.cfg.duration.as_ref().unwrap()),
        ] {
            let mut alpha_err = Vec::new();
            let mut beta_err = Vec::new();
            let mut gamma_err = Vec::new();
            for rep in reps.iter().flatten() {
                let side = match kind {
                    TransitionKind::Formation => &rep.incidence,
                    TransitionKind::Dissolution => rep.duration.as_ref().unwrap(),
                };
                let theta = &side.result.theta;
                alpha_err.push(
                    theta
                        .alpha
                        .iter()
                        .zip(&truth_sub.alpha)
                        .map(|(a, t)| a - t)
                        .collect::<Vec<f64>>(),
                );
                // floored actors are excluded: their truth generated events
                // with probability ~0 and the estimate is a pin, not an MLE
                let floored: std::collections::HashSet<u32> =
                    side.result.floored_actors.iter().copied().collect();
                beta_err.push(
                    theta
                        .beta
                        .iter()
                        .zip(&truth_sub.beta)
                        .enumerate()
                        .filter(|(a, _)| !floored.contains(&(*a as u32)))
                        .map(|(_, (b, t))| b - t)
                        .collect::<Vec<f64>>(),
                );
                let gamma_orig = side.grid.gamma_per_original_piece(&theta.gamma);
                gamma_err.push(
                    gamma_orig
                        .iter()
                        .zip(&truth_sub.gamma)
                        .map(|(g, t)| g - t)
                        .collect::<Vec<f64>>(),
                );
            }
            if alpha_err.len() < 2 {
                return Err(ExperimentError::AllReplicatesFailed(format!(
                    "scaling study at N = {n}"
                )));
            }
            rows.push(ScalingRow {
                n_actors: n,
                sub_model: match kind {
                    TransitionKind::Formation => "incidence".into(),
                    TransitionKind::Dissolution => "duration".into(),
                },
                alpha_rmse: block_rmse(&alpha_err),
                beta_rmse: block_rmse(&beta_err),
                gamma_rmse: block_rmse(&gamma_err),
                replicates_used: alpha_err.len(),
            });
        }
    }
    Ok(ScalingReport { rows, wall_seconds: start.elapsed().as_secs_f64() })
}

// ---------------------------------------------------------------------------
// study 3: benchmark

/// Bench data generator: covariate-driven model with constant popularity
/// levels (no drift in N), so event counts grow quadratically and the
/// classical fitter's expanded design grows with them.
pub fn bench_setup(n_actors: usize, window_end: f64, n_pieces: usize, seed: u64, beta_inc: f64) -> StudySetup {
    let mut rng = Lcg(derive_seed(seed, u64::MAX - 1));
    let mut covs = CovariateTable::new(n_actors);
    covs.insert_continuous("x1", (0..n_actors).map(|_| rng.normal()).collect());
    covs.insert_categorical("x2", (0..n_actors).map(|_| rng.below(3) as i64).collect());
    let baseline = BaselineGrid::uniform(window_end, n_pieces).unwrap();
    let gamma: Vec<f64> = (0..n_pieces).map(|q| -0.05 * q as f64).collect();
    let stats_inc = vec![
        StatisticKind::NumberInteraction,
        StatisticKind::AbsoluteDifference("x1".into()),
        StatisticKind::CategoricalMatch("x2".into()),
    ];
    let stats_dur = stats_inc.clone();
    let cfg = SimConfig {
        n_actors,
        window_end,
        incidence: SubModelParams {
            stats: stats_inc.clone(),
            alpha: vec![0.3, 0.5, 0.3],
            beta: vec![beta_inc; n_actors],
            baseline: baseline.clone(),
            gamma: gamma.clone(),
        },
        duration: Some(SubModelParams {
            stats: stats_dur.clone(),
            alpha: vec![-0.1, 0.2, 0.2],
            beta: vec![0.8; n_actors],
            baseline: baseline.clone(),
            gamma: gamma.clone(),
        }),
        policy: RiskSetPolicy::Unrestricted,
        seed,
        max_events: 2_000_000,
    };
    let spec = ModelSpec {
        incidence: SubModelSpec { stats: stats_inc, baseline: baseline.clone() },
        duration: Some(SubModelSpec { stats: stats_dur, baseline }),
        policy: RiskSetPolicy::Unrestricted,
    };
    StudySetup { cfg, covs, spec }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Actor counts to run both engines on (subject to the guard).
    pub n_grid: Vec<usize>,
    pub window_end: f64,
    pub n_pieces: usize,
    pub seed: u64,
    /// Working-set guard for the classical fitter.
    pub mem_guard_bytes: u64,
    pub fit: FitOptions,
    /// Popularity level of the bench generator.
    pub beta_inc: f64,
    /// How to launch the isolated per-fit worker process.
    pub worker: WorkerSpawn,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_grid: vec![25, 50, 75, 100, 125, 150, 250],
            window_end: 400.0,
            n_pieces: 4,
            seed: 20_240_503,
            mem_guard_bytes: 16 * (1 << 30),
            fit: FitOptions::default(),
            beta_inc: -4.0,
            worker: WorkerSpawn::CurrentExe { prefix_args: vec![] },
        }
    }
}

#[derive(Debug, Clone)]
pub enum WorkerSpawn {
    /// Launch `program` with `prefix_args`; the worker request arrives on
    /// stdin as one JSON document and the response is the last stdout line.
    Command { program: PathBuf, prefix_args: Vec<String> },
    /// Re-launch the current executable (for binaries embedding the worker).
    CurrentExe { prefix_args: Vec<String> },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WorkerRequest {
    pub sim: SimConfig,
    pub covariates: CovariateTable,
    pub spec: ModelSpec,
    pub engine: Engine,
    pub fit: FitOptions,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WorkerResponse {
    pub wall_seconds: f64,
    pub grid_build_seconds: f64,
    pub ll: f64,
    pub alpha_incidence: Vec<f64>,
    pub alpha_duration: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub peak_rss_bytes: u64,
    pub error: Option<String>,
}

/// Worker body: regenerate the stream from the seeded config, build both
/// grids (untimed), fit both sub-models (timed), self-report the peak
/// resident set. Runs single-threaded; no I/O inside the timed region.
pub fn run_worker(req: &WorkerRequest) -> WorkerResponse {
    let fail = |msg: String| WorkerResponse {
        wall_seconds: 0.0,
        grid_build_seconds: 0.0,
        ll: f64::NAN,
        alpha_incidence: vec![],
        alpha_duration: vec![],
        iterations: 0,
        converged: false,
        peak_rss_bytes: read_vm_hwm_self(),
        error: Some(msg),
    };
    let out = match simulate(&req.sim, &req.covariates) {
        Ok(o) => o,
        Err(e) => return fail(e.to_string()),
    };
    let build_start = Instant::now();
    let grids: Result<Vec<LikelihoodGrid>, _> = [
        (TransitionKind::Formation, &req.spec.incidence),
        (TransitionKind::Dissolution, req.spec.duration.as_ref().expect("bench uses durational models")),
    ]
    .into_iter()
    .map(|(kind, sub)| {
        LikelihoodGrid::build(
            &out.stream,
            &req.covariates,
            &sub.stats,
            &sub.baseline,
            req.spec.policy,
            kind,
            false,
        )
    })
    .collect();
    let grids = match grids {
        Ok(g) => g,
        Err(e) => return fail(e.to_string()),
    };
    let grid_build_seconds = build_start.elapsed().as_secs_f64();

    let timed = Instant::now();
    let mut results = Vec::new();
    for grid in &grids {
        let r = match req.engine {
            Engine::BlockCoordinate => fit_block_coordinate(grid, &req.fit),
            Engine::NewtonRaphson => fit_newton_raphson(grid, &req.fit),
        };
        match r {
            Ok(f) => results.push(f),
            Err(e) => return fail(e.to_string()),
        }
    }
    let wall_seconds = timed.elapsed().as_secs_f64();
    WorkerResponse {
        wall_seconds,
        grid_build_seconds,
        ll: results.iter().map(|r| r.final_ll()).sum(),
        alpha_incidence: results[0].theta.alpha.clone(),
        alpha_duration: results[1].theta.alpha.clone(),
        iterations: results.iter().map(|r| r.iterations).sum(),
        converged: results.iter().all(|r| r.converged),
        peak_rss_bytes: read_vm_hwm_self(),
        error: None,
    }
}

/// Serves one worker request from stdin to stdout; binary entry point.
pub fn worker_main() -> std::io::Result<()> {
    let mut input = String::new();
    std::io::Read::read_to_string(&mut std::io::stdin().lock(), &mut input)?;
    let req: WorkerRequest = serde_json::from_str(&input)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    let resp = run_worker(&req);
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string(&resp).expect("serializable response"))?;
    Ok(())
}

fn read_vm_hwm_self() -> u64 {
    read_vm_hwm(&PathBuf::from("/proc/self/status"))
}

fn read_vm_hwm(path: &std::path::Path) -> u64 {
    if let Ok(status) = std::fs::read_to_string(path) {
        for line in status.lines() {
            if let Some(rest) = line.strip_prefix("VmHWM:") {
                return rest.trim().trim_end_matches("kB").trim().parse::<u64>().unwrap_or(0) * 1024;
            }
        }
    }
    0
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub n_actors: usize,
    pub engine: String,
    pub transitions: usize,
    pub wall_seconds: f64,
    pub peak_bytes: u64,
    pub converged: bool,
    pub infeasible: bool,
    pub threads: usize,
    pub note: String,
    #[serde(skip)]
    pub alpha_incidence: Vec<f64>,
    #[serde(skip)]
    pub ll: f64,
}

#[derive(Debug, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub wall_seconds: f64,
}

/// Spawns the worker, samples its peak resident set from the OS at 20 Hz
/// while it runs, and takes the max of the samples and the worker's own
/// final reading.
fn spawn_and_measure(
    spawn: &WorkerSpawn,
    req: &WorkerRequest,
) -> Result<(WorkerResponse, u64), ExperimentError> {
    let (program, prefix) = match spawn {
        WorkerSpawn::Command { program, prefix_args } => (program.clone(), prefix_args.clone()),
        WorkerSpawn::CurrentExe { prefix_args } => (
            std::env::current_exe().map_err(ExperimentError::Io)?,
            prefix_args.clone(),
        ),
    };
    let mut child = std::process::Command::new(&program)
        .args(&prefix)
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::inherit())
        .spawn()
        .map_err(|e| ExperimentError::Worker(format!("spawn {}: {e}", program.display())))?;
    {
        let mut stdin = child.stdin.take().expect("piped stdin");
        let payload = serde_json::to_string(req).expect("serializable request");
        stdin.write_all(payload.as_bytes())?;
    }
    let pid = child.id();
    let status_path = PathBuf::from(format!("/proc/{pid}/status"));
    let stdout = child.stdout.take().expect("piped stdout");
    let reader_handle = std::thread::spawn(move || {
        let mut last_line = String::new();
        for line in std::io::BufReader::new(stdout).lines().map_while(Result::ok) {
            if !line.trim().is_empty() {
                last_line = line;
            }
        }
        last_line
    });

    let mut sampled_peak = 0u64;
    loop {
        match child.try_wait()? {
            Some(_status) => break,
            None => {
                sampled_peak = sampled_peak.max(read_vm_hwm(&status_path));
                std::thread::sleep(std::time::Duration::from_millis(50));
            }
        }
    }
    let last_line = reader_handle
        .join()
        .map_err(|_| ExperimentError::Worker("stdout reader panicked".into()))?;
    if last_line.is_empty() {
        return Err(ExperimentError::Worker("worker produced no output".into()));
    }
    let resp: WorkerResponse = serde_json::from_str(&last_line)
        .map_err(|e| ExperimentError::Worker(format!("bad worker output: {e}")))?;
    let peak = sampled_peak.max(resp.peak_rss_bytes);
    Ok((resp, peak))
}

pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport, ExperimentError> {
    let start = Instant::now();
    let mut rows = Vec::new();
    for (gi, &n) in cfg.n_grid.iter().enumerate() {
        let setup = bench_setup(n, cfg.window_end, cfg.n_pieces, derive_seed(cfg.seed, gi as u64), cfg.beta_inc);
        // One shared simulated dataset per N: the guard estimate needs the
        // exact expanded row count, which needs the stream.
        let out = simulate(&setup.cfg, &setup.covs)?;
        let mut nr_bytes = 0u64;
        for (kind, sub) in [
            (TransitionKind::Formation, &setup.spec.incidence),
            (TransitionKind::Dissolution, setup.spec.duration.as_ref().unwrap()),
        ] {
            let grid = LikelihoodGrid::build(
                &out.stream,
                &setup.covs,
                &sub.stats,
                &sub.baseline,
                setup.spec.policy,
                kind,
                false,
            )
            .map_err(|e| ExperimentError::Worker(e.to_string()))?;
            nr_bytes += nr_expanded_bytes(&grid);
        }

        for engine in [Engine::BlockCoordinate, Engine::NewtonRaphson] {
            let engine_name = match engine {
                Engine::BlockCoordinate => "block_coordinate",
                Engine::NewtonRaphson => "newton_raphson",
            };
            if engine == Engine::NewtonRaphson && nr_bytes > cfg.mem_guard_bytes {
                rows.push(BenchRow {
                    n_actors: n,
                    engine: engine_name.into(),
                    transitions: out.transitions,
                    wall_seconds: f64::NAN,
                    peak_bytes: 0,
                    converged: false,
                    infeasible: true,
                    threads: 1,
                    note: format!(
                        "estimated working set {} bytes exceeds guard {}",
                        nr_bytes, cfg.mem_guard_bytes
                    ),
                    alpha_incidence: vec![],
                    ll: f64::NAN,
                });
                continue;
            }
            let mut fit = cfg.fit.clone();
            fit.nr_mem_guard_bytes = cfg.mem_guard_bytes;
            let req = WorkerRequest {
                sim: setup.cfg.clone(),
                covariates: setup.covs.clone(),
                spec: setup.spec.clone(),
                engine,
                fit,
            };
            let (resp, peak) = spawn_and_measure(&cfg.worker, &req)?;
            if let Some(err) = &resp.error {
                return Err(ExperimentError::Worker(format!("N = {n}, {engine_name}: {err}")));
            }
            rows.push(BenchRow {
                n_actors: n,
                engine: engine_name.into(),
                transitions: out.transitions,
                wall_seconds: resp.wall_seconds,
                peak_bytes: peak,
                converged: resp.converged,
                infeasible: false,
                threads: 1,
                note: match engine {
                    Engine::NewtonRaphson => {
                        "damped NR: step-halving (x1/2, max 60) with ridge 1e-9(1+tr/d)".into()
                    }
                    Engine::BlockCoordinate => String::new(),
                },
                alpha_incidence: resp.alpha_incidence,
                ll: resp.ll,
            });
        }
    }
    Ok(BenchReport { rows, wall_seconds: start.elapsed().as_secs_f64() })
}

// ---------------------------------------------------------------------------
// CSV rendering (deterministic formatting)

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.9e}")
    }
}

pub fn recovery_csv(report: &RecoveryReport) -> String {
    let mut s = String::from("sub_model,stat,truth,ave,rmse,cp\n");
    for (side, rows) in [("incidence", &report.incidence), ("duration", &report.duration)] {
        for r in rows {
            s.push_str(&format!(
                "{side},{},{},{},{},{}\n",
                r.name,
                fmt(r.truth),
                fmt(r.ave),
                fmt(r.rmse),
                fmt(r.cp)
            ));
        }
    }
    s
}

/// QQ table of the pooled standardized errors against normal quantiles.
pub fn qq_csv(z_pool: &[f64]) -> String {
    let mut sorted = z_pool.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut s = String::from("rank,theoretical,sample\n");
    for (k, z) in sorted.iter().enumerate() {
        let p = (k as f64 + 0.5) / n as f64;
        s.push_str(&format!("{},{},{}\n", k + 1, fmt(normal_quantile(p)), fmt(*z)));
    }
    s
}

pub fn scaling_csv(report: &ScalingReport) -> String {
    let mut s = String::from("n_actors,sub_model,alpha_rmse,beta_rmse,gamma_rmse,replicates\n");
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.n_actors,
            r.sub_model,
            fmt(r.alpha_rmse),
            fmt(r.beta_rmse),
            fmt(r.gamma_rmse),
            r.replicates_used
        ));
    }
    s
}

pub fn bench_csv(report: &BenchReport) -> String {
    let mut s = String::from("n_actors,engine,transitions,wall_seconds,peak_bytes,converged,infeasible,threads,note\n");
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.n_actors,
            r.engine,
            r.transitions,
            fmt(r.wall_seconds),
            r.peak_bytes,
            r.converged,
            r.infeasible,
            r.threads,
            r.note.replace(',', ";")
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_trivial_cases() {
        let names = vec!["a".to_string(), "b".to_string()];
        let truth = vec![1.0, -2.0];
        // all estimates equal truth
        let est = vec![truth.clone(), truth.clone(), truth.clone()];
        let ses = vec![vec![1.0, 1.0]; 3];
        let rows = compute_metrics(&names, &truth, &est, Some(&ses)).unwrap();
        for (r, t) in rows.iter().zip(&truth) {
            assert_eq!(r.ave, *t);
            assert_eq!(r.rmse, 0.0);
            assert_eq!(r.cp, 1.0);
        }
        // two estimates truth +- 1 with SE 1: AVE = truth, RMSE = 1, CP = 1
        let est = vec![vec![2.0, -1.0], vec![0.0, -3.0]];
        let ses = vec![vec![1.0, 1.0]; 2];
        let rows = compute_metrics(&names, &truth, &est, Some(&ses)).unwrap();
        for (r, t) in rows.iter().zip(&truth) {
            assert!((r.ave - t).abs() < 1e-15);
            assert!((r.rmse - 1.0).abs() < 1e-15);
            assert_eq!(r.cp, 1.0);
        }
        // rmse^2 >= (ave - truth)^2 componentwise
        for r in &rows {
            assert!(r.rmse * r.rmse >= (r.ave - r.truth) * (r.ave - r.truth) - 1e-15);
        }
        assert!(compute_metrics(&names, &truth, &est[..1].to_vec(), None).is_err());
    }

    #[test]
    fn ks_helpers_behave() {
        // uniform samples against the uniform CDF: p should be comfortable
        let mut rng = Lcg(5);
        let samples: Vec<f64> = (0..500).map(|_| rng.uniform()).collect();
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let d = ks_statistic(&sorted, |x| x.clamp(0.0, 1.0));
        let p = ks_pvalue(sorted.len(), d);
        assert!(p > 0.01, "uniform KS rejected: d={d}, p={p}");
        // exponential samples against Exp(1)
        let exp_samples: Vec<f64> = (0..2000).map(|_| -(1.0 - rng.uniform()).ln()).collect();
        let (d, p) = ks_test_exp1(&exp_samples);
        assert!(p > 0.01, "exp KS rejected: d={d}, p={p}");
        // clearly wrong distribution is rejected
        let bad: Vec<f64> = (0..2000).map(|_| 3.0 * -(1.0 - rng.uniform()).ln()).collect();
        let (_, p_bad) = ks_test_exp1(&bad);
        assert!(p_bad < 1e-6);
    }

    #[test]
    fn spearman_signs() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        assert!((spearman_rho(&x, &[2.0, 3.0, 9.0, 11.0]) - 1.0).abs() < 1e-12);
        assert!((spearman_rho(&x, &[5.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn normal_quantile_known_values() {
        assert!((normal_quantile(0.5)).abs() < 1e-9);
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-5);
        assert!((normal_quantile(0.025) + 1.959964).abs() < 1e-5);
    }

    #[test]
    fn time_change_residuals_are_unit_exponential() {
        // Residuals between a pair's consecutive events under the generating
        // model. Censored tail spans are dropped, which right-truncates the
        // observed gaps, so the check needs many events per pair for the
        // edge effect to be negligible (here ~100 per pair).
        let setup = bench_setup(6, 2000.0, 1, 99, -2.0);
        let mut pool = Vec::new();
        for rep in 0..6u64 {
            let mut cfg = setup.cfg.clone();
            cfg.seed = derive_seed(cfg.seed, rep);
            let out = simulate(&cfg, &setup.covs).unwrap();
            for (kind, sub) in [
                (TransitionKind::Formation, &setup.cfg.incidence),
                (TransitionKind::Dissolution, setup.cfg.duration.as_ref().unwrap()),
            ] {
                let grid = LikelihoodGrid::build(
                    &out.stream,
                    &setup.covs,
                    &sub.stats,
                    &sub.baseline,
                    RiskSetPolicy::Unrestricted,
                    kind,
                    false,
                )
                .unwrap();
                // dense enough that no pieces merge: effective = original
                assert_eq!(grid.n_pieces(), sub.baseline.n_pieces());
                let theta = ParamVector {
                    alpha: sub.alpha.clone(),
                    beta: sub.beta.clone(),
                    gamma: sub.gamma.clone(),
                };
                pool.extend(time_change_residuals(&grid, &theta));
            }
        }
        assert!(pool.len() > 100);
        let (d, p) = ks_test_exp1(&pool);
        assert!(p > 0.01, "residual KS rejected: d={d}, p={p}, n={}", pool.len());
    }

    #[test]
    fn csv_shapes() {
        let report = RecoveryReport {
            incidence: vec![MetricsRow { name: "ccp".into(), truth: -0.5, ave: -0.51, rmse: 0.07, cp: 0.95 }],
            duration: vec![],
            z_pool: vec![-0.3, 1.2, 0.1],
            selection_correct: 9,
            selection_total: 10,
            replicates_used: 10,
            replicates_failed: 0,
            wall_seconds: 1.0,
        };
        let csv = recovery_csv(&report);
        assert!(csv.starts_with("sub_model,stat,truth,ave,rmse,cp\n"));
        assert_eq!(csv.lines().count(), 2);
        let qq = qq_csv(&report.z_pool);
        assert_eq!(qq.lines().count(), 4);
    }
}
