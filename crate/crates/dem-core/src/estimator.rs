//! Sub-model fitting.
//!
//! `fit_block_coordinate` is the three-step scheme: a Newton-Raphson update
//! of the statistic effects (with step-halving, the one step without an
//! intrinsic ascent guarantee), a minorize-maximize update of the popularity
//! effects, and a closed-form update of the baseline levels. Steps 2 and 3
//! never decrease the likelihood by construction; step 1 is guarded.
//!
//! `fit_newton_raphson` is the classical full-parameter reference it is
//! benchmarked against: the grid is expanded into one Poisson
//! pseudo-observation per (grid interval x at-risk pair) -- the design-matrix
//! route -- and each iteration assembles the dense (P+N+Q)^2 system. It
//! serves as the oracle in cross-method tests and as the benchmark baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::time::Instant;

use thiserror::Error;

use crate::event_data::{pair_index, CovariateTable, EventStream};
use crate::likelihood::{
    cexp, LikelihoodError, LikelihoodGrid, ParamVector,
};
use crate::model::ModelSpec;

/// Popularity pin for actors with no events in the sub-model (their MLE is
/// -inf); excluded from convergence norms.
pub const BETA_FLOOR: f64 = -30.0;

/// Cap symmetric to the floor, for degenerate zero-exposure updates.
const BETA_CAP: f64 = 30.0;

const MAX_HALVINGS: usize = 30;
const NR_MAX_HALVINGS: usize = 60;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("singular Hessian in the statistic-effect update (ridge escalation exhausted)")]
    SingularHessian,
    #[error("log-likelihood non-finite at iteration {0}")]
    NonFiniteLikelihood(usize),
    #[error("sub-model has no events")]
    NoEvents,
    #[error("baseline piece {0} has events but zero exposure (data inconsistency)")]
    ZeroExposureInterval(usize),
    #[error("actor {0} has events but zero at-risk exposure (data inconsistency)")]
    ZeroExposureActor(u32),
    #[error("instance too large for the reference fitter: {0}")]
    InstanceTooLarge(String),
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaOrder {
    /// Simultaneous update with the previous iterate's factors; the exact
    /// maximizer of the separable surrogate.
    Jacobi,
    /// In-index-order update using already-updated factors.
    GaussSeidel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    BlockCoordinate,
    NewtonRaphson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub tol_param: f64,
    pub tol_rel_ll: f64,
    pub max_iter: usize,
    pub beta_order: BetaOrder,
    pub step1_halving: bool,
    /// Estimated working-set cap for the classical reference fitter.
    pub nr_mem_guard_bytes: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol_param: 1e-3,
            tol_rel_ll: 1e-3,
            max_iter: 500,
            beta_order: BetaOrder::Jacobi,
            step1_halving: true,
            nr_mem_guard_bytes: 16 * (1 << 30),
        }
    }
}

impl FitOptions {
    /// Tight tolerances for oracle comparisons.
    pub fn tight() -> Self {
        FitOptions { tol_param: 1e-7, tol_rel_ll: 1e-10, max_iter: 20_000, ..Default::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    /// Converged estimate, normalized so gamma[0] = 0.
    pub theta: ParamVector,
    /// Log-likelihood at the seed and after each full iteration.
    pub ll_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_time: f64,
    pub peak_memory: u64,
    /// Actors pinned at `BETA_FLOOR` (no events in this sub-model).
    pub floored_actors: Vec<u32>,
}

impl FitResult {
    pub fn final_ll(&self) -> f64 {
        *self.ll_trace.last().unwrap()
    }
}

/// Shifts the baseline so gamma[0] = 0, compensating through the popularity
/// effects; every pair intensity is unchanged.
pub fn normalize_identifiability(theta: &mut ParamVector) {
    if theta.gamma.is_empty() {
        return;
    }
    let c = theta.gamma[0];
    for g in theta.gamma.iter_mut() {
        *g -= c;
    }
    for b in theta.beta.iter_mut() {
        *b += c / 2.0;
    }
}

fn normalized_copy(theta: &ParamVector) -> ParamVector {
    let mut t = theta.clone();
    normalize_identifiability(&mut t);
    t
}

/// L2 distance between normalized representatives, floored entries excluded.
fn param_distance(a: &ParamVector, b: &ParamVector, floored: &[bool]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.alpha.iter().zip(&b.alpha) {
        s += (x - y) * (x - y);
    }
    for (k, (x, y)) in a.beta.iter().zip(&b.beta).enumerate() {
        if !floored[k] {
            s += (x - y) * (x - y);
        }
    }
    for (x, y) in a.gamma.iter().zip(&b.gamma) {
        s += (x - y) * (x - y);
    }
    s.sqrt()
}

fn rel_ll_change(prev: f64, next: f64) -> f64 {
    let denom = prev.abs().max(1e-300);
    ((next - prev) / denom).abs()
}

fn peak_rss_bytes() -> u64 {
    if let Ok(status) = std::fs::read_to_string("/proc/self/status") {
        for line in status.lines() {
            if let Some(rest) = line.strip_prefix("VmHWM:") {
                let kb: u64 = rest
                    .trim()
                    .trim_end_matches("kB")
                    .trim()
                    .parse()
                    .unwrap_or(0);
                return kb * 1024;
            }
        }
    }
    0
}

/// Ridge-escalated solve of (-H) d = g for a positive semidefinite -H.
fn solve_spd_with_ridge(neg_h: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>, FitError> {
    let p = neg_h.nrows();
    if p == 0 {
        return Ok(DVector::zeros(0));
    }
    let trace_scale = (neg_h.trace() / p as f64).abs().max(1e-12);
    let mut ridge = 0.0f64;
    loop {
        let m = if ridge > 0.0 {
            let mut m = neg_h.clone();
            for k in 0..p {
                m[(k, k)] += ridge;
            }
            m
        } else {
            neg_h.clone()
        };
        if let Some(chol) = m.cholesky() {
            let d = chol.solve(g);
            if d.iter().all(|v| v.is_finite()) {
                return Ok(d);
            }
        }
        ridge = if ridge == 0.0 { 1e-8 * trace_scale } else { ridge * 10.0 };
        if ridge > 1e-2 * trace_scale * 1.0001 {
            return Err(FitError::SingularHessian);
        }
    }
}

/// Step 1: Newton-Raphson update of the statistic effects, step-halved until
/// the likelihood does not decrease. Returns the new alpha and the
/// log-likelihood there.
pub fn alpha_step(
    grid: &LikelihoodGrid,
    theta: &ParamVector,
    current_ll: f64,
    halving: bool,
) -> Result<(Vec<f64>, f64), FitError> {
    let p = grid.n_stats();
    if p == 0 {
        return Ok((Vec::new(), current_ll));
    }
    let (g, h) = grid.alpha_derivatives(theta)?;
    let step = solve_spd_with_ridge(&(-h), &g)?;
    let mut scale = 1.0f64;
    let mut trial = theta.clone();
    for _ in 0..=MAX_HALVINGS {
        for (k, a) in trial.alpha.iter_mut().enumerate() {
            *a = theta.alpha[k] + scale * step[k];
        }
        let ll = grid.log_likelihood(&trial)?;
        if !halving || (ll.is_finite() && ll >= current_ll - 1e-12 * current_ll.abs().max(1.0)) {
            if !ll.is_finite() {
                return Err(FitError::NonFiniteLikelihood(0));
            }
            return Ok((trial.alpha, ll));
        }
        scale *= 0.5;
    }
    // No admissible step; keep the current point.
    Ok((theta.alpha.clone(), current_ll))
}

/// Step 2: minorize-maximize update of the popularity effects,
/// beta_i <- log sqrt(p_i * Y_i / sum_j G_ij p_j), with the previous
/// iterate's factors (Jacobi) or already-updated ones (Gauss-Seidel).
pub fn beta_step(
    grid: &LikelihoodGrid,
    theta: &ParamVector,
    order: BetaOrder,
    floored: &[bool],
    pair_exposure_scratch: &mut Vec<f64>,
) -> Result<Vec<f64>, FitError> {
    let n = grid.n_actors;
    let exp_gamma: Vec<f64> = theta.gamma.iter().map(|&g| cexp(g)).collect();
    pair_exposure_scratch.resize(crate::event_data::n_pairs(n), 0.0);
    grid.pair_exposure_against(&theta.alpha, &exp_gamma, pair_exposure_scratch)?;
    let g_pair = &*pair_exposure_scratch;

    let mut beta = theta.beta.clone();
    match order {
        BetaOrder::Jacobi => {
            let p_old: Vec<f64> = theta.beta.iter().map(|&b| cexp(b)).collect();
            let mut denom = vec![0.0f64; n];
            for j in 1..n as u32 {
                for i in 0..j {
                    let g = g_pair[pair_index(i, j)];
                    denom[i as usize] += g * p_old[j as usize];
                    denom[j as usize] += g * p_old[i as usize];
                }
            }
            for a in 0..n {
                if floored[a] {
                    beta[a] = BETA_FLOOR;
                    continue;
                }
                let y = grid.actor_events[a] as f64;
                if denom[a] <= 0.0 {
                    return Err(FitError::ZeroExposureActor(a as u32));
                }
                beta[a] = 0.5 * (theta.beta[a] + y.ln() - denom[a].ln());
                beta[a] = beta[a].min(BETA_CAP);
            }
        }
        BetaOrder::GaussSeidel => {
            let mut p_cur: Vec<f64> = theta.beta.iter().map(|&b| cexp(b)).collect();
            for a in 0..n {
                if floored[a] {
                    beta[a] = BETA_FLOOR;
                    p_cur[a] = cexp(BETA_FLOOR);
                    continue;
                }
                let mut denom = 0.0;
                for other in 0..n {
                    if other == a {
                        continue;
                    }
                    let (i, j) = (a.min(other) as u32, a.max(other) as u32);
                    denom += g_pair[pair_index(i, j)] * p_cur[other];
                }
                if denom <= 0.0 {
                    return Err(FitError::ZeroExposureActor(a as u32));
                }
                let y = grid.actor_events[a] as f64;
                beta[a] = (0.5 * (theta.beta[a] + y.ln() - denom.ln())).min(BETA_CAP);
                p_cur[a] = cexp(beta[a]);
            }
        }
    }
    Ok(beta)
}

/// The separable surrogate minorizing the log-likelihood in the popularity
/// block at the current iterate (statistic and baseline blocks held fixed).
/// Touches the log-likelihood exactly at `beta = theta_k.beta`.
pub fn beta_surrogate(
    grid: &LikelihoodGrid,
    theta_k: &ParamVector,
    beta: &[f64],
) -> Result<f64, FitError> {
    let n = grid.n_actors;
    let exp_gamma: Vec<f64> = theta_k.gamma.iter().map(|&g| cexp(g)).collect();
    let mut g_pair = vec![0.0f64; crate::event_data::n_pairs(n)];
    grid.pair_exposure_against(&theta_k.alpha, &exp_gamma, &mut g_pair)?;
    let y_pair = grid.pair_event_counts();

    // Beta-free part of the log-likelihood (event terms and the grid-length
    // constant).
    let mut c = grid.log_dt_sum;
    let p = grid.n_stats();
    for s in 0..grid.n_segments() {
        if grid.seg_y[s] == 1 {
            let stats = &grid.seg_stats[s * p..s * p + p];
            let mut lin = theta_k.gamma[grid.seg_qevent[s] as usize];
            for (a, v) in theta_k.alpha.iter().zip(stats) {
                lin += a * v;
            }
            c += lin;
        }
    }

    let p_k: Vec<f64> = theta_k.beta.iter().map(|&b| cexp(b)).collect();
    let p_new: Vec<f64> = beta.iter().map(|&b| cexp(b)).collect();
    let mut m = c;
    for j in 1..n as u32 {
        for i in 0..j {
            let idx = pair_index(i, j);
            let (iu, ju) = (i as usize, j as usize);
            m += (beta[iu] + beta[ju]) * y_pair[idx] as f64;
            let bound = p_k[ju] / (2.0 * p_k[iu]) * p_new[iu] * p_new[iu]
                + p_k[iu] / (2.0 * p_k[ju]) * p_new[ju] * p_new[ju];
            m -= bound * g_pair[idx];
        }
    }
    Ok(m)
}

/// Step 3: closed-form update of the baseline levels,
/// gamma_q <- log(events_q / exposure_q) per effective piece.
pub fn gamma_step(
    grid: &LikelihoodGrid,
    theta: &ParamVector,
    piece_exposure_scratch: &mut Vec<f64>,
) -> Result<Vec<f64>, FitError> {
    let q = grid.n_pieces();
    piece_exposure_scratch.resize(q, 0.0);
    grid.piece_exposure_against(theta, piece_exposure_scratch)?;
    let mut gamma = vec![0.0f64; q];
    for k in 0..q {
        let y = grid.events_per_piece[k] as f64;
        let a = piece_exposure_scratch[k];
        if y == 0.0 {
            // Only reachable for an event-free sub-model (merging guarantees
            // one event per effective piece otherwise).
            gamma[k] = BETA_FLOOR;
        } else if a <= 0.0 {
            return Err(FitError::ZeroExposureInterval(k));
        } else {
            gamma[k] = y.ln() - a.ln();
        }
    }
    Ok(gamma)
}

struct ConvergenceState {
    prev_norm: ParamVector,
    prev_ll: f64,
}

/// Per-iteration caches for the block-coordinate loop. The exp of the
/// statistic predictor, the popularity factors, and the per-segment baseline
/// weight are each refreshed exactly when their block moves, so a full
/// iteration costs one exp per segment (in the step-1 line search) plus
/// O(N + Q) exps, instead of one per segment per pass.
struct BcWorkspace<'g> {
    grid: &'g LikelihoodGrid,
    /// alpha . s per segment (unclamped, for event terms).
    seg_dot: Vec<f64>,
    /// exp(alpha . s) per segment.
    seg_elin: Vec<f64>,
    /// sum_q exp(gamma_q) w_q per segment.
    seg_base: Vec<f64>,
    exp_beta: Vec<f64>,
    exp_gamma: Vec<f64>,
    /// Event-side constant of the baseline block: sum over events of
    /// (alpha . s); refreshed with alpha.
    y_dot_sum: f64,
}

impl<'g> BcWorkspace<'g> {
    fn new(grid: &'g LikelihoodGrid, theta: &ParamVector) -> Self {
        let s = grid.n_segments();
        let mut ws = BcWorkspace {
            grid,
            seg_dot: vec![0.0; s],
            seg_elin: vec![0.0; s],
            seg_base: vec![0.0; s],
            exp_beta: theta.beta.iter().map(|&b| cexp(b)).collect(),
            exp_gamma: theta.gamma.iter().map(|&g| cexp(g)).collect(),
            y_dot_sum: 0.0,
        };
        ws.refresh_alpha(&theta.alpha);
        ws.refresh_base();
        ws
    }

    fn refresh_alpha(&mut self, alpha: &[f64]) {
        let p = self.grid.n_stats();
        self.y_dot_sum = 0.0;
        for s in 0..self.grid.n_segments() {
            let stats = &self.grid.seg_stats[s * p..s * p + p];
            let mut dot = 0.0;
            for (a, v) in alpha.iter().zip(stats) {
                dot += a * v;
            }
            self.seg_dot[s] = dot;
            self.seg_elin[s] = cexp(dot);
            if self.grid.seg_y[s] == 1 {
                self.y_dot_sum += dot;
            }
        }
    }

    fn refresh_base(&mut self) {
        for s in 0..self.grid.n_segments() {
            let (lo, hi) = (self.grid.seg_w_off[s] as usize, self.grid.seg_w_off[s + 1] as usize);
            let mut base = 0.0;
            for k in lo..hi {
                base += self.exp_gamma[self.grid.w_piece[k] as usize] * self.grid.w_len[k];
            }
            self.seg_base[s] = base;
        }
    }

    #[inline]
    fn seg_exposure(&self, s: usize) -> f64 {
        let (i, j) = self.grid.seg_pair[s];
        self.seg_elin[s] * self.exp_beta[i as usize] * self.exp_beta[j as usize] * self.seg_base[s]
    }

    /// Log-likelihood at the cached blocks.
    fn ll(&self, theta: &ParamVector) -> f64 {
        let mut y_side = self.grid.log_dt_sum + self.y_dot_sum;
        let mut exposure = 0.0;
        for s in 0..self.grid.n_segments() {
            if self.grid.seg_y[s] == 1 {
                let (i, j) = self.grid.seg_pair[s];
                y_side += theta.beta[i as usize]
                    + theta.beta[j as usize]
                    + theta.gamma[self.grid.seg_qevent[s] as usize];
            }
            exposure += self.seg_exposure(s);
        }
        y_side - exposure
    }
}

/// Fits one sub-model by three-step block-coordinate ascent from theta = 0.
pub fn fit_block_coordinate(
    grid: &LikelihoodGrid,
    opts: &FitOptions,
) -> Result<FitResult, FitError> {
    fit_block_coordinate_from(grid, opts, None)
}

/// Same scheme seeded at a caller-supplied point (the likelihood is concave,
/// so the optimum is seed-independent; a warm seed just saves iterations
/// when refitting a nested model).
pub fn fit_block_coordinate_from(
    grid: &LikelihoodGrid,
    opts: &FitOptions,
    seed: Option<&ParamVector>,
) -> Result<FitResult, FitError> {
    let start = Instant::now();
    if grid.n_events == 0 {
        return Err(FitError::NoEvents);
    }
    let (p, n, q) = (grid.n_stats(), grid.n_actors, grid.n_pieces());
    let floored: Vec<bool> = (0..n).map(|a| grid.actor_events[a] == 0).collect();

    let mut theta = match seed {
        Some(t0) => {
            if t0.alpha.len() != p || t0.beta.len() != n || t0.gamma.len() != q {
                return Err(FitError::Likelihood(LikelihoodError::DimensionMismatch(
                    "warm-start seed".into(),
                )));
            }
            t0.clone()
        }
        None => ParamVector::zeros(p, n, q),
    };
    for (a, &f) in floored.iter().enumerate() {
        if f {
            theta.beta[a] = BETA_FLOOR;
        }
    }
    let mut ws = BcWorkspace::new(grid, &theta);
    let mut ll = ws.ll(&theta);
    if !ll.is_finite() {
        return Err(FitError::NonFiniteLikelihood(0));
    }
    let mut trace = vec![ll];
    let mut conv = ConvergenceState { prev_norm: normalized_copy(&theta), prev_ll: ll };
    let mut converged = false;
    let mut iterations = 0;

    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);
    let mut g_pair = vec![0.0f64; crate::event_data::n_pairs(n)];
    let mut denom = vec![0.0f64; n];
    let mut piece_acc = vec![0.0f64; q];
    let mut dot_trial = vec![0.0f64; ws.seg_dot.len()];
    let mut elin_trial = vec![0.0f64; ws.seg_elin.len()];

    for k in 0..opts.max_iter {
        iterations = k + 1;

        // Step 1: Newton-Raphson in alpha with step-halving.
        let mut ll_after_alpha = ll;
        if p > 0 {
            grad.fill(0.0);
            hess.fill(0.0);
            for s in 0..grid.n_segments() {
                let e = ws.seg_exposure(s);
                let stats = &grid.seg_stats[s * p..s * p + p];
                let y = grid.seg_y[s] as f64;
                for a in 0..p {
                    grad[a] += stats[a] * (y - e);
                    for b in a..p {
                        hess[(a, b)] -= stats[a] * stats[b] * e;
                    }
                }
            }
            for a in 0..p {
                for b in 0..a {
                    hess[(a, b)] = hess[(b, a)];
                }
            }
            let step = solve_spd_with_ridge(&(-&hess), &grad)?;
            let mut scale = 1.0f64;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                // Trial predictor caches.
                let mut y_dot_trial = 0.0;
                for s in 0..grid.n_segments() {
                    let stats = &grid.seg_stats[s * p..s * p + p];
                    let mut dot = 0.0;
                    for (a0, v) in stats.iter().enumerate() {
                        dot += (theta.alpha[a0] + scale * step[a0]) * v;
                    }
                    dot_trial[s] = dot;
                    elin_trial[s] = cexp(dot);
                    if grid.seg_y[s] == 1 {
                        y_dot_trial += dot;
                    }
                }
                let mut y_side = grid.log_dt_sum + y_dot_trial;
                let mut exposure = 0.0;
                for s in 0..grid.n_segments() {
                    let (i, j) = grid.seg_pair[s];
                    if grid.seg_y[s] == 1 {
                        y_side += theta.beta[i as usize]
                            + theta.beta[j as usize]
                            + theta.gamma[grid.seg_qevent[s] as usize];
                    }
                    exposure += elin_trial[s]
                        * ws.exp_beta[i as usize]
                        * ws.exp_beta[j as usize]
                        * ws.seg_base[s];
                }
                let trial_ll = y_side - exposure;
                if !opts.step1_halving
                    || (trial_ll.is_finite() && trial_ll >= ll - 1e-12 * ll.abs().max(1.0))
                {
                    if !trial_ll.is_finite() {
                        return Err(FitError::NonFiniteLikelihood(iterations));
                    }
                    for a in 0..p {
                        theta.alpha[a] += scale * step[a];
                    }
                    std::mem::swap(&mut ws.seg_dot, &mut dot_trial);
                    std::mem::swap(&mut ws.seg_elin, &mut elin_trial);
                    ws.y_dot_sum = y_dot_trial;
                    ll_after_alpha = trial_ll;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                ll_after_alpha = ll; // keep the current alpha
            }
        }

        // Step 2: MM update of beta (separable surrogate maximizer).
        {
            g_pair.fill(0.0);
            for s in 0..grid.n_segments() {
                let (i, j) = grid.seg_pair[s];
                g_pair[pair_index(i, j)] += ws.seg_elin[s] * ws.seg_base[s];
            }
            match opts.beta_order {
                BetaOrder::Jacobi => {
                    denom.fill(0.0);
                    for j in 1..n as u32 {
                        for i in 0..j {
                            let g = g_pair[pair_index(i, j)];
                            denom[i as usize] += g * ws.exp_beta[j as usize];
                            denom[j as usize] += g * ws.exp_beta[i as usize];
                        }
                    }
                    for a in 0..n {
                        if floored[a] {
                            theta.beta[a] = BETA_FLOOR;
                            continue;
                        }
                        if denom[a] <= 0.0 {
                            return Err(FitError::ZeroExposureActor(a as u32));
                        }
                        let y = grid.actor_events[a] as f64;
                        theta.beta[a] =
                            (0.5 * (theta.beta[a] + y.ln() - denom[a].ln())).min(BETA_CAP);
                    }
                }
                BetaOrder::GaussSeidel => {
                    let mut p_cur = ws.exp_beta.clone();
                    for a in 0..n {
                        if floored[a] {
                            theta.beta[a] = BETA_FLOOR;
                            p_cur[a] = cexp(BETA_FLOOR);
                            continue;
                        }
                        let mut d = 0.0;
                        for other in 0..n {
                            if other == a {
                                continue;
                            }
                            let (i, j) = (a.min(other) as u32, a.max(other) as u32);
                            d += g_pair[pair_index(i, j)] * p_cur[other];
                        }
                        if d <= 0.0 {
                            return Err(FitError::ZeroExposureActor(a as u32));
                        }
                        let y = grid.actor_events[a] as f64;
                        theta.beta[a] = (0.5 * (theta.beta[a] + y.ln() - d.ln())).min(BETA_CAP);
                        p_cur[a] = cexp(theta.beta[a]);
                    }
                }
            }
            for a in 0..n {
                ws.exp_beta[a] = cexp(theta.beta[a]);
            }
        }

        // Step 3: closed-form gamma update.
        {
            piece_acc.fill(0.0);
            for s in 0..grid.n_segments() {
                let (i, j) = grid.seg_pair[s];
                let factor =
                    ws.seg_elin[s] * ws.exp_beta[i as usize] * ws.exp_beta[j as usize];
                let (lo, hi) = (grid.seg_w_off[s] as usize, grid.seg_w_off[s + 1] as usize);
                for w in lo..hi {
                    piece_acc[grid.w_piece[w] as usize] += factor * grid.w_len[w];
                }
            }
            for qi in 0..q {
                let y = grid.events_per_piece[qi] as f64;
                if y == 0.0 {
                    theta.gamma[qi] = BETA_FLOOR;
                } else if piece_acc[qi] <= 0.0 {
                    return Err(FitError::ZeroExposureInterval(qi));
                } else {
                    theta.gamma[qi] = y.ln() - piece_acc[qi].ln();
                }
                ws.exp_gamma[qi] = cexp(theta.gamma[qi]);
            }
            ws.refresh_base();
        }

        ll = ws.ll(&theta);
        if !ll.is_finite() {
            return Err(FitError::NonFiniteLikelihood(iterations));
        }
        debug_assert!(
            ll >= ll_after_alpha - 1e-10 * ll_after_alpha.abs().max(1.0),
            "MM/closed-form steps decreased the likelihood"
        );
        trace.push(ll);

        let theta_norm = normalized_copy(&theta);
        let delta = param_distance(&theta_norm, &conv.prev_norm, &floored);
        let rel = rel_ll_change(conv.prev_ll, ll);
        conv.prev_norm = theta_norm;
        conv.prev_ll = ll;
        if delta < opts.tol_param && rel < opts.tol_rel_ll {
            converged = true;
            break;
        }
    }

    normalize_identifiability(&mut theta);
    Ok(FitResult {
        theta,
        ll_trace: trace,
        iterations,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
        peak_memory: peak_rss_bytes(),
        floored_actors: floored
            .iter()
            .enumerate()
            .filter_map(|(a, &f)| f.then_some(a as u32))
            .collect(),
    })
}

/// Expanded Poisson pseudo-observations: one row per (grid interval, at-risk
/// pair), dense statistics per row. The classical design-matrix layout whose
/// size is what makes the reference method memory-bound.
struct ExpandedRows {
    n_rows: usize,
    stats: Vec<f64>,
    actor_i: Vec<u32>,
    actor_j: Vec<u32>,
    piece: Vec<u32>,
    dt: Vec<f64>,
    y: Vec<u8>,
}

/// Bytes the expansion will allocate, checked against the memory guard
/// before anything is built.
pub fn nr_expanded_bytes(grid: &LikelihoodGrid) -> u64 {
    let rows = grid.expanded_row_count();
    let per_row = (grid.n_stats() * 8 + 8 + 4 + 4 + 4 + 1) as u64;
    let dim = (grid.n_stats() + grid.n_actors + grid.n_pieces()) as u64;
    rows * per_row + 3 * dim * dim * 8
}

fn expand_rows(grid: &LikelihoodGrid) -> ExpandedRows {
    let p = grid.n_stats();
    let times = grid.grid_times();
    // piece of the interval (times[k], times[k+1]]
    let interval_piece: Vec<u32> = times
        .windows(2)
        .map(|w| grid.effective_piece_left_of(w[1]) as u32)
        .collect();
    let pos = |t: f64| times.partition_point(|&g| g < t);

    let mut rows = ExpandedRows {
        n_rows: 0,
        stats: Vec::new(),
        actor_i: Vec::new(),
        actor_j: Vec::new(),
        piece: Vec::new(),
        dt: Vec::new(),
        y: Vec::new(),
    };
    for s in 0..grid.n_segments() {
        let (i, j) = grid.seg_pair[s];
        let stats = &grid.seg_stats[s * p..s * p + p];
        let (b, e) = (grid.seg_start[s], grid.seg_end[s]);
        if e > b {
            let (k0, k1) = (pos(b), pos(e));
            for k in k0..k1 {
                rows.stats.extend_from_slice(stats);
                rows.actor_i.push(i);
                rows.actor_j.push(j);
                rows.piece.push(interval_piece[k]);
                rows.dt.push(times[k + 1] - times[k]);
                rows.y.push(if k + 1 == k1 { grid.seg_y[s] } else { 0 });
                rows.n_rows += 1;
            }
        } else {
            rows.stats.extend_from_slice(stats);
            rows.actor_i.push(i);
            rows.actor_j.push(j);
            rows.piece.push(grid.seg_qevent[s]);
            rows.dt.push(0.0);
            rows.y.push(grid.seg_y[s]);
            rows.n_rows += 1;
        }
    }
    rows
}

fn rows_log_likelihood(rows: &ExpandedRows, grid: &LikelihoodGrid, theta: &ParamVector) -> f64 {
    let p = grid.n_stats();
    let mut ll = grid.log_dt_sum;
    for r in 0..rows.n_rows {
        let stats = &rows.stats[r * p..r * p + p];
        let mut lin = theta.beta[rows.actor_i[r] as usize]
            + theta.beta[rows.actor_j[r] as usize]
            + theta.gamma[rows.piece[r] as usize];
        for (a, v) in theta.alpha.iter().zip(stats) {
            lin += a * v;
        }
        if rows.y[r] == 1 {
            ll += lin;
        }
        ll -= cexp(lin) * rows.dt[r];
    }
    ll
}

/// Damped full-parameter Newton-Raphson over the expanded rows with a
/// ridge-regularized solve (the baseline/popularity null direction makes the
/// raw Hessian singular). Same stopping rule as the block-coordinate fitter.
pub fn fit_newton_raphson(
    grid: &LikelihoodGrid,
    opts: &FitOptions,
) -> Result<FitResult, FitError> {
    let start = Instant::now();
    if grid.n_events == 0 {
        return Err(FitError::NoEvents);
    }
    let (p, n, q) = (grid.n_stats(), grid.n_actors, grid.n_pieces());
    let est = nr_expanded_bytes(grid);
    if est > opts.nr_mem_guard_bytes {
        return Err(FitError::InstanceTooLarge(format!(
            "expanded design needs ~{} bytes (guard {})",
            est, opts.nr_mem_guard_bytes
        )));
    }
    if crate::likelihood::full_matrix_entries(p, n, q) > 100_000_000 {
        return Err(FitError::InstanceTooLarge("dense Hessian too large".into()));
    }

    let floored: Vec<bool> = (0..n).map(|a| grid.actor_events[a] == 0).collect();
    // Free-parameter map: all alpha, non-floored beta, all gamma.
    let mut free_of_beta = vec![usize::MAX; n];
    let mut dim = p;
    for a in 0..n {
        if !floored[a] {
            free_of_beta[a] = dim;
            dim += 1;
        }
    }
    let gamma_base = dim;
    dim += q;

    let rows = expand_rows(grid);
    let mut theta = ParamVector::zeros(p, n, q);
    for (a, &f) in floored.iter().enumerate() {
        if f {
            theta.beta[a] = BETA_FLOOR;
        }
    }
    let mut ll = rows_log_likelihood(&rows, grid, &theta);
    if !ll.is_finite() {
        return Err(FitError::NonFiniteLikelihood(0));
    }
    let mut trace = vec![ll];
    let mut conv = ConvergenceState { prev_norm: normalized_copy(&theta), prev_ll: ll };
    let mut converged = false;
    let mut iterations = 0;
    let mut grad = DVector::zeros(dim);
    let mut hess = DMatrix::zeros(dim, dim);

    for it in 0..opts.max_iter {
        iterations = it + 1;
        grad.fill(0.0);
        hess.fill(0.0);
        // Row sweep: gradient and all Hessian blocks of the free parameters.
        let mut idx_buf = Vec::with_capacity(p + 3);
        for r in 0..rows.n_rows {
            let stats = &rows.stats[r * p..r * p + p];
            let (iu, ju) = (rows.actor_i[r] as usize, rows.actor_j[r] as usize);
            let qk = rows.piece[r] as usize;
            let mut lin = theta.beta[iu] + theta.beta[ju] + theta.gamma[qk];
            for (a, v) in theta.alpha.iter().zip(stats) {
                lin += a * v;
            }
            let e = cexp(lin) * rows.dt[r];
            let resid = rows.y[r] as f64 - e;
            idx_buf.clear();
            for a in 0..p {
                idx_buf.push((a, stats[a]));
            }
            if free_of_beta[iu] != usize::MAX {
                idx_buf.push((free_of_beta[iu], 1.0));
            }
            if free_of_beta[ju] != usize::MAX {
                idx_buf.push((free_of_beta[ju], 1.0));
            }
            idx_buf.push((gamma_base + qk, 1.0));
            for &(c, x) in &idx_buf {
                grad[c] += x * resid;
                for &(c2, x2) in &idx_buf {
                    if c2 >= c {
                        hess[(c, c2)] -= x * x2 * e;
                    }
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }

        // Ridge on the identifiability null direction; the gradient is
        // orthogonal to it, so the regularized step stays in its complement.
        let neg = -&hess;
        let trace_scale = (neg.trace() / dim as f64).abs().max(1e-12);
        let mut ridge = 1e-9 * (1.0 + trace_scale);
        let step = loop {
            let mut m = neg.clone();
            for k in 0..dim {
                m[(k, k)] += ridge;
            }
            if let Some(chol) = m.cholesky() {
                let d = chol.solve(&grad);
                if d.iter().all(|v| v.is_finite()) {
                    break d;
                }
            }
            ridge *= 10.0;
            if ridge > 1e2 * (1.0 + trace_scale) {
                return Err(FitError::SingularHessian);
            }
        };

        let apply = |theta: &ParamVector, scale: f64| -> ParamVector {
            let mut t = theta.clone();
            for a in 0..p {
                t.alpha[a] += scale * step[a];
            }
            for a in 0..n {
                if free_of_beta[a] != usize::MAX {
                    t.beta[a] += scale * step[free_of_beta[a]];
                }
            }
            for k in 0..q {
                t.gamma[k] += scale * step[gamma_base + k];
            }
            t
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=NR_MAX_HALVINGS {
            let trial = apply(&theta, scale);
            let trial_ll = rows_log_likelihood(&rows, grid, &trial);
            if trial_ll.is_finite() && trial_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                accepted = Some((trial, trial_ll));
                break;
            }
            scale *= 0.5;
        }
        let Some((next, next_ll)) = accepted else {
            // No admissible step: report the current iterate.
            break;
        };
        theta = next;
        ll = next_ll;
        trace.push(ll);

        let theta_norm = normalized_copy(&theta);
        let delta = param_distance(&theta_norm, &conv.prev_norm, &floored);
        let rel = rel_ll_change(conv.prev_ll, ll);
        conv.prev_norm = theta_norm;
        conv.prev_ll = ll;
        if delta < opts.tol_param && rel < opts.tol_rel_ll {
            converged = true;
            break;
        }
    }

    normalize_identifiability(&mut theta);
    Ok(FitResult {
        theta,
        ll_trace: trace,
        iterations,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
        peak_memory: peak_rss_bytes(),
        floored_actors: floored
            .iter()
            .enumerate()
            .filter_map(|(a, &f)| f.then_some(a as u32))
            .collect(),
    })
}

/// One fitted sub-model with the grid it was fit on.
#[derive(Debug)]
pub struct SubModelFit {
    pub grid: LikelihoodGrid,
    pub result: FitResult,
}

/// Both sub-models of a fitted model (`duration` absent in point-event mode).
#[derive(Debug)]
pub struct DemFit {
    pub incidence: SubModelFit,
    pub duration: Option<SubModelFit>,
}

/// Builds both sub-model grids and fits them independently (the joint
/// likelihood is separable).
pub fn fit_stream(
    stream: &EventStream,
    covs: &CovariateTable,
    spec: &ModelSpec,
    opts: &FitOptions,
    engine: Engine,
) -> Result<DemFit, crate::DemError> {
    spec.validate()?;
    let rem = spec.rem_mode();
    let fit_one = |stats: &[crate::statistics::StatisticKind],
                   baseline: &crate::likelihood::BaselineGrid,
                   kind: crate::event_data::TransitionKind|
     -> Result<SubModelFit, crate::DemError> {
        let grid = LikelihoodGrid::build(stream, covs, stats, baseline, spec.policy, kind, rem)?;
        let result = match engine {
            Engine::BlockCoordinate => fit_block_coordinate(&grid, opts)?,
            Engine::NewtonRaphson => fit_newton_raphson(&grid, opts)?,
        };
        Ok(SubModelFit { grid, result })
    };
    let incidence = fit_one(
        &spec.incidence.stats,
        &spec.incidence.baseline,
        crate::event_data::TransitionKind::Formation,
    )?;
    let duration = match &spec.duration {
        Some(d) => Some(fit_one(&d.stats, &d.baseline, crate::event_data::TransitionKind::Dissolution)?),
        None => None,
    };
    Ok(DemFit { incidence, duration })
}
