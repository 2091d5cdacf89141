//! Uncertainty quantification and model selection.
//!
//! Standard errors for the statistic effects come from the top-left block of
//! the inverse Fisher information, computed without ever inverting the full
//! matrix: the popularity/baseline nuisance block is eliminated through a
//! Schur complement, and inside it the diagonal baseline block is eliminated
//! through a second-level Schur complement, so the cost is O(N^3) at worst
//! and never cubic in the total parameter count.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use thiserror::Error;

use crate::estimator::{fit_block_coordinate, FitError, FitOptions, FitResult};
use crate::event_data::{CovariateTable, EventStream, TransitionKind};
use crate::likelihood::{full_derivatives, LikelihoodError, LikelihoodGrid, ParamVector};
use crate::model::{ModelSpec, SubModelSpec};
use crate::statistics::StatisticKind;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("singular inner block ({block}) in the covariance Schur complement")]
    SingularInnerBlock { block: &'static str },
    #[error(transparent)]
    Likelihood(#[from] LikelihoodError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Stat(#[from] crate::statistics::StatError),
}

/// Covariance of the statistic effects with derived standard errors and Wald
/// statistics.
#[derive(Debug, Clone)]
pub struct AlphaCovariance {
    pub cov: DMatrix<f64>,
    pub se: Vec<f64>,
    pub z: Vec<f64>,
}

/// Top-left P x P block of the inverse Fisher information at `theta`,
/// with the pinned first baseline level and floored actors removed from the
/// nuisance block so it is nonsingular.
pub fn alpha_covariance(
    grid: &LikelihoodGrid,
    theta: &ParamVector,
) -> Result<AlphaCovariance, InferenceError> {
    let d = full_derivatives(grid, theta)?;
    let p = grid.n_stats();
    let n = grid.n_actors;
    let q = grid.n_pieces();

    // Free nuisance coordinates: gamma 1.. (first pinned), non-floored beta.
    let free_beta: Vec<usize> = (0..n).filter(|&a| grid.actor_events[a] > 0).collect();
    let nf = free_beta.len();
    let qf = q - 1;

    // Information blocks (negated Hessian).
    let i_aa = -&d.h_aa;
    let mut x_g = DMatrix::zeros(p, qf); // alpha x gamma(free)
    for a in 0..p {
        for k in 0..qf {
            x_g[(a, k)] = -d.h_ag[(a, k + 1)];
        }
    }
    let mut x_b = DMatrix::zeros(p, nf); // alpha x beta(free)
    for a in 0..p {
        for (col, &b) in free_beta.iter().enumerate() {
            x_b[(a, col)] = -d.h_ab[(a, b)];
        }
    }
    let mut a_diag = vec![0.0f64; qf]; // gamma-gamma information (diagonal)
    for k in 0..qf {
        a_diag[k] = -d.h_gg_diag[k + 1];
        if a_diag[k] <= 0.0 {
            return Err(InferenceError::SingularInnerBlock { block: "gamma" });
        }
    }
    let mut b_gb = DMatrix::zeros(qf, nf); // gamma x beta information
    for k in 0..qf {
        for (col, &b) in free_beta.iter().enumerate() {
            b_gb[(k, col)] = -d.h_bg[(b, k + 1)];
        }
    }
    let mut d_bb = DMatrix::zeros(nf, nf);
    for (r, &a) in free_beta.iter().enumerate() {
        for (c, &b) in free_beta.iter().enumerate() {
            d_bb[(r, c)] = -d.h_bb[(a, b)];
        }
    }

    // Second-level Schur complement: eliminate the diagonal gamma block.
    // S = D - B^T A^{-1} B, then solve the two-block system for Y^{-1} X^T.
    let mut s = d_bb;
    for r in 0..nf {
        for c in 0..nf {
            let mut acc = 0.0;
            for k in 0..qf {
                acc += b_gb[(k, r)] * b_gb[(k, c)] / a_diag[k];
            }
            s[(r, c)] -= acc;
        }
    }
    let s_chol = s
        .cholesky()
        .ok_or(InferenceError::SingularInnerBlock { block: "beta" })?;

    // U = X_g^T (qf x p), V = X_b^T (nf x p)
    let u = x_g.transpose();
    let v = x_b.transpose();
    let mut a_inv_u = u.clone();
    for k in 0..qf {
        for c in 0..p {
            a_inv_u[(k, c)] /= a_diag[k];
        }
    }
    let rhs = &v - b_gb.transpose() * &a_inv_u;
    let z2 = s_chol.solve(&rhs); // nf x p
    let mut z1 = &u - &b_gb * &z2;
    for k in 0..qf {
        for c in 0..p {
            z1[(k, c)] /= a_diag[k];
        }
    }

    let lambda_inv = i_aa - (&x_g * &z1 + &x_b * &z2);
    let p_dim = p;
    let cov = if p_dim == 0 {
        DMatrix::zeros(0, 0)
    } else {
        // symmetrize against accumulation noise before inverting
        let sym = (&lambda_inv + lambda_inv.transpose()) * 0.5;
        sym.cholesky()
            .ok_or(InferenceError::SingularInnerBlock { block: "alpha" })?
            .inverse()
    };
    let se: Vec<f64> = (0..p_dim).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
    let z: Vec<f64> = (0..p_dim)
        .map(|k| if se[k] > 0.0 { theta.alpha[k] / se[k] } else { f64::NAN })
        .collect();
    Ok(AlphaCovariance { cov, se, z })
}

/// One row of the coefficient table: the estimate, its standard error and
/// Wald statistic, and the multiplicative-effect readings. `two_pow_alpha`
/// is reported only for log(count+1)-transformed statistics, where it is the
/// effect of the first unit on the original count scale.
#[derive(Debug, Clone, Serialize)]
pub struct EffectRow {
    pub stat: String,
    pub alpha: f64,
    pub se: f64,
    pub z: f64,
    pub exp_alpha: f64,
    pub two_pow_alpha: Option<f64>,
}

/// Multiplicative intensity factor of a count step from `level` to
/// `level + 1` on the original scale of a log(count+1) statistic.
pub fn factor_at_count(alpha: f64, level: u64) -> f64 {
    ((level as f64 + 2.0) / (level as f64 + 1.0)).powf(alpha)
}

pub fn effect_table(
    stats: &[StatisticKind],
    alpha: &[f64],
    cov: &AlphaCovariance,
) -> Vec<EffectRow> {
    stats
        .iter()
        .zip(alpha)
        .enumerate()
        .map(|(k, (kind, &a))| EffectRow {
            stat: kind.to_string(),
            alpha: a,
            se: cov.se[k],
            z: cov.z[k],
            exp_alpha: a.exp(),
            two_pow_alpha: kind.is_log1p_count().then(|| 2f64.powf(a)),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AicFlavor {
    /// 2k - 2 log-likelihood with k = P + (active actors) + (free baseline levels).
    Standard,
    /// 2 log M - log-likelihood, as an alternative reading without a
    /// parameter-count penalty (degenerate for stepwise selection).
    PaperFormula,
}

/// Information criterion of one fitted sub-model; the joint model criterion
/// is the sum over the two sub-models.
pub fn aic(fit: &FitResult, grid: &LikelihoodGrid, flavor: AicFlavor) -> f64 {
    let ll = fit.final_ll();
    match flavor {
        AicFlavor::Standard => {
            let n_active = grid.n_actors - fit.floored_actors.len();
            let k = grid.n_stats() + n_active + (grid.n_pieces() - 1);
            2.0 * k as f64 - 2.0 * ll
        }
        AicFlavor::PaperFormula => 2.0 * (grid.n_events as f64).ln() - ll,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionStep {
    /// Which sub-model the candidate was tried in.
    pub sub_model: TransitionKind,
    /// Statistic set of the evaluated model.
    pub stats: Vec<String>,
    pub criterion: f64,
    pub accepted: bool,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct SelectionOutcome {
    pub spec: ModelSpec,
    pub trace: Vec<SelectionStep>,
}

fn fit_criterion(
    stream: &EventStream,
    covs: &CovariateTable,
    stats: &[StatisticKind],
    baseline: &crate::likelihood::BaselineGrid,
    policy: crate::event_data::RiskSetPolicy,
    kind: TransitionKind,
    rem: bool,
    opts: &FitOptions,
    flavor: AicFlavor,
) -> Result<f64, InferenceError> {
    let grid = LikelihoodGrid::build(stream, covs, stats, baseline, policy, kind, rem)?;
    let fit = fit_block_coordinate(&grid, opts)?;
    Ok(aic(&fit, &grid, flavor))
}

/// Criterion plus the fitted point, off a projected view of the shared grid.
fn fit_on_projection(
    union_grid: &LikelihoodGrid,
    columns: &[usize],
    opts: &FitOptions,
    flavor: AicFlavor,
    warm: Option<&crate::likelihood::ParamVector>,
) -> Result<(f64, crate::likelihood::ParamVector), InferenceError> {
    let grid = union_grid.project_stats(columns);
    let fit = crate::estimator::fit_block_coordinate_from(&grid, opts, warm)?;
    Ok((aic(&fit, &grid, flavor), fit.theta))
}

fn candidate_admissible(
    cand: &StatisticKind,
    kind: TransitionKind,
    policy: crate::event_data::RiskSetPolicy,
    rem: bool,
) -> Result<(), String> {
    if kind == TransitionKind::Formation && matches!(cand, StatisticKind::CurrentInteractionDuration) {
        return Err("ongoing-duration statistic is defined only in the duration sub-model".into());
    }
    if matches!(cand, StatisticKind::CurrentCommonPartner)
        && (rem || policy == crate::event_data::RiskSetPolicy::ExclusiveEngagement)
    {
        return Err("current common partner is identically zero under this policy".into());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn select_side(
    stream: &EventStream,
    covs: &CovariateTable,
    sub: &mut SubModelSpec,
    kind: TransitionKind,
    policy: crate::event_data::RiskSetPolicy,
    rem: bool,
    candidates: &[StatisticKind],
    opts: &FitOptions,
    flavor: AicFlavor,
    trace: &mut Vec<SelectionStep>,
) -> Result<(), InferenceError> {
    // One preprocessing pass over the union of base and admissible candidate
    // statistics; every nested model is a column projection of this grid.
    let mut union_stats = sub.stats.clone();
    for cand in candidates {
        if !union_stats.contains(cand) && candidate_admissible(cand, kind, policy, rem).is_ok() {
            union_stats.push(cand.clone());
        }
    }
    let union_grid =
        LikelihoodGrid::build(stream, covs, &union_stats, &sub.baseline, policy, kind, rem)?;
    let column_of = |k: &StatisticKind| union_stats.iter().position(|u| u == k).expect("in union");

    let base_columns: Vec<usize> = sub.stats.iter().map(&column_of).collect();
    let (mut current, mut current_theta) =
        fit_on_projection(&union_grid, &base_columns, opts, flavor, None)?;
    trace.push(SelectionStep {
        sub_model: kind,
        stats: sub.stats.iter().map(|s| s.to_string()).collect(),
        criterion: current,
        accepted: true,
        error: None,
    });
    let mut remaining: Vec<StatisticKind> = candidates.to_vec();
    while !remaining.is_empty() {
        // Evaluate every remaining candidate in parallel, each warm-started
        // from the incumbent (same optimum either way; fewer iterations).
        let included = sub.stats.clone();
        let incumbent = current_theta.clone();
        let results: Vec<(usize, Result<(f64, crate::likelihood::ParamVector), String>)> = remaining
            .par_iter()
            .enumerate()
            .map(|(idx, cand)| {
                if included.contains(cand) {
                    return (idx, Err(format!("duplicate statistic `{cand}`")));
                }
                if let Err(e) = candidate_admissible(cand, kind, policy, rem) {
                    return (idx, Err(e));
                }
                let mut columns: Vec<usize> = included.iter().map(&column_of).collect();
                columns.push(column_of(cand));
                let mut warm = incumbent.clone();
                warm.alpha.push(0.0);
                match fit_on_projection(&union_grid, &columns, opts, flavor, Some(&warm)) {
                    Ok(out) => (idx, Ok(out)),
                    Err(e) => (idx, Err(e.to_string())),
                }
            })
            .collect();

        let mut best: Option<(usize, f64, crate::likelihood::ParamVector)> = None;
        for (idx, res) in results {
            let mut stats: Vec<String> = sub.stats.iter().map(|s| s.to_string()).collect();
            stats.push(remaining[idx].to_string());
            match res {
                Ok((c, theta)) => {
                    trace.push(SelectionStep {
                        sub_model: kind,
                        stats,
                        criterion: c,
                        accepted: false,
                        error: None,
                    });
                    if c < current && best.as_ref().map_or(true, |(_, b, _)| c < *b) {
                        best = Some((idx, c, theta));
                    }
                }
                Err(msg) => {
                    trace.push(SelectionStep {
                        sub_model: kind,
                        stats,
                        criterion: f64::NAN,
                        accepted: false,
                        error: Some(msg),
                    });
                }
            }
        }
        match best {
            Some((idx, c, theta)) => {
                sub.stats.push(remaining.remove(idx));
                current = c;
                current_theta = theta;
                let want: Vec<String> = sub.stats.iter().map(|s| s.to_string()).collect();
                for step in trace.iter_mut().rev() {
                    if step.sub_model == kind && step.stats == want && step.criterion == c {
                        step.accepted = true;
                        break;
                    }
                }
            }
            None => break,
        }
    }
    Ok(())
}

/// Forward stepwise selection: grow the incidence statistic set until the
/// criterion stops improving, then the duration set. Candidates already in
/// the model (or inadmissible ones) are skipped with a recorded error;
/// failed fits are recorded and skipped. Candidate fits within a round run
/// in parallel.
#[allow(clippy::too_many_arguments)]
pub fn greedy_select(
    stream: &EventStream,
    covs: &CovariateTable,
    base: &ModelSpec,
    incidence_candidates: &[StatisticKind],
    duration_candidates: &[StatisticKind],
    opts: &FitOptions,
    flavor: AicFlavor,
) -> Result<SelectionOutcome, InferenceError> {
    base.validate()?;
    let rem = base.rem_mode();
    let mut trace = Vec::new();
    let mut spec = base.clone();

    select_side(
        stream,
        covs,
        &mut spec.incidence,
        TransitionKind::Formation,
        spec.policy,
        rem,
        incidence_candidates,
        opts,
        flavor,
        &mut trace,
    )?;
    if let Some(duration) = spec.duration.as_mut() {
        select_side(
            stream,
            covs,
            duration,
            TransitionKind::Dissolution,
            spec.policy,
            rem,
            duration_candidates,
            opts,
            flavor,
            &mut trace,
        )?;
    }
    Ok(SelectionOutcome { spec, trace })
}
