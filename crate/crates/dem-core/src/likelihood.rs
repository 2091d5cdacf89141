//! Sub-model likelihood: intensities, exact exposure integrals, and
//! derivatives over a preprocessed event grid.
//!
//! Between two consecutive points of the merged grid (event times plus
//! baseline change points) every pair's intensity is constant, so the
//! integrated intensity is a finite sum of exp terms and the log-likelihood
//! decomposes into Poisson interval terms. The grid stores one *segment* per
//! maximal span on which a pair is at risk with an unchanged statistic
//! vector; per-segment exposure weights are kept per baseline piece. This is
//! what brings evaluation down to O(N^2 + M) from the naive
//! O(N^2 * (M + Q)) sweep.
//!
//! Baseline pieces in which the sub-model has no events are merged into the
//! previous piece before anything else happens (a piece with no events has
//! its maximizing level at -inf; merging keeps the closed-form update exact
//! and the reported per-interval baseline simply inherits the previous
//! value). All likelihood quantities, including the gamma dimension, live on
//! the merged ("effective") pieces.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use thiserror::Error;

use crate::event_data::{
    n_pairs, pair_index, ActorId, CovariateTable, EventStream, RiskSetPolicy, Time,
    TransitionKind,
};
use crate::statistics::{StatError, StatisticKind, StatisticsState};

/// Linear predictors are clamped to this magnitude before exponentiation.
pub const EXP_CLAMP: f64 = 700.0;

#[inline]
pub(crate) fn cexp(x: f64) -> f64 {
    x.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

#[derive(Debug, Error)]
pub enum LikelihoodError {
    #[error("time {t} outside the window [0, {end})")]
    TimeOutOfWindow { t: f64, end: f64 },
    #[error("invalid interval [{lo}, {hi})")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("pair ({i}, {j}) not at risk at t = {t}")]
    PairNotAtRisk { i: ActorId, j: ActorId, t: f64 },
    #[error("event for pair ({i}, {j}) at t = {t} while the pair is outside the risk set (data violates the policy)")]
    EventOutsideRiskSet { i: ActorId, j: ActorId, t: f64 },
    #[error("baseline grid ends at {grid_end} but the window ends at {window_end}")]
    GridMismatch { grid_end: f64, window_end: f64 },
    #[error("instance too large: {0}")]
    InstanceTooLarge(String),
    #[error(transparent)]
    Stat(#[from] StatError),
}

/// Change points `0 = c_0 < c_1 < ... < c_Q = T` of the piecewise-constant
/// log-baseline. The q-th piece is the half-open interval `[c_{q-1}, c_q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineGrid {
    points: Vec<Time>,
}

impl BaselineGrid {
    pub fn new(points: Vec<Time>) -> Result<Self, LikelihoodError> {
        if points.len() < 2 || points[0] != 0.0 {
            return Err(LikelihoodError::DimensionMismatch(
                "baseline grid needs points 0 = c_0 < ... < c_Q".into(),
            ));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) || points.iter().any(|p| !p.is_finite()) {
            return Err(LikelihoodError::DimensionMismatch(
                "baseline change points must be finite and strictly increasing".into(),
            ));
        }
        Ok(BaselineGrid { points })
    }

    /// `n_pieces` equal-width pieces over `[0, window_end]`.
    pub fn uniform(window_end: Time, n_pieces: usize) -> Result<Self, LikelihoodError> {
        if n_pieces == 0 || window_end <= 0.0 {
            return Err(LikelihoodError::DimensionMismatch("empty baseline grid".into()));
        }
        let points = (0..=n_pieces)
            .map(|q| window_end * q as f64 / n_pieces as f64)
            .collect();
        BaselineGrid::new(points)
    }

    /// Grid from interior change points (c_1..c_{Q-1} need not include the
    /// window edges).
    pub fn from_change_points(interior: &[Time], window_end: Time) -> Result<Self, LikelihoodError> {
        let mut points = vec![0.0];
        for &c in interior {
            if c > 0.0 && c < window_end {
                points.push(c);
            }
        }
        points.push(window_end);
        points.sort_by(f64::total_cmp);
        points.dedup();
        BaselineGrid::new(points)
    }

    /// Pieces of fixed width (the last piece absorbs the remainder).
    pub fn fixed_width(window_end: Time, width: Time) -> Result<Self, LikelihoodError> {
        if width <= 0.0 {
            return Err(LikelihoodError::DimensionMismatch("non-positive piece width".into()));
        }
        let mut points = vec![0.0];
        let mut c = width;
        while c < window_end - 1e-12 * window_end.max(1.0) {
            points.push(c);
            c += width;
        }
        points.push(window_end);
        BaselineGrid::new(points)
    }

    pub fn n_pieces(&self) -> usize {
        self.points.len() - 1
    }

    pub fn points(&self) -> &[Time] {
        &self.points
    }

    pub fn window_end(&self) -> Time {
        *self.points.last().unwrap()
    }

    /// Piece index with `c_{q-1} <= t < c_q`.
    pub fn piece_of(&self, t: Time) -> Result<usize, LikelihoodError> {
        if t < 0.0 || t >= self.window_end() {
            return Err(LikelihoodError::TimeOutOfWindow { t, end: self.window_end() });
        }
        let q = self.points.partition_point(|&c| c <= t);
        Ok(q - 1)
    }

    /// Piece containing the open interval just below `t`: the piece an event
    /// at time `t` exposes, with boundary times assigned leftward.
    pub fn piece_left_of(&self, t: Time) -> usize {
        let q = self.points.partition_point(|&c| c < t);
        q.saturating_sub(1).min(self.n_pieces() - 1)
    }

    pub fn piece_bounds(&self, q: usize) -> (Time, Time) {
        (self.points[q], self.points[q + 1])
    }
}

/// Piecewise-constant log-baseline value at `t`.
pub fn baseline_value(t: Time, gamma: &[f64], grid: &BaselineGrid) -> Result<f64, LikelihoodError> {
    if gamma.len() != grid.n_pieces() {
        return Err(LikelihoodError::DimensionMismatch(format!(
            "gamma has {} entries for {} pieces",
            gamma.len(),
            grid.n_pieces()
        )));
    }
    Ok(gamma[grid.piece_of(t)?])
}

/// Parameters of one sub-model: statistic effects, per-actor popularity, and
/// per-piece log-baseline levels. For reporting, gamma[0] is pinned to zero
/// by `normalize_identifiability`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(p: usize, n: usize, q: usize) -> Self {
        ParamVector { alpha: vec![0.0; p], beta: vec![0.0; n], gamma: vec![0.0; q] }
    }

    pub fn dim(&self) -> usize {
        self.alpha.len() + self.beta.len() + self.gamma.len()
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(&self.beta).chain(&self.gamma).all(|v| v.is_finite())
    }

    pub fn to_flat(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        let mut k = 0;
        for &x in self.alpha.iter().chain(&self.beta).chain(&self.gamma) {
            v[k] = x;
            k += 1;
        }
        v
    }

    pub fn from_flat(flat: &DVector<f64>, p: usize, n: usize, q: usize) -> Self {
        assert_eq!(flat.len(), p + n + q);
        ParamVector {
            alpha: flat.iter().take(p).copied().collect(),
            beta: flat.iter().skip(p).take(n).copied().collect(),
            gamma: flat.iter().skip(p + n).take(q).copied().collect(),
        }
    }
}

/// One maximal span on which a pair is at risk with constant statistics.
/// Exposure weights are the at-risk lengths per effective baseline piece.
#[derive(Debug, Clone)]
struct Segment {
    i: ActorId,
    j: ActorId,
    start: Time,
    end: Time,
    /// Statistic vector frozen over the span.
    stats: Vec<f64>,
    /// 1 when the span ends with this pair's own modeled event.
    y: u8,
    /// Effective piece exposed by the event (meaningful when y = 1).
    q_event: u32,
}

/// Preprocessed likelihood data for one sub-model.
#[derive(Debug, Clone)]
pub struct LikelihoodGrid {
    pub kind: TransitionKind,
    pub n_actors: usize,
    pub stats: Vec<StatisticKind>,
    /// Original user-specified baseline grid.
    pub baseline: BaselineGrid,
    /// Original piece -> effective piece (pieces without events merge left).
    pub piece_map: Vec<usize>,
    /// Effective piece boundaries (contiguous spans of original pieces).
    eff_points: Vec<Time>,
    /// Events per effective piece (all >= 1 unless the sub-model is empty).
    pub events_per_piece: Vec<u32>,
    /// Modeled events per actor.
    pub actor_events: Vec<u32>,
    /// Total modeled events (origin-time events are conditioned on, not counted).
    pub n_events: usize,
    /// Theta-free constant: sum over events of ln(t - t*) on the merged grid.
    pub log_dt_sum: f64,
    /// Distinct grid times (event times, effective change points, 0 and T).
    grid_times: Vec<Time>,

    pub(crate) seg_pair: Vec<(ActorId, ActorId)>,
    pub(crate) seg_start: Vec<Time>,
    pub(crate) seg_end: Vec<Time>,
    pub(crate) seg_y: Vec<u8>,
    pub(crate) seg_qevent: Vec<u32>,
    pub(crate) seg_stats: Vec<f64>,
    pub(crate) seg_w_off: Vec<u32>,
    pub(crate) w_piece: Vec<u32>,
    pub(crate) w_len: Vec<f64>,
}

impl LikelihoodGrid {
    pub fn n_stats(&self) -> usize {
        self.stats.len()
    }

    pub fn n_pieces(&self) -> usize {
        self.eff_points.len() - 1
    }

    pub fn n_segments(&self) -> usize {
        self.seg_pair.len()
    }

    pub fn effective_points(&self) -> &[Time] {
        &self.eff_points
    }

    pub fn effective_piece_bounds(&self, q: usize) -> (Time, Time) {
        (self.eff_points[q], self.eff_points[q + 1])
    }

    /// Number of expanded Poisson pseudo-observations (grid interval x
    /// at-risk pair), the row count of the classical design-matrix route.
    pub fn expanded_row_count(&self) -> u64 {
        let mut rows = 0u64;
        for s in 0..self.n_segments() {
            let (b, e) = (self.seg_start[s], self.seg_end[s]);
            if e > b {
                let lo = self.grid_times.partition_point(|&g| g <= b);
                let hi = self.grid_times.partition_point(|&g| g <= e);
                rows += (hi - lo) as u64;
            } else {
                rows += 1;
            }
        }
        rows
    }

    /// Effective piece exposed by an interval ending at `t` (boundary times
    /// assigned leftward).
    pub fn effective_piece_left_of(&self, t: Time) -> usize {
        let q = self.eff_points.partition_point(|&c| c < t);
        q.saturating_sub(1).min(self.n_pieces() - 1)
    }

    /// Same grid restricted to a subset of the statistic columns. The
    /// segmentation refines any sub-list's (spans break whenever any tracked
    /// pair state changes), so exposure sums and event terms are unchanged;
    /// only the per-segment statistic vectors shrink. Used to evaluate many
    /// nested candidate models off one preprocessing pass.
    pub fn project_stats(&self, indices: &[usize]) -> LikelihoodGrid {
        let p_old = self.n_stats();
        assert!(indices.iter().all(|&k| k < p_old), "column index out of range");
        let p_new = indices.len();
        let mut seg_stats = Vec::with_capacity(self.n_segments() * p_new);
        for s in 0..self.n_segments() {
            let row = &self.seg_stats[s * p_old..s * p_old + p_old];
            for &k in indices {
                seg_stats.push(row[k]);
            }
        }
        LikelihoodGrid {
            stats: indices.iter().map(|&k| self.stats[k].clone()).collect(),
            seg_stats,
            ..self.clone()
        }
    }

    /// Modeled events per canonical pair.
    pub fn pair_event_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; n_pairs(self.n_actors)];
        for s in 0..self.n_segments() {
            if self.seg_y[s] == 1 {
                let (i, j) = self.seg_pair[s];
                counts[pair_index(i, j)] += 1;
            }
        }
        counts
    }

    /// Per-original-piece gamma levels implied by an effective-piece vector
    /// (merged pieces inherit the value of the piece they were merged into).
    pub fn gamma_per_original_piece(&self, gamma_eff: &[f64]) -> Vec<f64> {
        self.piece_map.iter().map(|&e| gamma_eff[e]).collect()
    }

    pub fn grid_times(&self) -> &[Time] {
        &self.grid_times
    }

    /// Builds the grid for one sub-model by replaying the transition stream.
    pub fn build(
        stream: &EventStream,
        covs: &CovariateTable,
        stats: &[StatisticKind],
        baseline: &BaselineGrid,
        policy: RiskSetPolicy,
        kind: TransitionKind,
        rem_mode: bool,
    ) -> Result<Self, LikelihoodError> {
        let t_end = stream.window_end;
        if (baseline.window_end() - t_end).abs() > 1e-9 * t_end.max(1.0) {
            return Err(LikelihoodError::GridMismatch {
                grid_end: baseline.window_end(),
                window_end: t_end,
            });
        }
        let n = stream.n_actors;
        let p = stats.len();
        let time_varying = stats.iter().any(|k| k.is_time_varying());

        // Pass 1: events per original piece (origin-time events are
        // conditioned on), then merge event-free pieces leftward.
        let mut orig_counts = vec![0u32; baseline.n_pieces()];
        for rec in stream.transitions() {
            if rec.kind == kind && rec.t > 0.0 {
                orig_counts[baseline.piece_left_of(rec.t)] += 1;
            }
        }
        let mut piece_map = vec![0usize; baseline.n_pieces()];
        let mut eff_points: Vec<Time> = vec![0.0];
        {
            let mut eff = 0usize;
            let mut seen_event_piece = false;
            for q in 0..baseline.n_pieces() {
                if orig_counts[q] > 0 {
                    if seen_event_piece {
                        eff += 1;
                        eff_points.push(baseline.points()[q]);
                    }
                    seen_event_piece = true;
                }
                piece_map[q] = eff;
            }
            eff_points.push(t_end);
        }
        let n_eff = eff_points.len() - 1;
        let eff_left_of = |t: Time| -> usize {
            let q = eff_points.partition_point(|&c| c < t);
            q.saturating_sub(1).min(n_eff - 1)
        };

        // Pass 2: replay, maintaining one open span per at-risk pair.
        let np = n_pairs(n);
        let mut state = StatisticsState::new(n, rem_mode);
        let mut open_start = vec![f64::NAN; np];
        let mut open_stats = vec![0.0f64; np * p.max(1)];
        let mut segments: Vec<Segment> = Vec::new();
        let mut events_per_piece = vec![0u32; n_eff];
        let mut actor_events = vec![0u32; n];
        let mut n_events = 0usize;
        let mut log_dt_sum = 0.0f64;

        let at_risk = |state: &StatisticsState, i: ActorId, j: ActorId| -> bool {
            match kind {
                TransitionKind::Formation => {
                    if rem_mode {
                        true
                    } else if state.currently_tied(i, j) {
                        false
                    } else {
                        policy == RiskSetPolicy::Unrestricted
                            || (!state.actor_busy(i) && !state.actor_busy(j))
                    }
                }
                TransitionKind::Dissolution => !rem_mode && state.currently_tied(i, j),
            }
        };

        let mut scratch = vec![0.0f64; p];
        macro_rules! open_pair {
            ($state:expr, $i:expr, $j:expr, $t:expr) => {{
                let idx = pair_index($i, $j);
                debug_assert!(open_start[idx].is_nan());
                $state.stat_vector(covs, stats, $i, $j, $t, &mut scratch)?;
                open_start[idx] = $t;
                open_stats[idx * p.max(1)..idx * p.max(1) + p].copy_from_slice(&scratch[..p]);
            }};
        }
        macro_rules! close_pair {
            ($i:expr, $j:expr, $t:expr, $y:expr) => {{
                let idx = pair_index($i, $j);
                let start = open_start[idx];
                debug_assert!(!start.is_nan());
                open_start[idx] = f64::NAN;
                if $t > start || $y == 1 {
                    segments.push(Segment {
                        i: $i,
                        j: $j,
                        start,
                        end: $t,
                        stats: open_stats[idx * p.max(1)..idx * p.max(1) + p].to_vec(),
                        y: $y,
                        q_event: if $y == 1 { eff_left_of($t) as u32 } else { 0 },
                    });
                }
            }};
        }

        // Open every initially at-risk pair at t = 0.
        for j in 1..n as ActorId {
            for i in 0..j {
                if at_risk(&state, i, j) {
                    open_pair!(state, i, j, 0.0);
                }
            }
        }

        // Merged walk over distinct grid times: transitions plus interior
        // effective change points.
        let transitions = stream.transitions();
        let mut ti = 0usize; // transition cursor
        let mut ci = 1usize; // eff_points cursor (interior points only)
        let mut t_prev = 0.0f64;
        loop {
            let next_trans = transitions.get(ti).map(|r| r.t);
            let next_cp = if ci < n_eff { Some(eff_points[ci]) } else { None };
            let t = match (next_trans, next_cp) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => break,
            };
            // Transitions at exactly T still carry events; anything later is
            // invalid and was rejected upstream.
            if t > t_end {
                break;
            }

            let mut touched: std::collections::BTreeSet<(ActorId, ActorId)> =
                Default::default();

            // All transitions at exactly this time share the grid interval
            // (t_prev, t].
            while ti < transitions.len() && transitions[ti].t == t {
                let rec = &transitions[ti];
                ti += 1;
                if rem_mode && rec.kind == TransitionKind::Dissolution {
                    continue;
                }
                let (ei, ej) = (rec.i.min(rec.j), rec.i.max(rec.j));
                let busy_before = (state.actor_busy(ei), state.actor_busy(ej));
                let affected = state.apply_transition(rec)?;
                let busy_after = (state.actor_busy(ei), state.actor_busy(ej));

                let mut refresh: std::collections::BTreeSet<(ActorId, ActorId)> =
                    affected.into_iter().collect();
                if kind == TransitionKind::Formation
                    && policy == RiskSetPolicy::ExclusiveEngagement
                {
                    for (a, flipped) in [(ei, busy_before.0 != busy_after.0), (ej, busy_before.1 != busy_after.1)] {
                        if flipped {
                            for x in 0..n as ActorId {
                                if x != a {
                                    refresh.insert((a.min(x), a.max(x)));
                                }
                            }
                        }
                    }
                }

                let is_own_event = rec.kind == kind;
                for &(i, j) in &refresh {
                    let idx = pair_index(i, j);
                    let own = is_own_event && (i, j) == (ei, ej);
                    let was_open = !open_start[idx].is_nan();
                    if own && !was_open {
                        return Err(LikelihoodError::EventOutsideRiskSet { i, j, t });
                    }
                    // Origin-time events are conditioned on (zero-length
                    // first interval), not modeled.
                    let y = (own && t > t_prev) as u8;
                    if was_open {
                        close_pair!(i, j, t, y);
                    }
                    if y == 1 {
                        n_events += 1;
                        log_dt_sum += (t - t_prev).ln();
                        events_per_piece[eff_left_of(t)] += 1;
                        actor_events[i as usize] += 1;
                        actor_events[j as usize] += 1;
                    }
                    if at_risk(&state, i, j) {
                        open_pair!(state, i, j, t);
                    }
                    touched.insert((i, j));
                }
            }

            // Advance past a change point coinciding with t.
            let crossed_cp = ci < n_eff && eff_points[ci] == t;
            if crossed_cp {
                ci += 1;
            }

            // With a time-varying statistic the frozen value must be
            // refreshed at every grid point for every at-risk pair that
            // carries it (only tied pairs do).
            if time_varying && kind == TransitionKind::Dissolution {
                for (i, j) in state.tied_pairs() {
                    if touched.contains(&(i, j)) {
                        continue;
                    }
                    let idx = pair_index(i, j);
                    if !open_start[idx].is_nan() {
                        close_pair!(i, j, t, 0);
                        open_pair!(state, i, j, t);
                    }
                }
            }

            t_prev = t;
        }

        // Window end closes every open span with no event indicator.
        for j in 1..n as ActorId {
            for i in 0..j {
                if !open_start[pair_index(i, j)].is_nan() {
                    close_pair!(i, j, t_end, 0);
                }
            }
        }

        // Deterministic summation order: pair-major, time-minor.
        segments.sort_by(|a, b| {
            (a.i, a.j)
                .cmp(&(b.i, b.j))
                .then_with(|| a.start.total_cmp(&b.start))
        });

        // Flatten, splitting exposure across effective pieces.
        let n_seg = segments.len();
        let mut grid = LikelihoodGrid {
            kind,
            n_actors: n,
            stats: stats.to_vec(),
            baseline: baseline.clone(),
            piece_map,
            eff_points: eff_points.clone(),
            events_per_piece,
            actor_events,
            n_events,
            log_dt_sum,
            grid_times: Vec::new(),
            seg_pair: Vec::with_capacity(n_seg),
            seg_start: Vec::with_capacity(n_seg),
            seg_end: Vec::with_capacity(n_seg),
            seg_y: Vec::with_capacity(n_seg),
            seg_qevent: Vec::with_capacity(n_seg),
            seg_stats: Vec::with_capacity(n_seg * p),
            seg_w_off: Vec::with_capacity(n_seg + 1),
            w_piece: Vec::new(),
            w_len: Vec::new(),
        };
        grid.seg_w_off.push(0);
        for seg in &segments {
            grid.seg_pair.push((seg.i, seg.j));
            grid.seg_start.push(seg.start);
            grid.seg_end.push(seg.end);
            grid.seg_y.push(seg.y);
            grid.seg_qevent.push(seg.q_event);
            grid.seg_stats.extend_from_slice(&seg.stats);
            if seg.end > seg.start {
                // first piece containing seg.start in [c_q, c_{q+1})
                let mut q = eff_points.partition_point(|&c| c <= seg.start) - 1;
                loop {
                    let lo = eff_points[q].max(seg.start);
                    let hi = eff_points[q + 1].min(seg.end);
                    if hi > lo {
                        grid.w_piece.push(q as u32);
                        grid.w_len.push(hi - lo);
                    }
                    if eff_points[q + 1] >= seg.end || q + 1 >= n_eff {
                        break;
                    }
                    q += 1;
                }
            }
            grid.seg_w_off.push(grid.w_piece.len() as u32);
        }

        // Distinct grid times for the classical row expansion.
        let mut times: Vec<f64> = stream.transitions().iter().map(|r| r.t).collect();
        times.extend_from_slice(&eff_points);
        times.retain(|&t| t <= t_end);
        times.sort_by(f64::total_cmp);
        times.dedup();
        grid.grid_times = times;

        Ok(grid)
    }

    fn check_params(&self, params: &ParamVector) -> Result<(), LikelihoodError> {
        if params.alpha.len() != self.n_stats()
            || params.beta.len() != self.n_actors
            || params.gamma.len() != self.n_pieces()
        {
            return Err(LikelihoodError::DimensionMismatch(format!(
                "params (P={}, N={}, Q={}) vs grid (P={}, N={}, Q={})",
                params.alpha.len(),
                params.beta.len(),
                params.gamma.len(),
                self.n_stats(),
                self.n_actors,
                self.n_pieces()
            )));
        }
        Ok(())
    }

    #[inline]
    fn seg_lin(&self, s: usize, params: &ParamVector) -> f64 {
        let p = self.n_stats();
        let (i, j) = self.seg_pair[s];
        let mut lin = params.beta[i as usize] + params.beta[j as usize];
        let stats = &self.seg_stats[s * p..s * p + p];
        for (a, v) in params.alpha.iter().zip(stats) {
            lin += a * v;
        }
        lin
    }

    /// Exposure of segment `s`: exp(lin) * sum_q exp(gamma_q) * w_q.
    #[inline]
    fn seg_exposure(&self, s: usize, lin: f64, exp_gamma: &[f64]) -> f64 {
        let (lo, hi) = (self.seg_w_off[s] as usize, self.seg_w_off[s + 1] as usize);
        let mut base = 0.0;
        for k in lo..hi {
            base += exp_gamma[self.w_piece[k] as usize] * self.w_len[k];
        }
        cexp(lin) * base
    }

    /// Log-likelihood of the sub-model at `params` (zero-length intervals
    /// skipped; 0 * log(.) = 0 by convention).
    pub fn log_likelihood(&self, params: &ParamVector) -> Result<f64, LikelihoodError> {
        self.check_params(params)?;
        let exp_gamma: Vec<f64> = params.gamma.iter().map(|&g| cexp(g)).collect();
        let mut ll = self.log_dt_sum;
        for s in 0..self.n_segments() {
            let lin = self.seg_lin(s, params);
            if self.seg_y[s] == 1 {
                ll += lin + params.gamma[self.seg_qevent[s] as usize];
            }
            ll -= self.seg_exposure(s, lin, &exp_gamma);
        }
        Ok(ll)
    }

    /// Gradient and Hessian of the log-likelihood in the statistic effects.
    pub fn alpha_derivatives(
        &self,
        params: &ParamVector,
    ) -> Result<(DVector<f64>, DMatrix<f64>), LikelihoodError> {
        self.check_params(params)?;
        let p = self.n_stats();
        let exp_gamma: Vec<f64> = params.gamma.iter().map(|&g| cexp(g)).collect();
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for s in 0..self.n_segments() {
            let lin = self.seg_lin(s, params);
            let e = self.seg_exposure(s, lin, &exp_gamma);
            let stats = &self.seg_stats[s * p..s * p + p];
            let y = self.seg_y[s] as f64;
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
        Ok((grad, hess))
    }

    /// Per-pair gamma-weighted exposure with the popularity factors removed:
    /// G_ij = sum over the pair's spans of exp(alpha . s) * sum_q exp(gamma_q) w_q.
    /// Feeds the popularity (MM) update.
    pub fn pair_exposure_against(
        &self,
        alpha: &[f64],
        exp_gamma: &[f64],
        out: &mut [f64],
    ) -> Result<(), LikelihoodError> {
        if alpha.len() != self.n_stats() || exp_gamma.len() != self.n_pieces() {
            return Err(LikelihoodError::DimensionMismatch("pair_exposure_against".into()));
        }
        out.fill(0.0);
        let p = self.n_stats();
        for s in 0..self.n_segments() {
            let stats = &self.seg_stats[s * p..s * p + p];
            let mut lin = 0.0;
            for (a, v) in alpha.iter().zip(stats) {
                lin += a * v;
            }
            let (lo, hi) = (self.seg_w_off[s] as usize, self.seg_w_off[s + 1] as usize);
            let mut base = 0.0;
            for k in lo..hi {
                base += exp_gamma[self.w_piece[k] as usize] * self.w_len[k];
            }
            let (i, j) = self.seg_pair[s];
            out[pair_index(i, j)] += cexp(lin) * base;
        }
        Ok(())
    }

    /// Per-effective-piece exposure with the baseline factor removed:
    /// A_q = sum over segments of exp(alpha . s + beta_i + beta_j) * w_q.
    /// Feeds the closed-form baseline update.
    pub fn piece_exposure_against(
        &self,
        params: &ParamVector,
        out: &mut [f64],
    ) -> Result<(), LikelihoodError> {
        self.check_params(params)?;
        if out.len() != self.n_pieces() {
            return Err(LikelihoodError::DimensionMismatch("piece_exposure_against".into()));
        }
        out.fill(0.0);
        for s in 0..self.n_segments() {
            let lin = cexp(self.seg_lin(s, params));
            let (lo, hi) = (self.seg_w_off[s] as usize, self.seg_w_off[s + 1] as usize);
            for k in lo..hi {
                out[self.w_piece[k] as usize] += lin * self.w_len[k];
            }
        }
        Ok(())
    }
}

/// Full gradient and the six distinct Hessian blocks of one sub-model.
/// The gamma-gamma block is diagonal; everything is reported on the
/// effective pieces.
#[derive(Debug, Clone)]
pub struct FullDerivs {
    pub g_alpha: DVector<f64>,
    pub g_beta: DVector<f64>,
    pub g_gamma: DVector<f64>,
    pub h_aa: DMatrix<f64>,
    pub h_ab: DMatrix<f64>,
    pub h_ag: DMatrix<f64>,
    pub h_bb: DMatrix<f64>,
    pub h_bg: DMatrix<f64>,
    pub h_gg_diag: DVector<f64>,
}

impl FullDerivs {
    pub fn gradient_flat(&self) -> DVector<f64> {
        let (p, n, q) = (self.g_alpha.len(), self.g_beta.len(), self.g_gamma.len());
        let mut g = DVector::zeros(p + n + q);
        g.rows_mut(0, p).copy_from(&self.g_alpha);
        g.rows_mut(p, n).copy_from(&self.g_beta);
        g.rows_mut(p + n, q).copy_from(&self.g_gamma);
        g
    }

    /// Dense symmetric Hessian, assembled from the blocks.
    pub fn hessian_full(&self) -> DMatrix<f64> {
        let (p, n, q) = (self.g_alpha.len(), self.g_beta.len(), self.g_gamma.len());
        let d = p + n + q;
        let mut h = DMatrix::zeros(d, d);
        h.view_mut((0, 0), (p, p)).copy_from(&self.h_aa);
        h.view_mut((0, p), (p, n)).copy_from(&self.h_ab);
        h.view_mut((p, 0), (n, p)).copy_from(&self.h_ab.transpose());
        h.view_mut((0, p + n), (p, q)).copy_from(&self.h_ag);
        h.view_mut((p + n, 0), (q, p)).copy_from(&self.h_ag.transpose());
        h.view_mut((p, p), (n, n)).copy_from(&self.h_bb);
        h.view_mut((p, p + n), (n, q)).copy_from(&self.h_bg);
        h.view_mut((p + n, p), (q, n)).copy_from(&self.h_bg.transpose());
        for k in 0..q {
            h[(p + n + k, p + n + k)] = self.h_gg_diag[k];
        }
        h
    }
}

/// The memory guard for the dense reference path: (P+N+Q)^2 entries plus the
/// expanded rows must stay reasonable before `hessian_full` or the classical
/// fitter is attempted.
pub fn full_matrix_entries(p: usize, n: usize, q: usize) -> u64 {
    let d = (p + n + q) as u64;
    d * d
}

/// Full gradient and Hessian blocks at `params`, from one segment sweep.
pub fn full_derivatives(
    grid: &LikelihoodGrid,
    params: &ParamVector,
) -> Result<FullDerivs, LikelihoodError> {
    grid.check_params(params)?;
    let (p, n, q) = (grid.n_stats(), grid.n_actors, grid.n_pieces());
    if full_matrix_entries(p, n, q) > 100_000_000 {
        return Err(LikelihoodError::InstanceTooLarge(format!(
            "full Hessian would hold {} entries",
            full_matrix_entries(p, n, q)
        )));
    }
    let exp_gamma: Vec<f64> = params.gamma.iter().map(|&g| cexp(g)).collect();
    let mut d = FullDerivs {
        g_alpha: DVector::zeros(p),
        g_beta: DVector::zeros(n),
        g_gamma: DVector::zeros(q),
        h_aa: DMatrix::zeros(p, p),
        h_ab: DMatrix::zeros(p, n),
        h_ag: DMatrix::zeros(p, q),
        h_bb: DMatrix::zeros(n, n),
        h_bg: DMatrix::zeros(n, q),
        h_gg_diag: DVector::zeros(q),
    };
    for k in 0..q {
        d.g_gamma[k] = grid.events_per_piece[k] as f64;
    }
    for s in 0..grid.n_segments() {
        let lin = grid.seg_lin(s, params);
        let elin = cexp(lin);
        let stats = &grid.seg_stats[s * p..s * p + p];
        let (i, j) = grid.seg_pair[s];
        let (iu, ju) = (i as usize, j as usize);
        let y = grid.seg_y[s] as f64;
        let (wlo, whi) = (grid.seg_w_off[s] as usize, grid.seg_w_off[s + 1] as usize);
        let mut e_total = 0.0;
        for k in wlo..whi {
            let qk = grid.w_piece[k] as usize;
            let e_q = elin * exp_gamma[qk] * grid.w_len[k];
            e_total += e_q;
            d.g_gamma[qk] -= e_q;
            d.h_gg_diag[qk] -= e_q;
            d.h_bg[(iu, qk)] -= e_q;
            d.h_bg[(ju, qk)] -= e_q;
            for a in 0..p {
                d.h_ag[(a, qk)] -= stats[a] * e_q;
            }
        }
        d.g_beta[iu] += y - e_total;
        d.g_beta[ju] += y - e_total;
        d.h_bb[(iu, iu)] -= e_total;
        d.h_bb[(ju, ju)] -= e_total;
        d.h_bb[(iu, ju)] -= e_total;
        d.h_bb[(ju, iu)] -= e_total;
        for a in 0..p {
            d.g_alpha[a] += stats[a] * (y - e_total);
            d.h_ab[(a, iu)] -= stats[a] * e_total;
            d.h_ab[(a, ju)] -= stats[a] * e_total;
            for b in a..p {
                d.h_aa[(a, b)] -= stats[a] * stats[b] * e_total;
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            d.h_aa[(a, b)] = d.h_aa[(b, a)];
        }
    }
    Ok(d)
}

/// Intensity of one pair at `t` under the sub-model; errors when the pair is
/// outside the risk set.
#[allow(clippy::too_many_arguments)]
pub fn pair_intensity(
    state: &StatisticsState,
    covs: &CovariateTable,
    stats: &[StatisticKind],
    baseline: &BaselineGrid,
    params: &ParamVector,
    policy: RiskSetPolicy,
    kind: TransitionKind,
    i: ActorId,
    j: ActorId,
    t: Time,
) -> Result<f64, LikelihoodError> {
    let (i, j) = (i.min(j), i.max(j));
    let eligible = match kind {
        TransitionKind::Formation => {
            if state.rem_mode {
                true
            } else if state.currently_tied(i, j) {
                false
            } else {
                policy == RiskSetPolicy::Unrestricted
                    || (!state.actor_busy(i) && !state.actor_busy(j))
            }
        }
        TransitionKind::Dissolution => state.currently_tied(i, j),
    };
    if !eligible {
        return Err(LikelihoodError::PairNotAtRisk { i, j, t });
    }
    let mut s = vec![0.0; stats.len()];
    state.stat_vector(covs, stats, i, j, t, &mut s)?;
    let mut lin = params.beta[i as usize] + params.beta[j as usize];
    for (a, v) in params.alpha.iter().zip(&s) {
        lin += a * v;
    }
    lin += baseline_value(t, &params.gamma, baseline)?;
    Ok(cexp(lin))
}

/// Exact integral of the intensity over `[t_lo, t_hi)` with statistics frozen
/// at `t_lo` (the state must be replayed to `t_lo`): the sum over baseline
/// pieces of exp(alpha . s + beta_i + beta_j + gamma_q) times overlap length.
#[allow(clippy::too_many_arguments)]
pub fn exposure_integral(
    state: &StatisticsState,
    covs: &CovariateTable,
    stats: &[StatisticKind],
    baseline: &BaselineGrid,
    params: &ParamVector,
    i: ActorId,
    j: ActorId,
    t_lo: Time,
    t_hi: Time,
) -> Result<f64, LikelihoodError> {
    if !(t_lo < t_hi) {
        return Err(LikelihoodError::InvalidInterval { lo: t_lo, hi: t_hi });
    }
    if params.gamma.len() != baseline.n_pieces() {
        return Err(LikelihoodError::DimensionMismatch("gamma vs baseline pieces".into()));
    }
    let (i, j) = (i.min(j), i.max(j));
    let mut s = vec![0.0; stats.len()];
    state.stat_vector(covs, stats, i, j, t_lo, &mut s)?;
    let mut lin = params.beta[i as usize] + params.beta[j as usize];
    for (a, v) in params.alpha.iter().zip(&s) {
        lin += a * v;
    }
    let mut total = 0.0;
    let q0 = baseline.piece_of(t_lo)?;
    for q in q0..baseline.n_pieces() {
        let (lo, hi) = baseline.piece_bounds(q);
        let lo = lo.max(t_lo);
        let hi = hi.min(t_hi);
        if hi > lo {
            total += cexp(lin + params.gamma[q]) * (hi - lo);
        }
        if baseline.piece_bounds(q).1 >= t_hi {
            break;
        }
    }
    Ok(total)
}
