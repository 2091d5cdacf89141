//! Summary statistics over the interaction history, maintained incrementally.
//!
//! All endogenous count statistics are log(count + 1)-transformed so the
//! intensity stays finite on finite streams. The state is replayed through
//! the transition list; after each transition only the pairs whose statistic
//! vector can change are touched (the event pair itself plus third parties of
//! common-partner statistics), which is what keeps likelihood preprocessing
//! near-linear in the number of events.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::event_data::{
    pair_index, ActorId, CovariateTable, EventStream, Time, TransitionKind, TransitionRecord,
};

#[derive(Debug, Error)]
pub enum StatError {
    #[error("statistic {kind} is not admissible: {why}")]
    InadmissibleStatistic { kind: String, why: String },
    #[error("duration statistic queried on untied pair ({i}, {j})")]
    PairNotTied { i: ActorId, j: ActorId },
    #[error("transition at t = {t} is before the replay time {replay_t}")]
    OutOfOrderTransition { t: f64, replay_t: f64 },
    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),
    #[error("unknown statistic name `{0}`")]
    UnknownStatisticName(String),
}

/// One summary statistic. Covariate-backed kinds carry the covariate name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StatisticKind {
    /// log(#currently shared active partners + 1).
    CurrentCommonPartner,
    /// log(#partners ever shared + 1).
    GeneralCommonPartner,
    /// log(#past interactions of the pair + 1), counting started interactions.
    NumberInteraction,
    /// log(elapsed time of the ongoing interaction + 1); dissolution model only.
    CurrentInteractionDuration,
    /// Raw dyadic covariate z_ij.
    DyadicCovariate(String),
    /// Indicator of equal categorical values.
    CategoricalMatch(String),
    /// Absolute difference of continuous values.
    AbsoluteDifference(String),
}

impl StatisticKind {
    /// Parses the config-file spelling: `ccp`, `gcp`, `ni`, `dur`,
    /// `dyad:name`, `match:name`, `absdiff:name`.
    pub fn parse(name: &str) -> Result<Self, StatError> {
        let name = name.trim();
        match name {
            "ccp" => return Ok(StatisticKind::CurrentCommonPartner),
            "gcp" => return Ok(StatisticKind::GeneralCommonPartner),
            "ni" => return Ok(StatisticKind::NumberInteraction),
            "dur" => return Ok(StatisticKind::CurrentInteractionDuration),
            _ => {}
        }
        if let Some((prefix, arg)) = name.split_once(':') {
            let arg = arg.trim().to_string();
            if arg.is_empty() {
                return Err(StatError::UnknownStatisticName(name.into()));
            }
            return match prefix.trim() {
                "dyad" => Ok(StatisticKind::DyadicCovariate(arg)),
                "match" => Ok(StatisticKind::CategoricalMatch(arg)),
                "absdiff" => Ok(StatisticKind::AbsoluteDifference(arg)),
                _ => Err(StatError::UnknownStatisticName(name.into())),
            };
        }
        Err(StatError::UnknownStatisticName(name.into()))
    }

    /// True for log(count+1)-transformed kinds, where the 2^alpha effect
    /// reading applies.
    pub fn is_log1p_count(&self) -> bool {
        matches!(
            self,
            StatisticKind::CurrentCommonPartner
                | StatisticKind::GeneralCommonPartner
                | StatisticKind::NumberInteraction
                | StatisticKind::CurrentInteractionDuration
        )
    }

    /// True when the value depends on the current replay time, not only on
    /// the transition history (the ongoing-duration statistic).
    pub fn is_time_varying(&self) -> bool {
        matches!(self, StatisticKind::CurrentInteractionDuration)
    }

    pub fn is_endogenous(&self) -> bool {
        matches!(
            self,
            StatisticKind::CurrentCommonPartner
                | StatisticKind::GeneralCommonPartner
                | StatisticKind::NumberInteraction
                | StatisticKind::CurrentInteractionDuration
        )
    }
}

impl fmt::Display for StatisticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StatisticKind::CurrentCommonPartner => write!(f, "ccp"),
            StatisticKind::GeneralCommonPartner => write!(f, "gcp"),
            StatisticKind::NumberInteraction => write!(f, "ni"),
            StatisticKind::CurrentInteractionDuration => write!(f, "dur"),
            StatisticKind::DyadicCovariate(n) => write!(f, "dyad:{n}"),
            StatisticKind::CategoricalMatch(n) => write!(f, "match:{n}"),
            StatisticKind::AbsoluteDifference(n) => write!(f, "absdiff:{n}"),
        }
    }
}

/// Incrementally replayed interaction state: per-pair counters plus per-actor
/// adjacency sets for the current-tie and ever-tie relations, so common
/// partner deltas cost O(degree) per event.
#[derive(Debug, Clone)]
pub struct StatisticsState {
    pub n_actors: usize,
    /// Point-event mode: formations never open a tie (dissolution-free).
    pub rem_mode: bool,
    replay_t: Time,
    currently_tied: Vec<bool>,
    ever_tied: Vec<bool>,
    n_past: Vec<u32>,
    last_start: Vec<f64>,
    adj_current: Vec<BTreeSet<ActorId>>,
    adj_ever: Vec<BTreeSet<ActorId>>,
    busy: Vec<u32>,
}

impl StatisticsState {
    pub fn new(n_actors: usize, rem_mode: bool) -> Self {
        let np = crate::event_data::n_pairs(n_actors);
        StatisticsState {
            n_actors,
            rem_mode,
            replay_t: 0.0,
            currently_tied: vec![false; np],
            ever_tied: vec![false; np],
            n_past: vec![0; np],
            last_start: vec![f64::NAN; np],
            adj_current: vec![BTreeSet::new(); n_actors],
            adj_ever: vec![BTreeSet::new(); n_actors],
            busy: vec![0; n_actors],
        }
    }

    pub fn replay_time(&self) -> Time {
        self.replay_t
    }

    pub fn currently_tied(&self, i: ActorId, j: ActorId) -> bool {
        self.currently_tied[pair_index(i.min(j), i.max(j))]
    }

    pub fn ever_tied(&self, i: ActorId, j: ActorId) -> bool {
        self.ever_tied[pair_index(i.min(j), i.max(j))]
    }

    pub fn n_past(&self, i: ActorId, j: ActorId) -> u32 {
        self.n_past[pair_index(i.min(j), i.max(j))]
    }

    pub fn last_start(&self, i: ActorId, j: ActorId) -> Option<Time> {
        let v = self.last_start[pair_index(i.min(j), i.max(j))];
        if v.is_nan() { None } else { Some(v) }
    }

    pub fn actor_busy(&self, a: ActorId) -> bool {
        self.busy[a as usize] > 0
    }

    pub fn current_partners(&self, a: ActorId) -> &BTreeSet<ActorId> {
        &self.adj_current[a as usize]
    }

    /// Currently tied pairs, in canonical order.
    pub fn tied_pairs(&self) -> Vec<(ActorId, ActorId)> {
        let mut out: Vec<(ActorId, ActorId)> = Vec::new();
        for (a, adj) in self.adj_current.iter().enumerate() {
            for &b in adj.iter() {
                if (a as ActorId) < b {
                    out.push((a as ActorId, b));
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn common_count(sets: &[BTreeSet<ActorId>], i: ActorId, j: ActorId) -> u32 {
        let (a, b) = (&sets[i as usize], &sets[j as usize]);
        let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
        // Neither set contains its own actor, so i and j never appear in the
        // intersection.
        small.iter().filter(|h| large.contains(h)).count() as u32
    }

    pub fn n_common_current(&self, i: ActorId, j: ActorId) -> u32 {
        Self::common_count(&self.adj_current, i, j)
    }

    pub fn n_common_ever(&self, i: ActorId, j: ActorId) -> u32 {
        Self::common_count(&self.adj_ever, i, j)
    }

    /// Applies one transition and returns the sorted set of pairs whose
    /// statistic vector may have changed: the event pair itself plus, for the
    /// common-partner statistics, third-party pairs through the shared actor.
    pub fn apply_transition(
        &mut self,
        rec: &TransitionRecord,
    ) -> Result<Vec<(ActorId, ActorId)>, StatError> {
        if rec.t < self.replay_t {
            return Err(StatError::OutOfOrderTransition { t: rec.t, replay_t: self.replay_t });
        }
        self.replay_t = rec.t;
        let (i, j) = (rec.i.min(rec.j), rec.i.max(rec.j));
        let idx = pair_index(i, j);
        let mut affected: BTreeSet<(ActorId, ActorId)> = BTreeSet::new();
        affected.insert((i, j));

        let canon = |a: ActorId, b: ActorId| (a.min(b), a.max(b));
        match rec.kind {
            TransitionKind::Formation => {
                self.n_past[idx] += 1;
                self.last_start[idx] = rec.t;
                if !self.ever_tied[idx] {
                    // v flips: general common partner counts change through i and j.
                    for &b in &self.adj_ever[j as usize] {
                        if b != i {
                            affected.insert(canon(i, b));
                        }
                    }
                    for &b in &self.adj_ever[i as usize] {
                        if b != j {
                            affected.insert(canon(j, b));
                        }
                    }
                    self.ever_tied[idx] = true;
                    self.adj_ever[i as usize].insert(j);
                    self.adj_ever[j as usize].insert(i);
                }
                if !self.rem_mode {
                    // u flips: current common partner counts change.
                    for &b in &self.adj_current[j as usize] {
                        if b != i {
                            affected.insert(canon(i, b));
                        }
                    }
                    for &b in &self.adj_current[i as usize] {
                        if b != j {
                            affected.insert(canon(j, b));
                        }
                    }
                    self.currently_tied[idx] = true;
                    self.adj_current[i as usize].insert(j);
                    self.adj_current[j as usize].insert(i);
                    self.busy[i as usize] += 1;
                    self.busy[j as usize] += 1;
                }
            }
            TransitionKind::Dissolution => {
                debug_assert!(!self.rem_mode, "dissolution in point-event mode");
                self.currently_tied[idx] = false;
                self.adj_current[i as usize].remove(&j);
                self.adj_current[j as usize].remove(&i);
                self.busy[i as usize] = self.busy[i as usize].saturating_sub(1);
                self.busy[j as usize] = self.busy[j as usize].saturating_sub(1);
                for &b in &self.adj_current[j as usize] {
                    if b != i {
                        affected.insert(canon(i, b));
                    }
                }
                for &b in &self.adj_current[i as usize] {
                    if b != j {
                        affected.insert(canon(j, b));
                    }
                }
            }
        }
        Ok(affected.into_iter().collect())
    }

    /// Value of one statistic for pair (i, j) at time `t >= replay_time()`.
    pub fn stat_value(
        &self,
        covs: &CovariateTable,
        kind: &StatisticKind,
        i: ActorId,
        j: ActorId,
        t: Time,
    ) -> Result<f64, StatError> {
        let (i, j) = (i.min(j), i.max(j));
        match kind {
            StatisticKind::CurrentCommonPartner => {
                Ok(((self.n_common_current(i, j) as f64) + 1.0).ln())
            }
            StatisticKind::GeneralCommonPartner => {
                Ok(((self.n_common_ever(i, j) as f64) + 1.0).ln())
            }
            StatisticKind::NumberInteraction => Ok((self.n_past(i, j) as f64 + 1.0).ln()),
            StatisticKind::CurrentInteractionDuration => {
                if !self.currently_tied(i, j) {
                    return Err(StatError::PairNotTied { i, j });
                }
                let start = self.last_start(i, j).expect("tied pair has a start time");
                Ok((t - start + 1.0).ln())
            }
            StatisticKind::DyadicCovariate(name) => covs
                .dyadic(name)
                .map(|v| v[pair_index(i, j)])
                .ok_or_else(|| StatError::UnknownCovariate(name.clone())),
            StatisticKind::CategoricalMatch(name) => covs
                .categorical(name)
                .map(|v| (v[i as usize] == v[j as usize]) as u8 as f64)
                .ok_or_else(|| StatError::UnknownCovariate(name.clone())),
            StatisticKind::AbsoluteDifference(name) => covs
                .continuous(name)
                .map(|v| (v[i as usize] - v[j as usize]).abs())
                .ok_or_else(|| StatError::UnknownCovariate(name.clone())),
        }
    }

    /// Fills `out` with the statistic vector for pair (i, j) at time t.
    pub fn stat_vector(
        &self,
        covs: &CovariateTable,
        kinds: &[StatisticKind],
        i: ActorId,
        j: ActorId,
        t: Time,
        out: &mut [f64],
    ) -> Result<(), StatError> {
        debug_assert_eq!(kinds.len(), out.len());
        for (slot, kind) in out.iter_mut().zip(kinds) {
            *slot = self.stat_value(covs, kind, i, j, t)?;
        }
        Ok(())
    }
}

/// From-scratch statistics for every pair at time `t`, straight from the raw
/// event list. Brute force; the oracle the incremental cache is tested
/// against.
pub fn recompute_full(
    stream: &EventStream,
    covs: &CovariateTable,
    kinds: &[StatisticKind],
    t: Time,
    rem_mode: bool,
) -> Result<Vec<Vec<f64>>, StatError> {
    let n = stream.n_actors;
    // Per-pair state straight from event intervals: a transition at exactly t
    // is not yet part of the history.
    let np = crate::event_data::n_pairs(n);
    let mut tied = vec![false; np];
    let mut ever = vec![false; np];
    let mut count = vec![0u32; np];
    let mut last = vec![f64::NAN; np];
    for e in stream.events() {
        if e.begin >= t {
            continue;
        }
        let idx = pair_index(e.i, e.j);
        ever[idx] = true;
        count[idx] += 1;
        last[idx] = if last[idx].is_nan() { e.begin } else { last[idx].max(e.begin) };
        if !rem_mode {
            let ongoing = match e.end {
                None => true,
                Some(end) => end >= t,
            };
            if ongoing {
                tied[idx] = true;
            }
        }
    }
    let common = |table: &Vec<bool>, i: u32, j: u32| -> u32 {
        let mut c = 0;
        for h in 0..n as u32 {
            if h == i || h == j {
                continue;
            }
            if table[pair_index(h.min(i), h.max(i))] && table[pair_index(h.min(j), h.max(j))] {
                c += 1;
            }
        }
        c
    };
    let mut out = vec![Vec::new(); np];
    for j in 1..n as u32 {
        for i in 0..j {
            let idx = pair_index(i, j);
            let mut row = Vec::with_capacity(kinds.len());
            for kind in kinds {
                let v = match kind {
                    StatisticKind::CurrentCommonPartner => (common(&tied, i, j) as f64 + 1.0).ln(),
                    StatisticKind::GeneralCommonPartner => (common(&ever, i, j) as f64 + 1.0).ln(),
                    StatisticKind::NumberInteraction => (count[idx] as f64 + 1.0).ln(),
                    StatisticKind::CurrentInteractionDuration => {
                        if !tied[idx] {
                            f64::NAN
                        } else {
                            (t - last[idx] + 1.0).ln()
                        }
                    }
                    StatisticKind::DyadicCovariate(name) => covs
                        .dyadic(name)
                        .ok_or_else(|| StatError::UnknownCovariate(name.clone()))?[idx],
                    StatisticKind::CategoricalMatch(name) => {
                        let v = covs
                            .categorical(name)
                            .ok_or_else(|| StatError::UnknownCovariate(name.clone()))?;
                        (v[i as usize] == v[j as usize]) as u8 as f64
                    }
                    StatisticKind::AbsoluteDifference(name) => {
                        let v = covs
                            .continuous(name)
                            .ok_or_else(|| StatError::UnknownCovariate(name.clone()))?;
                        (v[i as usize] - v[j as usize]).abs()
                    }
                };
                row.push(v);
            }
            out[idx] = row;
        }
    }
    Ok(out)
}
