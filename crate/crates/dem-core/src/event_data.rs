//! Durational event streams: parsing, validation, the dual transition
//! representation, and replayable pair state.
//!
//! An event is an undirected interaction `(i, j, begin, end)`; `end` is absent
//! while the interaction is still ongoing at the window end. Every event is
//! equivalently two transitions `(i, j, t, kind)` with kind marking the start
//! (formation, 0->1) or the stop (dissolution, 1->0) of the interaction. All
//! replay and likelihood machinery runs off the time-sorted transition list.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;
use std::io::BufRead;
use std::path::Path;

use thiserror::Error;

pub type ActorId = u32;
pub type Time = f64;

/// One undirected interaction with explicit begin/end; `end == None` means the
/// interaction is still ongoing when the observation window closes (censored).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationalEvent {
    pub i: ActorId,
    pub j: ActorId,
    pub begin: Time,
    pub end: Option<Time>,
}

impl DurationalEvent {
    /// Canonicalizes actor order so `i < j`.
    pub fn new(a: ActorId, b: ActorId, begin: Time, end: Option<Time>) -> Self {
        let (i, j) = if a < b { (a, b) } else { (b, a) };
        DurationalEvent { i, j, begin, end }
    }

    pub fn is_censored(&self) -> bool {
        self.end.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TransitionKind {
    /// A pair goes from "not interacting" to "interacting" (0 -> 1).
    Formation,
    /// A pair goes from "interacting" to "not interacting" (1 -> 0).
    Dissolution,
}

impl fmt::Display for TransitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransitionKind::Formation => write!(f, "formation"),
            TransitionKind::Dissolution => write!(f, "dissolution"),
        }
    }
}

/// One endpoint of a durational event in the dual `(i, j, t, r)` form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub i: ActorId,
    pub j: ActorId,
    pub t: Time,
    pub kind: TransitionKind,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: malformed row: {msg}")]
    MalformedRow { line: usize, msg: String },
    #[error("line {line}: non-positive duration (begin {begin} >= end {end})")]
    NegativeDuration { line: usize, begin: f64, end: f64 },
    #[error("line {line}: self loop (i == j == {actor})")]
    SelfLoop { line: usize, actor: ActorId },
    #[error("actor ids not dense in 0..{n_expected} (max id {max_id}, {n_seen} distinct); pass remap to relabel")]
    ActorIdGap {
        max_id: ActorId,
        n_seen: usize,
        n_expected: usize,
    },
    #[error("event time outside the observation window: {t} not in [0, {window_end}]")]
    TimeOutOfWindow { t: f64, window_end: f64 },
    #[error("time {t} is not a valid query point for window [0, {window_end}]")]
    QueryOutOfWindow { t: f64, window_end: f64 },
    #[error("pair ({i}, {j}) holds overlapping events (second begins at {t} while tied)")]
    OverlappingPairEvents { i: ActorId, j: ActorId, t: f64 },
    #[error("policy violation: actor {actor} is in two simultaneous events at t = {t}")]
    PolicyViolation { actor: ActorId, t: f64 },
    #[error("covariate `{name}` is missing a value for {what}")]
    MissingCovariate { name: String, what: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Risk-set construction rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RiskSetPolicy {
    /// Formation risk set = all currently untied pairs.
    Unrestricted,
    /// Additionally drops from the formation risk set any pair with an actor
    /// already engaged in an ongoing event (phone-call semantics).
    ExclusiveEngagement,
}

/// Validated stream of durational events plus its derived transition list.
///
/// Immutable after construction; transitions are sorted by time with
/// dissolutions ordered before formations at equal timestamps so a pair can
/// end and immediately restart without ever being "tied twice".
#[derive(Debug, Clone)]
pub struct EventStream {
    events: Vec<DurationalEvent>,
    transitions: Vec<TransitionRecord>,
    pub n_actors: usize,
    pub window_end: Time,
}

/// What `parse_events` did to the raw file, for logging and sidecars.
#[derive(Debug, Clone, Serialize)]
pub struct IngestSummary {
    pub n_rows: usize,
    pub n_events: usize,
    pub n_censored: usize,
    pub n_actors: usize,
    pub time_shift: f64,
    pub window_end: f64,
}

impl EventStream {
    /// Builds a validated stream from raw events. Events are canonicalized
    /// (`i < j`), sorted by begin time, and expanded into transitions.
    pub fn from_events(
        raw: Vec<DurationalEvent>,
        n_actors: usize,
        window_end: Time,
    ) -> Result<Self, DataError> {
        Self::from_events_impl(raw, n_actors, window_end, false)
    }

    /// Point-event variant: rows are instantaneous events (ends, if any, are
    /// ignored downstream), so the two-state overlap rule does not apply.
    pub fn from_point_events(
        raw: Vec<DurationalEvent>,
        n_actors: usize,
        window_end: Time,
    ) -> Result<Self, DataError> {
        Self::from_events_impl(raw, n_actors, window_end, true)
    }

    fn from_events_impl(
        raw: Vec<DurationalEvent>,
        n_actors: usize,
        window_end: Time,
        point_mode: bool,
    ) -> Result<Self, DataError> {
        let mut events: Vec<DurationalEvent> = raw
            .into_iter()
            .map(|e| DurationalEvent::new(e.i, e.j, e.begin, e.end))
            .collect();
        for e in &events {
            if e.i == e.j {
                return Err(DataError::SelfLoop { line: 0, actor: e.i });
            }
            if e.begin < 0.0 {
                return Err(DataError::TimeOutOfWindow { t: e.begin, window_end });
            }
            if let Some(end) = e.end {
                if end <= e.begin {
                    return Err(DataError::NegativeDuration { line: 0, begin: e.begin, end });
                }
                if end > window_end {
                    return Err(DataError::TimeOutOfWindow { t: end, window_end });
                }
            } else if e.begin > window_end {
                return Err(DataError::TimeOutOfWindow { t: e.begin, window_end });
            }
        }
        events.sort_by(|a, b| {
            a.begin
                .total_cmp(&b.begin)
                .then_with(|| (a.i, a.j).cmp(&(b.i, b.j)))
        });
        let transitions = to_transitions(&events);
        let stream = EventStream { events, transitions, n_actors, window_end };
        if !point_mode {
            stream.check_no_overlap()?;
        }
        Ok(stream)
    }

    pub fn events(&self) -> &[DurationalEvent] {
        &self.events
    }

    pub fn transitions(&self) -> &[TransitionRecord] {
        &self.transitions
    }

    /// A pair must not hold two simultaneously ongoing events: a tied pair is
    /// outside the formation risk set, so such data cannot arise under the
    /// model's two-state semantics.
    fn check_no_overlap(&self) -> Result<(), DataError> {
        let mut tied: BTreeSet<(ActorId, ActorId)> = BTreeSet::new();
        for rec in &self.transitions {
            let key = (rec.i, rec.j);
            match rec.kind {
                TransitionKind::Formation => {
                    if !tied.insert(key) {
                        return Err(DataError::OverlappingPairEvents { i: rec.i, j: rec.j, t: rec.t });
                    }
                }
                TransitionKind::Dissolution => {
                    tied.remove(&key);
                }
            }
        }
        Ok(())
    }

    /// Asserts that no actor is in two simultaneous events, the invariant the
    /// ExclusiveEngagement policy promises for sampled or observed streams.
    pub fn validate_policy(&self, policy: RiskSetPolicy) -> Result<(), DataError> {
        if policy != RiskSetPolicy::ExclusiveEngagement {
            return Ok(());
        }
        let mut busy: BTreeSet<ActorId> = BTreeSet::new();
        for rec in &self.transitions {
            match rec.kind {
                TransitionKind::Formation => {
                    for actor in [rec.i, rec.j] {
                        if !busy.insert(actor) {
                            return Err(DataError::PolicyViolation { actor, t: rec.t });
                        }
                    }
                }
                TransitionKind::Dissolution => {
                    busy.remove(&rec.i);
                    busy.remove(&rec.j);
                }
            }
        }
        Ok(())
    }

    /// Parses the events CSV (`i,j,begin,end`; empty `end` = censored).
    ///
    /// The time origin is shifted so the first event begins at zero, and the
    /// window end moves with it. With `remap` set, sparse actor ids are
    /// relabelled densely in order of first appearance; otherwise a gap is an
    /// error.
    pub fn parse_events(
        path: &Path,
        window_end: Option<Time>,
        remap: bool,
        point_mode: bool,
    ) -> Result<(Self, IngestSummary), DataError> {
        let file = std::fs::File::open(path)?;
        Self::parse_events_reader(std::io::BufReader::new(file), window_end, remap, point_mode)
    }

    pub fn parse_events_reader<R: BufRead>(
        reader: R,
        window_end: Option<Time>,
        remap: bool,
        point_mode: bool,
    ) -> Result<(Self, IngestSummary), DataError> {
        let mut lines = reader.lines();
        let header = match lines.next() {
            Some(h) => h?,
            None => {
                return Err(DataError::MalformedRow { line: 1, msg: "empty file, expected header `i,j,begin,end`".into() })
            }
        };
        let header_fields: Vec<&str> = header.trim().split(',').map(|s| s.trim()).collect();
        if header_fields != ["i", "j", "begin", "end"] {
            return Err(DataError::MalformedRow {
                line: 1,
                msg: format!("bad header `{}`, expected `i,j,begin,end`", header.trim()),
            });
        }

        let mut raw: Vec<(usize, ActorId, ActorId, f64, Option<f64>)> = Vec::new();
        let mut n_rows = 0usize;
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            n_rows += 1;
            let fields: Vec<&str> = trimmed.split(',').map(|s| s.trim()).collect();
            if fields.len() != 4 {
                return Err(DataError::MalformedRow {
                    line: line_no,
                    msg: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let i: ActorId = fields[0].parse().map_err(|_| DataError::MalformedRow {
                line: line_no,
                msg: format!("bad actor id `{}`", fields[0]),
            })?;
            let j: ActorId = fields[1].parse().map_err(|_| DataError::MalformedRow {
                line: line_no,
                msg: format!("bad actor id `{}`", fields[1]),
            })?;
            if i == j {
                return Err(DataError::SelfLoop { line: line_no, actor: i });
            }
            let begin: f64 = fields[2].parse().map_err(|_| DataError::MalformedRow {
                line: line_no,
                msg: format!("bad begin time `{}`", fields[2]),
            })?;
            let end: Option<f64> = if fields[3].is_empty() {
                None
            } else {
                let e: f64 = fields[3].parse().map_err(|_| DataError::MalformedRow {
                    line: line_no,
                    msg: format!("bad end time `{}`", fields[3]),
                })?;
                if e <= begin {
                    return Err(DataError::NegativeDuration { line: line_no, begin, end: e });
                }
                Some(e)
            };
            if !begin.is_finite() || end.is_some_and(|e| !e.is_finite()) {
                return Err(DataError::MalformedRow { line: line_no, msg: "non-finite time".into() });
            }
            raw.push((line_no, i, j, begin, end));
        }

        // Dense actor ids, or remap in order of first appearance. A single
        // missing id is tolerated (1-based files leave 0 unused); anything
        // sparser needs the remap flag.
        let mut seen: Vec<ActorId> = raw.iter().flat_map(|r| [r.1, r.2]).collect();
        seen.sort_unstable();
        seen.dedup();
        let n_seen = seen.len();
        let max_id = seen.last().copied().unwrap_or(0);
        let n_actors;
        if raw.is_empty() {
            n_actors = 0;
        } else if n_seen >= max_id as usize {
            n_actors = max_id as usize + 1;
        } else if remap {
            let mut map = std::collections::HashMap::new();
            for r in raw.iter() {
                for a in [r.1, r.2] {
                    let next = map.len() as ActorId;
                    map.entry(a).or_insert(next);
                }
            }
            for r in raw.iter_mut() {
                r.1 = map[&r.1];
                r.2 = map[&r.2];
            }
            n_actors = map.len();
        } else {
            return Err(DataError::ActorIdGap { max_id, n_seen, n_expected: max_id as usize + 1 });
        }

        // Re-anchor the time axis to the first event's begin.
        let shift = raw
            .iter()
            .map(|r| r.3)
            .min_by(f64::total_cmp)
            .unwrap_or(0.0);
        let mut events = Vec::with_capacity(raw.len());
        let mut max_time = 0.0f64;
        let mut n_censored = 0usize;
        for (_line, i, j, begin, end) in &raw {
            let begin = begin - shift;
            let end = end.map(|e| e - shift);
            max_time = max_time.max(end.unwrap_or(begin));
            if end.is_none() {
                n_censored += 1;
            }
            events.push(DurationalEvent::new(*i, *j, begin, end));
        }
        let window_end = match window_end {
            Some(t) => t - if t >= shift { shift } else { 0.0 },
            None => max_time,
        };
        let stream = Self::from_events_impl(events, n_actors, window_end, point_mode)?;
        let summary = IngestSummary {
            n_rows,
            n_events: stream.events.len(),
            n_censored,
            n_actors,
            time_shift: shift,
            window_end,
        };
        Ok((stream, summary))
    }

    /// Writes the stream back out in the same CSV format `parse_events` reads.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "i,j,begin,end")?;
        for e in &self.events {
            match e.end {
                Some(end) => writeln!(w, "{},{},{},{}", e.i, e.j, e.begin, end)?,
                None => writeln!(w, "{},{},{},", e.i, e.j, e.begin)?,
            }
        }
        Ok(())
    }
}

/// Expands events into the dual `(i,j,t,r)` representation, sorted by time.
/// Ties break dissolution-first, then pair order, then input order, so a pair
/// may end and immediately restart at the same timestamp. Censored events
/// emit a formation only.
pub fn to_transitions(events: &[DurationalEvent]) -> Vec<TransitionRecord> {
    let mut recs: Vec<(usize, TransitionRecord)> = Vec::with_capacity(events.len() * 2);
    for (idx, e) in events.iter().enumerate() {
        recs.push((idx, TransitionRecord { i: e.i, j: e.j, t: e.begin, kind: TransitionKind::Formation }));
        if let Some(end) = e.end {
            recs.push((idx, TransitionRecord { i: e.i, j: e.j, t: end, kind: TransitionKind::Dissolution }));
        }
    }
    recs.sort_by(|(ia, a), (ib, b)| {
        a.t.total_cmp(&b.t)
            .then_with(|| {
                // Dissolution strictly before Formation at equal t.
                let ka = matches!(a.kind, TransitionKind::Formation) as u8;
                let kb = matches!(b.kind, TransitionKind::Formation) as u8;
                ka.cmp(&kb)
            })
            .then_with(|| (a.i, a.j).cmp(&(b.i, b.j)))
            .then_with(|| ia.cmp(ib))
    });
    recs.into_iter().map(|(_, r)| r).collect()
}

/// Re-pairs transitions into durational events; formations left open at the
/// end of the list become censored events. Inverse of `to_transitions`.
pub fn events_from_transitions(transitions: &[TransitionRecord]) -> Vec<DurationalEvent> {
    let mut open: std::collections::HashMap<(ActorId, ActorId), Vec<usize>> = std::collections::HashMap::new();
    let mut events: Vec<DurationalEvent> = Vec::new();
    for rec in transitions {
        match rec.kind {
            TransitionKind::Formation => {
                events.push(DurationalEvent { i: rec.i, j: rec.j, begin: rec.t, end: None });
                open.entry((rec.i, rec.j)).or_default().push(events.len() - 1);
            }
            TransitionKind::Dissolution => {
                let slot = open
                    .get_mut(&(rec.i, rec.j))
                    .and_then(|v| if v.is_empty() { None } else { Some(v.remove(0)) });
                if let Some(idx) = slot {
                    events[idx].end = Some(rec.t);
                }
            }
        }
    }
    events.sort_by(|a, b| a.begin.total_cmp(&b.begin).then_with(|| (a.i, a.j).cmp(&(b.i, b.j))));
    events
}

/// Triangular index of the canonical pair `(i, j)` with `i < j`.
#[inline]
pub fn pair_index(i: ActorId, j: ActorId) -> usize {
    debug_assert!(i < j);
    let (i, j) = (i as usize, j as usize);
    j * (j - 1) / 2 + i
}

/// Inverse of `pair_index`.
pub fn pair_from_index(idx: usize) -> (ActorId, ActorId) {
    // j is the largest integer with j(j-1)/2 <= idx
    let j = ((1.0 + (1.0 + 8.0 * idx as f64).sqrt()) / 2.0).floor() as usize;
    let j = if j * (j - 1) / 2 > idx { j - 1 } else { j };
    let i = idx - j * (j - 1) / 2;
    (i as ActorId, j as ActorId)
}

pub fn n_pairs(n_actors: usize) -> usize {
    n_actors * n_actors.saturating_sub(1) / 2
}

/// Per-pair interaction state at a replay time: currently-tied and ever-tied
/// flags, the count of started interactions, and the start time of the most
/// recent interaction.
#[derive(Debug, Clone)]
pub struct PairStateTable {
    pub n_actors: usize,
    currently_tied: Vec<bool>,
    ever_tied: Vec<bool>,
    n_past: Vec<u32>,
    last_start: Vec<f64>,
    /// Number of ongoing events each actor participates in.
    busy: Vec<u32>,
}

impl PairStateTable {
    pub fn new(n_actors: usize) -> Self {
        let np = n_pairs(n_actors);
        PairStateTable {
            n_actors,
            currently_tied: vec![false; np],
            ever_tied: vec![false; np],
            n_past: vec![0; np],
            last_start: vec![f64::NAN; np],
            busy: vec![0; n_actors],
        }
    }

    /// State reflecting all transitions strictly before `t` (the history
    /// excludes time `t` itself).
    pub fn at_time(stream: &EventStream, t: Time) -> Result<Self, DataError> {
        if !(0.0..=stream.window_end).contains(&t) {
            return Err(DataError::QueryOutOfWindow { t, window_end: stream.window_end });
        }
        let mut table = Self::new(stream.n_actors);
        for rec in stream.transitions() {
            if rec.t >= t {
                break;
            }
            table.apply(rec);
        }
        Ok(table)
    }

    pub fn apply(&mut self, rec: &TransitionRecord) {
        let idx = pair_index(rec.i, rec.j);
        match rec.kind {
            TransitionKind::Formation => {
                self.currently_tied[idx] = true;
                self.ever_tied[idx] = true;
                self.n_past[idx] += 1;
                self.last_start[idx] = rec.t;
                self.busy[rec.i as usize] += 1;
                self.busy[rec.j as usize] += 1;
            }
            TransitionKind::Dissolution => {
                self.currently_tied[idx] = false;
                self.busy[rec.i as usize] = self.busy[rec.i as usize].saturating_sub(1);
                self.busy[rec.j as usize] = self.busy[rec.j as usize].saturating_sub(1);
            }
        }
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
        if v.is_nan() {
            None
        } else {
            Some(v)
        }
    }

    pub fn actor_busy(&self, a: ActorId) -> bool {
        self.busy[a as usize] > 0
    }
}

/// Pairs eligible for a transition of the given kind under the policy.
/// Formation: untied pairs (minus busy-actor pairs under ExclusiveEngagement).
/// Dissolution: exactly the currently tied pairs, policy-independent.
pub fn risk_set(
    state: &PairStateTable,
    policy: RiskSetPolicy,
    kind: TransitionKind,
) -> Vec<(ActorId, ActorId)> {
    let n = state.n_actors as ActorId;
    let mut out = Vec::new();
    for j in 1..n {
        for i in 0..j {
            let tied = state.currently_tied(i, j);
            match kind {
                TransitionKind::Dissolution => {
                    if tied {
                        out.push((i, j));
                    }
                }
                TransitionKind::Formation => {
                    if tied {
                        continue;
                    }
                    if policy == RiskSetPolicy::ExclusiveEngagement
                        && (state.actor_busy(i) || state.actor_busy(j))
                    {
                        continue;
                    }
                    out.push((i, j));
                }
            }
        }
    }
    out
}

/// Monadic and dyadic exogenous covariates, indexed by name.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CovariateTable {
    pub n_actors: usize,
    continuous: Vec<(String, Vec<f64>)>,
    categorical: Vec<(String, Vec<i64>)>,
    /// Dyadic 0/1 (or real) values in triangular pair order.
    dyadic: Vec<(String, Vec<f64>)>,
}

impl CovariateTable {
    pub fn new(n_actors: usize) -> Self {
        CovariateTable { n_actors, ..Default::default() }
    }

    pub fn insert_continuous(&mut self, name: &str, values: Vec<f64>) {
        assert_eq!(values.len(), self.n_actors);
        self.continuous.retain(|(n, _)| n != name);
        self.continuous.push((name.to_string(), values));
    }

    pub fn insert_categorical(&mut self, name: &str, values: Vec<i64>) {
        assert_eq!(values.len(), self.n_actors);
        self.categorical.retain(|(n, _)| n != name);
        self.categorical.push((name.to_string(), values));
    }

    pub fn insert_dyadic(&mut self, name: &str, values: Vec<f64>) {
        assert_eq!(values.len(), n_pairs(self.n_actors));
        self.dyadic.retain(|(n, _)| n != name);
        self.dyadic.push((name.to_string(), values));
    }

    pub fn continuous(&self, name: &str) -> Option<&[f64]> {
        self.continuous.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn categorical(&self, name: &str) -> Option<&[i64]> {
        self.categorical.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn dyadic(&self, name: &str) -> Option<&[f64]> {
        self.dyadic.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// Parses the covariates CSV. Monadic rows are `actor,name,value`,
    /// dyadic rows are `i,j,name,value`; the two row shapes may be mixed.
    /// A monadic column whose values are all integral is stored as
    /// categorical as well as continuous, so either statistic form can use it.
    pub fn parse_csv<R: BufRead>(reader: R, n_actors: usize) -> Result<Self, DataError> {
        let mut table = CovariateTable::new(n_actors);
        let mut monadic: std::collections::BTreeMap<String, Vec<Option<f64>>> = Default::default();
        let mut dyadic: std::collections::BTreeMap<String, Vec<Option<f64>>> = Default::default();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').map(|s| s.trim()).collect();
            match fields.len() {
                3 => {
                    if idx == 0 && fields == ["actor", "name", "value"] {
                        continue;
                    }
                    let actor: usize = fields[0].parse().map_err(|_| DataError::MalformedRow {
                        line: line_no,
                        msg: format!("bad actor id `{}`", fields[0]),
                    })?;
                    let value: f64 = fields[2].parse().map_err(|_| DataError::MalformedRow {
                        line: line_no,
                        msg: format!("bad value `{}`", fields[2]),
                    })?;
                    if actor >= n_actors {
                        return Err(DataError::MalformedRow {
                            line: line_no,
                            msg: format!("actor {actor} out of range 0..{n_actors}"),
                        });
                    }
                    monadic
                        .entry(fields[1].to_string())
                        .or_insert_with(|| vec![None; n_actors])[actor] = Some(value);
                }
                4 => {
                    if idx == 0 && fields == ["i", "j", "name", "value"] {
                        continue;
                    }
                    let i: ActorId = fields[0].parse().map_err(|_| DataError::MalformedRow {
                        line: line_no,
                        msg: format!("bad actor id `{}`", fields[0]),
                    })?;
                    let j: ActorId = fields[1].parse().map_err(|_| DataError::MalformedRow {
                        line: line_no,
                        msg: format!("bad actor id `{}`", fields[1]),
                    })?;
                    if i == j {
                        return Err(DataError::SelfLoop { line: line_no, actor: i });
                    }
                    let value: f64 = fields[3].parse().map_err(|_| DataError::MalformedRow {
                        line: line_no,
                        msg: format!("bad value `{}`", fields[3]),
                    })?;
                    if i.max(j) as usize >= n_actors {
                        return Err(DataError::MalformedRow {
                            line: line_no,
                            msg: format!("actor {} out of range 0..{n_actors}", i.max(j)),
                        });
                    }
                    dyadic
                        .entry(fields[2].to_string())
                        .or_insert_with(|| vec![None; n_pairs(n_actors)])
                        [pair_index(i.min(j), i.max(j))] = Some(value);
                }
                n => {
                    return Err(DataError::MalformedRow {
                        line: line_no,
                        msg: format!("expected 3 or 4 fields, got {n}"),
                    })
                }
            }
        }
        for (name, values) in monadic {
            let filled: Vec<f64> = values
                .iter()
                .enumerate()
                .map(|(a, v)| {
                    v.ok_or_else(|| DataError::MissingCovariate {
                        name: name.clone(),
                        what: format!("actor {a}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            if filled.iter().all(|v| v.fract() == 0.0) {
                table.insert_categorical(&name, filled.iter().map(|v| *v as i64).collect());
            }
            table.insert_continuous(&name, filled);
        }
        for (name, values) in dyadic {
            // Unspecified dyads default to zero (sparse 0/1 matrices).
            let filled: Vec<f64> = values.iter().map(|v| v.unwrap_or(0.0)).collect();
            table.insert_dyadic(&name, filled);
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(i: ActorId, j: ActorId, b: f64, e: f64) -> DurationalEvent {
        DurationalEvent::new(i, j, b, Some(e))
    }

    #[test]
    fn empty_body_parses_to_empty_stream() {
        let csv = "i,j,begin,end\n";
        let (stream, summary) = EventStream::parse_events_reader(csv.as_bytes(), Some(5.0), false, false).unwrap();
        assert_eq!(stream.events().len(), 0);
        assert_eq!(stream.transitions().len(), 0);
        assert_eq!(summary.n_rows, 0);
    }

    #[test]
    fn parse_canonicalizes_and_sorts_transitions() {
        let csv = "i,j,begin,end\n2,1,0.0,3.0\n1,3,1.0,\n";
        let (stream, summary) = EventStream::parse_events_reader(csv.as_bytes(), Some(5.0), false, false).unwrap();
        assert_eq!(
            stream.events(),
            &[ev(1, 2, 0.0, 3.0), DurationalEvent::new(1, 3, 1.0, None)]
        );
        let ts: Vec<(f64, TransitionKind)> = stream.transitions().iter().map(|r| (r.t, r.kind)).collect();
        assert_eq!(
            ts,
            vec![
                (0.0, TransitionKind::Formation),
                (1.0, TransitionKind::Formation),
                (3.0, TransitionKind::Dissolution)
            ]
        );
        assert_eq!(summary.n_censored, 1);
        // ids {1,2,3}: the single leading gap is tolerated, actor 0 just has no events
        assert_eq!(summary.n_actors, 4);
    }

    #[test]
    fn parse_rejects_gap_without_remap_and_remaps_with_flag() {
        let csv = "i,j,begin,end\n5,9,0.0,1.0\n";
        let err = EventStream::parse_events_reader(csv.as_bytes(), Some(2.0), false, false).unwrap_err();
        assert!(matches!(err, DataError::ActorIdGap { .. }));
        let (stream, _) = EventStream::parse_events_reader(csv.as_bytes(), Some(2.0), true, false).unwrap();
        assert_eq!(stream.n_actors, 2);
        assert_eq!(stream.events()[0], ev(0, 1, 0.0, 1.0));
    }

    #[test]
    fn parse_shifts_time_origin_to_first_event() {
        let csv = "i,j,begin,end\n0,1,10.0,13.0\n1,2,12.5,\n";
        let (stream, summary) = EventStream::parse_events_reader(csv.as_bytes(), Some(20.0), false, false).unwrap();
        assert_eq!(summary.time_shift, 10.0);
        assert_eq!(stream.events()[0].begin, 0.0);
        assert_eq!(stream.events()[1].begin, 2.5);
        assert_eq!(stream.window_end, 10.0);
    }

    #[test]
    fn parse_reports_line_numbers() {
        let csv = "i,j,begin,end\n0,1,0.0,1.0\n2,2,1.0,2.0\n";
        match EventStream::parse_events_reader(csv.as_bytes(), None, false, false) {
            Err(DataError::SelfLoop { line, actor }) => {
                assert_eq!(line, 3);
                assert_eq!(actor, 2);
            }
            other => panic!("expected self loop error, got {other:?}"),
        }
        let csv = "i,j,begin,end\n0,1,2.0,2.0\n";
        assert!(matches!(
            EventStream::parse_events_reader(csv.as_bytes(), None, false, false),
            Err(DataError::NegativeDuration { line: 2, .. })
        ));
        let csv = "i,j,begin,end\n0,1,zz,2.0\n";
        assert!(matches!(
            EventStream::parse_events_reader(csv.as_bytes(), None, false, false),
            Err(DataError::MalformedRow { line: 2, .. })
        ));
    }

    #[test]
    fn transitions_single_event_and_censored() {
        let t = to_transitions(&[ev(1, 2, 0.0, 3.0)]);
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].t, t[0].kind), (0.0, TransitionKind::Formation));
        assert_eq!((t[1].t, t[1].kind), (3.0, TransitionKind::Dissolution));

        let t = to_transitions(&[DurationalEvent::new(1, 2, 0.0, None)]);
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].kind, TransitionKind::Formation);
    }

    #[test]
    fn transitions_tie_break_dissolution_first() {
        let t = to_transitions(&[ev(1, 2, 0.0, 2.0), ev(1, 2, 2.0, 4.0)]);
        let kinds: Vec<TransitionKind> = t.iter().map(|r| r.kind).collect();
        assert_eq!(
            kinds,
            vec![
                TransitionKind::Formation,
                TransitionKind::Dissolution,
                TransitionKind::Formation,
                TransitionKind::Dissolution
            ]
        );
        assert_eq!(t[1].t, 2.0);
        assert_eq!(t[2].t, 2.0);
    }

    #[test]
    fn round_trip_with_censoring() {
        let events = vec![ev(0, 1, 0.0, 2.0), DurationalEvent::new(0, 2, 1.0, None), ev(0, 1, 2.0, 5.0)];
        let recs = to_transitions(&events);
        let back = events_from_transitions(&recs);
        let mut sorted = events.clone();
        sorted.sort_by(|a, b| a.begin.total_cmp(&b.begin).then_with(|| (a.i, a.j).cmp(&(b.i, b.j))));
        assert_eq!(back, sorted);
    }

    #[test]
    fn pair_state_replay_matches_hand_trace() {
        let stream = EventStream::from_events(vec![ev(1, 2, 0.0, 3.0)], 3, 5.0).unwrap();
        let s0 = PairStateTable::at_time(&stream, 0.0).unwrap();
        assert!(!s0.currently_tied(1, 2));
        assert_eq!(s0.n_past(1, 2), 0);

        let s = PairStateTable::at_time(&stream, 1.5).unwrap();
        assert!(s.currently_tied(1, 2));
        assert!(s.ever_tied(1, 2));
        assert_eq!(s.n_past(1, 2), 1);
        assert_eq!(s.last_start(1, 2), Some(0.0));

        let s4 = PairStateTable::at_time(&stream, 4.0).unwrap();
        assert!(!s4.currently_tied(1, 2));
        assert!(s4.ever_tied(1, 2));

        assert!(PairStateTable::at_time(&stream, 6.0).is_err());
    }

    #[test]
    fn risk_sets_follow_policy() {
        let stream = EventStream::from_events(vec![], 3, 1.0).unwrap();
        let state = PairStateTable::at_time(&stream, 0.5).unwrap();
        let rs = risk_set(&state, RiskSetPolicy::Unrestricted, TransitionKind::Formation);
        assert_eq!(rs, vec![(0, 1), (0, 2), (1, 2)]);
        assert!(risk_set(&state, RiskSetPolicy::Unrestricted, TransitionKind::Dissolution).is_empty());

        // Tie (0,1): under exclusive engagement every remaining pair in N=3
        // shares a busy actor, so the formation risk set is empty.
        let stream = EventStream::from_events(vec![DurationalEvent::new(0, 1, 0.0, None)], 3, 1.0).unwrap();
        let state = PairStateTable::at_time(&stream, 0.5).unwrap();
        assert!(risk_set(&state, RiskSetPolicy::ExclusiveEngagement, TransitionKind::Formation).is_empty());
        assert_eq!(
            risk_set(&state, RiskSetPolicy::Unrestricted, TransitionKind::Formation),
            vec![(0, 2), (1, 2)]
        );
        assert_eq!(
            risk_set(&state, RiskSetPolicy::Unrestricted, TransitionKind::Dissolution),
            vec![(0, 1)]
        );

        let stream = EventStream::from_events(vec![DurationalEvent::new(0, 1, 0.0, None)], 4, 1.0).unwrap();
        let state = PairStateTable::at_time(&stream, 0.5).unwrap();
        assert_eq!(
            risk_set(&state, RiskSetPolicy::ExclusiveEngagement, TransitionKind::Formation),
            vec![(2, 3)]
        );
    }

    #[test]
    fn formation_and_dissolution_risk_sets_disjoint() {
        let events = vec![ev(0, 1, 0.0, 2.0), ev(1, 2, 1.0, 3.0), DurationalEvent::new(0, 3, 2.5, None)];
        let stream = EventStream::from_events(events, 4, 4.0).unwrap();
        for &t in &[0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.9] {
            let state = PairStateTable::at_time(&stream, t).unwrap();
            for policy in [RiskSetPolicy::Unrestricted, RiskSetPolicy::ExclusiveEngagement] {
                let f = risk_set(&state, policy, TransitionKind::Formation);
                let d = risk_set(&state, policy, TransitionKind::Dissolution);
                for p in &f {
                    assert!(!d.contains(p), "overlap at t={t}");
                }
            }
        }
    }

    #[test]
    fn overlapping_pair_events_rejected() {
        let events = vec![DurationalEvent::new(0, 1, 0.0, None), ev(0, 1, 1.0, 2.0)];
        assert!(matches!(
            EventStream::from_events(events, 2, 3.0),
            Err(DataError::OverlappingPairEvents { .. })
        ));
    }

    #[test]
    fn policy_validator_flags_busy_actor() {
        let events = vec![ev(0, 1, 0.0, 2.0), ev(1, 2, 1.0, 3.0)];
        let stream = EventStream::from_events(events, 3, 4.0).unwrap();
        assert!(stream.validate_policy(RiskSetPolicy::Unrestricted).is_ok());
        assert!(matches!(
            stream.validate_policy(RiskSetPolicy::ExclusiveEngagement),
            Err(DataError::PolicyViolation { actor: 1, .. })
        ));
    }

    #[test]
    fn pair_indexing_round_trips() {
        let n = 12;
        let mut seen = vec![false; n_pairs(n)];
        for j in 1..n as ActorId {
            for i in 0..j {
                let idx = pair_index(i, j);
                assert!(!seen[idx]);
                seen[idx] = true;
                assert_eq!(pair_from_index(idx), (i, j));
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn covariates_parse_both_shapes() {
        let csv = "actor,name,value\n0,age,1.5\n1,age,2.0\n2,age,0.0\n0,grp,1\n1,grp,2\n2,grp,1\n0,1,friend,1\n";
        let table = CovariateTable::parse_csv(csv.as_bytes(), 3).unwrap();
        assert_eq!(table.continuous("age").unwrap(), &[1.5, 2.0, 0.0]);
        assert_eq!(table.categorical("grp").unwrap(), &[1, 2, 1]);
        let friend = table.dyadic("friend").unwrap();
        assert_eq!(friend[pair_index(0, 1)], 1.0);
        assert_eq!(friend[pair_index(0, 2)], 0.0);
    }

    #[test]
    fn covariates_missing_monadic_entry_is_error() {
        let csv = "actor,name,value\n0,age,1.5\n";
        assert!(matches!(
            CovariateTable::parse_csv(csv.as_bytes(), 2),
            Err(DataError::MissingCovariate { .. })
        ));
    }
}
