//! Brute-force verification evaluators and instance generators.
//!
//! Everything here computes straight from the raw event list with no shared
//! machinery: these are the independent references the fast paths are tested
//! against. Quadratic-or-worse costs throughout; test-sized inputs only.

use crate::event_data::{ActorId, CovariateTable, DurationalEvent, EventStream, RiskSetPolicy, Time, TransitionKind};
use crate::likelihood::ParamVector;
use crate::statistics::StatisticKind;

/// Splitmix-style generator; deterministic and dependency-free.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn below(&mut self, n: u32) -> u32 {
        (self.next_u64() % n as u64) as u32
    }

    /// Standard normal by Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

/// Small random durational stream plus covariates `x` (continuous) and `g`
/// (categorical, 3 levels), for derivative and fitter tests.
pub fn small_random_instance(n_actors: u32, t_end: f64, seed: u64) -> (EventStream, CovariateTable) {
    let mut rng = Lcg(seed.wrapping_mul(2654435761).wrapping_add(1));
    let mut events = Vec::new();
    let mut tied_until: std::collections::HashMap<(u32, u32), f64> = Default::default();
    let target = (3 * n_actors) as usize;
    let mut t = 0.0;
    while events.len() < target {
        t += rng.uniform() * (t_end / target as f64) * 1.6 + 1e-9;
        if t >= t_end * 0.95 {
            break;
        }
        let i = rng.below(n_actors);
        let mut j = rng.below(n_actors);
        if i == j {
            j = (j + 1) % n_actors;
        }
        let key = (i.min(j), i.max(j));
        if tied_until.get(&key).is_some_and(|&until| t < until) {
            continue;
        }
        let dur = rng.uniform() * (t_end / 6.0) + 1e-6;
        let end = if rng.uniform() < 0.1 || t + dur >= t_end {
            tied_until.insert(key, f64::INFINITY);
            None
        } else {
            tied_until.insert(key, t + dur);
            Some(t + dur)
        };
        events.push(DurationalEvent::new(key.0, key.1, t, end));
    }
    let stream = EventStream::from_events(events, n_actors as usize, t_end).unwrap();
    let mut covs = CovariateTable::new(n_actors as usize);
    covs.insert_continuous("x", (0..n_actors).map(|_| rng.normal()).collect());
    covs.insert_categorical("g", (0..n_actors).map(|_| rng.below(3) as i64).collect());
    (stream, covs)
}

/// Pair state derived directly from the raw event list at the left endpoint
/// of a grid interval: history up to and including transitions at `t0`.
struct RawState<'a> {
    events: &'a [DurationalEvent],
    n_actors: usize,
    rem: bool,
    t0: f64,
}

impl RawState<'_> {
    fn tied(&self, i: ActorId, j: ActorId) -> bool {
        !self.rem
            && self.events.iter().any(|e| {
                e.i == i.min(j)
                    && e.j == i.max(j)
                    && e.begin <= self.t0
                    && e.end.map(|x| x > self.t0).unwrap_or(true)
            })
    }

    fn busy(&self, a: ActorId) -> bool {
        !self.rem
            && self.events.iter().any(|e| {
                (e.i == a || e.j == a) && e.begin <= self.t0 && e.end.map(|x| x > self.t0).unwrap_or(true)
            })
    }

    fn ever(&self, i: ActorId, j: ActorId) -> bool {
        self.events
            .iter()
            .any(|e| e.i == i.min(j) && e.j == i.max(j) && e.begin <= self.t0)
    }

    fn count(&self, i: ActorId, j: ActorId) -> u32 {
        self.events
            .iter()
            .filter(|e| e.i == i.min(j) && e.j == i.max(j) && e.begin <= self.t0)
            .count() as u32
    }

    fn last_start(&self, i: ActorId, j: ActorId) -> Option<f64> {
        self.events
            .iter()
            .filter(|e| e.i == i.min(j) && e.j == i.max(j) && e.begin <= self.t0)
            .map(|e| e.begin)
            .max_by(f64::total_cmp)
    }

    fn stat(&self, covs: &CovariateTable, kind: &StatisticKind, i: ActorId, j: ActorId) -> f64 {
        match kind {
            StatisticKind::CurrentCommonPartner => {
                let c = (0..self.n_actors as u32)
                    .filter(|&h| h != i && h != j && self.tied(i, h) && self.tied(h, j))
                    .count();
                (c as f64 + 1.0).ln()
            }
            StatisticKind::GeneralCommonPartner => {
                let c = (0..self.n_actors as u32)
                    .filter(|&h| h != i && h != j && self.ever(i, h) && self.ever(h, j))
                    .count();
                (c as f64 + 1.0).ln()
            }
            StatisticKind::NumberInteraction => (self.count(i, j) as f64 + 1.0).ln(),
            StatisticKind::CurrentInteractionDuration => {
                (self.t0 - self.last_start(i, j).unwrap() + 1.0).ln()
            }
            StatisticKind::DyadicCovariate(name) => {
                covs.dyadic(name).unwrap()[crate::event_data::pair_index(i.min(j), i.max(j))]
            }
            StatisticKind::CategoricalMatch(name) => {
                let v = covs.categorical(name).unwrap();
                (v[i as usize] == v[j as usize]) as u8 as f64
            }
            StatisticKind::AbsoluteDifference(name) => {
                let v = covs.continuous(name).unwrap();
                (v[i as usize] - v[j as usize]).abs()
            }
        }
    }
}

/// Direct triple-loop evaluation of the sub-model log-likelihood over the
/// merged grid: for every interval between consecutive grid points and every
/// at-risk pair, y log((t - t*) lambda) - (t - t*) lambda, with statistics
/// frozen at the interval's left endpoint and zero-length intervals skipped.
#[allow(clippy::too_many_arguments)]
pub fn naive_log_likelihood(
    stream: &EventStream,
    covs: &CovariateTable,
    stats: &[StatisticKind],
    baseline_points: &[Time],
    policy: RiskSetPolicy,
    kind: TransitionKind,
    rem: bool,
    theta: &ParamVector,
) -> f64 {
    let t_end = stream.window_end;
    let mut times: Vec<f64> = vec![0.0];
    times.extend(stream.transitions().iter().map(|r| r.t));
    times.extend(baseline_points.iter().copied());
    times.retain(|&t| (0.0..=t_end).contains(&t));
    times.sort_by(f64::total_cmp);
    times.dedup();
    if *times.last().unwrap() < t_end {
        times.push(t_end);
    }

    let n = stream.n_actors as u32;
    let mut ll = 0.0;
    for w in times.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        if t1 <= t0 {
            continue;
        }
        let dt = t1 - t0;
        let state = RawState { events: stream.events(), n_actors: stream.n_actors, rem, t0 };
        let q = baseline_points.partition_point(|&c| c <= t0) - 1;
        let q = q.min(theta.gamma.len() - 1);
        for j in 1..n {
            for i in 0..j {
                let at_risk = match kind {
                    TransitionKind::Formation => {
                        if rem {
                            true
                        } else if state.tied(i, j) {
                            false
                        } else {
                            policy == RiskSetPolicy::Unrestricted
                                || (!state.busy(i) && !state.busy(j))
                        }
                    }
                    TransitionKind::Dissolution => state.tied(i, j),
                };
                if !at_risk {
                    continue;
                }
                let mut lin = theta.beta[i as usize] + theta.beta[j as usize] + theta.gamma[q];
                for (a, k) in theta.alpha.iter().zip(stats) {
                    lin += a * state.stat(covs, k, i, j);
                }
                let lam = lin.clamp(-700.0, 700.0).exp();
                let y = stream.transitions().iter().any(|r| {
                    r.t == t1
                        && r.i == i
                        && r.j == j
                        && r.kind == kind
                        && !(rem && kind == TransitionKind::Dissolution)
                });
                if y {
                    ll += (dt * lam).ln();
                }
                ll -= dt * lam;
            }
        }
    }
    ll
}

/// Locates the maximum of a smooth 1-d function: golden-section bracketing
/// followed by Richardson-extrapolated parabolic vertex refinement. Accurate
/// well past 1e-8 in the argument for locally quadratic maxima.
pub fn maximize_1d<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let m1 = hi - phi * (hi - lo);
        let m2 = lo + phi * (hi - lo);
        if f(m1) < f(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    let x0 = 0.5 * (lo + hi);
    let vertex = |x: f64, h: f64| -> f64 {
        let (fm, f0, fp) = (f(x - h), f(x), f(x + h));
        let denom = fm - 2.0 * f0 + fp;
        if denom.abs() < 1e-305 {
            x
        } else {
            x + 0.5 * h * (fm - fp) / denom
        }
    };
    let mut x = x0;
    for h in [1e-3, 1e-3, 1e-3] {
        let v1 = vertex(x, h);
        let v2 = vertex(x, h / 2.0);
        // h^2 error term cancels in the extrapolation
        x = (4.0 * v2 - v1) / 3.0;
    }
    x
}

/// Point-process (dissolution-free) special case of the naive evaluator.
pub fn naive_rem_log_likelihood(
    stream: &EventStream,
    covs: &CovariateTable,
    stats: &[StatisticKind],
    baseline_points: &[Time],
    theta: &ParamVector,
) -> f64 {
    naive_log_likelihood(
        stream,
        covs,
        stats,
        baseline_points,
        RiskSetPolicy::Unrestricted,
        TransitionKind::Formation,
        true,
        theta,
    )
}
