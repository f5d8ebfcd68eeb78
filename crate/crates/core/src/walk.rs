//! Quenched walks, hitting times, renewal times and condition-(T) statistics.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dirichlet::{kappa_report, Weights};
use crate::error::{domain, Error, Result};
use crate::lattice::{Environment, Vertex};
use crate::rng::{stream, tag, Stream};

/// A finite trajectory and the seeds it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkTrace {
    pub positions: Vec<Vertex>,
    pub dim: usize,
    pub master_seed: u64,
    pub replica: u64,
    pub n_max: usize,
}

impl WalkTrace {
    pub fn step_count(&self) -> usize {
        self.positions.len().saturating_sub(1)
    }

    pub fn start(&self) -> Vertex {
        self.positions[0]
    }

    pub fn last(&self) -> Vertex {
        *self.positions.last().expect("non-empty trace")
    }

    /// Whether consecutive positions differ by a unit vector.
    pub fn is_nearest_neighbor(&self) -> bool {
        self.positions.windows(2).all(|w| w[0].direction_to(&w[1], self.dim).is_some())
    }

    /// One vertex per line, every `every`-th position.
    pub fn to_text(&self, every: usize) -> String {
        let mut s = String::new();
        for v in self.positions.iter().step_by(every.max(1)) {
            let c: Vec<String> = v.coords(self.dim).iter().map(|x| x.to_string()).collect();
            writeln!(s, "{}", c.join(" ")).unwrap();
        }
        s
    }
}

/// The walk stream of a replica; it never overlaps the environment streams.
pub fn walk_stream(master_seed: u64, replica: u64) -> Stream {
    stream(master_seed, &[tag::WALK, replica])
}

/// Appends up to `steps` steps to `positions`, stopping right after a
/// position where `stop` fires. Returns whether it fired.
pub fn extend<E: Environment + ?Sized, R: Rng + ?Sized>(
    env: &E,
    positions: &mut Vec<Vertex>,
    steps: usize,
    stop: Option<&dyn Fn(&Vertex) -> bool>,
    rng: &mut R,
) -> bool {
    let d = env.dim();
    let mut x = *positions.last().expect("non-empty trace");
    positions.reserve(steps);
    for _ in 0..steps {
        let dir = env.transition(&x).pick(rng.random::<f64>());
        x = x.step(dir, d);
        positions.push(x);
        if stop.is_some_and(|f| f(&x)) {
            return true;
        }
    }
    false
}

/// A walk of at most `n_max` steps from `start` in the quenched law of `env`.
/// With a `stop` predicate, the walk halts at the first position (including
/// the start) where it fires.
pub fn simulate<E: Environment + ?Sized, R: Rng + ?Sized>(
    env: &E,
    start: Vertex,
    n_max: usize,
    stop: Option<&dyn Fn(&Vertex) -> bool>,
    rng: &mut R,
) -> WalkTrace {
    let mut positions = vec![start];
    if !stop.is_some_and(|f| f(&start)) {
        extend(env, &mut positions, n_max, stop, rng);
    }
    WalkTrace { positions, dim: env.dim(), master_seed: 0, replica: 0, n_max }
}

/// First hitting, exit and return times of a vertex set on a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct HittingTimes {
    /// `inf {n >= 0 : X_n in V}`.
    pub hit: Option<usize>,
    /// `inf {n >= 0 : X_n not in V}`.
    pub exit: Option<usize>,
    /// `inf {n >= 1 : X_{n-1} not in V, X_n in V}`.
    pub ret: Option<usize>,
}

pub fn hitting_times(trace: &WalkTrace, set: &HashSet<Vertex>) -> HittingTimes {
    let inside: Vec<bool> = trace.positions.iter().map(|v| set.contains(v)).collect();
    HittingTimes {
        hit: inside.iter().position(|&b| b),
        exit: inside.iter().position(|&b| !b),
        ret: (1..inside.len()).find(|&n| !inside[n - 1] && inside[n]),
    }
}

/// When a renewal candidate counts as confirmed: the observed trace must go on
/// for `window` steps and climb `lead` levels above it, never dropping below
/// its level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfirmRule {
    pub window: usize,
    pub lead: f64,
}

impl ConfirmRule {
    /// `window = ceil(10 a / (|d_alpha| / sum alpha))`, `lead = 10 a`.
    pub fn default_for(weights: &Weights, a: f64) -> Self {
        let r = kappa_report(weights);
        let drift = r.d_alpha.iter().map(|x| x * x).sum::<f64>().sqrt() / r.sum_alpha;
        let window = if drift > 0.0 { (10.0 * a / drift).ceil() as usize } else { usize::MAX };
        Self { window: window.max(1), lead: 10.0 * a }
    }
}

/// Slab direction, slab width and confirmation rule of the renewal structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewalParams {
    pub direction: Vec<f64>,
    pub a: f64,
    pub confirm: ConfirmRule,
}

impl RenewalParams {
    /// `u = d_alpha / |d_alpha|`, `a = 2 sqrt(d) + 0.1`.
    pub fn default_for(weights: &Weights) -> Result<Self> {
        let direction = kappa_report(weights)
            .drift_direction()
            .ok_or_else(|| Error::Domain("zero drift: no default renewal direction".into()))?;
        let a = 2.0 * (weights.dim() as f64).sqrt() + 0.1;
        Ok(Self { direction, a, confirm: ConfirmRule::default_for(weights, a) })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.direction.len() != dim {
            return domain("direction has the wrong dimension");
        }
        let norm = self.direction.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return domain(format!("direction is not a unit vector (norm {norm})"));
        }
        if !(self.a > 2.0 * (dim as f64).sqrt()) {
            return domain(format!("slab width {} must exceed 2 sqrt(d)", self.a));
        }
        if self.confirm.window == 0 {
            return domain("confirmation window must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Renewal {
    pub time: usize,
    pub position: Vertex,
    /// The confirmation rule was cut short by the end of the trace.
    pub censored: bool,
}

/// Renewal times found on a trace. Only the last entry can be censored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewalRecord {
    pub renewals: Vec<Renewal>,
    pub direction: Vec<f64>,
    pub a: f64,
    /// Whether the trace ever drops below its starting level (`D < inf`).
    pub start_backtracked: bool,
    pub master_seed: u64,
    pub replica: u64,
}

impl RenewalRecord {
    /// Uncensored renewal times `T_1 < T_2 < ...`.
    pub fn times(&self) -> Vec<usize> {
        self.renewals.iter().filter(|r| !r.censored).map(|r| r.time).collect()
    }

    pub fn uncensored(&self) -> impl Iterator<Item = &Renewal> {
        self.renewals.iter().filter(|r| !r.censored)
    }

    pub fn first(&self) -> Option<usize> {
        self.uncensored().next().map(|r| r.time)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

/// `next_below[n]`: first `m > n` with `level[m] < level[n]`.
fn next_below(levels: &[f64]) -> Vec<Option<usize>> {
    let mut out = vec![None; levels.len()];
    let mut stack: Vec<usize> = Vec::new();
    for m in 0..levels.len() {
        while let Some(&n) = stack.last() {
            if levels[m] < levels[n] {
                out[n] = Some(m);
                stack.pop();
            } else {
                break;
            }
        }
        stack.push(m);
    }
    out
}

/// Runs the renewal recursion on a trace.
///
/// From a start time `s` (0, then each renewal): `M_0` is the level at `s`,
/// `tau_{k+1}` the first time the level reaches `M_k + a`, `tau'_{k+1}` the
/// first later time strictly below the level of `tau_{k+1}`, and `M_{k+1}` the
/// largest level up to `tau'_{k+1}`. The first `tau_k` with `tau'_k = inf` is
/// the next renewal. `tau'_k = inf` means no backtrack in the rest of the
/// trace; the candidate is censored unless the [`ConfirmRule`] holds.
pub fn detect_renewals(trace: &WalkTrace, params: &RenewalParams) -> Result<RenewalRecord> {
    params.validate(trace.dim)?;
    let levels: Vec<f64> = trace.positions.iter().map(|v| v.dot(&params.direction)).collect();
    let n = levels.len();
    let below = next_below(&levels);
    let mut suffix_max = levels.clone();
    for i in (0..n.saturating_sub(1)).rev() {
        suffix_max[i] = suffix_max[i].max(suffix_max[i + 1]);
    }
    let mut record = RenewalRecord {
        renewals: Vec::new(),
        direction: params.direction.clone(),
        a: params.a,
        start_backtracked: levels.iter().any(|&l| l < levels[0]),
        master_seed: trace.master_seed,
        replica: trace.replica,
    };
    // `scanned` is the end of the prefix whose maximum is `max_level`.
    let mut max_level = levels[0];
    let mut scanned = 0;
    let mut cursor = 0;
    loop {
        let target = max_level + params.a;
        let Some(tau) = (cursor..n).find(|&i| levels[i] >= target) else {
            break;
        };
        match below[tau] {
            Some(back) => {
                while scanned < back {
                    scanned += 1;
                    max_level = max_level.max(levels[scanned]);
                }
                cursor = back;
            }
            None => {
                let confirmed = n - 1 - tau >= params.confirm.window && suffix_max[tau] - levels[tau] >= params.confirm.lead;
                record.renewals.push(Renewal { time: tau, position: trace.positions[tau], censored: !confirmed });
                if !confirmed {
                    break;
                }
                // Every earlier level lies below the renewal level.
                max_level = levels[tau];
                scanned = tau;
                cursor = tau;
            }
        }
    }
    Ok(record)
}

/// Simulates a replica until `k` uncensored renewals are observed or the
/// walk has made `n_max` steps. The walk is extended in doubling chunks; its
/// path does not depend on the chunking.
pub fn simulate_until_renewals<E: Environment + ?Sized>(
    env: &E,
    params: &RenewalParams,
    k: usize,
    n_max: usize,
    master_seed: u64,
    replica: u64,
) -> Result<(WalkTrace, RenewalRecord)> {
    params.validate(env.dim())?;
    let mut rng = walk_stream(master_seed, replica);
    let mut positions = vec![Vertex::ORIGIN];
    let mut chunk = 1024usize.max(2 * params.confirm.window.min(1 << 20));
    loop {
        let steps = chunk.min(n_max - (positions.len() - 1));
        extend(env, &mut positions, steps, None, &mut rng);
        let trace = WalkTrace { positions, dim: env.dim(), master_seed, replica, n_max };
        let record = detect_renewals(&trace, params)?;
        if record.times().len() >= k || trace.step_count() >= n_max {
            return Ok((trace, record));
        }
        positions = trace.positions;
        chunk = chunk.saturating_mul(2);
    }
}

/// `max_{1 <= i <= T_1} |X_i - X_0|` on the first renewal segment, or `None`
/// when `T_1` is not observed.
pub fn first_segment_radius(trace: &WalkTrace, record: &RenewalRecord) -> Option<f64> {
    let t1 = record.first()?;
    let x0 = trace.start();
    Some(trace.positions[1..=t1].iter().map(|v| v.sub(&x0).norm()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionTRow {
    pub c: f64,
    pub estimate: f64,
    pub std_error: f64,
    /// Estimate on the first half of the sample over the full-sample estimate.
    pub half_ratio: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionTTable {
    pub rows: Vec<ConditionTRow>,
    pub largest_stable_c: Option<f64>,
}

/// Monte Carlo estimate of `E[sup_{1 <= i <= T_1} exp(c |X_i|)]` for each `c`,
/// from the per-walk radii of [`first_segment_radius`]. A value of `c` is
/// stable when the half-sample estimate is within `[0.8, 1.25]` of the full one.
pub fn condition_t_statistic(radii: &[f64], c_grid: &[f64]) -> Result<ConditionTTable> {
    if radii.len() < 2 {
        return Err(Error::InsufficientData("need uncensored first renewal segments".into()));
    }
    let half = radii.len() / 2;
    let mean = |xs: &[f64], c: f64| xs.iter().map(|r| (c * r).exp()).sum::<f64>() / xs.len() as f64;
    let mut rows = Vec::new();
    for &c in c_grid {
        if !(c >= 0.0) {
            return domain("c must be nonnegative");
        }
        let m = mean(radii, c);
        let var = radii.iter().map(|r| ((c * r).exp() - m).powi(2)).sum::<f64>() / (radii.len() - 1) as f64;
        let half_ratio = mean(&radii[..half], c) / m;
        rows.push(ConditionTRow {
            c,
            estimate: m,
            std_error: (var / radii.len() as f64).sqrt(),
            half_ratio,
            stable: m.is_finite() && (0.8..=1.25).contains(&half_ratio),
        });
    }
    let largest_stable_c = rows.iter().filter(|r| r.stable).map(|r| r.c).fold(None, |acc: Option<f64>, c| Some(acc.map_or(c, |a| a.max(c))));
    Ok(ConditionTTable { rows, largest_stable_c })
}
