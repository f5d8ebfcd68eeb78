//! Traps, their strengths, the decomposition of the first renewal time, the
//! partially forgotten walk and trap configurations.

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;
use serde::Serialize;

use crate::dirichlet::{kappa_report, sample_ln_gamma, Weights};
use crate::error::{domain, Error, Result};
use crate::lattice::{Environment, LatticeBox, Vertex};
use crate::rng::{stream, tag};
use crate::stats::{weighted_loglog_slope, wilson_interval, SlopeFit};
use crate::walk::WalkTrace;

/// An undirected edge `{x, y}` is a trap when `omega(x, y) + omega(y, x)`
/// exceeds this.
pub const TRAP_THRESHOLD: f64 = 1.5;

/// The undirected edge `{base, base + e_{axis+1}}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct UEdge {
    pub base: Vertex,
    pub axis: usize,
}

impl UEdge {
    pub fn between(a: &Vertex, b: &Vertex, dim: usize) -> Option<Self> {
        let dir = a.direction_to(b, dim)?;
        Some(if dir < dim { UEdge { base: *a, axis: dir } } else { UEdge { base: *b, axis: dir - dim } })
    }

    pub fn top(&self) -> Vertex {
        let mut c = self.base.0;
        c[self.axis] += 1;
        Vertex(c)
    }

    pub fn contains(&self, v: &Vertex) -> bool {
        *v == self.base || *v == self.top()
    }

    /// The other endpoint.
    pub fn partner(&self, v: &Vertex) -> Vertex {
        if *v == self.base {
            self.top()
        } else {
            self.base
        }
    }

    /// 1-based direction index `j`.
    pub fn direction(&self) -> usize {
        self.axis + 1
    }
}

pub fn is_trap(w_xy: f64, w_yx: f64) -> bool {
    w_xy + w_yx > TRAP_THRESHOLD
}

/// `s_f = 1 / (2 - omega(x, y) - omega(y, x))`.
pub fn strength(w_xy: f64, w_yx: f64) -> f64 {
    1.0 / (2.0 - w_xy - w_yx)
}

/// `p_f = omega(x, y) omega(y, x)`.
pub fn back_and_forth(w_xy: f64, w_yx: f64) -> f64 {
    w_xy * w_yx
}

/// `(omega(base, top), omega(top, base))`.
pub fn edge_weights<E: Environment + ?Sized>(env: &E, f: &UEdge) -> (f64, f64) {
    let d = env.dim();
    (env.transition(&f.base)[f.axis], env.transition(&f.top())[f.axis + d])
}

/// The trap containing `v`, if any. A vertex lies in at most one trap: a
/// trap edge carries more than half of the mass leaving each endpoint.
pub fn trap_at<E: Environment + ?Sized>(env: &E, v: &Vertex) -> Option<UEdge> {
    let d = env.dim();
    let p = env.transition(v);
    let dir = (0..2 * d).find(|&i| p[i] > 0.5)?;
    let w = v.step(dir, d);
    let back = env.transition(&w)[(dir + d) % (2 * d)];
    is_trap(p[dir], back).then(|| UEdge::between(v, &w, d).expect("neighbors"))
}

/// All traps with both endpoints in `region`, sorted.
pub fn find_traps<E: Environment + ?Sized>(env: &E, region: &LatticeBox) -> Vec<UEdge> {
    let d = env.dim();
    let mut out = Vec::new();
    for v in region.vertices() {
        for axis in 0..d {
            let f = UEdge { base: v, axis };
            if region.contains(&f.top()) {
                let (a, b) = edge_weights(env, &f);
                if is_trap(a, b) {
                    out.push(f);
                }
            }
        }
    }
    out.sort();
    out
}

/// `(j, N_{x->x}, N_{x->y}, N_{y->x}, N_{y->y})`, `x` being the endpoint
/// where the walk first hits the edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Configuration {
    pub axis: usize,
    /// Whether `x` is the lower endpoint along the axis.
    pub x_is_base: bool,
    /// `[N_{x->x}, N_{x->y}, N_{y->x}, N_{y->y}]`.
    pub counts: [u64; 4],
}

impl Configuration {
    pub fn new(axis: usize, x_is_base: bool, counts: [u64; 4]) -> Self {
        Self { axis, x_is_base, counts }
    }

    pub fn n_f(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Visits leaving by `x`.
    pub fn n_prime_x(&self) -> u64 {
        self.counts[0] + self.counts[2]
    }

    /// Visits leaving by `y`.
    pub fn n_prime_y(&self) -> u64 {
        self.counts[1] + self.counts[3]
    }

    pub fn to_record(&self) -> String {
        let [a, b, c, d] = self.counts;
        format!("({}, {a}, {b}, {c}, {d})", self.axis + 1)
    }
}

/// Per-trap visit data before `T_1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrapRecord {
    pub edge: UEdge,
    /// `x`, the endpoint of the first hit.
    pub entry: Vertex,
    pub w_xy: f64,
    pub w_yx: f64,
    pub p_f: f64,
    pub s_f: f64,
    /// `[N_{x->x}, N_{x->y}, N_{y->x}, N_{y->y}]`.
    pub counts: [u64; 4],
    /// `l_f^j`, in-trap steps of each visit that end before `T_1`.
    pub visit_lengths: Vec<u64>,
    /// Visits that left the trap before `T_1`.
    pub completed_visits: u64,
}

impl TrapRecord {
    pub fn n_f(&self) -> u64 {
        self.visit_lengths.len() as u64
    }

    /// `N_f + sum_j l_f^j`.
    pub fn time_in_trap(&self) -> u64 {
        self.n_f() + self.visit_lengths.iter().sum::<u64>()
    }

    pub fn configuration(&self) -> Configuration {
        Configuration { axis: self.edge.axis, x_is_base: self.entry == self.edge.base, counts: self.counts }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }
}

/// `T_1 = T_1° + T_1•`, `T_1• = sum_f (N_f + sum_j l_f^j)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct T1Decomposition {
    pub t1: u64,
    pub t1_out: u64,
    pub t1_in: u64,
    pub traps: Vec<TrapRecord>,
}

/// In-trap time split by strength and visit count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TrapTimeBuckets {
    /// `sum_f N_f`.
    pub entries: u64,
    /// `sum l` over traps with `s_f <= h`.
    pub weak: u64,
    /// `sum l` over traps with `s_f > h`, `N_f <= m`.
    pub strong_few: u64,
    /// `sum l` over traps with `s_f > h`, `N_f > m`.
    pub strong_many: u64,
}

impl T1Decomposition {
    pub fn identity_holds(&self) -> bool {
        let inside: u64 = self.traps.iter().map(|t| t.time_in_trap()).sum();
        self.t1 == self.t1_out + inside && self.t1_in == inside
    }

    pub fn buckets(&self, h: f64, m: u64) -> TrapTimeBuckets {
        let mut b = TrapTimeBuckets::default();
        for t in &self.traps {
            b.entries += t.n_f();
            let l: u64 = t.visit_lengths.iter().sum();
            if t.s_f <= h {
                b.weak += l;
            } else if t.n_f() <= m {
                b.strong_few += l;
            } else {
                b.strong_many += l;
            }
        }
        b
    }
}

/// `l = sum_{i >= 0} 1{X_{H + k + 1} in f for all 0 <= k <= i}` for a visit
/// starting at `entry_time`, evaluated term by term on the trace.
pub fn visit_length_indicator(positions: &[Vertex], f: &UEdge, entry_time: usize) -> u64 {
    let mut total = 0;
    let mut i = 0;
    loop {
        let all_inside = (0..=i).all(|k| positions.get(entry_time + k + 1).is_some_and(|v| f.contains(v)));
        if !all_inside {
            return total;
        }
        total += 1;
        i += 1;
    }
}

/// Splits `[0, T_1)` into time outside traps and visits to each trap.
///
/// Visits are maximal runs of the trace inside one trap. A visit still
/// running at `T_1` contributes its entry and the in-trap steps that end
/// before `T_1`, which keeps the identity exact; its exit endpoint is read
/// from the rest of the trace.
pub fn decompose_t1<E: Environment + ?Sized>(env: &E, trace: &WalkTrace, t1: usize) -> Result<T1Decomposition> {
    if t1 > trace.step_count() {
        return domain(format!("trace of {} steps is shorter than T_1 = {t1}", trace.step_count()));
    }
    let pos = &trace.positions;
    let mut records: Vec<TrapRecord> = Vec::new();
    let mut t1_out = 0u64;
    let mut n = 0;
    while n < t1 {
        let Some(f) = trap_at(env, &pos[n]) else {
            t1_out += 1;
            n += 1;
            continue;
        };
        let mut m = n + 1;
        while m < pos.len() && f.contains(&pos[m]) {
            m += 1;
        }
        let counted = m.min(t1) - n;
        let length = (counted - 1) as u64;
        debug_assert!(m > t1 || length == visit_length_indicator(pos, &f, n));
        let idx = match records.iter().position(|r| r.edge == f) {
            Some(i) => i,
            None => {
                let x = pos[n];
                let (w_b, w_t) = edge_weights(env, &f);
                let (w_xy, w_yx) = if x == f.base { (w_b, w_t) } else { (w_t, w_b) };
                records.push(TrapRecord {
                    edge: f,
                    entry: x,
                    w_xy,
                    w_yx,
                    p_f: back_and_forth(w_xy, w_yx),
                    s_f: strength(w_xy, w_yx),
                    counts: [0; 4],
                    visit_lengths: Vec::new(),
                    completed_visits: 0,
                });
                records.len() - 1
            }
        };
        let r = &mut records[idx];
        let from_x = pos[n] == r.entry;
        let to_x = pos[m - 1] == r.entry;
        r.counts[match (from_x, to_x) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        }] += 1;
        r.visit_lengths.push(length);
        if m <= t1 {
            r.completed_visits += 1;
        }
        n = m;
    }
    let t1_in = records.iter().map(|r| r.time_in_trap()).sum();
    Ok(T1Decomposition { t1: t1 as u64, t1_out, t1_in, traps: records })
}

/// The partially forgotten path: indices `t_i` into the original path and
/// the positions `sigma_{t_i}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Forgotten {
    pub times: Vec<usize>,
    pub path: Vec<Vertex>,
    /// The path ended inside a trap; the unfinished visit keeps only its entry.
    pub trimmed: bool,
}

/// Erases back-and-forths inside traps:
/// `s_i = inf {n >= t_i : sigma_n in B_i, sigma_{n+1} not in B_i}` with
/// `B_i = {sigma_{t_i}} ∪ (trap of sigma_{t_i})`, then `t_{i+1} = s_i + 1` if
/// `sigma_{s_i} = sigma_{t_i}` and `s_i` otherwise.
pub fn forget<F: Fn(&Vertex) -> Option<UEdge>>(positions: &[Vertex], trap_of: F) -> Forgotten {
    let mut out = Forgotten { times: Vec::new(), path: Vec::new(), trimmed: false };
    if positions.is_empty() {
        return out;
    }
    let mut t = 0;
    loop {
        out.times.push(t);
        out.path.push(positions[t]);
        let v = positions[t];
        let trap = trap_of(&v);
        let in_block = |u: &Vertex| *u == v || trap.is_some_and(|f| f.contains(u));
        let Some(s) = (t..positions.len() - 1).find(|&n| in_block(&positions[n]) && !in_block(&positions[n + 1])) else {
            out.trimmed = trap.is_some() && positions.len() - 1 > t;
            return out;
        };
        t = if positions[s] == v { s + 1 } else { s };
    }
}

/// Trap lookup for [`forget`] backed by an environment.
pub fn env_trap_lookup<E: Environment + ?Sized>(env: &E) -> impl Fn(&Vertex) -> Option<UEdge> + '_ {
    move |v| trap_at(env, v)
}

/// Configuration of `f` over the visits of the forgotten path that start
/// before `t1` (in original time).
pub fn configuration_from_forgotten(forgotten: &Forgotten, t1: usize, f: &UEdge) -> Result<Configuration> {
    let p = &forgotten.path;
    let mut x: Option<Vertex> = None;
    let mut counts = [0u64; 4];
    let mut i = 0;
    while i < p.len() && forgotten.times[i] < t1 {
        if !f.contains(&p[i]) {
            i += 1;
            continue;
        }
        let entry = p[i];
        let exit = if i + 1 < p.len() && p[i + 1] == f.partner(&entry) { p[i + 1] } else { entry };
        let xv = *x.get_or_insert(entry);
        counts[match (entry == xv, exit == xv) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        }] += 1;
        i += if exit == entry { 1 } else { 2 };
    }
    let x = x.ok_or_else(|| Error::Domain("edge not visited before T_1".into()))?;
    Ok(Configuration { axis: f.axis, x_is_base: x == f.base, counts })
}

/// `c(f)` computed from the partially forgotten walk.
pub fn configuration<F: Fn(&Vertex) -> Option<UEdge>>(positions: &[Vertex], t1: usize, f: &UEdge, trap_of: F) -> Result<Configuration> {
    configuration_from_forgotten(&forget(positions, trap_of), t1, f)
}

/// Tail estimate at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailPoint {
    pub threshold: f64,
    pub count: u64,
    pub n: u64,
    pub p: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TailPoint {
    fn new(threshold: f64, count: u64, n: u64) -> Self {
        let (lo, hi) = wilson_interval(count, n, 1.96);
        Self { threshold, count, n, p: if n == 0 { 0.0 } else { count as f64 / n as f64 }, lo, hi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrengthTail {
    pub points: Vec<TailPoint>,
    pub slope: Option<SlopeFit>,
    /// No exceedance at the largest threshold.
    pub zero_at_max: bool,
}

/// Draws `(1 - U, 1 - V)` for independent `U ~ Beta(a, b)`, `V ~ Beta(c, e)`,
/// accurate near zero.
fn complement_beta_pair<R: Rng + ?Sized>(a: f64, b: f64, c: f64, e: f64, rng: &mut R) -> (f64, f64) {
    let comp = |shape_in: f64, shape_out: f64, rng: &mut R| {
        let gi = sample_ln_gamma(shape_in, rng);
        let go = sample_ln_gamma(shape_out, rng);
        1.0 / (1.0 + (gi - go).exp())
    };
    let u = comp(a, b, rng);
    let v = comp(c, e, rng);
    (u, v)
}

const CHUNK: u64 = 1 << 16;

/// Runs `f` on consecutive chunks of `0..n` with a stream per chunk and
/// folds the results in chunk order.
pub(crate) fn chunked<T, F, G>(n: u64, seed: u64, label: u64, init: T, f: F, fold: G) -> T
where
    T: Send,
    F: Fn(u64, &mut crate::rng::Stream) -> T + Sync,
    G: Fn(T, T) -> T,
{
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<T> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = CHUNK.min(n - c * CHUNK);
            f(len, &mut stream(seed, &[tag::AUX, label, c]))
        })
        .collect();
    parts.into_iter().fold(init, fold)
}

/// Unconditioned two-vertex estimate of `P(s_f >= A)` for an edge along
/// axis `axis`, with a Poisson-weighted log-log slope over thresholds in
/// `fit_range`.
pub fn trap_strength_tail(weights: &Weights, axis: usize, a_grid: &[f64], n_samples: u64, seed: u64, fit_range: (f64, f64)) -> Result<StrengthTail> {
    let d = weights.dim();
    if axis >= d {
        return domain("axis out of range");
    }
    if a_grid.iter().any(|&a| !(a >= 2.0)) {
        return domain("thresholds must be at least 2");
    }
    let total = weights.total();
    let (a_xy, a_yx) = (weights.alpha(axis), weights.alpha(axis + d));
    let grid = a_grid.to_vec();
    let counts = chunked(
        n_samples,
        seed,
        axis as u64,
        vec![0u64; grid.len()],
        |len, rng| {
            let mut c = vec![0u64; grid.len()];
            for _ in 0..len {
                let (u, v) = complement_beta_pair(a_xy, total - a_xy, a_yx, total - a_yx, rng);
                let s = 1.0 / (u + v);
                for (k, &a) in grid.iter().enumerate() {
                    if s >= a {
                        c[k] += 1;
                    }
                }
            }
            c
        },
        |mut acc, part| {
            acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
            acc
        },
    );
    let points: Vec<TailPoint> = grid.iter().zip(&counts).map(|(&a, &c)| TailPoint::new(a, c, n_samples)).collect();
    let fit: Vec<(f64, f64, u64)> = points
        .iter()
        .filter(|p| p.threshold >= fit_range.0 && p.threshold <= fit_range.1 && p.count > 0)
        .map(|p| (p.threshold, p.p, p.count))
        .collect();
    let slope = weighted_loglog_slope(&fit).ok();
    let zero_at_max = points.last().is_some_and(|p| p.count == 0);
    Ok(StrengthTail { points, slope, zero_at_max })
}

/// Law of `(omega(x, y), omega(y, x))` for a trap given its configuration:
/// the product of the two Beta marginals restricted to `{trap}`, tilted by
/// the probability of the observed exit pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct TrapPosterior {
    pub config: Configuration,
    alpha_xy: f64,
    alpha_yx: f64,
    rest_xy: f64,
    rest_yx: f64,
    bound: f64,
}

/// One draw of [`TrapPosterior`] with simulated visit lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorDraw {
    /// `1 - omega(x, y)`.
    pub u: f64,
    /// `1 - omega(y, x)`.
    pub v: f64,
    pub s_f: f64,
    pub p_f: f64,
    /// `sum_j l_f^j`.
    pub lengths: u64,
    /// `sum_j 2 (B_j + 1)`, which dominates `lengths` pathwise.
    pub envelope: u64,
}

impl TrapPosterior {
    pub fn new(weights: &Weights, config: Configuration) -> Result<Self> {
        let d = weights.dim();
        if config.axis >= d {
            return domain("configuration axis out of range");
        }
        if config.n_f() == 0 {
            return domain("configuration without visits");
        }
        let (up, down) = (weights.alpha(config.axis), weights.alpha(config.axis + d));
        let (alpha_xy, alpha_yx) = if config.x_is_base { (up, down) } else { (down, up) };
        let total = weights.total();
        let bound = 2f64.powf((1.0 - alpha_xy).max(0.0)) * 2f64.powf((1.0 - alpha_yx).max(0.0));
        Ok(Self { config, alpha_xy, alpha_yx, rest_xy: total - alpha_xy, rest_yx: total - alpha_yx, bound })
    }

    /// `(1 - omega(x, y), 1 - omega(y, x))` from the prior restricted to traps.
    ///
    /// Proposal: half the first two coordinates of a
    /// `Dirichlet(alpha_0 - alpha(x,y), alpha_0 - alpha(y,x), 1)` vector, whose
    /// support is exactly `{u + v < 1/2}`; the remaining Beta factors
    /// `(1-u)^{alpha(x,y)-1} (1-v)^{alpha(y,x)-1}` are handled by rejection.
    pub fn sample_trap<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        loop {
            let g1 = sample_ln_gamma(self.rest_xy, rng);
            let g2 = sample_ln_gamma(self.rest_yx, rng);
            let g3 = sample_ln_gamma(1.0, rng);
            let m = g1.max(g2).max(g3);
            let (e1, e2, e3) = ((g1 - m).exp(), (g2 - m).exp(), (g3 - m).exp());
            let z = 2.0 * (e1 + e2 + e3);
            let (u, v) = (e1 / z, e2 / z);
            let accept = (1.0 - u).powf(self.alpha_xy - 1.0) * (1.0 - v).powf(self.alpha_yx - 1.0) / self.bound;
            if rng.random::<f64>() < accept {
                return (u, v);
            }
        }
    }

    /// Probability that a visit entering at `x` leaves by `x`.
    fn stay_prob(a: f64, b: f64) -> f64 {
        a / (a + b - a * b)
    }

    /// Posterior draw with visit lengths; the exit pattern is imposed by
    /// accepting the environment with its likelihood.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PosteriorDraw {
        let [xx, xy, yx, yy] = self.config.counts;
        loop {
            let (u, v) = self.sample_trap(rng);
            let qx = Self::stay_prob(u, v);
            let qy = Self::stay_prob(v, u);
            let ln_lik = xx as f64 * qx.ln() + xy as f64 * (-qx).ln_1p() + yy as f64 * qy.ln() + yx as f64 * (-qy).ln_1p();
            if rng.random::<f64>().ln() >= ln_lik {
                continue;
            }
            let p_f = (1.0 - u) * (1.0 - v);
            let ln_p = (-(u + v - u * v)).ln_1p();
            let mut lengths = 0;
            let mut envelope = 0;
            for (k, &c) in self.config.counts.iter().enumerate() {
                // Visits entering and leaving by different endpoints cross once more.
                let cross = u64::from(k == 1 || k == 2);
                for _ in 0..c {
                    let w: f64 = 1.0 - rng.random::<f64>();
                    let b = (w.ln() / ln_p).floor() as u64;
                    lengths += 2 * b + cross;
                    envelope += 2 * (b + 1);
                }
            }
            return PosteriorDraw { u, v, s_f: 1.0 / (u + v), p_f, lengths, envelope };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalTailPoint {
    pub x: f64,
    pub tail: TailPoint,
    /// `x^{kappa_j} * P(sum l >= x, s_f >= h(x) | c)`.
    pub scaled: f64,
    /// Same event for the dominating `sum 2 (B + 1)`.
    pub envelope_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionalTail {
    pub kappa_j: f64,
    pub points: Vec<ConditionalTailPoint>,
    /// `scaled` at consecutive grid points, later over earlier.
    pub ratios: Vec<f64>,
    /// The event was never observed.
    pub empty: bool,
}

/// `P(sum_j l_f^j >= x, s_f >= eps x | c)` over `x_grid`.
pub fn trap_time_tail_given_config(weights: &Weights, config: Configuration, eps: f64, x_grid: &[f64], n_samples: u64, seed: u64) -> Result<ConditionalTail> {
    if !(eps > 0.0) {
        return domain("eps must be positive");
    }
    let post = TrapPosterior::new(weights, config)?;
    let kappa_j = kappa_report(weights).kappa_j[config.axis];
    let grid = x_grid.to_vec();
    let (hits, env_hits) = chunked(
        n_samples,
        seed,
        0x7461_696c,
        (vec![0u64; grid.len()], vec![0u64; grid.len()]),
        |len, rng| {
            let mut h = vec![0u64; grid.len()];
            let mut e = vec![0u64; grid.len()];
            for _ in 0..len {
                let dr = post.sample(rng);
                for (k, &x) in grid.iter().enumerate() {
                    if dr.s_f >= eps * x {
                        if dr.lengths as f64 >= x {
                            h[k] += 1;
                        }
                        if dr.envelope as f64 >= x {
                            e[k] += 1;
                        }
                    }
                }
            }
            (h, e)
        },
        |(mut a, mut b), (c, d)| {
            a.iter_mut().zip(c).for_each(|(x, y)| *x += y);
            b.iter_mut().zip(d).for_each(|(x, y)| *x += y);
            (a, b)
        },
    );
    let points: Vec<ConditionalTailPoint> = grid
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let tail = TailPoint::new(x, hits[k], n_samples);
            ConditionalTailPoint { x, tail, scaled: x.powf(kappa_j) * tail.p, envelope_p: env_hits[k] as f64 / n_samples as f64 }
        })
        .collect();
    let ratios = points.windows(2).map(|w| w[1].scaled / w[0].scaled).collect();
    let empty = hits.iter().all(|&h| h == 0);
    Ok(ConditionalTail { kappa_j, points, ratios, empty })
}

/// `P(s_f >= A | c)` over `a_grid`.
pub fn strength_tail_given_config(weights: &Weights, config: Configuration, a_grid: &[f64], n_samples: u64, seed: u64) -> Result<Vec<TailPoint>> {
    let post = TrapPosterior::new(weights, config)?;
    let grid = a_grid.to_vec();
    let counts = chunked(
        n_samples,
        seed,
        0x7374_7267,
        vec![0u64; grid.len()],
        |len, rng| {
            let mut c = vec![0u64; grid.len()];
            for _ in 0..len {
                let dr = post.sample(rng);
                for (k, &a) in grid.iter().enumerate() {
                    if dr.s_f >= a {
                        c[k] += 1;
                    }
                }
            }
            c
        },
        |mut acc, part| {
            acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
            acc
        },
    );
    Ok(grid.iter().zip(counts).map(|(&a, c)| TailPoint::new(a, c, n_samples)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeCheck {
    /// Fitted `D` in `D A^{-kappa_j} exp(+-5 (N_f + 2 alpha_0) / (2A))`.
    pub d_hat: f64,
    /// Per point: inside the envelope up to `z` standard errors.
    pub inside: Vec<bool>,
    pub pass: bool,
}

/// Looks for one constant `D` with every tail point inside
/// `D A^{-kappa_j} exp(+-5 (N_f + 2 alpha_0) / (2A))`, widened by `z`
/// standard errors of each estimate.
pub fn quasi_independence_envelope(points: &[TailPoint], kappa_j: f64, n_f: u64, alpha_0: f64, z: f64) -> Result<EnvelopeCheck> {
    if points.iter().any(|p| p.count == 0) {
        return Err(Error::InsufficientData("empty tail point".into()));
    }
    let band = |p: &TailPoint| {
        let l = (p.p * p.threshold.powf(kappa_j)).ln();
        let b = 5.0 * (n_f as f64 + 2.0 * alpha_0) / (2.0 * p.threshold);
        let slack = z / (p.count as f64).sqrt();
        (l - b - slack, l + b + slack)
    };
    let lo = points.iter().map(|p| band(p).0).fold(f64::NEG_INFINITY, f64::max);
    let hi = points.iter().map(|p| band(p).1).fold(f64::INFINITY, f64::min);
    let ln_d = 0.5 * (lo + hi);
    let inside: Vec<bool> = points.iter().map(|p| { let (a, b) = band(p); a <= ln_d && ln_d <= b }).collect();
    Ok(EnvelopeCheck { d_hat: ln_d.exp(), pass: lo <= hi, inside })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeometricMoment {
    pub p: f64,
    pub beta: f64,
    /// `E[N^beta] p^beta`.
    pub estimate: f64,
    pub std_error: f64,
    /// `max(C_floor(beta), C_ceil(beta))` with `C_k = k!`.
    pub bound: f64,
}

/// `E[N^k]` for `N` geometric on `{1, 2, ...}` with success probability `p`,
/// from the factorial moments `k! (1-p)^{k-1} / p^k`.
pub fn geometric_raw_moment(p: f64, k: u32) -> f64 {
    // Stirling numbers of the second kind.
    let k = k as usize;
    let mut s = vec![vec![0.0f64; k + 1]; k + 1];
    s[0][0] = 1.0;
    for n in 1..=k {
        for j in 1..=n {
            s[n][j] = j as f64 * s[n - 1][j] + s[n - 1][j - 1];
        }
    }
    let mut fact = 1.0;
    let mut total = 0.0;
    for j in 1..=k {
        fact *= j as f64;
        total += s[k][j] * fact * (1.0 - p).powi(j as i32 - 1) / p.powi(j as i32);
    }
    if k == 0 {
        1.0
    } else {
        total
    }
}

/// `sup_p E[N^k] p^k = k!`, attained as `p -> 0`.
pub fn geometric_moment_bound(beta: f64) -> f64 {
    let fact = |k: u32| (1..=k).map(|i| i as f64).product::<f64>();
    fact(beta.floor() as u32).max(fact(beta.ceil() as u32))
}

/// Monte Carlo table of `E[N^beta] p^beta`.
pub fn geometric_moment_check(p_grid: &[f64], beta_grid: &[f64], n_samples: u64, seed: u64) -> Result<Vec<GeometricMoment>> {
    let mut out = Vec::new();
    for (ip, &p) in p_grid.iter().enumerate() {
        if !(p > 0.0 && p < 1.0) {
            return domain(format!("p = {p} outside (0, 1)"));
        }
        let geo = Geometric::new(p).map_err(|e| Error::Domain(e.to_string()))?;
        for (ib, &beta) in beta_grid.iter().enumerate() {
            if !(beta > 0.0) {
                return domain("beta must be positive");
            }
            let (s, s2) = chunked(
                n_samples,
                seed,
                (ip as u64) << 32 | ib as u64,
                (0.0, 0.0),
                |len, rng| {
                    let mut acc = (0.0, 0.0);
                    for _ in 0..len {
                        let n = (geo.sample(rng) + 1) as f64;
                        let y = (n * p).powf(beta);
                        acc.0 += y;
                        acc.1 += y * y;
                    }
                    acc
                },
                |a, b| (a.0 + b.0, a.1 + b.1),
            );
            let n = n_samples as f64;
            let mean = s / n;
            let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0);
            out.push(GeometricMoment { p, beta, estimate: mean, std_error: (var / n).sqrt(), bound: geometric_moment_bound(beta) });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{HomogeneousEnvironment, LatticeEnvironment, PatchedEnvironment, ProbVec};
    use crate::walk::{detect_renewals, simulate_until_renewals, RenewalParams};
    use rand_distr::Beta;
    use std::collections::HashMap;

    const D: usize = 3;

    fn fixture() -> (PatchedEnvironment<HomogeneousEnvironment>, Vec<Vertex>) {
        // 0, a, b, a, b, c along e_1 with the trap {a, b}.
        let a = Vertex::axis(0, 1);
        let b = Vertex::axis(0, 2);
        let mut patches = HashMap::new();
        patches.insert(a, ProbVec::new(&[0.8, 0.04, 0.04, 0.04, 0.04, 0.04]).unwrap());
        patches.insert(b, ProbVec::new(&[0.04, 0.04, 0.04, 0.8, 0.04, 0.04]).unwrap());
        let env = PatchedEnvironment { base: HomogeneousEnvironment { dim: D, probs: ProbVec::new(&[1.0 / 6.0; 6]).unwrap() }, patches };
        let path = vec![Vertex::ORIGIN, a, b, a, b, Vertex::axis(0, 3)];
        (env, path)
    }

    fn trace(positions: Vec<Vertex>) -> WalkTrace {
        let n = positions.len();
        WalkTrace { positions, dim: D, master_seed: 0, replica: 0, n_max: n }
    }

    #[test]
    fn trap_arithmetic() {
        assert!(is_trap(0.8, 0.8));
        assert!((strength(0.8, 0.8) - 2.5).abs() < 1e-12);
        assert!(!is_trap(0.9, 0.5));
        assert!((back_and_forth(0.8, 0.8) - 0.64).abs() < 1e-15);
    }

    #[test]
    fn fixture_trap_is_found() {
        let (env, _) = fixture();
        let f = UEdge { base: Vertex::axis(0, 1), axis: 0 };
        assert_eq!(trap_at(&env, &Vertex::axis(0, 1)), Some(f));
        assert_eq!(trap_at(&env, &Vertex::axis(0, 2)), Some(f));
        assert_eq!(trap_at(&env, &Vertex::ORIGIN), None);
        assert_eq!(find_traps(&env, &LatticeBox::new(3, D).unwrap()), vec![f]);
    }

    #[test]
    fn fixture_forgotten_path() {
        let (env, path) = fixture();
        let fg = forget(&path, env_trap_lookup(&env));
        assert_eq!(fg.times, vec![0, 1, 4, 5]);
        assert_eq!(fg.path, vec![path[0], path[1], path[2], path[5]]);
        assert!(!fg.trimmed);
        let again = forget(&fg.path, env_trap_lookup(&env));
        assert_eq!(again.path, fg.path);
    }

    #[test]
    fn fixture_decomposition_and_configuration() {
        let (env, path) = fixture();
        let t = trace(path.clone());
        let dec = decompose_t1(&env, &t, 5).unwrap();
        assert_eq!(dec.traps.len(), 1);
        let r = &dec.traps[0];
        assert_eq!(r.n_f(), 1);
        assert_eq!(r.counts, [0, 1, 0, 0]);
        assert_eq!(r.visit_lengths, vec![3]);
        assert_eq!(visit_length_indicator(&path, &r.edge, 1), 3);
        assert_eq!((dec.t1_out, dec.t1_in), (1, 4));
        assert!(dec.identity_holds());
        let c = configuration(&path, 5, &r.edge, env_trap_lookup(&env)).unwrap();
        assert_eq!(c, Configuration::new(0, true, [0, 1, 0, 0]));
        assert_eq!(c, r.configuration());
        assert_eq!(c.to_record(), "(1, 0, 1, 0, 0)");
    }

    #[test]
    fn trace_ending_in_trap_is_trimmed() {
        let (env, mut path) = fixture();
        path.truncate(4);
        let fg = forget(&path, env_trap_lookup(&env));
        assert!(fg.trimmed);
        assert_eq!(fg.times, vec![0, 1]);
    }

    #[test]
    fn trap_free_trace() {
        let env = HomogeneousEnvironment { dim: D, probs: ProbVec::new(&[1.0 / 6.0; 6]).unwrap() };
        let path: Vec<Vertex> = (0..10).map(|k| Vertex::axis(0, k)).collect();
        let fg = forget(&path, env_trap_lookup(&env));
        assert_eq!(fg.path, path);
        let dec = decompose_t1(&env, &trace(path), 9).unwrap();
        assert_eq!((dec.t1_out, dec.t1_in), (9, 0));
        assert!(decompose_t1(&env, &trace(vec![Vertex::ORIGIN]), 3).is_err());
    }

    #[test]
    fn configuration_requires_a_visit() {
        let (env, path) = fixture();
        let f = UEdge { base: Vertex::axis(1, 5), axis: 0 };
        assert!(configuration(&path, 5, &f, env_trap_lookup(&env)).is_err());
    }

    #[test]
    fn decomposition_on_simulated_walks() {
        let w = Weights::canonical();
        let params = RenewalParams::default_for(&w).unwrap();
        for replica in 0..40 {
            let env = LatticeEnvironment::new(w.clone(), 1000 + replica).unwrap();
            let (t, rec) = simulate_until_renewals(&env, &params, 1, 2_000_000, 1000 + replica, replica).unwrap();
            let Some(t1) = rec.first() else { continue };
            let dec = decompose_t1(&env, &t, t1).unwrap();
            assert!(dec.identity_holds());
            let fg = forget(&t.positions, env_trap_lookup(&env));
            for r in &dec.traps {
                let c = configuration_from_forgotten(&fg, t1, &r.edge).unwrap();
                assert_eq!(c, r.configuration());
                assert_eq!(c.n_prime_x() + c.n_prime_y(), c.n_f());
                assert!((1.0 - r.p_f) * r.s_f <= 1.0 + 1e-12 && (1.0 - r.p_f) * r.s_f >= 0.5 - 1e-12);
            }
            assert_eq!(detect_renewals(&t, &params).unwrap().first(), Some(t1));
        }
    }

    #[test]
    fn identical_forgotten_paths_give_identical_configurations() {
        let (env, path) = fixture();
        let a = Vertex::axis(0, 1);
        let b = Vertex::axis(0, 2);
        // Extra back-and-forths erased by forgetting.
        let longer = vec![path[0], a, b, a, b, a, b, path[5]];
        let f = UEdge { base: a, axis: 0 };
        let lookup = env_trap_lookup(&env);
        assert_eq!(forget(&longer, &lookup).path, forget(&path, &lookup).path);
        assert_eq!(configuration(&longer, 7, &f, &lookup).unwrap(), configuration(&path, 5, &f, &lookup).unwrap());
    }

    #[test]
    fn traps_are_vertex_disjoint() {
        let env = LatticeEnvironment::new(Weights::canonical(), 5).unwrap();
        let traps = find_traps(&env, &LatticeBox::new(8, D).unwrap());
        assert!(!traps.is_empty());
        let mut seen = std::collections::HashSet::new();
        for f in &traps {
            assert!(seen.insert(f.base));
            assert!(seen.insert(f.top()));
        }
    }

    #[test]
    fn trap_frequency_matches_two_vertex_oracle() {
        let w = Weights::canonical();
        let env = LatticeEnvironment::with_cache_capacity(w.clone(), 8, 0).unwrap();
        let n = 200_000;
        let hits = (0..n)
            .filter(|&i| {
                let f = UEdge { base: Vertex::from_coords(&[2 * i, 3, -1]), axis: 0 };
                let (a, b) = edge_weights(&env, &f);
                is_trap(a, b)
            })
            .count();
        let mut rng = stream(9, &[]);
        let bx = Beta::new(1.3, 0.25).unwrap();
        let by = Beta::new(0.05, 1.5).unwrap();
        let oracle = (0..n).filter(|_| is_trap(bx.sample(&mut rng), by.sample(&mut rng))).count();
        let (p, q) = (hits as f64 / n as f64, oracle as f64 / n as f64);
        let se = ((p * (1.0 - p) + q * (1.0 - q)) / n as f64).sqrt();
        assert!((p - q).abs() < 4.0 * se, "{p} vs {q}");
    }

    #[test]
    fn strength_algebra_on_random_edges() {
        let w = Weights::canonical();
        let mut rng = stream(3, &[]);
        for _ in 0..100_000 {
            let (u, v) = complement_beta_pair(1.3, 0.25, 0.05, 1.5, &mut rng);
            let (a, b) = (1.0 - u, 1.0 - v);
            let x = (1.0 - back_and_forth(a, b)) * strength(a, b);
            assert!(x > 0.0 && x <= 1.0 + 1e-12);
            if is_trap(a, b) {
                assert!(x >= 0.5 - 1e-12);
            }
        }
        let _ = w;
    }

    #[test]
    fn strength_tail_is_monotone_and_light_for_uniform_weights() {
        let t = trap_strength_tail(&Weights::uniform(3, 1.0).unwrap(), 0, &[2.0, 5.0, 10.0, 20.0], 1_000_000, 1, (10.0, 1000.0)).unwrap();
        assert!(t.points.windows(2).all(|w| w[0].count >= w[1].count));
        assert!(t.points[2].p < 1e-6);
        assert!(t.zero_at_max);
    }

    #[test]
    fn posterior_lengths_have_configuration_parity() {
        let w = Weights::canonical();
        let post = TrapPosterior::new(&w, Configuration::new(0, true, [0, 1, 0, 0])).unwrap();
        let mut rng = stream(4, &[]);
        for _ in 0..10_000 {
            let d = post.sample(&mut rng);
            assert!(d.lengths >= 1 && d.lengths % 2 == 1);
            assert!(d.lengths <= d.envelope);
            assert!(d.u + d.v < 0.5);
        }
        let even = TrapPosterior::new(&w, Configuration::new(0, true, [2, 0, 0, 0])).unwrap();
        for _ in 0..1000 {
            assert_eq!(even.sample(&mut rng).lengths % 2, 0);
        }
    }

    #[test]
    fn trap_prior_matches_rejection_oracle() {
        // Oracle: independent Beta draws kept when they form a trap.
        let w = Weights::canonical();
        let post = TrapPosterior::new(&w, Configuration::new(0, true, [1, 0, 0, 0])).unwrap();
        let mut rng = stream(5, &[]);
        let n = 20_000;
        let mean_u: f64 = (0..n).map(|_| post.sample_trap(&mut rng).0).sum::<f64>() / n as f64;
        let bx = Beta::new(1.3, 0.25).unwrap();
        let by = Beta::new(0.05, 1.5).unwrap();
        let mut acc = Vec::new();
        while acc.len() < n {
            let (a, b) = (bx.sample(&mut rng), by.sample(&mut rng));
            if is_trap(a, b) {
                acc.push(1.0 - a);
            }
        }
        let m2 = acc.iter().sum::<f64>() / n as f64;
        let var = acc.iter().map(|x| (x - m2).powi(2)).sum::<f64>() / n as f64;
        let se = (2.0 * var / n as f64).sqrt();
        assert!((mean_u - m2).abs() < 4.0 * se, "{mean_u} vs {m2}");
    }

    #[test]
    fn huge_eps_gives_empty_event() {
        let w = Weights::canonical();
        let t = trap_time_tail_given_config(&w, Configuration::new(0, true, [0, 1, 0, 0]), 1e15, &[100.0, 200.0], 10_000, 1).unwrap();
        assert!(t.empty);
        assert!(t.points.iter().all(|p| p.tail.p == 0.0));
    }

    #[test]
    fn geometric_closed_forms() {
        for p in [0.9, 0.5, 0.1, 0.01] {
            assert!((geometric_raw_moment(p, 1) * p - 1.0).abs() < 1e-12);
            assert!((geometric_raw_moment(p, 2) * p * p - (2.0 - p)).abs() < 1e-12);
        }
        assert_eq!(geometric_moment_bound(1.5), 2.0);
        assert_eq!(geometric_moment_bound(2.0), 2.0);
    }

    #[test]
    fn geometric_moment_examples() {
        let t = geometric_moment_check(&[0.9, 0.5, 0.1, 0.01], &[1.0, 1.5, 2.0], 200_000, 6).unwrap();
        for m in &t {
            if m.beta.fract() == 0.0 {
                let exact = geometric_raw_moment(m.p, m.beta as u32) * m.p.powf(m.beta);
                assert!((m.estimate - exact).abs() < 4.0 * m.std_error, "{m:?}");
            } else {
                assert!(m.estimate <= m.bound, "{m:?}");
            }
        }
    }
}
