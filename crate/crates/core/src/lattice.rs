//! Lattice vertices, lazily generated Dirichlet environments on `Z^d`, and the
//! confinement boxes `[0, l] x [-l, l]^{d-1}`.

use std::collections::HashMap;
use std::num::NonZeroUsize;
use std::ops::Deref;

use lru::LruCache;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::dirichlet::{sample_dirichlet_into, Weights};
use crate::error::{domain, Error, Result};
use crate::rng::{derive_seed, mix128, stream_from_key, tag};

/// Largest supported lattice dimension.
pub const MAX_DIM: usize = 6;

/// A point of `Z^d`, `d <= MAX_DIM`. Unused coordinates are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Vertex(pub [i32; MAX_DIM]);

impl Vertex {
    pub const ORIGIN: Vertex = Vertex([0; MAX_DIM]);

    pub fn from_coords(coords: &[i32]) -> Self {
        assert!(coords.len() <= MAX_DIM, "dimension above {MAX_DIM}");
        let mut c = [0; MAX_DIM];
        c[..coords.len()].copy_from_slice(coords);
        Vertex(c)
    }

    /// `k * e_{axis+1}`.
    pub fn axis(axis: usize, k: i32) -> Self {
        let mut c = [0; MAX_DIM];
        c[axis] = k;
        Vertex(c)
    }

    pub fn coords(&self, dim: usize) -> &[i32] {
        &self.0[..dim]
    }

    /// Neighbor in direction `dir`: `+e_{dir+1}` for `dir < d`, else
    /// `-e_{dir-d+1}`.
    #[inline]
    pub fn step(&self, dir: usize, dim: usize) -> Vertex {
        let mut c = self.0;
        if dir < dim {
            c[dir] += 1;
        } else {
            c[dir - dim] -= 1;
        }
        Vertex(c)
    }

    /// Direction `dir` with `self.step(dir) == other`, if they are neighbors.
    pub fn direction_to(&self, other: &Vertex, dim: usize) -> Option<usize> {
        let mut found = None;
        for i in 0..MAX_DIM {
            match other.0[i] - self.0[i] {
                0 => {}
                1 if found.is_none() && i < dim => found = Some(i),
                -1 if found.is_none() && i < dim => found = Some(i + dim),
                _ => return None,
            }
        }
        found
    }

    #[inline]
    pub fn dot(&self, u: &[f64]) -> f64 {
        u.iter().zip(self.0.iter()).map(|(a, &b)| a * b as f64).sum()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Vertex) -> Vertex {
        let mut c = self.0;
        for (a, b) in c.iter_mut().zip(other.0) {
            *a -= b;
        }
        Vertex(c)
    }
}

/// Transition probabilities out of one vertex, one entry per direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbVec {
    p: [f64; 2 * MAX_DIM],
    len: u8,
}

impl ProbVec {
    pub fn new(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() || probs.len() > 2 * MAX_DIM {
            return domain(format!("probability vector of length {}", probs.len()));
        }
        if probs.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return domain("not a probability vector");
        }
        let mut p = [0.0; 2 * MAX_DIM];
        p[..probs.len()].copy_from_slice(probs);
        Ok(Self { p, len: probs.len() as u8 })
    }

    /// Point mass on direction `dir` among `2 * dim` directions.
    pub fn one_hot(dir: usize, dim: usize) -> Self {
        let mut p = [0.0; 2 * MAX_DIM];
        p[dir] = 1.0;
        Self { p, len: (2 * dim) as u8 }
    }

    /// Inverse-CDF draw of a direction from a uniform `u` in `[0, 1)`.
    #[inline]
    pub fn pick(&self, u: f64) -> usize {
        let n = self.len as usize;
        let mut acc = 0.0;
        for (i, &p) in self.p[..n].iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // Rounding left `u` above the total: last direction with positive mass.
        (0..n).rev().find(|&i| self.p[i] > 0.0).unwrap_or(n - 1)
    }
}

impl Deref for ProbVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.p[..self.len as usize]
    }
}

/// A nearest-neighbor environment on `Z^d`.
pub trait Environment: Sync {
    fn dim(&self) -> usize;
    fn transition(&self, v: &Vertex) -> ProbVec;
}

/// I.i.d. Dirichlet environment generated on demand.
///
/// The vector at `v` is drawn from a stream keyed by `(seed, v)` only, so
/// values never depend on query order, cache state or threads.
pub struct LatticeEnvironment {
    weights: Weights,
    master_seed: u64,
    vertex_seed: u64,
    cache: Option<Mutex<LruCache<Vertex, ProbVec>>>,
}

pub const DEFAULT_CACHE_CAPACITY: usize = 1 << 16;

impl LatticeEnvironment {
    pub fn new(weights: Weights, master_seed: u64) -> Result<Self> {
        Self::with_cache_capacity(weights, master_seed, DEFAULT_CACHE_CAPACITY)
    }

    /// `capacity = 0` disables caching.
    pub fn with_cache_capacity(weights: Weights, master_seed: u64, capacity: usize) -> Result<Self> {
        if weights.dim() > MAX_DIM {
            return domain(format!("dimension {} above {MAX_DIM}", weights.dim()));
        }
        Ok(Self {
            vertex_seed: derive_seed(master_seed, &[tag::ENVIRONMENT]),
            weights,
            master_seed,
            cache: NonZeroUsize::new(capacity).map(|c| Mutex::new(LruCache::new(c))),
        })
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// The vector at `v`, bypassing the cache.
    pub fn generate(&self, v: &Vertex) -> ProbVec {
        let d = self.weights.dim();
        let mut words = [0u64; MAX_DIM + 3];
        words[0] = self.vertex_seed;
        words[1] = tag::VERTEX;
        words[2] = d as u64;
        for (w, &c) in words[3..].iter_mut().zip(v.coords(d)) {
            *w = c as i64 as u64;
        }
        let mut rng = stream_from_key(mix128(&words[..d + 3]));
        let mut p = [0.0; 2 * MAX_DIM];
        sample_dirichlet_into(self.weights.alphas(), &mut rng, &mut p[..2 * d]).expect("validated weights");
        ProbVec { p, len: (2 * d) as u8 }
    }

    pub fn env_at(&self, v: &Vertex) -> ProbVec {
        let Some(cache) = &self.cache else {
            return self.generate(v);
        };
        if let Some(p) = cache.lock().get(v) {
            return *p;
        }
        let p = self.generate(v);
        cache.lock().put(*v, p);
        p
    }

    /// Vertices currently cached, sorted.
    pub fn cached_vertices(&self) -> Vec<(Vertex, ProbVec)> {
        let mut out: Vec<_> = match &self.cache {
            Some(c) => c.lock().iter().map(|(k, v)| (*k, *v)).collect(),
            None => Vec::new(),
        };
        out.sort_by_key(|a| a.0);
        out
    }

    pub fn snapshot(&self) -> EnvironmentSnapshot {
        EnvironmentSnapshot { schema: 1, master_seed: self.master_seed, weights: self.weights.clone() }
    }
}

impl Environment for LatticeEnvironment {
    fn dim(&self) -> usize {
        self.weights.dim()
    }
    fn transition(&self, v: &Vertex) -> ProbVec {
        self.env_at(v)
    }
}

/// The data from which an environment is regenerated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSnapshot {
    pub schema: u32,
    pub master_seed: u64,
    pub weights: Weights,
}

impl EnvironmentSnapshot {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let snap: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        if snap.schema != 1 {
            return Err(Error::Config(format!("unsupported snapshot schema {}", snap.schema)));
        }
        Ok(snap)
    }

    pub fn restore(&self) -> Result<LatticeEnvironment> {
        LatticeEnvironment::new(self.weights.clone(), self.master_seed)
    }
}

/// The same vector at every vertex.
#[derive(Debug, Clone)]
pub struct HomogeneousEnvironment {
    pub dim: usize,
    pub probs: ProbVec,
}

impl Environment for HomogeneousEnvironment {
    fn dim(&self) -> usize {
        self.dim
    }
    fn transition(&self, _: &Vertex) -> ProbVec {
        self.probs
    }
}

/// A base environment with some vertices replaced.
pub struct PatchedEnvironment<E> {
    pub base: E,
    pub patches: HashMap<Vertex, ProbVec>,
}

impl<E: Environment> Environment for PatchedEnvironment<E> {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn transition(&self, v: &Vertex) -> ProbVec {
        self.patches.get(v).copied().unwrap_or_else(|| self.base.transition(v))
    }
}

impl<E: Environment + ?Sized> Environment for &E {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn transition(&self, v: &Vertex) -> ProbVec {
        (**self).transition(v)
    }
}

/// `[0, l] x [-l, l]^{d-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeBox {
    pub ell: u32,
    pub dim: usize,
}

impl LatticeBox {
    pub fn new(ell: u32, dim: usize) -> Result<Self> {
        if ell == 0 || dim == 0 || dim > MAX_DIM {
            return domain(format!("box with l = {ell}, d = {dim}"));
        }
        Ok(Self { ell, dim })
    }

    pub fn contains(&self, v: &Vertex) -> bool {
        let l = self.ell as i32;
        let c = v.coords(self.dim);
        (0..=l).contains(&c[0]) && c[1..].iter().all(|x| (-l..=l).contains(x)) && v.0[self.dim..].iter().all(|&x| x == 0)
    }

    pub fn len(&self) -> usize {
        let l = self.ell as usize;
        (l + 1) * (2 * l + 1).pow(self.dim as u32 - 1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Lexicographic enumeration.
    pub fn vertices(&self) -> Vec<Vertex> {
        let l = self.ell as i32;
        let mut lo = vec![-l; self.dim];
        lo[0] = 0;
        lattice_range(&lo, &vec![l; self.dim])
    }
}

/// All vertices of the product of intervals `[lo_i, hi_i]`, lexicographic.
pub fn lattice_range(lo: &[i32], hi: &[i32]) -> Vec<Vertex> {
    let d = lo.len();
    let mut out = Vec::new();
    if lo.iter().zip(hi).any(|(a, b)| a > b) {
        return out;
    }
    let mut cur = lo.to_vec();
    loop {
        out.push(Vertex::from_coords(&cur));
        let mut i = d;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < hi[i] {
                cur[i] += 1;
                break;
            }
            cur[i] = lo[i];
        }
    }
}

/// `ceil((1 + kappa) / c_t * ln x)`.
pub fn box_length(x: f64, kappa: f64, c_t: f64) -> Result<u64> {
    if !(x > 1.0) || !x.is_finite() {
        return domain(format!("box length needs x > 1, got {x}"));
    }
    if !(c_t > 0.0) || !kappa.is_finite() || kappa <= -1.0 {
        return domain(format!("box length needs c_T > 0 and kappa > -1, got {c_t}, {kappa}"));
    }
    Ok(((1.0 + kappa) / c_t * x.ln()).ceil() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn canonical(seed: u64) -> LatticeEnvironment {
        LatticeEnvironment::new(Weights::canonical(), seed).unwrap()
    }

    #[test]
    fn repeated_query_is_bit_identical() {
        let env = canonical(5);
        let v = Vertex::from_coords(&[3, -1, 2]);
        let a = env.env_at(&v);
        let b = env.env_at(&v);
        assert_eq!(a, b);
        assert_eq!(a, env.generate(&v));
        assert_eq!(a.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn seeds_give_different_origins() {
        assert_ne!(canonical(1).env_at(&Vertex::ORIGIN), canonical(2).env_at(&Vertex::ORIGIN));
    }

    #[test]
    fn query_order_does_not_matter() {
        let verts = lattice_range(&[-3, -3, -3], &[3, 3, 3]);
        let mut shuffled = verts.clone();
        shuffled.shuffle(&mut crate::rng::stream(9, &[]));
        let a = canonical(11);
        let b = canonical(11);
        for v in &verts {
            a.env_at(v);
        }
        for v in &shuffled {
            b.env_at(v);
        }
        assert_eq!(a.cached_vertices(), b.cached_vertices());
    }

    #[test]
    fn cache_capacity_is_bounded_and_optional() {
        let w = Weights::canonical();
        let small = LatticeEnvironment::with_cache_capacity(w.clone(), 3, 8).unwrap();
        let none = LatticeEnvironment::with_cache_capacity(w, 3, 0).unwrap();
        for v in lattice_range(&[0, 0, 0], &[3, 3, 3]) {
            assert_eq!(small.env_at(&v), none.env_at(&v));
        }
        assert_eq!(small.cached_vertices().len(), 8);
        assert!(none.cached_vertices().is_empty());
    }

    #[test]
    fn component_means_over_vertices() {
        let w = Weights::canonical();
        let env = LatticeEnvironment::with_cache_capacity(w.clone(), 21, 0).unwrap();
        let n = 100_000;
        let total = w.total();
        let mut sums = [0.0; 6];
        let mut sq = [0.0; 6];
        for i in 0..n {
            let p = env.env_at(&Vertex::from_coords(&[i, 0, 0]));
            for k in 0..6 {
                sums[k] += p[k];
                sq[k] += p[k] * p[k];
            }
        }
        for k in 0..6 {
            let mean = sums[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!((mean - w.alpha(k) / total).abs() < 4.0 * se, "component {k}");
        }
    }

    #[test]
    fn neighbouring_vertices_are_uncorrelated() {
        let env = LatticeEnvironment::with_cache_capacity(Weights::uniform(3, 1.0).unwrap(), 4, 0).unwrap();
        let n = 10_000;
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for i in 0..n {
            let v = Vertex::from_coords(&[2 * i, 7, -1]);
            xs.push(env.env_at(&v)[0]);
            ys.push(env.env_at(&v.step(0, 3))[0]);
        }
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n as f64;
        let sx = (xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sy = (ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n as f64).sqrt();
        let r = cov / (sx * sy);
        // Under independence, r has standard error about 1/sqrt(n).
        assert!(r.abs() < 4.0 / (n as f64).sqrt(), "r = {r}");
    }

    #[test]
    fn snapshot_round_trip() {
        let env = canonical(77);
        let s = EnvironmentSnapshot::from_json(&env.snapshot().to_json()).unwrap();
        let back = s.restore().unwrap();
        assert_eq!(back.env_at(&Vertex::ORIGIN), env.env_at(&Vertex::ORIGIN));
    }

    #[test]
    fn steps_and_directions() {
        let v = Vertex::from_coords(&[1, 2, 3]);
        for dir in 0..6 {
            assert_eq!(v.direction_to(&v.step(dir, 3), 3), Some(dir));
        }
        assert_eq!(v.direction_to(&v, 3), None);
        assert_eq!(v.direction_to(&v.step(0, 3).step(1, 3), 3), None);
    }

    #[test]
    fn pick_inverts_cdf() {
        let p = ProbVec::new(&[0.25, 0.0, 0.75]).unwrap();
        assert_eq!(p.pick(0.0), 0);
        assert_eq!(p.pick(0.2499), 0);
        assert_eq!(p.pick(0.25), 2);
        assert_eq!(p.pick(0.9999999), 2);
    }

    #[test]
    fn box_membership() {
        let b = LatticeBox::new(2, 3).unwrap();
        assert!(b.contains(&Vertex::from_coords(&[0, -2, 2])));
        assert!(!b.contains(&Vertex::from_coords(&[-1, 0, 0])));
        assert!(!b.contains(&Vertex::from_coords(&[3, 0, 0])));
        assert!(!b.contains(&Vertex::from_coords(&[1, 0, -3])));
        let vs = b.vertices();
        assert_eq!(vs.len(), b.len());
        assert_eq!(vs.len(), 3 * 5 * 5);
        assert!(vs.iter().all(|v| b.contains(v)));
    }

    #[test]
    fn box_length_examples() {
        assert_eq!(box_length(std::f64::consts::E, 1.0, 2.0).unwrap(), 1);
        assert_eq!(box_length(std::f64::consts::E.powi(2), 1.75, 1.0).unwrap(), 6);
        assert!(box_length(1.0, 1.0, 1.0).is_err());
        assert!(box_length(0.5, 1.0, 1.0).is_err());
        assert!(box_length(3.0, 1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn box_length_monotone(x in 1.0001f64..1e9, dx in 0.0f64..1e6, kappa in 0.0f64..5.0, c in 0.01f64..10.0) {
            prop_assert!(box_length(x, kappa, c).unwrap() <= box_length(x + dx, kappa, c).unwrap());
        }

        #[test]
        fn env_vectors_are_simplex_points(x in -1000i32..1000, y in -1000i32..1000, z in -1000i32..1000, seed in any::<u64>()) {
            let env = LatticeEnvironment::with_cache_capacity(Weights::canonical(), seed, 0).unwrap();
            let p = env.env_at(&Vertex::from_coords(&[x, y, z]));
            prop_assert_eq!(p.len(), 6);
            prop_assert!(p.iter().all(|&q| q > 0.0));
            prop_assert_eq!(p.iter().sum::<f64>(), 1.0);
        }
    }
}
