//! Finite directed multigraphs carrying Dirichlet weights: divergence,
//! contraction, invariant measures, time reversal, hitting probabilities and
//! the exponents `kappa(S)`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dirichlet::{exact_sum, sample_dirichlet_into, Weights};
use crate::error::{domain, Error, Result};
use crate::lattice::{lattice_range, Environment, Vertex, MAX_DIM};
use crate::linalg::solve_triplets;

/// Label of the cemetery vertex in the edge-list format.
pub const CEMETERY_LABEL: &str = "∂";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub tail: usize,
    pub head: usize,
    pub weight: f64,
}

/// Directed multigraph with positive edge weights. Parallel edges are kept
/// apart; the optional cemetery has no outgoing edge.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteGraph {
    n: usize,
    edges: Vec<Edge>,
    out: Vec<Vec<usize>>,
    inc: Vec<Vec<usize>>,
    nbrs: Vec<Vec<usize>>,
    cemetery: Option<usize>,
    labels: Option<Vec<String>>,
}

impl FiniteGraph {
    pub fn new(n: usize, edges: Vec<Edge>, cemetery: Option<usize>) -> Result<Self> {
        let mut out = vec![Vec::new(); n];
        let mut inc = vec![Vec::new(); n];
        let mut nbrs = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            if e.tail >= n || e.head >= n {
                return domain(format!("edge {i} refers to a vertex outside 0..{n}"));
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return domain(format!("edge {i} has weight {}", e.weight));
            }
            if Some(e.tail) == cemetery {
                return domain("the cemetery cannot have outgoing edges");
            }
            out[e.tail].push(i);
            inc[e.head].push(i);
            if e.tail != e.head {
                nbrs[e.tail].push(e.head);
                nbrs[e.head].push(e.tail);
            }
        }
        if let Some(c) = cemetery {
            if c >= n {
                return domain("cemetery index out of range");
            }
        }
        for l in &mut nbrs {
            l.sort_unstable();
            l.dedup();
        }
        Ok(Self { n, edges, out, inc, nbrs, cemetery, labels: None })
    }

    /// `n` vertices on a cycle, an edge of weight `weight` to each neighbor.
    /// For `n = 2` this is the 2-cycle `a -> b -> a`.
    pub fn bidirected_cycle(n: usize, weight: f64) -> Self {
        assert!(n >= 2);
        let mut edges = Vec::new();
        for i in 0..n {
            edges.push(Edge { tail: i, head: (i + 1) % n, weight });
            if n > 2 {
                edges.push(Edge { tail: i, head: (i + n - 1) % n, weight });
            }
        }
        Self::new(n, edges, None).expect("valid cycle")
    }

    /// Vertex 0 with one edge to each of the leaves `1..=k`.
    pub fn star(weights: &[f64]) -> Self {
        let edges = weights.iter().enumerate().map(|(i, &w)| Edge { tail: 0, head: i + 1, weight: w }).collect();
        Self::new(weights.len() + 1, edges, None).expect("valid star")
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n {
            return domain("one label per vertex expected");
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn vertex_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, e: usize) -> Edge {
        self.edges[e]
    }

    pub fn out_edges(&self, x: usize) -> &[usize] {
        &self.out[x]
    }

    pub fn in_edges(&self, x: usize) -> &[usize] {
        &self.inc[x]
    }

    /// Undirected neighbors, sorted, without `x` itself.
    pub fn neighbors(&self, x: usize) -> &[usize] {
        &self.nbrs[x]
    }

    pub fn cemetery(&self) -> Option<usize> {
        self.cemetery
    }

    pub fn label(&self, x: usize) -> String {
        if Some(x) == self.cemetery {
            return CEMETERY_LABEL.to_string();
        }
        match &self.labels {
            Some(l) => l[x].clone(),
            None => x.to_string(),
        }
    }

    /// `alpha_x`, total weight leaving `x`.
    pub fn out_weight(&self, x: usize) -> f64 {
        self.out[x].iter().map(|&e| self.edges[e].weight).sum()
    }

    pub fn in_weight(&self, x: usize) -> f64 {
        self.inc[x].iter().map(|&e| self.edges[e].weight).sum()
    }

    /// Outgoing minus incoming weight at `x`.
    pub fn divergence(&self, x: usize) -> f64 {
        self.out_weight(x) - self.in_weight(x)
    }

    /// Vertices where `|div| > tol`.
    pub fn divergence_violations(&self, tol: f64) -> Vec<usize> {
        (0..self.n).filter(|&x| self.divergence(x).abs() > tol).collect()
    }

    pub fn require_null_divergence(&self) -> Result<()> {
        let bad = self.divergence_violations(1e-9);
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::NonNullDivergence(bad))
        }
    }

    /// Same vertices, every edge reversed, weights kept (`alpha(y, x) := alpha(x, y)`).
    /// Edge `i` of the result is the reversal of edge `i`.
    pub fn reversed(&self) -> Result<Self> {
        let edges = self.edges.iter().map(|e| Edge { tail: e.head, head: e.tail, weight: e.weight }).collect();
        let g = Self::new(self.n, edges, None)?;
        Ok(Self { labels: self.labels.clone(), ..g })
    }

    /// Whether `set` is connected through undirected adjacency.
    pub fn is_connected_set(&self, set: &[usize]) -> bool {
        if set.is_empty() {
            return false;
        }
        let members: HashSet<usize> = set.iter().copied().collect();
        let mut seen = HashSet::from([set[0]]);
        let mut queue = VecDeque::from([set[0]]);
        while let Some(x) = queue.pop_front() {
            for &y in &self.nbrs[x] {
                if members.contains(&y) && seen.insert(y) {
                    queue.push_back(y);
                }
            }
        }
        seen.len() == members.len()
    }

    /// Merges the connected set `f` into one vertex. Edges inside `f` are
    /// dropped, the others keep their weights and multiplicities.
    pub fn contract(&self, f: &[usize]) -> Result<Contraction> {
        if f.iter().any(|&x| x >= self.n) {
            return domain("contracted set refers to a missing vertex");
        }
        if !self.is_connected_set(f) {
            return domain("contracted set is not connected");
        }
        if self.cemetery.is_some_and(|c| f.contains(&c)) {
            return domain("the cemetery cannot be contracted");
        }
        let in_f: HashSet<usize> = f.iter().copied().collect();
        let mut map = vec![0; self.n];
        let mut next = 0;
        for (x, m) in map.iter_mut().enumerate() {
            if !in_f.contains(&x) {
                *m = next;
                next += 1;
            }
        }
        let merged = next;
        for &x in f {
            map[x] = merged;
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| !(in_f.contains(&e.tail) && in_f.contains(&e.head)))
            .map(|e| Edge { tail: map[e.tail], head: map[e.head], weight: e.weight })
            .collect();
        let graph = Self::new(merged + 1, edges, self.cemetery.map(|c| map[c]))?;
        Ok(Contraction { graph, merged, map })
    }

    /// Serializes as `tail head weight` lines.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for e in &self.edges {
            writeln!(s, "{} {} {}", self.label(e.tail), self.label(e.head), e.weight).unwrap();
        }
        s
    }

    /// Parses `tail head weight` lines. Blank lines and `#` comments are
    /// skipped; the label `∂` is the cemetery.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut labels = Vec::new();
        let mut edges = Vec::new();
        let mut intern = |name: &str, labels: &mut Vec<String>| -> usize {
            *index.entry(name.to_string()).or_insert_with(|| {
                labels.push(name.to_string());
                labels.len() - 1
            })
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let err = |msg: &str| Error::Parse { line: lineno + 1, msg: msg.to_string() };
            if parts.len() != 3 {
                return Err(err("expected `tail head weight`"));
            }
            let weight: f64 = parts[2].parse().map_err(|_| err("weight is not a number"))?;
            if parts[0] == CEMETERY_LABEL {
                return Err(err("the cemetery cannot have outgoing edges"));
            }
            let tail = intern(parts[0], &mut labels);
            let head = intern(parts[1], &mut labels);
            edges.push(Edge { tail, head, weight });
        }
        let cemetery = labels.iter().position(|l| l == CEMETERY_LABEL);
        Self::new(labels.len(), edges, cemetery)?.with_labels(labels)
    }

    pub fn vertex_by_label(&self, label: &str) -> Option<usize> {
        (0..self.n).find(|&x| self.label(x) == label)
    }
}

/// Result of [`FiniteGraph::contract`]. `map[x]` is the new index of `x`; all
/// vertices of the contracted set map to `merged`.
#[derive(Debug, Clone)]
pub struct Contraction {
    pub graph: FiniteGraph,
    pub merged: usize,
    pub map: Vec<usize>,
}

/// Transition probabilities aligned with a graph's edge list.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentOnGraph {
    probs: Vec<f64>,
}

impl EnvironmentOnGraph {
    /// Draws `omega ~ P^(alpha)`: independent Dirichlet vectors over the
    /// outgoing edges of each vertex.
    pub fn sample<R: Rng + ?Sized>(g: &FiniteGraph, rng: &mut R) -> Self {
        let mut probs = vec![0.0; g.edge_count()];
        let mut alphas = Vec::new();
        let mut draw = Vec::new();
        for x in 0..g.vertex_count() {
            let out = g.out_edges(x);
            if out.is_empty() {
                continue;
            }
            alphas.clear();
            alphas.extend(out.iter().map(|&e| g.edge(e).weight));
            draw.resize(out.len(), 0.0);
            sample_dirichlet_into(&alphas, rng, &mut draw).expect("positive weights");
            for (&e, &p) in out.iter().zip(&draw) {
                probs[e] = p;
            }
        }
        Self { probs }
    }

    pub fn from_probs(g: &FiniteGraph, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != g.edge_count() {
            return domain("one probability per edge expected");
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return domain("probabilities must lie in [0, 1]");
        }
        for x in 0..g.vertex_count() {
            let out = g.out_edges(x);
            if !out.is_empty() && (out.iter().map(|&e| probs[e]).sum::<f64>() - 1.0).abs() > 1e-9 {
                return domain(format!("probabilities out of vertex {x} do not sum to 1"));
            }
        }
        Ok(Self { probs })
    }

    pub fn prob(&self, e: usize) -> f64 {
        self.probs[e]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Total probability of the edges from `x` to `y`.
    pub fn transition(&self, g: &FiniteGraph, x: usize, y: usize) -> f64 {
        g.out_edges(x).iter().filter(|&&e| g.edge(e).head == y).map(|&e| self.probs[e]).sum()
    }
}

/// Checks that every vertex reaches every other one through edges of
/// positive probability.
fn check_irreducible(g: &FiniteGraph, omega: &EnvironmentOnGraph) -> Result<()> {
    let n = g.vertex_count();
    for forward in [true, false] {
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut stack = vec![0];
        while let Some(x) = stack.pop() {
            let list = if forward { g.out_edges(x) } else { g.in_edges(x) };
            for &e in list {
                let y = if forward { g.edge(e).head } else { g.edge(e).tail };
                if omega.prob(e) > 0.0 && !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return Err(Error::Reducible { vertex: v, other: 0 });
        }
    }
    Ok(())
}

fn stationarity_residual(g: &FiniteGraph, omega: &EnvironmentOnGraph, pi: &[f64]) -> f64 {
    let mut next = vec![0.0; pi.len()];
    for (e, edge) in g.edges().iter().enumerate() {
        next[edge.head] += pi[edge.tail] * omega.prob(e);
    }
    next.iter().zip(pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Vertex count above which [`invariant_measure`] iterates instead of
/// solving densely.
pub const DENSE_LIMIT: usize = 2000;

/// The probability `pi` with `pi omega = pi`.
pub fn invariant_measure(g: &FiniteGraph, omega: &EnvironmentOnGraph) -> Result<Vec<f64>> {
    let n = g.vertex_count();
    if n == 0 {
        return domain("empty graph");
    }
    check_irreducible(g, omega)?;
    let mut pi = if n <= DENSE_LIMIT {
        // (omega^T - I) pi = 0 with the last row replaced by sum(pi) = 1.
        let mut a = DMatrix::<f64>::zeros(n, n);
        for (e, edge) in g.edges().iter().enumerate() {
            if edge.head != n - 1 {
                a[(edge.head, edge.tail)] += omega.prob(e);
            }
        }
        for i in 0..n - 1 {
            a[(i, i)] -= 1.0;
        }
        for j in 0..n {
            a[(n - 1, j)] = 1.0;
        }
        let mut b = DVector::<f64>::zeros(n);
        b[n - 1] = 1.0;
        let sol = a.lu().solve(&b).ok_or_else(|| Error::Domain("singular stationarity system".into()))?;
        sol.as_slice().to_vec()
    } else {
        vec![1.0 / n as f64; n]
    };
    // Lazy power iteration polishes the dense solution and is the whole
    // method for large graphs.
    let max_iter = if n <= DENSE_LIMIT { 50 } else { 1_000_000 };
    for _ in 0..max_iter {
        if stationarity_residual(g, omega, &pi) < 1e-13 {
            break;
        }
        let mut next: Vec<f64> = pi.iter().map(|p| 0.5 * p).collect();
        for (e, edge) in g.edges().iter().enumerate() {
            next[edge.head] += 0.5 * pi[edge.tail] * omega.prob(e);
        }
        let s: f64 = next.iter().sum();
        pi = next.into_iter().map(|p| p / s).collect();
    }
    for p in &mut pi {
        *p = p.max(0.0);
    }
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|p| *p /= s);
    Ok(pi)
}

/// Time-reversed environment `omega_rev(y, x) = pi(x) omega(x, y) / pi(y)` on the
/// reversed graph, edge `i` of which reverses edge `i`.
pub fn reverse_environment(g: &FiniteGraph, omega: &EnvironmentOnGraph) -> Result<(FiniteGraph, EnvironmentOnGraph)> {
    let pi = invariant_measure(g, omega)?;
    let rg = g.reversed()?;
    let mut probs: Vec<f64> = g.edges().iter().enumerate().map(|(e, edge)| pi[edge.tail] * omega.prob(e) / pi[edge.head]).collect();
    for x in 0..rg.vertex_count() {
        let out = rg.out_edges(x);
        let s: f64 = out.iter().map(|&e| probs[e]).sum();
        debug_assert!((s - 1.0).abs() < 1e-9, "reversed row sum {s}");
        for &e in out {
            probs[e] /= s;
        }
    }
    Ok((rg, EnvironmentOnGraph { probs }))
}

/// `h(z) = P_z(H_target < H_avoid)`. Vertices without outgoing edges that are
/// not targets count as avoided.
pub fn absorption_probability(g: &FiniteGraph, omega: &EnvironmentOnGraph, target: &[usize], avoid: &[usize]) -> Result<Vec<f64>> {
    let n = g.vertex_count();
    let mut fixed: Vec<Option<f64>> = vec![None; n];
    for &a in avoid {
        fixed[a] = Some(0.0);
    }
    for &t in target {
        if fixed[t].is_some() {
            return domain("target and avoided sets overlap");
        }
        fixed[t] = Some(1.0);
    }
    for (x, f) in fixed.iter_mut().enumerate() {
        if f.is_none() && g.out_edges(x).is_empty() {
            *f = Some(0.0);
        }
    }
    // Vertices that cannot reach the target have h = 0; dropping them makes
    // the remaining system nonsingular.
    let mut reach = vec![false; n];
    let mut stack: Vec<usize> = target.to_vec();
    for &t in target {
        reach[t] = true;
    }
    while let Some(x) = stack.pop() {
        for &e in g.in_edges(x) {
            let y = g.edge(e).tail;
            if !reach[y] && fixed[y].is_none() && omega.prob(e) > 0.0 {
                reach[y] = true;
                stack.push(y);
            }
        }
    }
    for x in 0..n {
        if fixed[x].is_none() && !reach[x] {
            fixed[x] = Some(0.0);
        }
    }
    let unknowns: Vec<usize> = (0..n).filter(|&x| fixed[x].is_none()).collect();
    let mut slot = vec![usize::MAX; n];
    for (i, &x) in unknowns.iter().enumerate() {
        slot[x] = i;
    }
    let mut triplets = Vec::with_capacity(unknowns.len() * 8);
    let mut rhs = vec![0.0; unknowns.len()];
    for (i, &x) in unknowns.iter().enumerate() {
        triplets.push((i, i, 1.0));
        for &e in g.out_edges(x) {
            let y = g.edge(e).head;
            let p = omega.prob(e);
            match fixed[y] {
                Some(v) => rhs[i] += p * v,
                None => triplets.push((i, slot[y], -p)),
            }
        }
    }
    let sol = solve_triplets(unknowns.len(), &triplets, &rhs)?;
    Ok((0..n).map(|x| fixed[x].unwrap_or_else(|| sol[slot[x]])).collect())
}

/// `P_x(H_x^+ < H_avoid)`, the probability to come back to `x` before
/// visiting `avoid`.
pub fn return_probability(g: &FiniteGraph, omega: &EnvironmentOnGraph, x: usize, avoid: &[usize]) -> Result<f64> {
    if avoid.contains(&x) {
        return domain("start vertex is avoided");
    }
    let h = absorption_probability(g, omega, &[x], avoid)?;
    Ok(g.out_edges(x).iter().map(|&e| omega.prob(e) * h[g.edge(e).head]).sum())
}

/// `P_x(H_y < H_x^+)`, the probability to reach `y` before coming back to `x`.
pub fn escape_probability(g: &FiniteGraph, omega: &EnvironmentOnGraph, x: usize, y: usize) -> Result<f64> {
    if x == y {
        return domain("x and y must differ");
    }
    let h = absorption_probability(g, omega, &[y], &[x])?;
    Ok(g.out_edges(x).iter().map(|&e| omega.prob(e) * h[g.edge(e).head]).sum())
}

/// `(P_x^omega(H_y < H_x^+), P_x^{omega_rev}(X_1 = y))`; the first dominates
/// the second when the weights have null divergence, and under `P^(alpha)`
/// the second is `Beta(alpha(y, x), alpha_x - alpha(y, x))`.
pub fn return_probability_beta_bound(g: &FiniteGraph, omega: &EnvironmentOnGraph, x: usize, y: usize) -> Result<(f64, f64)> {
    g.require_null_divergence()?;
    let lhs = escape_probability(g, omega, x, y)?;
    let (rg, rev) = reverse_environment(g, omega)?;
    Ok((lhs, rev.transition(&rg, x, y)))
}

/// Parameters of the `kappa(S)` enumeration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaSearch {
    /// Largest candidate set; `None` means `|S| + 2`.
    pub max_size: Option<usize>,
    /// Largest undirected distance from the root; `None` means unbounded.
    pub radius: Option<usize>,
    /// Number of candidate sets after which enumeration aborts.
    pub budget: usize,
}

impl Default for KappaSearch {
    fn default() -> Self {
        Self { max_size: None, radius: None, budget: 1_000_000 }
    }
}

/// Total weight of the edges leaving `set`, summed order-independently.
pub fn out_boundary_weight(g: &FiniteGraph, set: &[usize]) -> f64 {
    let mut member = vec![false; g.vertex_count()];
    for &x in set {
        member[x] = true;
    }
    exact_sum(set.iter().flat_map(|&x| g.out_edges(x).iter().map(|&e| g.edge(e))).filter(|e| !member[e.head]).map(|e| e.weight))
}

fn distances_from(g: &FiniteGraph, root: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; g.vertex_count()];
    dist[root] = 0;
    let mut q = VecDeque::from([root]);
    while let Some(x) = q.pop_front() {
        for &y in g.neighbors(x) {
            if dist[y] == usize::MAX {
                dist[y] = dist[x] + 1;
                q.push_back(y);
            }
        }
    }
    dist
}

/// `kappa(S)`: the least total outgoing weight of a connected vertex set `K`
/// with `{root} ⊊ K`, `K ∩ ∂S ≠ ∅` and `S ⊆ K`, over all such `K` within the
/// search limits. The cemetery never belongs to `K`.
pub fn kappa_of_set(g: &FiniteGraph, root: usize, s: &[usize], opts: &KappaSearch) -> Result<f64> {
    if !s.contains(&root) {
        return domain("the root must belong to S");
    }
    if g.cemetery().is_some_and(|c| s.contains(&c)) {
        return domain("S cannot contain the cemetery");
    }
    if !g.is_connected_set(s) {
        return domain("S must be connected");
    }
    let mut start: Vec<usize> = s.to_vec();
    start.sort_unstable();
    start.dedup();
    let in_s: HashSet<usize> = start.iter().copied().collect();
    let boundary: Vec<usize> = start.iter().copied().filter(|&x| g.neighbors(x).iter().any(|y| !in_s.contains(y)) || g.out_edges(x).iter().any(|&e| !in_s.contains(&g.edge(e).head))).collect();
    let max_size = opts.max_size.unwrap_or(start.len() + 2);
    let dist = distances_from(g, root);
    let allowed = |x: usize| Some(x) != g.cemetery() && opts.radius.is_none_or(|r| dist[x] <= r);
    if start.iter().any(|&x| !allowed(x)) {
        return domain("S leaves the search radius");
    }

    let mut best = f64::INFINITY;
    let mut seen: HashSet<Vec<usize>> = HashSet::from([start.clone()]);
    let mut stack = vec![start];
    while let Some(k) = stack.pop() {
        if k.len() >= 2 && k.iter().any(|x| boundary.contains(x)) {
            best = best.min(out_boundary_weight(g, &k));
        }
        if k.len() >= max_size {
            continue;
        }
        let mut frontier: Vec<usize> = k.iter().flat_map(|&x| g.neighbors(x).iter().copied()).filter(|&y| allowed(y) && k.binary_search(&y).is_err()).collect();
        frontier.sort_unstable();
        frontier.dedup();
        for y in frontier {
            let mut next = k.clone();
            let pos = next.binary_search(&y).unwrap_err();
            next.insert(pos, y);
            if seen.insert(next.clone()) {
                if seen.len() > opts.budget {
                    return Err(Error::BudgetExceeded { budget: opts.budget });
                }
                stack.push(next);
            }
        }
    }
    if best.is_infinite() {
        return domain("no admissible set within the search limits");
    }
    Ok(best)
}

/// All connected vertex sets containing `root` with at most `max_size`
/// vertices, excluding the cemetery. Each set is sorted.
pub fn connected_sets_containing(g: &FiniteGraph, root: usize, max_size: usize) -> Vec<Vec<usize>> {
    let mut seen: HashSet<Vec<usize>> = HashSet::from([vec![root]]);
    let mut stack = vec![vec![root]];
    let mut out = Vec::new();
    while let Some(k) = stack.pop() {
        if k.len() < max_size {
            for &x in &k {
                for &y in g.neighbors(x) {
                    if Some(y) == g.cemetery() || k.binary_search(&y).is_ok() {
                        continue;
                    }
                    let mut next = k.clone();
                    next.insert(next.binary_search(&y).unwrap_err(), y);
                    if seen.insert(next.clone()) {
                        stack.push(next);
                    }
                }
            }
        }
        out.push(k);
    }
    out.sort();
    out
}

/// A finite piece of `Z^d` as a graph: every site has its `2d` edges, those
/// leaving the region go to a cemetery.
#[derive(Debug, Clone)]
pub struct LatticeGraph {
    pub graph: FiniteGraph,
    pub sites: Vec<Vertex>,
    pub dim: usize,
    index: HashMap<Vertex, usize>,
}

impl LatticeGraph {
    /// Edge `2d * i + dir` leaves site `i` in direction `dir`.
    pub fn new(weights: &Weights, sites: Vec<Vertex>) -> Result<Self> {
        let d = weights.dim();
        if d > MAX_DIM {
            return domain("dimension too large");
        }
        let index: HashMap<Vertex, usize> = sites.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        if index.len() != sites.len() {
            return domain("repeated site");
        }
        let cemetery = sites.len();
        let mut edges = Vec::with_capacity(sites.len() * 2 * d);
        for (i, v) in sites.iter().enumerate() {
            for dir in 0..2 * d {
                let head = index.get(&v.step(dir, d)).copied().unwrap_or(cemetery);
                edges.push(Edge { tail: i, head, weight: weights.alpha(dir) });
            }
        }
        let graph = FiniteGraph::new(sites.len() + 1, edges, Some(cemetery))?;
        Ok(Self { graph, sites, dim: d, index })
    }

    /// `[-radius, radius]^d`, lexicographic order.
    pub fn cube(weights: &Weights, radius: u32) -> Result<Self> {
        let r = radius as i32;
        let d = weights.dim();
        Self::new(weights, lattice_range(&vec![-r; d], &vec![r; d]))
    }

    pub fn index_of(&self, v: &Vertex) -> Option<usize> {
        self.index.get(v).copied()
    }

    pub fn cemetery(&self) -> usize {
        self.sites.len()
    }

    /// The lattice environment restricted to the sites.
    pub fn environment<E: Environment + ?Sized>(&self, env: &E) -> EnvironmentOnGraph {
        let mut probs = Vec::with_capacity(self.graph.edge_count());
        for v in &self.sites {
            probs.extend_from_slice(&env.transition(v));
        }
        EnvironmentOnGraph { probs }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dirichlet::kappa_report;
    use crate::rng::stream;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn two_vertex() -> FiniteGraph {
        FiniteGraph::new(2, vec![Edge { tail: 0, head: 1, weight: 2.0 }], None).unwrap()
    }

    #[test]
    fn divergence_examples() {
        let t = FiniteGraph::bidirected_cycle(3, 1.0);
        assert!((0..3).all(|x| t.divergence(x) == 0.0));
        let g = two_vertex();
        assert_eq!(g.divergence(0), 2.0);
        assert_eq!(g.divergence(1), -2.0);
    }

    #[test]
    fn rejects_bad_graphs() {
        assert!(FiniteGraph::new(2, vec![Edge { tail: 0, head: 1, weight: 0.0 }], None).is_err());
        assert!(FiniteGraph::new(2, vec![Edge { tail: 0, head: 2, weight: 1.0 }], None).is_err());
        assert!(FiniteGraph::new(2, vec![Edge { tail: 1, head: 0, weight: 1.0 }], Some(1)).is_err());
    }

    #[test]
    fn contraction_of_lattice_edge() {
        let w = Weights::uniform(3, 1.0).unwrap();
        let lg = LatticeGraph::cube(&w, 2).unwrap();
        let o = lg.index_of(&Vertex::ORIGIN).unwrap();
        let e1 = lg.index_of(&Vertex::axis(0, 1)).unwrap();
        let c = lg.graph.contract(&[o, e1]).unwrap();
        assert_eq!(c.graph.out_edges(c.merged).len(), 10);
        assert_eq!(c.graph.in_edges(c.merged).len(), 10);
        let mut before: Vec<f64> = lg.graph.edges().iter().filter(|e| (e.tail == o || e.tail == e1) != (e.head == o || e.head == e1)).map(|e| e.weight).collect();
        let mut after: Vec<f64> = c.graph.edges().iter().filter(|e| (e.tail == c.merged) != (e.head == c.merged)).map(|e| e.weight).collect();
        before.sort_by(f64::total_cmp);
        after.sort_by(f64::total_cmp);
        assert_eq!(before, after);
    }

    #[test]
    fn total_contraction() {
        let g = FiniteGraph::bidirected_cycle(5, 1.0);
        let c = g.contract(&[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(c.graph.vertex_count(), 1);
        assert_eq!(c.graph.edge_count(), 0);
        assert!(g.contract(&[0, 2]).is_err());
    }

    #[test]
    fn invariant_measure_examples() {
        let g = FiniteGraph::bidirected_cycle(2, 1.0);
        let omega = EnvironmentOnGraph::from_probs(&g, vec![1.0, 1.0]).unwrap();
        assert_eq!(invariant_measure(&g, &omega).unwrap(), vec![0.5, 0.5]);

        let c = FiniteGraph::bidirected_cycle(6, 1.0);
        let omega = EnvironmentOnGraph::from_probs(&c, vec![0.3, 0.7].repeat(6)).unwrap();
        for p in invariant_measure(&c, &omega).unwrap() {
            assert!((p - 1.0 / 6.0).abs() < 1e-14);
        }
    }

    #[test]
    fn reducible_chain_is_reported() {
        let g = FiniteGraph::new(3, vec![Edge { tail: 0, head: 1, weight: 1.0 }, Edge { tail: 1, head: 0, weight: 1.0 }, Edge { tail: 2, head: 0, weight: 1.0 }], None).unwrap();
        let omega = EnvironmentOnGraph::from_probs(&g, vec![1.0; 3]).unwrap();
        assert!(matches!(invariant_measure(&g, &omega), Err(Error::Reducible { vertex: 2, .. })));
    }

    fn random_graph(n: usize, seed: u64) -> FiniteGraph {
        let mut rng = stream(seed, &[]);
        let mut edges = Vec::new();
        for i in 0..n {
            edges.push(Edge { tail: i, head: (i + 1) % n, weight: rng.random_range(0.2..2.0) });
            for _ in 0..2 {
                let j = rng.random_range(0..n);
                edges.push(Edge { tail: i, head: j, weight: rng.random_range(0.2..2.0) });
            }
        }
        FiniteGraph::new(n, edges, None).unwrap()
    }

    #[test]
    fn invariant_measure_matches_occupation_frequencies() {
        let g = random_graph(5, 3);
        let mut rng = stream(4, &[]);
        let omega = EnvironmentOnGraph::sample(&g, &mut rng);
        let pi = invariant_measure(&g, &omega).unwrap();
        assert!(stationarity_residual(&g, &omega, &pi) < 1e-12);
        let mut counts = [0usize; 5];
        let mut x = 0;
        let steps = 1_000_000;
        for _ in 0..steps {
            counts[x] += 1;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let out = g.out_edges(x);
            let mut next = g.edge(*out.last().unwrap()).head;
            for &e in out {
                acc += omega.prob(e);
                if u < acc {
                    next = g.edge(e).head;
                    break;
                }
            }
            x = next;
        }
        for i in 0..5 {
            assert!((counts[i] as f64 / steps as f64 - pi[i]).abs() < 1e-2);
        }
    }

    #[test]
    fn power_iteration_agrees_with_dense_solve() {
        let g = random_graph(DENSE_LIMIT + 500, 31);
        let omega = EnvironmentOnGraph::sample(&g, &mut stream(32, &[]));
        let pi = invariant_measure(&g, &omega).unwrap();
        assert!(stationarity_residual(&g, &omega, &pi) < 1e-12);
        assert!(pi.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn reversal_of_reversible_chain_is_identity() {
        // A birth-death chain on a path is reversible.
        let edges = vec![
            Edge { tail: 0, head: 1, weight: 1.0 },
            Edge { tail: 1, head: 0, weight: 1.0 },
            Edge { tail: 1, head: 2, weight: 1.0 },
            Edge { tail: 2, head: 1, weight: 1.0 },
        ];
        let g = FiniteGraph::new(3, edges, None).unwrap();
        let omega = EnvironmentOnGraph::from_probs(&g, vec![1.0, 0.3, 0.7, 1.0]).unwrap();
        let (rg, rev) = reverse_environment(&g, &omega).unwrap();
        for x in 0..3 {
            for y in 0..3 {
                assert!((rev.transition(&rg, x, y) - omega.transition(&g, x, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn double_reversal_is_identity() {
        let g = random_graph(6, 8);
        let omega = EnvironmentOnGraph::sample(&g, &mut stream(9, &[]));
        let (rg, rev) = reverse_environment(&g, &omega).unwrap();
        let (_, back) = reverse_environment(&rg, &rev).unwrap();
        for e in 0..g.edge_count() {
            assert!((back.prob(e) - omega.prob(e)).abs() < 1e-10);
        }
    }

    #[test]
    fn null_divergence_survives_reversal() {
        let g = FiniteGraph::bidirected_cycle(4, 0.7);
        assert!(g.divergence_violations(1e-12).is_empty());
        assert!(g.reversed().unwrap().divergence_violations(1e-12).is_empty());
    }

    #[test]
    fn hitting_probabilities_match_simulation() {
        for seed in 0..3 {
            let g = random_graph(6, 100 + seed);
            let mut rng = stream(200 + seed, &[]);
            let omega = EnvironmentOnGraph::sample(&g, &mut rng);
            let h = absorption_probability(&g, &omega, &[5], &[4]).unwrap();
            let n = 20_000;
            let hits = (0..n)
                .filter(|_| {
                    let mut x = 0;
                    loop {
                        if x == 5 {
                            return true;
                        }
                        if x == 4 {
                            return false;
                        }
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let out = g.out_edges(x);
                        let mut next = g.edge(*out.last().unwrap()).head;
                        for &e in out {
                            acc += omega.prob(e);
                            if u < acc {
                                next = g.edge(e).head;
                                break;
                            }
                        }
                        x = next;
                    }
                })
                .count();
            let p = hits as f64 / n as f64;
            let se = (h[0] * (1.0 - h[0]) / n as f64).sqrt().max(1e-4);
            assert!((p - h[0]).abs() < 4.0 * se, "seed {seed}: {p} vs {}", h[0]);
        }
    }

    #[test]
    fn beta_bound_deterministic_two_cycle() {
        let g = FiniteGraph::bidirected_cycle(2, 1.0);
        let omega = EnvironmentOnGraph::from_probs(&g, vec![1.0, 1.0]).unwrap();
        assert_eq!(return_probability_beta_bound(&g, &omega, 0, 1).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn beta_bound_holds_on_triangle() {
        let g = FiniteGraph::bidirected_cycle(3, 1.0);
        let mut rng = stream(12, &[]);
        for _ in 0..1000 {
            let omega = EnvironmentOnGraph::sample(&g, &mut rng);
            let (lhs, rhs) = return_probability_beta_bound(&g, &omega, 0, 1).unwrap();
            assert!(lhs >= rhs - 1e-12, "{lhs} < {rhs}");
        }
    }

    #[test]
    fn edge_list_round_trip() {
        let text = "# triangle with an exit\na b 1.5\nb c 1\nc a 1\nc ∂ 0.5\n";
        let g = FiniteGraph::parse_edge_list(text).unwrap();
        assert_eq!(g.vertex_count(), 4);
        assert_eq!(g.cemetery(), Some(3));
        let again = FiniteGraph::parse_edge_list(&g.to_edge_list()).unwrap();
        assert_eq!(again.edges(), g.edges());
        assert!(matches!(FiniteGraph::parse_edge_list("a b"), Err(Error::Parse { line: 1, .. })));
        assert!(FiniteGraph::parse_edge_list("∂ a 1").is_err());
    }

    #[test]
    fn kappa_of_pairs_matches_closed_form() {
        for w in [Weights::uniform(3, 1.0).unwrap(), Weights::canonical()] {
            let lg = LatticeGraph::cube(&w, 2).unwrap();
            let o = lg.index_of(&Vertex::ORIGIN).unwrap();
            let r = kappa_report(&w);
            for j in 0..3 {
                let e = lg.index_of(&Vertex::axis(j, 1)).unwrap();
                let k = kappa_of_set(&lg.graph, o, &[o, e], &KappaSearch::default()).unwrap();
                assert_eq!(k, r.kappa_j[j]);
            }
        }
    }

    #[test]
    fn kappa_prime_exceeds_kappa() {
        let w = Weights::canonical();
        let lg = LatticeGraph::cube(&w, 2).unwrap();
        let o = lg.index_of(&Vertex::ORIGIN).unwrap();
        let kappa = kappa_report(&w).kappa;
        let sets: Vec<_> = connected_sets_containing(&lg.graph, o, 3).into_iter().filter(|s| s.len() == 3).collect();
        assert!(!sets.is_empty());
        let kp = sets.iter().map(|s| kappa_of_set(&lg.graph, o, s, &KappaSearch::default()).unwrap()).fold(f64::INFINITY, f64::min);
        assert!(kp > kappa, "{kp} <= {kappa}");
    }

    #[test]
    fn kappa_budget_is_enforced() {
        let w = Weights::uniform(3, 1.0).unwrap();
        let lg = LatticeGraph::cube(&w, 2).unwrap();
        let o = lg.index_of(&Vertex::ORIGIN).unwrap();
        let opts = KappaSearch { max_size: Some(6), radius: None, budget: 100 };
        assert_eq!(kappa_of_set(&lg.graph, o, &[o], &opts), Err(Error::BudgetExceeded { budget: 100 }));
    }

    proptest! {
        #[test]
        fn divergences_sum_to_zero(seed in any::<u64>(), n in 2usize..9) {
            let g = random_graph(n, seed);
            let s: f64 = (0..n).map(|x| g.divergence(x)).sum();
            prop_assert!(s.abs() < 1e-9);
        }

        #[test]
        fn contraction_preserves_incident_weight(seed in any::<u64>(), a in 0usize..6) {
            let g = random_graph(6, seed);
            let b = (a + 1) % 6;
            let c = g.contract(&[a, b]).unwrap();
            let outside = |x: usize| x != a && x != b;
            let before: f64 = g.edges().iter().filter(|e| outside(e.tail) != outside(e.head)).map(|e| e.weight).sum();
            let after: f64 = c.graph.edges().iter().filter(|e| (e.tail == c.merged) != (e.head == c.merged)).map(|e| e.weight).sum();
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn kappa_pairs_for_random_weights(alphas in proptest::collection::vec(0.05f64..3.0, 6)) {
            let w = Weights::new(alphas).unwrap();
            let lg = LatticeGraph::cube(&w, 1).unwrap();
            let o = lg.index_of(&Vertex::ORIGIN).unwrap();
            let r = kappa_report(&w);
            for j in 0..3 {
                let e = lg.index_of(&Vertex::axis(j, 1)).unwrap();
                let opts = KappaSearch { max_size: Some(2), ..Default::default() };
                prop_assert_eq!(kappa_of_set(&lg.graph, o, &[o, e], &opts).unwrap(), r.kappa_j[j]);
            }
        }
    }
}
