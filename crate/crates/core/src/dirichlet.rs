//! Dirichlet weights, sampling, tail exponents and the moment calculus of
//! Dirichlet environments on finite graphs.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{domain, Result};
use crate::graph::{EnvironmentOnGraph, FiniteGraph};

/// Sum of a multiset of reals that does not depend on the order in which the
/// values are given: the values are sorted ascending before summation.
///
/// Exponents computed from the same edge weights through different routes
/// (closed form vs. set enumeration) compare bit-exactly through this.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().fold(0.0, |acc, x| acc + x)
}

/// The `2d` edge parameters of a translation-invariant Dirichlet environment
/// on `Z^d`. Index `i < d` is the direction `+e_{i+1}`, index `i + d` is
/// `-e_{i+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Weights {
    alphas: Vec<f64>,
}

impl Weights {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() || !alphas.len().is_multiple_of(2) {
            return domain(format!("expected 2d weights, got {}", alphas.len()));
        }
        if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return domain(format!("weights must be finite and positive, got {a}"));
        }
        Ok(Self { alphas })
    }

    /// All `2d` weights equal to `value`.
    pub fn uniform(dim: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; 2 * dim])
    }

    /// `d = 3`, `alpha = (1.3, 0.05, 0.05, 0.05, 0.05, 0.05)`: `kappa = 1.75`,
    /// drift along `e_1`, condition (T) criterion satisfied.
    pub fn canonical() -> Self {
        Self::new(vec![1.3, 0.05, 0.05, 0.05, 0.05, 0.05]).expect("valid weights")
    }

    pub fn dim(&self) -> usize {
        self.alphas.len() / 2
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, direction: usize) -> f64 {
        self.alphas[direction]
    }

    /// `alpha_0`, the total weight leaving a vertex.
    pub fn total(&self) -> f64 {
        exact_sum(self.alphas.iter().copied())
    }

    /// `sum_j |alpha_j - alpha_{j+d}|`; condition (T) holds when this exceeds 1.
    pub fn condition_t_sum(&self) -> f64 {
        let d = self.dim();
        (0..d).map(|j| (self.alphas[j] - self.alphas[j + d]).abs()).sum()
    }

    pub fn satisfies_condition_t(&self) -> bool {
        self.condition_t_sum() > 1.0
    }

    /// Direction index opposite to `direction`.
    pub fn opposite(&self, direction: usize) -> usize {
        let d = self.dim();
        if direction < d {
            direction + d
        } else {
            direction - d
        }
    }
}

impl TryFrom<Vec<f64>> for Weights {
    type Error = crate::error::Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Weights> for Vec<f64> {
    fn from(w: Weights) -> Self {
        w.alphas
    }
}

/// Tail exponents and drift of a set of lattice weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KappaReport {
    pub kappa_j: Vec<f64>,
    pub kappa: f64,
    pub d_alpha: Vec<f64>,
    pub sum_alpha: f64,
}

impl KappaReport {
    /// Index `j` (0-based) of the weakest direction, the first minimizer.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (j, &k) in self.kappa_j.iter().enumerate() {
            if k < self.kappa_j[best] {
                best = j;
            }
        }
        best
    }

    /// `d_alpha / |d_alpha|`, or `None` when the drift vanishes.
    pub fn drift_direction(&self) -> Option<Vec<f64>> {
        let norm = self.d_alpha.iter().map(|x| x * x).sum::<f64>().sqrt();
        (norm > 0.0).then(|| self.d_alpha.iter().map(|x| x / norm).collect())
    }
}

/// `kappa_j = 2 sum_i alpha_i - (alpha_j + alpha_{j+d})`, `kappa = min_j kappa_j`,
/// `d_alpha = sum_i alpha_i e_i`.
///
/// `kappa_j` is evaluated as the total weight leaving the pair `{0, e_j}`,
/// i.e. the order-independent sum of every weight except `alpha_j` at the
/// origin and every weight except `alpha_{j+d}` at `e_j`.
pub fn kappa_report(w: &Weights) -> KappaReport {
    let d = w.dim();
    let a = w.alphas();
    let kappa_j: Vec<f64> = (0..d)
        .map(|j| {
            let from_origin = a.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, x)| *x);
            let from_neighbor = a.iter().enumerate().filter(|(i, _)| *i != j + d).map(|(_, x)| *x);
            exact_sum(from_origin.chain(from_neighbor))
        })
        .collect();
    let kappa = kappa_j.iter().copied().fold(f64::INFINITY, f64::min);
    let d_alpha = (0..d).map(|j| a[j] - a[j + d]).collect();
    KappaReport { kappa_j, kappa, d_alpha, sum_alpha: w.total() }
}

/// `ln G` for `G ~ Gamma(shape, 1)`.
///
/// Marsaglia-Tsang squeeze for `shape >= 1`; for `shape < 1` the boost
/// `G(shape) = G(shape + 1) U^{1/shape}` is applied in log space so that tiny
/// shapes never underflow.
pub fn sample_ln_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0);
    if shape < 1.0 {
        let u: f64 = 1.0 - rng.random::<f64>();
        return sample_ln_gamma(shape + 1.0, rng) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let t = 1.0 + c * x;
        if t <= 0.0 {
            continue;
        }
        let v = t * t * t;
        let u: f64 = 1.0 - rng.random::<f64>();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d.ln() + v.ln();
        }
    }
}

/// Draws `Dirichlet(alphas)` into `out` by normalizing Gamma variables.
///
/// Entries are strictly positive, and their left-to-right floating sum is
/// exactly `1.0`.
pub fn sample_dirichlet_into<R: Rng + ?Sized>(alphas: &[f64], rng: &mut R, out: &mut [f64]) -> Result<()> {
    if alphas.len() != out.len() {
        return domain("output length differs from parameter length");
    }
    if alphas.is_empty() {
        return domain("empty Dirichlet parameter");
    }
    if let Some(a) = alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return domain(format!("Dirichlet parameters must be positive, got {a}"));
    }
    for (o, &a) in out.iter_mut().zip(alphas) {
        *o = sample_ln_gamma(a, rng);
    }
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for o in out.iter_mut() {
        *o = (*o - max).exp();
    }
    let total: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o = (*o / total).max(f64::MIN_POSITIVE);
    }
    close_simplex(out);
    Ok(())
}

pub fn sample_dirichlet<R: Rng + ?Sized>(alphas: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let mut out = vec![0.0; alphas.len()];
    sample_dirichlet_into(alphas, rng, &mut out)?;
    Ok(out)
}

/// Adjusts entries until the left-to-right floating sum is exactly one.
pub(crate) fn close_simplex(p: &mut [f64]) {
    let imax = p
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let total = |p: &[f64]| p.iter().sum::<f64>();
    for _ in 0..4 {
        let t = total(p);
        if t == 1.0 {
            return;
        }
        p[imax] += 1.0 - t;
    }
    // The sum is monotone in each entry: walk the largest one ulp by ulp.
    let orig = p[imax];
    for dir in [1.0f64, -1.0] {
        p[imax] = orig;
        for _ in 0..64 {
            let t = total(p);
            if t == 1.0 {
                return;
            }
            if (t < 1.0) != (dir > 0.0) {
                break;
            }
            p[imax] = if dir > 0.0 { p[imax].next_up() } else { p[imax].next_down() };
        }
    }
    p[imax] = orig;
    // For any s in [0, 1), fl(s + fl(1 - s)) = 1: refill the last entry.
    let n = p.len();
    if n == 1 {
        p[0] = 1.0;
        return;
    }
    let big = (0..n - 1).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0);
    while total(&p[..n - 1]) >= 1.0 {
        p[big] = p[big].next_down();
    }
    p[n - 1] = 1.0 - total(&p[..n - 1]);
}

/// Per-edge exponents `xi(e)` on a finite graph, indexed like the graph's
/// edge list.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeExponents(pub Vec<f64>);

impl EdgeExponents {
    pub fn zeros(graph: &FiniteGraph) -> Self {
        Self(vec![0.0; graph.edge_count()])
    }

    /// `xi(x) = sum of xi(e) over edges leaving x`.
    pub fn vertex_total(&self, graph: &FiniteGraph, x: usize) -> f64 {
        graph.out_edges(x).iter().map(|&e| self.0[e]).sum()
    }
}

/// A positive quantity carried in log space, or `+inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Moment {
    Finite { ln_value: f64 },
    Infinite,
}

impl Moment {
    pub fn value(self) -> f64 {
        match self {
            Moment::Finite { ln_value } => ln_value.exp(),
            Moment::Infinite => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Moment::Finite { .. })
    }
}

/// `ln Z_theta = sum_e ln Gamma(theta(e)) - sum_x ln Gamma(theta(x))`; vertices
/// without outgoing edges contribute nothing. All entries must be positive.
fn ln_partition(graph: &FiniteGraph, theta: &[f64]) -> f64 {
    let edges: f64 = theta.iter().map(|&t| ln_gamma(t)).sum();
    let vertices: f64 = (0..graph.vertex_count())
        .filter(|&x| !graph.out_edges(x).is_empty())
        .map(|x| ln_gamma(graph.out_edges(x).iter().map(|&e| theta[e]).sum()))
        .sum();
    edges - vertices
}

fn shifted_weights(graph: &FiniteGraph, xi: &EdgeExponents) -> Result<Option<Vec<f64>>> {
    if xi.0.len() != graph.edge_count() {
        return domain("exponent vector length differs from edge count");
    }
    let theta: Vec<f64> = graph.edges().iter().zip(&xi.0).map(|(e, x)| e.weight + x).collect();
    Ok(theta.iter().all(|&t| t > 0.0).then_some(theta))
}

/// `E^(alpha)[prod_e omega(e)^xi(e)] = Z_{alpha+xi} / Z_alpha`, or
/// [`Moment::Infinite`] when `alpha(e) + xi(e) <= 0` on some edge.
pub fn joint_moment(graph: &FiniteGraph, xi: &EdgeExponents) -> Result<Moment> {
    let Some(theta) = shifted_weights(graph, xi)? else {
        return Ok(Moment::Infinite);
    };
    let alpha: Vec<f64> = graph.edges().iter().map(|e| e.weight).collect();
    Ok(Moment::Finite { ln_value: ln_partition(graph, &theta) - ln_partition(graph, &alpha) })
}

/// Radon-Nikodym weight `dP^(alpha) / dP^(alpha+xi)` at `omega`:
/// `(Z_alpha / Z_{alpha+xi}) prod_e omega(e)^{-xi(e)}`.
///
/// Returns [`Moment::Infinite`] when some `omega(e) = 0` carries `xi(e) > 0`.
pub fn measure_change_weight(graph: &FiniteGraph, xi: &EdgeExponents, omega: &EnvironmentOnGraph) -> Result<Moment> {
    let Some(theta) = shifted_weights(graph, xi)? else {
        return domain("alpha + xi must be positive on every edge");
    };
    let alpha: Vec<f64> = graph.edges().iter().map(|e| e.weight).collect();
    let mut ln_w = ln_partition(graph, &alpha) - ln_partition(graph, &theta);
    for (e, &x) in xi.0.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let w = omega.prob(e);
        if w == 0.0 {
            if x > 0.0 {
                return Ok(Moment::Infinite);
            }
            return Ok(Moment::Finite { ln_value: f64::NEG_INFINITY });
        }
        ln_w -= x * w.ln();
    }
    if ln_w.is_nan() || ln_w == f64::INFINITY {
        return Ok(Moment::Infinite);
    }
    Ok(Moment::Finite { ln_value: ln_w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn rejects_bad_weights() {
        assert!(Weights::new(vec![1.0, 1.0, 1.0]).is_err());
        assert!(Weights::new(vec![1.0, 0.0]).is_err());
        assert!(Weights::new(vec![1.0, -2.0]).is_err());
        assert!(Weights::new(vec![]).is_err());
    }

    #[test]
    fn kappa_all_ones_d3() {
        let r = kappa_report(&Weights::uniform(3, 1.0).unwrap());
        assert_eq!(r.kappa_j, vec![10.0, 10.0, 10.0]);
        assert_eq!(r.kappa, 10.0);
        assert_eq!(r.d_alpha, vec![0.0, 0.0, 0.0]);
        assert!(r.drift_direction().is_none());
    }

    #[test]
    fn kappa_canonical_regime() {
        let w = Weights::canonical();
        let r = kappa_report(&w);
        assert!((r.kappa_j[0] - 1.75).abs() < 1e-12);
        assert!((r.kappa_j[1] - 3.0).abs() < 1e-12);
        assert!((r.kappa_j[2] - 3.0).abs() < 1e-12);
        assert_eq!(r.kappa, r.kappa_j[0]);
        assert!((r.d_alpha[0] - 1.25).abs() < 1e-12);
        assert_eq!(&r.d_alpha[1..], &[0.0, 0.0]);
        assert!((w.condition_t_sum() - 1.25).abs() < 1e-12);
        assert!(w.satisfies_condition_t());
        assert_eq!(r.argmin(), 0);
    }

    #[test]
    fn single_component_dirichlet_is_one() {
        let mut rng = stream(1, &[]);
        assert_eq!(sample_dirichlet(&[3.0], &mut rng).unwrap(), vec![1.0]);
    }

    #[test]
    fn dirichlet_rejects_nonpositive() {
        let mut rng = stream(1, &[]);
        assert!(sample_dirichlet(&[1.0, 0.0], &mut rng).is_err());
        assert!(sample_dirichlet(&[1.0, f64::NAN], &mut rng).is_err());
    }

    #[test]
    fn tiny_shapes_stay_positive_and_closed() {
        let mut rng = stream(2, &[]);
        let alphas = [0.01, 0.01, 0.01, 0.01];
        for _ in 0..20_000 {
            let p = sample_dirichlet(&alphas, &mut rng).unwrap();
            assert!(p.iter().all(|&x| x > 0.0));
            assert_eq!(p.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn gamma_mean_matches_shape() {
        let mut rng = stream(3, &[]);
        for shape in [0.05, 0.5, 1.0, 2.5, 9.0] {
            let n = 200_000;
            let xs: Vec<f64> = (0..n).map(|_| sample_ln_gamma(shape, &mut rng).exp()).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            // Var = shape.
            let se = (shape / n as f64).sqrt();
            assert!((mean - shape).abs() < 5.0 * se, "shape {shape}: mean {mean}");
        }
    }

    #[test]
    fn zero_exponent_moment_is_one() {
        let g = FiniteGraph::bidirected_cycle(4, 1.3);
        let m = joint_moment(&g, &EdgeExponents::zeros(&g)).unwrap();
        assert!((m.value() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn beta_one_one_first_moment() {
        let g = FiniteGraph::star(&[1.0, 1.0]);
        let m = joint_moment(&g, &EdgeExponents(vec![1.0, 0.0])).unwrap();
        assert!((m.value() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn second_moment_closed_form() {
        // Gamma(4) Gamma(4) / (Gamma(2) Gamma(6)) = 36 / 120.
        let g = FiniteGraph::star(&[2.0, 1.0, 1.0]);
        let m = joint_moment(&g, &EdgeExponents(vec![2.0, 0.0, 0.0])).unwrap();
        assert!((m.value() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_shift_is_infinite() {
        let g = FiniteGraph::star(&[1.0, 1.0]);
        assert_eq!(joint_moment(&g, &EdgeExponents(vec![-1.0, 0.0])).unwrap(), Moment::Infinite);
        assert_eq!(joint_moment(&g, &EdgeExponents(vec![-1.5, 0.0])).unwrap(), Moment::Infinite);
    }

    #[test]
    fn measure_change_hand_value() {
        // Z_alpha / Z_{alpha+xi} = 1 / 0.5 and 0.5^{-1} = 2.
        let g = FiniteGraph::star(&[1.0, 1.0]);
        let omega = EnvironmentOnGraph::from_probs(&g, vec![0.5, 0.5]).unwrap();
        let w = measure_change_weight(&g, &EdgeExponents(vec![1.0, 0.0]), &omega).unwrap();
        assert!((w.value() - 4.0).abs() < 1e-12);
        let w0 = measure_change_weight(&g, &EdgeExponents::zeros(&g), &omega).unwrap();
        assert_eq!(w0.value(), 1.0);
    }

    #[test]
    fn measure_change_overflow_signal() {
        let g = FiniteGraph::star(&[1.0, 1.0]);
        let omega = EnvironmentOnGraph::from_probs(&g, vec![0.0, 1.0]).unwrap();
        let w = measure_change_weight(&g, &EdgeExponents(vec![1.0, 0.0]), &omega).unwrap();
        assert_eq!(w, Moment::Infinite);
    }
}
