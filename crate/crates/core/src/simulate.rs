//! Ground-truth generation: graphs, sign-flipped precision matrices, identifiable hidden
//! sets, hidden-strength scaling and Gaussian samples.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::PartitionedPrecision;
use crate::graph::{Graph, SpanningTree};
use crate::linalg;
use crate::seed::{derive_seed, rng_from_seed};

/// Diagonal dominance margin added on top of the absolute row sums.
pub const DEFAULT_MARGIN: f64 = 0.1;
/// Probability of flipping the sign of an edge weight.
pub const DEFAULT_FLIP: f64 = 0.5;
/// Entries of the marginal precision at or below this magnitude are not edges.
pub const ZERO_THRESHOLD: f64 = 1e-10;
/// Enumerate identifiable hidden sets up to this many, then switch to rejection sampling.
const MAX_ENUMERATED_SETS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Topology {
    Tree,
    Erdos { p_edge: f64 },
}

/// Uniform labeled tree (random Prüfer code) or Erdős–Rényi `G(size, p_edge)`.
pub fn gen_graph(kind: Topology, size: usize, seed: u64) -> Result<Graph> {
    if size < 2 {
        return Err(Error::InvalidInput(alloc::format!("graph needs at least two nodes, got {size}")));
    }
    let mut rng = rng_from_seed(seed);
    match kind {
        Topology::Tree => Ok(random_tree(size, &mut rng).to_graph()),
        Topology::Erdos { p_edge } => {
            if !(p_edge > 0.0 && p_edge < 1.0) {
                return Err(Error::InvalidInput(alloc::format!("edge probability {p_edge} outside (0, 1)")));
            }
            let mut g = Graph::empty(size);
            for i in 0..size {
                for j in (i + 1)..size {
                    if rng.random_bool(p_edge) {
                        g.add_edge(i, j)?;
                    }
                }
            }
            Ok(g)
        }
    }
}

fn random_tree(size: usize, rng: &mut impl Rng) -> SpanningTree {
    if size == 2 {
        return SpanningTree::new(2, vec![(0, 1)]).expect("single edge");
    }
    let code: Vec<usize> = (0..size - 2).map(|_| rng.random_range(0..size)).collect();
    SpanningTree::from_prufer(size, &code).expect("valid code")
}

/// Precision supported on `g`: edge weights ±1 (flipped with probability `flip`),
/// diagonal = absolute row sum + `margin`.
pub fn gen_precision(g: &Graph, seed: u64, margin: f64, flip: f64) -> DMatrix<f64> {
    let n = g.size();
    let mut rng = rng_from_seed(seed);
    let mut k: DMatrix<f64> = DMatrix::zeros(n, n);
    for (i, j) in g.edges() {
        let w = if rng.random_bool(flip) { -1.0 } else { 1.0 };
        k[(i, j)] = w;
        k[(j, i)] = w;
    }
    for i in 0..n {
        let row: f64 = (0..n).filter(|&j| j != i).map(|j| k[(i, j)].abs()).sum();
        k[(i, i)] = row + margin;
    }
    k
}

fn independent_sets(candidates: &[usize], g: &Graph, r: usize, limit: usize) -> Option<Vec<Vec<usize>>> {
    fn rec(
        start: usize,
        candidates: &[usize],
        g: &Graph,
        r: usize,
        current: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
        limit: usize,
    ) -> bool {
        if current.len() == r {
            out.push(current.clone());
            return out.len() <= limit;
        }
        for idx in start..candidates.len() {
            let v = candidates[idx];
            if current.iter().all(|&u| !g.has_edge(u, v)) {
                current.push(v);
                let ok = rec(idx + 1, candidates, g, r, current, out, limit);
                current.pop();
                if !ok {
                    return false;
                }
            }
        }
        true
    }
    let mut out = Vec::new();
    let mut current = Vec::new();
    rec(0, candidates, g, r, &mut current, &mut out, limit).then_some(out)
}

/// Uniformly random identifiable hidden set: pairwise non-adjacent nodes of degree at least 3.
pub fn choose_hidden(g: &Graph, r: usize, seed: u64) -> Result<Vec<usize>> {
    if r == 0 {
        return Ok(Vec::new());
    }
    let candidates: Vec<usize> = (0..g.size()).filter(|&v| g.degree(v) >= 3).collect();
    let mut rng = rng_from_seed(seed);
    match independent_sets(&candidates, g, r, MAX_ENUMERATED_SETS) {
        Some(sets) if sets.is_empty() => Err(Error::InfeasibleHiddenSet { r }),
        Some(sets) => Ok(sets[rng.random_range(0..sets.len())].clone()),
        None => {
            // Too many sets to list: uniform r-subsets of candidates, rejected until independent.
            let mut pool = candidates.clone();
            loop {
                pool.shuffle(&mut rng);
                let mut pick = pool[..r].to_vec();
                if pick.iter().enumerate().all(|(a, &u)| pick[a + 1..].iter().all(|&v| !g.has_edge(u, v))) {
                    pick.sort_unstable();
                    return Ok(pick);
                }
            }
        }
    }
}

/// Checks the identifiability conditions on a hidden set.
pub fn is_identifiable(g: &Graph, hidden: &[usize]) -> bool {
    hidden.iter().all(|&h| h < g.size() && g.degree(h) >= 3)
        && hidden.iter().enumerate().all(|(a, &u)| hidden[a + 1..].iter().all(|&v| u != v && !g.has_edge(u, v)))
}

/// `‖ε K_OH K_H⁻¹ K_HO‖₂² / ‖K_O‖₂²`, the strength of the hidden block at scale `ε`.
pub fn snr(k: &PartitionedPrecision, epsilon: f64) -> Result<f64> {
    if k.hidden() == 0 {
        return Ok(0.0);
    }
    let term = schur_term(k)? * epsilon;
    let num = linalg::spectral_norm(&term);
    let den = linalg::spectral_norm(&k.observed_block());
    Ok(num * num / (den * den))
}

fn schur_term(k: &PartitionedPrecision) -> Result<DMatrix<f64>> {
    let k_ho = k.hidden_observed_block();
    let solved = k.hidden_block().lu().solve(&k_ho).ok_or(Error::SingularPrecision)?;
    let mut t = k_ho.transpose() * solved;
    linalg::symmetrize(&mut t);
    Ok(t)
}

/// Result of [`scale_and_snr`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledPrecision {
    pub k: PartitionedPrecision,
    /// SNR of the scaled blocks against the unloaded `K_O`; exactly quadratic in `ε`.
    pub snr: f64,
    /// SNR against the `K_O` actually used, after any reload.
    pub effective_snr: f64,
    /// Constant added to the observed diagonal to restore positive definiteness (0 if none).
    pub reload: f64,
}

/// `K(ε) = [[K_O, ε K_OH], [ε K_HO, ε K_H]]`; reloads the observed diagonal when `K(ε)` is not
/// positive definite so that its Schur complement keeps smallest eigenvalue `margin`.
pub fn scale_and_snr(k: &PartitionedPrecision, epsilon: f64, margin: f64) -> Result<ScaledPrecision> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidInput(alloc::format!("scale {epsilon} must be positive")));
    }
    let (p, d) = (k.observed(), k.dim());
    let mut m = k.matrix().clone();
    for i in 0..d {
        for j in 0..d {
            if i >= p || j >= p {
                m[(i, j)] *= epsilon;
            }
        }
    }
    let nominal = snr(k, epsilon)?;
    let mut reload = 0.0;
    if k.hidden() > 0 {
        let scaled = PartitionedPrecision::new(m.clone(), p)?;
        if !scaled.is_positive_definite() {
            let lambda_min = linalg::min_eigenvalue(&scaled.marginal_precision()?);
            reload = margin - lambda_min;
            for i in 0..p {
                m[(i, i)] += reload;
            }
        }
    }
    let k_eps = PartitionedPrecision::new(m, p)?;
    if !k_eps.is_positive_definite() {
        return Err(Error::NotPositiveDefinite);
    }
    let effective = snr(&k_eps, 1.0)?;
    Ok(ScaledPrecision { k: k_eps, snr: nominal, effective_snr: effective, reload })
}

/// `n` draws from `N(0, K⁻¹)`, one per row.
pub fn sample(k: &DMatrix<f64>, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    let sigma = linalg::spd_inverse(k).ok_or(Error::NotPositiveDefinite)?;
    let l = sigma.cholesky().ok_or(Error::NotPositiveDefinite)?.l();
    let mut rng = rng_from_seed(seed);
    let z = DMatrix::from_fn(n, k.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(z * l.transpose())
}

/// Full samples and the observed columns (the first `p`).
pub fn sample_and_marginalize(k: &PartitionedPrecision, n: usize, seed: u64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let full = sample(k.matrix(), n, seed)?;
    let observed = full.columns(0, k.observed()).into_owned();
    Ok((full, observed))
}

/// Graph of the nonzero pattern of the marginal precision `K_O - K_OH K_H⁻¹ K_HO`.
pub fn marginal_graph(k: &PartitionedPrecision) -> Result<(Graph, DMatrix<f64>)> {
    let km = k.marginal_precision()?;
    let p = k.observed();
    let mut g = Graph::empty(p);
    for i in 0..p {
        for j in (i + 1)..p {
            if km[(i, j)].abs() > ZERO_THRESHOLD {
                g.add_edge(i, j)?;
            }
        }
    }
    Ok((g, km))
}

/// Node order placing observed nodes first (ascending) and hidden nodes last (ascending).
pub fn observed_first_order(size: usize, hidden: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..size).filter(|v| !hidden.contains(v)).collect();
    let mut h = hidden.to_vec();
    h.sort_unstable();
    order.extend(h);
    order
}

/// The tree used to illustrate marginalization: nodes 1..9 become 0..8 and the hub is 9.
pub fn hub_tree() -> Graph {
    let edges = [(0, 2), (1, 2), (2, 3), (3, 4), (3, 5), (5, 9), (6, 9), (7, 9), (7, 8)];
    Graph::from_edges(10, &edges).expect("static edge list")
}

/// Parameters that fully determine one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthSpec {
    pub topology: Topology,
    /// Observed node count.
    pub p: usize,
    /// Hidden node count.
    pub r: usize,
    pub epsilon: f64,
    pub margin: f64,
    pub flip: f64,
    pub seed: u64,
}

impl TruthSpec {
    pub fn new(topology: Topology, p: usize, r: usize, epsilon: f64, seed: u64) -> Self {
        Self { topology, p, r, epsilon, margin: DEFAULT_MARGIN, flip: DEFAULT_FLIP, seed }
    }
}

/// A simulated model with observed nodes relabeled to `0..p` and hidden nodes to `p..p+r`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Full graph in the relabeled order.
    pub graph: Graph,
    /// `order[new] = original label`.
    pub order: Vec<usize>,
    pub k: PartitionedPrecision,
    pub marginal_graph: Graph,
    pub k_marginal: DMatrix<f64>,
    pub epsilon: f64,
    pub snr: f64,
    pub effective_snr: f64,
    pub reload: f64,
    pub seed: u64,
}

impl GroundTruth {
    pub fn observed(&self) -> usize {
        self.k.observed()
    }

    pub fn hidden(&self) -> usize {
        self.k.hidden()
    }
}

/// Builds the ground truth for a given full graph and hidden set.
pub fn truth_from_graph(
    graph: &Graph,
    hidden: &[usize],
    epsilon: f64,
    margin: f64,
    flip: f64,
    seed: u64,
) -> Result<GroundTruth> {
    if !is_identifiable(graph, hidden) {
        return Err(Error::InfeasibleHiddenSet { r: hidden.len() });
    }
    let size = graph.size();
    let k = gen_precision(graph, derive_seed(seed, 3), margin, flip);
    let order = observed_first_order(size, hidden);
    let permuted = DMatrix::from_fn(size, size, |a, b| k[(order[a], order[b])]);
    let p = size - hidden.len();
    let base = PartitionedPrecision::new(permuted, p)?;
    let scaled = if hidden.is_empty() {
        ScaledPrecision { k: base, snr: 0.0, effective_snr: 0.0, reload: 0.0 }
    } else {
        scale_and_snr(&base, epsilon, margin)?
    };
    let (marginal_graph, k_marginal) = marginal_graph(&scaled.k)?;
    Ok(GroundTruth {
        graph: graph.permuted(&order),
        order,
        k: scaled.k,
        marginal_graph,
        k_marginal,
        epsilon,
        snr: scaled.snr,
        effective_snr: scaled.effective_snr,
        reload: scaled.reload,
        seed,
    })
}

/// Draws a replicate: graph on `p + r` nodes, identifiable hidden set, precision, scaling.
pub fn generate_truth(spec: &TruthSpec) -> Result<GroundTruth> {
    let size = spec.p + spec.r;
    let graph = gen_graph(spec.topology, size, derive_seed(spec.seed, 1))?;
    let hidden = choose_hidden(&graph, spec.r, derive_seed(spec.seed, 2))?;
    truth_from_graph(&graph, &hidden, spec.epsilon, spec.margin, spec.flip, spec.seed)
}
