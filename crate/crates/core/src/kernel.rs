//! Exact computations over multiplicative distributions on spanning trees.
//!
//! A symmetric nonnegative weight matrix `W` induces `P(T) ∝ ∏_{ij ∈ T} w_ij`.
//! The normalizing constant is any first minor of the weighted Laplacian, and
//! every edge marginal follows from a single inverse of the grounded Laplacian:
//! `P(kl ∈ T) = w_kl (G_kk + G_ll - 2 G_kl)` where `G` is the inverse of the
//! Laplacian with one row and column removed, re-embedded with zeros.
//!
//! Weights are handled in log space. Before factorizing, the log-weights are
//! shifted so the largest weight is one; the shift is added back to `log Z`
//! with multiplicity `size - 1`. When the weights span more than the `f64`
//! exponent range, a slower elimination carried out entirely in log space
//! takes over.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::{DisjointSet, SpanningTree};
use crate::linalg;
use crate::math;

/// Per-pair real scores (priors, conditional weights, posteriors). Symmetric, diagonal unused.
pub type EdgeScores = DMatrix<f64>;

/// Largest node count accepted by [`enumerate_trees`].
pub const MAX_ENUMERATION_SIZE: usize = 8;

/// Symmetric nonnegative weights with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidWeights("matrix is not square"));
        }
        if m.nrows() < 2 {
            return Err(Error::InvalidWeights("fewer than two nodes"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidWeights("non-finite entry"));
        }
        if m.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidWeights("negative entry"));
        }
        if (0..m.nrows()).any(|i| m[(i, i)] != 0.0) {
            return Err(Error::InvalidWeights("nonzero diagonal"));
        }
        if !linalg::is_symmetric(&m, 1e-12) {
            return Err(Error::InvalidWeights("matrix is not symmetric"));
        }
        Ok(Self(m))
    }

    /// Builds from a closure over `i < j`; the diagonal is zero.
    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut m = DMatrix::zeros(size, size);
        for i in 0..size {
            for j in (i + 1)..size {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self::new(m)
    }

    pub fn uniform(size: usize, value: f64) -> Result<Self> {
        Self::from_fn(size, |_, _| value)
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Entry-wise natural log; zero weights map to `-inf`.
    pub fn ln_weights(&self) -> DMatrix<f64> {
        let n = self.size();
        DMatrix::from_fn(n, n, |i, j| {
            let w = self.0[(i, j)];
            if i == j || w == 0.0 {
                f64::NEG_INFINITY
            } else {
                math::ln(w)
            }
        })
    }
}

/// Weighted graph Laplacian: `-w_ij` off the diagonal, weighted degree on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian(DMatrix<f64>);

impl Laplacian {
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// The matrix with row `u` and column `v` removed.
    pub fn minor(&self, u: usize, v: usize) -> DMatrix<f64> {
        self.0.clone().remove_row(u).remove_column(v)
    }

    /// Signed cofactor `(-1)^{u+v} det(minor(u, v))`; equal to `Z(W)` for every `(u, v)`.
    pub fn cofactor(&self, u: usize, v: usize) -> f64 {
        let sign = if (u + v) % 2 == 0 { 1.0 } else { -1.0 };
        sign * self.minor(u, v).determinant()
    }
}

pub fn build_laplacian(w: &WeightMatrix) -> Laplacian {
    Laplacian(laplacian_of(w.as_matrix()))
}

fn laplacian_of(w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let mut lap = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut deg = 0.0;
        for j in 0..n {
            if i != j {
                lap[(i, j)] = -w[(i, j)];
                deg += w[(i, j)];
            }
        }
        lap[(i, i)] = deg;
    }
    lap
}

/// Edge marginals together with the log partition function.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeMarginals {
    /// `P(kl ∈ T)`, symmetric with zero diagonal.
    pub marginals: EdgeScores,
    /// `log Z(W)`; `-inf` when no spanning tree has positive weight.
    pub log_z: f64,
}

impl TreeMarginals {
    pub fn is_degenerate(&self) -> bool {
        self.log_z == f64::NEG_INFINITY
    }
}

fn finite_support_connected(log_w: &DMatrix<f64>, positive: impl Fn(usize, usize) -> bool) -> bool {
    let n = log_w.nrows();
    let mut ds = DisjointSet::new(n);
    let mut components = n;
    for i in 0..n {
        for j in (i + 1)..n {
            if positive(i, j) && ds.union(i, j) {
                components -= 1;
            }
        }
    }
    components == 1
}

fn check_log_weights(log_w: &DMatrix<f64>) -> Result<()> {
    if !log_w.is_square() || log_w.nrows() < 2 {
        return Err(Error::InvalidWeights("need a square matrix with at least two nodes"));
    }
    let n = log_w.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (log_w[(i, j)], log_w[(j, i)]);
            if a.is_nan() || a == f64::INFINITY || b.is_nan() || b == f64::INFINITY {
                return Err(Error::InvalidWeights("log-weight is NaN or +inf"));
            }
            let tol = 1e-12 * a.abs().max(1.0);
            if a != b && !((a - b).abs() <= tol) {
                return Err(Error::InvalidWeights("matrix is not symmetric"));
            }
        }
    }
    Ok(())
}

/// Core engine: edge marginals and `log Z` from log-weights (`-inf` marks absent edges).
///
/// The diagonal of `log_w` is ignored.
pub fn tree_marginals_from_log(log_w: &DMatrix<f64>) -> Result<TreeMarginals> {
    check_log_weights(log_w)?;
    let n = log_w.nrows();
    let finite = |i: usize, j: usize| log_w[(i, j)] > f64::NEG_INFINITY;
    if !finite_support_connected(log_w, finite) {
        return Ok(TreeMarginals { marginals: DMatrix::zeros(n, n), log_z: f64::NEG_INFINITY });
    }
    match factorized_marginals(log_w) {
        Ok(m) => Ok(m),
        Err(Error::DegenerateWeights { .. }) => log_domain_marginals(log_w),
        Err(e) => Err(e),
    }
}

/// Grounded Laplacians with a squared pivot ratio below this go to [`log_domain_marginals`].
pub const PIVOT_FALLBACK: f64 = 1e-8;

fn factorized_marginals(log_w: &DMatrix<f64>) -> Result<TreeMarginals> {
    let n = log_w.nrows();
    let finite = |i: usize, j: usize| log_w[(i, j)] > f64::NEG_INFINITY;

    let mut shift = f64::NEG_INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            shift = shift.max(log_w[(i, j)]);
        }
    }
    let w = DMatrix::from_fn(n, n, |i, j| {
        if i == j || !finite(i, j) {
            0.0
        } else {
            math::exp(log_w[(i, j)] - shift)
        }
    });
    if !finite_support_connected(&w, |i, j| w[(i, j)] > 0.0) {
        // Some connectivity-critical weight underflowed after rescaling.
        return Err(Error::DegenerateWeights { pivot_ratio: 0.0 });
    }

    let lap = laplacian_of(&w);
    let root = (0..n)
        .max_by(|&a, &b| lap[(a, a)].partial_cmp(&lap[(b, b)]).unwrap().then(b.cmp(&a)))
        .unwrap();
    let grounded = lap.clone().remove_row(root).remove_column(root);
    let chol = grounded
        .cholesky()
        .ok_or(Error::DegenerateWeights { pivot_ratio: 0.0 })?;
    let l = chol.l_dirty();
    let (mut lo, mut hi, mut log_det) = (f64::INFINITY, 0.0f64, 0.0);
    for k in 0..(n - 1) {
        let d = l[(k, k)];
        lo = lo.min(d);
        hi = hi.max(d);
        log_det += math::ln(d);
    }
    let pivot_ratio = (lo / hi) * (lo / hi);
    if !(pivot_ratio >= PIVOT_FALLBACK) || !log_det.is_finite() {
        return Err(Error::DegenerateWeights { pivot_ratio });
    }
    let log_z = 2.0 * log_det + (n as f64 - 1.0) * shift;

    let inv = chol.inverse();
    let embed = |k: usize| -> Option<usize> {
        match k.cmp(&root) {
            core::cmp::Ordering::Less => Some(k),
            core::cmp::Ordering::Equal => None,
            core::cmp::Ordering::Greater => Some(k - 1),
        }
    };
    let g = |a: usize, b: usize| -> f64 {
        match (embed(a), embed(b)) {
            (Some(x), Some(y)) => inv[(x, y)],
            _ => 0.0,
        }
    };
    let mut marginals = DMatrix::zeros(n, n);
    for k in 0..n {
        for l in (k + 1)..n {
            if w[(k, l)] == 0.0 {
                continue;
            }
            let resistance = g(k, k) + g(l, l) - 2.0 * g(k, l);
            let m = (w[(k, l)] * resistance).clamp(0.0, 1.0);
            marginals[(k, l)] = m;
            marginals[(l, k)] = m;
        }
    }
    Ok(TreeMarginals { marginals, log_z })
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + math::ln_1p(math::exp(lo - hi))
}

/// Log-determinant of the Laplacian grounded at `ground`, and the log-diagonal of its inverse.
///
/// Eliminating a node of a Laplacian leaves a Laplacian, so every quantity is a sum of
/// positive terms and can be accumulated with `log_add` without cancellation. The
/// diagonal of the inverse is `Σ_k M_ki² / d_k` with `M` the (nonnegative) inverse of
/// the unit elimination factor. Returned diagonal entries are indexed by node, with
/// `-inf` at `ground`; they are the effective resistances to `ground`.
fn log_grounded(log_w: &DMatrix<f64>, ground: usize) -> (f64, Vec<f64>) {
    let n = log_w.nrows();
    let order: Vec<usize> = (0..n).filter(|&v| v != ground).collect();
    let m = order.len();
    let mut lw = log_w.clone();
    let mut alive = vec![true; n];
    let mut log_d = vec![0.0; m];
    // fac[k][t] = log(-L_kt) for k > t, in elimination positions.
    let mut fac = vec![vec![f64::NEG_INFINITY; m]; m];
    for (t, &v) in order.iter().enumerate() {
        alive[v] = false;
        let mut d = f64::NEG_INFINITY;
        for u in 0..n {
            if alive[u] {
                d = log_add(d, lw[(v, u)]);
            }
        }
        log_d[t] = d;
        for (k, &u) in order.iter().enumerate().skip(t + 1) {
            fac[k][t] = lw[(u, v)] - d;
        }
        for i in 0..n {
            if !alive[i] || lw[(i, v)] == f64::NEG_INFINITY {
                continue;
            }
            for j in (i + 1)..n {
                if alive[j] && lw[(v, j)] > f64::NEG_INFINITY {
                    let x = log_add(lw[(i, j)], lw[(i, v)] + lw[(v, j)] - d);
                    lw[(i, j)] = x;
                    lw[(j, i)] = x;
                }
            }
        }
    }
    let log_det = log_d.iter().sum();

    let mut diag = vec![f64::NEG_INFINITY; n];
    let mut col = vec![f64::NEG_INFINITY; m];
    for t in 0..m {
        col.iter_mut().for_each(|x| *x = f64::NEG_INFINITY);
        col[t] = 0.0;
        for k in (t + 1)..m {
            let mut acc = f64::NEG_INFINITY;
            for l in t..k {
                acc = log_add(acc, fac[k][l] + col[l]);
            }
            col[k] = acc;
        }
        let mut g = f64::NEG_INFINITY;
        for k in t..m {
            g = log_add(g, 2.0 * col[k] - log_d[k]);
        }
        diag[order[t]] = g;
    }
    (log_det, diag)
}

/// Slow, cancellation-free path for weights spanning more than the `f64` exponent range.
///
/// `O(n^4)`: one elimination per grounding node, giving `P(kl ∈ T) = w_kl R_kl`
/// with `R_kl` read off as a resistance to ground.
pub fn log_domain_marginals(log_w: &DMatrix<f64>) -> Result<TreeMarginals> {
    check_log_weights(log_w)?;
    let n = log_w.nrows();
    if !finite_support_connected(log_w, |i, j| log_w[(i, j)] > f64::NEG_INFINITY) {
        return Ok(TreeMarginals { marginals: DMatrix::zeros(n, n), log_z: f64::NEG_INFINITY });
    }
    let mut lw = log_w.clone();
    for i in 0..n {
        lw[(i, i)] = f64::NEG_INFINITY;
    }
    let mut marginals = DMatrix::zeros(n, n);
    let mut log_z = f64::NEG_INFINITY;
    for l in 0..n {
        let (log_det, resistance) = log_grounded(&lw, l);
        if l == 0 {
            log_z = log_det;
        }
        for k in 0..l {
            if lw[(k, l)] == f64::NEG_INFINITY {
                continue;
            }
            let m = math::exp(lw[(k, l)] + resistance[k]).clamp(0.0, 1.0);
            marginals[(k, l)] = m;
            marginals[(l, k)] = m;
        }
    }
    if !log_z.is_finite() || marginals.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateWeights { pivot_ratio: 0.0 });
    }
    Ok(TreeMarginals { marginals, log_z })
}

/// `log Z(W)`; `-inf` for a disconnected positive-weight support.
pub fn log_partition_function(w: &WeightMatrix) -> Result<f64> {
    Ok(tree_marginals_from_log(&w.ln_weights())?.log_z)
}

/// `Z(W) = Σ_T ∏_{ij ∈ T} w_ij`, zero when the positive-weight support is disconnected.
pub fn partition_function(w: &WeightMatrix) -> Result<f64> {
    Ok(math::exp(log_partition_function(w)?))
}

/// All edge marginals `P(kl ∈ T)` in one factorization.
pub fn edge_marginals(w: &WeightMatrix) -> Result<EdgeScores> {
    Ok(tree_marginals_from_log(&w.ln_weights())?.marginals)
}

/// Entropy of `P(T) ∝ ∏ w_ij` in closed form: `log Z - Σ_kl P(kl ∈ T) log w_kl`.
pub fn tree_entropy(w: &WeightMatrix) -> Result<f64> {
    let log_w = w.ln_weights();
    let post = tree_marginals_from_log(&log_w)?;
    if post.is_degenerate() {
        return Err(Error::DegeneratePosterior);
    }
    let n = w.size();
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            acc += math::xlny(post.marginals[(i, j)], log_w[(i, j)]);
        }
    }
    Ok(post.log_z - acc)
}

/// Every labeled spanning tree on `size` nodes (`size^(size-2)` of them), via Prüfer codes.
pub fn enumerate_trees(size: usize) -> Result<Vec<SpanningTree>> {
    if size > MAX_ENUMERATION_SIZE {
        return Err(Error::TooManyNodes { size });
    }
    if size < 2 {
        return Err(Error::InvalidInput(format!("cannot enumerate trees on {size} nodes")));
    }
    let len = size - 2;
    let total = size.pow(len as u32);
    let mut code = vec![0usize; len];
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        out.push(SpanningTree::from_prufer(size, &code)?);
        for digit in code.iter_mut().rev() {
            *digit += 1;
            if *digit < size {
                break;
            }
            *digit = 0;
        }
    }
    Ok(out)
}

/// Maximum number of fixed-point sweeps in [`calibrate_prior`].
pub const CALIBRATION_MAX_ITER: usize = 200;
/// Max-norm tolerance on edge marginals in [`calibrate_prior`].
pub const CALIBRATION_TOL: f64 = 1e-6;

/// Rescales a strictly positive prior so every edge marginal equals `p0`.
///
/// Marginals always sum to `size - 1`, so a common target is only reachable when
/// `p0 = 2 / size`; any other target is rejected up front.
pub fn calibrate_prior(pi: &WeightMatrix, p0: f64) -> Result<WeightMatrix> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::Calibration(format!("target {p0} outside (0, 1)")));
    }
    let n = pi.size();
    for i in 0..n {
        for j in (i + 1)..n {
            if pi.get(i, j) <= 0.0 {
                return Err(Error::Calibration(format!("prior weight ({i}, {j}) is not positive")));
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let required = (n as f64 - 1.0) / pairs;
    if (p0 - required).abs() > 1e-9 {
        return Err(Error::Calibration(format!(
            "infeasible target {p0}: marginals over {n} nodes sum to {}, forcing p0 = {required}",
            n - 1
        )));
    }

    let mut log_pi = pi.ln_weights();
    for _ in 0..CALIBRATION_MAX_ITER {
        let marg = tree_marginals_from_log(&log_pi)?.marginals;
        let mut err = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                err = err.max((marg[(i, j)] - p0).abs());
            }
        }
        if err < CALIBRATION_TOL {
            return WeightMatrix::from_fn(n, |i, j| math::exp(log_pi[(i, j)]));
        }
        // Multiplicative update, recentred so the geometric mean stays at one.
        let mut mean = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = log_pi[(i, j)] + math::ln(p0) - math::ln(marg[(i, j)]);
                log_pi[(i, j)] = v;
                log_pi[(j, i)] = v;
                mean += v;
            }
        }
        mean /= pairs;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    log_pi[(i, j)] -= mean;
                }
            }
        }
    }
    Err(Error::Calibration(format!("no convergence after {CALIBRATION_MAX_ITER} iterations")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    #[test]
    fn entropy_matches_enumeration() {
        let w = WeightMatrix::from_fn(5, |i, j| 0.3 + ((i * 5 + j * 3) % 7) as f64).unwrap();
        let z: f64 = enumerate_trees(5).unwrap().iter().map(|t| t.edges().iter().map(|&(i, j)| w.get(i, j)).product::<f64>()).sum();
        let h: f64 = enumerate_trees(5)
            .unwrap()
            .iter()
            .map(|t| t.edges().iter().map(|&(i, j)| w.get(i, j)).product::<f64>() / z)
            .map(|p| -p * libm::log(p))
            .sum();
        assert_relative_eq!(tree_entropy(&w).unwrap(), h, max_relative = 1e-12);
        let uniform = WeightMatrix::uniform(5, 2.0).unwrap();
        assert_relative_eq!(tree_entropy(&uniform).unwrap(), libm::log(125.0), max_relative = 1e-12);
    }

    /// Brute-force oracle: Z and per-edge sums over every enumerated tree.
    fn brute_force(w: &WeightMatrix) -> (f64, DMatrix<f64>) {
        let n = w.size();
        let mut z = 0.0;
        let mut acc = DMatrix::zeros(n, n);
        for t in enumerate_trees(n).unwrap() {
            let weight: f64 = t.edges().iter().map(|&(i, j)| w.get(i, j)).product();
            z += weight;
            for &(i, j) in t.edges() {
                acc[(i, j)] += weight;
                acc[(j, i)] += weight;
            }
        }
        (z, acc / z)
    }

    fn triangle() -> WeightMatrix {
        WeightMatrix::from_fn(3, |i, j| match (i, j) {
            (0, 1) => 2.0,
            (0, 2) => 3.0,
            _ => 5.0,
        })
        .unwrap()
    }

    #[test]
    fn laplacian_of_complete_triangle() {
        let lap = build_laplacian(&WeightMatrix::uniform(3, 1.0).unwrap());
        let expected = DMatrix::from_row_slice(3, 3, &[2., -1., -1., -1., 2., -1., -1., -1., 2.]);
        assert_eq!(lap.as_matrix(), &expected);
    }

    #[test]
    fn laplacian_isolated_node_row_is_zero() {
        let w = WeightMatrix::from_fn(3, |i, _| if i == 0 { 1.0 } else { 0.0 }).unwrap();
        let w = WeightMatrix::new({
            let mut m = w.into_inner();
            m[(0, 1)] = 0.0;
            m[(1, 0)] = 0.0;
            m[(0, 2)] = 0.0;
            m[(2, 0)] = 0.0;
            m[(1, 2)] = 1.0;
            m[(2, 1)] = 1.0;
            m
        })
        .unwrap();
        let lap = build_laplacian(&w);
        assert!(lap.as_matrix().row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_weights_rejected() {
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]);
        assert_eq!(WeightMatrix::new(asym), Err(Error::InvalidWeights("matrix is not symmetric")));
        let neg = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert_eq!(WeightMatrix::new(neg), Err(Error::InvalidWeights("negative entry")));
    }

    #[test]
    fn partition_small_cases() {
        assert_relative_eq!(partition_function(&WeightMatrix::uniform(3, 1.0).unwrap()).unwrap(), 3.0, max_relative = 1e-12);
        assert_relative_eq!(partition_function(&WeightMatrix::uniform(4, 1.0).unwrap()).unwrap(), 16.0, max_relative = 1e-12);
        assert_relative_eq!(partition_function(&triangle()).unwrap(), 31.0, max_relative = 1e-12);
    }

    #[test]
    fn marginals_small_cases() {
        let m = edge_marginals(&WeightMatrix::uniform(3, 1.0).unwrap()).unwrap();
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert_relative_eq!(m[(i, j)], 2.0 / 3.0, max_relative = 1e-12);
        }
        let m = edge_marginals(&triangle()).unwrap();
        assert_relative_eq!(m[(0, 1)], 16.0 / 31.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_weight_edge_has_zero_marginal() {
        let mut m = WeightMatrix::uniform(4, 1.0).unwrap().into_inner();
        m[(0, 3)] = 0.0;
        m[(3, 0)] = 0.0;
        let marg = edge_marginals(&WeightMatrix::new(m).unwrap()).unwrap();
        assert_eq!(marg[(0, 3)], 0.0);
    }

    #[test]
    fn disconnected_support_gives_zero() {
        let m = DMatrix::from_row_slice(4, 4, &[
            0., 1., 0., 0.,
            1., 0., 0., 0.,
            0., 0., 0., 1.,
            0., 0., 1., 0.,
        ]);
        assert_eq!(partition_function(&WeightMatrix::new(m).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn enumeration_counts_follow_cayley() {
        assert_eq!(enumerate_trees(2).unwrap().len(), 1);
        assert_eq!(enumerate_trees(2).unwrap()[0].edges(), &[(0, 1)]);
        assert_eq!(enumerate_trees(3).unwrap().len(), 3);
        let five = enumerate_trees(5).unwrap();
        assert_eq!(five.len(), 125);
        let distinct: alloc::collections::BTreeSet<_> = five.iter().cloned().collect();
        assert_eq!(distinct.len(), 125);
        assert!(five.iter().all(|t| t.to_graph().is_connected() && t.edges().len() == 4));
        assert_eq!(enumerate_trees(9), Err(Error::TooManyNodes { size: 9 }));
    }

    #[test]
    fn calibration_uniform_already_calibrated() {
        let pi = WeightMatrix::uniform(3, 1.0).unwrap();
        let out = calibrate_prior(&pi, 2.0 / 3.0).unwrap();
        assert_relative_eq!(out.get(0, 1), out.get(1, 2), max_relative = 1e-12);
    }

    #[test]
    fn calibration_size_four_half() {
        let pi = WeightMatrix::uniform(4, 0.3).unwrap();
        let out = calibrate_prior(&pi, 0.5).unwrap();
        let (_, brute) = brute_force(&out);
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert!((brute[(i, j)] - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn calibration_nonuniform_prior_converges() {
        let pi = WeightMatrix::from_fn(4, |i, j| 1.0 + (i * 3 + j) as f64 * 0.4).unwrap();
        let out = calibrate_prior(&pi, 0.5).unwrap();
        let (_, brute) = brute_force(&out);
        for i in 0..4 {
            for j in (i + 1)..4 {
                assert!((brute[(i, j)] - 0.5).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn calibration_errors() {
        let mut m = WeightMatrix::uniform(4, 1.0).unwrap().into_inner();
        m[(0, 1)] = 0.0;
        m[(1, 0)] = 0.0;
        assert!(matches!(calibrate_prior(&WeightMatrix::new(m).unwrap(), 0.5), Err(Error::Calibration(_))));
        let pi = WeightMatrix::uniform(5, 1.0).unwrap();
        assert!(matches!(calibrate_prior(&pi, 0.5), Err(Error::Calibration(_))));
        assert!(matches!(calibrate_prior(&pi, 1.0), Err(Error::Calibration(_))));
    }

    fn weights_strategy() -> impl Strategy<Value = WeightMatrix> {
        (3usize..=7).prop_flat_map(|n| {
            proptest::collection::vec(0.05f64..5.0, n * (n - 1) / 2).prop_map(move |vals| {
                let mut it = vals.into_iter();
                WeightMatrix::from_fn(n, |_, _| it.next().unwrap()).unwrap()
            })
        })
    }

    fn log_brute_force(log_w: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let n = log_w.nrows();
        let trees: Vec<(f64, SpanningTree)> = enumerate_trees(n)
            .unwrap()
            .into_iter()
            .map(|t| (t.edges().iter().map(|&(i, j)| log_w[(i, j)]).sum(), t))
            .collect();
        let top = trees.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = trees.iter().map(|t| math::exp(t.0 - top)).sum();
        let mut acc = DMatrix::zeros(n, n);
        for (lw, t) in &trees {
            for &(i, j) in t.edges() {
                acc[(i, j)] += math::exp(lw - top) / z;
                acc[(j, i)] += math::exp(lw - top) / z;
            }
        }
        (top + math::ln(z), acc)
    }

    #[test]
    fn extreme_range_uses_log_domain() {
        // Node 4 hangs off the rest through weights ~e^-1500 relative to the others.
        let mut lw = DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 7 + i * j) % 11) as f64);
        for i in 0..4 {
            lw[(i, 4)] = -1500.0 + i as f64;
            lw[(4, i)] = lw[(i, 4)];
        }
        lw[(0, 1)] = 900.0;
        lw[(1, 0)] = 900.0;
        assert!(factorized_marginals(&lw).is_err());
        let got = tree_marginals_from_log(&lw).unwrap();
        let (log_z, brute) = log_brute_force(&lw);
        assert_relative_eq!(got.log_z, log_z, max_relative = 1e-12);
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert_abs_diff_eq!(got.marginals[(i, j)], brute[(i, j)], epsilon = 1e-10);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_brute_force(w in weights_strategy()) {
            let (z, brute) = brute_force(&w);
            let z_fast = partition_function(&w).unwrap();
            prop_assert!((z_fast - z).abs() <= 1e-9 * z);
            let m = edge_marginals(&w).unwrap();
            for i in 0..w.size() {
                for j in (i + 1)..w.size() {
                    prop_assert!((m[(i, j)] - brute[(i, j)]).abs() <= 1e-9);
                }
            }
        }

        #[test]
        fn marginals_sum_to_tree_size(w in weights_strategy()) {
            let m = edge_marginals(&w).unwrap();
            let n = w.size();
            let total: f64 = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).sum();
            prop_assert!((total - (n as f64 - 1.0)).abs() < 1e-8);
        }

        #[test]
        fn log_domain_agrees_with_factorized(w in weights_strategy()) {
            let lw = w.ln_weights();
            let fast = factorized_marginals(&lw).unwrap();
            let slow = log_domain_marginals(&lw).unwrap();
            prop_assert!((fast.log_z - slow.log_z).abs() < 1e-10 * fast.log_z.abs().max(1.0));
            prop_assert!((fast.marginals - slow.marginals).amax() < 1e-10);
        }

        #[test]
        fn log_domain_matches_enumeration_on_wide_ranges(
            n in 3usize..=6,
            vals in proptest::collection::vec(-2000.0f64..2000.0, 15),
        ) {
            let mut it = vals.into_iter();
            let mut lw = DMatrix::from_element(n, n, f64::NEG_INFINITY);
            for i in 0..n {
                for j in (i + 1)..n {
                    let v = it.next().unwrap();
                    lw[(i, j)] = v;
                    lw[(j, i)] = v;
                }
            }
            let got = tree_marginals_from_log(&lw).unwrap();
            let (log_z, brute) = log_brute_force(&lw);
            prop_assert!((got.log_z - log_z).abs() < 1e-11 * log_z.abs().max(1.0));
            prop_assert!((got.marginals - brute).amax() < 1e-9);
        }

        #[test]
        fn laplacian_rows_sum_to_zero(w in weights_strategy()) {
            let lap = build_laplacian(&w);
            for row in lap.as_matrix().row_iter() {
                prop_assert!(row.sum().abs() < 1e-12);
            }
        }

        #[test]
        fn homogeneous_of_degree_size_minus_one(w in weights_strategy(), c in 0.1f64..10.0) {
            let scaled = WeightMatrix::new(w.as_matrix() * c).unwrap();
            let lhs = log_partition_function(&scaled).unwrap();
            let rhs = (w.size() as f64 - 1.0) * math::ln(c) + log_partition_function(&w).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9 * rhs.abs().max(1.0));
        }

        #[test]
        fn all_first_minors_agree(w in weights_strategy()) {
            let lap = build_laplacian(&w);
            let z = partition_function(&w).unwrap();
            for u in 0..w.size() {
                for v in 0..w.size() {
                    let c = lap.cofactor(u, v);
                    prop_assert!((c - z).abs() <= 1e-8 * z, "cofactor ({}, {}) = {} vs {}", u, v, c, z);
                }
            }
        }
    }
}
