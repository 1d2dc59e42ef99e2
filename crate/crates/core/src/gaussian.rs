//! Tree-structured Gaussian models.
//!
//! Nodes `0..p` are observed and `p..p+r` hidden throughout the crate.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::{pair, DisjointSet, SpanningTree};
use crate::kernel::EdgeScores;
use crate::linalg;
use crate::math;

/// Correlations at or beyond this magnitude count as perfect dependence.
pub const PERFECT_CORRELATION: f64 = 1.0 - 1e-12;

/// Empirical covariance of observed variables together with its sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCovariance {
    matrix: DMatrix<f64>,
    n: usize,
}

impl EmpiricalCovariance {
    pub fn new(matrix: DMatrix<f64>, n: usize) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::InvalidInput("covariance must be a non-empty square matrix".into()));
        }
        if n == 0 {
            return Err(Error::InvalidInput("sample count must be positive".into()));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("covariance has non-finite entries".into()));
        }
        if !linalg::is_symmetric(&matrix, 1e-10) {
            return Err(Error::InvalidInput("covariance is not symmetric".into()));
        }
        if let Some(i) = (0..matrix.nrows()).find(|&i| matrix[(i, i)] <= 0.0) {
            return Err(Error::InvalidInput(format!("variance of variable {i} is not positive")));
        }
        let scale = matrix.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let min_eig = linalg::min_eigenvalue(&matrix);
        if min_eig < -1e-10 * scale {
            return Err(Error::InvalidInput(format!(
                "covariance is not positive semidefinite (min eigenvalue {min_eig:e})"
            )));
        }
        let mut matrix = matrix;
        linalg::symmetrize(&mut matrix);
        Ok(Self { matrix, n })
    }

    /// Maximum-likelihood covariance of the rows of `data` (centered, divided by `n`).
    pub fn from_samples(data: &DMatrix<f64>) -> Result<Self> {
        let n = data.nrows();
        if n < 2 {
            return Err(Error::InvalidInput(format!("insufficient data: {n} samples")));
        }
        let mut centered = data.clone();
        for mut col in centered.column_iter_mut() {
            let mean = col.sum() / n as f64;
            col.add_scalar_mut(-mean);
        }
        let s = centered.transpose() * &centered / n as f64;
        Self::new(s, n)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    pub fn correlation(&self, i: usize, j: usize) -> f64 {
        correlation(&self.matrix, i, j)
    }

    /// Shrinks toward the diagonal: `(1 - lambda) S + lambda diag(S)`.
    pub fn shrunk(&self, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidInput(format!("shrinkage {lambda} outside [0, 1]")));
        }
        let mut m = self.matrix.clone() * (1.0 - lambda);
        for i in 0..self.dim() {
            m[(i, i)] = self.matrix[(i, i)];
        }
        Self::new(m, self.n)
    }
}

fn correlation(m: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    m[(i, j)] / math::sqrt(m[(i, i)] * m[(j, j)])
}

/// Precision matrix over observed nodes `0..p` followed by hidden nodes `p..p+r`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedPrecision {
    k: DMatrix<f64>,
    observed: usize,
}

impl PartitionedPrecision {
    pub fn new(k: DMatrix<f64>, observed: usize) -> Result<Self> {
        if !k.is_square() || k.nrows() == 0 {
            return Err(Error::InvalidInput("precision must be a non-empty square matrix".into()));
        }
        if observed > k.nrows() || observed == 0 {
            return Err(Error::DimensionMismatch { expected: k.nrows(), found: observed });
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("precision has non-finite entries".into()));
        }
        if !linalg::is_symmetric(&k, 1e-10) {
            return Err(Error::InvalidInput("precision is not symmetric".into()));
        }
        let mut k = k;
        linalg::symmetrize(&mut k);
        Ok(Self { k, observed })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn observed(&self) -> usize {
        self.observed
    }

    pub fn hidden(&self) -> usize {
        self.dim() - self.observed
    }

    pub fn is_hidden(&self, i: usize) -> bool {
        i >= self.observed
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.k[(i, j)]
    }

    pub fn observed_block(&self) -> DMatrix<f64> {
        self.k.view((0, 0), (self.observed, self.observed)).into_owned()
    }

    pub fn hidden_block(&self) -> DMatrix<f64> {
        let (p, r) = (self.observed, self.hidden());
        self.k.view((p, p), (r, r)).into_owned()
    }

    /// `K_HO`, an `r × p` block.
    pub fn hidden_observed_block(&self) -> DMatrix<f64> {
        let (p, r) = (self.observed, self.hidden());
        self.k.view((p, 0), (r, p)).into_owned()
    }

    /// Schur complement `K_O - K_OH K_H^{-1} K_HO`: the precision of the observed marginal.
    pub fn marginal_precision(&self) -> Result<DMatrix<f64>> {
        if self.hidden() == 0 {
            return Ok(self.k.clone());
        }
        let k_ho = self.hidden_observed_block();
        let solved = self
            .hidden_block()
            .lu()
            .solve(&k_ho)
            .ok_or(Error::SingularPrecision)?;
        let mut m = self.observed_block() - k_ho.transpose() * solved;
        linalg::symmetrize(&mut m);
        Ok(m)
    }

    pub fn is_positive_definite(&self) -> bool {
        self.k.clone().cholesky().is_some()
    }
}

/// A spanning tree with a precision matrix supported on its edges.
#[derive(Debug, Clone, PartialEq)]
pub struct TreePrecision {
    tree: SpanningTree,
    k: DMatrix<f64>,
}

impl TreePrecision {
    pub fn tree(&self) -> &SpanningTree {
        &self.tree
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn into_parts(self) -> (SpanningTree, DMatrix<f64>) {
        (self.tree, self.k)
    }
}

/// Gaussian mutual information `-½ log(1 - ρ²)` for every pair.
pub fn mutual_information(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov.nrows();
    let mut mi = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let rho = correlation(cov, i, j);
            if !(rho.abs() < PERFECT_CORRELATION) {
                return Err(Error::PerfectCorrelation { i, j, rho });
            }
            let v = -0.5 * math::ln_1p(-rho * rho);
            mi[(i, j)] = v;
            mi[(j, i)] = v;
        }
    }
    Ok(mi)
}

/// Maximum-likelihood (Chow-Liu) tree: Kruskal on mutual information, ties broken lexicographically.
pub fn chow_liu(cov: &EmpiricalCovariance) -> Result<SpanningTree> {
    chow_liu_restricted(cov.matrix(), |_, _| true)
}

/// Chow-Liu restricted to pairs accepted by `allowed`.
pub fn chow_liu_restricted(cov: &DMatrix<f64>, allowed: impl Fn(usize, usize) -> bool) -> Result<SpanningTree> {
    let n = cov.nrows();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            if !allowed(i, j) {
                continue;
            }
            let rho = correlation(cov, i, j);
            if !(rho.abs() < PERFECT_CORRELATION) {
                return Err(Error::PerfectCorrelation { i, j, rho });
            }
            candidates.push((-0.5 * math::ln_1p(-rho * rho), i, j));
        }
    }
    // Stable sort keeps the lexicographic order among equal weights.
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal));
    let mut ds = DisjointSet::new(n);
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    for (_, i, j) in candidates {
        if ds.union(i, j) {
            edges.push((i, j));
            if edges.len() + 1 == n {
                break;
            }
        }
    }
    if edges.len() + 1 != n {
        return Err(Error::InvalidInput("allowed pairs do not connect all variables".into()));
    }
    SpanningTree::new(n, edges)
}

/// Maximum spanning tree of `|K_ij| / √(K_ii K_jj)` over allowed pairs, ties broken
/// lexicographically. Recovers the support of a tree-structured precision.
pub fn strongest_tree(k: &DMatrix<f64>, allowed: impl Fn(usize, usize) -> bool) -> Result<SpanningTree> {
    let n = k.nrows();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if allowed(i, j) {
                candidates.push(((k[(i, j)] / math::sqrt(k[(i, i)] * k[(j, j)])).abs(), i, j));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal));
    let mut ds = DisjointSet::new(n);
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    for (_, i, j) in candidates {
        if ds.union(i, j) {
            edges.push((i, j));
        }
    }
    if edges.len() + 1 != n {
        return Err(Error::InvalidInput("allowed pairs do not connect all variables".into()));
    }
    SpanningTree::new(n, edges)
}

/// Inverse of the 2×2 covariance block on `(i, j)`.
fn pair_block_inverse(cov: &DMatrix<f64>, i: usize, j: usize) -> Result<[[f64; 2]; 2]> {
    let (a, b, c) = (cov[(i, i)], cov[(j, j)], cov[(i, j)]);
    let rho = c / math::sqrt(a * b);
    if !(rho.abs() < PERFECT_CORRELATION) {
        return Err(Error::PerfectCorrelation { i, j, rho });
    }
    let det = a * b - c * c;
    Ok([[b / det, -c / det], [-c / det, a / det]])
}

/// Tree-constrained precision from a covariance: node precisions plus, for each tree
/// edge, the inverse of the edge's 2×2 covariance block minus the two node terms.
pub fn tree_precision_from_cov(tree: &SpanningTree, cov: &DMatrix<f64>) -> Result<TreePrecision> {
    let n = cov.nrows();
    if tree.size() != n {
        return Err(Error::DimensionMismatch { expected: n, found: tree.size() });
    }
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        if !(cov[(i, i)] > 0.0) {
            return Err(Error::InvalidInput(format!("variance of variable {i} is not positive")));
        }
        k[(i, i)] = 1.0 / cov[(i, i)];
    }
    for &(i, j) in tree.edges() {
        let block = pair_block_inverse(cov, i, j)?;
        k[(i, i)] += block[0][0] - 1.0 / cov[(i, i)];
        k[(j, j)] += block[1][1] - 1.0 / cov[(j, j)];
        k[(i, j)] += block[0][1];
        k[(j, i)] += block[1][0];
    }
    Ok(TreePrecision { tree: tree.clone(), k })
}

/// Conditional law of hidden given observed values.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianConditional {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

/// `X_H | X_O = x ~ N(-K_H^{-1} K_HO x, K_H^{-1})`.
pub fn conditional_hidden_given_observed(k: &PartitionedPrecision, x_o: &DVector<f64>) -> Result<GaussianConditional> {
    if x_o.len() != k.observed() {
        return Err(Error::DimensionMismatch { expected: k.observed(), found: x_o.len() });
    }
    let k_h = k.hidden_block();
    let rhs = -(k.hidden_observed_block() * x_o);
    let mean = k_h.clone().lu().solve(&rhs).ok_or(Error::SingularPrecision)?;
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularPrecision);
    }
    Ok(GaussianConditional { mean, precision: k_h })
}

/// Log of the per-edge conditional tree weights `γ_ij = π_ij d_ij m_ij`.
///
/// * `d_ij = ((K_ii K_jj - K_ij²) / (K_ii K_jj))^{n/2}`
/// * observed pairs: `m_ij = exp(-n K_ij Σ_ij)`
/// * observed `i`, hidden `h`: `m_ih = exp((n/2) Σ_{k∈O} K_ih K_hk Σ_ki / K_hh)`
/// * hidden pairs: `m = 1`
///
/// Zero prior weights give `-inf`.
pub fn log_marginal_tree_weight(
    k: &PartitionedPrecision,
    prior: &EdgeScores,
    cov: &EmpiricalCovariance,
) -> Result<EdgeScores> {
    let (p, dim) = (k.observed(), k.dim());
    if cov.dim() != p {
        return Err(Error::DimensionMismatch { expected: p, found: cov.dim() });
    }
    if prior.nrows() != dim || prior.ncols() != dim {
        return Err(Error::DimensionMismatch { expected: dim, found: prior.nrows() });
    }
    let half_n = 0.5 * cov.n() as f64;
    let km = k.matrix();
    let s = cov.matrix();
    for i in 0..dim {
        if !(km[(i, i)] > 0.0) {
            return Err(Error::InvalidPrecision { i, j: i });
        }
    }
    // drift[h][i] = Σ_{k∈O} K_hk Σ_ki / K_hh
    let r = dim - p;
    let mut drift = DMatrix::zeros(r, p);
    for h in 0..r {
        let kh = km[(p + h, p + h)];
        for i in 0..p {
            let mut acc = 0.0;
            for q in 0..p {
                acc += km[(p + h, q)] * s[(q, i)];
            }
            drift[(h, i)] = acc / kh;
        }
    }

    let mut out = DMatrix::from_element(dim, dim, f64::NEG_INFINITY);
    for i in 0..dim {
        for j in (i + 1)..dim {
            let (kii, kjj, kij) = (km[(i, i)], km[(j, j)], km[(i, j)]);
            let ratio = kij * kij / (kii * kjj);
            if !(ratio < 1.0) {
                return Err(Error::InvalidPrecision { i, j });
            }
            let pi = prior[(i, j)];
            if pi < 0.0 || pi.is_nan() {
                return Err(Error::InvalidWeights("prior entry is negative"));
            }
            if pi == 0.0 {
                continue;
            }
            let log_d = half_n * math::ln_1p(-ratio);
            let log_m = match (i < p, j < p) {
                (true, true) => -2.0 * half_n * kij * s[(i, j)],
                (true, false) => half_n * kij * drift[(j - p, i)],
                (false, true) => half_n * kij * drift[(i - p, j)],
                (false, false) => 0.0,
            };
            let v = math::ln(pi) + log_d + log_m;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// Convenience used by tests and diagnostics: tree edges as a sorted list of pairs.
pub fn tree_edge_set(tree: &SpanningTree) -> Vec<(usize, usize)> {
    tree.edges().iter().map(|&(i, j)| pair(i, j)).collect()
}
