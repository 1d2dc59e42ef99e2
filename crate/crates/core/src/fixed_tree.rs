//! Baseline EM over a single unknown tree.
//!
//! The tree is a parameter like the precision: the E-step completes the covariance with
//! the conditional hidden moments, the M-step is Chow-Liu plus the tree-constrained
//! maximum likelihood precision on the completed covariance. Both steps are exact, so the
//! observed log-likelihood never decreases.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::em::{hidden_moments, FitOptions};
use crate::error::{Error, Result};
use crate::gaussian::{
    chow_liu_restricted, strongest_tree, tree_precision_from_cov, EmpiricalCovariance, PartitionedPrecision,
};
use crate::graph::SpanningTree;
use crate::init;
use crate::linalg;
use crate::math;
use crate::seed::derive_seed;

/// Output of [`fit_fixed_tree`].
#[derive(Debug, Clone, PartialEq)]
pub struct FixedTreeFit {
    pub tree: SpanningTree,
    /// Precision over observed then hidden nodes, supported on `tree`.
    pub k: PartitionedPrecision,
    /// Observed log-likelihood after each iteration.
    pub trace: Vec<f64>,
    pub initial_loglik: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl FixedTreeFit {
    pub fn observed(&self) -> usize {
        self.k.observed()
    }

    pub fn hidden(&self) -> usize {
        self.k.hidden()
    }
}

/// Gaussian log-likelihood of the observed sample under the marginal of `k`.
pub fn marginal_loglik(k: &PartitionedPrecision, cov: &EmpiricalCovariance) -> Result<f64> {
    let m = k.marginal_precision()?;
    let log_det = linalg::spd_log_det(&m).ok_or(Error::NotPositiveDefinite)?;
    let trace = m.component_mul(cov.matrix()).sum();
    let p = cov.dim() as f64;
    Ok(cov.n() as f64 / 2.0 * (log_det - p * math::LN_2PI - trace))
}

/// Expected complete-data covariance `[[Σ̂, -Wᵀ], [-W, B]]`.
pub fn completed_covariance(k: &PartitionedPrecision, cov: &EmpiricalCovariance) -> Result<DMatrix<f64>> {
    let (p, d) = (k.observed(), k.dim());
    let (w, _, b) = hidden_moments(k, cov)?;
    let mut c = DMatrix::zeros(d, d);
    c.view_mut((0, 0), (p, p)).copy_from(cov.matrix());
    for h in 0..d - p {
        for j in 0..p {
            c[(p + h, j)] = -w[(h, j)];
            c[(j, p + h)] = -w[(h, j)];
        }
    }
    c.view_mut((p, p), (d - p, d - p)).copy_from(&b);
    Ok(c)
}

fn no_hidden_pairs(p: usize) -> impl Fn(usize, usize) -> bool {
    move |i, j| i < p || j < p
}

fn start(cov: &EmpiricalCovariance, r: usize, opts: &FitOptions) -> Result<(SpanningTree, PartitionedPrecision)> {
    let p = cov.dim();
    let k = match init::initial_precision(cov, r, &opts.init, opts.eig_floor) {
        Ok(k) => k,
        Err(Error::InitializationFallback) => init::random_tree_precision(cov, r, derive_seed(opts.seed, 1), opts.eig_floor)?,
        Err(e) => return Err(e),
    };
    let tree = strongest_tree(k.matrix(), no_hidden_pairs(p))?;
    Ok((tree, k))
}

/// Alternates covariance completion and Chow-Liu until the tree repeats or the relative
/// log-likelihood change drops below `opts.tol`.
pub fn fit_fixed_tree(cov: &EmpiricalCovariance, r: usize, opts: &FitOptions) -> Result<FixedTreeFit> {
    let p = cov.dim();
    if p + r < 2 {
        return Err(Error::InvalidInput("need at least two nodes".into()));
    }
    let (mut tree, mut k) = start(cov, r, opts)?;
    let initial_loglik = marginal_loglik(&k, cov)?;
    let mut loglik = initial_loglik;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let completed = completed_covariance(&k, cov)?;
        let next_tree = chow_liu_restricted(&completed, no_hidden_pairs(p))?;
        let (next_tree, next_k) = tree_precision_from_cov(&next_tree, &completed)?.into_parts();
        let next_k = PartitionedPrecision::new(next_k, p)?;
        let next_ll = marginal_loglik(&next_k, cov)?;
        iterations += 1;
        trace.push(next_ll);
        let same_tree = next_tree == tree;
        let small = (next_ll - loglik).abs() <= opts.tol * loglik.abs().max(1.0);
        tree = next_tree;
        k = next_k;
        loglik = next_ll;
        if (same_tree && iterations > 1) || small || r == 0 {
            converged = true;
            break;
        }
    }
    Ok(FixedTreeFit { tree, k, trace, initial_loglik, loglik, iterations, converged })
}
