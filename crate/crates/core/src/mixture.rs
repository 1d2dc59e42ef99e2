//! EM for the tree mixture with exact per-tree precisions.
//!
//! Each spanning tree `T` carries the precision obtained by gluing pairwise blocks:
//! `K_T = Σ_i [1/v_i] + Σ_{ij ∈ T} ([Σ_ij⁻¹] - [1/v_i] - [1/v_j])`, where `Σ_ij` is the
//! 2×2 covariance with variances `v_i, v_j` and correlation `ρ_ij`. The blocks are
//! consistent with the node variances, so every `K_T` is positive definite, its
//! determinant factorizes over edges exactly, and the conditional tree weights
//! `γ_ij = π_ij exp(n ψ_ij)` are those of a normalized model.
//!
//! With hidden nodes the posterior is approximated by `q(T) q(X_H)`. The optimal
//! `q(X_H)` given `q(T)` is Gaussian with precision `E_q[K_T]`, so the hidden
//! moments take the familiar form `W = K̂_H⁻¹ K̂_HO Σ̂` with `K̂ = E_q[K_T]`.
//! Every update maximizes the bound over one block, hence the bound never decreases.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::em::{self, EStepState, FitOptions, FitResult};
use crate::error::{Error, Result};
use crate::gaussian::{strongest_tree, EmpiricalCovariance, PartitionedPrecision};
use crate::kernel::{self, EdgeScores};
use crate::linalg;
use crate::math;

/// Correlations are kept strictly inside `(-RHO_MAX, RHO_MAX)`.
pub const RHO_MAX: f64 = 1.0 - 1e-10;

/// Node variances and pairwise correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    var: DVector<f64>,
    corr: DMatrix<f64>,
    observed: usize,
}

impl MixtureParams {
    pub fn new(var: DVector<f64>, corr: DMatrix<f64>, observed: usize) -> Result<Self> {
        let d = var.len();
        if corr.nrows() != d || corr.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, found: corr.nrows() });
        }
        if observed == 0 || observed > d {
            return Err(Error::InvalidInput("observed count must be in 1..=dim".into()));
        }
        if let Some(i) = (0..d).find(|&i| !(var[i] > 0.0 && var[i].is_finite())) {
            return Err(Error::InvalidPrecision { i, j: i });
        }
        for i in 0..d {
            for j in 0..d {
                let c = corr[(i, j)];
                if i != j && (!(c.abs() < 1.0) || c != corr[(j, i)]) {
                    return Err(Error::InvalidPrecision { i, j });
                }
            }
        }
        let mut corr = corr;
        corr.fill_diagonal(1.0);
        Ok(Self { var, corr, observed })
    }

    /// Variances and correlations of `K⁻¹`; hidden-hidden correlations are set to 0.
    pub fn from_precision(k: &PartitionedPrecision) -> Result<Self> {
        let sigma = linalg::spd_inverse(k.matrix()).ok_or(Error::NotPositiveDefinite)?;
        let d = k.dim();
        let p = k.observed();
        let var = DVector::from_fn(d, |i, _| sigma[(i, i)]);
        let corr = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                1.0
            } else if i >= p && j >= p {
                0.0
            } else {
                (sigma[(i, j)] / math::sqrt(sigma[(i, i)] * sigma[(j, j)])).clamp(-RHO_MAX, RHO_MAX)
            }
        });
        Self::new(var, corr, p)
    }

    pub fn dim(&self) -> usize {
        self.var.len()
    }

    pub fn observed(&self) -> usize {
        self.observed
    }

    pub fn hidden(&self) -> usize {
        self.dim() - self.observed
    }

    pub fn var(&self, i: usize) -> f64 {
        self.var[i]
    }

    pub fn corr(&self, i: usize, j: usize) -> f64 {
        self.corr[(i, j)]
    }

    pub fn variances(&self) -> &DVector<f64> {
        &self.var
    }

    pub fn correlations(&self) -> &DMatrix<f64> {
        &self.corr
    }

    /// `Σ_T [weight_ij · (block_ij - node terms)]` plus the node terms.
    fn weighted_precision(&self, weight: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
        let d = self.dim();
        let mut k = DMatrix::from_diagonal(&self.var.map(|v| 1.0 / v));
        for i in 0..d {
            for j in (i + 1)..d {
                let w = weight(i, j);
                if w == 0.0 {
                    continue;
                }
                let rho = self.corr[(i, j)];
                let one_minus = 1.0 - rho * rho;
                k[(i, i)] += w * rho * rho / (self.var[i] * one_minus);
                k[(j, j)] += w * rho * rho / (self.var[j] * one_minus);
                let off = -w * rho / (math::sqrt(self.var[i] * self.var[j]) * one_minus);
                k[(i, j)] = off;
                k[(j, i)] = off;
            }
        }
        k
    }

    /// Precision of the tree with the given edges.
    pub fn tree_precision(&self, edges: &[(usize, usize)]) -> DMatrix<f64> {
        let d = self.dim();
        let mut on = DMatrix::zeros(d, d);
        for &(i, j) in edges {
            on[(i, j)] = 1.0;
            on[(j, i)] = 1.0;
        }
        self.weighted_precision(|i, j| on[(i, j)])
    }

    /// `E_q[K_T]` for edge marginals `alpha`.
    pub fn mean_precision(&self, alpha: &EdgeScores) -> Result<PartitionedPrecision> {
        PartitionedPrecision::new(self.weighted_precision(|i, j| alpha[(i, j)]), self.observed)
    }
}

/// Per-sample log edge factor `log N(x_i, x_j) - log N(x_i) - log N(x_j)` in expectation,
/// with standardized moments `a = E[x_i²]/v_i`, `b = E[x_j²]/v_j`, `c = E[x_i x_j]/√(v_i v_j)`.
pub fn edge_log_factor(rho: f64, a: f64, b: f64, c: f64) -> f64 {
    let one_minus = 1.0 - rho * rho;
    -0.5 * math::ln(one_minus) - (rho * rho * (a + b) - 2.0 * rho * c) / (2.0 * one_minus)
}

/// Maximizer of [`edge_log_factor`] over `ρ ∈ (-1, 1)`.
///
/// The derivative has the sign of `g(ρ) = -ρ³ + cρ² + (1 - a - b)ρ + c`, with
/// `g(-1) ≥ 0 ≥ g(1)` whenever `c² ≤ ab`. The roots are bracketed between the
/// critical points of `g` and the best one is kept.
pub fn correlation_update(a: f64, b: f64, c: f64) -> f64 {
    let g = |x: f64| ((-x + c) * x + (1.0 - a - b)) * x + c;
    let mut cuts: Vec<f64> = Vec::with_capacity(4);
    cuts.push(-RHO_MAX);
    let disc = c * c + 3.0 * (1.0 - a - b);
    if disc > 0.0 {
        let s = math::sqrt(disc);
        for x in [(c - s) / 3.0, (c + s) / 3.0] {
            if x > -RHO_MAX && x < RHO_MAX {
                cuts.push(x);
            }
        }
    }
    cuts.push(RHO_MAX);
    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut consider = |x: f64| {
        let v = edge_log_factor(x, a, b, c);
        if v > best.0 {
            best = (v, x);
        }
    };
    for w in cuts.windows(2) {
        let (mut lo, mut hi) = (w[0], w[1]);
        let (glo, ghi) = (g(lo), g(hi));
        if glo == 0.0 {
            consider(lo);
        }
        if !(glo > 0.0 && ghi < 0.0) && !(glo < 0.0 && ghi > 0.0) {
            continue;
        }
        let rising = glo < 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (g(mid) < 0.0) == rising {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 {
                break;
            }
        }
        consider(0.5 * (lo + hi));
    }
    // Boundary values cover moments on the edge of validity, where g keeps one sign.
    consider(-RHO_MAX);
    consider(RHO_MAX);
    best.1
}

/// Maximizer of `log u - A u²/2 + B u` over `u > 0` (the inverse standard deviation).
pub fn scale_update(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        (b + math::sqrt(b * b + 4.0 * a)) / (2.0 * a)
    } else {
        // Same root, written without cancellation.
        2.0 / (math::sqrt(b * b + 4.0 * a) - b)
    }
}

/// E-step: `q(X_H)` from `E_{alpha_prev}[K_T]`, then `q(T)` from the completed moments.
///
/// Returns the state and `K̂ = E_{alpha_prev}[K_T]`.
pub fn e_step(
    params: &MixtureParams,
    alpha_prev: &EdgeScores,
    cov: &EmpiricalCovariance,
    prior: &EdgeScores,
) -> Result<(EStepState, PartitionedPrecision)> {
    let (p, d) = (params.observed(), params.dim());
    if cov.dim() != p {
        return Err(Error::DimensionMismatch { expected: p, found: cov.dim() });
    }
    if prior.nrows() != d || alpha_prev.nrows() != d {
        return Err(Error::DimensionMismatch { expected: d, found: prior.nrows() });
    }
    let k_mean = params.mean_precision(alpha_prev)?;
    let (w_ho, v_h, b_h) = em::hidden_moments(&k_mean, cov)?;
    let prior_log = prior.map(|v| if v > 0.0 { math::ln(v) } else { f64::NEG_INFINITY });
    let mut state = EStepState {
        w_ho,
        v_h,
        b_h,
        log_gamma: DMatrix::zeros(d, d),
        alpha: DMatrix::zeros(d, d),
        log_z: 0.0,
        log_z_prior: kernel::tree_marginals_from_log(&prior_log)?.log_z,
        n: cov.n(),
        prior_log,
    };
    let n = cov.n() as f64;
    let mut log_gamma = DMatrix::from_element(d, d, f64::NEG_INFINITY);
    for i in 0..d {
        for j in (i + 1)..d {
            let lp = state.prior_log[(i, j)];
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let (a, b, c) = standardized(params, &state, cov, i, j);
            let v = lp + n * edge_log_factor(params.corr(i, j), a, b, c);
            if !v.is_finite() {
                return Err(Error::InvalidPrecision { i, j });
            }
            log_gamma[(i, j)] = v;
            log_gamma[(j, i)] = v;
        }
    }
    let post = kernel::tree_marginals_from_log(&log_gamma)?;
    if post.is_degenerate() {
        return Err(Error::DegeneratePosterior);
    }
    state.log_gamma = log_gamma;
    state.alpha = post.marginals;
    state.log_z = post.log_z;
    Ok((state, k_mean))
}

fn standardized(params: &MixtureParams, state: &EStepState, cov: &EmpiricalCovariance, i: usize, j: usize) -> (f64, f64, f64) {
    let (vi, vj) = (params.var(i), params.var(j));
    (
        state.completed_moment(cov, i, i) / vi,
        state.completed_moment(cov, j, j) / vj,
        state.completed_moment(cov, i, j) / math::sqrt(vi * vj),
    )
}

/// M-step: one Gauss-Seidel sweep over the node scales, then every correlation.
pub fn m_step(params: &MixtureParams, state: &EStepState, cov: &EmpiricalCovariance) -> Result<MixtureParams> {
    let d = params.dim();
    let alpha = &state.alpha;
    let mut u = params.var.map(|v| 1.0 / math::sqrt(v));
    let corr = &params.corr;
    for i in 0..d {
        let m_ii = state.completed_moment(cov, i, i);
        if !(m_ii > 0.0) || !m_ii.is_finite() {
            return Err(Error::InvalidMoment { index: i, value: m_ii });
        }
        let (mut a, mut b) = (1.0, 0.0);
        for j in (0..d).filter(|&j| j != i && alpha[(i, j)] > 0.0) {
            let rho = corr[(i, j)];
            let one_minus = 1.0 - rho * rho;
            a += alpha[(i, j)] * rho * rho / one_minus;
            b += alpha[(i, j)] * rho * state.completed_moment(cov, i, j) * u[j] / one_minus;
        }
        u[i] = scale_update(m_ii * a, b);
        if !(u[i] > 0.0) || !u[i].is_finite() {
            return Err(Error::MStepFailure { index: i, detail: "scale update is not finite" });
        }
    }
    let var = u.map(|x| 1.0 / (x * x));
    let mut new_corr = DMatrix::identity(d, d);
    for i in 0..d {
        for j in (i + 1)..d {
            if state.prior_log[(i, j)] == f64::NEG_INFINITY {
                continue;
            }
            let a = state.completed_moment(cov, i, i) * u[i] * u[i];
            let b = state.completed_moment(cov, j, j) * u[j] * u[j];
            let c = state.completed_moment(cov, i, j) * u[i] * u[j];
            let rho = correlation_update(a, b, c);
            new_corr[(i, j)] = rho;
            new_corr[(j, i)] = rho;
        }
    }
    MixtureParams::new(var, new_corr, params.observed())
}

/// The bound `E_q[log p(X_O, X_H, T)] + H(q)` at the state's own parameters.
///
/// With `γ` computed from `params`, the edge terms cancel against the tree entropy and
/// the bound is `-log Z(π) + log Z(γ) + node terms + n·H(X_H)`. Without hidden nodes it
/// is the exact observed log-likelihood.
pub fn loglik(params: &MixtureParams, state: &EStepState, k_mean: &PartitionedPrecision, cov: &EmpiricalCovariance) -> Result<f64> {
    let n = cov.n() as f64;
    let mut nodes = 0.0;
    for i in 0..params.dim() {
        let m = state.completed_moment(cov, i, i);
        nodes -= 0.5 * n * (math::LN_2PI + math::ln(params.var(i)) + m / params.var(i));
    }
    let r = params.hidden();
    let hidden = if r == 0 {
        0.0
    } else {
        let log_det = linalg::spd_log_det(&k_mean.hidden_block()).ok_or(Error::SingularPrecision)?;
        0.5 * r as f64 * (math::LN_2PI + 1.0) - 0.5 * log_det
    };
    let ll = state.log_z - state.log_z_prior + nodes + n * hidden;
    if !ll.is_finite() {
        return Err(Error::Divergence { iteration: 0 });
    }
    Ok(ll)
}

/// Hard edge marginals of the strongest tree of `k` among pairs the prior allows.
fn support_alpha(k: &PartitionedPrecision, prior: &EdgeScores) -> Result<EdgeScores> {
    let d = k.dim();
    let tree = strongest_tree(k.matrix(), |i, j| prior[(i, j)] > 0.0)?;
    let mut alpha = DMatrix::zeros(d, d);
    for &(i, j) in tree.edges() {
        alpha[(i, j)] = 1.0;
        alpha[(j, i)] = 1.0;
    }
    Ok(alpha)
}

fn evaluate(
    params: &MixtureParams,
    alpha_prev: &EdgeScores,
    cov: &EmpiricalCovariance,
    prior: &EdgeScores,
) -> Result<(EStepState, PartitionedPrecision, f64)> {
    let (state, k_mean) = e_step(params, alpha_prev, cov, prior)?;
    let ll = loglik(params, &state, &k_mean, cov)?;
    Ok((state, k_mean, ll))
}

/// Relative slack below which a decrease of the bound counts as round-off.
const ASCENT_SLACK: f64 = 1e-10;

/// Runs EM from a starting precision: its covariance gives the parameters and its
/// strongest spanning tree the initial `q(T)`.
pub fn fit_from(cov: &EmpiricalCovariance, k0: &PartitionedPrecision, prior: &EdgeScores, opts: &FitOptions) -> Result<FitResult> {
    let mut params = MixtureParams::from_precision(k0)?;
    let alpha0 = support_alpha(k0, prior)?;
    let (mut state, mut k_mean, mut ll) = evaluate(&params, &alpha0, cov, prior)?;
    let initial_loglik = ll;
    let mut trace = Vec::new();
    let mut flagged = Vec::new();
    let mut converged = false;
    let mut best = (params.clone(), state.clone(), k_mean.clone(), ll, 0usize);

    for it in 1..=opts.max_iter {
        let next = m_step(&params, &state, cov).and_then(|np| evaluate(&np, &state.alpha, cov, prior).map(|e| (np, e)));
        let (np, (ns, nk, nl)) = match next {
            Ok(x) => x,
            Err(Error::Divergence { .. }) => return Err(Error::Divergence { iteration: it }),
            Err(e) => return Err(e),
        };
        if nl < ll - ASCENT_SLACK * ll.abs().max(1.0) {
            flagged.push(it);
        }
        let change = (nl - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        params = np;
        state = ns;
        k_mean = nk;
        ll = nl;
        trace.push(ll);
        if ll > best.3 {
            best = (params.clone(), state.clone(), k_mean.clone(), ll, it);
        }
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    let (params, state, _, loglik, best_iteration) = best;
    // The posterior-mean precision under the returned q(T); the start itself when nothing moved.
    let k = if best_iteration == 0 { k0.clone() } else { params.mean_precision(&state.alpha)? };
    let tree_entropy = em::tree_entropy(&state);
    let joint_entropy = em::joint_entropy(&state, &k)?;
    Ok(FitResult {
        alpha: state.alpha,
        log_gamma: state.log_gamma,
        prior: prior.clone(),
        iterations: trace.len(),
        trace,
        initial_loglik,
        loglik,
        tree_entropy,
        joint_entropy,
        converged,
        best_iteration,
        flagged,
        k,
        params: Some(params),
        start: 0,
    })
}

/// Tree posteriors at fitted parameters under another prior.
pub fn posteriors_under(
    params: &MixtureParams,
    alpha: &EdgeScores,
    cov: &EmpiricalCovariance,
    prior: &EdgeScores,
) -> Result<EdgeScores> {
    Ok(e_step(params, alpha, cov, prior)?.0.alpha)
}
