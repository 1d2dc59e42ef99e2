//! EM over the latent spanning tree and the hidden signals.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gaussian::{log_marginal_tree_weight, EmpiricalCovariance, PartitionedPrecision};
use crate::init::{self, InitOptions};
use crate::kernel::{self, EdgeScores, WeightMatrix};
use crate::linalg;
use crate::math;
use crate::mixture::{self, MixtureParams};
use crate::seed::derive_seed;

/// Cross moments below this magnitude take the analytic limit `K_ij = 0`.
pub const MOMENT_GUARD: f64 = 1e-12;
/// Relative bisection tolerance for the diagonal updates.
pub const DIAGONAL_TOL: f64 = 1e-10;
/// Step halvings tried before an M-step is declared unproductive.
pub const MAX_HALVINGS: usize = 30;

/// Uniform prior over all pairs except hidden-hidden pairs, which get weight 0.
pub fn default_prior(observed: usize, hidden: usize) -> EdgeScores {
    let d = observed + hidden;
    DMatrix::from_fn(d, d, |i, j| if i == j || (i >= observed && j >= observed) { 0.0 } else { 1.0 })
}

/// Moments and tree posterior computed at the current precision.
#[derive(Debug, Clone, PartialEq)]
pub struct EStepState {
    /// `K_H^{-1} K_HO Σ̂`, `r × p`. The hidden-observed cross moment is `-W`.
    pub w_ho: DMatrix<f64>,
    /// `K_H^{-1} K_HO Σ̂ K_OH K_H^{-1}`.
    pub v_h: DMatrix<f64>,
    /// `K_H^{-1} + V_H`, the conditional second moment of the hidden block.
    pub b_h: DMatrix<f64>,
    pub log_gamma: EdgeScores,
    pub alpha: EdgeScores,
    /// `log Z(γ)`.
    pub log_z: f64,
    /// `log Z(π)`.
    pub log_z_prior: f64,
    pub n: usize,
    pub(crate) prior_log: EdgeScores,
}

impl EStepState {
    pub fn observed(&self) -> usize {
        self.w_ho.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w_ho.nrows()
    }

    /// `log A_ij = log α_ij + log Z(γ)`; `A` itself overflows for moderate `n`.
    pub fn log_edge_weights(&self) -> EdgeScores {
        self.alpha.map(|a| math::ln(a) + self.log_z)
    }

    /// Completed second moment `E[X_i X_j | X_O]` per sample, on any pair of nodes.
    pub fn completed_moment(&self, cov: &EmpiricalCovariance, i: usize, j: usize) -> f64 {
        let p = self.observed();
        match (i < p, j < p) {
            (true, true) => cov.get(i, j),
            (true, false) => -self.w_ho[(j - p, i)],
            (false, true) => -self.w_ho[(i - p, j)],
            (false, false) => self.b_h[(i - p, j - p)],
        }
    }
}

/// Conditional hidden moments `(W, V, B)` under the Gaussian with precision `k`.
pub fn hidden_moments(k: &PartitionedPrecision, cov: &EmpiricalCovariance) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let (p, r) = (k.observed(), k.hidden());
    if r == 0 {
        return Ok((DMatrix::zeros(0, p), DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)));
    }
    let k_h_inv = k.hidden_block().try_inverse().ok_or(Error::SingularPrecision)?;
    let k_ho = k.hidden_observed_block();
    let w = &k_h_inv * &k_ho * cov.matrix();
    let mut v = &w * k_ho.transpose() * &k_h_inv;
    linalg::symmetrize(&mut v);
    let mut b = &k_h_inv + &v;
    linalg::symmetrize(&mut b);
    if w.iter().chain(b.iter()).any(|x| !x.is_finite()) {
        return Err(Error::SingularPrecision);
    }
    Ok((w, v, b))
}

/// E-step: hidden moments, per-edge conditional weights and their tree posteriors.
pub fn e_step(k: &PartitionedPrecision, cov: &EmpiricalCovariance, prior: &EdgeScores) -> Result<EStepState> {
    let p = k.observed();
    if cov.dim() != p {
        return Err(Error::DimensionMismatch { expected: p, found: cov.dim() });
    }
    let (w_ho, v_h, b_h) = hidden_moments(k, cov)?;
    let log_gamma = log_marginal_tree_weight(k, prior, cov)?;
    let post = kernel::tree_marginals_from_log(&log_gamma)?;
    if post.is_degenerate() {
        return Err(Error::DegeneratePosterior);
    }
    let prior_log = prior.map(|v| if v > 0.0 { math::ln(v) } else { f64::NEG_INFINITY });
    let log_z_prior = kernel::tree_marginals_from_log(&prior_log)?.log_z;
    Ok(EStepState {
        w_ho,
        v_h,
        b_h,
        log_gamma,
        alpha: post.marginals,
        log_z: post.log_z,
        log_z_prior,
        n: cov.n(),
        prior_log,
    })
}

/// Closed-form off-diagonal update from a completed cross moment `s = E[X_i X_j]`.
///
/// Equals `(1 - √(1 + 4 s² K_ii K_jj)) / (2 s)`, written without the cancellation.
/// For an observed-hidden pair `s = -W`, which gives `(-1 + √(1 + 4 W² K_ii K_jj)) / (2 W)`.
pub fn offdiagonal_update(s: f64, kii: f64, kjj: f64) -> f64 {
    if s.abs() < MOMENT_GUARD {
        return 0.0;
    }
    let kk = kii * kjj;
    -2.0 * s * kk / (1.0 + math::sqrt(1.0 + 4.0 * s * s * kk))
}

/// Solves `1/x + Σ_k α_k c_k² / (x (x K_kk - c_k²)) = target` for `x`.
///
/// `couplings` holds `(c_k, K_kk, α_k)`. The left side decreases strictly on
/// `x > max c_k² / K_kk`, so bisection on that interval finds the unique root.
pub fn diagonal_update(target: f64, couplings: &[(f64, f64, f64)]) -> core::result::Result<f64, &'static str> {
    if !(target > 0.0) || !target.is_finite() {
        return Err("non-positive target moment");
    }
    let mut lower = 0.0f64;
    for &(c, kkk, _) in couplings {
        if c != 0.0 {
            lower = lower.max(c * c / kkk);
        }
    }
    let g = |x: f64| -> f64 {
        let mut v = 1.0 / x;
        for &(c, kkk, a) in couplings {
            if c != 0.0 && a > 0.0 {
                v += a * c * c / (x * (x * kkk - c * c));
            }
        }
        v - target
    };
    if lower == 0.0 {
        return Ok(1.0 / target);
    }
    // Keep every pair strictly inside the region K_ii K_kk > K_ik².
    let lo_bound = lower * (1.0 + 1e-8);
    if g(lo_bound) <= 0.0 {
        return Ok(lo_bound);
    }
    let mut lo = lo_bound;
    let mut hi = (2.0 * lower).max(2.0 / target);
    let mut grown = 0;
    while g(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        grown += 1;
        if grown > 200 || !hi.is_finite() {
            return Err("could not bracket the diagonal root");
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= DIAGONAL_TOL * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// M-step before projection: closed-form off-diagonals from the previous diagonal,
/// then one Gauss-Seidel sweep of the diagonal equations.
pub fn m_step_unprojected(
    state: &EStepState,
    k_prev: &PartitionedPrecision,
    cov: &EmpiricalCovariance,
) -> Result<DMatrix<f64>> {
    let (p, d) = (k_prev.observed(), k_prev.dim());
    let prev = k_prev.matrix();
    let mut k = DMatrix::zeros(d, d);
    for i in 0..d {
        k[(i, i)] = prev[(i, i)];
        if !(prev[(i, i)] > 0.0) {
            return Err(Error::InvalidPrecision { i, j: i });
        }
    }
    for i in 0..d {
        for j in (i + 1)..d {
            if i >= p && j >= p {
                continue;
            }
            let v = offdiagonal_update(state.completed_moment(cov, i, j), prev[(i, i)], prev[(j, j)]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let mut couplings = Vec::with_capacity(d);
    for i in 0..d {
        let target = if i < p { cov.get(i, i) } else { state.b_h[(i - p, i - p)] };
        if !(target > 0.0) || !target.is_finite() {
            return Err(Error::InvalidMoment { index: i, value: target });
        }
        couplings.clear();
        couplings.extend((0..d).filter(|&q| q != i).map(|q| (k[(i, q)], k[(q, q)], state.alpha[(i, q)])));
        k[(i, i)] = diagonal_update(target, &couplings).map_err(|detail| Error::MStepFailure { index: i, detail })?;
    }
    Ok(k)
}

/// Restores the constraints EM relies on: positive definiteness and a diagonal hidden block.
pub fn project_precision(k: DMatrix<f64>, observed: usize, eig_floor: f64) -> Result<(PartitionedPrecision, bool)> {
    let d = k.nrows();
    let (mut m, proj) = linalg::project_positive_definite(&k, eig_floor);
    let mut modified = proj.modified();
    for i in observed..d {
        for j in observed..d {
            if i != j && m[(i, j)] != 0.0 {
                m[(i, j)] = 0.0;
                modified = true;
            }
        }
    }
    if m.clone().cholesky().is_none() {
        let lambda_min = linalg::min_eigenvalue(&m);
        let floor = eig_floor * linalg::spectral_norm(&m).max(f64::MIN_POSITIVE);
        let shift = floor - lambda_min;
        for i in 0..d {
            m[(i, i)] += shift;
        }
        modified = true;
        if m.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite);
        }
    }
    Ok((PartitionedPrecision::new(m, observed)?, modified))
}

/// Full M-step: [`m_step_unprojected`] followed by [`project_precision`].
pub fn m_step(
    state: &EStepState,
    k_prev: &PartitionedPrecision,
    cov: &EmpiricalCovariance,
    eig_floor: f64,
) -> Result<PartitionedPrecision> {
    let raw = m_step_unprojected(state, k_prev, cov)?;
    Ok(project_precision(raw, k_prev.observed(), eig_floor)?.0)
}

/// `H(T | X_O) = log Z_O - Σ α_kl log γ_kl`.
pub fn tree_entropy(state: &EStepState) -> f64 {
    let d = state.alpha.nrows();
    let mut acc = 0.0;
    for i in 0..d {
        for j in (i + 1)..d {
            acc += math::xlny(state.alpha[(i, j)], state.log_gamma[(i, j)]);
        }
    }
    state.log_z - acc
}

/// Per-sample differential entropy of the hidden block: `r log(2πe)/2 - ½ Σ_h log K_hh`.
pub fn hidden_entropy(k: &PartitionedPrecision) -> Result<f64> {
    let p = k.observed();
    let mut acc = 0.5 * k.hidden() as f64 * (math::LN_2PI + 1.0);
    for h in p..k.dim() {
        let v = k.get(h, h);
        if !(v > 0.0) {
            return Err(Error::InvalidPrecision { i: h, j: h });
        }
        acc -= 0.5 * math::ln(v);
    }
    Ok(acc)
}

/// `H(T, X_H | X_O) = H(T | X_O) + r log(2πe)/2 - ½ Σ_h log K_hh`.
pub fn joint_entropy(state: &EStepState, k: &PartitionedPrecision) -> Result<f64> {
    Ok(tree_entropy(state) + hidden_entropy(k)?)
}

/// Observed log-likelihood through `E[log p(X_O, X_H, T) | X_O] + H(X_H, T | X_O)`.
///
/// The hidden entropy enters once per sample. With no hidden nodes this equals
/// `Σ_O (n/2)(log K_ii - K_ii Σ̂_ii - log 2π) + log Z(γ) - log Z(π)`.
pub fn observed_loglik(state: &EStepState, k: &PartitionedPrecision, cov: &EmpiricalCovariance) -> Result<f64> {
    let d = k.dim();
    let half_n = 0.5 * state.n as f64;
    let km = k.matrix();

    let mut log_prior = -state.log_z_prior;
    let mut log_det = 0.0;
    let mut trace = 0.0;
    for i in 0..d {
        log_det += math::ln(km[(i, i)]);
        trace += km[(i, i)] * state.completed_moment(cov, i, i);
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let a = state.alpha[(i, j)];
            if a == 0.0 {
                continue;
            }
            log_prior += a * state.prior_log[(i, j)];
            let ratio = km[(i, j)] * km[(i, j)] / (km[(i, i)] * km[(j, j)]);
            log_det += a * math::ln_1p(-ratio);
            trace += 2.0 * a * km[(i, j)] * state.completed_moment(cov, i, j);
        }
    }
    let complete = log_prior + half_n * (log_det - d as f64 * math::LN_2PI - trace);
    let entropy = tree_entropy(state) + state.n as f64 * hidden_entropy(k)?;
    Ok(complete + entropy)
}

/// Which model the EM iterations maximize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateRule {
    /// Exact per-tree precisions glued from pairwise blocks; the bound never decreases.
    #[default]
    Exact,
    /// One diagonal `K_ii` shared by all trees, closed-form off-diagonals and PD projection.
    SharedDiagonal,
}

/// EM controls.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Relative change of the observed log-likelihood that counts as converged.
    pub tol: f64,
    /// Eigenvalue floor, relative to the largest eigenvalue, of the PD projection.
    pub eig_floor: f64,
    pub seed: u64,
    /// Extra starts from random trees; the best final log-likelihood wins.
    pub restarts: usize,
    /// Halve steps that lower the observed log-likelihood.
    pub safeguard: bool,
    pub init: InitOptions,
    pub rule: UpdateRule,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
            eig_floor: 1e-6,
            seed: 0,
            restarts: 0,
            safeguard: true,
            init: InitOptions::default(),
            rule: UpdateRule::default(),
        }
    }
}

/// Output of [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub k: PartitionedPrecision,
    pub alpha: EdgeScores,
    pub log_gamma: EdgeScores,
    pub prior: EdgeScores,
    /// Observed log-likelihood after each iteration.
    pub trace: Vec<f64>,
    pub initial_loglik: f64,
    /// Observed log-likelihood at the returned precision.
    pub loglik: f64,
    pub tree_entropy: f64,
    pub joint_entropy: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Iteration whose precision is returned (0 = starting point).
    pub best_iteration: usize,
    /// Iterations whose full M-step lowered the log-likelihood (or failed to evaluate).
    pub flagged: Vec<usize>,
    /// Which start produced this result: 0 for the initializer, `k` for the k-th random tree.
    pub start: usize,
    /// Variances and correlations under [`UpdateRule::Exact`]; `k` is then `E_q[K_T]`.
    pub params: Option<MixtureParams>,
}

impl FitResult {
    pub fn observed(&self) -> usize {
        self.k.observed()
    }

    pub fn hidden(&self) -> usize {
        self.k.hidden()
    }
}

fn evaluate(
    k: &PartitionedPrecision,
    cov: &EmpiricalCovariance,
    prior: &EdgeScores,
) -> Result<(EStepState, f64)> {
    let state = e_step(k, cov, prior)?;
    let ll = observed_loglik(&state, k, cov)?;
    if !ll.is_finite() {
        return Err(Error::Divergence { iteration: 0 });
    }
    Ok((state, ll))
}

fn blend(a: &PartitionedPrecision, b: &PartitionedPrecision, t: f64) -> Result<PartitionedPrecision> {
    let m = a.matrix() * (1.0 - t) + b.matrix() * t;
    PartitionedPrecision::new(m, a.observed())
}

/// Runs EM from a given starting precision.
pub fn fit_from(
    cov: &EmpiricalCovariance,
    k0: PartitionedPrecision,
    prior: &EdgeScores,
    opts: &FitOptions,
) -> Result<FitResult> {
    let (mut state, mut ll) = evaluate(&k0, cov, prior).map_err(|e| match e {
        Error::Divergence { .. } => Error::Divergence { iteration: 0 },
        other => other,
    })?;
    let mut k = k0;
    let initial_loglik = ll;
    let mut best = (k.clone(), state.clone(), ll, 0usize);
    let mut trace = Vec::new();
    let mut flagged = Vec::new();
    let mut converged = false;

    for it in 1..=opts.max_iter {
        let candidate = m_step(&state, &k, cov, opts.eig_floor)?;
        let mut accepted = None;
        let mut t = 1.0;
        for attempt in 0..=MAX_HALVINGS {
            let trial = if attempt == 0 { Ok(candidate.clone()) } else { blend(&k, &candidate, t) };
            let outcome = trial.and_then(|kt| evaluate(&kt, cov, prior).map(|(s, l)| (kt, s, l)));
            match outcome {
                Ok((kt, s, l)) => {
                    if attempt == 0 && l < ll {
                        flagged.push(it);
                    }
                    if !opts.safeguard || l >= ll {
                        accepted = Some((kt, s, l));
                        break;
                    }
                }
                Err(e) => {
                    if attempt == 0 {
                        flagged.push(it);
                    }
                    if !opts.safeguard {
                        return Err(match e {
                            Error::Divergence { .. } => Error::Divergence { iteration: it },
                            other => other,
                        });
                    }
                }
            }
            t *= 0.5;
        }
        let Some((kt, s, l)) = accepted else {
            // No ascent along the M-step direction: the current iterate is stationary for EM.
            converged = true;
            break;
        };
        let change = (l - ll).abs() / ll.abs().max(f64::MIN_POSITIVE);
        k = kt;
        state = s;
        ll = l;
        trace.push(ll);
        if ll > best.2 {
            best = (k.clone(), state.clone(), ll, it);
        }
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    let (k, state, loglik, best_iteration) = best;
    let tree_entropy = tree_entropy(&state);
    let joint_entropy = joint_entropy(&state, &k)?;
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
        start: 0,
        params: None,
    })
}

/// Fits `r` hidden nodes: initializer start plus `opts.restarts` random-tree starts.
///
/// `prior` defaults to [`default_prior`].
pub fn fit(cov: &EmpiricalCovariance, r: usize, prior: Option<&EdgeScores>, opts: &FitOptions) -> Result<FitResult> {
    let p = cov.dim();
    let owned;
    let prior = match prior {
        Some(pr) => pr,
        None => {
            owned = default_prior(p, r);
            &owned
        }
    };
    if prior.nrows() != p + r || prior.ncols() != p + r {
        return Err(Error::DimensionMismatch { expected: p + r, found: prior.nrows() });
    }
    if p + r < 2 {
        return Err(Error::InvalidInput("need at least two nodes".into()));
    }

    let k0 = match init::initial_precision(cov, r, &opts.init, opts.eig_floor) {
        Ok(k) => Some(k),
        Err(Error::InitializationFallback) => None,
        Err(e) => return Err(e),
    };
    let mut best: Option<FitResult> = None;
    let mut last_err = None;
    let starts = opts.restarts + usize::from(k0.is_none());
    let mut consider = |res: Result<FitResult>, start: usize| match res {
        Ok(mut f) => {
            f.start = start;
            if best.as_ref().is_none_or(|b| f.loglik > b.loglik) {
                best = Some(f);
            }
        }
        Err(e) => last_err = Some(e),
    };
    let run = |k: PartitionedPrecision| match opts.rule {
        UpdateRule::Exact => mixture::fit_from(cov, &k, prior, opts),
        UpdateRule::SharedDiagonal => fit_from(cov, k, prior, opts),
    };
    if let Some(k0) = k0 {
        consider(run(k0), 0);
    }
    for s in 1..=starts {
        let start = init::random_tree_precision(cov, r, derive_seed(opts.seed, s as u64), opts.eig_floor).and_then(run);
        consider(start, s);
    }
    best.ok_or_else(|| last_err.unwrap_or(Error::InitializationFallback))
}

/// How [`edge_posteriors`] moves the prior edge probability to `p0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorRoute {
    /// Recalibrate the whole prior with [`kernel::calibrate_prior`] and redo the E-step.
    /// Only feasible when `p0 = 2 / (p + r)` and the prior is strictly positive.
    Joint,
    /// Shift each edge's posterior odds by the ratio of target to current prior odds.
    PerEdge,
}

/// Edge posteriors with the prior marginal edge probability moved to `p0`.
pub fn edge_posteriors(
    result: &FitResult,
    cov: &EmpiricalCovariance,
    p0: f64,
    route: PosteriorRoute,
) -> Result<EdgeScores> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::Calibration(alloc::format!("target {p0} outside (0, 1)")));
    }
    match route {
        PosteriorRoute::Joint => {
            let calibrated = kernel::calibrate_prior(&WeightMatrix::new(result.prior.clone())?, p0)?;
            match &result.params {
                Some(params) => mixture::posteriors_under(params, &result.alpha, cov, calibrated.as_matrix()),
                None => Ok(e_step(&result.k, cov, calibrated.as_matrix())?.alpha),
            }
        }
        PosteriorRoute::PerEdge => {
            let prior_log = result.prior.map(|v| if v > 0.0 { math::ln(v) } else { f64::NEG_INFINITY });
            let q = kernel::tree_marginals_from_log(&prior_log)?.marginals;
            let target_odds = p0 / (1.0 - p0);
            let d = result.alpha.nrows();
            Ok(DMatrix::from_fn(d, d, |i, j| {
                let a = result.alpha[(i, j)];
                let qi = q[(i, j)];
                if i == j || a <= 0.0 || qi <= 0.0 {
                    return 0.0;
                }
                if a >= 1.0 || qi >= 1.0 {
                    return 1.0;
                }
                let odds = a / (1.0 - a) * target_odds / (qi / (1.0 - qi));
                odds / (1.0 + odds)
            }))
        }
    }
}
