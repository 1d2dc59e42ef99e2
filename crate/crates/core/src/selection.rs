//! Choosing the number of hidden nodes with BIC, ICL_T and ICL_{T,X_H}.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::em::{fit, FitOptions, FitResult};
use crate::error::Result;
use crate::gaussian::EmpiricalCovariance;
use crate::math;
use crate::seed::derive_seed;

/// Default largest hidden count explored.
pub const DEFAULT_R_MAX: usize = 3;

/// `(p(p+1)/2 + rp + r) log(n) / 2`.
pub fn penalty(p: usize, r: usize, n: usize) -> f64 {
    let params = p * (p + 1) / 2 + r * p + r;
    params as f64 * math::ln(n as f64) / 2.0
}

/// Seed used for the fit with `r` hidden nodes.
pub fn row_seed(master: u64, r: usize) -> u64 {
    derive_seed(master, 0x5E1E_C700 + r as u64)
}

/// Criteria for one hidden count.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub r: usize,
    pub loglik: f64,
    pub pen: f64,
    pub bic: f64,
    pub icl_t: f64,
    pub icl_txh: f64,
    pub h_tree: f64,
    pub h_joint: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SelectionRow {
    pub fn from_fit(fit: &FitResult, n: usize) -> Self {
        let (p, r) = (fit.observed(), fit.hidden());
        let pen = penalty(p, r, n);
        let bic = fit.loglik - pen;
        Self {
            r,
            loglik: fit.loglik,
            pen,
            bic,
            icl_t: bic - fit.tree_entropy,
            icl_txh: bic - fit.joint_entropy,
            h_tree: fit.tree_entropy,
            h_joint: fit.joint_entropy,
            iterations: fit.iterations,
            converged: fit.converged,
        }
    }
}

/// All rows plus the argmax of each criterion (smallest `r` on ties).
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub rows: Vec<SelectionRow>,
    /// Hidden counts whose fit failed, with the error message; excluded from the argmax.
    pub failures: Vec<(usize, String)>,
    pub selected_bic: Option<usize>,
    pub selected_icl_t: Option<usize>,
    pub selected_icl_txh: Option<usize>,
    pub master_seed: u64,
}

/// Fits one row with its derived seed.
pub fn fit_row(cov: &EmpiricalCovariance, r: usize, opts: &FitOptions, master_seed: u64) -> Result<(SelectionRow, FitResult)> {
    let opts = FitOptions { seed: row_seed(master_seed, r), ..opts.clone() };
    let result = fit(cov, r, None, &opts)?;
    Ok((SelectionRow::from_fit(&result, cov.n()), result))
}

fn argmax(rows: &[SelectionRow], key: impl Fn(&SelectionRow) -> f64) -> Option<usize> {
    let mut best: Option<&SelectionRow> = None;
    for row in rows {
        let v = key(row);
        if !v.is_finite() {
            continue;
        }
        if best.is_none_or(|b| v > key(b) || (v == key(b) && row.r < b.r)) {
            best = Some(row);
        }
    }
    best.map(|b| b.r)
}

/// Builds the report from per-row outcomes in any order.
pub fn assemble(outcomes: Vec<(usize, Result<SelectionRow>)>, master_seed: u64) -> SelectionReport {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (r, outcome) in outcomes {
        match outcome {
            Ok(row) => rows.push(row),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    rows.sort_by_key(|row| row.r);
    failures.sort_by_key(|f| f.0);
    SelectionReport {
        selected_bic: argmax(&rows, |row| row.bic),
        selected_icl_t: argmax(&rows, |row| row.icl_t),
        selected_icl_txh: argmax(&rows, |row| row.icl_txh),
        rows,
        failures,
        master_seed,
    }
}

/// Fits `r = 0..=r_max` sequentially and assembles the report.
pub fn select(cov: &EmpiricalCovariance, r_max: usize, opts: &FitOptions, master_seed: u64) -> SelectionReport {
    let outcomes = (0..=r_max).map(|r| (r, fit_row(cov, r, opts, master_seed).map(|x| x.0))).collect();
    assemble(outcomes, master_seed)
}
