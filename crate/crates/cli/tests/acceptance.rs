//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Every criterion is measured at its stated tolerance. The process exits 0 so that
//! `cargo test --workspace` still runs the remaining targets; set `ACCEPTANCE_STRICT=1`
//! to exit 1 when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use treeagg_core::em::{self, FitOptions};
use treeagg_core::eval::{self, Target};
use treeagg_core::fixed_tree::fit_fixed_tree;
use treeagg_core::gaussian::{EmpiricalCovariance, PartitionedPrecision};
use treeagg_core::init::{self, InitOptions};
use treeagg_core::kernel::{self, WeightMatrix};
use treeagg_core::mixture::{self, MixtureParams};
use treeagg_core::seed::{derive_seed, rng_from_seed};
use treeagg_core::selection;
use treeagg_core::simulate::{self, GroundTruth, Topology, TruthSpec, DEFAULT_FLIP, DEFAULT_MARGIN};

type Outcome = (bool, String);

/// Same stream the CLI uses for replicate data.
const DATA_STREAM: u64 = 0xDA7A;

// ---------- brute-force helpers ----------

/// Edge list of the tree with Prüfer code `code` on `n` nodes.
fn prufer_decode(n: usize, code: &[usize]) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &c in code {
        degree[c] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    for &c in code {
        let leaf = (0..n).find(|&v| degree[v] == 1).unwrap();
        edges.push((leaf.min(c), leaf.max(c)));
        degree[leaf] -= 1;
        degree[c] -= 1;
    }
    let rest: Vec<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges
}

/// Every labeled tree on `n ≥ 2` nodes.
fn all_trees(n: usize) -> Vec<Vec<(usize, usize)>> {
    if n == 2 {
        return vec![vec![(0, 1)]];
    }
    let len = n - 2;
    let total = n.pow(len as u32);
    (0..total)
        .map(|mut idx| {
            let code: Vec<usize> = (0..len)
                .map(|_| {
                    let c = idx % n;
                    idx /= n;
                    c
                })
                .collect();
            prufer_decode(n, &code)
        })
        .collect()
}

/// `(Z, marginals)` by summing over all trees.
fn brute_force(w: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let n = w.nrows();
    let mut z = 0.0;
    let mut m = DMatrix::zeros(n, n);
    for t in all_trees(n) {
        let weight: f64 = t.iter().map(|&(i, j)| w[(i, j)]).product();
        z += weight;
        for &(i, j) in &t {
            m[(i, j)] += weight;
            m[(j, i)] += weight;
        }
    }
    if z > 0.0 {
        m /= z;
    }
    (z, m)
}

fn random_weights(n: usize, rng: &mut impl Rng, zero_prob: f64) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = if rng.random::<f64>() < zero_prob { 0.0 } else { rng.random_range(-4.0f64..4.0).exp() };
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    w
}

fn random_spd(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let m = n + 3;
    let a = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0f64..1.0));
    let mut s = &a * a.transpose() / m as f64;
    for i in 0..n {
        s[(i, i)] += 0.05;
    }
    s
}

// ---------- criteria ----------

fn matrix_tree_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = rng_from_seed(1);
    let (mut worst_z, mut worst_m) = (0.0f64, 0.0f64);
    let mut failures = 0;
    for case in 0..200 {
        let n = 3 + case % 5;
        let w = random_weights(n, &mut rng, if case % 4 == 0 { 0.3 } else { 0.0 });
        let (z_bf, m_bf) = brute_force(&w);
        let wm = WeightMatrix::new(w).unwrap();
        let z = kernel::partition_function(&wm).unwrap();
        if z_bf == 0.0 {
            if z != 0.0 {
                failures += 1;
            }
            continue;
        }
        let m = kernel::edge_marginals(&wm).unwrap();
        let ez = ((z - z_bf) / z_bf).abs();
        let em = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| m_bf[(i, j)] > 0.0)
            .map(|(i, j)| ((m[(i, j)] - m_bf[(i, j)]) / m_bf[(i, j)]).abs())
            .fold(0.0, f64::max);
        worst_z = worst_z.max(ez);
        worst_m = worst_m.max(em);
        if ez > 1e-9 || em > 1e-9 {
            failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        failures == 0 && secs < 30.0,
        format!("200 matrices, max rel err Z {worst_z:.2e}, marginals {worst_m:.2e}, {failures} failures, {secs:.2}s"),
    )
}

/// `K_T` built directly from node variances and edge correlations.
fn tree_precision(params: &MixtureParams, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let d = params.dim();
    let mut k = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 / params.var(i) } else { 0.0 });
    for &(i, j) in edges {
        let (vi, vj, rho) = (params.var(i), params.var(j), params.corr(i, j));
        let det = vi * vj * (1.0 - rho * rho);
        let cij = rho * (vi * vj).sqrt();
        k[(i, i)] += vj / det - 1.0 / vi;
        k[(j, j)] += vi / det - 1.0 / vj;
        k[(i, j)] -= cij / det;
        k[(j, i)] -= cij / det;
    }
    k
}

/// Completed second moments under the Gaussian with precision `k`, via its covariance.
fn completed_moments(k: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, p) = (k.nrows(), s.nrows());
    let r = d - p;
    let sigma = k.clone().try_inverse().unwrap();
    if r == 0 {
        return s.clone();
    }
    let s_oo = sigma.view((0, 0), (p, p)).into_owned();
    let s_ho = sigma.view((p, 0), (r, p)).into_owned();
    let s_hh = sigma.view((p, p), (r, r)).into_owned();
    let a = &s_ho * s_oo.clone().try_inverse().unwrap();
    let cond = &s_hh - &a * s_ho.transpose();
    let c_ho = &a * s;
    let c_hh = cond + &a * s * a.transpose();
    let mut c = DMatrix::zeros(d, d);
    c.view_mut((0, 0), (p, p)).copy_from(s);
    c.view_mut((p, 0), (r, p)).copy_from(&c_ho);
    c.view_mut((0, p), (p, r)).copy_from(&c_ho.transpose());
    c.view_mut((p, p), (r, r)).copy_from(&c_hh);
    c
}

fn posterior_exactness() -> Outcome {
    let shapes = [(4, 0), (5, 0), (6, 0), (3, 1), (4, 1), (5, 1), (3, 2), (4, 2), (3, 0), (2, 1)];
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (inst, &(p, r)) in shapes.iter().enumerate() {
        let d = p + r;
        let mut rng = rng_from_seed(derive_seed(2, inst as u64));
        let n = rng.random_range(15..60usize);
        let cov = EmpiricalCovariance::new(random_spd(p, &mut rng), n).unwrap();
        let k0 = init::initial_precision(&cov, r, &InitOptions::default(), 1e-6)
            .or_else(|_| init::random_tree_precision(&cov, r, inst as u64, 1e-6))
            .unwrap();
        let mut params = MixtureParams::from_precision(&k0).unwrap();
        let prior = em::default_prior(p, r);
        let trees: Vec<Vec<(usize, usize)>> =
            all_trees(d).into_iter().filter(|t| t.iter().all(|&(i, j)| i < p || j < p)).collect();
        let mut p_prev = vec![1.0 / trees.len() as f64; trees.len()];
        let marginals = |probs: &[f64]| {
            let mut a = DMatrix::zeros(d, d);
            for (t, &w) in trees.iter().zip(probs) {
                for &(i, j) in t {
                    a[(i, j)] += w;
                    a[(j, i)] += w;
                }
            }
            a
        };
        let mut alpha_prev = marginals(&p_prev);
        for _ in 0..20 {
            let (state, _) = mixture::e_step(&params, &alpha_prev, &cov, &prior).unwrap();
            let k_tree: Vec<DMatrix<f64>> = trees.iter().map(|t| tree_precision(&params, t)).collect();
            let k_mean = k_tree.iter().zip(&p_prev).fold(DMatrix::zeros(d, d), |acc, (k, &w)| acc + k * w);
            let c = completed_moments(&k_mean, cov.matrix());
            let log_w: Vec<f64> = k_tree
                .iter()
                .map(|k| {
                    let logdet = 2.0 * k.clone().cholesky().unwrap().l().diagonal().map(f64::ln).sum();
                    0.5 * n as f64 * (logdet - (k * &c).trace())
                })
                .collect();
            let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let unnorm: Vec<f64> = log_w.iter().map(|v| (v - top).exp()).collect();
            let total: f64 = unnorm.iter().sum();
            let post: Vec<f64> = unnorm.iter().map(|v| v / total).collect();
            let oracle = marginals(&post);
            worst = worst.max((&state.alpha - &oracle).abs().max());
            checked += 1;
            params = mixture::m_step(&params, &state, &cov).unwrap();
            alpha_prev = state.alpha.clone();
            p_prev = post;
        }
    }
    (worst <= 1e-9, format!("{checked} E-steps on 10 instances (p+r <= 6), max |alpha - enumeration| {worst:.2e}"))
}

fn entropy_closed_form() -> Outcome {
    let mut rng = rng_from_seed(3);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let w = random_weights(5, &mut rng, 0.0);
        let mut probs: Vec<f64> =
            all_trees(5).iter().map(|t| t.iter().map(|&(i, j)| w[(i, j)]).product()).collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|v| *v /= z);
        let brute: f64 = -probs.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        let closed = kernel::tree_entropy(&WeightMatrix::new(w).unwrap()).unwrap();
        worst = worst.max((closed - brute).abs());
    }
    (worst < 1e-8, format!("50 five-node configurations, max |H - brute force| {worst:.2e}"))
}

fn random_partitioned(p: usize, r: usize, rng: &mut impl Rng) -> PartitionedPrecision {
    let d = p + r;
    let mut k = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in (i + 1)..d {
            if i >= p && j >= p {
                continue;
            }
            if rng.random::<f64>() < 0.6 {
                let v = rng.random_range(-0.8f64..0.8);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
    }
    for i in 0..d {
        let row: f64 = (0..d).filter(|&j| j != i).map(|j| k[(i, j)].abs()).sum();
        k[(i, i)] = row + rng.random_range(0.2f64..1.5);
    }
    PartitionedPrecision::new(k, p).unwrap()
}

/// Central difference of `f` at `x` with step `h`.
fn slope(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn offdiag_objective(kk: f64, s: f64) -> impl Fn(f64) -> f64 {
    move |x| 0.5 * ((kk - x * x).ln() - 2.0 * x * s)
}

fn mstep_stationarity() -> Outcome {
    let mut rng = rng_from_seed(4);
    let (mut worst_off, mut worst_diag) = (0.0f64, 0.0f64);
    let (mut draws, mut attempts) = (0, 0);
    let mut errors = BTreeMap::new();
    while draws < 100 && attempts < 1000 {
        attempts += 1;
        let p = rng.random_range(3..8usize);
        let r = rng.random_range(0..3usize);
        let k = random_partitioned(p, r, &mut rng);
        let cov = EmpiricalCovariance::new(random_spd(p, &mut rng), rng.random_range(10..200)).unwrap();
        let mut prior = em::default_prior(p, r);
        for i in 0..p + r {
            for j in (i + 1)..p + r {
                let v = prior[(i, j)] * rng.random_range(-2.0f64..2.0).exp();
                prior[(i, j)] = v;
                prior[(j, i)] = v;
            }
        }
        let state = match em::e_step(&k, &cov, &prior) {
            Ok(s) => s,
            Err(e) => {
                *errors.entry(format!("e-step: {e}")).or_insert(0) += 1;
                continue;
            }
        };
        let next = match em::m_step_unprojected(&state, &k, &cov) {
            Ok(n) => n,
            Err(e) => {
                *errors.entry(format!("m-step: {e}")).or_insert(0) += 1;
                continue;
            }
        };
        draws += 1;
        let (d, prev) = (p + r, k.matrix());
        for i in 0..d {
            for j in (i + 1)..d {
                if i >= p && j >= p {
                    continue;
                }
                let s = state.completed_moment(&cov, i, j);
                let x = next[(i, j)];
                let f = offdiag_objective(prev[(i, i)] * prev[(j, j)], s);
                worst_off = worst_off.max(slope(f, x, 1e-5 * x.abs().max(1e-2)).abs());
            }
        }
        // Gauss-Seidel: earlier nodes already hold their new diagonal
        for i in 0..d {
            let t = state.completed_moment(&cov, i, i);
            let couplings: Vec<(f64, f64, f64)> = (0..d)
                .filter(|&q| q != i)
                .map(|q| (next[(i, q)], if q < i { next[(q, q)] } else { prev[(q, q)] }, state.alpha[(i, q)]))
                .collect();
            let f = |x: f64| {
                0.5 * x.ln() - 0.5 * x * t
                    + 0.5 * couplings.iter().map(|&(c, kq, a)| a * (1.0 - c * c / (x * kq)).ln()).sum::<f64>()
            };
            let x = next[(i, i)];
            worst_diag = worst_diag.max(slope(f, x, 1e-5 * x).abs());
        }
    }
    // Path Σ̂_ij → 0: stationarity holds along it and the update tends to 0 continuously
    let mut worst_path = 0.0f64;
    let mut continuous = true;
    for _ in 0..10 {
        let (kii, kjj) = (rng.random_range(0.2f64..5.0), rng.random_range(0.2f64..5.0));
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for e in 1..=16 {
            let s = sign * 10f64.powi(-e);
            let x = em::offdiagonal_update(s, kii, kjj);
            let f = offdiag_objective(kii * kjj, s);
            worst_path = worst_path.max(slope(f, x, 1e-5 * x.abs().max(1e-2)).abs());
            continuous &= (x + s * kii * kjj).abs() <= 1e-6 * kii * kjj || e < 4;
        }
        continuous &= em::offdiagonal_update(0.0, kii, kjj) == 0.0;
    }
    let worst = worst_off.max(worst_diag).max(worst_path);
    (
        draws == 100 && worst < 1e-6 && continuous,
        format!(
            "{draws} draws ({attempts} attempts, rejected {errors:?}), max |dF/dx| off-diagonal {worst_off:.2e}, diagonal {worst_diag:.2e}, s -> 0 path {worst_path:.2e}, continuous at 0: {continuous}"
        ),
    )
}

fn replicate(seed: u64, r: usize) -> (GroundTruth, EmpiricalCovariance) {
    let truth = simulate::generate_truth(&TruthSpec::new(Topology::Tree, 20, r, 10.0, seed)).unwrap();
    let (_, x) = simulate::sample_and_marginalize(&truth.k, 30, derive_seed(seed, DATA_STREAM)).unwrap();
    let cov = EmpiricalCovariance::from_samples(&x).unwrap();
    (truth, cov)
}

struct SuiteRun {
    truth: GroundTruth,
    agg: em::FitResult,
    fixed: treeagg_core::fixed_tree::FixedTreeFit,
}

fn suite() -> Vec<SuiteRun> {
    (0..50u64)
        .into_par_iter()
        .map(|seed| {
            let (truth, cov) = replicate(seed, 1);
            let opts = FitOptions { seed, ..FitOptions::default() };
            let agg = em::fit(&cov, 1, None, &opts).unwrap();
            let fixed = fit_fixed_tree(&cov, 1, &opts).unwrap();
            SuiteRun { truth, agg, fixed }
        })
        .collect()
}

fn likelihood_behavior(runs: &[SuiteRun]) -> Outcome {
    let mut below_start = 0;
    let (mut changes, mut good) = (0usize, 0usize);
    for run in runs {
        let f = &run.agg;
        if f.loglik < f.initial_loglik {
            below_start += 1;
        }
        let mut last = f.initial_loglik;
        for &ll in &f.trace {
            changes += 1;
            if ll - last >= -1e-6 {
                good += 1;
            }
            last = ll;
        }
    }
    let frac = good as f64 / changes as f64;
    (
        below_start == 0 && frac >= 0.95,
        format!("50 fits, {below_start} end below their start, {good}/{changes} changes >= -1e-6 ({:.1}%)", 100.0 * frac),
    )
}

fn model_selection() -> Outcome {
    let start = Instant::now();
    let opts = FitOptions::default();
    let pick = |r_true: usize| -> Vec<(Option<usize>, Option<usize>)> {
        (0..50u64)
            .into_par_iter()
            .map(|seed| {
                let (_, cov) = replicate(seed, r_true);
                let rep = selection::select(&cov, selection::DEFAULT_R_MAX, &opts, seed);
                (rep.selected_bic, rep.selected_icl_t)
            })
            .collect()
    };
    let with_hidden = pick(1);
    let without = pick(0);
    let share = |v: &[(Option<usize>, Option<usize>)], f: &dyn Fn(&(Option<usize>, Option<usize>)) -> bool| {
        v.iter().filter(|x| f(x)).count() as f64 / v.len() as f64
    };
    let bic1 = share(&with_hidden, &|x| x.0 == Some(1));
    let icl1 = share(&with_hidden, &|x| x.1 == Some(1));
    let bic0 = share(&without, &|x| x.0 == Some(0));
    let mut hist = BTreeMap::new();
    for x in &with_hidden {
        *hist.entry(x.0.map_or(-1, |r| r as i64)).or_insert(0) += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    (
        bic1 >= 0.6 && icl1 >= 0.6 && bic0 >= 0.6 && secs < 1200.0,
        format!(
            "r_true=1: BIC picks 1 in {:.0}%, ICL_T in {:.0}% (BIC choices {hist:?}); r_true=0: BIC picks 0 in {:.0}%; {secs:.1}s",
            100.0 * bic1,
            100.0 * icl1,
            100.0 * bic0
        ),
    )
}

fn edge_detection(runs: &[SuiteRun]) -> Outcome {
    let mut full_agg = Vec::new();
    let mut full_fixed = Vec::new();
    let mut marg = Vec::new();
    let mut marg_two_hop = Vec::new();
    for run in runs {
        let auc = |scores: &DMatrix<f64>, target| eval::roc_for(scores, &run.truth, target).unwrap().auc;
        let s = eval::aggregation_scores(&run.agg, Target::Full, false);
        let s = eval::align_hidden(&s, &run.truth.graph, run.truth.observed()).unwrap();
        full_agg.push(auc(&s, Target::Full));
        let s = eval::fixed_tree_scores(&run.fixed, Target::Full);
        let s = eval::align_hidden(&s, &run.truth.graph, run.truth.observed()).unwrap();
        full_fixed.push(auc(&s, Target::Full));
        marg.push(auc(&eval::aggregation_scores(&run.agg, Target::Marginal, false), Target::Marginal));
        marg_two_hop.push(auc(&eval::aggregation_scores(&run.agg, Target::Marginal, true), Target::Marginal));
    }
    let (a, _) = eval::mean_sd(&full_agg);
    let (f, _) = eval::mean_sd(&full_fixed);
    let (m, _) = eval::mean_sd(&marg);
    let (m2, _) = eval::mean_sd(&marg_two_hop);
    (
        a > 0.70 && a > f && m > 0.65,
        format!(
            "full AUC aggregation {a:.3} vs fixed tree {f:.3}; marginal AUC {m:.3} (default direct scores; two-hop scores give {m2:.3})"
        ),
    )
}

fn spurious_property() -> Outcome {
    let mut worst_gap = f64::INFINITY;
    let mut bad = Vec::new();
    for seed in 0..5u64 {
        let truth = simulate::truth_from_graph(&simulate::hub_tree(), &[9], 10.0, DEFAULT_MARGIN, DEFAULT_FLIP, seed)
            .unwrap();
        let sigma = truth.k.matrix().clone().try_inverse().unwrap();
        let p = truth.observed();
        let mut s_o = sigma.view((0, 0), (p, p)).into_owned();
        s_o = (&s_o + s_o.transpose()) * 0.5;
        let cov = EmpiricalCovariance::new(s_o, 100_000).unwrap();
        let fit = em::fit(&cov, 1, None, &FitOptions { seed, ..FitOptions::default() }).unwrap();
        let scores = eval::aggregation_scores(&fit, Target::Marginal, false);
        let spurious = eval::spurious_edges(&truth);
        let true_min = truth
            .marginal_graph
            .edges()
            .into_iter()
            .filter(|e| !spurious.contains(e))
            .map(|(i, j)| scores[(i, j)])
            .fold(f64::INFINITY, f64::min);
        let spur_max = spurious.iter().map(|&(i, j)| scores[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        worst_gap = worst_gap.min(true_min - spur_max);
        if true_min <= spur_max {
            bad.push(seed);
        }
    }
    (
        bad.is_empty(),
        format!("5 weight draws, min(true edge score) - max(spurious score) >= {worst_gap:.3}; failing draws {bad:?}"),
    )
}

fn snr_scaling() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let g = simulate::gen_graph(Topology::Tree, 21, derive_seed(seed, 1)).unwrap();
        let hidden = simulate::choose_hidden(&g, 1, derive_seed(seed, 2)).unwrap();
        let k = simulate::gen_precision(&g, derive_seed(seed, 3), DEFAULT_MARGIN, DEFAULT_FLIP);
        let order = simulate::observed_first_order(21, &hidden);
        let base = PartitionedPrecision::new(DMatrix::from_fn(21, 21, |a, b| k[(order[a], order[b])]), 20).unwrap();
        let at = |eps: f64| simulate::scale_and_snr(&base, eps, DEFAULT_MARGIN).unwrap().snr;
        let one = at(1.0);
        for eps in [1.0, 2.0, 4.0, 10.0] {
            worst = worst.max((at(eps) - eps * eps * one).abs() / (eps * eps * one));
        }
    }
    (worst <= 1e-8, format!("10 precisions, max relative deviation from eps^2 * SNR(1) {worst:.2e}"))
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().display().to_string(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("cfg.json"), r#"{"seed": 5, "simulate": {"replicates": 4}, "fit": {"p0": 0.2}, "select": {"r_max": 2}}"#)
        .unwrap();
    let run = |tag: &str, workers: &str| -> bool {
        let steps: [Vec<String>; 5] = [
            vec!["simulate".into(), "--out".into(), format!("{tag}/ds")],
            vec!["fit".into(), format!("{tag}/ds"), "--out".into(), format!("{tag}/fits")],
            vec!["fit".into(), format!("{tag}/ds"), "--method".into(), "fixed-tree".into(), "--out".into(), format!("{tag}/ft")],
            vec!["select".into(), format!("{tag}/ds/rep_000/data.csv"), "--out".into(), format!("{tag}/sel")],
            vec!["eval".into(), format!("{tag}/ds"), format!("{tag}/fits"), "--out".into(), format!("{tag}/ev")],
        ];
        steps.iter().all(|args| {
            Command::new(env!("CARGO_BIN_EXE_treeagg"))
                .current_dir(d)
                .args(args)
                .args(["--config", "cfg.json", "--workers", workers])
                .status()
                .map(|s| s.success())
                .unwrap_or(false)
        })
    };
    let ok = run("a", "1") && run("b", "1") && run("c", "2");
    if !ok {
        return (false, "a CLI command failed".into());
    }
    let a = snapshot(&d.join("a"));
    let same_b = a == snapshot(&d.join("b"));
    let same_c = a == snapshot(&d.join("c"));
    (
        same_b && same_c,
        format!("simulate, fit, select, eval: {} files; identical on rerun: {same_b}, with other worker count: {same_c}", a.len()),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let (pass, detail) = f();
        println!(
            "criterion {id:>2} {} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        results.push((id, name, (pass, detail)));
    };
    record(1, "matrix-tree exactness", &mut matrix_tree_exactness);
    record(2, "posterior exactness", &mut posterior_exactness);
    record(3, "entropy closed form", &mut entropy_closed_form);
    record(4, "M-step stationarity", &mut mstep_stationarity);
    let mut runs = Vec::new();
    record(5, "likelihood behavior", &mut || {
        runs = suite();
        likelihood_behavior(&runs)
    });
    record(6, "model selection", &mut model_selection);
    record(7, "edge detection", &mut || edge_detection(&runs));
    record(8, "spurious-edge property", &mut spurious_property);
    record(9, "SNR scaling", &mut snr_scaling);
    record(10, "CLI determinism", &mut cli_determinism);
    let failed: Vec<usize> = results.iter().filter(|r| !r.2 .0).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria pass; failing: {failed:?} [{:.1}s]",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
