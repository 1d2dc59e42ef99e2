//! Scoring inferred structures against the truth: ROC curves, spurious-edge curves, AUC.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::em::FitResult;
use crate::error::{Error, Result};
use crate::fixed_tree::FixedTreeFit;
use crate::graph::{Graph, SpanningTree};
use crate::kernel::EdgeScores;
use crate::math;
use crate::simulate::GroundTruth;

/// Which graph the scores are compared with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Observed and hidden nodes against the full graph.
    Full,
    /// Observed pairs only, against the marginal graph.
    Marginal,
}

/// Threshold sweep: `thresholds[k]` admits every pair scoring at least that value.
/// The first point is `(0, 0)` with an infinite threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
    pub auc: f64,
}

/// Included spurious fraction against graph density.
#[derive(Debug, Clone, PartialEq)]
pub struct SpuriousCurve {
    pub thresholds: Vec<f64>,
    pub density: Vec<f64>,
    pub fraction: Vec<f64>,
}

/// Pairs `i < j < size` sorted by decreasing score, split into groups of equal score.
fn tie_groups(scores: &EdgeScores, size: usize) -> Vec<(f64, Vec<(usize, usize)>)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(size * size.saturating_sub(1) / 2);
    for i in 0..size {
        for j in (i + 1)..size {
            pairs.push((scores[(i, j)], i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups: Vec<(f64, Vec<(usize, usize)>)> = Vec::new();
    for (s, i, j) in pairs {
        match groups.last_mut() {
            Some((t, g)) if *t == s => g.push((i, j)),
            _ => groups.push((s, alloc::vec![(i, j)])),
        }
    }
    groups
}

fn check_scores(scores: &EdgeScores, needed: usize) -> Result<()> {
    if scores.nrows() != scores.ncols() || scores.nrows() < needed {
        return Err(Error::DimensionMismatch { expected: needed, found: scores.nrows() });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN edge score".into()));
    }
    Ok(())
}

/// ROC of `scores` against `truth` over the pairs of `truth`'s nodes.
///
/// Scores may cover more nodes than `truth` (the marginal target with hidden rows);
/// only the leading `truth.size()` rows and columns are read.
pub fn roc(scores: &EdgeScores, truth: &Graph) -> Result<RocCurve> {
    let size = truth.size();
    check_scores(scores, size)?;
    let positives = truth.edge_count();
    let negatives = size * size.saturating_sub(1) / 2 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateRoc { positives, negatives });
    }
    let mut curve = RocCurve { thresholds: alloc::vec![f64::INFINITY], fpr: alloc::vec![0.0], tpr: alloc::vec![0.0], auc: 0.0 };
    let (mut tp, mut fp) = (0usize, 0usize);
    for (s, group) in tie_groups(scores, size) {
        for (i, j) in group {
            if truth.has_edge(i, j) {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let (x, y) = (fp as f64 / negatives as f64, tp as f64 / positives as f64);
        let (x0, y0) = (curve.fpr[curve.fpr.len() - 1], curve.tpr[curve.tpr.len() - 1]);
        curve.auc += (x - x0) * (y + y0) / 2.0;
        curve.thresholds.push(s);
        curve.fpr.push(x);
        curve.tpr.push(y);
    }
    Ok(curve)
}

/// ROC for a target: the full graph, or the marginal graph on the observed block.
pub fn roc_for(scores: &EdgeScores, truth: &GroundTruth, target: Target) -> Result<RocCurve> {
    match target {
        Target::Full => {
            if scores.nrows() != truth.graph.size() {
                return Err(Error::DimensionMismatch { expected: truth.graph.size(), found: scores.nrows() });
            }
            roc(scores, &truth.graph)
        }
        Target::Marginal => roc(scores, &truth.marginal_graph),
    }
}

/// Marginal-graph edges whose endpoints are both neighbours of one hidden node.
pub fn spurious_edges(truth: &GroundTruth) -> Vec<(usize, usize)> {
    let p = truth.observed();
    let g = &truth.graph;
    truth
        .marginal_graph
        .edges()
        .into_iter()
        .filter(|&(i, j)| (p..g.size()).any(|h| g.has_edge(i, h) && g.has_edge(j, h)))
        .collect()
}

/// Sweep over observed pairs reporting density and the included spurious fraction.
pub fn spurious_curve(scores: &EdgeScores, truth: &GroundTruth) -> Result<SpuriousCurve> {
    let p = truth.observed();
    check_scores(scores, p)?;
    let spurious = spurious_edges(truth);
    if spurious.is_empty() {
        return Err(Error::DegenerateCurve);
    }
    let total = (p * (p - 1) / 2) as f64;
    let mut curve = SpuriousCurve { thresholds: alloc::vec![f64::INFINITY], density: alloc::vec![0.0], fraction: alloc::vec![0.0] };
    let (mut included, mut hit) = (0usize, 0usize);
    for (s, group) in tie_groups(scores, p) {
        included += group.len();
        hit += group.iter().filter(|e| spurious.contains(e)).count();
        curve.thresholds.push(s);
        curve.density.push(included as f64 / total);
        curve.fraction.push(hit as f64 / spurious.len() as f64);
    }
    Ok(curve)
}

/// Scores from posterior edge probabilities over observed then hidden nodes.
///
/// For the marginal target the observed block is returned; with `two_hop`, each observed
/// pair also takes `max_h α_ih α_jh` when that is larger.
pub fn alpha_scores(alpha: &EdgeScores, observed: usize, target: Target, two_hop: bool) -> EdgeScores {
    let (p, d) = (observed, alpha.nrows());
    match target {
        Target::Full => alpha.clone(),
        Target::Marginal => DMatrix::from_fn(p, p, |i, j| {
            if i == j {
                return 0.0;
            }
            let direct = alpha[(i, j)];
            if !two_hop {
                return direct;
            }
            (p..d).map(|h| alpha[(i, h)] * alpha[(j, h)]).fold(direct, f64::max)
        }),
    }
}

/// Scores of a single tree: `|K_ij|` on tree edges, zero elsewhere.
pub fn tree_scores(tree: &SpanningTree, k: &DMatrix<f64>, observed: usize, target: Target) -> EdgeScores {
    let d = k.nrows();
    let full = DMatrix::from_fn(d, d, |i, j| if tree.contains(i, j) { k[(i, j)].abs() } else { 0.0 });
    match target {
        Target::Full => full,
        Target::Marginal => full.view((0, 0), (observed, observed)).into_owned(),
    }
}

/// [`alpha_scores`] of a tree-aggregation fit.
pub fn aggregation_scores(fit: &FitResult, target: Target, two_hop: bool) -> EdgeScores {
    alpha_scores(&fit.alpha, fit.observed(), target, two_hop)
}

/// [`tree_scores`] of a fixed-tree fit.
pub fn fixed_tree_scores(fit: &FixedTreeFit, target: Target) -> EdgeScores {
    tree_scores(&fit.tree, fit.k.matrix(), fit.observed(), target)
}

/// Largest hidden count aligned by exhaustive search; beyond it the matching is greedy.
pub const EXACT_ALIGNMENT_LIMIT: usize = 8;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return alloc::vec![Vec::new()];
    }
    let mut out = Vec::new();
    for perm in permutations(n - 1) {
        for pos in 0..=perm.len() {
            let mut next = perm.clone();
            next.insert(pos, n - 1);
            out.push(next);
        }
    }
    out
}

/// Relabels inferred hidden nodes to match the true ones.
///
/// Inferred hidden `a` is assigned to true hidden `b` maximizing the total attachment
/// overlap `Σ_j scores[p+a, j] [j ~ p+b]` over observed `j`. Ties keep the identity.
pub fn align_hidden(scores: &EdgeScores, truth: &Graph, observed: usize) -> Result<EdgeScores> {
    let d = truth.size();
    if scores.nrows() != d || scores.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, found: scores.nrows() });
    }
    let r = d - observed;
    let overlap = DMatrix::from_fn(r, r, |a, b| {
        (0..observed).filter(|&j| truth.has_edge(j, observed + b)).map(|j| scores[(observed + a, j)]).sum::<f64>()
    });
    let assignment: Vec<usize> = if r <= EXACT_ALIGNMENT_LIMIT {
        let mut best: (f64, Vec<usize>) = ((0..r).map(|a| overlap[(a, a)]).sum(), (0..r).collect());
        for perm in permutations(r) {
            let total: f64 = perm.iter().enumerate().map(|(a, &b)| overlap[(a, b)]).sum();
            if total > best.0 {
                best = (total, perm);
            }
        }
        best.1
    } else {
        let mut cells: Vec<(f64, usize, usize)> = (0..r).flat_map(|a| (0..r).map(move |b| (a, b))).map(|(a, b)| (overlap[(a, b)], a, b)).collect();
        cells.sort_by(|x, y| y.0.total_cmp(&x.0));
        let mut assign = alloc::vec![usize::MAX; r];
        let mut taken = alloc::vec![false; r];
        for (_, a, b) in cells {
            if assign[a] == usize::MAX && !taken[b] {
                assign[a] = b;
                taken[b] = true;
            }
        }
        assign
    };
    // new index of inferred node
    let target: Vec<usize> = (0..d).map(|i| if i < observed { i } else { observed + assignment[i - observed] }).collect();
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            out[(target[i], target[j])] = scores[(i, j)];
        }
    }
    Ok(out)
}

/// Value of a monotone step-and-ramp curve at `x`: linear inside a segment, the highest
/// value where several points share `x`, and the last value past the end.
pub fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let mut value = f64::NEG_INFINITY;
    for k in 0..xs.len() {
        if xs[k] == x {
            value = value.max(ys[k]);
        }
        if k + 1 < xs.len() && xs[k] < x && x < xs[k + 1] {
            let t = (x - xs[k]) / (xs[k + 1] - xs[k]);
            value = value.max(ys[k] + t * (ys[k + 1] - ys[k]));
        }
    }
    if value.is_finite() {
        value
    } else if xs.first().is_some_and(|&x0| x < x0) {
        ys[0]
    } else {
        ys.last().copied().unwrap_or(f64::NAN)
    }
}

/// `m + 1` evenly spaced points on `[0, 1]`.
pub fn unit_grid(m: usize) -> Vec<f64> {
    (0..=m).map(|k| k as f64 / m as f64).collect()
}

/// Pointwise mean of the curves after interpolation on `grid`.
pub fn mean_curve<'a>(curves: impl IntoIterator<Item = (&'a [f64], &'a [f64])>, grid: &[f64]) -> Vec<f64> {
    let mut sum = alloc::vec![0.0; grid.len()];
    let mut count = 0usize;
    for (xs, ys) in curves {
        for (s, &x) in sum.iter_mut().zip(grid) {
            *s += interpolate(xs, ys, x);
        }
        count += 1;
    }
    sum.into_iter().map(|s| s / count as f64).collect()
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, math::sqrt(var))
}
