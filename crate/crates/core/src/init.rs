//! Starting points for EM: triplet clustering into hidden-parent groups, principal
//! component imputation of the hidden signals, and Chow-Liu on the completed covariance.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::Rng;

use crate::em::project_precision;
use crate::error::{Error, Result};
use crate::gaussian::{chow_liu, chow_liu_restricted, tree_precision_from_cov, EmpiricalCovariance, PartitionedPrecision};
use crate::graph::{Graph, SpanningTree};
use crate::math;
use crate::seed::rng_from_seed;

/// Initializer settings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InitOptions {
    /// Shrinkage of the covariance toward its diagonal before initializing (0 = none).
    pub shrinkage: f64,
    /// Graph restricting which triplets may merge; the Chow-Liu tree when absent.
    pub structure: Option<Graph>,
}

/// Log-likelihood of a one-factor model fitted in closed form to a covariance block:
/// loadings `√λ₁ v₁` from the leading eigenpair, noise variances from the residual diagonal.
pub fn one_factor_loglik(block: &DMatrix<f64>, n: usize) -> Result<f64> {
    let m = block.nrows();
    let (lambda, v) = leading_eigenpair(block);
    if !(lambda > 0.0) {
        return Err(Error::DegenerateClique { clique: (0..m).collect() });
    }
    let loadings = v * math::sqrt(lambda);
    let mut sigma = &loadings * loadings.transpose();
    for i in 0..m {
        let noise = (block[(i, i)] - loadings[i] * loadings[i]).max(1e-8 * block[(i, i)]);
        sigma[(i, i)] += noise;
    }
    let chol = sigma.cholesky().ok_or(Error::DegenerateClique { clique: (0..m).collect() })?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| math::ln(*d)).sum::<f64>();
    let trace = (chol.inverse() * block).trace();
    Ok(-0.5 * n as f64 * (m as f64 * math::LN_2PI + log_det + trace))
}

/// Leading eigenpair of a symmetric matrix, eigenvector signed so its first entry is positive.
fn leading_eigenpair(block: &DMatrix<f64>) -> (f64, nalgebra::DVector<f64>) {
    let eig = block.clone().symmetric_eigen();
    let mut best = 0;
    for k in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[k] > eig.eigenvalues[best] {
            best = k;
        }
    }
    let mut v = eig.eigenvectors.column(best).into_owned();
    if v[0] < 0.0 || (v[0] == 0.0 && v.iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0)) {
        v = -v;
    }
    (eig.eigenvalues[best], v)
}

fn sub_block(cov: &DMatrix<f64>, members: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(members.len(), members.len(), |a, b| cov[(members[a], members[b])])
}

/// Penalized score of a group: one-factor model for groups, a free variance for singletons.
fn group_score(cov: &DMatrix<f64>, members: &[usize], n: usize) -> Result<f64> {
    let half_log_n = 0.5 * math::ln(n as f64);
    if members.len() == 1 {
        let v = cov[(members[0], members[0])];
        return Ok(-0.5 * n as f64 * (math::LN_2PI + math::ln(v) + 1.0) - half_log_n);
    }
    let params = 2 * members.len() + 1;
    let ll = one_factor_loglik(&sub_block(cov, members), n).map_err(|_| Error::DegenerateClique { clique: members.to_vec() })?;
    Ok(ll - params as f64 * half_log_n)
}

/// BIC-penalized gain of modelling `members` with one hidden parent instead of independently.
pub fn clique_gain(cov: &EmpiricalCovariance, members: &[usize]) -> Result<f64> {
    let s = cov.matrix();
    let mut base = 0.0;
    for &i in members {
        base += group_score(s, &[i], cov.n())?;
    }
    Ok(group_score(s, members, cov.n())? - base)
}

/// One greedy step of the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct Merge {
    pub parts: Vec<Vec<usize>>,
    pub merged: Vec<usize>,
    pub gain: f64,
    pub cumulative: f64,
}

/// Greedy merge history, the BIC-optimal cut and the groups kept.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CliqueHierarchy {
    pub merges: Vec<Merge>,
    /// Number of merges applied at the chosen cut.
    pub cut: usize,
    /// Groups at the cut, best gain first, at most `r` of them.
    pub cliques: Vec<Vec<usize>>,
}

fn connected(structure: &Graph, a: &[usize], b: &[usize]) -> bool {
    a.iter().any(|&u| b.iter().any(|&v| structure.has_edge(u, v)))
}

/// Covariance-level triplet clustering.
pub fn triplet_clustering_cov(cov: &EmpiricalCovariance, r: usize, structure: &Graph) -> Result<CliqueHierarchy> {
    let p = cov.dim();
    if r == 0 {
        return Ok(CliqueHierarchy::default());
    }
    if p < 3 || structure.size() != p {
        return Err(Error::InitializationFallback);
    }
    let s = cov.matrix();
    let n = cov.n();
    let singles: Vec<f64> = (0..p).map(|i| group_score(s, &[i], n)).collect::<Result<_>>()?;

    let mut triplets = Vec::new();
    for a in 0..p {
        for b in (a + 1)..p {
            for c in (b + 1)..p {
                let eligible = structure.has_edge(a, b) || structure.has_edge(a, c) || structure.has_edge(b, c);
                if eligible {
                    if let Ok(score) = group_score(s, &[a, b, c], n) {
                        triplets.push(([a, b, c], score - singles[a] - singles[b] - singles[c]));
                    }
                }
            }
        }
    }
    if triplets.is_empty() {
        return Err(Error::InitializationFallback);
    }

    let mut clustered = vec![false; p];
    let mut groups: Vec<(Vec<usize>, f64)> = Vec::new(); // members, score
    let mut merges = Vec::new();
    let mut cumulative = 0.0;
    loop {
        // (gain, parts, merged, group indices consumed)
        let mut best: Option<(f64, Vec<Vec<usize>>, Vec<usize>, Vec<usize>, f64)> = None;
        let mut offer = |gain: f64, parts: Vec<Vec<usize>>, merged: Vec<usize>, used: Vec<usize>, score: f64| {
            let better = match &best {
                None => true,
                Some((g, _, m, _, _)) => gain > *g || (gain == *g && merged < *m),
            };
            if better && gain.is_finite() {
                best = Some((gain, parts, merged, used, score));
            }
        };
        for (t, gain) in &triplets {
            if t.iter().all(|&v| !clustered[v]) {
                let score = gain + singles[t[0]] + singles[t[1]] + singles[t[2]];
                offer(*gain, t.iter().map(|&v| vec![v]).collect(), t.to_vec(), Vec::new(), score);
            }
        }
        for (gi, (members, score)) in groups.iter().enumerate() {
            for v in 0..p {
                if clustered[v] || !connected(structure, members, &[v]) {
                    continue;
                }
                let mut merged = members.clone();
                merged.push(v);
                merged.sort_unstable();
                if let Ok(new_score) = group_score(s, &merged, n) {
                    offer(new_score - score - singles[v], vec![members.clone(), vec![v]], merged, vec![gi], new_score);
                }
            }
            for (gj, (other, other_score)) in groups.iter().enumerate().skip(gi + 1) {
                if !connected(structure, members, other) {
                    continue;
                }
                let mut merged = members.clone();
                merged.extend_from_slice(other);
                merged.sort_unstable();
                if let Ok(new_score) = group_score(s, &merged, n) {
                    offer(
                        new_score - score - other_score,
                        vec![members.clone(), other.clone()],
                        merged,
                        vec![gi, gj],
                        new_score,
                    );
                }
            }
        }
        let Some((gain, parts, merged, used, score)) = best else { break };
        for &gi in used.iter().rev() {
            groups.remove(gi);
        }
        for &v in &merged {
            clustered[v] = true;
        }
        groups.push((merged.clone(), score));
        cumulative += gain;
        merges.push(Merge { parts, merged, gain, cumulative });
    }

    let mut cut = 0;
    let mut best_cum = 0.0;
    for (k, m) in merges.iter().enumerate() {
        if m.cumulative > best_cum {
            best_cum = m.cumulative;
            cut = k + 1;
        }
    }
    let cliques = groups_at(&merges, cut);
    let mut scored: Vec<(f64, Vec<usize>)> = cliques
        .into_iter()
        .map(|c| {
            let base: f64 = c.iter().map(|&v| singles[v]).sum();
            let score = group_score(s, &c, n).unwrap_or(f64::NEG_INFINITY);
            (score - base, c)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(core::cmp::Ordering::Equal).then_with(|| a.1.cmp(&b.1)));
    scored.truncate(r);
    Ok(CliqueHierarchy { merges, cut, cliques: scored.into_iter().map(|x| x.1).collect() })
}

/// Groups present after the first `cut` merges.
fn groups_at(merges: &[Merge], cut: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for m in &merges[..cut] {
        groups.retain(|g| !m.parts.contains(g));
        groups.push(m.merged.clone());
    }
    groups
}

/// Triplet clustering on raw samples (rows are observations).
pub fn triplet_clustering(data: &DMatrix<f64>, r: usize, structure: Option<&Graph>) -> Result<CliqueHierarchy> {
    let cov = EmpiricalCovariance::from_samples(data)?;
    let default;
    let structure = match structure {
        Some(g) => g,
        None => {
            default = chow_liu(&cov)?.to_graph();
            &default
        }
    };
    triplet_clustering_cov(&cov, r, structure)
}

/// Exactly `r` disjoint hidden-parent groups: the hierarchy's cliques, extended with the best
/// remaining disjoint triplets when the cut produced fewer.
pub fn hidden_groups(cov: &EmpiricalCovariance, r: usize, hierarchy: &CliqueHierarchy) -> Result<Vec<Vec<usize>>> {
    let p = cov.dim();
    let mut groups: Vec<Vec<usize>> = hierarchy.cliques.iter().take(r).cloned().collect();
    let mut used = vec![false; p];
    for g in &groups {
        for &v in g {
            used[v] = true;
        }
    }
    while groups.len() < r {
        let free: Vec<usize> = (0..p).filter(|&v| !used[v]).collect();
        let mut best: Option<(f64, [usize; 3])> = None;
        for a in 0..free.len() {
            for b in (a + 1)..free.len() {
                for c in (b + 1)..free.len() {
                    let t = [free[a], free[b], free[c]];
                    if let Ok(gain) = clique_gain(cov, &t) {
                        if best.is_none_or(|(g, _)| gain > g) {
                            best = Some((gain, t));
                        }
                    }
                }
            }
        }
        let Some((_, t)) = best else { return Err(Error::InitializationFallback) };
        for &v in &t {
            used[v] = true;
        }
        groups.push(t.to_vec());
    }
    Ok(groups)
}

/// Appends, per group, the first principal component score of its (centered) columns,
/// scaled to unit variance and signed so the loading on the lowest-index member is positive.
pub fn impute_hidden(data: &DMatrix<f64>, cliques: &[Vec<usize>]) -> Result<DMatrix<f64>> {
    let (n, p) = data.shape();
    if n < 2 {
        return Err(Error::InvalidInput(alloc::format!("insufficient data: {n} samples")));
    }
    let mut centered = data.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
    }
    let mut out = DMatrix::zeros(n, p + cliques.len());
    out.view_mut((0, 0), (n, p)).copy_from(data);
    for (h, clique) in cliques.iter().enumerate() {
        let (lambda, v) = clique_component(&centered.transpose() * &centered / n as f64, clique)?;
        for row in 0..n {
            let mut acc = 0.0;
            for (a, &c) in clique.iter().enumerate() {
                acc += v[a] * centered[(row, c)];
            }
            out[(row, p + h)] = acc / math::sqrt(lambda);
        }
    }
    Ok(out)
}

fn clique_component(cov: DMatrix<f64>, clique: &[usize]) -> Result<(f64, nalgebra::DVector<f64>)> {
    let mut sorted = clique.to_vec();
    sorted.sort_unstable();
    if clique.len() < 2 || sorted != clique || sorted.windows(2).any(|w| w[0] == w[1]) || sorted.iter().any(|&c| c >= cov.nrows()) {
        return Err(Error::InvalidInput(alloc::format!("clique {clique:?} must list at least two distinct sorted nodes")));
    }
    let block = sub_block(&cov, clique);
    let scale = block.diagonal().iter().fold(0.0f64, |a, v| a.max(*v));
    let (lambda, v) = leading_eigenpair(&block);
    if !(lambda > 1e-12 * scale) || !(scale > 0.0) {
        return Err(Error::DegenerateClique { clique: clique.to_vec() });
    }
    Ok((lambda, v))
}

/// Covariance of the observed variables together with the imputed components of [`impute_hidden`].
pub fn complete_covariance(cov: &EmpiricalCovariance, cliques: &[Vec<usize>]) -> Result<DMatrix<f64>> {
    let p = cov.dim();
    let r = cliques.len();
    let s = cov.matrix();
    let mut out = DMatrix::zeros(p + r, p + r);
    out.view_mut((0, 0), (p, p)).copy_from(s);
    let comps: Vec<(f64, nalgebra::DVector<f64>)> =
        cliques.iter().map(|c| clique_component(s.clone(), c)).collect::<Result<_>>()?;
    for (h, (clique, (lambda, v))) in cliques.iter().zip(&comps).enumerate() {
        let scale = 1.0 / math::sqrt(*lambda);
        for j in 0..p {
            let c: f64 = clique.iter().enumerate().map(|(a, &m)| v[a] * s[(m, j)]).sum::<f64>() * scale;
            out[(p + h, j)] = c;
            out[(j, p + h)] = c;
        }
        for (g, (other, (lambda2, v2))) in cliques.iter().zip(&comps).enumerate() {
            let mut c = 0.0;
            for (a, &m) in clique.iter().enumerate() {
                for (b, &q) in other.iter().enumerate() {
                    c += v[a] * s[(m, q)] * v2[b];
                }
            }
            out[(p + h, p + g)] = c * scale / math::sqrt(*lambda2);
        }
        out[(p + h, p + h)] = 1.0;
    }
    Ok(out)
}

fn hidden_failure(e: Error, p: usize) -> Error {
    match e {
        Error::DegenerateClique { .. } => Error::InitializationFallback,
        Error::PerfectCorrelation { i, j, .. } if i.max(j) >= p => Error::InitializationFallback,
        other => other,
    }
}

fn tree_start(tree: &SpanningTree, completed: &DMatrix<f64>, p: usize, eig_floor: f64) -> Result<PartitionedPrecision> {
    let tp = tree_precision_from_cov(tree, completed).map_err(|e| hidden_failure(e, p))?;
    Ok(project_precision(tp.into_parts().1, p, eig_floor)?.0)
}

/// The initializer's precision: Chow-Liu (no hidden-hidden edges) on the completed covariance.
pub fn initial_precision(
    cov: &EmpiricalCovariance,
    r: usize,
    opts: &InitOptions,
    eig_floor: f64,
) -> Result<PartitionedPrecision> {
    let cov = if opts.shrinkage > 0.0 { cov.shrunk(opts.shrinkage)? } else { cov.clone() };
    let p = cov.dim();
    if r == 0 {
        return tree_start(&chow_liu(&cov)?, cov.matrix(), p, eig_floor);
    }
    let default;
    let structure = match &opts.structure {
        Some(g) => g,
        None => {
            default = chow_liu(&cov)?.to_graph();
            &default
        }
    };
    let hierarchy = triplet_clustering_cov(&cov, r, structure)?;
    let groups = hidden_groups(&cov, r, &hierarchy)?;
    let completed = complete_covariance(&cov, &groups).map_err(|e| hidden_failure(e, p))?;
    let tree = chow_liu_restricted(&completed, |i, j| i < p || j < p).map_err(|e| hidden_failure(e, p))?;
    tree_start(&tree, &completed, p, eig_floor)
}

/// Attempts at drawing a usable random tree before giving up.
const RANDOM_TREE_ATTEMPTS: usize = 1000;

/// A start from a uniformly random tree whose hidden nodes are pairwise non-adjacent with
/// degree at least two, each imputed from its own tree neighbours.
pub fn random_tree_precision(cov: &EmpiricalCovariance, r: usize, seed: u64, eig_floor: f64) -> Result<PartitionedPrecision> {
    let p = cov.dim();
    let d = p + r;
    let mut rng = rng_from_seed(seed);
    for _ in 0..RANDOM_TREE_ATTEMPTS {
        let tree = if d == 2 {
            SpanningTree::new(2, vec![(0, 1)])?
        } else {
            let code: Vec<usize> = (0..d - 2).map(|_| rng.random_range(0..d)).collect();
            SpanningTree::from_prufer(d, &code)?
        };
        if tree.edges().iter().any(|&(i, j)| i >= p && j >= p) || (p..d).any(|h| tree.degree(h) < 2) {
            continue;
        }
        let groups: Vec<Vec<usize>> = (p..d)
            .map(|h| {
                let g = tree.to_graph();
                g.neighbors(h).collect()
            })
            .collect();
        let completed = match complete_covariance(cov, &groups) {
            Ok(c) => c,
            Err(Error::DegenerateClique { .. }) => continue,
            Err(e) => return Err(e),
        };
        match tree_start(&tree, &completed, p, eig_floor) {
            Ok(k) => return Ok(k),
            Err(Error::InitializationFallback) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::InitializationFallback)
}
