//! The four subcommands. Replicates run on a worker pool; results are gathered in
//! replicate order before anything is written, so output never depends on scheduling.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use treeagg_core::em::{edge_posteriors, fit, PosteriorRoute};
use treeagg_core::eval::{
    align_hidden, alpha_scores, mean_curve, mean_sd, roc_for, spurious_curve, spurious_edges, tree_scores, unit_grid,
    Target,
};
use treeagg_core::fixed_tree::fit_fixed_tree;
use treeagg_core::gaussian::{EmpiricalCovariance, PartitionedPrecision};
use treeagg_core::graph::{Graph, SpanningTree};
use treeagg_core::seed::derive_seed;
use treeagg_core::selection::{assemble, fit_row, SelectionReport};
use treeagg_core::simulate::{generate_truth, sample_and_marginalize, GroundTruth};

use crate::config::{Method, RunConfig, TargetKind, TopologyKind};
use crate::error::{CliError, Result};
use crate::io::{ensure_dir, read_data, read_json, write_data, write_json, write_table, DenseMatrix, Stamp};

/// Stream of a replicate seed used for its sample.
const DATA_STREAM: u64 = 0xDA7A;

/// Everything a command needs besides its positional inputs.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn stamp(&self) -> Stamp {
        Stamp { config_hash: self.config.hash(), master_seed: self.config.seed }
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(w) = self.config.workers {
            b = b.num_threads(w);
        }
        b.build().map_err(|e| CliError::Config(format!("worker pool: {e}")))
    }
}

fn replicate_dir(index: usize) -> String {
    format!("rep_{index:03}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateEntry {
    pub index: usize,
    pub seed: u64,
    pub dir: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub config: RunConfig,
    /// Edge probability of Erdős–Rényi graphs.
    pub density: Option<f64>,
    pub replicates: Vec<ReplicateEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub replicate: usize,
    pub seed: u64,
    pub observed: usize,
    pub hidden: usize,
    pub epsilon: f64,
    pub snr: f64,
    pub effective_snr: f64,
    pub reload: f64,
    /// `order[new] = original label`.
    pub order: Vec<usize>,
    pub graph_edges: Vec<(usize, usize)>,
    pub marginal_edges: Vec<(usize, usize)>,
    pub spurious_edges: Vec<(usize, usize)>,
    pub k: DenseMatrix,
    pub k_marginal: DenseMatrix,
}

impl TruthFile {
    fn new(stamp: Stamp, replicate: usize, t: &GroundTruth) -> Self {
        Self {
            stamp,
            replicate,
            seed: t.seed,
            observed: t.observed(),
            hidden: t.hidden(),
            epsilon: t.epsilon,
            snr: t.snr,
            effective_snr: t.effective_snr,
            reload: t.reload,
            order: t.order.clone(),
            graph_edges: t.graph.edges(),
            marginal_edges: t.marginal_graph.edges(),
            spurious_edges: spurious_edges(t),
            k: t.k.matrix().into(),
            k_marginal: (&t.k_marginal).into(),
        }
    }

    pub fn to_truth(&self) -> Result<GroundTruth> {
        let d = self.observed + self.hidden;
        let bad = |e: treeagg_core::Error| CliError::Data(format!("replicate {}: invalid truth: {e}", self.replicate));
        Ok(GroundTruth {
            graph: Graph::from_edges(d, &self.graph_edges).map_err(bad)?,
            order: self.order.clone(),
            k: PartitionedPrecision::new(self.k.to_matrix()?, self.observed).map_err(bad)?,
            marginal_graph: Graph::from_edges(self.observed, &self.marginal_edges).map_err(bad)?,
            k_marginal: self.k_marginal.to_matrix()?,
            epsilon: self.epsilon,
            snr: self.snr,
            effective_snr: self.effective_snr,
            reload: self.reload,
            seed: self.seed,
        })
    }
}

/// Writes one folder per replicate with `truth.json` and `data.csv`, plus `manifest.json`.
pub fn simulate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let stamp = ctx.stamp();
    let n = cfg.simulate.n;
    let entries: Vec<ReplicateEntry> = (0..cfg.simulate.replicates)
        .map(|index| ReplicateEntry { index, seed: derive_seed(cfg.seed, index as u64), dir: replicate_dir(index) })
        .collect();
    let draws: Vec<Result<(GroundTruth, DMatrix<f64>)>> = ctx.pool()?.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let ctx_err = |s| CliError::numerical(format!("replicate {}", e.index), s);
                let truth = generate_truth(&cfg.truth_spec(e.seed)).map_err(ctx_err)?;
                let (_, obs) = sample_and_marginalize(&truth.k, n, derive_seed(e.seed, DATA_STREAM)).map_err(ctx_err)?;
                Ok((truth, obs))
            })
            .collect()
    });
    ensure_dir(&ctx.out)?;
    for (e, draw) in entries.iter().zip(draws) {
        let (truth, obs) = draw?;
        let dir = ctx.out.join(&e.dir);
        ensure_dir(&dir)?;
        write_json(&dir.join("truth.json"), &TruthFile::new(stamp.clone(), e.index, &truth))?;
        let names: Vec<String> = (1..=truth.observed()).map(|i| format!("x{i}")).collect();
        write_data(&dir.join("data.csv"), &stamp, &names, &obs)?;
    }
    let manifest = DatasetManifest {
        stamp,
        config: cfg.canonical(),
        density: (cfg.simulate.topology == TopologyKind::Erdos).then_some(cfg.simulate.p_edge),
        replicates: entries,
    };
    write_json(&ctx.out.join("manifest.json"), &manifest)
}

/// Fitted model as written to `fit.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub method: Method,
    pub seed: u64,
    pub variables: Vec<String>,
    pub observed: usize,
    pub hidden: usize,
    /// Precision over observed then hidden nodes.
    pub k: DenseMatrix,
    /// Posterior edge probabilities (aggregation only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<DenseMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<f64>,
    /// Posterior edge probabilities with the prior edge probability moved to `p0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_p0: Option<DenseMatrix>,
    /// Edges of the single tree (fixed-tree and Chow-Liu).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree: Option<Vec<(usize, usize)>>,
    pub trace: Vec<f64>,
    pub initial_loglik: f64,
    pub loglik: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree_entropy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_entropy: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_iteration: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flagged: Option<Vec<usize>>,
}

impl FitFile {
    /// Edge scores for a target: `α` for aggregation, `|K|` on the tree otherwise.
    pub fn scores(&self, target: Target, two_hop: bool) -> Result<DMatrix<f64>> {
        let k = self.k.to_matrix()?;
        match (&self.alpha, &self.tree) {
            (Some(alpha), _) => Ok(alpha_scores(&alpha.to_matrix()?, self.observed, target, two_hop)),
            (None, Some(edges)) => {
                let tree = SpanningTree::new(k.nrows(), edges.clone())
                    .map_err(|e| CliError::Data(format!("invalid tree in fit: {e}")))?;
                Ok(tree_scores(&tree, &k, self.observed, target))
            }
            (None, None) => Err(CliError::Data("fit has neither alpha nor tree".into())),
        }
    }
}

fn load_covariance(path: &Path) -> Result<(Vec<String>, EmpiricalCovariance)> {
    let (names, data) = read_data(path)?;
    let cov = EmpiricalCovariance::from_samples(&data)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((names, cov))
}

fn fit_one(ctx: &Context, data: &Path, seed: u64, label: &str) -> Result<FitFile> {
    let cfg = &ctx.config;
    let (variables, cov) = load_covariance(data)?;
    let opts = cfg.fit_options(seed);
    let err = |e| CliError::numerical(label.to_string(), e);
    let stamp = ctx.stamp();
    let observed = cov.dim();
    match cfg.fit.method {
        Method::Aggregation => {
            let f = fit(&cov, cfg.fit.r, None, &opts).map_err(err)?;
            let alpha_p0 = match cfg.fit.p0 {
                Some(p0) => Some((&edge_posteriors(&f, &cov, p0, PosteriorRoute::PerEdge).map_err(err)?).into()),
                None => None,
            };
            Ok(FitFile {
                stamp,
                method: Method::Aggregation,
                seed,
                variables,
                observed,
                hidden: f.hidden(),
                k: f.k.matrix().into(),
                alpha: Some((&f.alpha).into()),
                p0: cfg.fit.p0,
                alpha_p0,
                tree: None,
                trace: f.trace,
                initial_loglik: f.initial_loglik,
                loglik: f.loglik,
                tree_entropy: Some(f.tree_entropy),
                joint_entropy: Some(f.joint_entropy),
                iterations: f.iterations,
                converged: f.converged,
                best_iteration: Some(f.best_iteration),
                flagged: Some(f.flagged),
            })
        }
        Method::FixedTree | Method::ChowLiu => {
            let r = if cfg.fit.method == Method::ChowLiu { 0 } else { cfg.fit.r };
            let f = fit_fixed_tree(&cov, r, &opts).map_err(err)?;
            Ok(FitFile {
                stamp,
                method: cfg.fit.method,
                seed,
                variables,
                observed,
                hidden: f.hidden(),
                k: f.k.matrix().into(),
                alpha: None,
                p0: None,
                alpha_p0: None,
                tree: Some(f.tree.edges().to_vec()),
                trace: f.trace,
                initial_loglik: f.initial_loglik,
                loglik: f.loglik,
                tree_entropy: None,
                joint_entropy: None,
                iterations: f.iterations,
                converged: f.converged,
                best_iteration: None,
                flagged: None,
            })
        }
    }
}

/// Index of the per-replicate outputs of `fit` or `select` run on a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultsManifest {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub command: String,
    pub dataset_hash: String,
    pub replicates: Vec<ReplicateEntry>,
}

fn dataset_manifest(dir: &Path) -> Option<PathBuf> {
    let m = dir.join("manifest.json");
    (dir.is_dir() && m.is_file()).then_some(m)
}

/// Runs `job` on every replicate of a dataset and writes each result with `write`.
fn per_replicate<T: Send>(
    ctx: &Context,
    manifest_path: &Path,
    command: &str,
    job: impl Fn(&Path, u64, &str) -> Result<T> + Sync,
    write: impl Fn(&Path, T) -> Result<()>,
) -> Result<()> {
    let manifest: DatasetManifest = read_json(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let results: Vec<Result<T>> = ctx.pool()?.install(|| {
        manifest
            .replicates
            .par_iter()
            .map(|e| {
                let seed = derive_seed(ctx.config.seed, e.index as u64);
                job(&root.join(&e.dir).join("data.csv"), seed, &format!("replicate {}", e.index))
            })
            .collect()
    });
    ensure_dir(&ctx.out)?;
    for (e, res) in manifest.replicates.iter().zip(results) {
        let dir = ctx.out.join(&e.dir);
        ensure_dir(&dir)?;
        write(&dir, res?)?;
    }
    let index = ResultsManifest {
        stamp: ctx.stamp(),
        command: command.to_string(),
        dataset_hash: manifest.stamp.config_hash,
        replicates: manifest.replicates,
    };
    write_json(&ctx.out.join(format!("{command}.json")), &index)
}

/// Fits a CSV into `fit.json`, or every replicate of a dataset directory.
pub fn fit_command(ctx: &Context, input: &Path) -> Result<()> {
    match dataset_manifest(input) {
        Some(m) => per_replicate(ctx, &m, "fits", |data, seed, label| fit_one(ctx, data, seed, label), |dir, f| {
            write_json(&dir.join("fit.json"), &f)
        }),
        None => {
            let f = fit_one(ctx, input, ctx.config.seed, &input.display().to_string())?;
            ensure_dir(&ctx.out)?;
            write_json(&ctx.out.join("fit.json"), &f)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRowOut {
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

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub rows: Vec<SelectionRowOut>,
    pub failures: Vec<(usize, String)>,
    pub selected_bic: Option<usize>,
    pub selected_icl_t: Option<usize>,
    pub selected_icl_txh: Option<usize>,
}

fn select_one(ctx: &Context, data: &Path, seed: u64) -> Result<SelectionReport> {
    let (_, cov) = load_covariance(data)?;
    let opts = ctx.config.fit_options(seed);
    let outcomes = (0..=ctx.config.select.r_max)
        .into_par_iter()
        .map(|r| (r, fit_row(&cov, r, &opts, seed).map(|x| x.0)))
        .collect();
    Ok(assemble(outcomes, seed))
}

fn write_selection(ctx: &Context, dir: &Path, rep: SelectionReport) -> Result<()> {
    let rows: Vec<SelectionRowOut> = rep
        .rows
        .iter()
        .map(|r| SelectionRowOut {
            r: r.r,
            loglik: r.loglik,
            pen: r.pen,
            bic: r.bic,
            icl_t: r.icl_t,
            icl_txh: r.icl_txh,
            h_tree: r.h_tree,
            h_joint: r.h_joint,
            iterations: r.iterations,
            converged: r.converged,
        })
        .collect();
    let stamp = Stamp { config_hash: ctx.config.hash(), master_seed: rep.master_seed };
    let header = ["r", "loglik", "pen", "bic", "icl_t", "icl_txh", "h_tree", "h_joint", "iterations", "converged"];
    let table = rows.iter().map(|r| {
        vec![
            r.r as f64,
            r.loglik,
            r.pen,
            r.bic,
            r.icl_t,
            r.icl_txh,
            r.h_tree,
            r.h_joint,
            r.iterations as f64,
            f64::from(u8::from(r.converged)),
        ]
    });
    write_table(&dir.join("selection.csv"), &stamp, &header, table)?;
    let file = SelectionFile {
        stamp,
        rows,
        failures: rep.failures,
        selected_bic: rep.selected_bic,
        selected_icl_t: rep.selected_icl_t,
        selected_icl_txh: rep.selected_icl_txh,
    };
    write_json(&dir.join("selection.json"), &file)
}

/// Selection over `r = 0..=r_max` for a CSV or every replicate of a dataset.
pub fn select_command(ctx: &Context, input: &Path) -> Result<()> {
    match dataset_manifest(input) {
        Some(m) => per_replicate(ctx, &m, "selections", |data, seed, _| select_one(ctx, data, seed), |dir, rep| {
            write_selection(ctx, dir, rep)
        }),
        None => {
            let rep = ctx.pool()?.install(|| select_one(ctx, input, ctx.config.seed))?;
            ensure_dir(&ctx.out)?;
            write_selection(ctx, &ctx.out, rep)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetSummary {
    pub target: TargetKind,
    /// `(replicate, AUC)` for every replicate with a defined curve.
    pub auc: Vec<(usize, f64)>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub dataset_hash: String,
    pub method: Option<Method>,
    pub two_hop: bool,
    pub targets: Vec<TargetSummary>,
    pub notes: Vec<String>,
}

struct ReplicateEval {
    rocs: Vec<Option<treeagg_core::eval::RocCurve>>,
    spurious: Option<treeagg_core::eval::SpuriousCurve>,
    notes: Vec<String>,
    method: Method,
}

fn eval_one(ctx: &Context, truth: &GroundTruth, fit: &FitFile, index: usize) -> Result<ReplicateEval> {
    let two_hop = ctx.config.eval.two_hop;
    let mut notes = Vec::new();
    let mut rocs = Vec::new();
    for &t in &ctx.config.eval.targets {
        let roc = match t {
            TargetKind::Full if fit.hidden != truth.hidden() => {
                notes.push(format!(
                    "replicate {index}: full target skipped, fit has {} hidden nodes and the truth {}",
                    fit.hidden,
                    truth.hidden()
                ));
                None
            }
            TargetKind::Full => {
                let s = align_hidden(&fit.scores(Target::Full, two_hop)?, &truth.graph, truth.observed())
                    .map_err(|e| CliError::numerical(format!("replicate {index}"), e))?;
                Some(roc_for(&s, truth, Target::Full))
            }
            TargetKind::Marginal => Some(roc_for(&fit.scores(Target::Marginal, two_hop)?, truth, Target::Marginal)),
        };
        rocs.push(match roc {
            None => None,
            Some(Ok(c)) => Some(c),
            Some(Err(e)) => {
                notes.push(format!("replicate {index}: {t:?} ROC undefined: {e}"));
                None
            }
        });
    }
    let spurious = match spurious_curve(&fit.scores(Target::Marginal, two_hop)?, truth) {
        Ok(c) => Some(c),
        Err(e) => {
            notes.push(format!("replicate {index}: spurious curve omitted: {e}"));
            None
        }
    };
    Ok(ReplicateEval { rocs, spurious, notes, method: fit.method })
}

fn target_name(t: TargetKind) -> &'static str {
    match t {
        TargetKind::Full => "full",
        TargetKind::Marginal => "marginal",
    }
}

/// ROC and spurious-edge curves per replicate, their means and an AUC summary.
pub fn eval_command(ctx: &Context, dataset: &Path, fits: &Path) -> Result<()> {
    let manifest_path = dataset_manifest(dataset)
        .ok_or_else(|| CliError::Data(format!("{}: no manifest.json", dataset.display())))?;
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    let fits_index_path = fits.join("fits.json");
    let fits_index: ResultsManifest = read_json(&fits_index_path)?;
    if fits_index.dataset_hash != manifest.stamp.config_hash {
        return Err(CliError::Data(format!(
            "manifest mismatch: fits were made from dataset {} but {} is {}",
            fits_index.dataset_hash,
            dataset.display(),
            manifest.stamp.config_hash
        )));
    }
    let mut inputs = Vec::with_capacity(manifest.replicates.len());
    for e in &manifest.replicates {
        let fit_path = fits.join(&e.dir).join("fit.json");
        if !fit_path.is_file() {
            return Err(CliError::Data(format!("manifest mismatch: missing fit for replicate {} ({})", e.index, fit_path.display())));
        }
        let truth: TruthFile = read_json(&dataset.join(&e.dir).join("truth.json"))?;
        let fit: FitFile = read_json(&fit_path)?;
        inputs.push((e.clone(), truth.to_truth()?, fit));
    }
    let evals: Vec<Result<ReplicateEval>> =
        ctx.pool()?.install(|| inputs.par_iter().map(|(e, truth, fit)| eval_one(ctx, truth, fit, e.index)).collect());

    let stamp = ctx.stamp();
    let targets = &ctx.config.eval.targets;
    let grid = unit_grid(ctx.config.eval.grid);
    let mut notes = Vec::new();
    let mut per_target: Vec<Vec<(usize, treeagg_core::eval::RocCurve)>> = vec![Vec::new(); targets.len()];
    let mut spurious = Vec::new();
    let mut method = None;
    ensure_dir(&ctx.out)?;
    for ((e, _, _), ev) in inputs.iter().zip(evals) {
        let ev = ev?;
        method = method.or(Some(ev.method));
        let dir = ctx.out.join(&e.dir);
        ensure_dir(&dir)?;
        for (k, roc) in ev.rocs.into_iter().enumerate() {
            if let Some(c) = roc {
                let rows = (0..c.fpr.len()).map(|i| vec![c.thresholds[i], c.fpr[i], c.tpr[i]]);
                write_table(&dir.join(format!("roc_{}.csv", target_name(targets[k]))), &stamp, &["threshold", "fpr", "power"], rows)?;
                per_target[k].push((e.index, c));
            }
        }
        if let Some(c) = ev.spurious {
            let rows = (0..c.density.len()).map(|i| vec![c.thresholds[i], c.density[i], c.fraction[i]]);
            write_table(&dir.join("spurious.csv"), &stamp, &["threshold", "density", "spurious_fraction"], rows)?;
            spurious.push(c);
        }
        notes.extend(ev.notes);
    }

    let mut summaries = Vec::new();
    for (k, curves) in per_target.iter().enumerate() {
        let aucs: Vec<f64> = curves.iter().map(|(_, c)| c.auc).collect();
        if !curves.is_empty() {
            let mean = mean_curve(curves.iter().map(|(_, c)| (&c.fpr[..], &c.tpr[..])), &grid);
            let rows = grid.iter().zip(&mean).map(|(&x, &y)| vec![x, y]);
            write_table(&ctx.out.join(format!("roc_{}_mean.csv", target_name(targets[k]))), &stamp, &["fpr", "power"], rows)?;
        }
        let (mean, sd) = if aucs.is_empty() { (None, None) } else { let (m, s) = mean_sd(&aucs); (Some(m), Some(s)) };
        summaries.push(TargetSummary { target: targets[k], auc: curves.iter().map(|(i, c)| (*i, c.auc)).collect(), mean, sd });
    }
    if !spurious.is_empty() {
        let mean = mean_curve(spurious.iter().map(|c| (&c.density[..], &c.fraction[..])), &grid);
        let rows = grid.iter().zip(&mean).map(|(&x, &y)| vec![x, y]);
        write_table(&ctx.out.join("spurious_mean.csv"), &stamp, &["density", "spurious_fraction"], rows)?;
    }
    let summary = EvalSummary {
        stamp,
        dataset_hash: manifest.stamp.config_hash,
        method,
        two_hop: ctx.config.eval.two_hop,
        targets: summaries,
        notes,
    };
    write_json(&ctx.out.join("summary.json"), &summary)
}
