//! Run configuration: JSON file, then command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use treeagg_core::em::{FitOptions, UpdateRule};
use treeagg_core::init::InitOptions;
use treeagg_core::simulate::{Topology, TruthSpec, DEFAULT_FLIP, DEFAULT_MARGIN};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Aggregation,
    FixedTree,
    ChowLiu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyKind {
    Tree,
    Erdos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Exact,
    SharedDiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Full,
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub topology: TopologyKind,
    /// Edge probability for the Erdős–Rényi topology.
    pub p_edge: f64,
    pub p: usize,
    pub r: usize,
    pub epsilon: f64,
    pub n: usize,
    pub replicates: usize,
    pub margin: f64,
    pub flip: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            topology: TopologyKind::Tree,
            p_edge: 0.1,
            p: 20,
            r: 1,
            epsilon: 10.0,
            n: 30,
            replicates: 50,
            margin: DEFAULT_MARGIN,
            flip: DEFAULT_FLIP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub method: Method,
    pub r: usize,
    /// Prior edge probability for the reported `alpha_p0`; none keeps only `alpha`.
    pub p0: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    pub eig_floor: f64,
    pub restarts: usize,
    pub rule: Rule,
    pub safeguard: bool,
    pub shrinkage: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let d = FitOptions::default();
        Self {
            method: Method::Aggregation,
            r: 1,
            p0: None,
            max_iter: d.max_iter,
            tol: d.tol,
            eig_floor: d.eig_floor,
            restarts: d.restarts,
            rule: Rule::Exact,
            safeguard: d.safeguard,
            shrinkage: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    pub r_max: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self { r_max: treeagg_core::selection::DEFAULT_R_MAX }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub targets: Vec<TargetKind>,
    /// Marginal scores also take `max_h α_ih α_jh`.
    pub two_hop: bool,
    /// Intervals of the grid used for mean curves.
    pub grid: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { targets: vec![TargetKind::Full, TargetKind::Marginal], two_hop: false, grid: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; never changes any output, so it is left out of the hash.
    pub workers: Option<usize>,
    pub simulate: SimulateConfig,
    pub fit: FitConfig,
    pub select: SelectConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: None,
            simulate: SimulateConfig::default(),
            fit: FitConfig::default(),
            select: SelectConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub method: Option<Method>,
    pub r: Option<usize>,
    pub p0: Option<f64>,
}

/// Where `--r` lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RTarget {
    Simulate,
    Fit,
    Select,
    None,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides, r_target: RTarget) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = Some(w);
        }
        if let Some(m) = o.method {
            self.fit.method = m;
        }
        if let Some(p0) = o.p0 {
            self.fit.p0 = Some(p0);
        }
        if let Some(r) = o.r {
            match r_target {
                RTarget::Simulate => self.simulate.r = r,
                RTarget::Fit => self.fit.r = r,
                RTarget::Select => self.select.r_max = r,
                RTarget::None => {}
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let s = &self.simulate;
        if s.p < 2 {
            return bad(format!("simulate.p must be at least 2, got {}", s.p));
        }
        if s.n < 2 {
            return bad(format!("simulate.n must be at least 2, got {}", s.n));
        }
        if s.replicates == 0 {
            return bad("simulate.replicates must be positive".into());
        }
        if !(s.epsilon > 0.0) || !s.epsilon.is_finite() {
            return bad(format!("simulate.epsilon must be positive, got {}", s.epsilon));
        }
        if s.topology == TopologyKind::Erdos && !(s.p_edge > 0.0 && s.p_edge < 1.0) {
            return bad(format!("simulate.p_edge must lie in (0, 1), got {}", s.p_edge));
        }
        if !(s.margin > 0.0) || !(0.0..=1.0).contains(&s.flip) {
            return bad("simulate.margin must be positive and simulate.flip in [0, 1]".into());
        }
        let f = &self.fit;
        if !(f.tol > 0.0) || !(f.eig_floor >= 0.0) || !(f.shrinkage >= 0.0 && f.shrinkage < 1.0) {
            return bad("fit.tol must be positive, fit.eig_floor non-negative, fit.shrinkage in [0, 1)".into());
        }
        if let Some(p0) = f.p0 {
            if !(p0 > 0.0 && p0 < 1.0) {
                return bad(format!("fit.p0 must lie in (0, 1), got {p0}"));
            }
        }
        if self.eval.grid == 0 || self.eval.targets.is_empty() {
            return bad("eval.grid must be positive and eval.targets non-empty".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        Ok(())
    }

    /// The config without settings that cannot change an output.
    pub fn canonical(&self) -> RunConfig {
        RunConfig { workers: None, ..self.clone() }
    }

    /// SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.canonical()).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn fit_options(&self, seed: u64) -> FitOptions {
        let f = &self.fit;
        FitOptions {
            max_iter: f.max_iter,
            tol: f.tol,
            eig_floor: f.eig_floor,
            seed,
            restarts: f.restarts,
            safeguard: f.safeguard,
            init: InitOptions { shrinkage: f.shrinkage, structure: None },
            rule: match f.rule {
                Rule::Exact => UpdateRule::Exact,
                Rule::SharedDiagonal => UpdateRule::SharedDiagonal,
            },
        }
    }

    pub fn truth_spec(&self, seed: u64) -> TruthSpec {
        let s = &self.simulate;
        let topology = match s.topology {
            TopologyKind::Tree => Topology::Tree,
            TopologyKind::Erdos => Topology::Erdos { p_edge: s.p_edge },
        };
        TruthSpec { topology, p: s.p, r: s.r, epsilon: s.epsilon, margin: s.margin, flip: s.flip, seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 7, "fit": {"method": "fixed-tree"}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.fit.method, Method::FixedTree);
        assert_eq!(c.simulate, SimulateConfig::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 7}"#).is_err());
    }

    #[test]
    fn hash_ignores_workers_only() {
        let a = RunConfig::default();
        let b = RunConfig { workers: Some(8), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn overrides_route_r() {
        let mut c = RunConfig::default();
        let o = Overrides { r: Some(2), seed: Some(5), ..Overrides::default() };
        c.apply(&o, RTarget::Select);
        assert_eq!((c.select.r_max, c.fit.r, c.seed), (2, 1, 5));
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = RunConfig::default();
        assert!(c.validate().is_ok());
        c.fit.p0 = Some(1.5);
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }
}
