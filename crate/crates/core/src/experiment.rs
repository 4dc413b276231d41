//! End-to-end runs on synthetic logs: generate, split by day, build and
//! reduce the training graph, encode features, tune.

use crate::error::Result;
use crate::eval::{tune_lambda, Reduction, TestSetScorer, TuningProtocol, TuningResult};
use crate::features::{Artifacts, DesignMatrix, FeatureEncoder, FeatureGroup, FeatureSpec};
use crate::graph::{build_bipartite, filter_graph, FilteredGraph};
use crate::ingest::{
    generate_synthetic, label_observations, split_by_day, LabeledObservation, PlantedStructure, SyntheticConfig,
};
use crate::irm::{irm_run, ClusterAssignments, IrmHyperParams, IrmResult};
use crate::nmf::{nmf_factorize, NmfFactors};
use crate::rng::mix64;
use crate::svd::{truncated_svd, SvdFactors};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticConfig,
    pub top_users: usize,
    pub min_unique_users: usize,
    /// IRM hyperparameters and sweep count.
    pub irm: Option<(IrmHyperParams, usize)>,
    /// SVD rank.
    pub svd: Option<usize>,
    /// NMF rank.
    pub nmf: Option<usize>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synthetic: SyntheticConfig::default(),
            top_users: usize::MAX,
            min_unique_users: 1,
            irm: Some((IrmHyperParams::with_truncation(20), 50)),
            svd: None,
            nmf: None,
            seed: 1,
        }
    }
}

/// Everything up to (not including) feature encoding.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train_obs: Vec<LabeledObservation>,
    pub test_obs: Vec<LabeledObservation>,
    pub planted: PlantedStructure,
    pub graph: FilteredGraph,
    pub irm: Option<IrmResult>,
    pub clusters: Option<ClusterAssignments>,
    pub svd: Option<SvdFactors>,
    pub nmf: Option<NmfFactors>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (log, planted) = generate_synthetic(&cfg.synthetic)?;
    let split = split_by_day(log, cfg.synthetic.test_day())?;
    let train_obs = label_observations(&split.train)?;
    let test_obs = label_observations(&split.test)?;
    let full = build_bipartite(&split.train)?;
    let graph = filter_graph(&full, cfg.top_users, cfg.min_unique_users)?;
    let g = &graph.graph;
    let irm = cfg
        .irm
        .map(|(hyper, sweeps)| irm_run(g, hyper, sweeps, cfg.seed))
        .transpose()?;
    let svd = cfg
        .svd
        .map(|k| truncated_svd(g, k, 50, crate::svd::DEFAULT_TOL, mix64(cfg.seed ^ 1)))
        .transpose()?;
    let nmf = cfg
        .nmf
        .map(|k| {
            nmf_factorize(
                g,
                k,
                crate::nmf::DEFAULT_MAX_ITER,
                crate::nmf::DEFAULT_TOL,
                mix64(cfg.seed ^ 2),
            )
        })
        .transpose()?;
    Ok(Prepared {
        train_obs,
        test_obs,
        planted,
        clusters: irm.as_ref().map(IrmResult::cluster_assignments),
        graph,
        irm,
        svd,
        nmf,
    })
}

/// Design matrices plus the tuning outcome.
#[derive(Debug, Clone)]
pub struct Tuned {
    pub result: TuningResult,
    pub train_x: DesignMatrix,
    pub test_x: DesignMatrix,
}

impl Prepared {
    pub fn artifacts(&self) -> Artifacts<'_> {
        Artifacts {
            graph: Some(&self.graph.graph),
            irm: self.clusters.as_ref(),
            svd: self.svd.as_ref(),
            nmf: self.nmf.as_ref(),
        }
    }

    pub fn reductions(&self) -> Vec<Reduction> {
        let mut r = Vec::new();
        if self.clusters.is_some() {
            r.push(Reduction::irm());
        }
        if self.svd.is_some() {
            r.push(Reduction::svd());
        }
        if self.nmf.is_some() {
            r.push(Reduction::nmf());
        }
        r
    }

    /// f1, f2 and the groups of every available reduction.
    pub fn full_spec(&self) -> Result<FeatureSpec> {
        let mut groups = vec![FeatureGroup::F1, FeatureGroup::F2];
        for r in self.reductions() {
            groups.extend(r.groups);
        }
        FeatureSpec::new(groups, true)
    }

    pub fn encoder(&self) -> Result<FeatureEncoder<'_>> {
        FeatureEncoder::fit(&self.train_obs, self.artifacts(), &self.full_spec()?)
    }

    /// Encodes both splits and runs the selection protocol over all
    /// available reductions.
    pub fn tune(&self, protocol: &TuningProtocol) -> Result<Tuned> {
        let enc = self.encoder()?;
        let train_x = enc.design_matrix(&self.train_obs)?;
        let test_x = enc.design_matrix(&self.test_obs)?;
        let protocol = TuningProtocol {
            reductions: self.reductions(),
            ..protocol.clone()
        };
        let result = tune_lambda(&train_x, &TestSetScorer::new(test_x.clone()), &protocol)?;
        Ok(Tuned {
            result,
            train_x,
            test_x,
        })
    }
}
