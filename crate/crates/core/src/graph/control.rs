use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_graph, louvain, spectral_communities, Partition, SignedGraph, DEFAULT_RESTARTS, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::stats::{mann_whitney_one_sided, MeanSd, percentile_interval, Alternative, BootstrapCI, TestResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterMethod {
    Louvain,
    /// Spectral clustering over `k_min..=k_max`, capped at the group size.
    Spectral { k_min: usize, k_max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTestConfig {
    pub method: ClusterMethod,
    pub n_controls: usize,
    pub louvain_restarts: usize,
    pub threshold: f64,
    /// Context resamples for the group's own interval; 0 skips it.
    pub n_bootstrap: usize,
    pub confidence: f64,
}

impl Default for GroupTestConfig {
    fn default() -> Self {
        GroupTestConfig {
            method: ClusterMethod::Louvain,
            n_controls: 100,
            louvain_restarts: DEFAULT_RESTARTS,
            threshold: DEFAULT_THRESHOLD,
            n_bootstrap: 200,
            confidence: 0.95,
        }
    }
}

/// Clustering of one neuron group against size-matched random groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupModularityResult {
    pub group: Vec<usize>,
    pub partition: Partition,
    /// Signed modularity over context resamples of the group.
    pub bootstrap_signed_modularity: Option<MeanSd>,
    pub bootstrap_communities: Option<MeanSd>,
    pub bootstrap_ci: Option<BootstrapCI>,
    pub control_signed_modularity: MeanSd,
    pub control_communities: MeanSd,
    pub control_values: Vec<f64>,
    /// One-sided rank test of the group's signed modularity against the controls.
    pub test: TestResult,
    pub p_value: f64,
    /// Group minus control mean, in control standard deviations.
    pub cohens_d: Option<f64>,
}

fn rows(activations: &DMatrix<f64>, ids: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(ids.len(), activations.ncols(), |r, c| activations[(ids[r], c)])
}

fn cluster(g: &SignedGraph, cfg: &GroupTestConfig, seed: u64) -> Result<Partition> {
    match cfg.method {
        ClusterMethod::Louvain => louvain(g, cfg.louvain_restarts, seed),
        ClusterMethod::Spectral { k_min, k_max } => {
            let k_max = k_max.min(g.n_nodes());
            spectral_communities(g, k_min.min(k_max)..=k_max, seed)
        }
    }
}

fn partition_of(activations: &DMatrix<f64>, ids: &[usize], cfg: &GroupTestConfig, seed: u64) -> Result<Partition> {
    let g = build_graph(&rows(activations, ids), ids, cfg.threshold)?;
    cluster(&g, cfg, seed)
}

/// Clustering of `group` (row indices of `activations`, a
/// `neurons x contexts` matrix) compared with `n_controls` random groups of
/// the same size drawn from the remaining rows.
///
/// The p-value is the exact one-sided Mann-Whitney test of the single group
/// score against the control scores, i.e. the rank of the group among the
/// controls: `(1 + #controls >= group) / (n_controls + 1)` without ties.
pub fn group_clustering_test(
    activations: &DMatrix<f64>,
    group: &[usize],
    cfg: &GroupTestConfig,
    seed: u64,
) -> Result<GroupModularityResult> {
    let n = activations.nrows();
    if group.len() < 2 {
        return Err(Error::invalid("group clustering needs at least 2 neurons"));
    }
    if cfg.n_controls < 2 {
        return Err(Error::config("group clustering needs at least 2 control groups"));
    }
    let mut sorted = group.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != group.len() || sorted.last().is_some_and(|&m| m >= n) {
        return Err(Error::invalid("group has repeated or out-of-range neurons"));
    }
    let population: Vec<usize> = (0..n).filter(|i| sorted.binary_search(i).is_err()).collect();
    if population.len() < group.len() {
        return Err(Error::invalid(format!(
            "group of {} is larger than the {} remaining neurons",
            group.len(),
            population.len()
        )));
    }
    let louvain_seed = seed ^ 0x5EED_0F_C0FFEE;
    let partition = partition_of(activations, group, cfg, louvain_seed)?;

    let controls: Vec<Partition> = (0..cfg.n_controls)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 + i as u64);
            let mut ids: Vec<usize> = sample(&mut rng, population.len(), group.len())
                .into_iter()
                .map(|k| population[k])
                .collect();
            ids.sort_unstable();
            partition_of(activations, &ids, cfg, louvain_seed)
        })
        .collect::<Result<_>>()?;
    let control_values: Vec<f64> = controls.iter().map(|p| p.signed_modularity).collect();
    let control_counts: Vec<f64> = controls.iter().map(|p| p.n_communities as f64).collect();

    let (bootstrap_signed_modularity, bootstrap_communities, bootstrap_ci) = if cfg.n_bootstrap > 0 {
        let c = activations.ncols();
        let group_rows = rows(activations, group);
        let reps: Vec<Partition> = (0..cfg.n_bootstrap)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(u64::MAX - b as u64);
                let cols: Vec<usize> = (0..c).map(|_| rng.gen_range(0..c)).collect();
                let resampled = DMatrix::from_fn(group.len(), c, |r, k| group_rows[(r, cols[k])]);
                let g = build_graph(&resampled, group, cfg.threshold)?;
                cluster(&g, cfg, louvain_seed)
            })
            .collect::<Result<_>>()?;
        let q: Vec<f64> = reps.iter().map(|p| p.signed_modularity).collect();
        let k: Vec<f64> = reps.iter().map(|p| p.n_communities as f64).collect();
        (
            Some(MeanSd::of(&q)),
            Some(MeanSd::of(&k)),
            Some(percentile_interval(partition.signed_modularity, q, cfg.confidence)?),
        )
    } else {
        (None, None, None)
    };

    let test = mann_whitney_one_sided(&[partition.signed_modularity], &control_values, Alternative::Greater)?;
    let control = MeanSd::of(&control_values);
    let cohens_d = (control.sd > 0.0).then(|| (partition.signed_modularity - control.mean) / control.sd);
    Ok(GroupModularityResult {
        group: group.to_vec(),
        p_value: test.p_value,
        test,
        cohens_d,
        partition,
        bootstrap_signed_modularity,
        bootstrap_communities,
        bootstrap_ci,
        control_communities: MeanSd::of(&control_counts),
        control_signed_modularity: control,
        control_values,
    })
}
