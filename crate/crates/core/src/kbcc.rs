//! Kernel Bounded Cluster Cores.
//!
//! Two points of the subset are linked when their kernel value exceeds `tau`;
//! the cores are the `k` largest connected components of that graph.
//!
//! Components for every threshold are read off a maximum spanning tree of
//! the complete similarity graph: thresholding the tree's edges yields the
//! same connectivity as thresholding the full graph. Building the tree with
//! Prim's algorithm evaluates each unordered pair exactly once and needs
//! only `O(s)` memory.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{KdcError, Result};
use crate::ikernel::{FeatureMap, IsolationKernel, KernelParams, MeanMap};
use crate::union_find::DisjointSet;

/// `k` disjoint groups of subset indices with their mean maps, largest first.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterCores {
    pub cores: Vec<Vec<usize>>,
    /// Threshold that produced the cores; `None` when they came from another
    /// clustering algorithm.
    pub tau: Option<f64>,
    #[serde(skip)]
    pub mean_maps: Vec<MeanMap>,
}

impl ClusterCores {
    /// Builds cores from precomputed feature maps of the subset.
    pub fn from_groups(
        params: KernelParams,
        maps: &[FeatureMap],
        cores: Vec<Vec<usize>>,
        tau: Option<f64>,
    ) -> Result<Self> {
        let mut mean_maps = Vec::with_capacity(cores.len());
        for (i, core) in cores.iter().enumerate() {
            if core.is_empty() {
                return Err(KdcError::EmptyCluster(i));
            }
            mean_maps.push(MeanMap::from_feature_maps(params, core.iter().map(|&j| &maps[j])));
        }
        Ok(Self { cores, tau, mean_maps })
    }

    pub fn k(&self) -> usize {
        self.cores.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.cores.iter().map(Vec::len).collect()
    }

    pub fn covered(&self) -> usize {
        self.cores.iter().map(Vec::len).sum()
    }
}

/// Smallest shared-cell count `m` with `m / t > tau`.
pub fn min_matches(tau: f64, t: usize) -> usize {
    (0..=t)
        .find(|&m| m as f64 / t as f64 > tau)
        .unwrap_or(t + 1)
}

/// Maximum spanning tree of the complete graph weighted by shared-cell
/// counts.
#[derive(Clone, Debug)]
pub struct SimilarityTree {
    n: usize,
    t: usize,
    /// `(u, v, matches)` tree edges.
    edges: Vec<(usize, usize, usize)>,
    evaluations: u64,
}

impl SimilarityTree {
    pub fn build(maps: &[FeatureMap]) -> Self {
        let n = maps.len();
        let t = maps.first().map_or(0, |m| m.cells().len());
        let mut in_tree = vec![false; n];
        // best[v] = (matches to tree, tree endpoint)
        let mut best: Vec<(usize, usize)> = vec![(0, usize::MAX); n];
        let mut edges = Vec::with_capacity(n.saturating_sub(1));
        let mut evaluations = 0u64;
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut current = 0;

        while !remaining.is_empty() {
            in_tree[current] = true;
            remaining.retain(|&v| v != current);
            let cur_map = &maps[current];
            remaining.par_iter().map(|&v| (v, cur_map.matches(&maps[v]))).collect::<Vec<_>>()
                .into_iter()
                .for_each(|(v, m)| {
                    if best[v].1 == usize::MAX || m > best[v].0 {
                        best[v] = (m, current);
                    }
                });
            evaluations += remaining.len() as u64;
            let next = remaining
                .iter()
                .copied()
                .max_by(|&a, &b| best[a].0.cmp(&best[b].0).then(b.cmp(&a)));
            match next {
                Some(v) => {
                    edges.push((best[v].1, v, best[v].0));
                    current = v;
                }
                None => break,
            }
        }
        Self { n, t, edges, evaluations }
    }

    /// Pairwise kernel evaluations spent building the tree: `n(n-1)/2`.
    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Connected components of the graph with edges `kappa > tau`, largest
    /// first; equal sizes ordered by smallest member. Members are ascending.
    pub fn components(&self, tau: f64) -> Vec<Vec<usize>> {
        let need = min_matches(tau, self.t);
        let mut dsu = DisjointSet::new(self.n);
        for &(u, v, m) in &self.edges {
            if m >= need {
                dsu.union(u, v);
            }
        }
        dsu.groups_by_size()
    }

    /// The `k` largest components at `tau` as cluster cores over `maps`,
    /// the feature maps the tree was built from.
    pub fn cores(&self, params: KernelParams, maps: &[FeatureMap], k: usize, tau: f64) -> Result<ClusterCores> {
        check(maps.len(), k, tau)?;
        take_cores(params, maps, self.components(tau), k, tau)
    }
}

fn take_cores(
    params: KernelParams,
    maps: &[FeatureMap],
    mut components: Vec<Vec<usize>>,
    k: usize,
    tau: f64,
) -> Result<ClusterCores> {
    if components.len() < k {
        return Err(KdcError::TooFewComponents {
            found: components.len(),
            required: k,
            tau,
        });
    }
    components.truncate(k);
    ClusterCores::from_groups(params, maps, components, Some(tau))
}

fn check(points: usize, k: usize, tau: f64) -> Result<()> {
    if k == 0 {
        return Err(KdcError::InvalidArgument("k must be positive".into()));
    }
    if points < k {
        return Err(KdcError::NotEnoughPoints { required: k, found: points });
    }
    if !(0.0..1.0).contains(&tau) {
        return Err(KdcError::InvalidArgument(format!("tau {tau} outside [0, 1)")));
    }
    Ok(())
}

/// The `k` largest kernel-bounded cluster cores of `points` at threshold
/// `tau`.
pub fn kbcc_cluster(model: &IsolationKernel, points: ArrayView2<'_, f64>, k: usize, tau: f64) -> Result<ClusterCores> {
    check(points.nrows(), k, tau)?;
    let maps = model.embed_rows(points)?;
    kbcc_from_maps(model.params(), &maps, k, tau)
}

pub fn kbcc_from_maps(params: KernelParams, maps: &[FeatureMap], k: usize, tau: f64) -> Result<ClusterCores> {
    check(maps.len(), k, tau)?;
    let tree = SimilarityTree::build(maps);
    take_cores(params, maps, tree.components(tau), k, tau)
}

/// Result of one threshold in a sweep.
#[derive(Debug)]
pub struct TauOutcome {
    pub tau: f64,
    pub components: usize,
    pub cores: Result<ClusterCores>,
}

/// `{j / t : j = 1..t-1}`.
pub fn default_tau_grid(t: usize) -> Vec<f64> {
    (1..t).map(|j| j as f64 / t as f64).collect()
}

/// Runs the core extraction at every threshold in `grid`, sharing one
/// spanning tree. Per-threshold failures are kept in the outcome.
pub fn tau_sweep(model: &IsolationKernel, points: ArrayView2<'_, f64>, k: usize, grid: &[f64]) -> Result<Vec<TauOutcome>> {
    let maps = model.embed_rows(points)?;
    tau_sweep_maps(model.params(), &maps, k, grid)
}

pub fn tau_sweep_maps(params: KernelParams, maps: &[FeatureMap], k: usize, grid: &[f64]) -> Result<Vec<TauOutcome>> {
    if grid.is_empty() {
        return Err(KdcError::InvalidArgument("empty tau grid".into()));
    }
    for &tau in grid {
        check(maps.len(), k, tau)?;
    }
    let tree = SimilarityTree::build(maps);
    Ok(grid
        .iter()
        .map(|&tau| {
            let comps = tree.components(tau);
            let count = comps.len();
            TauOutcome {
                tau,
                components: count,
                cores: take_cores(params, maps, comps, k, tau),
            }
        })
        .collect())
}

/// Label-free threshold choice: among thresholds with at least `k`
/// components, the one whose `k` largest components cover the most of the
/// subset; ties go to the smaller threshold.
pub fn select_tau(outcomes: &[TauOutcome]) -> Option<&TauOutcome> {
    outcomes
        .iter()
        .filter(|o| o.cores.is_ok())
        .max_by(|a, b| {
            let ca = a.cores.as_ref().map(ClusterCores::covered).unwrap_or(0);
            let cb = b.cores.as_ref().map(ClusterCores::covered).unwrap_or(0);
            ca.cmp(&cb).then(b.tau.total_cmp(&a.tau))
        })
}
