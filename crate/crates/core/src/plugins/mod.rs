//! Step-2 clustering algorithms.
//!
//! Every algorithm implements [`InitialClusterer`]: given the subset, its
//! kernel feature maps and `k`, produce `k` initial clusters as
//! [`ClusterCores`]. The orchestration code never looks past this trait.

pub mod density_peak;
pub mod lloyd;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::dataio::RngStream;
use crate::error::{KdcError, Result};
use crate::ikernel::{FeatureMap, IsolationKernel, KernelParams};
use crate::kbcc::{self, ClusterCores};
use lloyd::{Euclidean, KernelFeatures, LloydRun};

pub use density_peak::{density_peak as density_peak_run, pairwise_distance_percentile, DensityPeakRun};

/// Cluster id per subset point; `None` for points left out (cluster cores
/// need not cover the subset).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InitialClustering {
    pub assignments: Vec<Option<usize>>,
    pub k: usize,
}

impl InitialClustering {
    pub fn from_labels(labels: &[usize], k: usize) -> Self {
        Self {
            assignments: labels.iter().map(|&l| Some(l)).collect(),
            k,
        }
    }

    pub fn from_cores(cores: &ClusterCores, subset_len: usize) -> Self {
        let mut assignments = vec![None; subset_len];
        for (c, core) in cores.cores.iter().enumerate() {
            for &i in core {
                assignments[i] = Some(c);
            }
        }
        Self { assignments, k: cores.k() }
    }

    /// Members of each cluster id, ascending.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.k];
        for (i, a) in self.assignments.iter().enumerate() {
            if let Some(c) = a {
                groups[*c].push(i);
            }
        }
        groups
    }
}

fn require_k(len: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(KdcError::InvalidArgument("k must be positive".into()));
    }
    if len < k {
        return Err(KdcError::NotEnoughPoints { required: k, found: len });
    }
    Ok(())
}

/// Lloyd's k-means with k-means++ seeding.
pub fn kmeans(points: ArrayView2<'_, f64>, k: usize, max_iters: usize, stream: &RngStream) -> Result<(InitialClustering, LloydRun)> {
    require_k(points.nrows(), k)?;
    let run = lloyd::lloyd(&Euclidean { points }, k, max_iters, stream);
    Ok((InitialClustering::from_labels(&run.assignments, k), run))
}

/// Kernel k-means under the isolation kernel, run as Lloyd iterations on the
/// explicit (finite) feature vectors.
pub fn kernel_kmeans(params: KernelParams, maps: &[FeatureMap], k: usize, max_iters: usize, stream: &RngStream) -> Result<(InitialClustering, LloydRun)> {
    require_k(maps.len(), k)?;
    let space = KernelFeatures {
        maps,
        psi: params.psi,
        t: params.t,
    };
    let run = lloyd::lloyd(&space, k, max_iters, stream);
    Ok((InitialClustering::from_labels(&run.assignments, k), run))
}

pub fn density_peak(points: ArrayView2<'_, f64>, k: usize, dc_fraction: f64) -> Result<(InitialClustering, DensityPeakRun)> {
    require_k(points.nrows(), k)?;
    if !(0.0..=1.0).contains(&dc_fraction) {
        return Err(KdcError::InvalidArgument(format!("cutoff percentile {dc_fraction} outside [0, 1]")));
    }
    let run = density_peak::density_peak(points, k, dc_fraction);
    Ok((InitialClustering::from_labels(&run.labels, k), run))
}

/// Groups subset points by cluster id and computes one mean map per id.
pub fn to_cluster_cores(params: KernelParams, maps: &[FeatureMap], ic: &InitialClustering) -> Result<ClusterCores> {
    if ic.k == 0 || ic.assignments.iter().all(Option::is_none) {
        return Err(KdcError::InvalidArgument("empty initial clustering".into()));
    }
    ClusterCores::from_groups(params, maps, ic.groups(), None)
}

/// Everything a step-2 algorithm may look at.
pub struct SubsetView<'a> {
    pub model: &'a IsolationKernel,
    pub points: ArrayView2<'a, f64>,
    pub maps: &'a [FeatureMap],
}

/// Work done in step 2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTwoStats {
    /// Pairwise kernel or distance evaluations.
    pub pair_evaluations: u64,
    pub iterations: usize,
}

/// A step-2 clustering algorithm.
pub trait InitialClusterer: Send + Sync {
    fn name(&self) -> &'static str;
    fn cluster(&self, subset: &SubsetView<'_>, k: usize, stream: &RngStream) -> Result<(ClusterCores, StepTwoStats)>;
}

/// How the core threshold is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum TauChoice {
    Fixed(f64),
    /// Label-free choice over the `j/t` grid.
    Auto,
}

pub struct KbccPlugin {
    pub tau: TauChoice,
}

impl InitialClusterer for KbccPlugin {
    fn name(&self) -> &'static str {
        "kbcc"
    }

    fn cluster(&self, subset: &SubsetView<'_>, k: usize, _stream: &RngStream) -> Result<(ClusterCores, StepTwoStats)> {
        let params = subset.model.params();
        let s = subset.maps.len() as u64;
        let stats = StepTwoStats {
            pair_evaluations: s * s.saturating_sub(1) / 2,
            iterations: 1,
        };
        let cores = match self.tau {
            TauChoice::Fixed(tau) => kbcc::kbcc_from_maps(params, subset.maps, k, tau)?,
            TauChoice::Auto => {
                let grid = kbcc::default_tau_grid(params.t);
                let outcomes = kbcc::tau_sweep_maps(params, subset.maps, k, &grid)?;
                let best = kbcc::select_tau(&outcomes).ok_or(KdcError::TooFewComponents {
                    found: outcomes.iter().map(|o| o.components).max().unwrap_or(0),
                    required: k,
                    tau: *grid.last().unwrap_or(&0.0),
                })?;
                best.cores.as_ref().map_err(|_| KdcError::InvalidArgument("unreachable".into()))?.clone()
            }
        };
        Ok((cores, stats))
    }
}

pub struct KMeansPlugin {
    pub max_iters: usize,
}

impl InitialClusterer for KMeansPlugin {
    fn name(&self) -> &'static str {
        "kmeans"
    }

    fn cluster(&self, subset: &SubsetView<'_>, k: usize, stream: &RngStream) -> Result<(ClusterCores, StepTwoStats)> {
        let (ic, run) = kmeans(subset.points, k, self.max_iters, stream)?;
        let cores = to_cluster_cores(subset.model.params(), subset.maps, &ic)?;
        Ok((cores, StepTwoStats { pair_evaluations: run.distance_evaluations, iterations: run.iterations }))
    }
}

pub struct KernelKMeansPlugin {
    pub max_iters: usize,
}

impl InitialClusterer for KernelKMeansPlugin {
    fn name(&self) -> &'static str {
        "kernel-kmeans"
    }

    fn cluster(&self, subset: &SubsetView<'_>, k: usize, stream: &RngStream) -> Result<(ClusterCores, StepTwoStats)> {
        let (ic, run) = kernel_kmeans(subset.model.params(), subset.maps, k, self.max_iters, stream)?;
        let cores = to_cluster_cores(subset.model.params(), subset.maps, &ic)?;
        Ok((cores, StepTwoStats { pair_evaluations: run.distance_evaluations, iterations: run.iterations }))
    }
}

pub struct DensityPeakPlugin {
    pub dc_fraction: f64,
}

impl InitialClusterer for DensityPeakPlugin {
    fn name(&self) -> &'static str {
        "dp"
    }

    fn cluster(&self, subset: &SubsetView<'_>, k: usize, _stream: &RngStream) -> Result<(ClusterCores, StepTwoStats)> {
        let (ic, _) = density_peak(subset.points, k, self.dc_fraction)?;
        let cores = to_cluster_cores(subset.model.params(), subset.maps, &ic)?;
        let s = subset.points.nrows() as u64;
        // cutoff, density and nearest-denser passes each touch every pair
        Ok((cores, StepTwoStats { pair_evaluations: 3 * s * s.saturating_sub(1) / 2, iterations: 1 }))
    }
}

/// Serializable plugin choice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum PluginConfig {
    Kbcc { tau: TauChoice },
    Kmeans { max_iters: usize },
    KernelKmeans { max_iters: usize },
    Dp { dc_fraction: f64 },
}

impl PluginConfig {
    pub const DEFAULT_MAX_ITERS: usize = 100;
    pub const DEFAULT_DC_FRACTION: f64 = 0.02;

    /// Parses a CLI plugin name with default settings.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "kbcc" => Self::Kbcc { tau: TauChoice::Auto },
            "kmeans" | "k-means" => Self::Kmeans { max_iters: Self::DEFAULT_MAX_ITERS },
            "kernel-kmeans" => Self::KernelKmeans { max_iters: Self::DEFAULT_MAX_ITERS },
            "dp" => Self::Dp { dc_fraction: Self::DEFAULT_DC_FRACTION },
            _ => return None,
        })
    }

    pub fn build(&self) -> Box<dyn InitialClusterer> {
        match *self {
            Self::Kbcc { tau } => Box::new(KbccPlugin { tau }),
            Self::Kmeans { max_iters } => Box::new(KMeansPlugin { max_iters }),
            Self::KernelKmeans { max_iters } => Box::new(KernelKMeansPlugin { max_iters }),
            Self::Dp { dc_fraction } => Box::new(DensityPeakPlugin { dc_fraction }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::Rng;

    fn wcss(points: ArrayView2<'_, f64>, labels: &[usize], k: usize) -> f64 {
        let d = points.ncols();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for j in 0..d {
                sums[l][j] += points[[i, j]];
            }
        }
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| (0..d).map(|j| (points[[i, j]] - sums[l][j] / counts[l] as f64).powi(2)).sum::<f64>())
            .sum()
    }

    #[test]
    fn kmeans_k1_is_the_mean() {
        let pts = array![[0.0, 0.0], [2.0, 0.0], [4.0, 6.0]];
        let (ic, run) = kmeans(pts.view(), 1, 100, &RngStream::new(1, "km")).unwrap();
        assert!(ic.assignments.iter().all(|a| *a == Some(0)));
        assert!((run.objective() - wcss(pts.view(), &[0, 0, 0], 1)).abs() < 1e-12);
    }

    #[test]
    fn kmeans_two_singletons() {
        let pts = array![[0.0, 0.0], [100.0, 100.0]];
        let (ic, _) = kmeans(pts.view(), 2, 100, &RngStream::new(1, "km")).unwrap();
        assert_ne!(ic.assignments[0], ic.assignments[1]);
        assert!(kmeans(pts.view(), 3, 100, &RngStream::new(1, "km")).is_err());
    }

    #[test]
    fn kmeans_matches_exhaustive_optimum() {
        let ds = synth::gaussian_blobs(5, 2, &[4, 4, 4], 100.0, 1.0);
        let pts = ds.points();
        // exhaustive over 3^12 labelings
        let mut best = f64::INFINITY;
        let mut labels = vec![0usize; 12];
        for code in 0..3usize.pow(12) {
            let mut c = code;
            for l in labels.iter_mut() {
                *l = c % 3;
                c /= 3;
            }
            let mut used = [false; 3];
            labels.iter().for_each(|&l| used[l] = true);
            if used.iter().all(|&u| u) {
                best = best.min(wcss(pts, &labels, 3));
            }
        }
        let (_, run) = kmeans(pts, 3, 100, &RngStream::new(2, "km")).unwrap();
        assert!((run.objective() - best).abs() < 1e-9, "{} vs {best}", run.objective());
    }

    #[test]
    fn kmeans_objective_never_increases() {
        let mut rng = RngStream::new(3, "pts").rng();
        let pts = Array2::from_shape_fn((300, 3), |_| rng.random::<f64>());
        for seed in 0..10 {
            let (_, run) = kmeans(pts.view(), 7, 100, &RngStream::new(seed, "km")).unwrap();
            for w in run.objective_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    fn fit(points: ArrayView2<'_, f64>, psi: usize, t: usize, seed: u64) -> (IsolationKernel, Vec<FeatureMap>) {
        let m = IsolationKernel::fit(points, KernelParams { psi, t }, &RngStream::new(seed, "k")).unwrap();
        let maps = m.embed_rows(points).unwrap();
        (m, maps)
    }

    /// Kernel k-means objective straight from the Gram matrix.
    fn gram_objective(maps: &[FeatureMap], labels: &[usize], k: usize) -> f64 {
        (0..k)
            .map(|c| {
                let members: Vec<usize> = (0..maps.len()).filter(|&i| labels[i] == c).collect();
                if members.is_empty() {
                    return 0.0;
                }
                let diag: f64 = members.iter().map(|&i| maps[i].kernel(&maps[i])).sum();
                let block: f64 = members
                    .iter()
                    .flat_map(|&i| members.iter().map(move |&j| (i, j)))
                    .map(|(i, j)| maps[i].kernel(&maps[j]))
                    .sum();
                diag - block / members.len() as f64
            })
            .sum()
    }

    #[test]
    fn kernel_kmeans_matches_gram_objective() {
        for seed in 0..15 {
            let mut rng = RngStream::new(seed, "pts").rng();
            let n = 10 + (seed as usize % 11);
            let pts = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>());
            let (m, maps) = fit(pts.view(), 4, 30, seed);
            let (ic, run) = kernel_kmeans(m.params(), &maps, 3, 100, &RngStream::new(seed, "kkm")).unwrap();
            let labels: Vec<usize> = ic.assignments.iter().map(|a| a.unwrap()).collect();
            if run.iterations < 100 {
                assert!((run.objective() - gram_objective(&maps, &labels, 3)).abs() < 1e-9);
            }
            for w in run.objective_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }

    #[test]
    fn kernel_kmeans_identical_points() {
        let pts = Array2::from_elem((8, 2), 0.5);
        let mut more = pts.clone().into_raw_vec_and_offset().0;
        more.extend([0.1, 0.1, 0.9, 0.9]);
        let fit_pts = Array2::from_shape_vec((10, 2), more).unwrap();
        let m = IsolationKernel::fit(fit_pts.view(), KernelParams { psi: 2, t: 10 }, &RngStream::new(0, "k")).unwrap();
        let maps = m.embed_rows(pts.view()).unwrap();
        let (ic, _) = kernel_kmeans(m.params(), &maps, 3, 100, &RngStream::new(0, "kkm")).unwrap();
        let used: std::collections::HashSet<_> = ic.assignments.iter().collect();
        assert_eq!(used.len(), 1);
        assert!(to_cluster_cores(m.params(), &maps, &ic).is_err());

        let (ic1, _) = kernel_kmeans(m.params(), &maps, 1, 100, &RngStream::new(0, "kkm")).unwrap();
        assert!(ic1.assignments.iter().all(|a| *a == Some(0)));
    }

    #[test]
    fn empty_cluster_reseeded_from_farthest_point() {
        // seeds at duplicates force an empty cluster on the first pass
        let pts = array![[0.0], [0.0], [0.0], [10.0]];
        for seed in 0..20 {
            let (ic, _) = kmeans(pts.view(), 2, 100, &RngStream::new(seed, "km")).unwrap();
            assert_ne!(ic.assignments[0], ic.assignments[3]);
        }
    }

    /// Quadratic reference: full distance matrix, sorted percentile.
    fn reference_dp(points: ArrayView2<'_, f64>, k: usize, frac: f64) -> Vec<usize> {
        let n = points.nrows();
        let d = |i: usize, j: usize| -> f64 {
            (points[[i, 0]] - points[[j, 0]]).hypot(points[[i, 1]] - points[[j, 1]])
        };
        let mut all: Vec<f64> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| d(i, j)).collect();
        all.sort_by(f64::total_cmp);
        let dc = all[((frac * all.len() as f64).ceil() as usize).max(1) - 1];
        let rho: Vec<f64> = (0..n).map(|i| (0..n).filter(|&j| j != i).map(|j| (-(d(i, j) / dc).powi(2)).exp()).sum()).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| rho[b].partial_cmp(&rho[a]).unwrap().then(a.cmp(&b)));
        let mut parent = vec![usize::MAX; n];
        let mut delta = vec![0.0; n];
        for (r, &i) in order.iter().enumerate() {
            if r == 0 {
                delta[i] = (0..n).map(|j| d(i, j)).fold(0.0, f64::max);
            } else {
                let (j, dist) = order[..r].iter().map(|&j| (j, d(i, j))).min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0))).unwrap();
                parent[i] = j;
                delta[i] = dist;
            }
        }
        let mut by_gamma: Vec<usize> = (0..n).collect();
        by_gamma.sort_by(|&a, &b| (rho[b] * delta[b]).partial_cmp(&(rho[a] * delta[a])).unwrap().then(a.cmp(&b)));
        let mut labels = vec![usize::MAX; n];
        for (c, &p) in by_gamma[..k].iter().enumerate() {
            labels[p] = c;
        }
        for &i in &order {
            if labels[i] == usize::MAX {
                labels[i] = labels[parent[i]];
            }
        }
        labels
    }

    #[test]
    fn density_peak_two_blobs() {
        let ds = synth::gaussian_blobs(21, 2, &[50, 40], 100.0, 1.0);
        let (ic, run) = density_peak(ds.points(), 2, 0.02).unwrap();
        let labels: Vec<usize> = ic.assignments.iter().map(|a| a.unwrap()).collect();
        assert_eq!(labels, reference_dp(ds.points(), 2, 0.02));
        let truth = ds.labels().unwrap();
        assert_ne!(truth[run.centers[0]], truth[run.centers[1]]);
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(truth[i], truth[run.centers[l]]);
        }
    }

    #[test]
    fn density_peak_every_point_a_center() {
        let ds = synth::gaussian_blobs(2, 2, &[6], 10.0, 1.0);
        let (ic, run) = density_peak(ds.points(), 6, 0.02).unwrap();
        let mut centers = run.centers.clone();
        centers.sort_unstable();
        assert_eq!(centers, (0..6).collect::<Vec<_>>());
        let mut labels: Vec<usize> = ic.assignments.iter().map(|a| a.unwrap()).collect();
        labels.sort_unstable();
        assert_eq!(labels, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn density_peak_duplicates_are_deterministic() {
        let pts = Array2::from_elem((10, 2), 1.0);
        let a = density_peak(pts.view(), 3, 0.02).unwrap().0;
        let b = density_peak(pts.view(), 3, 0.02).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a.assignments[0], Some(0));
    }

    #[test]
    fn percentile_matches_sorted_reference() {
        let mut rng = RngStream::new(4, "pts").rng();
        let pts = Array2::from_shape_fn((80, 3), |_| rng.random::<f64>());
        let mut all = vec![];
        for i in 0..80 {
            for j in (i + 1)..80 {
                let d: f64 = (0..3).map(|c| (pts[[i, c]] - pts[[j, c]]).powi(2)).sum::<f64>().sqrt();
                all.push(d);
            }
        }
        all.sort_by(f64::total_cmp);
        for frac in [0.0, 0.02, 0.5, 0.97, 1.0] {
            let rank = ((frac * all.len() as f64).ceil() as usize).clamp(1, all.len()) - 1;
            assert_eq!(pairwise_distance_percentile(pts.view(), frac), all[rank]);
        }
    }

    #[test]
    fn cores_conversion() {
        let ds = synth::gaussian_blobs(8, 2, &[10, 10], 100.0, 1.0);
        let (m, maps) = fit(ds.points(), 4, 20, 1);
        let one = InitialClustering::from_labels(&[0; 20], 1);
        let cores = to_cluster_cores(m.params(), &maps, &one).unwrap();
        assert_eq!(cores.mean_maps[0], m.mean_map(ds.points()).unwrap());

        let two = InitialClustering::from_labels(ds.labels().unwrap(), 2);
        let cores = to_cluster_cores(m.params(), &maps, &two).unwrap();
        assert_eq!(cores.mean_maps[1], m.mean_map(ds.points().slice(ndarray::s![10..20, ..])).unwrap());

        let kb = kbcc::kbcc_from_maps(m.params(), &maps, 2, 0.3).unwrap();
        let back = to_cluster_cores(m.params(), &maps, &InitialClustering::from_cores(&kb, 20)).unwrap();
        assert_eq!(back.cores, kb.cores);
        assert_eq!(back.mean_maps, kb.mean_maps);

        let gap = InitialClustering { assignments: vec![Some(0), Some(2)], k: 3 };
        assert!(matches!(to_cluster_cores(m.params(), &maps[..2], &gap), Err(KdcError::EmptyCluster(1))));
    }

    #[test]
    fn plugins_share_one_interface() {
        let ds = synth::gaussian_blobs(3, 2, &[40, 40, 40], 100.0, 1.0);
        let (m, maps) = fit(ds.points(), 8, 60, 3);
        let view = SubsetView { model: &m, points: ds.points(), maps: &maps };
        for name in ["kbcc", "kmeans", "kernel-kmeans", "dp"] {
            let plugin = PluginConfig::from_name(name).unwrap().build();
            assert_eq!(plugin.name(), name);
            let (cores, _) = plugin.cluster(&view, 3, &RngStream::new(1, "f")).unwrap();
            assert_eq!(cores.k(), 3);
        }
        assert!(PluginConfig::from_name("gmm").is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn density_peak_permutation_invariant(seed in 0u64..1000, shift in 1usize..29) {
            let mut rng = RngStream::new(seed, "pts").rng();
            let pts = Array2::from_shape_fn((30, 2), |_| rng.random::<f64>());
            let perm: Vec<usize> = (0..30).map(|i| (i + shift) % 30).collect();
            let permuted = pts.select(ndarray::Axis(0), &perm);
            let a = density_peak(pts.view(), 3, 0.05).unwrap().0;
            let b = density_peak(permuted.view(), 3, 0.05).unwrap().0;
            for (new_i, &old_i) in perm.iter().enumerate() {
                prop_assert_eq!(b.assignments[new_i], a.assignments[old_i]);
            }
        }
    }
}
