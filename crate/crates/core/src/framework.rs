//! The three-step pipeline: sample a subset, cluster it into `k` initial
//! clusters, assign every point to a cluster.
//!
//! The steps are exposed separately so the simulated distributed run in
//! [`crate::simnet`] can place them on different actors while calling the
//! exact same code as a centralized run.

use std::time::Instant;

use ndarray::{ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assign::{self, AssignRule, Assignment};
use crate::dataio::{default_subset_size, global_subset, RngStream};
use crate::error::{KdcError, Result};
use crate::ikernel::{IsolationKernel, KernelParams};
use crate::kbcc::ClusterCores;
use crate::metrics::Scores;
use crate::plugins::{PluginConfig, StepTwoStats, SubsetView, TauChoice};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k: usize,
    pub kernel: KernelParams,
    /// Subset size; `None` means `min(n, 10000)`.
    pub subset_size: Option<usize>,
    pub plugin: PluginConfig,
    pub assign: AssignRule,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            kernel: KernelParams::default(),
            subset_size: None,
            plugin: PluginConfig::Kbcc { tau: TauChoice::Auto },
            assign: AssignRule::Distribution,
            seed,
        }
    }

    pub fn subset_size_for(&self, n: usize) -> usize {
        self.subset_size.unwrap_or_else(|| default_subset_size(n)).min(n)
    }

    pub fn subset_stream(&self) -> RngStream {
        RngStream::new(self.seed, "subset")
    }

    pub fn kernel_stream(&self) -> RngStream {
        RngStream::new(self.seed, "kernel")
    }

    pub fn plugin_stream(&self) -> RngStream {
        RngStream::new(self.seed, "plugin")
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            return Err(KdcError::InvalidArgument("k must be positive".into()));
        }
        if self.kernel.psi < 1 || self.kernel.t < 1 {
            return Err(KdcError::InvalidArgument("psi and t must be positive".into()));
        }
        let s = self.subset_size_for(n);
        if s < self.k {
            return Err(KdcError::NotEnoughPoints { required: self.k, found: s });
        }
        Ok(())
    }
}

/// Step 1: sorted global ids of the subset.
pub fn select_subset(n: usize, cfg: &PipelineConfig) -> Result<Vec<usize>> {
    global_subset(n, cfg.subset_size_for(n), &cfg.subset_stream()).map_err(|e| e.at("step 1"))
}

/// What the coordinator learns in step 2 and hands to every site.
#[derive(Clone, Debug)]
pub struct StepTwoOutput {
    pub model: IsolationKernel,
    pub cores: ClusterCores,
    pub stats: StepTwoStats,
    /// Core centroids in input space, for center-based assignment.
    pub centroids: Option<Vec<Vec<f64>>>,
    pub fit_ms: f64,
    pub cluster_ms: f64,
}

/// Step 2: fit the kernel on the subset, run the plugin, summarise each
/// initial cluster by its mean map (and its centroid when assigning by
/// center). Rows of `subset` must be in ascending global-id order.
pub fn cluster_subset(subset: ArrayView2<'_, f64>, cfg: &PipelineConfig) -> Result<StepTwoOutput> {
    let start = Instant::now();
    let model = IsolationKernel::fit(subset, cfg.kernel, &cfg.kernel_stream()).map_err(|e| e.at("step 2: kernel fit"))?;
    let maps = model.embed_rows(subset)?;
    let fit_ms = ms(start);

    let start = Instant::now();
    let plugin = cfg.plugin.build();
    let view = SubsetView { model: &model, points: subset, maps: &maps };
    let (cores, stats) = plugin
        .cluster(&view, cfg.k, &cfg.plugin_stream())
        .map_err(|e| e.at(format!("step 2: {}", plugin.name())))?;
    let centroids = match cfg.assign {
        AssignRule::Center => Some(assign::centroids(subset, &cores.cores)?),
        AssignRule::Distribution => None,
    };
    Ok(StepTwoOutput { model, cores, stats, centroids, fit_ms, cluster_ms: ms(start) })
}

/// Step 3 for any block of points.
pub fn assign_points(step2: &StepTwoOutput, rule: AssignRule, points: ArrayView2<'_, f64>) -> Result<Assignment> {
    let out = match rule {
        AssignRule::Distribution => assign::assign_distribution(&step2.model, &step2.cores.mean_maps, points),
        AssignRule::Center => {
            let centroids = step2
                .centroids
                .as_ref()
                .ok_or_else(|| KdcError::InvalidArgument("centroids were not computed".into()))?;
            assign::assign_to_centroids(centroids, points).map(|labels| Assignment { labels, zero_similarity: 0 })
        }
    };
    out.map_err(|e| e.at("step 3"))
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub subset: Vec<usize>,
    pub step2: StepTwoOutput,
    /// 0-based cluster ids, one per input row.
    pub labels: Vec<usize>,
    pub zero_similarity: usize,
    pub step1_ms: f64,
    pub step3_ms: f64,
}

/// All three steps on one machine.
pub fn pipeline(points: ArrayView2<'_, f64>, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate(points.nrows())?;
    let start = Instant::now();
    let subset = select_subset(points.nrows(), cfg)?;
    let subset_points = points.select(Axis(0), &subset);
    let step1_ms = ms(start);
    let step2 = cluster_subset(subset_points.view(), cfg)?;
    let start = Instant::now();
    let a = assign_points(&step2, cfg.assign, points)?;
    Ok(PipelineOutput {
        subset,
        step2,
        labels: a.labels,
        zero_similarity: a.zero_similarity,
        step1_ms,
        step3_ms: ms(start),
    })
}

pub(crate) fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Seed of trial `i` under a master seed.
pub fn trial_seed(master: u64, i: usize) -> u64 {
    RngStream::new(master, "trial").child(i).rng().random()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m == 0 {
        return f64::NAN;
    }
    if m % 2 == 1 {
        v[m / 2]
    } else {
        (v[m / 2 - 1] + v[m / 2]) / 2.0
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialSummary {
    pub seeds: Vec<u64>,
    pub scores: Vec<Scores>,
    pub mean: Scores,
    pub median: Scores,
}

impl TrialSummary {
    pub fn from_scores(seeds: Vec<u64>, scores: Vec<Scores>) -> Self {
        let pick = |f: fn(&Scores) -> f64| scores.iter().map(f).collect::<Vec<f64>>();
        let agg = |g: fn(&[f64]) -> f64| Scores {
            nmi: g(&pick(|s| s.nmi)),
            ami: g(&pick(|s| s.ami)),
            ari: g(&pick(|s| s.ari)),
            f1: g(&pick(|s| s.f1)),
        };
        let mean = agg(|v| v.iter().sum::<f64>() / v.len() as f64);
        let median = agg(median);
        Self { seeds, scores, mean, median }
    }
}

/// Runs the pipeline `trials` times with derived seeds and scores each run.
pub fn run_trials(points: ArrayView2<'_, f64>, truth: &[usize], cfg: &PipelineConfig, trials: usize) -> Result<TrialSummary> {
    if trials == 0 {
        return Err(KdcError::InvalidArgument("at least one trial".into()));
    }
    let seeds: Vec<u64> = (0..trials).map(|i| trial_seed(cfg.seed, i)).collect();
    let scores = seeds
        .par_iter()
        .map(|&seed| {
            let out = pipeline(points, &PipelineConfig { seed, ..*cfg })?;
            Scores::compute(truth, &out.labels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialSummary::from_scores(seeds, scores))
}

/// Parameter grid for [`sweep`]. `taus` only applies to the kbcc plugin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub psis: Vec<usize>,
    pub ts: Vec<usize>,
    pub taus: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub plugin: String,
    pub psi: usize,
    pub t: usize,
    pub tau: Option<f64>,
    /// Per trial; `None` where the pipeline failed (for example too few
    /// components at this threshold).
    pub scores: Vec<Option<Scores>>,
    /// Failed trials count as NMI 0.
    pub median_nmi: f64,
    pub mean_nmi: f64,
}

impl SweepRow {
    fn new(plugin: &str, psi: usize, t: usize, tau: Option<f64>, scores: Vec<Option<Scores>>) -> Self {
        let nmis: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| s.nmi)).collect();
        Self {
            plugin: plugin.to_string(),
            psi,
            t,
            tau,
            median_nmi: median(&nmis),
            mean_nmi: nmis.iter().sum::<f64>() / nmis.len() as f64,
            scores,
        }
    }
}

/// Index of the row with the highest median NMI; ties to the earliest row.
pub fn best_row(rows: &[SweepRow]) -> Option<usize> {
    (0..rows.len()).fold(None, |best, i| match best {
        Some(b) if rows[b].median_nmi >= rows[i].median_nmi => Some(b),
        _ => Some(i),
    })
}

/// Cross product of `grid` under the plugin and assignment rule of `base`,
/// each cell run for `trials` derived seeds. Rows come out in `(psi, t, tau)`
/// order. Every row scores exactly what [`pipeline`] returns for that
/// configuration; the kbcc plugin shares one spanning tree across thresholds.
pub fn sweep(points: ArrayView2<'_, f64>, truth: &[usize], base: &PipelineConfig, grid: &SweepGrid, trials: usize) -> Result<Vec<SweepRow>> {
    let is_kbcc = matches!(base.plugin, PluginConfig::Kbcc { .. });
    if grid.psis.is_empty() || grid.ts.is_empty() || (is_kbcc && grid.taus.is_empty()) {
        return Err(KdcError::InvalidArgument("empty sweep grid".into()));
    }
    if trials == 0 {
        return Err(KdcError::InvalidArgument("at least one trial".into()));
    }
    let seeds: Vec<u64> = (0..trials).map(|i| trial_seed(base.seed, i)).collect();
    let mut rows = Vec::new();
    for &psi in &grid.psis {
        for &t in &grid.ts {
            let kernel = KernelParams { psi, t };
            // per seed: one score per tau (or a single score)
            let per_seed: Vec<Vec<Option<Scores>>> = seeds
                .par_iter()
                .map(|&seed| {
                    let cfg = PipelineConfig { seed, kernel, ..*base };
                    cfg.validate(points.nrows())?;
                    if !is_kbcc {
                        let scored = pipeline(points, &cfg).ok().map(|o| Scores::compute(truth, &o.labels)).transpose()?;
                        return Ok(vec![scored]);
                    }
                    let subset = select_subset(points.nrows(), &cfg)?;
                    let subset_points = points.select(Axis(0), &subset);
                    let model = IsolationKernel::fit(subset_points.view(), kernel, &cfg.kernel_stream())?;
                    let maps = model.embed_rows(subset_points.view())?;
                    let tree = crate::kbcc::SimilarityTree::build(&maps);
                    grid.taus
                        .iter()
                        .map(|&tau| {
                            let Ok(cores) = tree.cores(kernel, &maps, cfg.k, tau) else {
                                return Ok(None);
                            };
                            let centroids = match cfg.assign {
                                AssignRule::Center => Some(assign::centroids(subset_points.view(), &cores.cores)?),
                                AssignRule::Distribution => None,
                            };
                            let step2 = StepTwoOutput {
                                model: model.clone(),
                                cores,
                                stats: StepTwoStats::default(),
                                centroids,
                                fit_ms: 0.0,
                                cluster_ms: 0.0,
                            };
                            let a = assign_points(&step2, cfg.assign, points)?;
                            Scores::compute(truth, &a.labels).map(Some)
                        })
                        .collect()
                })
                .collect::<Result<_>>()?;
            let name = base.plugin.build().name();
            if is_kbcc {
                for (j, &tau) in grid.taus.iter().enumerate() {
                    rows.push(SweepRow::new(name, psi, t, Some(tau), per_seed.iter().map(|v| v[j]).collect()));
                }
            } else {
                rows.push(SweepRow::new(name, psi, t, None, per_seed.iter().map(|v| v[0]).collect()));
            }
        }
    }
    Ok(rows)
}
