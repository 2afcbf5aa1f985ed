//! In-process simulation of `r` data sites and one coordinator.
//!
//! Every transmission is serialized to bytes, logged in a [`CommLedger`],
//! and decoded on the receiving side; sites then run step 3 on the decoded
//! model and mean maps. Work done on each site is tracked in
//! [`SiteCounters`].

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::assign::AssignRule;
use crate::dataio::{proportional_quotas, sample_subset, site_share, Dataset, SitePartition};
use crate::error::{KdcError, Result};
use crate::framework::{self, ms, PipelineConfig, StepTwoOutput};
use crate::ikernel::{IsolationKernel, MeanMap};
use crate::metrics::Scores;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endpoint {
    Coordinator,
    Site(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    /// A site's share of the subset: one record per point.
    SubsetUpload,
    /// Cluster mean maps: one record per cluster.
    MeanmapBroadcast,
    /// Kernel anchors: one record per Voronoi cell.
    ModelBroadcast,
    /// Cluster centroids for center-based assignment: one record per cluster.
    CenterBroadcast,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: Endpoint,
    pub to: Endpoint,
    pub kind: MessageKind,
    pub record_count: u64,
    pub byte_count: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindTotals {
    pub messages: u64,
    pub records: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub messages: Vec<Message>,
    pub totals: BTreeMap<MessageKind, KindTotals>,
}

impl CommLedger {
    pub fn record(&mut self, from: Endpoint, to: Endpoint, kind: MessageKind, record_count: u64, payload: &[u8]) {
        let msg = Message { from, to, kind, record_count, byte_count: payload.len() as u64 };
        let t = self.totals.entry(kind).or_default();
        t.messages += 1;
        t.records += msg.record_count;
        t.bytes += msg.byte_count;
        self.messages.push(msg);
    }

    pub fn total_records(&self) -> u64 {
        self.totals.values().map(|t| t.records).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.totals.values().map(|t| t.bytes).sum()
    }

    pub fn records_of(&self, kind: MessageKind) -> u64 {
        self.totals.get(&kind).map_or(0, |t| t.records)
    }

    /// Recomputes the totals from the message list.
    pub fn refold(&self) -> BTreeMap<MessageKind, KindTotals> {
        let mut totals: BTreeMap<MessageKind, KindTotals> = BTreeMap::new();
        for m in &self.messages {
            let t = totals.entry(m.kind).or_default();
            t.messages += 1;
            t.records += m.record_count;
            t.bytes += m.byte_count;
        }
        totals
    }
}

/// Closed-form record total of one distributed run: the subset upload plus,
/// per site, `k` mean maps and the `psi * t` anchors (or `k` centroids under
/// center-based assignment).
pub fn expected_records(s: usize, k: usize, psi: usize, t: usize, r: usize, rule: AssignRule) -> u64 {
    let per_site = match rule {
        AssignRule::Distribution => k + psi * t,
        AssignRule::Center => k,
    };
    (s + per_site * r) as u64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteCounters {
    pub site: usize,
    pub points: usize,
    pub subset_size: usize,
    /// Point-to-cluster similarity (or distance) evaluations in step 3.
    pub kernel_evaluations: u64,
    /// Step-3 assignment operations: points times clusters.
    pub assignment_ops: u64,
    pub zero_similarity: usize,
    pub step1_ms: f64,
    pub step3_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorCounters {
    pub subset_size: usize,
    pub pair_evaluations: u64,
    pub iterations: usize,
    pub fit_ms: f64,
    pub cluster_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub step1_max_site_ms: f64,
    pub step2_ms: f64,
    pub step3_total_ms: f64,
    pub step3_max_site_ms: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubsetPolicy {
    /// Sites keep their share of one global sample: identical to the
    /// centralized subset for any partition.
    #[default]
    Global,
    /// Each site samples `floor(s * n_l / n)` of its own points (largest
    /// remainders round up). Not equivalent to a centralized run.
    Proportional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Centralized,
    Distributed,
}

fn one_based<S: Serializer>(labels: &[usize], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(labels.iter().map(|l| l + 1))
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub mode: Mode,
    pub dataset: String,
    pub n: usize,
    pub r: usize,
    pub config: PipelineConfig,
    pub subset_policy: SubsetPolicy,
    pub site_sizes: Vec<usize>,
    /// Cluster per point in input order; 0-based here, 1-based in JSON.
    #[serde(serialize_with = "one_based")]
    pub labels: Vec<usize>,
    pub tau: Option<f64>,
    pub core_sizes: Vec<usize>,
    pub zero_similarity: usize,
    pub ledger: CommLedger,
    pub sites: Vec<SiteCounters>,
    pub coordinator: CoordinatorCounters,
    pub timings: Timings,
    pub scores: Option<Scores>,
}

impl RunReport {
    pub fn assignment_ops(&self) -> u64 {
        self.sites.iter().map(|s| s.assignment_ops).sum()
    }

    pub fn max_site_assignment_ops(&self) -> u64 {
        self.sites.iter().map(|s| s.assignment_ops).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn encode_points(ids: &[usize], points: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(ids.len() * (8 + 8 * points.ncols()));
    for (row, &id) in ids.iter().enumerate() {
        out.extend_from_slice(&(id as u64).to_le_bytes());
        for v in points.row(row) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_points(bytes: &[u8], dim: usize) -> Vec<(usize, Vec<f64>)> {
    let width = 8 + 8 * dim;
    bytes
        .chunks_exact(width)
        .map(|rec| {
            let id = u64::from_le_bytes(rec[..8].try_into().unwrap()) as usize;
            let coords = rec[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            (id, coords)
        })
        .collect()
}

fn encode_centroids(centroids: &[Vec<f64>]) -> Vec<u8> {
    centroids.iter().flatten().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_centroids(bytes: &[u8], dim: usize) -> Vec<Vec<f64>> {
    bytes
        .chunks_exact(8 * dim)
        .map(|c| c.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
        .collect()
}

/// What one site received from the coordinator, decoded.
struct SiteModel {
    step2: StepTwoOutput,
}

/// Runs the pipeline over the simulated sites of `part`.
pub fn run_kdc(ds: &Dataset, part: &SitePartition, cfg: &PipelineConfig) -> Result<RunReport> {
    run_kdc_with(ds, part, cfg, SubsetPolicy::Global)
}

pub fn run_kdc_with(ds: &Dataset, part: &SitePartition, cfg: &PipelineConfig, policy: SubsetPolicy) -> Result<RunReport> {
    let wall = Instant::now();
    let n = ds.len();
    if part.n() != n {
        return Err(KdcError::InvalidArgument(format!("partition covers {} points, dataset has {n}", part.n())));
    }
    cfg.validate(n)?;
    let r = part.r();
    let dim = ds.dim();
    let s = cfg.subset_size_for(n);
    let mut ledger = CommLedger::default();

    // step 1, on every site
    let global: HashSet<usize> = match policy {
        SubsetPolicy::Global => framework::select_subset(n, cfg)?.into_iter().collect(),
        SubsetPolicy::Proportional => HashSet::new(),
    };
    let quotas = proportional_quotas(&part.sizes(), s);
    let uploads: Vec<(Vec<u8>, usize, f64)> = part
        .sites()
        .par_iter()
        .enumerate()
        .map(|(l, site)| {
            let start = Instant::now();
            let mut share = match policy {
                SubsetPolicy::Global => site_share(site, &global),
                SubsetPolicy::Proportional => sample_subset(site, quotas[l], &cfg.subset_stream().child(l))?,
            };
            share.sort_unstable();
            let payload = encode_points(&share, &ds.points().select(Axis(0), &share));
            Ok((payload, share.len(), ms(start)))
        })
        .collect::<Result<_>>()
        .map_err(|e: KdcError| e.at("step 1"))?;

    // step 2, on the coordinator
    let mut received: Vec<(usize, Vec<f64>)> = Vec::with_capacity(s);
    for (l, (payload, count, _)) in uploads.iter().enumerate() {
        ledger.record(Endpoint::Site(l), Endpoint::Coordinator, MessageKind::SubsetUpload, *count as u64, payload);
        received.extend(decode_points(payload, dim));
    }
    received.sort_by_key(|(id, _)| *id);
    let subset_points = Array2::from_shape_vec((received.len(), dim), received.iter().flat_map(|(_, c)| c.iter().copied()).collect())
        .map_err(|e| KdcError::InvalidDataset(e.to_string()))?;
    let step2 = framework::cluster_subset(subset_points.view(), cfg)?;

    let model_bytes = step2.model.to_bytes();
    let mm_bytes: Vec<Vec<u8>> = step2.cores.mean_maps.iter().map(MeanMap::to_bytes).collect();
    let centroid_bytes = step2.centroids.as_deref().map(encode_centroids);
    let mut site_models = Vec::with_capacity(r);
    for l in 0..r {
        let to = Endpoint::Site(l);
        let received = match cfg.assign {
            AssignRule::Distribution => {
                ledger.record(Endpoint::Coordinator, to, MessageKind::ModelBroadcast, cfg.kernel.chi() as u64, &model_bytes);
                let mut maps = Vec::with_capacity(mm_bytes.len());
                for b in &mm_bytes {
                    ledger.record(Endpoint::Coordinator, to, MessageKind::MeanmapBroadcast, 1, b);
                    maps.push(MeanMap::from_bytes(b)?);
                }
                let model = IsolationKernel::from_bytes(&model_bytes)?;
                let mut cores = step2.cores.clone();
                cores.mean_maps = maps;
                StepTwoOutput { model, cores, centroids: None, ..step2.clone() }
            }
            AssignRule::Center => {
                let bytes = centroid_bytes.as_ref().expect("centroids computed for center rule");
                ledger.record(Endpoint::Coordinator, to, MessageKind::CenterBroadcast, cfg.k as u64, bytes);
                StepTwoOutput { centroids: Some(decode_centroids(bytes, dim)), ..step2.clone() }
            }
        };
        site_models.push(SiteModel { step2: received });
    }

    // step 3, on every site independently
    let site_results: Vec<(Vec<usize>, usize, f64)> = part
        .sites()
        .par_iter()
        .zip(&site_models)
        .map(|(site, sm)| {
            let start = Instant::now();
            let a = framework::assign_points(&sm.step2, cfg.assign, ds.points().select(Axis(0), site).view())?;
            Ok((a.labels, a.zero_similarity, ms(start)))
        })
        .collect::<Result<_>>()?;

    let mut labels = vec![0usize; n];
    let mut sites = Vec::with_capacity(r);
    for (l, (site, (site_labels, zeros, step3_ms))) in part.sites().iter().zip(&site_results).enumerate() {
        for (&id, &lab) in site.iter().zip(site_labels) {
            labels[id] = lab;
        }
        sites.push(site_counters(l, site.len(), uploads[l].1, cfg, *zeros, uploads[l].2, *step3_ms));
    }
    let timings = Timings {
        step1_max_site_ms: uploads.iter().map(|u| u.2).fold(0.0, f64::max),
        step2_ms: step2.fit_ms + step2.cluster_ms,
        step3_total_ms: sites.iter().map(|s| s.step3_ms).sum(),
        step3_max_site_ms: sites.iter().map(|s| s.step3_ms).fold(0.0, f64::max),
        wall_ms: ms(wall),
    };
    finish(ds, cfg, Mode::Distributed, part.sizes(), policy, labels, &step2, ledger, sites, timings)
}

/// Runs the same pipeline as one logical site; the ledger stays empty.
pub fn run_centralized(ds: &Dataset, cfg: &PipelineConfig) -> Result<RunReport> {
    let wall = Instant::now();
    let out = framework::pipeline(ds.points(), cfg)?;
    let n = ds.len();
    let sites = vec![site_counters(0, n, out.subset.len(), cfg, out.zero_similarity, out.step1_ms, out.step3_ms)];
    let timings = Timings {
        step1_max_site_ms: out.step1_ms,
        step2_ms: out.step2.fit_ms + out.step2.cluster_ms,
        step3_total_ms: out.step3_ms,
        step3_max_site_ms: out.step3_ms,
        wall_ms: ms(wall),
    };
    finish(ds, cfg, Mode::Centralized, vec![n], SubsetPolicy::Global, out.labels, &out.step2, CommLedger::default(), sites, timings)
}

fn site_counters(site: usize, points: usize, subset_size: usize, cfg: &PipelineConfig, zero_similarity: usize, step1_ms: f64, step3_ms: f64) -> SiteCounters {
    let ops = (points * cfg.k) as u64;
    SiteCounters {
        site,
        points,
        subset_size,
        kernel_evaluations: match cfg.assign {
            AssignRule::Distribution => ops,
            AssignRule::Center => 0,
        },
        assignment_ops: ops,
        zero_similarity,
        step1_ms,
        step3_ms,
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    ds: &Dataset,
    cfg: &PipelineConfig,
    mode: Mode,
    site_sizes: Vec<usize>,
    subset_policy: SubsetPolicy,
    labels: Vec<usize>,
    step2: &StepTwoOutput,
    ledger: CommLedger,
    sites: Vec<SiteCounters>,
    timings: Timings,
) -> Result<RunReport> {
    let scores = ds.labels().map(|truth| Scores::compute(truth, &labels)).transpose()?;
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        mode,
        dataset: ds.name().to_string(),
        n: ds.len(),
        r: site_sizes.len(),
        config: *cfg,
        subset_policy,
        site_sizes,
        zero_similarity: sites.iter().map(|s| s.zero_similarity).sum(),
        labels,
        tau: step2.cores.tau,
        core_sizes: step2.cores.sizes(),
        ledger,
        coordinator: CoordinatorCounters {
            subset_size: sites.iter().map(|s| s.subset_size).sum(),
            pair_evaluations: step2.stats.pair_evaluations,
            iterations: step2.stats.iterations,
            fit_ms: step2.fit_ms,
            cluster_ms: step2.cluster_ms,
        },
        sites,
        timings,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{partition_sites, synth, RngStream, SiteLayout};
    use crate::ikernel::KernelParams;
    use crate::plugins::PluginConfig;

    fn small_cfg(k: usize, seed: u64) -> PipelineConfig {
        let mut cfg = PipelineConfig::new(k, seed);
        cfg.kernel = KernelParams { psi: 8, t: 50 };
        cfg.subset_size = Some(300);
        cfg
    }

    fn data() -> Dataset {
        synth::gaussian_blobs(3, 2, &[300, 250, 200], 100.0, 2.0)
    }

    #[test]
    fn distributed_equals_centralized() {
        let ds = data();
        let cfg = small_cfg(3, 4);
        let central = run_centralized(&ds, &cfg).unwrap();
        for r in [1, 2, 5, 20] {
            for layout in [SiteLayout::Even, SiteLayout::Skewed(0.5)] {
                let part = partition_sites(ds.len(), r, layout, &RngStream::new(1, "sites")).unwrap();
                let dist = run_kdc(&ds, &part, &cfg).unwrap();
                assert_eq!(dist.labels, central.labels, "r={r} {layout:?}");
            }
        }
    }

    #[test]
    fn ledger_matches_closed_form() {
        let ds = data();
        for rule in [AssignRule::Distribution, AssignRule::Center] {
            let cfg = PipelineConfig { assign: rule, ..small_cfg(3, 1) };
            for r in [1, 3, 20] {
                let part = partition_sites(ds.len(), r, SiteLayout::Even, &RngStream::new(2, "sites")).unwrap();
                let rep = run_kdc(&ds, &part, &cfg).unwrap();
                assert_eq!(rep.ledger.total_records(), expected_records(300, 3, 8, 50, r, rule));
                assert_eq!(rep.ledger.records_of(MessageKind::SubsetUpload), 300);
                assert_eq!(rep.ledger.refold(), rep.ledger.totals);
                assert_eq!(rep.assignment_ops(), (ds.len() * 3) as u64);
            }
        }
        assert_eq!(expected_records(10_000, 10, 16, 200, 20, AssignRule::Distribution), 10_000 + 64_200);
    }

    #[test]
    fn byte_counts_follow_payload_sizes() {
        let ds = data();
        let cfg = small_cfg(3, 1);
        let part = partition_sites(ds.len(), 4, SiteLayout::Even, &RngStream::new(2, "sites")).unwrap();
        let rep = run_kdc(&ds, &part, &cfg).unwrap();
        for m in &rep.ledger.messages {
            let expected = match m.kind {
                MessageKind::SubsetUpload => m.record_count * (8 + 8 * 2),
                MessageKind::MeanmapBroadcast => (16 + 8 * 8 * 50) as u64,
                MessageKind::ModelBroadcast => 12 + (8 * 50 * 2 * 8) as u64,
                MessageKind::CenterBroadcast => unreachable!(),
            };
            assert_eq!(m.byte_count, expected, "{:?}", m.kind);
        }
    }

    #[test]
    fn skewed_site_dominates_upload_and_work() {
        let ds = data();
        let cfg = small_cfg(3, 1);
        let part = partition_sites(ds.len(), 20, SiteLayout::Skewed(0.5), &RngStream::new(2, "sites")).unwrap();
        let rep = run_kdc(&ds, &part, &cfg).unwrap();
        let uploads: Vec<u64> = rep.ledger.messages.iter().filter(|m| m.kind == MessageKind::SubsetUpload).map(|m| m.record_count).collect();
        assert_eq!(uploads.iter().copied().max(), Some(uploads[0]));
        assert_eq!(rep.max_site_assignment_ops(), (rep.site_sizes[0] * 3) as u64);
        assert!(rep.max_site_assignment_ops() < rep.assignment_ops());
    }

    #[test]
    fn centralized_report_shape() {
        let ds = data();
        let cfg = small_cfg(3, 1);
        let rep = run_centralized(&ds, &cfg).unwrap();
        assert!(rep.ledger.messages.is_empty());
        assert_eq!(rep.assignment_ops(), (ds.len() * 3) as u64);
        assert!(rep.coordinator.pair_evaluations <= 300 * 299 / 2);
        let json: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(json["schema_version"], 1);
        let labels = json["labels"].as_array().unwrap();
        assert!(labels.iter().all(|l| (1..=3).contains(&l.as_u64().unwrap())));
        assert!(json["scores"]["nmi"].as_f64().unwrap() > 0.99);
    }

    #[test]
    fn proportional_policy_uses_quotas() {
        let ds = data();
        let cfg = small_cfg(3, 1);
        let part = partition_sites(ds.len(), 4, SiteLayout::Skewed(0.4), &RngStream::new(2, "sites")).unwrap();
        let rep = run_kdc_with(&ds, &part, &cfg, SubsetPolicy::Proportional).unwrap();
        let uploads: Vec<usize> = rep.sites.iter().map(|s| s.subset_size).collect();
        assert_eq!(uploads, proportional_quotas(&part.sizes(), 300));
    }

    #[test]
    fn plugin_failure_carries_stage() {
        let ds = data();
        let cfg = PipelineConfig { plugin: PluginConfig::Kbcc { tau: crate::plugins::TauChoice::Fixed(0.0) }, k: 300, ..small_cfg(3, 1) };
        let part = partition_sites(ds.len(), 4, SiteLayout::Even, &RngStream::new(2, "sites")).unwrap();
        let err = run_kdc(&ds, &part, &cfg).unwrap_err();
        assert!(err.to_string().contains("step 2"));
    }
}
