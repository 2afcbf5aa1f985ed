//! Scaling and distributed-speedup measurements.
//!
//! Every timing comes with the exact operation count it should track; checks
//! bind to the counts, wall times are reported alongside.

use std::io::Write;
use std::time::Instant;

use ndarray::Axis;
use serde::Serialize;

use crate::dataio::{partition_sites, synth, Dataset, RngStream, SiteLayout};
use crate::error::{KdcError, Result};
use crate::framework::{self, ms, PipelineConfig};
use crate::simnet;

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| KdcError::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// `n` points in `k` separated 2-D blobs.
pub fn scaling_data(n: usize, k: usize, seed: u64) -> Dataset {
    let sizes: Vec<usize> = (0..k).map(|i| n / k + usize::from(i < n % k)).collect();
    synth::gaussian_blobs(seed, 2, &sizes, 100.0, 2.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub s: usize,
    pub k: usize,
    pub assignment_ops: u64,
    pub step2_ms: f64,
    pub step3_ms: f64,
}

/// Step 2 and step 3 cost at each size with the subset size fixed.
pub fn bench_step3_scaling(sizes: &[usize], cfg: &PipelineConfig, threads: usize) -> Result<Vec<ScalingRow>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(KdcError::InvalidArgument("sizes must be ascending".into()));
    }
    with_threads(threads, || {
        sizes
            .iter()
            .map(|&n| {
                let ds = scaling_data(n, cfg.k, cfg.seed);
                cfg.validate(n)?;
                let subset = framework::select_subset(n, cfg)?;
                let subset_points = ds.points().select(Axis(0), &subset);
                let start = Instant::now();
                let step2 = framework::cluster_subset(subset_points.view(), cfg)?;
                let step2_ms = ms(start);
                let start = Instant::now();
                let a = framework::assign_points(&step2, cfg.assign, ds.points())?;
                let step3_ms = ms(start);
                Ok(ScalingRow {
                    n,
                    s: subset.len(),
                    k: cfg.k,
                    assignment_ops: (a.labels.len() * cfg.k) as u64,
                    step2_ms,
                    step3_ms,
                })
            })
            .collect()
    })?
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let m = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn step3_slope(rows: &[ScalingRow]) -> f64 {
    loglog_slope(&rows.iter().map(|r| (r.n as f64, r.step3_ms)).collect::<Vec<_>>())
}

#[derive(Clone, Debug, Serialize)]
pub struct PropertyBRow {
    pub r: usize,
    pub layout: String,
    pub centralized_ops: u64,
    pub max_site_ops: u64,
    pub centralized_step3_ms: f64,
    pub max_site_step3_ms: f64,
    /// Bytes each site receives before step 3.
    pub broadcast_bytes_per_site: u64,
}

/// Centralized step-3 cost against the slowest site, per site count. Sites
/// run one after another on the same pool, so each site time is measured
/// without interference from the others.
pub fn bench_property_b(ds: &Dataset, rs: &[usize], layout: SiteLayout, cfg: &PipelineConfig, threads: usize) -> Result<Vec<PropertyBRow>> {
    with_threads(threads, || {
        let central = simnet::run_centralized(ds, cfg)?;
        rs.iter()
            .map(|&r| {
                let part = partition_sites(ds.len(), r, layout, &RngStream::new(cfg.seed, "bench/sites"))?;
                let rep = simnet::run_kdc(ds, &part, cfg)?;
                let received: u64 = rep
                    .ledger
                    .messages
                    .iter()
                    .filter(|m| m.to == simnet::Endpoint::Site(0))
                    .map(|m| m.byte_count)
                    .sum();
                Ok(PropertyBRow {
                    r,
                    layout: match layout {
                        SiteLayout::Even => "even".into(),
                        SiteLayout::Skewed(p) => format!("skew{p}"),
                    },
                    centralized_ops: central.assignment_ops(),
                    max_site_ops: rep.max_site_assignment_ops(),
                    centralized_step3_ms: central.timings.step3_max_site_ms,
                    max_site_step3_ms: rep.timings.step3_max_site_ms,
                    broadcast_bytes_per_site: received,
                })
            })
            .collect()
    })?
}

pub fn write_csv<T: Serialize>(rows: &[T], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| KdcError::InvalidArgument(e.to_string()))?;
    }
    w.flush().map_err(|e| KdcError::Io { path: "<csv output>".into(), source: e })?;
    Ok(())
}
