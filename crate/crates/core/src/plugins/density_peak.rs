//! Density Peak clustering with a Gaussian density estimate.

use ndarray::ArrayView2;
use rayon::prelude::*;

fn dist(points: &ArrayView2<'_, f64>, i: usize, j: usize) -> f64 {
    points
        .row(i)
        .iter()
        .zip(points.row(j))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

const BINS: usize = 1 << 16;

/// Nearest-rank percentile of all `n(n-1)/2` pairwise distances, found by
/// histogram bucketing so the distances never have to be stored at once.
pub fn pairwise_distance_percentile(points: ArrayView2<'_, f64>, fraction: f64) -> f64 {
    let n = points.nrows();
    let m = n * n.saturating_sub(1) / 2;
    if m == 0 {
        return 0.0;
    }
    let rank = ((fraction * m as f64).ceil() as usize).clamp(1, m) - 1;
    let max = (0..n)
        .into_par_iter()
        .map(|i| ((i + 1)..n).map(|j| dist(&points, i, j)).fold(0.0, f64::max))
        .reduce(|| 0.0, f64::max);
    if max == 0.0 {
        return 0.0;
    }
    let bin = |d: f64| ((d / max * BINS as f64) as usize).min(BINS - 1);
    let hist = (0..n)
        .into_par_iter()
        .fold(
            || vec![0u64; BINS],
            |mut h, i| {
                for j in (i + 1)..n {
                    h[bin(dist(&points, i, j))] += 1;
                }
                h
            },
        )
        .reduce(
            || vec![0u64; BINS],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let mut before = 0u64;
    let mut target = BINS - 1;
    for (b, &c) in hist.iter().enumerate() {
        if before + c > rank as u64 {
            target = b;
            break;
        }
        before += c;
    }
    let mut inside: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            ((i + 1)..n)
                .map(move |j| dist(&points, i, j))
                .filter(move |&d| bin(d) == target)
        })
        .collect();
    let k = rank - before as usize;
    let (_, v, _) = inside.select_nth_unstable_by(k, f64::total_cmp);
    *v
}

#[derive(Clone, Debug)]
pub struct DensityPeakRun {
    pub labels: Vec<usize>,
    /// Center point indices, in cluster-id order.
    pub centers: Vec<usize>,
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub cutoff: f64,
}

/// Clusters `points` into `k` groups. `k <= n` is the caller's job.
pub fn density_peak(points: ArrayView2<'_, f64>, k: usize, dc_fraction: f64) -> DensityPeakRun {
    let n = points.nrows();
    let dc = pairwise_distance_percentile(points, dc_fraction);

    let rho: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d = dist(&points, i, j);
                    if dc > 0.0 {
                        (-(d / dc) * (d / dc)).exp()
                    } else if d == 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect();

    // density order: rho descending, index ascending on ties
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rho[b].total_cmp(&rho[a]).then(a.cmp(&b)));
    let mut rank = vec![0usize; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }

    let (delta, parent): (Vec<f64>, Vec<Option<usize>>) = (0..n)
        .into_par_iter()
        .map(|i| {
            if rank[i] == 0 {
                let far = (0..n).map(|j| dist(&points, i, j)).fold(0.0, f64::max);
                return (far, None);
            }
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..n {
                if rank[j] < rank[i] {
                    let d = dist(&points, i, j);
                    if d < best.0 || (d == best.0 && j < best.1) {
                        best = (d, j);
                    }
                }
            }
            (best.0, Some(best.1))
        })
        .unzip();

    let gamma: Vec<f64> = rho.iter().zip(&delta).map(|(r, d)| r * d).collect();
    let mut by_gamma: Vec<usize> = (0..n).collect();
    by_gamma.sort_by(|&a, &b| gamma[b].total_cmp(&gamma[a]).then(a.cmp(&b)));
    let mut centers: Vec<usize> = by_gamma[..k].to_vec();
    // the densest point has no denser neighbour to inherit a label from
    if !centers.contains(&order[0]) {
        centers[k - 1] = order[0];
    }

    let mut labels = vec![usize::MAX; n];
    for (c, &p) in centers.iter().enumerate() {
        labels[p] = c;
    }
    for &i in &order {
        if labels[i] == usize::MAX {
            labels[i] = labels[parent[i].expect("non-peak points have a denser neighbour")];
        }
    }

    DensityPeakRun {
        labels,
        centers,
        rho,
        delta,
        cutoff: dc,
    }
}
