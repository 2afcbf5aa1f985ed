//! Step-3 point assignment.

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KdcError, Result};
use crate::ikernel::{IsolationKernel, MeanMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignRule {
    /// Most similar cluster distribution.
    #[default]
    Distribution,
    /// Nearest cluster centroid.
    Center,
}

impl AssignRule {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "distribution" => Some(Self::Distribution),
            "center" => Some(Self::Center),
            _ => None,
        }
    }
}

/// 0-based labels plus the number of points that share no cell with any
/// mean map (those get label 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub labels: Vec<usize>,
    pub zero_similarity: usize,
}

const CHUNK: usize = 1024;

/// Index of the largest value; ties to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Labels each point with the mean map it is most similar to.
pub fn assign_distribution(model: &IsolationKernel, mean_maps: &[MeanMap], points: ArrayView2<'_, f64>) -> Result<Assignment> {
    if mean_maps.is_empty() {
        return Err(KdcError::InvalidArgument("no mean maps to assign to".into()));
    }
    if points.ncols() != model.dim() {
        return Err(KdcError::DimensionMismatch { expected: model.dim(), found: points.ncols() });
    }
    let psi = model.psi();
    let t = model.t();
    let n = points.nrows();
    let per_chunk: Vec<(Vec<usize>, usize)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut cells = vec![0u32; t];
            let mut x = vec![0.0; points.ncols()];
            let mut sims = vec![0.0; mean_maps.len()];
            let mut labels = Vec::with_capacity(CHUNK);
            let mut zeros = 0;
            for r in c * CHUNK..((c + 1) * CHUNK).min(n) {
                x.iter_mut().zip(points.row(r)).for_each(|(d, v)| *d = *v);
                model.embed_into(&x, &mut cells);
                for (s, mm) in sims.iter_mut().zip(mean_maps) {
                    *s = cells.iter().enumerate().map(|(i, &cell)| mm.weights[i * psi + cell as usize]).sum::<f64>() / t as f64;
                }
                if sims.iter().all(|&s| s == 0.0) {
                    zeros += 1;
                }
                labels.push(argmax(&sims));
            }
            (labels, zeros)
        })
        .collect();
    let mut labels = Vec::with_capacity(n);
    let mut zero_similarity = 0;
    for (l, z) in per_chunk {
        labels.extend(l);
        zero_similarity += z;
    }
    Ok(Assignment { labels, zero_similarity })
}

/// Centroid of each group of rows of `points`.
pub fn centroids(points: ArrayView2<'_, f64>, groups: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    groups
        .iter()
        .enumerate()
        .map(|(g, members)| {
            if members.is_empty() {
                return Err(KdcError::EmptyCluster(g));
            }
            let mut c = vec![0.0; points.ncols()];
            for &i in members {
                c.iter_mut().zip(points.row(i)).for_each(|(a, v)| *a += v);
            }
            c.iter_mut().for_each(|a| *a /= members.len() as f64);
            Ok(c)
        })
        .collect()
}

/// Labels each point with its nearest centroid (Euclidean); ties to the
/// lowest index.
pub fn assign_to_centroids(centroids: &[Vec<f64>], points: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    if centroids.is_empty() {
        return Err(KdcError::InvalidArgument("no centroids to assign to".into()));
    }
    if centroids.iter().any(|c| c.len() != points.ncols()) {
        return Err(KdcError::DimensionMismatch { expected: centroids[0].len(), found: points.ncols() });
    }
    Ok((0..points.nrows())
        .into_par_iter()
        .map(|r| {
            let row = points.row(r);
            let d: Vec<f64> = centroids
                .iter()
                .map(|c| -c.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .collect();
            argmax(&d)
        })
        .collect())
}

/// Center-based assignment: `groups` index rows of `group_points`.
pub fn assign_center(group_points: ArrayView2<'_, f64>, groups: &[Vec<usize>], points: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    if groups.is_empty() {
        return Err(KdcError::InvalidArgument("no groups to assign to".into()));
    }
    assign_to_centroids(&centroids(group_points, groups)?, points)
}
