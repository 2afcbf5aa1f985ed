//! Lloyd iterations with k-means++ seeding over an abstract point space.
//!
//! The same driver runs plain k-means on coordinates and kernel k-means on
//! the explicit isolation-kernel feature vectors.

use rand::Rng;
use rayon::prelude::*;

use crate::dataio::RngStream;
use crate::ikernel::FeatureMap;

pub(crate) trait LloydSpace: Sync {
    type Center: Clone + Send + Sync;

    fn len(&self) -> usize;
    fn center_at(&self, i: usize) -> Self::Center;
    fn dist2(&self, i: usize, c: &Self::Center) -> f64;
    /// Mean of a nonempty member list.
    fn mean(&self, members: &[usize]) -> Self::Center;
}

#[derive(Clone, Debug)]
pub struct LloydRun {
    pub assignments: Vec<usize>,
    /// Objective after each assignment pass.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub distance_evaluations: u64,
}

impl LloydRun {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().unwrap_or(&0.0)
    }
}

fn nearest<S: LloydSpace>(space: &S, i: usize, centers: &[S::Center]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = space.dist2(i, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus<S: LloydSpace>(space: &S, k: usize, stream: &RngStream) -> Vec<S::Center> {
    let n = space.len();
    let mut rng = stream.rng();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut centers = vec![space.center_at(chosen[0])];
    let mut d2: Vec<f64> = (0..n).map(|i| space.dist2(i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // guard against rounding leaving us on a zero-weight tail
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(pick);
        let c = space.center_at(pick);
        for (i, slot) in d2.iter_mut().enumerate() {
            *slot = slot.min(space.dist2(i, &c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd's algorithm from k-means++ seeds. Stops when no assignment changes
/// or after `max_iters` passes. An empty cluster is re-seeded with the point
/// farthest from its current center, unless every point sits exactly on its
/// center.
pub(crate) fn lloyd<S: LloydSpace>(space: &S, k: usize, max_iters: usize, stream: &RngStream) -> LloydRun {
    let n = space.len();
    let mut centers = seed_plus_plus(space, k, stream);
    let mut evaluations = (n * k) as u64;
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut nearest_all: Vec<(usize, f64)> =
            (0..n).into_par_iter().map(|i| nearest(space, i, &centers)).collect();
        evaluations += (n * k) as u64;

        let mut counts = vec![0usize; k];
        for &(c, _) in &nearest_all {
            counts[c] += 1;
        }
        let mut moved = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| !moved[i] && counts[nearest_all[i].0] > 1)
                .max_by(|&a, &b| nearest_all[a].1.total_cmp(&nearest_all[b].1).then(b.cmp(&a)));
            if let Some(p) = far.filter(|&p| nearest_all[p].1 > 0.0) {
                counts[nearest_all[p].0] -= 1;
                counts[c] += 1;
                moved[p] = true;
                nearest_all[p] = (c, 0.0);
                centers[c] = space.center_at(p);
            }
        }

        let new_assign: Vec<usize> = nearest_all.iter().map(|&(c, _)| c).collect();
        history.push(nearest_all.iter().map(|&(_, d)| d).sum());
        let changed = new_assign != assignments;
        assignments = new_assign;
        if !changed {
            break;
        }

        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &c) in assignments.iter().enumerate() {
            members[c].push(i);
        }
        let updated: Vec<Option<S::Center>> = members
            .par_iter()
            .map(|m| (!m.is_empty()).then(|| space.mean(m)))
            .collect();
        for (c, u) in updated.into_iter().enumerate() {
            if let Some(u) = u {
                centers[c] = u;
            }
        }
    }

    LloydRun {
        assignments,
        objective_history: history,
        iterations,
        distance_evaluations: evaluations,
    }
}

/// Euclidean coordinates.
pub(crate) struct Euclidean<'a> {
    pub points: ndarray::ArrayView2<'a, f64>,
}

impl LloydSpace for Euclidean<'_> {
    type Center = Vec<f64>;

    fn len(&self) -> usize {
        self.points.nrows()
    }

    fn center_at(&self, i: usize) -> Vec<f64> {
        self.points.row(i).to_vec()
    }

    fn dist2(&self, i: usize, c: &Vec<f64>) -> f64 {
        self.points
            .row(i)
            .iter()
            .zip(c)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    fn mean(&self, members: &[usize]) -> Vec<f64> {
        let mut acc = vec![0.0; self.points.ncols()];
        for &i in members {
            for (a, v) in acc.iter_mut().zip(self.points.row(i)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= members.len() as f64);
        acc
    }
}

/// Isolation-kernel feature space with features scaled by `1/sqrt(t)`, so
/// inner products equal kernel values. Centers are stored as dense mean
/// maps (unscaled) with their squared norm.
pub(crate) struct KernelFeatures<'a> {
    pub maps: &'a [FeatureMap],
    pub psi: usize,
    pub t: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct DenseCenter {
    weights: Vec<f64>,
    norm2: f64,
}

impl LloydSpace for KernelFeatures<'_> {
    type Center = DenseCenter;

    fn len(&self) -> usize {
        self.maps.len()
    }

    fn center_at(&self, i: usize) -> DenseCenter {
        DenseCenter {
            weights: self.maps[i].to_dense(self.psi),
            norm2: self.t as f64,
        }
    }

    fn dist2(&self, i: usize, c: &DenseCenter) -> f64 {
        let dot: f64 = self.maps[i]
            .cells()
            .iter()
            .enumerate()
            .map(|(p, &cell)| c.weights[p * self.psi + cell as usize])
            .sum();
        ((self.t as f64 - 2.0 * dot + c.norm2) / self.t as f64).max(0.0)
    }

    fn mean(&self, members: &[usize]) -> DenseCenter {
        let mut weights = vec![0.0; self.psi * self.t];
        for &i in members {
            for (p, &cell) in self.maps[i].cells().iter().enumerate() {
                weights[p * self.psi + cell as usize] += 1.0;
            }
        }
        let m = members.len() as f64;
        weights.iter_mut().for_each(|w| *w /= m);
        let norm2 = weights.iter().map(|w| w * w).sum();
        DenseCenter { weights, norm2 }
    }
}
