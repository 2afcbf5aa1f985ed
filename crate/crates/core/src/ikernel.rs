//! Isolation Kernel built from random Voronoi partitionings.
//!
//! Each of the `t` partitionings picks `psi` distinct anchor points from the
//! fitting data; a point falls into the cell of its nearest anchor. The
//! feature map of a point is the one-hot encoding of its cell in every
//! partitioning (a `psi * t` binary vector with exactly `t` ones), and
//! `kappa(x, y)` is the fraction of partitionings in which `x` and `y` share a
//! cell. Averaging feature maps over a set gives its kernel mean map.

use std::collections::{HashMap, HashSet};

use ndarray::ArrayView2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::RngStream;
use crate::error::{KdcError, Result};

/// Hyperparameters of the kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelParams {
    pub psi: usize,
    pub t: usize,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self { psi: 16, t: 200 }
    }
}

impl KernelParams {
    /// Length of the feature map and of one mean map.
    pub fn chi(&self) -> usize {
        self.psi * self.t
    }
}

/// `t` partitionings of `psi` anchors each, stored row-major as
/// `[partitioning][anchor][coordinate]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IsolationKernel {
    params: KernelParams,
    dim: usize,
    anchors: Vec<f64>,
}

/// Active cell index per partitioning.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FeatureMap {
    cells: Vec<u32>,
}

impl FeatureMap {
    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    /// Number of partitionings in which both points share a cell.
    pub fn matches(&self, other: &FeatureMap) -> usize {
        self.cells
            .iter()
            .zip(&other.cells)
            .filter(|(a, b)| a == b)
            .count()
    }

    pub fn kernel(&self, other: &FeatureMap) -> f64 {
        self.matches(other) as f64 / self.cells.len() as f64
    }

    /// Dense binary vector of length `psi * t`.
    pub fn to_dense(&self, psi: usize) -> Vec<f64> {
        let mut v = vec![0.0; psi * self.cells.len()];
        for (i, &c) in self.cells.iter().enumerate() {
            v[i * psi + c as usize] = 1.0;
        }
        v
    }
}

fn row_key(row: impl IntoIterator<Item = f64>) -> Vec<u64> {
    // +0.0 and -0.0 are the same point
    row.into_iter().map(|v| (v + 0.0).to_bits()).collect()
}

impl IsolationKernel {
    /// Samples `t` anchor sets of `psi` distinct points each from `points`.
    pub fn fit(points: ArrayView2<'_, f64>, params: KernelParams, stream: &RngStream) -> Result<Self> {
        let KernelParams { psi, t } = params;
        if psi < 2 {
            return Err(KdcError::InvalidArgument(format!("psi must be >= 2, got {psi}")));
        }
        if t == 0 {
            return Err(KdcError::InvalidArgument("t must be >= 1".into()));
        }
        let n = points.nrows();
        let dim = points.ncols();
        let distinct: HashSet<Vec<u64>> =
            points.rows().into_iter().map(|r| row_key(r.iter().copied())).collect();
        if distinct.len() < psi {
            return Err(KdcError::NotEnoughDistinctPoints {
                required: psi,
                found: distinct.len(),
            });
        }

        let anchors: Vec<Vec<f64>> = (0..t)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream.child(i).rng();
                // lazy Fisher-Yates: draw a random permutation one slot at a time
                let mut swapped: HashMap<usize, usize> = HashMap::new();
                let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(psi);
                let mut out = Vec::with_capacity(psi * dim);
                for j in 0..n {
                    if seen.len() == psi {
                        break;
                    }
                    let r = rng.random_range(j..n);
                    let at_j = *swapped.get(&j).unwrap_or(&j);
                    let pick = *swapped.get(&r).unwrap_or(&r);
                    swapped.insert(r, at_j);
                    let row = points.row(pick);
                    if seen.insert(row_key(row.iter().copied())) {
                        out.extend(row.iter().copied());
                    }
                }
                out
            })
            .collect();

        Ok(Self {
            params,
            dim,
            anchors: anchors.concat(),
        })
    }

    pub fn params(&self) -> KernelParams {
        self.params
    }

    pub fn psi(&self) -> usize {
        self.params.psi
    }

    pub fn t(&self) -> usize {
        self.params.t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Anchor `a` of partitioning `i`.
    pub fn anchor(&self, i: usize, a: usize) -> &[f64] {
        let start = (i * self.params.psi + a) * self.dim;
        &self.anchors[start..start + self.dim]
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(KdcError::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Writes the nearest-anchor cell of `x` for every partitioning into
    /// `cells`. Ties go to the lowest anchor index. `x` must have `dim`
    /// coordinates.
    pub fn embed_into(&self, x: &[f64], cells: &mut [u32]) {
        let psi = self.params.psi;
        let d = self.dim;
        for (i, block) in self.anchors.chunks_exact(psi * d).enumerate() {
            let mut best = 0u32;
            let mut best_dist = f64::INFINITY;
            for (a, anchor) in block.chunks_exact(d).enumerate() {
                let dist: f64 = anchor
                    .iter()
                    .zip(x)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                if dist < best_dist {
                    best_dist = dist;
                    best = a as u32;
                }
            }
            cells[i] = best;
        }
    }

    pub fn embed_point(&self, x: &[f64]) -> Result<FeatureMap> {
        self.check_dim(x)?;
        let mut cells = vec![0; self.params.t];
        self.embed_into(x, &mut cells);
        Ok(FeatureMap { cells })
    }

    /// Feature maps of every row, computed in parallel; output order follows
    /// the rows.
    pub fn embed_rows(&self, points: ArrayView2<'_, f64>) -> Result<Vec<FeatureMap>> {
        if points.ncols() != self.dim {
            return Err(KdcError::DimensionMismatch {
                expected: self.dim,
                found: points.ncols(),
            });
        }
        Ok((0..points.nrows())
            .into_par_iter()
            .map(|r| {
                let row = points.row(r);
                let x: Vec<f64> = row.iter().copied().collect();
                let mut cells = vec![0; self.params.t];
                self.embed_into(&x, &mut cells);
                FeatureMap { cells }
            })
            .collect())
    }

    pub fn kernel_value(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.embed_point(x)?.kernel(&self.embed_point(y)?))
    }

    pub fn mean_map(&self, points: ArrayView2<'_, f64>) -> Result<MeanMap> {
        if points.nrows() == 0 {
            return Err(KdcError::EmptyDataset);
        }
        let maps = self.embed_rows(points)?;
        Ok(MeanMap::from_feature_maps(self.params, &maps))
    }

    pub fn point_set_similarity(&self, x: &[f64], mm: &MeanMap) -> Result<f64> {
        Ok(mm.similarity(&self.embed_point(x)?))
    }

    /// Size in bytes of the anchor broadcast: a `(psi, t, dim)` header of
    /// three little-endian u32 followed by the anchors as f64.
    pub fn encoded_len(&self) -> usize {
        12 + 8 * self.anchors.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend((self.params.psi as u32).to_le_bytes());
        out.extend((self.params.t as u32).to_le_bytes());
        out.extend((self.dim as u32).to_le_bytes());
        for v in &self.anchors {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || KdcError::InvalidArgument("malformed kernel model bytes".into());
        if bytes.len() < 12 {
            return Err(bad());
        }
        let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap()) as usize;
        let (psi, t, dim) = (word(0), word(4), word(8));
        let body = &bytes[12..];
        if body.len() != 8 * psi * t * dim {
            return Err(bad());
        }
        let anchors = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            params: KernelParams { psi, t },
            dim,
            anchors,
        })
    }
}

/// Kernel mean map of a point set: the average of its feature maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMap {
    pub psi: usize,
    pub t: usize,
    pub weights: Vec<f64>,
    pub support_size: usize,
}

impl MeanMap {
    /// Panics if `maps` is empty.
    pub fn from_feature_maps<'a>(
        params: KernelParams,
        maps: impl IntoIterator<Item = &'a FeatureMap>,
    ) -> Self {
        let KernelParams { psi, t } = params;
        let mut counts = vec![0u64; psi * t];
        let mut m = 0usize;
        for fm in maps {
            for (i, &c) in fm.cells.iter().enumerate() {
                counts[i * psi + c as usize] += 1;
            }
            m += 1;
        }
        assert!(m > 0, "mean map of an empty set");
        let weights = counts.into_iter().map(|c| c as f64 / m as f64).collect();
        Self {
            psi,
            t,
            weights,
            support_size: m,
        }
    }

    /// `<Phi(x), mean map> / t`, accumulated per partitioning then divided.
    pub fn similarity(&self, fm: &FeatureMap) -> f64 {
        let total: f64 = fm
            .cells
            .iter()
            .enumerate()
            .map(|(i, &c)| self.weights[i * self.psi + c as usize])
            .sum();
        total / self.t as f64
    }

    /// Sum of weights inside partitioning block `i`.
    pub fn block_sum(&self, i: usize) -> f64 {
        self.weights[i * self.psi..(i + 1) * self.psi].iter().sum()
    }

    /// Byte length of [`MeanMap::to_bytes`].
    pub fn encoded_len(&self) -> usize {
        16 + 8 * self.weights.len()
    }

    /// `psi: u32`, `t: u32`, length `u64`, then the weights as f64, all
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend((self.psi as u32).to_le_bytes());
        out.extend((self.t as u32).to_le_bytes());
        out.extend((self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            out.extend(w.to_le_bytes());
        }
        out
    }

    /// Decodes [`MeanMap::to_bytes`]. `support_size` is not transmitted and
    /// comes back as 0.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = || KdcError::InvalidArgument("malformed mean map bytes".into());
        if bytes.len() < 16 {
            return Err(bad());
        }
        let psi = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if len != psi * t || bytes.len() != 16 + 8 * len {
            return Err(bad());
        }
        let weights = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            psi,
            t,
            weights,
            support_size: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = RngStream::new(seed, "pts").rng();
        Array2::from_shape_fn((n, d), |_| rng.random::<f64>())
    }

    fn model(seed: u64, pts: &Array2<f64>, psi: usize, t: usize) -> IsolationKernel {
        IsolationKernel::fit(pts.view(), KernelParams { psi, t }, &RngStream::new(seed, "kernel")).unwrap()
    }

    fn dense_dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn fit_shape_and_determinism() {
        let pts = random_points(1, 10_000, 2);
        let m = model(3, &pts, 16, 200);
        assert_eq!(m.anchors.len(), 16 * 200 * 2);
        assert_eq!(m, model(3, &pts, 16, 200));
        assert_ne!(m, model(4, &pts, 16, 200));
        for i in 0..m.t() {
            let keys: HashSet<_> = (0..16).map(|a| row_key(m.anchor(i, a).iter().copied())).collect();
            assert_eq!(keys.len(), 16);
        }
    }

    #[test]
    fn fit_needs_enough_distinct_points() {
        let pts = array![[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        let err = IsolationKernel::fit(pts.view(), KernelParams { psi: 4, t: 3 }, &RngStream::new(0, "k"))
            .unwrap_err();
        assert!(matches!(err, KdcError::NotEnoughDistinctPoints { required: 4, found: 3 }));
        assert!(IsolationKernel::fit(pts.view(), KernelParams { psi: 3, t: 3 }, &RngStream::new(0, "k")).is_ok());
    }

    #[test]
    fn anchor_maps_to_its_own_cell() {
        let pts = random_points(2, 200, 3);
        let m = model(1, &pts, 8, 20);
        for i in 0..m.t() {
            let a = m.anchor(i, 5).to_vec();
            assert_eq!(m.embed_point(&a).unwrap().cells()[i], 5);
        }
        assert!(matches!(
            m.embed_point(&[0.0, 0.0]),
            Err(KdcError::DimensionMismatch { expected: 3, found: 2 })
        ));
    }

    #[test]
    fn ties_go_to_lowest_anchor() {
        let m = IsolationKernel {
            params: KernelParams { psi: 6, t: 1 },
            dim: 1,
            anchors: vec![10.0, 10.0, -1.0, 9.0, 12.0, 1.0],
        };
        // 0.0 is equidistant to anchors 2 (-1) and 5 (1)
        assert_eq!(m.embed_point(&[0.0]).unwrap().cells(), &[2]);
    }

    #[test]
    fn kernel_ratio_example() {
        let x = FeatureMap { cells: vec![1, 2, 3, 4] };
        let y = FeatureMap { cells: vec![1, 2, 3, 0] };
        assert_eq!(x.kernel(&y), 0.75);
    }

    #[test]
    fn kernel_matches_dense_dot_product() {
        let pts = random_points(5, 300, 2);
        let m = model(9, &pts, 16, 50);
        let mut rng = RngStream::new(5, "pairs").rng();
        for _ in 0..100 {
            let x = [rng.random::<f64>(), rng.random::<f64>()];
            let y = [rng.random::<f64>(), rng.random::<f64>()];
            let dx = m.embed_point(&x).unwrap().to_dense(16);
            let dy = m.embed_point(&y).unwrap().to_dense(16);
            assert_eq!(m.kernel_value(&x, &y).unwrap(), dense_dot(&dx, &dy) / 50.0);
            assert_eq!(m.kernel_value(&x, &x).unwrap(), 1.0);
        }
    }

    #[test]
    fn mean_map_examples() {
        let pts = random_points(6, 100, 2);
        let m = model(2, &pts, 8, 30);
        let single = m.mean_map(pts.slice(ndarray::s![0..1, ..])).unwrap();
        assert_eq!(single.weights.iter().filter(|&&w| w == 1.0).count(), 30);
        assert_eq!(single.weights.iter().filter(|&&w| w == 0.0).count(), 8 * 30 - 30);
        let x = pts.row(0).to_vec();
        assert_eq!(m.point_set_similarity(&x, &single).unwrap(), 1.0);

        let dup = ndarray::stack![ndarray::Axis(0), pts.row(0), pts.row(0)];
        assert_eq!(m.mean_map(dup.view()).unwrap().weights, single.weights);

        let twenty = m.mean_map(pts.slice(ndarray::s![0..20, ..])).unwrap();
        assert_eq!(twenty.support_size, 20);
        for i in 0..30 {
            assert!((twenty.block_sum(i) - 1.0).abs() < 1e-12);
        }
        assert!(m.mean_map(pts.slice(ndarray::s![0..0, ..])).is_err());
    }

    #[test]
    fn disjoint_cells_give_zero_similarity() {
        let m = IsolationKernel {
            params: KernelParams { psi: 2, t: 2 },
            dim: 1,
            anchors: vec![0.0, 10.0, 0.0, 10.0],
        };
        let mm = m.mean_map(array![[9.0], [11.0]].view()).unwrap();
        assert_eq!(m.point_set_similarity(&[0.5], &mm).unwrap(), 0.0);
    }

    #[test]
    fn similarity_is_average_pairwise_kernel() {
        let pts = random_points(8, 400, 2);
        let m = model(4, &pts, 16, 100);
        let set = pts.slice(ndarray::s![100..130, ..]);
        let mm = m.mean_map(set).unwrap();
        for r in 0..20 {
            let x = pts.row(r).to_vec();
            let brute: f64 = set
                .rows()
                .into_iter()
                .map(|y| m.kernel_value(&x, y.as_slice().unwrap()).unwrap())
                .sum::<f64>()
                / 30.0;
            assert!((m.point_set_similarity(&x, &mm).unwrap() - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn union_mean_map_is_average_for_equal_sizes() {
        let pts = random_points(10, 200, 2);
        let m = model(7, &pts, 8, 40);
        let a = m.mean_map(pts.slice(ndarray::s![0..25, ..])).unwrap();
        let b = m.mean_map(pts.slice(ndarray::s![25..50, ..])).unwrap();
        let ab = m.mean_map(pts.slice(ndarray::s![0..50, ..])).unwrap();
        for ((u, x), y) in ab.weights.iter().zip(&a.weights).zip(&b.weights) {
            assert!((u - (x + y) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_independent_of_parallelism() {
        let pts = random_points(12, 500, 4);
        let m = model(1, &pts, 16, 64);
        let par = m.embed_rows(pts.view()).unwrap();
        let serial: Vec<FeatureMap> = pts
            .rows()
            .into_iter()
            .map(|r| m.embed_point(r.as_slice().unwrap()).unwrap())
            .collect();
        assert_eq!(par, serial);
    }

    #[test]
    fn model_bytes_round_trip() {
        let pts = random_points(13, 50, 3);
        let m = model(1, &pts, 4, 7);
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), m.encoded_len());
        assert_eq!(IsolationKernel::from_bytes(&bytes).unwrap(), m);
    }

    proptest! {
        #[test]
        fn kernel_symmetric_and_bounded(seed in 0u64..500, a in 0usize..60, b in 0usize..60) {
            let pts = random_points(seed, 60, 2);
            let m = model(seed, &pts, 4, 25);
            let x = pts.row(a).to_vec();
            let y = pts.row(b).to_vec();
            let kxy = m.kernel_value(&x, &y).unwrap();
            prop_assert_eq!(kxy, m.kernel_value(&y, &x).unwrap());
            prop_assert!((0.0..=1.0).contains(&kxy));
        }

        #[test]
        fn mean_map_bytes_round_trip(seed in 0u64..200, m_pts in 1usize..20) {
            let pts = random_points(seed, 40, 2);
            let m = model(seed, &pts, 4, 9);
            let mm = m.mean_map(pts.slice(ndarray::s![0..m_pts, ..])).unwrap();
            let bytes = mm.to_bytes();
            prop_assert_eq!(bytes.len(), mm.encoded_len());
            let back = MeanMap::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.weights, mm.weights);
            prop_assert_eq!((back.psi, back.t), (4, 9));
        }
    }
}
