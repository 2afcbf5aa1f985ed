//! External clustering-quality metrics from a contingency table.
//!
//! Entropies use natural logarithms. NMI is normalized by the geometric mean
//! of the two entropies, AMI by their arithmetic mean; F1 is pair-counting.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{KdcError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    /// `counts[i][j]`: points in true class `i` and predicted cluster `j`.
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

fn compact<T: Copy + Eq + std::hash::Hash>(labels: &[T]) -> (Vec<usize>, usize) {
    let mut ids = HashMap::new();
    let dense = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(*l).or_insert(next)
        })
        .collect();
    (dense, ids.len())
}

impl ContingencyTable {
    pub fn new(truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(KdcError::InvalidArgument(format!(
                "label vectors differ in length: {} vs {}",
                truth.len(),
                pred.len()
            )));
        }
        if truth.is_empty() {
            return Err(KdcError::EmptyDataset);
        }
        let (u, ru) = compact(truth);
        let (v, rv) = compact(pred);
        let mut counts = vec![vec![0u64; rv]; ru];
        for (&a, &b) in u.iter().zip(&v) {
            counts[a][b] += 1;
        }
        let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..rv).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Ok(Self {
            counts,
            row_sums,
            col_sums,
            n: truth.len() as u64,
        })
    }

    fn entropy(marginal: &[u64], n: u64) -> f64 {
        let n = n as f64;
        -marginal
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                p * p.ln()
            })
            .sum::<f64>()
    }

    pub fn entropy_true(&self) -> f64 {
        Self::entropy(&self.row_sums, self.n)
    }

    pub fn entropy_pred(&self) -> f64 {
        Self::entropy(&self.col_sums, self.n)
    }

    pub fn mutual_information(&self) -> f64 {
        let n = self.n as f64;
        let mut mi = 0.0;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c > 0 {
                    let c = c as f64;
                    mi += c / n * (c * n / (self.row_sums[i] as f64 * self.col_sums[j] as f64)).ln();
                }
            }
        }
        mi.max(0.0)
    }

    /// Exact expected mutual information under the hypergeometric model of
    /// random labelings with these marginals.
    pub fn expected_mutual_information(&self) -> f64 {
        let n = self.n as usize;
        let nf = n as f64;
        let mut lnfact = vec![0.0f64; n + 1];
        for i in 1..=n {
            lnfact[i] = lnfact[i - 1] + (i as f64).ln();
        }
        let mut emi = 0.0;
        for &a in &self.row_sums {
            let a = a as usize;
            for &b in &self.col_sums {
                let b = b as usize;
                let lo = (a + b).saturating_sub(n).max(1);
                let hi = a.min(b);
                for nij in lo..=hi {
                    let x = nij as f64;
                    let term = x / nf * (nf * x / (a as f64 * b as f64)).ln();
                    let lnp = lnfact[a] + lnfact[b] + lnfact[n - a] + lnfact[n - b]
                        - lnfact[n]
                        - lnfact[nij]
                        - lnfact[a - nij]
                        - lnfact[b - nij]
                        - lnfact[n + nij - a - b];
                    emi += term * lnp.exp();
                }
            }
        }
        emi
    }

    fn pairs(c: u64) -> f64 {
        (c as f64) * (c as f64 - 1.0) / 2.0
    }

    /// (pairs together in both, pairs together in truth, pairs together in
    /// prediction).
    pub fn pair_counts(&self) -> (f64, f64, f64) {
        let both = self.counts.iter().flatten().map(|&c| Self::pairs(c)).sum();
        let truth = self.row_sums.iter().map(|&c| Self::pairs(c)).sum();
        let pred = self.col_sums.iter().map(|&c| Self::pairs(c)).sum();
        (both, truth, pred)
    }
}

const EPS: f64 = 1e-15;

pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let ct = ContingencyTable::new(truth, pred)?;
    let (hu, hv) = (ct.entropy_true(), ct.entropy_pred());
    if hu < EPS && hv < EPS {
        return Ok(1.0);
    }
    if hu < EPS || hv < EPS {
        return Ok(0.0);
    }
    Ok((ct.mutual_information() / (hu * hv).sqrt()).clamp(0.0, 1.0))
}

pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let ct = ContingencyTable::new(truth, pred)?;
    if ct.n < 2 {
        return Err(KdcError::InvalidArgument("ARI needs at least two points".into()));
    }
    let (index, a, b) = ct.pair_counts();
    let expected = a * b / ContingencyTable::pairs(ct.n);
    let max = (a + b) / 2.0;
    let denom = max - expected;
    if denom.abs() < EPS {
        return Ok(if truth_matches(&ct) { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}

/// Both labelings induce the same partition.
fn truth_matches(ct: &ContingencyTable) -> bool {
    ct.counts.len() == ct.col_sums.len() && ct.counts.iter().all(|r| r.iter().filter(|&&c| c > 0).count() == 1)
}

pub fn ami(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let ct = ContingencyTable::new(truth, pred)?;
    let emi = ct.expected_mutual_information();
    let mean_h = (ct.entropy_true() + ct.entropy_pred()) / 2.0;
    let denom = mean_h - emi;
    if denom.abs() < 1e-12 {
        return Ok(if truth_matches(&ct) { 1.0 } else { 0.0 });
    }
    Ok((ct.mutual_information() - emi) / denom)
}

/// Pair-counting F1. Zero predicted (or true) positive pairs give 0, unless
/// both are zero, which gives 1.
pub fn pairwise_f1(truth: &[usize], pred: &[usize]) -> Result<f64> {
    let ct = ContingencyTable::new(truth, pred)?;
    if ct.n < 2 {
        return Err(KdcError::InvalidArgument("pairwise F1 needs at least two points".into()));
    }
    let (tp, actual, predicted) = ct.pair_counts();
    if actual == 0.0 && predicted == 0.0 {
        return Ok(1.0);
    }
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / predicted;
    let recall = tp / actual;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// All four scores.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub nmi: f64,
    pub ami: f64,
    pub ari: f64,
    pub f1: f64,
}

impl Scores {
    pub fn compute(truth: &[usize], pred: &[usize]) -> Result<Self> {
        Ok(Self {
            nmi: nmi(truth, pred)?,
            ami: ami(truth, pred)?,
            ari: ari(truth, pred)?,
            f1: pairwise_f1(truth, pred)?,
        })
    }
}
