//! Dataset loading, normalization, site partitioning and seeded randomness.
//!
//! Every randomized step in the crate draws from an [`RngStream`]: a master
//! seed plus a text label. The label is hashed together with the seed, so a
//! stream is fully determined by `(master_seed, label)` and unrelated to how
//! many other streams were drawn before it.

pub mod synth;

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KdcError, Result};

/// Points in `R^d` with optional ground-truth labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    name: String,
    points: Array2<f64>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        points: Array2<f64>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if let Some((idx, _)) = points.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let d = points.ncols().max(1);
            return Err(KdcError::InvalidDataset(format!(
                "non-finite value at row {}, column {}",
                idx / d,
                idx % d
            )));
        }
        if let Some(l) = &labels {
            if l.len() != points.nrows() {
                return Err(KdcError::InvalidDataset(format!(
                    "{} labels for {} points",
                    l.len(),
                    points.nrows()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            points,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    /// Rows selected by `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Array2<f64> {
        self.points.select(Axis(0), indices)
    }

    /// Writes the dataset as CSV with a header; the label column goes last.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header).map_err(csv_io)?;
        for (i, row) in self.points.rows().into_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush().map_err(|e| KdcError::Io {
            path: "<csv writer>".into(),
            source: e,
        })
    }
}

fn csv_io(e: csv::Error) -> KdcError {
    KdcError::Io {
        path: "<csv writer>".into(),
        source: std::io::Error::other(e),
    }
}

/// How a CSV file is laid out.
#[derive(Clone, Copy, Debug, Default)]
pub struct CsvOptions {
    /// 0-indexed column holding the ground-truth label.
    pub label_column: Option<usize>,
    pub has_header: bool,
}

pub fn load_csv(path: impl AsRef<Path>, opts: CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| KdcError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    read_csv(file, &name, opts)
}

/// Parses CSV from any reader. Reported row numbers are 1-based file lines;
/// column numbers are 0-based field indices.
pub fn read_csv(reader: impl Read, name: &str, opts: CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(opts.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut arity: Option<usize> = None;
    let first_line = if opts.has_header { 2 } else { 1 };

    for (i, rec) in rdr.records().enumerate() {
        let row = first_line + i;
        let rec = rec.map_err(|e| KdcError::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        match arity {
            None => {
                if let Some(lc) = opts.label_column {
                    if lc >= rec.len() {
                        return Err(KdcError::InvalidArgument(format!(
                            "label column {lc} out of range for {} columns",
                            rec.len()
                        )));
                    }
                }
                arity = Some(rec.len());
            }
            Some(a) if a != rec.len() => {
                return Err(KdcError::RaggedRow {
                    row,
                    found: rec.len(),
                    expected: a,
                })
            }
            _ => {}
        }
        for (col, field) in rec.iter().enumerate() {
            if Some(col) == opts.label_column {
                labels.push(parse_label(field).ok_or_else(|| KdcError::Parse {
                    row,
                    column: col,
                    message: format!("label {field:?} is not a non-negative integer"),
                })?);
                continue;
            }
            let v: f64 = field.parse().map_err(|_| KdcError::Parse {
                row,
                column: col,
                message: format!("{field:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(KdcError::Parse {
                    row,
                    column: col,
                    message: format!("{field:?} is not finite"),
                });
            }
            values.push(v);
        }
    }

    let arity = arity.ok_or(KdcError::EmptyDataset)?;
    let d = arity - usize::from(opts.label_column.is_some());
    if d == 0 {
        return Err(KdcError::InvalidDataset("no feature columns".into()));
    }
    let n = values.len() / d;
    let points = Array2::from_shape_vec((n, d), values)
        .map_err(|e| KdcError::InvalidDataset(e.to_string()))?;
    let labels = opts.label_column.map(|_| labels);
    Dataset::new(name, points, labels)
}

fn parse_label(field: &str) -> Option<usize> {
    if let Ok(v) = field.parse::<usize>() {
        return Some(v);
    }
    let v: f64 = field.parse().ok()?;
    (v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64).then_some(v as usize)
}

/// Maps every dimension onto `[0, 1]` by min-max scaling. Constant
/// dimensions map to 0.
pub fn normalize_unit_range(ds: &Dataset) -> Dataset {
    let mut points = ds.points.clone();
    for mut col in points.columns_mut() {
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        if span > 0.0 {
            col.mapv_inplace(|v| ((v - lo) / span).clamp(0.0, 1.0));
        } else {
            col.fill(0.0);
        }
    }
    Dataset {
        name: ds.name.clone(),
        points,
        labels: ds.labels.clone(),
    }
}

/// A labelled, seeded random stream.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub label: String,
}

impl RngStream {
    pub fn new(master_seed: u64, label: impl Into<String>) -> Self {
        Self {
            master_seed,
            label: label.into(),
        }
    }

    /// A stream whose label extends this one with `/suffix`.
    pub fn child(&self, suffix: impl std::fmt::Display) -> Self {
        Self::new(self.master_seed, format!("{}/{}", self.label, suffix))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.master_seed.to_le_bytes());
        h.update(self.label.as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        ChaCha8Rng::from_seed(seed)
    }
}

/// How data sizes are spread over sites.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "fraction")]
pub enum SiteLayout {
    Even,
    /// The first site holds `ceil(fraction * n)` points; the rest split evenly.
    Skewed(f64),
}

/// Disjoint index lists, one per site, covering `0..n`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SitePartition {
    sites: Vec<Vec<usize>>,
    n: usize,
}

impl SitePartition {
    /// Validates that `sites` is a partition of `0..n` with no empty site.
    pub fn from_sites(sites: Vec<Vec<usize>>, n: usize) -> Result<Self> {
        if sites.is_empty() {
            return Err(KdcError::InvalidArgument("no sites".into()));
        }
        let mut seen = vec![false; n];
        for (l, site) in sites.iter().enumerate() {
            if site.is_empty() {
                return Err(KdcError::InvalidArgument(format!("site {l} is empty")));
            }
            for &i in site {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(KdcError::InvalidArgument(format!(
                        "index {i} out of range or assigned twice"
                    )));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(KdcError::InvalidArgument(
                "sites do not cover every point".into(),
            ));
        }
        Ok(Self { sites, n })
    }

    /// Everything on one site.
    pub fn single(n: usize) -> Self {
        Self {
            sites: vec![(0..n).collect()],
            n,
        }
    }

    pub fn sites(&self) -> &[Vec<usize>] {
        &self.sites
    }

    pub fn r(&self) -> usize {
        self.sites.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.sites.iter().map(Vec::len).collect()
    }
}

fn skew_head(fraction: f64, n: usize) -> usize {
    // 0.1 * 30 would otherwise ceil to 4
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Randomly assigns `0..n` to `r` sites.
pub fn partition_sites(
    n: usize,
    r: usize,
    layout: SiteLayout,
    stream: &RngStream,
) -> Result<SitePartition> {
    if r == 0 {
        return Err(KdcError::InvalidArgument("site count must be positive".into()));
    }
    if r > n {
        return Err(KdcError::InvalidArgument(format!(
            "{r} sites for {n} points"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream.rng());

    let sizes: Vec<usize> = match layout {
        SiteLayout::Even => (0..r).map(|l| n / r + usize::from(l < n % r)).collect(),
        SiteLayout::Skewed(p) => {
            if !(0.0..1.0).contains(&p) {
                return Err(KdcError::InvalidArgument(format!(
                    "skew fraction {p} outside [0, 1)"
                )));
            }
            if r == 1 {
                vec![n]
            } else {
                let head = skew_head(p, n);
                if head > n - (r - 1) || head == 0 {
                    return Err(KdcError::InvalidArgument(format!(
                        "skew {p} leaves too few points for {} other sites",
                        r - 1
                    )));
                }
                let rest = n - head;
                let tail = r - 1;
                std::iter::once(head)
                    .chain((0..tail).map(|l| rest / tail + usize::from(l < rest % tail)))
                    .collect()
            }
        }
    };

    let mut sites = Vec::with_capacity(r);
    let mut offset = 0;
    for size in sizes {
        let mut site = order[offset..offset + size].to_vec();
        site.sort_unstable();
        sites.push(site);
        offset += size;
    }
    Ok(SitePartition { sites, n })
}

/// Uniform sample without replacement of exactly `s_target` entries.
pub fn sample_subset(indices: &[usize], s_target: usize, stream: &RngStream) -> Result<Vec<usize>> {
    if s_target > indices.len() {
        return Err(KdcError::InvalidArgument(format!(
            "sample of {s_target} from {} indices",
            indices.len()
        )));
    }
    let mut rng = stream.rng();
    Ok(rand::seq::index::sample(&mut rng, indices.len(), s_target)
        .into_iter()
        .map(|i| indices[i])
        .collect())
}

/// The step-1 subset as a sorted list of global point ids.
///
/// Depends only on `(stream, n, s)`, never on the data layout, so every site
/// can compute it and keep the ids it owns.
pub fn global_subset(n: usize, s: usize, stream: &RngStream) -> Result<Vec<usize>> {
    if s > n {
        return Err(KdcError::InvalidArgument(format!("subset size {s} exceeds n={n}")));
    }
    let mut rng = stream.rng();
    let mut ids = rand::seq::index::sample(&mut rng, n, s).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Ids of `site` (sorted) that belong to the sorted `subset`.
pub fn site_share(site: &[usize], subset: &HashSet<usize>) -> Vec<usize> {
    site.iter().copied().filter(|i| subset.contains(i)).collect()
}

/// Per-site sample sizes proportional to site sizes: `floor(s * n_l / n)`,
/// with the remainder handed out by largest fractional part (ties to the
/// lower site index).
pub fn proportional_quotas(site_sizes: &[usize], s: usize) -> Vec<usize> {
    let n: usize = site_sizes.iter().sum();
    if n == 0 {
        return vec![0; site_sizes.len()];
    }
    let exact: Vec<u128> = site_sizes.iter().map(|&m| s as u128 * m as u128).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|&e| (e / n as u128) as usize).collect();
    let remainder = s - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..site_sizes.len()).collect();
    order.sort_by(|&a, &b| (exact[b] % n as u128).cmp(&(exact[a] % n as u128)).then(a.cmp(&b)));
    for &l in order.iter().take(remainder) {
        quotas[l] += 1;
    }
    quotas
}

/// Default step-1 subset size.
pub fn default_subset_size(n: usize) -> usize {
    n.min(10_000)
}
