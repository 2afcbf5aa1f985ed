//! Generated 2-D benchmark fixtures.
//!
//! `jain_like` and `complex9_like` reproduce the shape families of the Jain
//! and Complex9 benchmarks (two crescents of unequal density; nine clusters
//! mixing rings, crescents, bars and blobs). They are synthetic stand-ins with
//! the same cluster counts and sizes, not copies of the original files.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, RngStream};

struct Builder<R: Rng> {
    rng: R,
    coords: Vec<f64>,
    labels: Vec<usize>,
}

impl<R: Rng> Builder<R> {
    fn push(&mut self, x: f64, y: f64, label: usize) {
        self.coords.push(x);
        self.coords.push(y);
        self.labels.push(label);
    }

    /// Points on a circular arc with Gaussian radial noise.
    fn arc(&mut self, count: usize, center: (f64, f64), radius: f64, degrees: (f64, f64), sd: f64, label: usize) {
        let noise = Normal::new(0.0, sd).expect("sd > 0");
        for _ in 0..count {
            let th = self.rng.random_range(degrees.0..degrees.1) * PI / 180.0;
            let r = radius + noise.sample(&mut self.rng);
            self.push(center.0 + r * th.cos(), center.1 + r * th.sin(), label);
        }
    }

    fn rect(&mut self, count: usize, x: (f64, f64), y: (f64, f64), label: usize) {
        for _ in 0..count {
            let px = self.rng.random_range(x.0..x.1);
            let py = self.rng.random_range(y.0..y.1);
            self.push(px, py, label);
        }
    }

    fn disk(&mut self, count: usize, center: (f64, f64), radius: f64, label: usize) {
        for _ in 0..count {
            let th = self.rng.random_range(0.0..2.0 * PI);
            let r = radius * self.rng.random::<f64>().sqrt();
            self.push(center.0 + r * th.cos(), center.1 + r * th.sin(), label);
        }
    }

    fn gaussian(&mut self, count: usize, center: (f64, f64), sd: f64, label: usize) {
        let noise = Normal::new(0.0, sd).expect("sd > 0");
        for _ in 0..count {
            let x = center.0 + noise.sample(&mut self.rng);
            let y = center.1 + noise.sample(&mut self.rng);
            self.push(x, y, label);
        }
    }

    fn triangle(&mut self, count: usize, a: (f64, f64), b: (f64, f64), c: (f64, f64), label: usize) {
        for _ in 0..count {
            let (mut u, mut v): (f64, f64) = (self.rng.random(), self.rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            let x = a.0 + u * (b.0 - a.0) + v * (c.0 - a.0);
            let y = a.1 + u * (b.1 - a.1) + v * (c.1 - a.1);
            self.push(x, y, label);
        }
    }

    fn finish(self, name: &str) -> Dataset {
        let n = self.labels.len();
        let points = Array2::from_shape_vec((n, 2), self.coords).expect("2 coords per point");
        Dataset::new(name, points, Some(self.labels)).expect("generated data is finite")
    }
}

fn builder(stream: &RngStream) -> Builder<impl Rng> {
    Builder {
        rng: stream.rng(),
        coords: Vec::new(),
        labels: Vec::new(),
    }
}

/// 373 points: a dense lower crescent (276) and a sparse upper crescent (97)
/// whose tips reach into each other's concave side.
pub fn jain_like(seed: u64) -> Dataset {
    let mut b = builder(&RngStream::new(seed, "synth/jain"));
    b.arc(276, (18.0, 24.0), 18.0, (200.0, 340.0), 1.3, 0);
    b.arc(97, (36.0, 18.0), 14.0, (20.0, 160.0), 1.0, 1);
    b.finish("jain_like")
}

/// 3031 points in nine clusters: a ring around a disk, two interlocking
/// crescents, a U around a blob, two bars and a sparse triangle.
pub fn complex9_like(seed: u64) -> Dataset {
    let mut b = builder(&RngStream::new(seed, "synth/complex9"));
    b.arc(500, (150.0, 350.0), 100.0, (0.0, 360.0), 5.0, 0);
    b.disk(300, (150.0, 350.0), 45.0, 1);
    b.arc(350, (400.0, 360.0), 70.0, (0.0, 180.0), 5.0, 2);
    b.arc(350, (470.0, 385.0), 70.0, (180.0, 360.0), 5.0, 3);
    b.rect(400, (300.0, 640.0), (70.0, 100.0), 4);
    b.rect(300, (665.0, 695.0), (150.0, 470.0), 5);
    b.rect(120, (50.0, 75.0), (30.0, 230.0), 6);
    b.rect(120, (225.0, 250.0), (30.0, 230.0), 6);
    b.rect(110, (75.0, 225.0), (30.0, 55.0), 6);
    b.gaussian(150, (150.0, 150.0), 14.0, 7);
    b.triangle(331, (330.0, 150.0), (600.0, 150.0), (465.0, 260.0), 8);
    b.finish("complex9_like")
}

/// Isotropic Gaussian blobs with the given per-blob sizes.
pub fn gaussian_blobs(seed: u64, dim: usize, sizes: &[usize], spread: f64, sd: f64) -> Dataset {
    let stream = RngStream::new(seed, "synth/blobs");
    let mut rng = stream.rng();
    let noise = Normal::new(0.0, sd).expect("sd > 0");
    // centres at least 10 sd apart; fall back to any draw after 1000 tries
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(sizes.len());
    for _ in sizes {
        let mut c: Vec<f64> = Vec::new();
        for _ in 0..1000 {
            c = (0..dim).map(|_| rng.random_range(0.0..spread)).collect();
            let far = centers.iter().all(|o| {
                o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= 10.0 * sd
            });
            if far {
                break;
            }
        }
        centers.push(c);
    }
    let n: usize = sizes.iter().sum();
    let mut coords = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (label, (&count, c)) in sizes.iter().zip(&centers).enumerate() {
        for _ in 0..count {
            coords.extend(c.iter().map(|&m| m + noise.sample(&mut rng)));
            labels.push(label);
        }
    }
    let points = Array2::from_shape_vec((n, dim), coords).expect("dim coords per point");
    Dataset::new(format!("blobs_{dim}d_{n}"), points, Some(labels)).expect("finite")
}

/// The bundled blob fixture: five 2-D blobs of unequal size.
pub fn blobs_fixture() -> Dataset {
    let mut ds = gaussian_blobs(11, 2, &[600, 500, 400, 300, 200], 100.0, 3.0);
    ds.name = "blobs".into();
    ds
}
