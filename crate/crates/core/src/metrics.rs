//! Distributional utility metrics between a real and a generated dataset.
//!
//! All dataset-level metrics work on coordinates normalised to the unit square
//! by the dataset's [`NormalizationSpec`].

use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::NormalizationSpec;
use crate::data::{Dataset, Trajectory};
use crate::error::{Error, Result};

pub type Point2 = [f64; 2];

/// A multiset of 2-D points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSet(pub Vec<Point2>);

impl PointSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// All points of a dataset in normalised (lat, lon) space.
    pub fn from_dataset(ds: &Dataset, spec: &NormalizationSpec) -> Self {
        PointSet(ds.points().map(|p| spec.spatial(p)).collect())
    }
}

impl From<Vec<Point2>> for PointSet {
    fn from(v: Vec<Point2>) -> Self {
        PointSet(v)
    }
}

#[inline]
fn dist2(a: &Point2, b: &Point2) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Uniform bucket grid over a point set for exact nearest-neighbour queries.
struct GridIndex<'a> {
    points: &'a [Point2],
    origin: Point2,
    cell: f64,
    dims: (usize, usize),
    /// Start offsets into `order`, one per cell plus a sentinel.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> GridIndex<'a> {
    fn new(points: &'a [Point2]) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        let per_side = ((points.len() as f64 / 2.0).sqrt().ceil() as usize).clamp(1, 2048);
        let cell = if extent > 0.0 { extent / per_side as f64 } else { 1.0 };
        let dim = |k: usize| (((hi[k] - lo[k]) / cell).floor() as usize + 1).min(per_side + 1);
        let dims = (dim(0), dim(1));

        let mut index = GridIndex {
            points,
            origin: lo,
            cell,
            dims,
            starts: vec![0; dims.0 * dims.1 + 1],
            order: Vec::new(),
        };
        let cells: Vec<usize> = points
            .iter()
            .map(|p| {
                let (i, j) = index.cell_of(p);
                i * dims.1 + j
            })
            .collect();
        for &c in &cells {
            index.starts[c + 1] += 1;
        }
        for c in 0..dims.0 * dims.1 {
            index.starts[c + 1] += index.starts[c];
        }
        let mut fill = index.starts.clone();
        index.order = vec![0; points.len()];
        for (pi, &c) in cells.iter().enumerate() {
            index.order[fill[c]] = pi;
            fill[c] += 1;
        }
        index
    }

    fn coord(&self, v: f64, k: usize, dim: usize) -> usize {
        let c = ((v - self.origin[k]) / self.cell).floor();
        if c <= 0.0 {
            0
        } else {
            (c as usize).min(dim - 1)
        }
    }

    fn cell_of(&self, p: &Point2) -> (usize, usize) {
        (self.coord(p[0], 0, self.dims.0), self.coord(p[1], 1, self.dims.1))
    }

    fn scan_cell(&self, i: usize, j: usize, q: &Point2, best: &mut f64) {
        let c = i * self.dims.1 + j;
        for &pi in &self.order[self.starts[c]..self.starts[c + 1]] {
            let d = dist2(q, &self.points[pi]);
            if d < *best {
                *best = d;
            }
        }
    }

    /// Squared distance from `q` to its nearest indexed point.
    fn nearest2(&self, q: &Point2) -> f64 {
        let (ci, cj) = self.cell_of(q);
        let (ni, nj) = (self.dims.0 as isize, self.dims.1 as isize);
        let mut best = f64::INFINITY;
        let mut r: isize = 0;
        loop {
            let (i0, i1, j0, j1) = (ci as isize - r, ci as isize + r, cj as isize - r, cj as isize + r);
            for i in i0.max(0)..=i1.min(ni - 1) {
                let on_edge_row = i == i0 || i == i1;
                if on_edge_row {
                    for j in j0.max(0)..=j1.min(nj - 1) {
                        self.scan_cell(i as usize, j as usize, q, &mut best);
                    }
                } else {
                    if j0 >= 0 {
                        self.scan_cell(i as usize, j0 as usize, q, &mut best);
                    }
                    if j1 < nj {
                        self.scan_cell(i as usize, j1 as usize, q, &mut best);
                    }
                }
            }
            let covers_all = i0 <= 0 && j0 <= 0 && i1 >= ni - 1 && j1 >= nj - 1;
            if covers_all {
                return best;
            }
            // Any point outside the scanned square lies beyond one of its open sides.
            let mut bound = f64::INFINITY;
            if i0 > 0 {
                bound = bound.min(q[0] - (self.origin[0] + i0 as f64 * self.cell));
            }
            if i1 < ni - 1 {
                bound = bound.min(self.origin[0] + (i1 + 1) as f64 * self.cell - q[0]);
            }
            if j0 > 0 {
                bound = bound.min(q[1] - (self.origin[1] + j0 as f64 * self.cell));
            }
            if j1 < nj - 1 {
                bound = bound.min(self.origin[1] + (j1 + 1) as f64 * self.cell - q[1]);
            }
            if bound > 0.0 && best <= bound * bound {
                return best;
            }
            r += 1;
        }
    }
}

fn directed_hausdorff2(from: &[Point2], to: &[Point2]) -> f64 {
    let index = GridIndex::new(to);
    from.iter().map(|q| index.nearest2(q)).fold(0.0, f64::max)
}

fn nonempty(name: &str, len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::arg(format!("{name} must not be empty")));
    }
    Ok(())
}

/// Symmetric Hausdorff distance with Euclidean ground distance.
pub fn hausdorff(a: &PointSet, b: &PointSet) -> Result<f64> {
    nonempty("first point set", a.len())?;
    nonempty("second point set", b.len())?;
    let d2 = directed_hausdorff2(&a.0, &b.0).max(directed_hausdorff2(&b.0, &a.0));
    Ok(d2.sqrt())
}

/// Earth mover's distance between two 1-D empirical distributions.
pub fn wasserstein_1d(u: &[f64], v: &[f64]) -> Result<f64> {
    nonempty("first sample", u.len())?;
    nonempty("second sample", v.len())?;
    let mut u = u.to_vec();
    let mut v = v.to_vec();
    u.sort_by(f64::total_cmp);
    v.sort_by(f64::total_cmp);
    if u.len() == v.len() {
        let sum: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        return Ok(sum / u.len() as f64);
    }
    // Integrate |F_u(x) - F_v(x)| over the merged support.
    let (nu, nv) = (u.len() as f64, v.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = u[0].min(v[0]);
    let mut total = 0.0;
    while i < u.len() || j < v.len() {
        let next = match (u.get(i), v.get(j)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / nu - j as f64 / nv).abs() * (next - prev);
        while i < u.len() && u[i] == next {
            i += 1;
        }
        while j < v.len() && v[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Mean 1-D Wasserstein distance over `n_projections` random directions.
pub fn sliced_wasserstein(a: &PointSet, b: &PointSet, n_projections: usize, seed: u64) -> Result<f64> {
    nonempty("first point set", a.len())?;
    nonempty("second point set", b.len())?;
    if n_projections == 0 {
        return Err(Error::arg("n_projections must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pa = vec![0.0; a.len()];
    let mut pb = vec![0.0; b.len()];
    let mut total = 0.0;
    for _ in 0..n_projections {
        let theta: f64 = rng.random_range(0.0..2.0 * PI);
        let (s, c) = theta.sin_cos();
        for (dst, p) in pa.iter_mut().zip(&a.0) {
            *dst = p[0] * c + p[1] * s;
        }
        for (dst, p) in pb.iter_mut().zip(&b.0) {
            *dst = p[0] * c + p[1] * s;
        }
        total += wasserstein_1d(&pa, &pb)?;
    }
    Ok(total / n_projections as f64)
}

/// Sum of Euclidean lengths of consecutive segments.
pub fn total_travelled_distance(points: &[Point2]) -> Result<f64> {
    nonempty("trajectory", points.len())?;
    Ok(points.windows(2).map(|w| dist2(&w[0], &w[1]).sqrt()).sum())
}

fn ttd_values(ds: &Dataset, spec: &NormalizationSpec) -> Result<Vec<f64>> {
    ds.trajectories
        .iter()
        .map(|t| {
            let pts: Vec<Point2> = t.points.iter().map(|p| spec.spatial(p)).collect();
            total_travelled_distance(&pts)
        })
        .collect()
}

/// Wasserstein distance between the per-trajectory travelled distances.
pub fn ttd_metric(real: &Dataset, generated: &Dataset, spec: &NormalizationSpec) -> Result<f64> {
    nonempty("real dataset", real.len())?;
    nonempty("generated dataset", generated.len())?;
    wasserstein_1d(&ttd_values(real, spec)?, &ttd_values(generated, spec)?)
}

/// Fraction of consecutive pairs whose timestamp `day * 24 + hour` decreases.
pub fn time_reversal_ratio(t: &Trajectory) -> Result<f64> {
    if t.len() < 2 {
        return Err(Error::arg(format!(
            "time reversal ratio needs 2 points, got {}",
            t.len()
        )));
    }
    let reversals = t.points.windows(2).filter(|w| w[0].tau() > w[1].tau()).count();
    Ok(reversals as f64 / (t.len() - 1) as f64)
}

/// Mean TRR over trajectories with at least two points.
pub fn mean_time_reversal_ratio(ds: &Dataset) -> Result<f64> {
    let ratios: Vec<f64> = ds
        .trajectories
        .iter()
        .filter(|t| t.len() >= 2)
        .map(time_reversal_ratio)
        .collect::<Result<_>>()?;
    nonempty("trajectories with two or more points", ratios.len())?;
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub n_projections: usize,
    /// Points drawn from each side for the sliced Wasserstein distance.
    pub swd_sample: usize,
    pub seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            n_projections: 100,
            swd_sample: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hd: f64,
    pub swd: f64,
    pub ttd_wd: f64,
    pub trr: f64,
    pub fold: String,
    pub steps: u64,
    pub seed: u64,
}

pub const REPORT_COLUMNS: [&str; 7] = ["hd", "swd", "ttd_wd", "trr", "fold", "steps", "seed"];

impl MetricsReport {
    pub fn csv_record(&self) -> [String; 7] {
        [
            self.hd.to_string(),
            self.swd.to_string(),
            self.ttd_wd.to_string(),
            self.trr.to_string(),
            self.fold.clone(),
            self.steps.to_string(),
            self.seed.to_string(),
        ]
    }
}

/// Draws up to `n` points without replacement, keeping all if fewer.
fn subsample(points: &PointSet, n: usize, rng: &mut ChaCha8Rng) -> PointSet {
    if points.len() <= n {
        return points.clone();
    }
    let mut idx = sample(rng, points.len(), n).into_vec();
    idx.sort_unstable();
    PointSet(idx.into_iter().map(|i| points.0[i]).collect())
}

/// Sliced Wasserstein distance between the point clouds of two datasets,
/// subsampled as configured.
pub fn dataset_swd(real: &Dataset, generated: &Dataset, spec: &NormalizationSpec, cfg: &MetricsConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a = subsample(&PointSet::from_dataset(real, spec), cfg.swd_sample, &mut rng);
    let b = subsample(&PointSet::from_dataset(generated, spec), cfg.swd_sample, &mut rng);
    sliced_wasserstein(&a, &b, cfg.n_projections, cfg.seed)
}

/// Computes all four metrics. The generated point cloud is truncated to the
/// real test set's point count before the Hausdorff distance.
pub fn evaluate(
    real_test: &Dataset,
    generated: &Dataset,
    spec: &NormalizationSpec,
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    nonempty("real dataset", real_test.len())?;
    nonempty("generated dataset", generated.len())?;
    let real_points = PointSet::from_dataset(real_test, spec);
    let mut gen_points = PointSet::from_dataset(generated, spec);
    if gen_points.len() < real_points.len() {
        return Err(Error::arg(format!(
            "generated dataset has {} points, fewer than the {} real points",
            gen_points.len(),
            real_points.len()
        )));
    }
    gen_points.0.truncate(real_points.len());
    Ok(MetricsReport {
        hd: hausdorff(&real_points, &gen_points)?,
        swd: dataset_swd(real_test, generated, spec, cfg)?,
        ttd_wd: ttd_metric(real_test, generated, spec)?,
        trr: mean_time_reversal_ratio(generated)?,
        fold: String::new(),
        steps: 0,
        seed: cfg.seed,
    })
}
