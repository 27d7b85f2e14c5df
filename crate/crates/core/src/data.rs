//! Trajectory datasets: loading, bounding-box preprocessing and fold splitting.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate, NaiveTime, Timelike};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trajectory length cap used for both datasets.
pub const MAX_LEN: usize = 144;
/// Minimum length kept for the Geolife dataset.
pub const GEOLIFE_MIN_LEN: usize = 96;

/// A single location record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub lat: f64,
    pub lon: f64,
    /// Weekday, Monday = 0.
    pub day: u8,
    pub hour: u8,
}

impl Point {
    pub fn new(lat: f64, lon: f64, day: u8, hour: u8) -> Result<Self> {
        let p = Point { lat, lon, day, hour };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::arg(format!("latitude {} out of range", self.lat)));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::arg(format!("longitude {} out of range", self.lon)));
        }
        if self.day > 6 {
            return Err(Error::arg(format!("day {} out of range 0-6", self.day)));
        }
        if self.hour > 23 {
            return Err(Error::arg(format!("hour {} out of range 0-23", self.hour)));
        }
        Ok(())
    }

    /// Scalar timestamp in hours since Monday 00:00.
    pub fn tau(&self) -> u32 {
        self.day as u32 * 24 + self.hour as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub points: Vec<Point>,
}

impl Trajectory {
    pub fn new(id: impl Into<String>, points: Vec<Point>) -> Self {
        Trajectory { id: id.into(), points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    /// New York City box used for the Foursquare check-in data.
    pub const FS_NYC: BoundingBox = BoundingBox {
        lat_min: 40.6811,
        lat_max: 40.8411,
        lon_min: -74.0785,
        lon_max: -73.8585,
    };

    /// Beijing fourth ring road, used for Geolife.
    pub const GEOLIFE_BEIJING: BoundingBox = BoundingBox {
        lat_min: 39.8279,
        lat_max: 39.9877,
        lon_min: 116.2676,
        lon_max: 116.4857,
    };

    /// The unit square, used by the synthetic toy datasets.
    pub const UNIT: BoundingBox = BoundingBox {
        lat_min: 0.0,
        lat_max: 1.0,
        lon_min: 0.0,
        lon_max: 1.0,
    };

    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        let b = BoundingBox {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lat_min, self.lat_max, self.lon_min, self.lon_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.lat_min >= self.lat_max || self.lon_min >= self.lon_max {
            return Err(Error::arg(format!("degenerate bounding box {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.lat >= self.lat_min && p.lat <= self.lat_max && p.lon >= self.lon_min && p.lon <= self.lon_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub trajectories: Vec<Trajectory>,
    pub bbox: BoundingBox,
}

impl Dataset {
    pub fn new(name: impl Into<String>, trajectories: Vec<Trajectory>, bbox: BoundingBox) -> Self {
        Dataset {
            name: name.into(),
            trajectories,
            bbox,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn point_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn max_len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).max().unwrap_or(0)
    }

    pub fn points(&self) -> impl Iterator<Item = &Point> {
        self.trajectories.iter().flat_map(|t| t.points.iter())
    }

    /// Histogram of trajectory lengths as `(length, count)` pairs in increasing order.
    pub fn length_histogram(&self) -> Vec<(usize, usize)> {
        let mut counts = std::collections::BTreeMap::new();
        for t in &self.trajectories {
            *counts.entry(t.len()).or_insert(0usize) += 1;
        }
        counts.into_iter().collect()
    }

    fn subset(&self, idx: &[usize], suffix: &str) -> Dataset {
        Dataset {
            name: format!("{}-{suffix}", self.name),
            trajectories: idx.iter().map(|&i| self.trajectories[i].clone()).collect(),
            bbox: self.bbox,
        }
    }
}

const FS_COLUMNS: [&str; 5] = ["tid", "lat", "lon", "day", "hour"];

/// Reads a Foursquare-style CSV (`tid,lat,lon,day,hour`, extra columns ignored).
///
/// Points are grouped by `tid` in order of first appearance, keeping file order
/// within each trajectory. No length filtering is applied.
pub fn load_fs_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    load_fs_csv_with_bbox(path, BoundingBox::FS_NYC)
}

pub fn load_fs_csv_with_bbox(path: impl AsRef<Path>, bbox: BoundingBox) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    let headers = reader.headers()?.clone();
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(FS_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                message: format!("missing column `{name}`"),
            })?;
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Point>> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = record.position().map(|p| p.line()).unwrap_or(i as u64 + 2);
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            row,
            message,
        };
        let field = |c: usize| record.get(c).unwrap_or("");
        let num = |c: usize| -> Result<f64> {
            let s = field(c);
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(format!("non-numeric value `{s}` in column `{}`", &headers[c])))
        };
        let int = |c: usize, max: f64| -> Result<u8> {
            let v = num(c)?;
            if v.fract() != 0.0 || v < 0.0 || v > max {
                return Err(parse_err(format!(
                    "value {v} in column `{}` is not an integer in 0..={max}",
                    &headers[c]
                )));
            }
            Ok(v as u8)
        };
        let tid = field(cols[0]).to_string();
        let point = Point::new(num(cols[1])?, num(cols[2])?, int(cols[3], 6.0)?, int(cols[4], 23.0)?)
            .map_err(|e| parse_err(e.to_string()))?;
        groups
            .entry(tid.clone())
            .or_insert_with(|| {
                order.push(tid);
                Vec::new()
            })
            .push(point);
    }

    let trajectories = order
        .into_iter()
        .map(|tid| {
            let points = groups.remove(&tid).unwrap_or_default();
            Trajectory::new(tid, points)
        })
        .collect();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "fs".into());
    Ok(Dataset::new(name, trajectories, bbox))
}

/// Writes a dataset in the `tid,lat,lon,day,hour` layout read by [`load_fs_csv`].
pub fn write_fs_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(FS_COLUMNS)?;
    for t in &ds.trajectories {
        for p in &t.points {
            w.write_record([
                t.id.clone(),
                format!("{}", p.lat),
                format!("{}", p.lon),
                p.day.to_string(),
                p.hour.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses one Geolife PLT record: `lat,lon,0,altitude,days,date,time`.
pub fn parse_plt_record(line: &str) -> Option<Point> {
    let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if fields.len() < 7 {
        return None;
    }
    let lat: f64 = fields[0].parse().ok()?;
    let lon: f64 = fields[1].parse().ok()?;
    let date = NaiveDate::parse_from_str(fields[5], "%Y-%m-%d").ok()?;
    let time = NaiveTime::parse_from_str(fields[6], "%H:%M:%S").ok()?;
    let day = date.weekday().num_days_from_monday() as u8;
    Point::new(lat, lon, day, time.hour() as u8).ok()
}

const PLT_HEADER_LINES: usize = 6;

fn read_plt(path: &Path) -> std::io::Result<Vec<Point>> {
    let file = fs::File::open(path)?;
    let mut points = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if i < PLT_HEADER_LINES || line.trim().is_empty() {
            continue;
        }
        match parse_plt_record(&line) {
            Some(p) => points.push(p),
            None => log::warn!("{}:{}: skipping malformed record", path.display(), i + 1),
        }
    }
    Ok(points)
}

/// Loads every `.plt` file below `root_dir`, one trajectory per file.
///
/// Files are visited in sorted path order; the trajectory id is the path
/// relative to `root_dir` without extension.
pub fn load_geolife(root_dir: impl AsRef<Path>) -> Result<Dataset> {
    let root = root_dir.as_ref();
    if !root.is_dir() {
        return Err(Error::Format {
            path: root.to_path_buf(),
            message: "not a directory".into(),
        });
    }
    let mut trajectories = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                log::warn!("skipping unreadable entry: {e}");
                continue;
            }
        };
        let path = entry.path();
        let is_plt = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("plt"));
        if !entry.file_type().is_file() || !is_plt {
            continue;
        }
        match read_plt(path) {
            Ok(points) if !points.is_empty() => {
                let id = path
                    .strip_prefix(root)
                    .unwrap_or(path)
                    .with_extension("")
                    .to_string_lossy()
                    .replace('\\', "/");
                trajectories.push(Trajectory::new(id, points));
            }
            Ok(_) => log::warn!("{}: no valid records", path.display()),
            Err(e) => log::warn!("{}: skipping unreadable file: {e}", path.display()),
        }
    }
    Ok(Dataset::new("geolife", trajectories, BoundingBox::GEOLIFE_BEIJING))
}

/// Drops out-of-box points, truncates to `max_len` and discards trajectories
/// shorter than `min_len`.
pub fn preprocess(ds: &Dataset, bbox: BoundingBox, max_len: usize, min_len: usize) -> Result<Dataset> {
    bbox.validate()?;
    if min_len < 1 || max_len < min_len {
        return Err(Error::arg(format!(
            "need max_len >= min_len >= 1, got max_len={max_len} min_len={min_len}"
        )));
    }
    let trajectories = ds
        .trajectories
        .iter()
        .filter_map(|t| {
            let points: Vec<Point> = t
                .points
                .iter()
                .filter(|p| bbox.contains(p))
                .take(max_len)
                .copied()
                .collect();
            (points.len() >= min_len).then(|| Trajectory::new(t.id.clone(), points))
        })
        .collect();
    Ok(Dataset::new(ds.name.clone(), trajectories, bbox))
}

#[derive(Debug, Clone)]
pub struct Fold {
    pub train: Dataset,
    pub test: Dataset,
}

/// Splits into `k` folds after a seeded shuffle. Test partition sizes differ by
/// at most one; the first `n % k` folds receive the extra trajectory.
pub fn split_folds(ds: &Dataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::arg(format!("k must be at least 2, got {k}")));
    }
    let n = ds.len();
    if n < k {
        return Err(Error::arg(format!("{n} trajectories cannot be split into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let test_idx = &idx[start..start + size];
        let train_idx: Vec<usize> = idx[..start].iter().chain(&idx[start + size..]).copied().collect();
        folds.push(Fold {
            train: ds.subset(&train_idx, &format!("train{f}")),
            test: ds.subset(test_idx, &format!("test{f}")),
        });
        start += size;
    }
    Ok(folds)
}

/// Writes a short human-readable summary of a dataset.
pub fn write_summary(ds: &Dataset, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "dataset: {}", ds.name)?;
    writeln!(out, "trajectories: {}", ds.len())?;
    writeln!(out, "points: {}", ds.point_count())?;
    let min_len = ds.trajectories.iter().map(Trajectory::len).min().unwrap_or(0);
    writeln!(out, "length range: {min_len}..={}", ds.max_len())?;
    writeln!(out, "length histogram:")?;
    for (len, count) in ds.length_histogram() {
        writeln!(out, "  {len}: {count}")?;
    }
    Ok(())
}
