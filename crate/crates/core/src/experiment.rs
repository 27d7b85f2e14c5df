//! Config-driven pipeline: preprocessing, k-fold training and evaluation,
//! generation and point-cloud export.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::NormalizationSpec;
use crate::data::{self, BoundingBox, Dataset, Point, Trajectory, GEOLIFE_MIN_LEN, MAX_LEN};
use crate::dp::DpConfig;
use crate::error::{Error, Result};
use crate::gan::{self, generator_checkpoint, generator_from_checkpoint, Generator, TrainConfig, TrainOptions};
use crate::metrics::{self, MetricsConfig, MetricsReport, REPORT_COLUMNS};
use crate::tensor::{read_checkpoint, write_checkpoint};

/// Two-dimensional Gaussian clusters in the unit square with monotone hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticToySpec {
    /// Cluster centres as `[lat, lon]` in `[0, 1]^2`.
    pub centers: Vec<[f64; 2]>,
    pub spread: f64,
    pub trajectories_per_cluster: usize,
    pub points_per_trajectory: usize,
    pub seed: u64,
}

impl Default for SyntheticToySpec {
    fn default() -> Self {
        SyntheticToySpec {
            centers: vec![[0.25, 0.25], [0.75, 0.75]],
            spread: 0.05,
            trajectories_per_cluster: 250,
            points_per_trajectory: MAX_LEN,
            seed: 0,
        }
    }
}

impl SyntheticToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.centers.is_empty() {
            return Err(Error::Config("toy: at least one cluster is required".into()));
        }
        if let Some(c) = self.centers.iter().find(|c| !c.iter().all(|v| (0.0..=1.0).contains(v))) {
            return Err(Error::Config(format!("toy: centre {c:?} outside the unit square")));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::Config("toy: spread must be finite and non-negative".into()));
        }
        if self.trajectories_per_cluster == 0 || !(1..=MAX_LEN).contains(&self.points_per_trajectory) {
            return Err(Error::Config(format!(
                "toy: need at least one trajectory per cluster and 1..={MAX_LEN} points"
            )));
        }
        Ok(())
    }

    /// Cluster `k` owns trajectories `k * per_cluster ..`. Points scatter
    /// around the centre (clamped to the square); each trajectory has one
    /// weekday and hours rising evenly from 0 to 23.
    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let offset = Normal::new(0.0, self.spread).map_err(|e| Error::Config(format!("toy: {e}")))?;
        let weekday = Uniform::new_inclusive(0u8, 6).expect("valid range");
        let n = self.points_per_trajectory;
        let mut trajectories = Vec::new();
        for (k, c) in self.centers.iter().enumerate() {
            for i in 0..self.trajectories_per_cluster {
                let day = weekday.sample(&mut rng);
                let points = (0..n)
                    .map(|j| {
                        let lat = (c[0] + offset.sample(&mut rng)).clamp(0.0, 1.0);
                        let lon = (c[1] + offset.sample(&mut rng)).clamp(0.0, 1.0);
                        Point::new(lat, lon, day, (j * 24 / n) as u8)
                    })
                    .collect::<Result<Vec<_>>>()?;
                trajectories.push(Trajectory::new(format!("c{k}-{i}"), points));
            }
        }
        Ok(Dataset::new("toy", trajectories, BoundingBox::UNIT))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Foursquare-style CSV with `tid,lat,lon,day,hour` columns.
    FsCsv,
    /// Directory tree of Geolife `.plt` files.
    Geolife,
    /// Synthetic clusters from [`SyntheticToySpec`].
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Defaults to the NYC box, the Beijing box or the unit square by kind.
    #[serde(default)]
    pub bbox: Option<BoundingBox>,
    /// Defaults to 96 for Geolife and 1 otherwise.
    #[serde(default)]
    pub min_len: Option<usize>,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub toy: SyntheticToySpec,
}

fn default_max_len() -> usize {
    MAX_LEN
}

impl DatasetSpec {
    pub fn toy(toy: SyntheticToySpec) -> Self {
        DatasetSpec {
            kind: DatasetKind::Toy,
            path: None,
            bbox: None,
            min_len: None,
            max_len: MAX_LEN,
            toy,
        }
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox.unwrap_or(match self.kind {
            DatasetKind::FsCsv => BoundingBox::FS_NYC,
            DatasetKind::Geolife => BoundingBox::GEOLIFE_BEIJING,
            DatasetKind::Toy => BoundingBox::UNIT,
        })
    }

    pub fn min_len(&self) -> usize {
        self.min_len.unwrap_or(match self.kind {
            DatasetKind::Geolife => GEOLIFE_MIN_LEN,
            _ => 1,
        })
    }

    fn validate(&self) -> Result<()> {
        self.bbox().validate()?;
        if !(1..=MAX_LEN).contains(&self.max_len) || self.min_len() < 1 || self.min_len() > self.max_len {
            return Err(Error::Config(format!(
                "dataset: need 1 <= min_len <= max_len <= {MAX_LEN}, got {}..{}",
                self.min_len(),
                self.max_len
            )));
        }
        match (self.kind, &self.path) {
            (DatasetKind::Toy, _) => self.toy.validate(),
            (_, None) => Err(Error::Config(format!("dataset: {:?} needs a path", self.kind))),
            (_, Some(p)) if !p.exists() => Err(Error::Config(format!("dataset: {} does not exist", p.display()))),
            _ => Ok(()),
        }
    }

    /// Loads the raw data without any filtering.
    pub fn load_raw(&self) -> Result<Dataset> {
        let path = || {
            self.path
                .as_deref()
                .ok_or_else(|| Error::Config("dataset: missing path".into()))
        };
        match self.kind {
            DatasetKind::FsCsv => data::load_fs_csv_with_bbox(path()?, self.bbox()),
            DatasetKind::Geolife => data::load_geolife(path()?),
            DatasetKind::Toy => self.toy.generate(),
        }
    }

    /// Loads and preprocesses (bounding box, length cap and floor).
    pub fn load(&self) -> Result<Dataset> {
        self.validate()?;
        data::preprocess(&self.load_raw()?, self.bbox(), self.max_len, self.min_len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub output_dir: PathBuf,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Seed of the fold split.
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub dp: Option<DpConfig>,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_folds() -> usize {
    5
}

impl ExperimentConfig {
    /// Parses a TOML config. Relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.output_dir = base_dir.join(&cfg.output_dir);
        if let Some(p) = cfg.dataset.path.as_mut() {
            *p = base_dir.join(&*p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.metrics.n_projections == 0 || self.metrics.swd_sample == 0 {
            return Err(Error::Config(
                "metrics: projections and sample size must be positive".into(),
            ));
        }
        self.dataset.validate()?;
        self.train.validate()?;
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn spec(&self) -> Result<NormalizationSpec> {
        NormalizationSpec::from_bbox(&self.dataset.bbox())
    }

    /// Training seed of fold `i`.
    pub fn fold_seed(&self, i: usize) -> u64 {
        self.train.seed.wrapping_add(i as u64)
    }
}

/// Git-style object hash: SHA-256 over `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn input_hashes(spec: &DatasetSpec) -> Result<Vec<(String, String)>> {
    let Some(root) = spec.path.as_deref() else {
        return Ok(Vec::new());
    };
    let mut files = Vec::new();
    if root.is_dir() {
        for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::Io(e.into()))?;
            if entry.file_type().is_file() {
                files.push(entry.into_path());
            }
        }
    } else {
        files.push(root.to_path_buf());
    }
    files
        .iter()
        .map(|f| {
            let name = f
                .strip_prefix(root)
                .ok()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(f);
            Ok((name.to_string_lossy().into_owned(), content_hash(&fs::read(f)?)))
        })
        .collect()
}

fn dataset_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["tid", "lat", "lon", "day", "hour"])?;
    for t in &ds.trajectories {
        for p in &t.points {
            w.write_record([
                t.id.clone(),
                p.lat.to_string(),
                p.lon.to_string(),
                p.day.to_string(),
                p.hour.to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Loads and preprocesses the configured dataset, writing `dataset.csv` and
/// `summary.txt` into `out_dir`.
pub fn cmd_preprocess(spec: &DatasetSpec, out_dir: &Path) -> Result<Dataset> {
    let ds = spec.load()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("dataset.csv"), dataset_bytes(&ds)?)?;
    let mut summary = File::create(out_dir.join("summary.txt"))?;
    data::write_summary(&ds, &mut summary)?;
    Ok(ds)
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}±{}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub folds: usize,
    pub hd: MeanStd,
    pub swd: MeanStd,
    pub ttd_wd: MeanStd,
    pub trr: MeanStd,
    pub baseline_swd: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub report: MetricsReport,
    /// SWD of the untrained generator against the same test set.
    pub baseline_swd: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub generated: usize,
    pub dp: Option<gan::DpSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFailure {
    pub fold: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub folds: Vec<FoldResult>,
    pub failures: Vec<FoldFailure>,
    pub aggregate: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    name: String,
    version: String,
    config: ExperimentConfig,
    inputs: Vec<(String, String)>,
    dataset_hash: String,
    seeds: Seeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Seeds {
    split: u64,
    train: Vec<u64>,
    generation: Vec<u64>,
    metrics: u64,
    toy: Option<u64>,
}

fn save_generator<T: crate::tensor::Scalar>(
    g: &mut Generator<T>,
    step: u64,
    bbox: &BoundingBox,
    path: &Path,
) -> Result<()> {
    let mut ckpt = generator_checkpoint(g, step);
    ckpt.meta["bbox"] = serde_json::to_value(bbox)?;
    let mut f = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut f, &ckpt)?;
    f.flush()?;
    Ok(())
}

/// Loads a generator checkpoint and the bounding box stored with it.
pub fn load_generator(path: &Path) -> Result<(Generator<f32>, Option<BoundingBox>)> {
    let mut f = std::io::BufReader::new(File::open(path)?);
    let ckpt = read_checkpoint(&mut f)?;
    let bbox = match ckpt.meta.get("bbox") {
        Some(v) => Some(serde_json::from_value(v.clone())?),
        None => None,
    };
    Ok((generator_from_checkpoint(&ckpt)?, bbox))
}

/// Number of full-length trajectories needed to cover `points` points.
pub fn trajectories_for_points(points: usize) -> usize {
    points.div_ceil(MAX_LEN)
}

fn run_fold(cfg: &ExperimentConfig, fold: usize, split: &data::Fold, dir: &Path) -> Result<FoldResult> {
    fs::create_dir_all(dir)?;
    let spec = cfg.spec()?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.fold_seed(fold);
    let n_gen = trajectories_for_points(split.test.point_count());

    let mut untrained: Generator<f32> =
        gan::Trainer::<f32>::new(train_cfg.clone(), split.train.len(), cfg.dp.as_ref())?.generator;
    let baseline = gan::generate(&mut untrained, n_gen, train_cfg.seed, &spec)?;
    let baseline_swd = metrics::dataset_swd(&split.test, &baseline, &spec, &cfg.metrics)?;

    let mut log = BufWriter::new(File::create(dir.join("train.jsonl"))?);
    let outcome = gan::train::<f32>(
        &train_cfg,
        &split.train,
        &spec,
        cfg.dp.as_ref(),
        TrainOptions {
            log: Some(&mut log),
            checkpoint_dir: Some(dir),
            metrics: cfg.metrics,
            audit: None,
        },
    );
    log.flush()?;
    let mut outcome = outcome?;
    save_generator(
        &mut outcome.generator,
        train_cfg.steps,
        &cfg.dataset.bbox(),
        &dir.join("generator.ckpt"),
    )?;

    let generated = gan::generate(&mut outcome.generator, n_gen, train_cfg.seed, &spec)?;
    let mut report = metrics::evaluate(&split.test, &generated, &spec, &cfg.metrics)?;
    report.fold = fold.to_string();
    report.steps = train_cfg.steps;
    report.seed = train_cfg.seed;
    Ok(FoldResult {
        fold,
        report,
        baseline_swd,
        train_size: split.train.len(),
        test_size: split.test.len(),
        generated: n_gen,
        dp: outcome.dp,
    })
}

fn aggregate(folds: &[FoldResult]) -> Option<Aggregate> {
    if folds.is_empty() {
        return None;
    }
    let col = |f: fn(&FoldResult) -> f64| MeanStd::of(&folds.iter().map(f).collect::<Vec<_>>());
    Some(Aggregate {
        folds: folds.len(),
        hd: col(|r| r.report.hd),
        swd: col(|r| r.report.swd),
        ttd_wd: col(|r| r.report.ttd_wd),
        trr: col(|r| r.report.trr),
        baseline_swd: col(|r| r.baseline_swd),
    })
}

fn write_reports_csv(path: &Path, report: &ExperimentReport, cfg: &ExperimentConfig) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(REPORT_COLUMNS)?;
    for f in &report.folds {
        w.write_record(f.report.csv_record())?;
    }
    if let Some(a) = &report.aggregate {
        w.write_record([
            a.hd.to_string(),
            a.swd.to_string(),
            a.ttd_wd.to_string(),
            a.trr.to_string(),
            "mean±std".to_string(),
            cfg.train.steps.to_string(),
            cfg.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_manifest(cfg: &ExperimentConfig, ds: &Dataset, runs: usize) -> Result<()> {
    let seeds: Vec<u64> = (0..runs).map(|i| cfg.fold_seed(i)).collect();
    let manifest = Manifest {
        name: cfg.name.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        inputs: input_hashes(&cfg.dataset)?,
        dataset_hash: content_hash(&dataset_bytes(ds)?),
        seeds: Seeds {
            split: cfg.seed,
            train: seeds.clone(),
            generation: seeds,
            metrics: cfg.metrics.seed,
            toy: (cfg.dataset.kind == DatasetKind::Toy).then_some(cfg.dataset.toy.seed),
        },
    };
    fs::write(
        cfg.output_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Trains a single generator on the whole configured dataset. Writes
/// `manifest.json`, `train.jsonl` and `generator.ckpt` into the output
/// directory.
pub fn run_training(cfg: &ExperimentConfig) -> Result<gan::TrainOutcome<f32>> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let ds = cfg.dataset.load()?;
    write_manifest(cfg, &ds, 1)?;
    let spec = cfg.spec()?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.fold_seed(0);
    let mut log = BufWriter::new(File::create(out.join("train.jsonl"))?);
    let outcome = gan::train::<f32>(
        &train_cfg,
        &ds,
        &spec,
        cfg.dp.as_ref(),
        TrainOptions {
            log: Some(&mut log),
            checkpoint_dir: Some(out),
            metrics: cfg.metrics,
            audit: None,
        },
    );
    log.flush()?;
    let mut outcome = outcome?;
    save_generator(
        &mut outcome.generator,
        train_cfg.steps,
        &cfg.dataset.bbox(),
        &out.join("generator.ckpt"),
    )?;
    Ok(outcome)
}

/// Runs k-fold cross-validation: for each fold trains on the training
/// split, generates enough trajectories to cover the test split's point
/// count and evaluates them. A failing fold is recorded and skipped.
///
/// Writes `manifest.json`, `reports.csv` (one row per fold plus a
/// `mean±std` row), `report.json` and a `fold-<i>/` directory per fold with
/// the training log and generator checkpoint.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let ds = cfg.dataset.load()?;
    let folds = data::split_folds(&ds, cfg.folds, cfg.seed)?;

    write_manifest(cfg, &ds, cfg.folds)?;

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (i, split) in folds.iter().enumerate() {
        log::info!(
            "fold {i}: {} train / {} test trajectories",
            split.train.len(),
            split.test.len()
        );
        match run_fold(cfg, i, split, &out.join(format!("fold-{i}"))) {
            Ok(r) => results.push(r),
            Err(e) => {
                log::error!("fold {i} failed: {e}");
                failures.push(FoldFailure {
                    fold: i,
                    error: e.to_string(),
                });
            }
        }
    }
    let report = ExperimentReport {
        name: cfg.name.clone(),
        aggregate: aggregate(&results),
        folds: results,
        failures,
    };
    write_reports_csv(&out.join("reports.csv"), &report, cfg)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Generates `n` trajectories from a checkpoint.
pub fn cmd_generate(checkpoint: &Path, n: usize, seed: u64, bbox: Option<BoundingBox>) -> Result<Dataset> {
    let (mut g, stored) = load_generator(checkpoint)?;
    let bbox = bbox
        .or(stored)
        .ok_or_else(|| Error::arg("checkpoint has no bounding box; pass one explicitly"))?;
    gan::generate(&mut g, n, seed, &NormalizationSpec::from_bbox(&bbox)?)
}

/// Writes `lat,lon` rows for every point of `n` generated trajectories and
/// returns the number of rows.
pub fn cmd_export_pointcloud(
    checkpoint: &Path,
    n: usize,
    seed: u64,
    bbox: Option<BoundingBox>,
    out: &Path,
) -> Result<usize> {
    let ds = cmd_generate(checkpoint, n, seed, bbox)?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["lat", "lon"])?;
    for p in ds.points() {
        w.write_record([p.lat.to_string(), p.lon.to_string()])?;
    }
    w.flush()?;
    Ok(ds.point_count())
}

/// Evaluates a generated dataset against a real one.
pub fn cmd_evaluate(real: &Dataset, generated: &Dataset, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let spec = NormalizationSpec::from_bbox(&real.bbox)?;
    metrics::evaluate(real, generated, &spec, cfg)
}
