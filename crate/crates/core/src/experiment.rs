//! Experiment configuration files and the monitors and streams they describe.
//!
//! A config names the detectors to compare, their shared settings and a data
//! source (synthetic Gaussian classes or labeled CSV files). Replicate `r`
//! with seed `rs = derive_seed(seed, r)` draws its training set from
//! `derive_seed(rs, 0)`, seeds its monitor with `derive_seed(rs, 1)` and its
//! stream with `derive_seed(rs, 2)`. All methods see the same training sets
//! and streams.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{average_ranks, estimate_arl0, estimate_delay, estimate_error_rate, ExperimentReport};
use crate::calibration::{
    calibrate_ecdd_limit, calibrate_thresholds, CalibrationConfig, ThresholdTable, DEFAULT_ARL0,
    DEFAULT_REPLICATES, DEFAULT_SURVIVOR_FLOOR, DEFAULT_T_MAX,
};
use crate::cdm::{CdmConfig, CdmMonitor, LabelPolicy};
use crate::datastreams::{
    read_csv_stream, skl_gaussian, CsvSchema, GaussianMixtureConfig, GaussianScenario, LabelColumn, LabelMap,
    Sample,
};
use crate::ecdd::{cross_validated_error, Classifier, ClassifierKind, EcddMonitor, EcddState, CV_FOLDS, DEFAULT_R};
use crate::error::{Error, Result};
use crate::monitor::DriftMonitor;
use crate::qt_ewma::DEFAULT_LAMBDA;
use crate::quanttree::DEFAULT_BINS;
use crate::rng::{derive_seed, rng_from_seed};

pub const EXPERIMENT_FORMAT_VERSION: u32 = 1;

pub const DEFAULT_ARL0_REPLICATES: usize = 5000;
pub const DEFAULT_DELAY_REPLICATES: usize = 1000;
pub const DEFAULT_GRID_REPLICATES: usize = 500;
pub const DEFAULT_HORIZON: u64 = 8000;
pub const DEFAULT_TAU: u64 = 160;
pub const DEFAULT_POST_LENGTH: u64 = 7000;
pub const DEFAULT_TRAIN_PER_CLASS: usize = 256;

/// Width of the p0 buckets sharing one calibrated ECDD limit.
pub const ECDD_P0_BUCKET: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// One QT-EWMA detector per class.
    Cdm,
    /// A single QT-EWMA detector on the pooled stream.
    Qtewma,
    /// EWMA chart of a classifier's error stream.
    Ecdd,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Cdm, Method::Qtewma, Method::Ecdd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cdm => "cdm",
            Method::Qtewma => "qtewma",
            Method::Ecdd => "ecdd",
        }
    }

    pub fn parse(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSettings {
    pub bins: usize,
    pub lambda: f64,
    pub arl0: f64,
    pub t_max: usize,
    pub calibration_replicates: usize,
    pub survivor_floor: usize,
    /// Seed of threshold calibration; derived from the experiment seed when absent.
    pub calibration_seed: Option<u64>,
    pub ecdd_r: f64,
    pub classifier: ClassifierKind,
    pub ecdd_calibration_replicates: usize,
    /// Per-method target ARL0, keyed by method name.
    pub arl0_overrides: BTreeMap<String, f64>,
    /// Precomputed threshold tables, keyed by method name.
    pub thresholds: BTreeMap<String, PathBuf>,
    pub label_policy: LabelPolicy,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        DetectorSettings {
            bins: DEFAULT_BINS,
            lambda: DEFAULT_LAMBDA,
            arl0: DEFAULT_ARL0,
            t_max: DEFAULT_T_MAX,
            calibration_replicates: DEFAULT_REPLICATES,
            survivor_floor: DEFAULT_SURVIVOR_FLOOR,
            calibration_seed: None,
            ecdd_r: DEFAULT_R,
            classifier: ClassifierKind::default(),
            ecdd_calibration_replicates: 2000,
            arl0_overrides: BTreeMap::new(),
            thresholds: BTreeMap::new(),
            label_policy: LabelPolicy::Strict,
        }
    }
}

impl DetectorSettings {
    pub fn arl0_for(&self, method: Method) -> f64 {
        self.arl0_overrides.get(method.name()).copied().unwrap_or(self.arl0)
    }

    fn validate(&self) -> Result<()> {
        for key in self.arl0_overrides.keys().chain(self.thresholds.keys()) {
            if Method::parse(key).is_none() {
                return Err(Error::config(format!("detector: unknown method {key:?}")));
            }
        }
        if let Some(m) = self.thresholds.keys().find(|k| *k == "ecdd") {
            return Err(Error::config(format!(
                "detector.thresholds.{m}: ECDD calibrates its own control limit"
            )));
        }
        for (name, v) in std::iter::once(("arl0", self.arl0)).chain(self.arl0_overrides.iter().map(|(k, v)| (k.as_str(), *v))) {
            if !(v >= 2.0) {
                return Err(Error::config(format!("detector: target ARL0 for {name} must be >= 2, got {v}")));
            }
        }
        if self.bins < 2 {
            return Err(Error::config(format!("detector.bins must be >= 2, got {}", self.bins)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::config(format!("detector.lambda must lie in (0, 1], got {}", self.lambda)));
        }
        if !(self.ecdd_r > 0.0 && self.ecdd_r < 1.0) {
            return Err(Error::config(format!("detector.ecdd_r must lie in (0, 1), got {}", self.ecdd_r)));
        }
        Ok(())
    }
}

/// Labeled CSV data: a pre-change concept and optionally a post-change one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvDataConfig {
    pub pre: PathBuf,
    #[serde(default)]
    pub post: Option<PathBuf>,
    /// Each entry is one drift scenario listing the classes that switch to
    /// the post-change concept; empty means all classes at once.
    #[serde(default)]
    pub drift_subsets: Vec<Vec<u32>>,
    /// Zero-based label column; the last column when absent.
    #[serde(default)]
    pub label_column: Option<usize>,
    #[serde(default)]
    pub has_header: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    /// The mixture's own `tau` is ignored in favour of the experiment's.
    Gaussian(GaussianMixtureConfig),
    Csv(CsvDataConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSettings {
    pub nx: usize,
    pub ny: usize,
    /// Defaults to `[mu_x - 1.5, mu_x + 0.5]` around the moving class mean.
    pub x_range: Option<[f64; 2]>,
    /// Defaults to `[mu_y - 1, mu_y + 1]`.
    pub y_range: Option<[f64; 2]>,
    /// Class whose mean moves to each cell; the last class by default.
    pub drifted_class: Option<u32>,
    pub replicates: usize,
    /// Monte Carlo draws behind each error-rate estimate.
    pub error_samples: usize,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings {
            nx: 9,
            ny: 9,
            x_range: None,
            y_range: None,
            drifted_class: None,
            replicates: DEFAULT_GRID_REPLICATES,
            error_samples: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub format_version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Replicates per method and scenario; 5000 for ARL0 and 1000 for delay
    /// runs when absent.
    #[serde(default)]
    pub replicates: Option<usize>,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    #[serde(default = "default_tau")]
    pub tau: u64,
    #[serde(default = "default_post_length")]
    pub post_length: u64,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub detector: DetectorSettings,
    pub data: DataSource,
    #[serde(default)]
    pub grid: Option<GridSettings>,
}

fn default_version() -> u32 {
    EXPERIMENT_FORMAT_VERSION
}
fn default_horizon() -> u64 {
    DEFAULT_HORIZON
}
fn default_tau() -> u64 {
    DEFAULT_TAU
}
fn default_post_length() -> u64 {
    DEFAULT_POST_LENGTH
}
fn default_train_per_class() -> usize {
    DEFAULT_TRAIN_PER_CLASS
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

impl ExperimentConfig {
    /// Synthetic Gaussian experiment with default protocol settings.
    pub fn gaussian(mixture: GaussianMixtureConfig, seed: u64) -> Self {
        ExperimentConfig {
            format_version: EXPERIMENT_FORMAT_VERSION,
            seed,
            replicates: None,
            horizon: DEFAULT_HORIZON,
            tau: DEFAULT_TAU,
            post_length: DEFAULT_POST_LENGTH,
            train_per_class: DEFAULT_TRAIN_PER_CLASS,
            methods: default_methods(),
            detector: DetectorSettings::default(),
            data: DataSource::Gaussian(mixture),
            grid: None,
        }
    }

    /// Parses a TOML config; relative paths resolve against `base_dir`.
    pub fn from_text(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("experiment config: {e}")))?;
        if cfg.format_version != EXPERIMENT_FORMAT_VERSION {
            return Err(Error::config(format!(
                "format_version {} is not supported (expected {EXPERIMENT_FORMAT_VERSION})",
                cfg.format_version
            )));
        }
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        if let DataSource::Csv(c) = &mut cfg.data {
            resolve(&mut c.pre);
            if let Some(p) = &mut c.post {
                resolve(p);
            }
        }
        cfg.detector.thresholds.values_mut().for_each(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if self.methods.is_empty() {
            return Err(Error::config("methods must list at least one method"));
        }
        if self.tau == 0 {
            return Err(Error::config("tau must be positive"));
        }
        if self.train_per_class < self.detector.bins {
            return Err(Error::config(format!(
                "train_per_class ({}) must be at least detector.bins ({})",
                self.train_per_class, self.detector.bins
            )));
        }
        if self.replicates == Some(0) {
            return Err(Error::config("replicates must be positive"));
        }
        if let DataSource::Gaussian(g) = &self.data {
            if g.classes() == 0 {
                return Err(Error::config("data.means must list at least one class"));
            }
        }
        Ok(())
    }

    /// Short SHA-256 digest of the canonical config, embedded in reports.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn calibration_seed(&self) -> u64 {
        self.detector
            .calibration_seed
            .unwrap_or_else(|| derive_seed(self.seed, u64::MAX))
    }
}

// ---------------------------------------------------------------------------
// Monitors

/// Builds monitors for every method, calibrating and caching threshold
/// tables and ECDD limits on first use.
pub struct MethodContext {
    settings: DetectorSettings,
    calibration_seed: u64,
    loaded: BTreeMap<Method, Arc<ThresholdTable>>,
    tables: Mutex<HashMap<(usize, usize, u64), Arc<ThresholdTable>>>,
    limits: Mutex<HashMap<(u64, u64), f64>>,
}

impl MethodContext {
    pub fn new(settings: DetectorSettings, calibration_seed: u64) -> Result<Self> {
        settings.validate()?;
        let mut loaded = BTreeMap::new();
        for (name, path) in &settings.thresholds {
            let method = Method::parse(name).expect("validated");
            let table = ThresholdTable::load(path)?;
            table
                .check_compatible(table.bins, settings.lambda)
                .map_err(|e| Error::config(format!("detector.thresholds.{name}: {e}")))?;
            loaded.insert(method, Arc::new(table));
        }
        Ok(MethodContext {
            settings,
            calibration_seed,
            loaded,
            tables: Mutex::new(HashMap::new()),
            limits: Mutex::new(HashMap::new()),
        })
    }

    pub fn for_config(cfg: &ExperimentConfig) -> Result<Self> {
        Self::new(cfg.detector.clone(), cfg.calibration_seed())
    }

    pub fn settings(&self) -> &DetectorSettings {
        &self.settings
    }

    /// Bins and training size of the QT-EWMA detectors of `method` for
    /// `classes` classes with `train_per_class` points each.
    pub fn detector_shape(&self, method: Method, classes: u32, train_per_class: usize) -> (usize, usize) {
        match method {
            Method::Qtewma => (
                self.settings.bins * classes as usize,
                train_per_class * classes as usize,
            ),
            _ => (self.settings.bins, train_per_class),
        }
    }

    /// Threshold table for `method` with the given detector shape.
    pub fn table(&self, method: Method, bins: usize, train_size: usize) -> Result<Arc<ThresholdTable>> {
        if let Some(t) = self.loaded.get(&method) {
            if t.bins != bins {
                return Err(Error::config(format!(
                    "detector.thresholds.{method}: table has K={}, detector uses K={bins}",
                    t.bins
                )));
            }
            if t.train_size != train_size {
                return Err(Error::config(format!(
                    "detector.thresholds.{method}: table calibrated for N={}, detector uses N={train_size}",
                    t.train_size
                )));
            }
            return Ok(Arc::clone(t));
        }
        let arl0 = self.settings.arl0_for(method);
        let key = (train_size, bins, arl0.to_bits());
        let mut tables = self.tables.lock().expect("table cache poisoned");
        if let Some(t) = tables.get(&key) {
            return Ok(Arc::clone(t));
        }
        let s = &self.settings;
        let cfg = CalibrationConfig {
            train_size,
            bins,
            lambda: s.lambda,
            arl0,
            t_max: s.t_max,
            replicates: s.calibration_replicates,
            seed: derive_seed(derive_seed(self.calibration_seed, train_size as u64), bins as u64),
            survivor_floor: s.survivor_floor,
        };
        let table = Arc::new(calibrate_thresholds(&cfg)?);
        tables.insert(key, Arc::clone(&table));
        Ok(table)
    }

    /// ECDD control limit for error rate `p0`, shared by all `p0` in the
    /// same bucket of width [`ECDD_P0_BUCKET`]. Returns the bucket centre
    /// (used as the chart's initial error rate) and the limit.
    pub fn ecdd_limit(&self, p0: f64) -> Result<(f64, f64)> {
        let max_bucket = (1.0 / ECDD_P0_BUCKET).round() as u64 - 1;
        let bucket = ((p0 / ECDD_P0_BUCKET).round() as u64).clamp(1, max_bucket);
        let p = bucket as f64 * ECDD_P0_BUCKET;
        let arl0 = self.settings.arl0_for(Method::Ecdd);
        let key = (bucket, arl0.to_bits());
        let mut limits = self.limits.lock().expect("limit cache poisoned");
        if let Some(&l) = limits.get(&key) {
            return Ok((p, l));
        }
        let l = calibrate_ecdd_limit(
            p,
            self.settings.ecdd_r,
            arl0,
            self.settings.ecdd_calibration_replicates,
            derive_seed(self.calibration_seed, bucket),
        )?;
        limits.insert(key, l);
        Ok((p, l))
    }

    /// Fits `method` on `training` for a stream with `classes` classes.
    pub fn build(
        &self,
        method: Method,
        training: &[Sample],
        classes: u32,
        seed: u64,
    ) -> Result<Box<dyn DriftMonitor>> {
        let s = &self.settings;
        let per_class = training.len() / classes.max(1) as usize;
        let (bins, train_size) = self.detector_shape(method, classes, per_class);
        let cfg = CdmConfig {
            bins,
            lambda: s.lambda,
            seed,
            label_policy: s.label_policy,
            classes: Some(classes),
        };
        Ok(match method {
            Method::Cdm => {
                let table = self.table(method, bins, train_size)?;
                Box::new(CdmMonitor::fit(training, table, &cfg)?)
            }
            Method::Qtewma => {
                let table = self.table(method, bins, training.len())?;
                Box::new(CdmMonitor::fit_pooled(training, table, &cfg)?)
            }
            Method::Ecdd => {
                let p0 = cross_validated_error(s.classifier, training, CV_FOLDS, seed)?;
                let (p0, limit) = self.ecdd_limit(p0)?;
                let classifier = Arc::new(Classifier::fit(s.classifier, training)?);
                Box::new(EcddMonitor::new(classifier, EcddState::new(p0, s.ecdd_r, limit)?))
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Data

pub type SampleIter = Box<dyn Iterator<Item = Sample> + Send>;

/// Per-replicate training sets and streams.
pub trait StreamSource: Send + Sync {
    fn classes(&self) -> u32;

    /// Training set of replicate `rs`.
    fn training(&self, rs: u64) -> Result<Vec<Sample>>;

    /// Stream of replicate `rs` with `length` samples; the change happens
    /// after `tau` samples, or never when `tau` is `None`.
    fn stream(&self, rs: u64, length: u64, tau: Option<u64>) -> Result<SampleIter>;
}

/// Gaussian classes; training draws `train_per_class` points per class from
/// the pre-change mixture.
pub struct GaussianSource {
    scenario: Arc<GaussianScenario>,
    train_per_class: usize,
}

impl GaussianSource {
    pub fn new(mixture: &GaussianMixtureConfig, train_per_class: usize) -> Result<Self> {
        Ok(GaussianSource {
            scenario: Arc::new(mixture.build()?),
            train_per_class,
        })
    }

    pub fn scenario(&self) -> &GaussianScenario {
        &self.scenario
    }
}

impl StreamSource for GaussianSource {
    fn classes(&self) -> u32 {
        self.scenario.pre.classes() as u32
    }

    fn training(&self, rs: u64) -> Result<Vec<Sample>> {
        let mut rng = rng_from_seed(derive_seed(rs, 0));
        Ok(self.scenario.pre.sample_per_class(self.train_per_class, &mut rng))
    }

    fn stream(&self, rs: u64, length: u64, tau: Option<u64>) -> Result<SampleIter> {
        let scenario = Arc::new(GaussianScenario {
            pre: self.scenario.pre.clone(),
            post: self.scenario.post.clone(),
            tau: tau.unwrap_or(length) as usize,
        });
        Ok(Box::new(scenario.stream(length as usize, derive_seed(rs, 2))))
    }
}

/// Resamples labeled CSV rows. Each replicate holds out `train_per_class`
/// rows per class for training; stream labels follow the pre-change class
/// frequencies and points are drawn with replacement from the remaining
/// rows, switching to post-change rows for the drifted classes after `tau`.
pub struct CsvSource {
    pre: Arc<Vec<Sample>>,
    post: Option<Arc<Vec<Sample>>>,
    /// Row indices per class, class `m` at position `m - 1`.
    pre_index: Arc<Vec<Vec<usize>>>,
    post_index: Option<Arc<Vec<Vec<usize>>>>,
    drifted: Vec<u32>,
    train_per_class: usize,
}

fn class_index(rows: &[Sample], classes: u32) -> Vec<Vec<usize>> {
    let mut index = vec![Vec::new(); classes as usize];
    for (i, s) in rows.iter().enumerate() {
        if let Some(l) = s.label {
            index[l as usize - 1].push(i);
        }
    }
    index
}

impl CsvSource {
    pub fn load(cfg: &CsvDataConfig, train_per_class: usize, policy: LabelPolicy) -> Result<Self> {
        let mut schema = CsvSchema {
            label_column: cfg.label_column.map_or(LabelColumn::Last, LabelColumn::Index),
            has_header: cfg.has_header,
            lenient_labels: policy == LabelPolicy::Lenient,
            ..CsvSchema::default()
        };
        schema.label_map = LabelMap::infer(&cfg.pre, &schema)?;
        let classes = schema
            .label_map
            .classes()
            .ok_or_else(|| Error::input(format!("{}: no labeled rows", cfg.pre.display())))?;
        if let LabelMap::Numeric { classes: c } = &mut schema.label_map {
            *c = Some(classes);
        }
        let pre = read_csv_stream(&cfg.pre, &schema)?.samples;
        let post = cfg
            .post
            .as_ref()
            .map(|p| read_csv_stream(p, &schema).map(|s| s.samples))
            .transpose()?;
        let pre_index = class_index(&pre, classes);
        for (m, rows) in pre_index.iter().enumerate() {
            if rows.len() <= train_per_class {
                return Err(Error::input(format!(
                    "{}: class {} has {} rows, more than train_per_class={train_per_class} needed",
                    cfg.pre.display(),
                    m + 1,
                    rows.len()
                )));
            }
        }
        let post_index = post.as_ref().map(|p| class_index(p, classes));
        Ok(CsvSource {
            pre: Arc::new(pre),
            post: post.map(Arc::new),
            pre_index: Arc::new(pre_index),
            post_index: post_index.map(Arc::new),
            drifted: (1..=classes).collect(),
            train_per_class,
        })
    }

    /// Copy of this source where only `classes` drift.
    pub fn with_drifted(&self, classes: &[u32]) -> Result<Self> {
        let post_index = self
            .post_index
            .as_ref()
            .ok_or_else(|| Error::config("data.post is required for drift scenarios"))?;
        for &c in classes {
            if c == 0 || c as usize > post_index.len() || post_index[c as usize - 1].is_empty() {
                return Err(Error::config(format!(
                    "data.drift_subsets: class {c} has no post-change rows"
                )));
            }
        }
        Ok(CsvSource {
            pre: Arc::clone(&self.pre),
            post: self.post.clone(),
            pre_index: Arc::clone(&self.pre_index),
            post_index: self.post_index.clone(),
            drifted: classes.to_vec(),
            train_per_class: self.train_per_class,
        })
    }

    pub fn rows(&self) -> &[Sample] {
        &self.pre
    }

    /// Row indices per class: `(training, remainder)`.
    fn split(&self, rs: u64) -> (Vec<usize>, Vec<Vec<usize>>) {
        let mut rng = rng_from_seed(derive_seed(rs, 0));
        let mut train = Vec::new();
        let mut rest = Vec::with_capacity(self.pre_index.len());
        for rows in self.pre_index.iter() {
            let mut rows = rows.clone();
            rows.partial_shuffle(&mut rng, self.train_per_class);
            let (picked, remaining) = rows.split_at(self.train_per_class);
            train.extend_from_slice(picked);
            let mut remaining = remaining.to_vec();
            remaining.sort_unstable();
            rest.push(remaining);
        }
        train.sort_unstable();
        (train, rest)
    }
}

impl StreamSource for CsvSource {
    fn classes(&self) -> u32 {
        self.pre_index.len() as u32
    }

    fn training(&self, rs: u64) -> Result<Vec<Sample>> {
        let (train, _) = self.split(rs);
        Ok(train.into_iter().map(|i| self.pre[i].clone()).collect())
    }

    fn stream(&self, rs: u64, length: u64, tau: Option<u64>) -> Result<SampleIter> {
        let (_, rest) = self.split(rs);
        let total: usize = rest.iter().map(Vec::len).sum();
        let cum: Vec<f64> = rest
            .iter()
            .scan(0usize, |acc, r| {
                *acc += r.len();
                Some(*acc as f64 / total as f64)
            })
            .collect();
        let mut drifted = vec![false; rest.len()];
        for &c in &self.drifted {
            drifted[c as usize - 1] = true;
        }
        let pre = Arc::clone(&self.pre);
        let post = self.post.clone();
        let post_index = self.post_index.clone();
        if tau.is_some() && post.is_none() {
            return Err(Error::config("data.post is required for drift streams"));
        }
        let mut rng = rng_from_seed(derive_seed(rs, 2));
        Ok(Box::new((1..=length).map(move |t| {
            let u: f64 = rng.random();
            let m = cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1);
            let after = tau.is_some_and(|tau| t > tau);
            if after && drifted[m] {
                let rows = &post_index.as_ref().expect("checked")[m];
                post.as_ref().expect("checked")[rows[rng.random_range(0..rows.len())]].clone()
            } else {
                pre[rest[m][rng.random_range(0..rest[m].len())]].clone()
            }
        })))
    }
}

/// A named drift scenario over one data source.
pub struct Scenario {
    pub name: String,
    pub source: Arc<dyn StreamSource>,
}

/// Drift scenarios described by `cfg.data`.
pub fn scenarios(cfg: &ExperimentConfig) -> Result<Vec<Scenario>> {
    match &cfg.data {
        DataSource::Gaussian(g) => Ok(vec![Scenario {
            name: "gaussian".into(),
            source: Arc::new(GaussianSource::new(g, cfg.train_per_class)?),
        }]),
        DataSource::Csv(c) => {
            let base = CsvSource::load(c, cfg.train_per_class, cfg.detector.label_policy)?;
            let subsets = if c.drift_subsets.is_empty() {
                vec![(1..=base.classes()).collect::<Vec<_>>()]
            } else {
                c.drift_subsets.clone()
            };
            subsets
                .iter()
                .map(|subset| {
                    let name = subset.iter().map(u32::to_string).collect::<Vec<_>>().join("+");
                    Ok(Scenario {
                        name: format!("classes {name}"),
                        source: Arc::new(base.with_drifted(subset)?),
                    })
                })
                .collect()
        }
    }
}

/// Stationary source for ARL0 runs.
pub fn stationary_source(cfg: &ExperimentConfig) -> Result<Arc<dyn StreamSource>> {
    Ok(match &cfg.data {
        DataSource::Gaussian(g) => Arc::new(GaussianSource::new(g, cfg.train_per_class)?),
        DataSource::Csv(c) => Arc::new(CsvSource::load(c, cfg.train_per_class, cfg.detector.label_policy)?),
    })
}

// ---------------------------------------------------------------------------
// Runs

/// Empirical ARL0 of every configured method on stationary streams.
pub fn run_arl0(cfg: &ExperimentConfig) -> Result<Vec<ExperimentReport>> {
    let ctx = MethodContext::for_config(cfg)?;
    let source = stationary_source(cfg)?;
    run_arl0_with(cfg, &ctx, source.as_ref())
}

pub fn run_arl0_with(cfg: &ExperimentConfig, ctx: &MethodContext, source: &dyn StreamSource) -> Result<Vec<ExperimentReport>> {
    let replicates = cfg.replicates.unwrap_or(DEFAULT_ARL0_REPLICATES);
    let hash = cfg.hash();
    let classes = source.classes();
    cfg.methods
        .iter()
        .map(|&method| {
            let target = ctx.settings().arl0_for(method);
            if (cfg.horizon as f64) < 10.0 * target {
                return Err(Error::config(format!(
                    "horizon {} is shorter than 10 x target ARL0 {target} of {method}",
                    cfg.horizon
                )));
            }
            prepare(ctx, method, classes, cfg.train_per_class)?;
            let report = estimate_arl0(
                |rs| ctx.build(method, &source.training(rs)?, classes, derive_seed(rs, 1)),
                |rs| source.stream(rs, cfg.horizon, None),
                replicates,
                cfg.horizon,
                cfg.seed,
            )?;
            Ok(report.labeled(method.name(), "stationary", &hash))
        })
        .collect()
}

/// Mean detection delay of every configured method in every scenario.
pub fn run_delay(cfg: &ExperimentConfig) -> Result<Vec<ExperimentReport>> {
    let ctx = MethodContext::for_config(cfg)?;
    let mut out = Vec::new();
    for scenario in scenarios(cfg)? {
        out.extend(run_delay_with(cfg, &ctx, &scenario)?);
    }
    Ok(out)
}

pub fn run_delay_with(cfg: &ExperimentConfig, ctx: &MethodContext, scenario: &Scenario) -> Result<Vec<ExperimentReport>> {
    let replicates = cfg.replicates.unwrap_or(DEFAULT_DELAY_REPLICATES);
    let hash = cfg.hash();
    let source = &scenario.source;
    let classes = source.classes();
    let length = cfg.tau + cfg.post_length;
    cfg.methods
        .iter()
        .map(|&method| {
            prepare(ctx, method, classes, cfg.train_per_class)?;
            let report = estimate_delay(
                |rs| ctx.build(method, &source.training(rs)?, classes, derive_seed(rs, 1)),
                |rs| source.stream(rs, length, Some(cfg.tau)),
                cfg.tau,
                replicates,
                cfg.seed,
            )?;
            Ok(report.labeled(method.name(), &scenario.name, &hash))
        })
        .collect()
}

/// Calibrates the method's table up front instead of inside the replicate loop.
fn prepare(ctx: &MethodContext, method: Method, classes: u32, train_per_class: usize) -> Result<()> {
    if method != Method::Ecdd {
        let (bins, n) = ctx.detector_shape(method, classes, train_per_class);
        ctx.table(method, bins, n)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodRank {
    pub method: String,
    pub average_rank: f64,
    pub scenarios: usize,
}

/// Average rank of each method over the scenarios of delay `reports`.
pub fn rank_methods(reports: &[ExperimentReport]) -> Result<Vec<MethodRank>> {
    let mut methods: Vec<&str> = Vec::new();
    let mut scenarios: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !scenarios.contains(&r.scenario.as_str()) {
            scenarios.push(&r.scenario);
        }
    }
    let table: Vec<Vec<f64>> = methods
        .iter()
        .map(|m| {
            scenarios
                .iter()
                .map(|s| {
                    reports
                        .iter()
                        .find(|r| r.method == *m && r.scenario == *s)
                        .and_then(|r| r.estimate)
                        .unwrap_or(f64::NAN)
                })
                .collect()
        })
        .collect();
    let ranks = average_ranks(&table)?;
    Ok(methods
        .into_iter()
        .zip(ranks)
        .map(|(m, average_rank)| MethodRank {
            method: m.to_string(),
            average_rank,
            scenarios: scenarios.len(),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Grid

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCell {
    pub mu_x: f64,
    pub mu_y: f64,
    pub method: String,
    pub mean_delay: Option<f64>,
    pub std_err: Option<f64>,
    pub used: usize,
    pub false_alarms: usize,
    pub censored: usize,
    /// Symmetrized KL divergence between the moving class before and after.
    pub skl: f64,
    /// Euclidean length of the mean shift.
    pub shift: f64,
    pub p0: f64,
    pub p1: f64,
    pub p1_minus_p0: f64,
    pub failed: Option<String>,
}

/// Grid of post-change means for the moving class, row-major in `y`.
pub fn grid_points(cfg: &ExperimentConfig) -> Result<Vec<[f64; 2]>> {
    let (g, grid, class) = grid_parts(cfg)?;
    let mu = &g.means[class as usize - 1];
    let xr = grid.x_range.unwrap_or([mu[0] - 1.5, mu[0] + 0.5]);
    let yr = grid.y_range.unwrap_or([mu[1] - 1.0, mu[1] + 1.0]);
    let axis = |r: [f64; 2], n: usize| -> Vec<f64> {
        if n == 1 {
            return vec![r[0]];
        }
        (0..n).map(|i| r[0] + (r[1] - r[0]) * i as f64 / (n - 1) as f64).collect()
    };
    let xs = axis(xr, grid.nx);
    let ys = axis(yr, grid.ny);
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| [x, y])).collect())
}

fn grid_parts(cfg: &ExperimentConfig) -> Result<(&GaussianMixtureConfig, GridSettings, u32)> {
    let DataSource::Gaussian(g) = &cfg.data else {
        return Err(Error::config("grid experiments need data.source = \"gaussian\""));
    };
    let grid = cfg.grid.clone().unwrap_or_default();
    if grid.nx == 0 || grid.ny == 0 {
        return Err(Error::config("grid.nx and grid.ny must be positive"));
    }
    if g.dim() < 2 {
        return Err(Error::config("grid experiments need at least 2 dimensions"));
    }
    let class = grid.drifted_class.unwrap_or(g.classes() as u32);
    if class == 0 || class as usize > g.classes() {
        return Err(Error::config(format!("grid.drifted_class {class} is not a class")));
    }
    Ok((g, grid, class))
}

/// Mean delays of every method with the moving class's mean at every grid
/// cell, plus the cell's sKL and classifier error change.
pub fn run_grid_experiment(cfg: &ExperimentConfig) -> Result<Vec<GridCell>> {
    let cells = grid_points(cfg)?;
    run_grid_cells(cfg, &cells)
}

/// Like [`run_grid_experiment`] on an explicit list of cells. A failing cell
/// is reported with `failed` set and the run continues.
pub fn run_grid_cells(cfg: &ExperimentConfig, cells: &[[f64; 2]]) -> Result<Vec<GridCell>> {
    let (g, grid, class) = grid_parts(cfg)?;
    let ctx = MethodContext::for_config(cfg)?;
    let d = g.dim();
    let cov = |rows: Option<&Vec<Vec<Vec<f64>>>>| -> DMatrix<f64> {
        rows.map(|c| {
            let r = &c[class as usize - 1];
            DMatrix::from_fn(d, d, |i, j| r[i][j])
        })
        .unwrap_or_else(|| DMatrix::identity(d, d))
    };
    let cov0 = cov(g.covariances.as_ref());
    let cov1 = cov(g.post_covariances.as_ref().or(g.covariances.as_ref()));
    let mu0 = g.means[class as usize - 1].clone();

    let base = GaussianSource::new(g, cfg.train_per_class)?;
    let training = base.training(derive_seed(cfg.seed, u64::MAX - 1))?;
    let classifier = Classifier::fit(cfg.detector.classifier, &training)?;
    let error_seed = derive_seed(cfg.seed, u64::MAX - 2);
    let p0 = estimate_error_rate(&classifier, &base.scenario().pre, grid.error_samples, error_seed);

    let sub = ExperimentConfig {
        replicates: Some(grid.replicates),
        ..cfg.clone()
    };
    let mut out = Vec::with_capacity(cells.len() * cfg.methods.len());
    for &[x, y] in cells {
        let mut mu1 = mu0.clone();
        mu1[0] = x;
        mu1[1] = y;
        let mut post_means = g.post_means.clone().unwrap_or_else(|| g.means.clone());
        post_means[class as usize - 1] = mu1.clone();
        let mixture = GaussianMixtureConfig {
            post_means: Some(post_means),
            ..g.clone()
        };
        let shift = mu0.iter().zip(&mu1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let cell = |method: Method| GridCell {
            mu_x: x,
            mu_y: y,
            method: method.name().into(),
            mean_delay: None,
            std_err: None,
            used: 0,
            false_alarms: 0,
            censored: 0,
            skl: f64::NAN,
            shift,
            p0,
            p1: f64::NAN,
            p1_minus_p0: f64::NAN,
            failed: None,
        };
        let result = (|| -> Result<(f64, f64, Vec<ExperimentReport>)> {
            let skl = skl_gaussian(&mu0, &cov0, &mu1, &cov1)?;
            let source = GaussianSource::new(&mixture, cfg.train_per_class)?;
            let p1 = estimate_error_rate(&classifier, &source.scenario().post, grid.error_samples, error_seed);
            let scenario = Scenario {
                name: format!("({x}, {y})"),
                source: Arc::new(source),
            };
            Ok((skl, p1, run_delay_with(&sub, &ctx, &scenario)?))
        })();
        match result {
            Ok((skl, p1, reports)) => {
                for (method, r) in cfg.methods.iter().zip(reports) {
                    out.push(GridCell {
                        mean_delay: r.estimate,
                        std_err: r.std_err,
                        used: r.used,
                        false_alarms: r.false_alarms,
                        censored: r.censored,
                        skl,
                        p1,
                        p1_minus_p0: p1 - p0,
                        ..cell(*method)
                    });
                }
            }
            Err(e) => {
                for &method in &cfg.methods {
                    out.push(GridCell {
                        failed: Some(e.to_string()),
                        ..cell(method)
                    });
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Output

#[derive(Serialize)]
struct ReportRow<'a> {
    method: &'a str,
    scenario: &'a str,
    kind: &'a str,
    replicates: usize,
    estimate: Option<f64>,
    std_err: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    used: usize,
    false_alarms: usize,
    censored: usize,
    degenerate: bool,
    seed: u64,
    config_hash: &'a str,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

/// One row per report.
pub fn write_reports(reports: &[ExperimentReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    for r in reports {
        let ci = r.ci95();
        w.serialize(ReportRow {
            method: &r.method,
            scenario: &r.scenario,
            kind: match r.kind {
                crate::bench::ReportKind::Arl0 => "arl0",
                crate::bench::ReportKind::Delay => "delay",
            },
            replicates: r.replicates,
            estimate: r.estimate,
            std_err: r.std_err,
            ci_low: ci.map(|c| c.0),
            ci_high: ci.map(|c| c.1),
            used: r.used,
            false_alarms: r.false_alarms,
            censored: r.censored,
            degenerate: r.degenerate,
            seed: r.seed,
            config_hash: &r.config_hash,
        })
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_grid(cells: &[GridCell], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    for c in cells {
        w.serialize(c).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_ranks(ranks: &[MethodRank], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    for r in ranks {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
