//! Labeled datastreams: synthetic Gaussian class mixtures with a change
//! point, CSV ingestion and the resampling helpers used by experiments.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, StreamRng};

/// One observation. Labels are class indices starting at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: Option<u32>,
}

impl Sample {
    pub fn labeled(x: Vec<f64>, label: u32) -> Self {
        Sample { x, label: Some(label) }
    }

    pub fn unlabeled(x: Vec<f64>) -> Self {
        Sample { x, label: None }
    }
}

impl AsRef<[f64]> for Sample {
    fn as_ref(&self) -> &[f64] {
        &self.x
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamMeta {
    pub source: String,
    /// Number of pre-change samples, when known.
    pub tau: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledStream {
    pub samples: Vec<Sample>,
    pub meta: StreamMeta,
}

impl LabeledStream {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.x.len())
    }

    pub fn labels(&self) -> BTreeSet<u32> {
        self.samples.iter().filter_map(|s| s.label).collect()
    }
}

// ---------------------------------------------------------------------------
// Gaussian mixtures

/// Serializable description of a class-wise Gaussian mixture before and
/// after a change point. Covariances default to the identity, priors to
/// uniform, post-change parameters to the pre-change ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureConfig {
    pub means: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariances: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_means: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_covariances: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub tau: usize,
}

pub const DEFAULT_DELTA: f64 = 2.0;

impl GaussianMixtureConfig {
    /// Two unit-covariance classes at `[0, 0]` and `[delta, 0]`; after `tau`
    /// the second class moves to `post_mean_2`.
    pub fn two_class(delta: f64, post_mean_2: [f64; 2], tau: usize) -> Self {
        GaussianMixtureConfig {
            means: vec![vec![0.0, 0.0], vec![delta, 0.0]],
            covariances: None,
            priors: None,
            post_means: Some(vec![vec![0.0, 0.0], post_mean_2.to_vec()]),
            post_covariances: None,
            tau,
        }
    }

    /// Same mixture before and after; no change.
    pub fn stationary(means: Vec<Vec<f64>>, priors: Option<Vec<f64>>) -> Self {
        GaussianMixtureConfig {
            means,
            covariances: None,
            priors,
            post_means: None,
            post_covariances: None,
            tau: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn build(&self) -> Result<GaussianScenario> {
        let pre = GaussianMixture::new(&self.means, self.covariances.as_deref(), self.priors.as_deref())?;
        let post = GaussianMixture::new(
            self.post_means.as_deref().unwrap_or(&self.means),
            self.post_covariances
                .as_deref()
                .or(self.covariances.as_deref()),
            self.priors.as_deref(),
        )?;
        if post.classes() != pre.classes() || post.dim() != pre.dim() {
            return Err(Error::config(
                "post-change mixture must have the same classes and dimension as the pre-change one",
            ));
        }
        Ok(GaussianScenario {
            pre,
            post,
            tau: self.tau,
        })
    }
}

#[derive(Debug, Clone)]
struct Gaussian {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

/// Mixture with one Gaussian per class.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    components: Vec<Gaussian>,
    priors: Vec<f64>,
    cum_priors: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(
        means: &[Vec<f64>],
        covariances: Option<&[Vec<Vec<f64>>]>,
        priors: Option<&[f64]>,
    ) -> Result<Self> {
        let m = means.len();
        if m == 0 {
            return Err(Error::config("mixture needs at least one class"));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|mu| mu.len() != d) {
            return Err(Error::config("class means must share a positive dimension"));
        }
        if let Some(c) = covariances {
            if c.len() != m {
                return Err(Error::config(format!("{} covariances for {m} classes", c.len())));
            }
        }
        let priors = match priors {
            Some(p) => {
                let sum: f64 = p.iter().sum();
                if p.len() != m || p.iter().any(|v| !(*v > 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::config("class priors must be positive and sum to 1"));
                }
                p.to_vec()
            }
            None => vec![1.0 / m as f64; m],
        };
        let mut components = Vec::with_capacity(m);
        for (i, mu) in means.iter().enumerate() {
            let cov = match covariances {
                Some(c) => matrix_from_rows(&c[i], d)
                    .ok_or_else(|| Error::config(format!("covariance of class {} is not {d}x{d}", i + 1)))?,
                None => DMatrix::identity(d, d),
            };
            let chol = cholesky(&cov).map_err(|_| {
                Error::config(format!(
                    "covariance of class {} is not symmetric positive definite",
                    i + 1
                ))
            })?;
            components.push(Gaussian {
                mean: DVector::from_column_slice(mu),
                chol,
            });
        }
        let cum_priors = priors
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        Ok(GaussianMixture {
            components,
            priors,
            cum_priors,
        })
    }

    pub fn classes(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    /// Draws a point of class `label` (1-based).
    pub fn sample_class(&self, label: u32, rng: &mut StreamRng) -> Vec<f64> {
        let g = &self.components[label as usize - 1];
        let z = DVector::from_fn(g.mean.len(), |_, _| StandardNormal.sample(rng));
        (&g.mean + &g.chol * z).as_slice().to_vec()
    }

    pub fn draw_label(&self, rng: &mut StreamRng) -> u32 {
        let u: f64 = rng.random();
        let idx = self
            .cum_priors
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.priors.len() - 1);
        idx as u32 + 1
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Sample {
        let label = self.draw_label(rng);
        Sample::labeled(self.sample_class(label, rng), label)
    }

    /// `count` points from every class, in class order.
    pub fn sample_per_class(&self, count: usize, rng: &mut StreamRng) -> Vec<Sample> {
        (1..=self.classes() as u32)
            .flat_map(|m| (0..count).map(move |_| m))
            .map(|m| Sample::labeled(self.sample_class(m, rng), m))
            .collect()
    }
}

/// Pre- and post-change mixtures with a change point.
#[derive(Debug, Clone)]
pub struct GaussianScenario {
    pub pre: GaussianMixture,
    pub post: GaussianMixture,
    pub tau: usize,
}

impl GaussianScenario {
    /// Lazy stream of `length` samples: the first `tau` come from the
    /// pre-change mixture, the rest from the post-change one.
    pub fn stream(self: &Arc<Self>, length: usize, seed: u64) -> GaussianStream {
        GaussianStream {
            scenario: Arc::clone(self),
            t: 0,
            length,
            rng: rng_from_seed(seed),
        }
    }
}

pub struct GaussianStream {
    scenario: Arc<GaussianScenario>,
    t: usize,
    length: usize,
    rng: StreamRng,
}

impl Iterator for GaussianStream {
    type Item = Sample;

    fn next(&mut self) -> Option<Sample> {
        if self.t >= self.length {
            return None;
        }
        self.t += 1;
        let mixture = if self.t <= self.scenario.tau {
            &self.scenario.pre
        } else {
            &self.scenario.post
        };
        Some(mixture.sample(&mut self.rng))
    }
}

pub fn generate_stream(config: &GaussianMixtureConfig, length: usize, seed: u64) -> Result<LabeledStream> {
    if length == 0 {
        return Err(Error::config("stream length must be at least 1"));
    }
    if config.tau > length {
        return Err(Error::config(format!(
            "change point {} is past the stream length {length}",
            config.tau
        )));
    }
    let scenario = Arc::new(config.build()?);
    Ok(LabeledStream {
        samples: scenario.stream(length, seed).collect(),
        meta: StreamMeta {
            source: "gaussian".into(),
            tau: Some(config.tau),
            seed: Some(seed),
        },
    })
}

fn matrix_from_rows(rows: &[Vec<f64>], d: usize) -> Option<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return None;
    }
    Some(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn cholesky(cov: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, ()> {
    let sym = (cov - cov.transpose()).abs().max() <= 1e-12 * cov.abs().max().max(1.0);
    if !sym {
        return Err(());
    }
    cov.clone().cholesky().map(|c| c.l()).ok_or(())
}

/// Symmetrized Kullback-Leibler divergence `(KL(P||Q) + KL(Q||P)) / 2`
/// between two Gaussians.
pub fn skl_gaussian(
    mean0: &[f64],
    cov0: &DMatrix<f64>,
    mean1: &[f64],
    cov1: &DMatrix<f64>,
) -> Result<f64> {
    let d = mean0.len();
    if mean1.len() != d || cov0.shape() != (d, d) || cov1.shape() != (d, d) {
        return Err(Error::input("means and covariances must share one dimension"));
    }
    let kl = |ma: &[f64], ca: &DMatrix<f64>, mb: &[f64], cb: &DMatrix<f64>| -> Result<f64> {
        let chol_a = ca
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
        let chol_b = cb
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("covariance is not positive definite".into()))?;
        let diff = DVector::from_iterator(d, mb.iter().zip(ma).map(|(b, a)| b - a));
        let trace = chol_b.solve(ca).trace();
        let maha = diff.dot(&chol_b.solve(&diff));
        let logdet = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
            2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
        };
        Ok(0.5 * (trace + maha - d as f64 + logdet(&chol_b) - logdet(&chol_a)))
    };
    Ok(0.5 * (kl(mean0, cov0, mean1, cov1)? + kl(mean1, cov1, mean0, cov0)?))
}

// ---------------------------------------------------------------------------
// CSV

/// How label tokens map to class indices.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelMap {
    /// Tokens are the class indices themselves (`1..=classes`).
    Numeric { classes: Option<u32> },
    /// Named tokens.
    Named(BTreeMap<String, u32>),
}

impl LabelMap {
    pub fn lookup(&self, token: &str) -> Option<u32> {
        match self {
            LabelMap::Numeric { classes } => token
                .parse::<u32>()
                .ok()
                .filter(|&v| v >= 1 && classes.is_none_or(|m| v <= m)),
            LabelMap::Named(map) => map.get(token).copied(),
        }
    }

    pub fn classes(&self) -> Option<u32> {
        match self {
            LabelMap::Numeric { classes } => *classes,
            LabelMap::Named(map) => map.values().max().copied(),
        }
    }

    /// Scans a CSV file and builds a map from its label column: numeric when
    /// every token is a positive integer, otherwise sorted tokens numbered from 1.
    pub fn infer(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Self> {
        let path = path.as_ref();
        let mut probe = schema.clone();
        probe.label_map = LabelMap::Numeric { classes: None };
        probe.lenient_labels = true;
        let mut tokens = BTreeSet::new();
        let mut reader = CsvStreamReader::open(path, probe)?;
        while let Some(row) = reader.next_raw()? {
            if let Some(tok) = row.label_token {
                tokens.insert(tok);
            }
        }
        if tokens.iter().all(|t| t.parse::<u32>().is_ok_and(|v| v >= 1)) {
            let max = tokens.iter().filter_map(|t| t.parse::<u32>().ok()).max();
            return Ok(LabelMap::Numeric { classes: max });
        }
        Ok(LabelMap::Named(
            tokens.into_iter().zip(1..).collect(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelColumn {
    Last,
    Index(usize),
    Absent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub label_column: LabelColumn,
    /// Feature columns; `None` means every column except the label.
    pub feature_columns: Option<Vec<usize>>,
    pub label_map: LabelMap,
    /// Treat unknown label tokens as unlabeled instead of failing.
    pub lenient_labels: bool,
    /// `None` detects a header from a non-numeric first row.
    pub has_header: Option<bool>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: LabelColumn::Last,
            feature_columns: None,
            label_map: LabelMap::Numeric { classes: None },
            lenient_labels: false,
            has_header: None,
        }
    }
}

struct RawRow {
    x: Vec<f64>,
    label_token: Option<String>,
}

/// Row-at-a-time CSV reader; memory use does not grow with the stream.
pub struct CsvStreamReader {
    path: PathBuf,
    reader: csv::Reader<File>,
    schema: CsvSchema,
    record: csv::StringRecord,
    started: bool,
    unknown_labels: u64,
    dim: Option<usize>,
}

impl CsvStreamReader {
    pub fn open(path: impl AsRef<Path>, schema: CsvSchema) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(file);
        Ok(CsvStreamReader {
            path,
            reader,
            schema,
            record: csv::StringRecord::new(),
            started: false,
            unknown_labels: 0,
            dim: None,
        })
    }

    /// Labeled rows whose token was unknown and that were kept as unlabeled.
    pub fn unknown_labels(&self) -> u64 {
        self.unknown_labels
    }

    fn row_error(&self, record: &csv::StringRecord, message: impl Into<String>) -> Error {
        Error::CsvRow {
            path: self.path.clone(),
            row: record.position().map_or(0, |p| p.line()),
            message: message.into(),
        }
    }

    fn read_record(&mut self) -> Result<bool> {
        self.reader.read_record(&mut self.record).map_err(|e| {
            let row = e.position().map_or(0, |p| p.line());
            match e.kind() {
                csv::ErrorKind::Io(_) => Error::io(&self.path, std::io::Error::other(e.to_string())),
                _ => Error::CsvRow {
                    path: self.path.clone(),
                    row,
                    message: e.to_string(),
                },
            }
        })
    }

    fn split(&self, record: &csv::StringRecord) -> std::result::Result<(Vec<f64>, Option<String>), String> {
        let ncols = record.len();
        let label_idx = match self.schema.label_column {
            LabelColumn::Last => Some(ncols.checked_sub(1).ok_or("empty row")?),
            LabelColumn::Index(i) => Some(i),
            LabelColumn::Absent => None,
        };
        if let Some(i) = label_idx {
            if i >= ncols {
                return Err(format!("label column {i} missing (row has {ncols} fields)"));
            }
        }
        let features: Vec<usize> = match &self.schema.feature_columns {
            Some(cols) => cols.clone(),
            None => (0..ncols).filter(|&c| Some(c) != label_idx).collect(),
        };
        let mut x = Vec::with_capacity(features.len());
        for c in features {
            let field = record
                .get(c)
                .ok_or_else(|| format!("feature column {c} missing (row has {ncols} fields)"))?;
            let v: f64 = field
                .parse()
                .map_err(|_| format!("column {c}: {field:?} is not a number"))?;
            if !v.is_finite() {
                return Err(format!("column {c}: non-finite value {field:?}"));
            }
            x.push(v);
        }
        let token = label_idx
            .map(|i| record[i].to_string())
            .filter(|t| !t.is_empty());
        Ok((x, token))
    }

    fn next_raw(&mut self) -> Result<Option<RawRow>> {
        if !self.read_record()? {
            return Ok(None);
        }
        if !self.started {
            self.started = true;
            let header = match self.schema.has_header {
                Some(h) => h,
                None => self.split(&self.record).is_err(),
            };
            if header && !self.read_record()? {
                return Ok(None);
            }
        }
        let record = self.record.clone();
        self.finish_row(record).map(Some)
    }

    fn finish_row(&mut self, record: csv::StringRecord) -> Result<RawRow> {
        let (x, label_token) = self.split(&record).map_err(|m| self.row_error(&record, m))?;
        match self.dim {
            None => self.dim = Some(x.len()),
            Some(d) if d != x.len() => {
                return Err(self.row_error(&record, format!("{} features, expected {d}", x.len())))
            }
            _ => {}
        }
        self.record = record;
        Ok(RawRow { x, label_token })
    }

    pub fn next_sample(&mut self) -> Result<Option<Sample>> {
        let Some(row) = self.next_raw()? else {
            return Ok(None);
        };
        let label = match row.label_token {
            None => None,
            Some(tok) => match self.schema.label_map.lookup(&tok) {
                Some(l) => Some(l),
                None if self.schema.lenient_labels => {
                    self.unknown_labels += 1;
                    None
                }
                None => {
                    let rec = self.record.clone();
                    return Err(self.row_error(&rec, format!("unknown label {tok:?}")));
                }
            },
        };
        Ok(Some(Sample { x: row.x, label }))
    }
}

impl Iterator for CsvStreamReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_sample().transpose()
    }
}

pub fn read_csv_stream(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LabeledStream> {
    let path = path.as_ref();
    let samples = CsvStreamReader::open(path, schema.clone())?.collect::<Result<Vec<_>>>()?;
    Ok(LabeledStream {
        samples,
        meta: StreamMeta {
            source: path.display().to_string(),
            tau: None,
            seed: None,
        },
    })
}

/// Writes features followed by the label (empty when unlabeled), no header.
pub fn write_csv_stream<W: Write>(stream: &LabeledStream, out: W) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let mut fields: Vec<String> = Vec::new();
    for s in &stream.samples {
        fields.clear();
        fields.extend(s.x.iter().map(|v| v.to_string()));
        fields.push(s.label.map(|l| l.to_string()).unwrap_or_default());
        w.write_record(&fields).map_err(std::io::Error::other)?;
    }
    w.flush()
}

pub fn write_csv(stream: &LabeledStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_stream(stream, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Resampling

/// First `tau` samples of `pre` followed by all of `post`.
pub fn splice_streams(pre: &LabeledStream, post: &LabeledStream, tau: usize) -> Result<LabeledStream> {
    if tau > pre.len() {
        return Err(Error::input(format!(
            "pre-change stream has {} samples, {tau} requested",
            pre.len()
        )));
    }
    if let (Some(a), Some(b)) = (pre.dim(), post.dim()) {
        if a != b {
            return Err(Error::input(format!("dimension mismatch: {a} vs {b}")));
        }
    }
    let mut samples = pre.samples[..tau].to_vec();
    samples.extend(post.samples.iter().cloned());
    Ok(LabeledStream {
        samples,
        meta: StreamMeta {
            source: format!("splice({}, {})", pre.meta.source, post.meta.source),
            tau: Some(tau),
            seed: None,
        },
    })
}

/// Draws `per_class[label]` samples of each listed class without
/// replacement. Returns `(selected, remainder)`, both in input order.
pub fn subsample_without_replacement(
    dataset: &[Sample],
    per_class: &BTreeMap<u32, usize>,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.iter().enumerate() {
        if let Some(l) = s.label {
            by_class.entry(l).or_default().push(i);
        }
    }
    let mut rng = rng_from_seed(seed);
    let mut chosen = vec![false; dataset.len()];
    for (&class, &count) in per_class {
        let pool = by_class.get_mut(&class).map(|v| v.as_mut_slice()).unwrap_or_default();
        if pool.len() < count {
            return Err(Error::input(format!(
                "class {class} has {} samples, {count} requested",
                pool.len()
            )));
        }
        let (picked, _) = pool.partial_shuffle(&mut rng, count);
        for &i in picked.iter() {
            chosen[i] = true;
        }
    }
    let (mut sel, mut rest) = (Vec::new(), Vec::new());
    for (s, c) in dataset.iter().zip(chosen) {
        if c {
            sel.push(s.clone());
        } else {
            rest.push(s.clone());
        }
    }
    Ok((sel, rest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stationary_when_tau_is_length() {
        let cfg = GaussianMixtureConfig { tau: 50, ..GaussianMixtureConfig::two_class(2.0, [1.0, 0.0], 0) };
        let s = generate_stream(&cfg, 50, 1).unwrap();
        assert_eq!(s.len(), 50);
        assert_eq!(s.meta.tau, Some(50));
        let pre_only = GaussianMixtureConfig { post_means: None, ..cfg.clone() };
        assert_eq!(s, generate_stream(&pre_only, 50, 1).unwrap());
        assert!(generate_stream(&cfg, 40, 1).is_err());
    }

    #[test]
    fn default_geometry() {
        let cfg = GaussianMixtureConfig::two_class(DEFAULT_DELTA, [2.0, 0.0], 0);
        assert_eq!(cfg.means, vec![vec![0.0, 0.0], vec![2.0, 0.0]]);
    }

    #[test]
    fn class_frequencies_follow_priors() {
        let cfg = GaussianMixtureConfig::stationary(
            vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
            Some(vec![0.7, 0.1, 0.1, 0.1]),
        );
        let s = generate_stream(&cfg, 100_000, 4).unwrap();
        let n = s.len() as f64;
        for (m, p) in [(1u32, 0.7), (2, 0.1), (3, 0.1), (4, 0.1)] {
            let c = s.samples.iter().filter(|x| x.label == Some(m)).count() as f64;
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!((c - n * p).abs() < 3.0 * sd, "class {m}: {c}");
        }
    }

    #[test]
    fn invalid_covariance() {
        let mut cfg = GaussianMixtureConfig::two_class(2.0, [2.0, 0.0], 0);
        cfg.covariances = Some(vec![
            vec![vec![1.0, 2.0], vec![2.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        ]);
        assert!(matches!(cfg.build(), Err(Error::Config(_))));
        cfg.covariances = Some(vec![
            vec![vec![1.0, 0.5], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        ]);
        assert!(matches!(cfg.build(), Err(Error::Config(_))));
    }

    #[test]
    fn drift_only_touches_the_drifted_class() {
        let cfg = GaussianMixtureConfig::two_class(2.0, [2.0, 3.0], 5000);
        let s = generate_stream(&cfg, 10_000, 8).unwrap();
        let mean_y = |range: std::ops::Range<usize>, class: u32| {
            let v: Vec<f64> = s.samples[range]
                .iter()
                .filter(|x| x.label == Some(class))
                .map(|x| x.x[1])
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        // ~2500 samples per class and half: the mean's sd is ~0.02
        assert!((mean_y(0..5000, 1) - mean_y(5000..10_000, 1)).abs() < 0.1);
        assert!((mean_y(5000..10_000, 2) - 3.0).abs() < 0.1);
        assert!(mean_y(0..5000, 2).abs() < 0.1);
    }

    #[test]
    fn skl_closed_forms() {
        let id = DMatrix::<f64>::identity(2, 2);
        assert!(skl_gaussian(&[1.0, 2.0], &id, &[1.0, 2.0], &id).unwrap().abs() < 1e-12);
        let v = skl_gaussian(&[0.0, 0.0], &id, &[3.0, 4.0], &id).unwrap();
        assert!((v - 12.5).abs() < 1e-12);
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = |p: [f64; 2]| [c * p[0] - s * p[1], s * p[0] + c * p[1]];
        let w = skl_gaussian(&rot([0.0, 0.0]), &id, &rot([3.0, 4.0]), &id).unwrap();
        assert!((w - v).abs() < 1e-12);
        // scale change: KL(N(0,1)||N(0,4)) = (1/4 - 1 + ln 4)/2, reverse = (4 - 1 - ln 4)/2
        let a = DMatrix::from_element(1, 1, 1.0);
        let b = DMatrix::from_element(1, 1, 4.0);
        let expected = 0.5 * ((0.25 - 1.0 + 4f64.ln()) / 2.0 + (4.0 - 1.0 - 4f64.ln()) / 2.0);
        let got = skl_gaussian(&[0.0], &a, &[0.0], &b).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(got, skl_gaussian(&[0.0], &b, &[0.0], &a).unwrap());
        let bad = DMatrix::from_element(1, 1, -1.0);
        assert!(matches!(skl_gaussian(&[0.0], &a, &[0.0], &bad), Err(Error::Numeric(_))));
    }

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn csv_rows_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let row: Vec<String> = (1..=33).map(|i| format!("0.{i}")).collect();
        let text = format!("{},3\n{},\n", row.join(","), row.join(","));
        let p = write(&dir, "a.csv", &text);
        let s = read_csv_stream(&p, &CsvSchema::default()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.dim(), Some(33));
        assert_eq!(s.samples[0].label, Some(3));
        assert_eq!(s.samples[0].x[32], 0.33);
        assert_eq!(s.samples[1].label, None);
    }

    #[test]
    fn csv_header_and_named_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "b.csv", "f1,f2,class\n1.0,2.0,bee\n3.0,4.0,ant\n5.5,6.5,fly\n");
        let map = LabelMap::infer(&p, &CsvSchema::default()).unwrap();
        assert_eq!(map.lookup("ant"), Some(1));
        assert_eq!(map.lookup("fly"), Some(3));
        let schema = CsvSchema { label_map: map, ..CsvSchema::default() };
        let s = read_csv_stream(&p, &schema).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.samples[0].label, Some(2));

        let p2 = write(&dir, "c.csv", "1.0,2.0,wasp\n");
        assert!(matches!(read_csv_stream(&p2, &schema), Err(Error::CsvRow { row: 1, .. })));
        let lenient = CsvSchema { lenient_labels: true, ..schema };
        let mut r = CsvStreamReader::open(&p2, lenient).unwrap();
        assert_eq!(r.next_sample().unwrap().unwrap().label, None);
        assert_eq!(r.unknown_labels(), 1);
    }

    #[test]
    fn csv_malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "d.csv", "1.0,2.0,1\n1.5,2.5,2\n1.0,oops,1\n");
        match read_csv_stream(&p, &CsvSchema::default()) {
            Err(Error::CsvRow { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
        let p = write(&dir, "e.csv", "1.0,2.0,1\n1.0,1\n");
        assert!(matches!(read_csv_stream(&p, &CsvSchema::default()), Err(Error::CsvRow { row: 2, .. })));
        assert!(matches!(
            read_csv_stream(dir.path().join("nope.csv"), &CsvSchema::default()),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let cfg = GaussianMixtureConfig::two_class(2.0, [1.0, 1.0], 20);
        let mut s = generate_stream(&cfg, 60, 5).unwrap();
        s.samples[7].label = None;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.csv");
        write_csv(&s, &p).unwrap();
        let back = read_csv_stream(&p, &CsvSchema::default()).unwrap();
        assert_eq!(back.samples, s.samples);
    }

    #[test]
    fn splice_lengths() {
        let cfg = GaussianMixtureConfig::stationary(vec![vec![0.0, 0.0], vec![2.0, 0.0]], None);
        let pre = generate_stream(&cfg, 500, 1).unwrap();
        let post = generate_stream(&cfg, 7000, 2).unwrap();
        let s = splice_streams(&pre, &post, 160).unwrap();
        assert_eq!(s.len(), 7160);
        assert_eq!(s.meta.tau, Some(160));
        assert_eq!(s.samples[160], post.samples[0]);
        assert_eq!(splice_streams(&pre, &post, 0).unwrap().samples, post.samples);
        let other = generate_stream(&GaussianMixtureConfig::stationary(vec![vec![0.0]], None), 10, 3).unwrap();
        assert!(splice_streams(&pre, &other, 5).is_err());
    }

    #[test]
    fn subsample_partitions_the_pool() {
        let cfg = GaussianMixtureConfig::stationary(
            vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
            None,
        );
        let mut rng = rng_from_seed(1);
        let pool = cfg.build().unwrap().pre.sample_per_class(400, &mut rng);
        let per: BTreeMap<u32, usize> = (1..=4).map(|m| (m, 256)).collect();
        let (train, rest) = subsample_without_replacement(&pool, &per, 9).unwrap();
        assert_eq!(train.len(), 1024);
        assert_eq!(rest.len(), 576);
        for m in 1..=4 {
            assert_eq!(train.iter().filter(|s| s.label == Some(m)).count(), 256);
        }
        let mut all: Vec<f64> = train.iter().chain(&rest).map(|s| s.x[0]).collect();
        let mut orig: Vec<f64> = pool.iter().map(|s| s.x[0]).collect();
        all.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(all, orig);

        let (other, _) = subsample_without_replacement(&pool, &per, 10).unwrap();
        assert_ne!(other, train);

        let too_many: BTreeMap<u32, usize> = [(2, 500)].into();
        let err = subsample_without_replacement(&pool, &too_many, 1).unwrap_err();
        assert!(err.to_string().contains("class 2"));
    }
}
