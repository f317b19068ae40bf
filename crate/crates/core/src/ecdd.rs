//! ECDD baseline: an EWMA chart over the 0/1 error stream of a fixed
//! classifier, plus the two classifiers used with it (k-NN and LDA).
//!
//! The chart tracks `U_t = (1 - r) U_{t-1} + r e_t` with `U_0 = p0`, and
//! signals when `U_t > p_t + L sigma_t`, where `p_t` is the running error
//! rate and `sigma_t^2 = p_t (1 - p_t) r / (2 - r) (1 - (1 - r)^{2t})`.
//! Only error increases can trigger it.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datastreams::Sample;
use crate::error::{Error, Result};
use crate::monitor::{Alarm, DetectionReport, DriftMonitor};
use crate::rng::rng_from_seed;

pub const DEFAULT_R: f64 = 0.2;
pub const DEFAULT_KNN_K: usize = 9;
pub const CV_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EcddStep {
    pub t: u64,
    pub u: f64,
    pub p_hat: f64,
    pub sigma: f64,
    pub detected: bool,
}

#[derive(Debug, Clone)]
pub struct EcddState {
    r: f64,
    limit: f64,
    p0: f64,
    u: f64,
    error_sum: f64,
    n_seen: u64,
    /// `(1 - r)^{2t}`, kept incrementally.
    decay_sq: f64,
    detection: Option<EcddStep>,
}

impl EcddState {
    pub fn new(p0: f64, r: f64, limit: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p0) {
            return Err(Error::config(format!("p0 must lie in [0, 1], got {p0}")));
        }
        if !(r > 0.0 && r < 1.0) {
            return Err(Error::config(format!("r must lie in (0, 1), got {r}")));
        }
        if !limit.is_finite() {
            return Err(Error::config("control limit must be finite"));
        }
        Ok(EcddState {
            r,
            limit,
            p0,
            u: p0,
            error_sum: 0.0,
            n_seen: 0,
            decay_sq: 1.0,
            detection: None,
        })
    }

    /// Running error rate; the initial estimate counts as one observation.
    pub fn p_hat(&self) -> f64 {
        (self.p0 + self.error_sum) / (self.n_seen as f64 + 1.0)
    }

    pub fn u(&self) -> f64 {
        self.u
    }

    pub fn n_seen(&self) -> u64 {
        self.n_seen
    }

    pub fn limit(&self) -> f64 {
        self.limit
    }

    pub fn detection(&self) -> Option<EcddStep> {
        self.detection
    }

    /// Standard deviation of `U_t` after `t` observations at error rate `p`.
    pub fn sigma(p: f64, r: f64, t: u64) -> f64 {
        let decay = (1.0 - r).powi(2 * t as i32);
        (p * (1.0 - p) * r / (2.0 - r) * (1.0 - decay)).sqrt()
    }

    pub fn update(&mut self, error: bool) -> EcddStep {
        if let Some(step) = self.detection {
            return step;
        }
        let e = if error { 1.0 } else { 0.0 };
        self.n_seen += 1;
        self.error_sum += e;
        self.u = (1.0 - self.r) * self.u + self.r * e;
        self.decay_sq *= (1.0 - self.r) * (1.0 - self.r);
        let p = self.p_hat();
        let sigma = (p * (1.0 - p) * self.r / (2.0 - self.r) * (1.0 - self.decay_sq)).sqrt();
        let step = EcddStep {
            t: self.n_seen,
            u: self.u,
            p_hat: p,
            sigma,
            detected: self.u > p + self.limit * sigma,
        };
        if step.detected {
            self.detection = Some(step);
        }
        step
    }
}

pub fn ecdd_init(p0: f64, r: f64, limit: f64) -> Result<EcddState> {
    EcddState::new(p0, r, limit)
}

// ---------------------------------------------------------------------------
// Classifiers

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ClassifierKind {
    Knn { k: usize },
    Lda,
}

impl Default for ClassifierKind {
    fn default() -> Self {
        ClassifierKind::Knn { k: DEFAULT_KNN_K }
    }
}

#[derive(Debug, Clone)]
pub struct KnnClassifier {
    k: usize,
    points: Vec<Vec<f64>>,
    labels: Vec<u32>,
}

impl KnnClassifier {
    pub fn predict(&self, x: &[f64]) -> u32 {
        let mut dist: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < dist.len() {
            dist.select_nth_unstable_by(self.k - 1, by_dist);
        }
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for &(_, i) in &dist[..self.k] {
            *votes.entry(self.labels[i]).or_default() += 1;
        }
        // BTreeMap iterates labels in increasing order, so `>` keeps the smallest on ties
        let mut best = (0, 0);
        for (label, count) in votes {
            if count > best.1 {
                best = (label, count);
            }
        }
        best.0
    }
}

/// Linear discriminant analysis with a pooled covariance.
#[derive(Debug, Clone)]
pub struct LdaClassifier {
    labels: Vec<u32>,
    weights: Vec<DVector<f64>>,
    offsets: Vec<f64>,
}

impl LdaClassifier {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(x);
        self.weights
            .iter()
            .zip(&self.offsets)
            .map(|(w, b)| w.dot(&x) + b)
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> u32 {
        let scores = self.scores(x);
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        self.labels[best]
    }
}

#[derive(Debug, Clone)]
pub enum Classifier {
    Knn(KnnClassifier),
    Lda(LdaClassifier),
}

/// Ridge added to a singular pooled covariance, relative to its mean diagonal.
pub const LDA_RIDGE: f64 = 1e-6;

impl Classifier {
    pub fn fit(kind: ClassifierKind, training: &[Sample]) -> Result<Self> {
        let mut labels = Vec::with_capacity(training.len());
        for (i, s) in training.iter().enumerate() {
            labels.push(
                s.label
                    .ok_or_else(|| Error::input(format!("training sample {i} has no label")))?,
            );
        }
        let classes: Vec<u32> = {
            let mut c = labels.clone();
            c.sort_unstable();
            c.dedup();
            c
        };
        if classes.len() < 2 {
            return Err(Error::config("a classifier needs at least two classes in training"));
        }
        let d = training[0].x.len();
        if training.iter().any(|s| s.x.len() != d) {
            return Err(Error::input("training samples differ in dimension"));
        }
        match kind {
            ClassifierKind::Knn { k } => {
                if k == 0 || k > training.len() {
                    return Err(Error::config(format!(
                        "k = {k} is invalid for {} training samples",
                        training.len()
                    )));
                }
                Ok(Classifier::Knn(KnnClassifier {
                    k,
                    points: training.iter().map(|s| s.x.clone()).collect(),
                    labels,
                }))
            }
            ClassifierKind::Lda => fit_lda(training, &labels, &classes, d).map(Classifier::Lda),
        }
    }

    pub fn predict(&self, x: &[f64]) -> u32 {
        match self {
            Classifier::Knn(c) => c.predict(x),
            Classifier::Lda(c) => c.predict(x),
        }
    }

    /// Fraction of labeled samples that are misclassified.
    pub fn error_rate(&self, data: &[Sample]) -> f64 {
        let labeled: Vec<_> = data.iter().filter(|s| s.label.is_some()).collect();
        let wrong = labeled
            .iter()
            .filter(|s| Some(self.predict(&s.x)) != s.label)
            .count();
        wrong as f64 / labeled.len().max(1) as f64
    }
}

fn fit_lda(training: &[Sample], labels: &[u32], classes: &[u32], d: usize) -> Result<LdaClassifier> {
    let n = training.len();
    if n <= classes.len() {
        return Err(Error::config("LDA needs more training samples than classes"));
    }
    let mut means = Vec::with_capacity(classes.len());
    let mut counts = Vec::with_capacity(classes.len());
    for &c in classes {
        let mut mean = DVector::zeros(d);
        let mut count = 0usize;
        for (s, &l) in training.iter().zip(labels) {
            if l == c {
                mean += DVector::from_column_slice(&s.x);
                count += 1;
            }
        }
        means.push(mean / count as f64);
        counts.push(count);
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (s, &l) in training.iter().zip(labels) {
        let ci = classes.binary_search(&l).expect("label collected above");
        let diff = DVector::from_column_slice(&s.x) - &means[ci];
        cov += &diff * diff.transpose();
    }
    cov /= (n - classes.len()) as f64;

    let chol = match cov.clone().cholesky() {
        Some(c) => c,
        None => {
            let eps = LDA_RIDGE * (cov.trace() / d as f64).max(f64::MIN_POSITIVE);
            let ridged = &cov + DMatrix::identity(d, d) * eps;
            ridged.cholesky().ok_or_else(|| {
                Error::Numeric("pooled covariance is singular even after regularization".into())
            })?
        }
    };
    let mut weights = Vec::with_capacity(classes.len());
    let mut offsets = Vec::with_capacity(classes.len());
    for (mean, &count) in means.iter().zip(&counts) {
        let w = chol.solve(mean);
        offsets.push(-0.5 * mean.dot(&w) + (count as f64 / n as f64).ln());
        weights.push(w);
    }
    Ok(LdaClassifier {
        labels: classes.to_vec(),
        weights,
        offsets,
    })
}

pub fn fit_classifier(kind: ClassifierKind, training: &[Sample]) -> Result<Classifier> {
    Classifier::fit(kind, training)
}

/// `folds`-fold cross-validated error rate, used as the initial error estimate.
pub fn cross_validated_error(kind: ClassifierKind, training: &[Sample], folds: usize, seed: u64) -> Result<f64> {
    if folds < 2 || folds > training.len() {
        return Err(Error::config(format!("cannot run {folds}-fold CV on {} samples", training.len())));
    }
    let mut order: Vec<usize> = (0..training.len()).collect();
    order.shuffle(&mut rng_from_seed(seed));
    let mut wrong = 0usize;
    for f in 0..folds {
        let (mut fit_part, mut test_part) = (Vec::new(), Vec::new());
        for (pos, &i) in order.iter().enumerate() {
            if pos % folds == f {
                test_part.push(training[i].clone());
            } else {
                fit_part.push(training[i].clone());
            }
        }
        let model = Classifier::fit(kind, &fit_part)?;
        wrong += test_part
            .iter()
            .filter(|s| Some(model.predict(&s.x)) != s.label)
            .count();
    }
    Ok(wrong as f64 / training.len() as f64)
}

// ---------------------------------------------------------------------------
// Monitoring

/// ECDD applied to a labeled stream with a frozen classifier.
#[derive(Debug, Clone)]
pub struct EcddMonitor {
    classifier: Arc<Classifier>,
    state: EcddState,
    global_t: u64,
    alarm: Option<Alarm>,
}

impl EcddMonitor {
    pub fn new(classifier: Arc<Classifier>, state: EcddState) -> Self {
        EcddMonitor {
            classifier,
            state,
            global_t: 0,
            alarm: None,
        }
    }

    pub fn state(&self) -> &EcddState {
        &self.state
    }

    /// Unlabeled samples advance time but produce no error indicator.
    pub fn process(&mut self, sample: &Sample) -> Option<Alarm> {
        if self.alarm.is_some() {
            return self.alarm;
        }
        self.global_t += 1;
        let Some(label) = sample.label else {
            return None;
        };
        let error = self.classifier.predict(&sample.x) != label;
        if self.state.update(error).detected {
            self.alarm = Some(Alarm {
                t: self.global_t,
                class: None,
            });
        }
        self.alarm
    }
}

impl DriftMonitor for EcddMonitor {
    fn observe(&mut self, sample: &Sample) -> Result<Option<Alarm>> {
        Ok(self.process(sample))
    }

    fn report(&self) -> DetectionReport {
        DetectionReport {
            method: "ecdd".into(),
            t_star: self.alarm.map(|a| a.t),
            m_star: None,
            samples_processed: self.global_t,
            per_class_t: Vec::new(),
            final_statistics: vec![self.state.u()],
            skipped_labels: 0,
        }
    }
}

/// Runs ECDD over `stream` until the first alarm.
pub fn ecdd_monitor_stream<'a, I>(classifier: Arc<Classifier>, stream: I, state: EcddState) -> Option<Alarm>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut mon = EcddMonitor::new(classifier, state);
    stream.into_iter().find_map(|s| mon.process(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastreams::GaussianMixtureConfig;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn sigma_example() {
        assert!((EcddState::sigma(0.5, 0.2, 1) - 0.1).abs() < 1e-12);
        let mut st = EcddState::new(0.5, 0.2, 3.0).unwrap();
        let step = st.update(true);
        // p_hat = (0.5 + 1) / 2
        assert!((step.p_hat - 0.75).abs() < 1e-12);
        assert!((step.sigma - EcddState::sigma(0.75, 0.2, 1)).abs() < 1e-12);
        assert!((step.u - 0.6).abs() < 1e-12);
    }

    #[test]
    fn init_state_and_zero_error_fixed_point() {
        let mut st = ecdd_init(0.0, DEFAULT_R, 1.0).unwrap();
        assert_eq!(st.u(), 0.0);
        assert_eq!(st.p_hat(), 0.0);
        for _ in 0..1000 {
            assert!(!st.update(false).detected);
        }
        assert_eq!(st.u(), 0.0);
        let st = ecdd_init(0.3, DEFAULT_R, 1.0).unwrap();
        assert_eq!(st.u(), 0.3);
        assert!(ecdd_init(1.5, 0.2, 1.0).is_err());
        assert!(ecdd_init(0.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn error_increase_is_detected_quickly() {
        let limit = crate::calibration::calibrate_ecdd_limit(0.1, 0.2, 375.0, 2000, 1).unwrap();
        let mut delays = Vec::new();
        for rep in 0..200 {
            let mut rng = rng_from_seed(rep);
            let mut st = EcddState::new(0.1, 0.2, limit).unwrap();
            let mut alarm = None;
            for t in 1..=5000u64 {
                let p = if t <= 100 { 0.1 } else { 0.5 };
                if st.update(rng.random::<f64>() < p).detected {
                    alarm = Some(t);
                    break;
                }
            }
            if let Some(t) = alarm.filter(|&t| t > 100) {
                delays.push((t - 100) as f64);
            }
        }
        let mean = delays.iter().sum::<f64>() / delays.len() as f64;
        assert!(mean < 40.0, "mean delay {mean}");
    }

    proptest! {
        #[test]
        fn u_stays_in_range(p0 in 0.0f64..1.0, errs in proptest::collection::vec(any::<bool>(), 1..300)) {
            let mut st = EcddState::new(p0, 0.2, 100.0).unwrap();
            let any_err = errs.iter().any(|&e| e);
            let all_err = errs.iter().all(|&e| e);
            for e in &errs {
                st.update(*e);
            }
            let lo = if all_err { p0.min(1.0) } else { 0.0 };
            let hi = if any_err { 1.0 } else { p0 };
            prop_assert!(st.u() >= lo - 1e-12 && st.u() <= hi + 1e-12);
            prop_assert!((0.0..=1.0).contains(&st.p_hat()));
        }

        #[test]
        fn sigma_grows_to_its_limit(p in 0.01f64..0.99, r in 0.05f64..0.95) {
            let limit = (p * (1.0 - p) * r / (2.0 - r)).sqrt();
            let mut prev = 0.0;
            for t in 1..200 {
                let s = EcddState::sigma(p, r, t);
                prop_assert!(s >= prev && s <= limit + 1e-15);
                prev = s;
            }
            prop_assert!((prev - limit).abs() < 1e-6);
        }
    }

    fn two_class(delta: f64, n: usize, seed: u64) -> Vec<Sample> {
        let mix = GaussianMixtureConfig::two_class(delta, [delta, 0.0], 0).build().unwrap().pre;
        mix.sample_per_class(n, &mut rng_from_seed(seed))
    }

    #[test]
    fn lda_separates_distant_classes() {
        let train = two_class(4.0, 500, 1);
        let lda = Classifier::fit(ClassifierKind::Lda, &train).unwrap();
        assert!(lda.error_rate(&train) < 0.05);
        let test = two_class(4.0, 5000, 2);
        assert!(lda.error_rate(&test) < 0.05);
    }

    #[test]
    fn one_nn_memorizes() {
        let train = two_class(1.0, 100, 3);
        let knn = Classifier::fit(ClassifierKind::Knn { k: 1 }, &train).unwrap();
        assert_eq!(knn.error_rate(&train), 0.0);
    }

    #[test]
    fn knn_tie_breaks() {
        let train = vec![
            Sample::labeled(vec![0.0], 2),
            Sample::labeled(vec![1.0], 1),
            Sample::labeled(vec![-1.0], 2),
            Sample::labeled(vec![5.0], 1),
        ];
        // two neighbours, one vote each: smallest label wins
        let knn = Classifier::fit(ClassifierKind::Knn { k: 2 }, &train).unwrap();
        assert_eq!(knn.predict(&[0.4]), 1);
        // distance tie between x=1 and x=-1: earlier training index wins
        let knn = Classifier::fit(ClassifierKind::Knn { k: 1 }, &train[1..3]).unwrap();
        assert_eq!(knn.predict(&[0.0]), 1);
    }

    #[test]
    fn classifier_config_errors() {
        let single = vec![Sample::labeled(vec![0.0], 1), Sample::labeled(vec![1.0], 1)];
        assert!(matches!(Classifier::fit(ClassifierKind::Lda, &single), Err(Error::Config(_))));
        let train = two_class(1.0, 3, 1);
        assert!(matches!(Classifier::fit(ClassifierKind::Knn { k: 9 }, &train), Err(Error::Config(_))));
    }

    #[test]
    fn lda_handles_degenerate_covariance() {
        // second coordinate is constant: pooled covariance is singular
        let train: Vec<Sample> = (0..40)
            .map(|i| Sample::labeled(vec![i as f64 / 10.0 + if i < 20 { 0.0 } else { 3.0 }, 1.0], if i < 20 { 1 } else { 2 }))
            .collect();
        let lda = Classifier::fit(ClassifierKind::Lda, &train).unwrap();
        assert_eq!(lda.predict(&[0.5, 1.0]), 1);
        assert_eq!(lda.predict(&[5.0, 1.0]), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn lda_invariant_to_affine_whitening(seed in any::<u64>(), a in -2.0f64..2.0, b in 0.2f64..3.0, s1 in -5.0f64..5.0, s2 in -5.0f64..5.0) {
            let train = two_class(2.0, 100, seed);
            let test = two_class(2.0, 100, seed ^ 1);
            // invertible map with det = b * 1.3 > 0
            let map = |s: &Sample| Sample { x: vec![b * s.x[0] + a * s.x[1] + s1, 1.3 * s.x[1] + s2], label: s.label };
            let lda1 = match Classifier::fit(ClassifierKind::Lda, &train).unwrap() { Classifier::Lda(l) => l, _ => unreachable!() };
            let lda2 = match Classifier::fit(ClassifierKind::Lda, &train.iter().map(map).collect::<Vec<_>>()).unwrap() { Classifier::Lda(l) => l, _ => unreachable!() };
            for s in &test {
                let sc = lda1.scores(&s.x);
                if (sc[0] - sc[1]).abs() > 1e-6 {
                    prop_assert_eq!(lda1.predict(&s.x), lda2.predict(&map(s).x));
                }
            }
        }
    }

    #[test]
    fn cv_error_is_reasonable() {
        let train = two_class(2.0, 256, 5);
        let e = cross_validated_error(ClassifierKind::Lda, &train, CV_FOLDS, 1).unwrap();
        assert!((e - 0.159).abs() < 0.05, "{e}");
        assert_eq!(e, cross_validated_error(ClassifierKind::Lda, &train, CV_FOLDS, 1).unwrap());
    }

    #[test]
    fn perfect_classifier_never_alarms() {
        let train = two_class(20.0, 50, 6);
        let clf = Arc::new(Classifier::fit(ClassifierKind::Lda, &train).unwrap());
        let stream = two_class(20.0, 2000, 7);
        let st = EcddState::new(0.0, 0.2, 3.0).unwrap();
        assert!(ecdd_monitor_stream(clf, &stream, st).is_none());
    }
}
