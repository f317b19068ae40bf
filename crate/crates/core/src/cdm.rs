//! Class Distribution Monitoring.
//!
//! One QuantTree histogram and one QT-EWMA detector per class. A labeled
//! sample `(x, y)` only advances the detector of class `y`, whose statistic
//! is compared against `h_{t_y}`, the threshold indexed by the number of
//! class-`y` samples seen so far. The first exceedance reports the global
//! time and the class that raised it. Because every detector keeps a
//! constant conditional false-alarm probability and each sample updates
//! exactly one of them, the monitor as a whole keeps the same ARL0.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calibration::ThresholdTable;
use crate::datastreams::Sample;
use crate::error::{Error, Result};
use crate::monitor::{Alarm, DetectionReport, DriftMonitor};
use crate::qt_ewma::{QtEwmaDetector, DEFAULT_LAMBDA};
use crate::quanttree::{uniform_probs, QuantTreeHistogram, DEFAULT_BINS};

/// What to do with a label outside `1..=M` during monitoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelPolicy {
    #[default]
    Strict,
    /// Skip the sample and count it.
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdmConfig {
    pub bins: usize,
    pub lambda: f64,
    pub seed: u64,
    pub label_policy: LabelPolicy,
    /// Number of classes; inferred from the largest training label when `None`.
    pub classes: Option<u32>,
}

impl Default for CdmConfig {
    fn default() -> Self {
        CdmConfig {
            bins: DEFAULT_BINS,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            label_policy: LabelPolicy::Strict,
            classes: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Drift { t: u64, class: u32 },
}

#[derive(Debug, Clone)]
pub struct CdmMonitor {
    detectors: Vec<QtEwmaDetector>,
    global_t: u64,
    drift: Option<(u64, u32)>,
    skipped: u64,
    policy: LabelPolicy,
    /// Single detector fed with every sample regardless of label.
    pooled: bool,
}

impl CdmMonitor {
    /// Splits `training` by label and builds one histogram per class; class
    /// `m` uses seed `cfg.seed + m`.
    pub fn fit(training: &[Sample], thresholds: Arc<ThresholdTable>, cfg: &CdmConfig) -> Result<Self> {
        let mut max_label = 0;
        for (i, s) in training.iter().enumerate() {
            match s.label {
                Some(0) | None => {
                    return Err(Error::input(format!(
                        "training sample {i} needs a label in 1..=M"
                    )))
                }
                Some(l) => max_label = max_label.max(l),
            }
        }
        let classes = cfg.classes.unwrap_or(max_label);
        if max_label > classes {
            return Err(Error::input(format!(
                "training label {max_label} is outside 1..={classes}"
            )));
        }
        let mut per_class: Vec<Vec<&[f64]>> = vec![Vec::new(); classes as usize];
        for s in training {
            per_class[s.label.unwrap() as usize - 1].push(&s.x);
        }
        let probs = uniform_probs(cfg.bins);
        let mut detectors = Vec::with_capacity(classes as usize);
        for (m, rows) in per_class.iter().enumerate() {
            let class = m as u32 + 1;
            if rows.len() < cfg.bins {
                return Err(Error::config(format!(
                    "class {class} has {} training samples, at least K={} needed",
                    rows.len(),
                    cfg.bins
                )));
            }
            let hist = QuantTreeHistogram::build(rows, &probs, cfg.seed.wrapping_add(class as u64))?;
            detectors.push(QtEwmaDetector::new(Arc::new(hist), cfg.lambda, Arc::clone(&thresholds))?);
        }
        Ok(CdmMonitor {
            detectors,
            global_t: 0,
            drift: None,
            skipped: 0,
            policy: cfg.label_policy,
            pooled: false,
        })
    }

    /// Overall-distribution baseline: one histogram with `cfg.bins` bins on
    /// the pooled training set, fed with every sample (labeled or not).
    pub fn fit_pooled(training: &[Sample], thresholds: Arc<ThresholdTable>, cfg: &CdmConfig) -> Result<Self> {
        if training.len() < cfg.bins {
            return Err(Error::config(format!(
                "{} training samples, at least K={} needed",
                training.len(),
                cfg.bins
            )));
        }
        let rows: Vec<&[f64]> = training.iter().map(|s| s.x.as_slice()).collect();
        let hist = QuantTreeHistogram::build(&rows, &uniform_probs(cfg.bins), cfg.seed.wrapping_add(1))?;
        let det = QtEwmaDetector::new(Arc::new(hist), cfg.lambda, thresholds)?;
        Ok(CdmMonitor {
            pooled: true,
            ..Self::from_detectors(vec![det], cfg.label_policy)?
        })
    }

    /// Monitor over prebuilt detectors; detector `m - 1` serves class `m`.
    pub fn from_detectors(detectors: Vec<QtEwmaDetector>, policy: LabelPolicy) -> Result<Self> {
        if detectors.is_empty() {
            return Err(Error::config("CDM needs at least one class detector"));
        }
        let first = detectors[0].thresholds();
        if detectors.iter().any(|d| !Arc::ptr_eq(d.thresholds(), first) && **d.thresholds() != **first) {
            return Err(Error::config("all class detectors must share one threshold table"));
        }
        Ok(CdmMonitor {
            detectors,
            global_t: 0,
            drift: None,
            skipped: 0,
            policy,
            pooled: false,
        })
    }

    pub fn classes(&self) -> u32 {
        self.detectors.len() as u32
    }

    pub fn is_pooled(&self) -> bool {
        self.pooled
    }

    fn decision(&self) -> Decision {
        match self.drift {
            Some((t, class)) => Decision::Drift { t, class },
            None => Decision::Continue,
        }
    }

    fn feed(&mut self, idx: usize, x: &[f64]) -> Result<Decision> {
        let step = self.detectors[idx].update(x)?;
        self.global_t += 1;
        if step.detected {
            self.drift = Some((self.global_t, idx as u32 + 1));
        }
        Ok(self.decision())
    }

    /// Routes a labeled sample to its class detector.
    pub fn process(&mut self, x: &[f64], label: u32) -> Result<Decision> {
        if self.drift.is_some() {
            return Ok(self.decision());
        }
        if self.pooled {
            return self.feed(0, x);
        }
        if label == 0 || label > self.classes() {
            return match self.policy {
                LabelPolicy::Strict => Err(Error::input(format!(
                    "label {label} is outside 1..={}",
                    self.classes()
                ))),
                LabelPolicy::Lenient => {
                    self.skipped += 1;
                    self.global_t += 1;
                    Ok(Decision::Continue)
                }
            };
        }
        self.feed(label as usize - 1, x)
    }

    /// Unlabeled samples advance the global clock only (the pooled baseline
    /// monitors them like any other sample).
    pub fn process_unlabeled(&mut self, x: &[f64]) -> Result<Decision> {
        if self.drift.is_some() {
            return Ok(self.decision());
        }
        if self.pooled {
            return self.feed(0, x);
        }
        self.global_t += 1;
        Ok(Decision::Continue)
    }

    pub fn process_sample(&mut self, sample: &Sample) -> Result<Decision> {
        match sample.label {
            Some(l) => self.process(&sample.x, l),
            None => self.process_unlabeled(&sample.x),
        }
    }

    pub fn global_t(&self) -> u64 {
        self.global_t
    }

    /// Samples each class detector has consumed (`t_m`).
    pub fn per_class_t(&self) -> Vec<u64> {
        self.detectors.iter().map(QtEwmaDetector::t).collect()
    }

    pub fn statistics(&self) -> Vec<f64> {
        self.detectors.iter().map(QtEwmaDetector::statistic).collect()
    }

    pub fn detector(&self, class: u32) -> &QtEwmaDetector {
        &self.detectors[class as usize - 1]
    }

    pub fn skipped_labels(&self) -> u64 {
        self.skipped
    }

    pub fn drift(&self) -> Option<(u64, u32)> {
        self.drift
    }
}

impl DriftMonitor for CdmMonitor {
    fn observe(&mut self, sample: &Sample) -> Result<Option<Alarm>> {
        Ok(match self.process_sample(sample)? {
            Decision::Continue => None,
            Decision::Drift { t, class } => Some(Alarm {
                t,
                class: (!self.pooled).then_some(class),
            }),
        })
    }

    fn report(&self) -> DetectionReport {
        DetectionReport {
            method: if self.pooled { "qtewma" } else { "cdm" }.into(),
            t_star: self.drift.map(|d| d.0),
            m_star: self.drift.filter(|_| !self.pooled).map(|d| d.1),
            samples_processed: self.global_t,
            per_class_t: self.per_class_t(),
            final_statistics: self.statistics(),
            skipped_labels: self.skipped,
        }
    }
}

pub fn fit_cdm(training: &[Sample], thresholds: Arc<ThresholdTable>, cfg: &CdmConfig) -> Result<CdmMonitor> {
    CdmMonitor::fit(training, thresholds, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastreams::GaussianMixtureConfig;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn training(classes: usize, per: usize, seed: u64) -> Vec<Sample> {
        let means = (0..classes).map(|m| vec![m as f64 * 2.0, 0.0]).collect();
        let mix = GaussianMixtureConfig::stationary(means, None).build().unwrap().pre;
        mix.sample_per_class(per, &mut rng_from_seed(seed))
    }

    fn table(h: Vec<f64>) -> Arc<ThresholdTable> {
        Arc::new(ThresholdTable::from_thresholds(16, 0.03, 375.0, 256, h))
    }

    #[test]
    fn one_histogram_per_class() {
        let train = training(4, 256, 1);
        let mon = CdmMonitor::fit(&train, table(vec![10.0]), &CdmConfig::default()).unwrap();
        assert_eq!(mon.classes(), 4);
        for m in 1..=4u32 {
            let rows: Vec<_> = train.iter().filter(|s| s.label == Some(m)).collect();
            let counts = mon.detector(m).histogram().bin_counts(&rows.iter().map(|s| &s.x).collect::<Vec<_>>()).unwrap();
            assert_eq!(counts, vec![16; 16]);
            assert_eq!(mon.detector(m).histogram().seed(), m as u64);
        }
    }

    #[test]
    fn training_errors() {
        let mut train = training(3, 256, 2);
        train.retain(|s| s.label != Some(2));
        let err = CdmMonitor::fit(&train, table(vec![10.0]), &CdmConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("class 2")), "{err}");

        let mut few = training(2, 256, 2);
        few.truncate(256 + 10);
        let err = CdmMonitor::fit(&few, table(vec![10.0]), &CdmConfig::default()).unwrap_err();
        assert!(err.to_string().contains("class 2"));

        let train = training(2, 64, 2);
        let cfg = CdmConfig { classes: Some(1), ..CdmConfig::default() };
        assert!(matches!(CdmMonitor::fit(&train, table(vec![10.0]), &cfg), Err(Error::Input(_))));
        let mut unlabeled = train.clone();
        unlabeled[0].label = None;
        assert!(matches!(CdmMonitor::fit(&unlabeled, table(vec![10.0]), &CdmConfig::default()), Err(Error::Input(_))));
    }

    #[test]
    fn routing_and_label_policies() {
        let train = training(2, 64, 3);
        let mut mon = CdmMonitor::fit(&train, table(vec![100.0]), &CdmConfig::default()).unwrap();
        let before = mon.detector(1).z().to_vec();
        mon.process(&[3.0, 0.1], 2).unwrap();
        mon.process(&[2.0, -0.1], 2).unwrap();
        assert_eq!(mon.detector(1).z(), &before[..]);
        assert_eq!(mon.per_class_t(), vec![0, 2]);
        assert!(matches!(mon.process(&[0.0, 0.0], 3), Err(Error::Input(_))));

        for _ in 0..5 {
            assert_eq!(mon.process_unlabeled(&[0.0, 0.0]).unwrap(), Decision::Continue);
        }
        assert_eq!(mon.per_class_t(), vec![0, 2]);
        assert_eq!(mon.global_t(), 7);

        let cfg = CdmConfig { label_policy: LabelPolicy::Lenient, ..CdmConfig::default() };
        let mut lenient = CdmMonitor::fit(&train, table(vec![100.0]), &cfg).unwrap();
        assert_eq!(lenient.process(&[0.0, 0.0], 9).unwrap(), Decision::Continue);
        assert_eq!(lenient.skipped_labels(), 1);
        assert_eq!(lenient.per_class_t(), vec![0, 0]);
    }

    #[test]
    fn thresholds_follow_the_class_counter() {
        // h_1 = h_2 = 100 (never), h_3 = 0 (always): the alarm must come on the
        // third sample of some class, not the third global sample
        let train = training(2, 64, 4);
        let mut mon = CdmMonitor::fit(&train, table(vec![100.0, 100.0, 0.0]), &CdmConfig::default()).unwrap();
        let seq = [1, 1, 2, 2, 2];
        let mut out = Vec::new();
        for (i, &y) in seq.iter().enumerate() {
            out.push(mon.process(&[i as f64 * 0.1, 0.0], y).unwrap());
        }
        assert_eq!(&out[..4], &[Decision::Continue; 4]);
        assert_eq!(out[4], Decision::Drift { t: 5, class: 2 });
        assert_eq!(mon.per_class_t(), vec![2, 3]);
        // frozen afterwards
        assert_eq!(mon.process(&[0.0, 0.0], 1).unwrap(), Decision::Drift { t: 5, class: 2 });
        assert_eq!(mon.per_class_t(), vec![2, 3]);
        let rep = mon.report();
        assert_eq!(rep.t_star, Some(5));
        assert_eq!(rep.m_star, Some(2));
    }

    #[test]
    fn per_class_isolation_under_interleaving() {
        let train = training(3, 128, 5);
        let t = table(vec![0.2; 50]);
        let cfg = CdmConfig { seed: 11, ..CdmConfig::default() };
        let mix = GaussianMixtureConfig::stationary(
            vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 0.0]],
            Some(vec![0.5, 0.3, 0.2]),
        )
        .build()
        .unwrap()
        .pre;
        let mut rng = rng_from_seed(9);
        let stream: Vec<Sample> = (0..3000).map(|_| mix.sample(&mut rng)).collect();
        // stable re-ordering that keeps within-class order: sort by label
        let mut sorted = stream.clone();
        sorted.sort_by_key(|s| s.label);

        let trajectories = |data: &[Sample]| {
            let mut mon = CdmMonitor::fit(&train, Arc::clone(&t), &cfg).unwrap();
            let mut per: Vec<Vec<f64>> = vec![Vec::new(); 3];
            // run each class detector to exhaustion independently of others' alarms
            for s in data {
                let m = s.label.unwrap() as usize - 1;
                let det = &mut mon.detectors[m];
                if !det.is_frozen() {
                    per[m].push(det.update(&s.x).unwrap().statistic);
                }
            }
            (per, mon.per_class_t())
        };
        assert_eq!(trajectories(&stream), trajectories(&sorted));
    }

    #[test]
    fn unlabeled_stream_never_detects() {
        let train = training(2, 64, 6);
        let mut mon = CdmMonitor::fit(&train, table(vec![0.0]), &CdmConfig::default()).unwrap();
        let mut rng = rng_from_seed(1);
        for _ in 0..1000 {
            let x = vec![rng.random::<f64>(), rng.random::<f64>()];
            assert_eq!(mon.process_unlabeled(&x).unwrap(), Decision::Continue);
        }
        assert_eq!(mon.per_class_t(), vec![0, 0]);
    }

    #[test]
    fn pooled_baseline_uses_every_sample() {
        let train = training(2, 256, 7);
        let t = Arc::new(ThresholdTable::from_thresholds(32, 0.03, 375.0, 512, vec![100.0]));
        let cfg = CdmConfig { bins: 32, ..CdmConfig::default() };
        let mut mon = CdmMonitor::fit_pooled(&train, t, &cfg).unwrap();
        assert!(mon.is_pooled());
        mon.process_unlabeled(&[0.0, 0.0]).unwrap();
        mon.process(&[0.0, 0.0], 7).unwrap();
        assert_eq!(mon.per_class_t(), vec![2]);
        assert_eq!(mon.report().method, "qtewma");
    }
}
