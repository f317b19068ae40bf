//! Online QT-EWMA detector.
//!
//! For every incoming sample the detector finds its QuantTree bin and
//! updates `K` exponentially weighted bin frequencies
//! `Z_k <- (1 - lambda) Z_k + lambda * 1{x in S_k}`, starting from `Z_k = pi_k`.
//! The monitored statistic is the Pearson-like divergence
//! `T = sum_k (Z_k - pi_k)^2 / pi_k`, compared against the time-varying
//! threshold `h_t` of a [`ThresholdTable`].

use std::io::Write;
use std::sync::Arc;

use serde::Serialize;

use crate::calibration::ThresholdTable;
use crate::error::{Error, Result};
use crate::quanttree::QuantTreeHistogram;

pub const DEFAULT_LAMBDA: f64 = 0.03;

pub(crate) fn validate_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("lambda must lie in (0, 1), got {lambda}")))
    }
}

/// EWMA bin frequencies and the derived statistic. Driven by bin indices
/// only, which is what makes the statistic independent of the data
/// distribution.
#[derive(Debug, Clone)]
pub struct EwmaBinStatistic {
    target: Vec<f64>,
    lambda: f64,
    z: Vec<f64>,
    t: u64,
    last: f64,
}

impl EwmaBinStatistic {
    pub fn new(target_probs: &[f64], lambda: f64) -> Result<Self> {
        validate_lambda(lambda)?;
        crate::quanttree::validate_probs(target_probs)?;
        Ok(EwmaBinStatistic {
            target: target_probs.to_vec(),
            lambda,
            z: target_probs.to_vec(),
            t: 0,
            last: 0.0,
        })
    }

    /// Folds one observation falling in `bin` and returns the new statistic.
    #[inline]
    pub fn update_bin(&mut self, bin: usize) -> f64 {
        let keep = 1.0 - self.lambda;
        let mut stat = 0.0;
        for (k, (z, &p)) in self.z.iter_mut().zip(&self.target).enumerate() {
            *z *= keep;
            if k == bin {
                *z += self.lambda;
            }
            let dev = *z - p;
            stat += dev * dev / p;
        }
        self.t += 1;
        self.last = stat;
        stat
    }

    pub fn statistic(&self) -> f64 {
        self.last
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn target_probs(&self) -> &[f64] {
        &self.target
    }
}

/// Result of feeding one sample to a detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Step {
    /// Samples processed by this detector, including this one.
    pub t: u64,
    pub bin: usize,
    pub statistic: f64,
    pub threshold: f64,
    pub detected: bool,
}

#[derive(Debug, Clone)]
pub struct QtEwmaDetector {
    hist: Arc<QuantTreeHistogram>,
    stat: EwmaBinStatistic,
    thresholds: Arc<ThresholdTable>,
    last_step: Option<Step>,
    detection: Option<Step>,
    updates_after_detection: u64,
}

impl QtEwmaDetector {
    pub fn new(
        hist: Arc<QuantTreeHistogram>,
        lambda: f64,
        thresholds: Arc<ThresholdTable>,
    ) -> Result<Self> {
        validate_lambda(lambda)?;
        thresholds.check_compatible(hist.bins(), lambda)?;
        let uniform = 1.0 / hist.bins() as f64;
        if hist.target_probs().iter().any(|p| (p - uniform).abs() > 1e-12) {
            return Err(Error::config(
                "threshold tables are calibrated for uniform bin probabilities; histogram is not uniform",
            ));
        }
        let stat = EwmaBinStatistic::new(hist.target_probs(), lambda)?;
        Ok(QtEwmaDetector {
            hist,
            stat,
            thresholds,
            last_step: None,
            detection: None,
            updates_after_detection: 0,
        })
    }

    /// Processes one sample. After a detection the detector is frozen: the
    /// detecting step is returned again and the state does not change.
    pub fn update(&mut self, x: &[f64]) -> Result<Step> {
        if let Some(step) = self.detection {
            self.updates_after_detection += 1;
            return Ok(step);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("sample has a non-finite coordinate"));
        }
        let bin = self.hist.locate(x)?;
        Ok(self.update_bin(bin))
    }

    /// Advances the detector with an already-located bin index.
    pub fn update_bin(&mut self, bin: usize) -> Step {
        if let Some(step) = self.detection {
            self.updates_after_detection += 1;
            return step;
        }
        let statistic = self.stat.update_bin(bin);
        let t = self.stat.t();
        let threshold = self.thresholds.threshold_at(t);
        let step = Step {
            t,
            bin,
            statistic,
            threshold,
            detected: statistic > threshold,
        };
        self.last_step = Some(step);
        if step.detected {
            self.detection = Some(step);
        }
        step
    }

    pub fn statistic(&self) -> f64 {
        self.stat.statistic()
    }

    pub fn t(&self) -> u64 {
        self.stat.t()
    }

    pub fn z(&self) -> &[f64] {
        self.stat.z()
    }

    pub fn lambda(&self) -> f64 {
        self.stat.lambda()
    }

    pub fn histogram(&self) -> &Arc<QuantTreeHistogram> {
        &self.hist
    }

    pub fn thresholds(&self) -> &Arc<ThresholdTable> {
        &self.thresholds
    }

    pub fn last_step(&self) -> Option<Step> {
        self.last_step
    }

    pub fn detection(&self) -> Option<Step> {
        self.detection
    }

    pub fn is_frozen(&self) -> bool {
        self.detection.is_some()
    }

    /// Calls to `update` that arrived after the detector froze.
    pub fn updates_after_detection(&self) -> u64 {
        self.updates_after_detection
    }
}

/// Writes per-step rows `t,bin,statistic,threshold,detected` as CSV.
pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        TraceWriter {
            inner: csv::Writer::from_writer(out),
        }
    }

    pub fn record(&mut self, step: &Step) -> std::io::Result<()> {
        self.inner.serialize(step).map_err(std::io::Error::other)
    }

    pub fn into_inner(self) -> std::io::Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| std::io::Error::other(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::ThresholdTable;
    use crate::quanttree::uniform_probs;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn flat_table(bins: usize, lambda: f64, h: f64) -> Arc<ThresholdTable> {
        Arc::new(ThresholdTable::from_thresholds(bins, lambda, 375.0, 256, vec![h; 10]))
    }

    fn hist_1d(bins: usize, seed: u64) -> Arc<QuantTreeHistogram> {
        let mut rng = rng_from_seed(seed);
        let train: Vec<[f64; 1]> = (0..256).map(|_| [rng.random::<f64>()]).collect();
        Arc::new(QuantTreeHistogram::build(&train, &uniform_probs(bins), seed).unwrap())
    }

    #[test]
    fn initial_state() {
        let det = QtEwmaDetector::new(hist_1d(16, 1), 0.03, flat_table(16, 0.03, 1.0)).unwrap();
        assert!(det.z().iter().all(|&z| z == 0.0625));
        assert_eq!(det.statistic(), 0.0);
        assert_eq!(det.t(), 0);
    }

    #[test]
    fn lambda_out_of_range() {
        for lambda in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(
                QtEwmaDetector::new(hist_1d(16, 1), lambda, flat_table(16, 0.03, 1.0)),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn table_mismatch_is_config_error() {
        let err = QtEwmaDetector::new(hist_1d(16, 1), 0.03, flat_table(32, 0.03, 1.0));
        assert!(matches!(err, Err(Error::Config(_))));
        let err = QtEwmaDetector::new(hist_1d(16, 1), 0.05, flat_table(16, 0.03, 1.0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn first_statistic_is_the_same_for_every_bin() {
        for bin in 0..16 {
            let mut s = EwmaBinStatistic::new(&uniform_probs(16), 0.03).unwrap();
            let t1 = s.update_bin(bin);
            assert!((t1 - 0.0135).abs() < 1e-12, "bin {bin}: {t1}");
        }
    }

    #[test]
    fn single_bin_stream_grows_and_detects() {
        let mut s = EwmaBinStatistic::new(&uniform_probs(16), 0.03).unwrap();
        let mut prev = 0.0;
        for _ in 0..300 {
            let t = s.update_bin(3);
            assert!(t > prev);
            prev = t;
        }
        // limit is Z = e_3, T = (1 - pi)^2/pi + (K - 1) pi = 15
        assert!(prev < 15.0 && prev > 14.0);

        let mut det = QtEwmaDetector::new(hist_1d(16, 2), 0.03, flat_table(16, 0.03, 0.5)).unwrap();
        let hit = (0..1000).map(|_| det.update_bin(3)).find(|s| s.detected).unwrap();
        assert!(hit.t < 100);
    }

    #[test]
    fn frozen_after_detection() {
        let mut det = QtEwmaDetector::new(hist_1d(16, 3), 0.03, flat_table(16, 0.03, 0.01)).unwrap();
        let first = det.update(&[0.5]).unwrap();
        assert!(first.detected);
        let z = det.z().to_vec();
        let again = det.update(&[0.9]).unwrap();
        assert_eq!(first, again);
        assert_eq!(det.z(), &z[..]);
        assert_eq!(det.updates_after_detection(), 1);
        assert!(det.is_frozen());
    }

    #[test]
    fn non_finite_sample_rejected() {
        let mut det = QtEwmaDetector::new(hist_1d(16, 3), 0.03, flat_table(16, 0.03, 1.0)).unwrap();
        assert!(matches!(det.update(&[f64::NAN]), Err(Error::Input(_))));
        assert!(matches!(det.update(&[0.1, 0.2]), Err(Error::Input(_))));
    }

    #[test]
    fn trace_rows() {
        let mut det = QtEwmaDetector::new(hist_1d(4, 3), 0.03, flat_table(4, 0.03, 1.0)).unwrap();
        let mut w = TraceWriter::new(Vec::new());
        for x in [0.1, 0.2, 0.9] {
            w.record(&det.update(&[x]).unwrap()).unwrap();
        }
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,bin,statistic,threshold,detected");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("3,"));
    }

    proptest! {
        #[test]
        fn conservation_and_bounds(bins in proptest::collection::vec(0usize..16, 1..400), lambda in 0.001f64..0.999) {
            let mut s = EwmaBinStatistic::new(&uniform_probs(16), lambda).unwrap();
            for b in bins {
                let t = s.update_bin(b);
                let sum: f64 = s.z().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-9);
                prop_assert!(s.z().iter().all(|&z| (0.0..=1.0).contains(&z)));
                prop_assert!(t >= 0.0);
            }
        }

        #[test]
        fn statistic_depends_only_on_bins(seed in any::<u64>()) {
            // two different histograms and data sets, same bin sequence
            let h1 = hist_1d(16, seed);
            let h2 = hist_1d(16, seed ^ 0xABCD);
            let mut d1 = QtEwmaDetector::new(h1, 0.03, flat_table(16, 0.03, 100.0)).unwrap();
            let mut d2 = QtEwmaDetector::new(h2, 0.03, flat_table(16, 0.03, 100.0)).unwrap();
            let mut rng = rng_from_seed(seed);
            for _ in 0..200 {
                let b = rng.random_range(0..16);
                prop_assert_eq!(d1.update_bin(b).statistic, d2.update_bin(b).statistic);
            }
        }
    }
}
