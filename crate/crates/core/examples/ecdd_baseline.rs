// The ECDD baseline: an EWMA chart on the error stream of an LDA
// classifier. Moving one class onto the other raises the error and is
// caught; a vertical move that keeps the error unchanged is not.

use std::sync::Arc;

use cdm_drift::calibration::calibrate_ecdd_limit;
use cdm_drift::datastreams::GaussianMixtureConfig;
use cdm_drift::ecdd::{cross_validated_error, Classifier, ClassifierKind, EcddMonitor, EcddState};
use cdm_drift::monitor::DriftMonitor;
use cdm_drift::rng::rng_from_seed;

fn first_alarm(classifier: &Arc<Classifier>, p0: f64, limit: f64, post_mean: [f64; 2], seed: u64) -> cdm_drift::Result<Option<u64>> {
    let scenario = Arc::new(GaussianMixtureConfig::two_class(2.0, post_mean, 200).build()?);
    let mut monitor = EcddMonitor::new(Arc::clone(classifier), EcddState::new(p0, 0.2, limit)?);
    for sample in scenario.stream(3000, seed) {
        if let Some(alarm) = monitor.observe(&sample)? {
            return Ok(Some(alarm.t));
        }
    }
    Ok(None)
}

pub fn run_example() -> cdm_drift::Result<(Option<u64>, Option<u64>)> {
    let mixture = GaussianMixtureConfig::two_class(2.0, [2.0, 0.0], 0).build()?.pre;
    let training = mixture.sample_per_class(256, &mut rng_from_seed(6));
    let p0 = cross_validated_error(ClassifierKind::Lda, &training, 5, 1)?;
    let limit = calibrate_ecdd_limit(p0, 0.2, 400.0, 1000, 2)?;
    println!("cross-validated error p0 = {p0:.3}, control limit L = {limit:.3}");
    let classifier = Arc::new(Classifier::fit(ClassifierKind::Lda, &training)?);

    let real = first_alarm(&classifier, p0, limit, [0.8, 0.0], 10)?;
    let r#virtual = first_alarm(&classifier, p0, limit, [2.0, 1.5], 10)?;
    println!("class 2 moved toward class 1: alarm at {real:?} (change at t=200)");
    println!("class 2 moved along the boundary: alarm at {virtual:?}");
    Ok((real, r#virtual))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()?;
    Ok(())
}
