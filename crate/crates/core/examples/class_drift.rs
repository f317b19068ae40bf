// Class Distribution Monitoring on three Gaussian classes where only the
// second class moves: the alarm names the class that changed.

use std::sync::Arc;

use cdm_drift::calibration::{calibrate_thresholds, CalibrationConfig};
use cdm_drift::cdm::{CdmConfig, CdmMonitor, Decision};
use cdm_drift::datastreams::GaussianMixtureConfig;
use cdm_drift::monitor::{DetectionReport, DriftMonitor};
use cdm_drift::rng::rng_from_seed;

pub fn run_example() -> cdm_drift::Result<DetectionReport> {
    let cfg = CalibrationConfig {
        t_max: 200,
        replicates: 6000,
        survivor_floor: 500,
        seed: 2,
        ..CalibrationConfig::new(128, 16, 0.03, 500.0)
    };
    let table = Arc::new(calibrate_thresholds(&cfg)?);

    let mut scenario = GaussianMixtureConfig::stationary(vec![vec![0.0, 0.0], vec![3.0, 0.0], vec![0.0, 3.0]], None);
    scenario.post_means = Some(vec![vec![0.0, 0.0], vec![3.0, 1.5], vec![0.0, 3.0]]);
    scenario.tau = 300;
    let scenario = Arc::new(scenario.build()?);

    let mut rng = rng_from_seed(4);
    let training = scenario.pre.sample_per_class(128, &mut rng);
    let mut cdm = CdmMonitor::fit(&training, table, &CdmConfig { seed: 9, ..CdmConfig::default() })?;

    for sample in scenario.stream(3000, 8) {
        if let Decision::Drift { t, class } = cdm.process_sample(&sample)? {
            println!("drift detected at t={t} in class {class} (change at t=300)");
            break;
        }
    }
    let report = cdm.report();
    println!("samples per class: {:?}", report.per_class_t);
    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
    Ok(report)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()?;
    Ok(())
}
