// Monitor a single 2-D stream with QT-EWMA: the mean moves after 300
// samples and every step is written to a CSV trace.

use std::fs::File;
use std::io::BufWriter;
use std::sync::Arc;

use cdm_drift::calibration::{calibrate_thresholds, CalibrationConfig};
use cdm_drift::datastreams::GaussianMixtureConfig;
use cdm_drift::qt_ewma::{QtEwmaDetector, TraceWriter};
use cdm_drift::quanttree::{uniform_probs, QuantTreeHistogram};
use cdm_drift::rng::rng_from_seed;

pub fn run_example() -> cdm_drift::Result<Option<u64>> {
    // small desk calibration: target ARL0 200
    let cfg = CalibrationConfig {
        t_max: 200,
        replicates: 6000,
        survivor_floor: 500,
        seed: 5,
        ..CalibrationConfig::new(256, 16, 0.03, 200.0)
    };
    let table = Arc::new(calibrate_thresholds(&cfg)?);

    let pre = GaussianMixtureConfig::stationary(vec![vec![0.0, 0.0]], None).build()?.pre;
    let post = GaussianMixtureConfig::stationary(vec![vec![1.0, 0.0]], None).build()?.pre;
    let mut rng = rng_from_seed(8);
    let training: Vec<Vec<f64>> = (0..256).map(|_| pre.sample(&mut rng).x).collect();
    let hist = Arc::new(QuantTreeHistogram::build(&training, &uniform_probs(16), 11)?);
    let mut detector = QtEwmaDetector::new(hist, 0.03, table)?;

    let path = std::env::temp_dir().join("cdm_example_trace.csv");
    let file = File::create(&path).map_err(|e| cdm_drift::Error::Io { path: path.clone(), source: e })?;
    let mut trace = TraceWriter::new(BufWriter::new(file));
    for t in 1..=2000 {
        let x = if t <= 300 { pre.sample(&mut rng).x } else { post.sample(&mut rng).x };
        let step = detector.update(&x)?;
        trace
            .record(&step)
            .map_err(|e| cdm_drift::Error::Io { path: path.clone(), source: e })?;
        if step.detected {
            println!("alarm at t={} (T={:.3} > h={:.3})", step.t, step.statistic, step.threshold);
            break;
        }
    }
    trace.into_inner().map_err(|e| cdm_drift::Error::Io { path: path.clone(), source: e })?;
    println!("trace written to {}", path.display());
    Ok(detector.detection().map(|s| s.t))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()?;
    Ok(())
}
