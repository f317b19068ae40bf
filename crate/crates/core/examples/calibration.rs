// Calibrate QT-EWMA thresholds by Monte Carlo, save the table, and check on
// held-out trajectories that each step's false-alarm rate stays near alpha.

use cdm_drift::calibration::{calibrate_thresholds, load_table, replay_exceedance, CalibrationConfig};

pub fn run_example() -> cdm_drift::Result<f64> {
    let cfg = CalibrationConfig {
        t_max: 150,
        replicates: 8000,
        survivor_floor: 500,
        seed: 1,
        ..CalibrationConfig::new(128, 8, 0.05, 100.0)
    };
    let table = calibrate_thresholds(&cfg)?;
    for t in [1u64, 2, 5, 20, 50, 150, 10_000] {
        println!("h_{t} = {:.4}", table.threshold_at(t));
    }
    let path = std::env::temp_dir().join("cdm_example_table.toml");
    table.save(&path)?;
    let table = load_table(&path)?;

    let replay = replay_exceedance(&table, 8000, 150, 99)?;
    let (risk, hit) = replay[20..]
        .iter()
        .fold((0, 0), |(r, e), s| (r + s.at_risk, e + s.exceeded));
    let rate = hit as f64 / risk as f64;
    println!("held-out exceedance rate after t=20: {rate:.4} (alpha = {:.4})", table.alpha());
    Ok(rate)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()?;
    Ok(())
}
