// Build a QuantTree histogram on 2-D Gaussian data, check that fresh data
// spreads evenly over the bins, and round-trip the histogram through TOML.

use cdm_drift::datastreams::GaussianMixtureConfig;
use cdm_drift::quanttree::{uniform_probs, QuantTreeHistogram};
use cdm_drift::rng::rng_from_seed;

pub fn run_example() -> cdm_drift::Result<Vec<usize>> {
    let mixture = GaussianMixtureConfig::stationary(vec![vec![0.0, 0.0]], None).build()?.pre;
    let mut rng = rng_from_seed(1);
    let training: Vec<Vec<f64>> = (0..256).map(|_| mixture.sample(&mut rng).x).collect();

    let hist = QuantTreeHistogram::build(&training, &uniform_probs(16), 7)?;
    println!("training points per bin: {:?}", hist.allocations());
    for (k, split) in hist.splits().iter().enumerate().take(4) {
        println!("split {k}: x[{}] {:?} {:.3}", split.dim, split.direction, split.threshold);
    }

    let fresh: Vec<Vec<f64>> = (0..16_000).map(|_| mixture.sample(&mut rng).x).collect();
    let counts = hist.bin_counts(&fresh)?;
    println!("fresh points per bin (expect ~1000): {counts:?}");

    let path = std::env::temp_dir().join("cdm_example_histogram.toml");
    hist.save(&path)?;
    let back = QuantTreeHistogram::load(&path)?;
    assert_eq!(back.locate(&[0.3, -0.2])?, hist.locate(&[0.3, -0.2])?);
    println!("saved and reloaded {}", path.display());
    Ok(counts)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()?;
    Ok(())
}
