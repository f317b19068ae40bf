// Synthetic labeled streams: a two-class Gaussian drift scenario, its sKL
// magnitude, a CSV round trip, and class-balanced subsampling.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use cdm_drift::datastreams::{
    generate_stream, read_csv_stream, skl_gaussian, subsample_without_replacement, write_csv, CsvSchema,
    GaussianMixtureConfig,
};

pub fn run_example() -> cdm_drift::Result<f64> {
    let config = GaussianMixtureConfig::two_class(2.0, [2.0, 1.0], 160);
    let stream = generate_stream(&config, 1160, 42)?;
    println!("{} samples, change after t={:?}, classes {:?}", stream.len(), stream.meta.tau, stream.labels());

    let eye = DMatrix::identity(2, 2);
    let skl = skl_gaussian(&[2.0, 0.0], &eye, &[2.0, 1.0], &eye)?;
    println!("sKL of the class-2 shift: {skl:.3}");

    let path = std::env::temp_dir().join("cdm_example_stream.csv");
    write_csv(&stream, &path)?;
    let back = read_csv_stream(&path, &CsvSchema::default())?;
    assert_eq!(back.len(), stream.len());
    println!("wrote and re-read {}", path.display());

    let per_class: BTreeMap<u32, usize> = [(1, 100), (2, 100)].into();
    let (train, rest) = subsample_without_replacement(&back.samples, &per_class, 7)?;
    println!("training set {} samples, {} left for streaming", train.len(), rest.len());
    Ok(skl)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run_example()?;
    Ok(())
}
