//! QuantTree histograms.
//!
//! A QuantTree partitions `R^d` into `K` bins with a sequence of `K - 1`
//! axis-aligned halfspace splits placed at order statistics of the training
//! set. Bin `k` is the set of points satisfying split `k` but none of the
//! earlier ones; points that satisfy no split fall in the residual bin `K - 1`.
//! Because every split sits between two training points, each bin holds a
//! fixed number of training points, and any statistic computed from bin
//! indices has a distribution that does not depend on the data distribution.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, RNG_NAME};

pub const HISTOGRAM_FORMAT_VERSION: u32 = 1;

/// Default number of bins per histogram.
pub const DEFAULT_BINS: usize = 16;

const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `x[dim] <= threshold`
    Lower,
    /// `x[dim] > threshold`
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub dim: usize,
    pub threshold: f64,
    pub direction: Direction,
}

impl Split {
    #[inline]
    pub fn contains(&self, x: &[f64]) -> bool {
        let v = x[self.dim];
        match self.direction {
            Direction::Lower => v <= self.threshold,
            Direction::Upper => v > self.threshold,
        }
    }
}

/// Uniform target probabilities `1/K`.
pub fn uniform_probs(bins: usize) -> Vec<f64> {
    vec![1.0 / bins as f64; bins]
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantTreeHistogram {
    splits: Vec<Split>,
    target_probs: Vec<f64>,
    dim: usize,
    train_size: usize,
    seed: u64,
}

impl QuantTreeHistogram {
    /// Builds a histogram on `training` (N rows of length d).
    pub fn build<R: AsRef<[f64]>>(training: &[R], target_probs: &[f64], seed: u64) -> Result<Self> {
        Self::build_with_assignment(training, target_probs, seed).map(|(h, _)| h)
    }

    /// Like [`build`](Self::build), also returning the bin each training row was assigned to.
    pub fn build_with_assignment<R: AsRef<[f64]>>(
        training: &[R],
        target_probs: &[f64],
        seed: u64,
    ) -> Result<(Self, Vec<usize>)> {
        validate_probs(target_probs)?;
        let bins = target_probs.len();
        let n = training.len();
        if n < bins {
            return Err(Error::config(format!(
                "QuantTree needs at least K={bins} training points, got {n}"
            )));
        }
        let dim = training[0].as_ref().len();
        if dim == 0 {
            return Err(Error::input("training points must have at least one coordinate"));
        }
        for (i, row) in training.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::input(format!(
                    "training row {i} has {} coordinates, expected {dim}",
                    row.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::input(format!("training row {i} has a non-finite value")));
            }
        }
        let alloc = allocations(n, target_probs)?;

        let mut rng = rng_from_seed(seed);
        let mut assignment = vec![bins - 1; n];
        let mut remaining: Vec<usize> = (0..n).collect();
        let mut splits = Vec::with_capacity(bins - 1);
        for (k, &take) in alloc.iter().enumerate().take(bins - 1) {
            let split_dim = rng.random_range(0..dim);
            let direction = if rng.random_bool(0.5) {
                Direction::Lower
            } else {
                Direction::Upper
            };
            remaining.sort_unstable_by(|&a, &b| {
                training[a].as_ref()[split_dim]
                    .total_cmp(&training[b].as_ref()[split_dim])
                    .then(a.cmp(&b))
            });
            let value = |i: usize| training[remaining[i]].as_ref()[split_dim];
            let rem = remaining.len();
            // `take < rem` is guaranteed by the allocation, so both order statistics exist.
            let (below, above) = match direction {
                Direction::Lower => (value(take - 1), value(take)),
                Direction::Upper => (value(rem - take - 1), value(rem - take)),
            };
            let split = Split {
                dim: split_dim,
                threshold: midpoint(below, above),
                direction,
            };
            remaining.retain(|&i| {
                if split.contains(training[i].as_ref()) {
                    assignment[i] = k;
                    false
                } else {
                    true
                }
            });
            splits.push(split);
        }
        let hist = QuantTreeHistogram {
            splits,
            target_probs: target_probs.to_vec(),
            dim,
            train_size: n,
            seed,
        };
        Ok((hist, assignment))
    }

    pub fn bins(&self) -> usize {
        self.target_probs.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn train_size(&self) -> usize {
        self.train_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn target_probs(&self) -> &[f64] {
        &self.target_probs
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    /// Bin index of `x`; walks the splits in construction order.
    pub fn locate(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.dim {
            return Err(Error::input(format!(
                "point has {} coordinates, histogram expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(self.locate_unchecked(x))
    }

    /// [`locate`](Self::locate) without the dimension check.
    #[inline]
    pub fn locate_unchecked(&self, x: &[f64]) -> usize {
        self.splits
            .iter()
            .position(|s| s.contains(x))
            .unwrap_or(self.splits.len())
    }

    pub fn bin_counts<R: AsRef<[f64]>>(&self, data: &[R]) -> Result<Vec<usize>> {
        let mut counts = vec![0; self.bins()];
        for row in data {
            counts[self.locate(row.as_ref())?] += 1;
        }
        Ok(counts)
    }

    /// Number of training points each bin received at construction.
    pub fn allocations(&self) -> Vec<usize> {
        allocations(self.train_size, &self.target_probs).expect("validated at construction")
    }

    pub fn to_record(&self) -> HistogramRecord {
        HistogramRecord {
            format_version: HISTOGRAM_FORMAT_VERSION,
            rng: RNG_NAME.to_string(),
            d: self.dim,
            k: self.bins(),
            n: self.train_size,
            seed: self.seed,
            target_probs: self.target_probs.clone(),
            splits: self.splits.clone(),
        }
    }

    pub fn from_record(rec: HistogramRecord) -> Result<Self> {
        if rec.format_version != HISTOGRAM_FORMAT_VERSION {
            return Err(Error::config(format!(
                "histogram format_version {} is not supported (expected {HISTOGRAM_FORMAT_VERSION})",
                rec.format_version
            )));
        }
        validate_probs(&rec.target_probs)?;
        if rec.k != rec.target_probs.len() || rec.splits.len() + 1 != rec.k {
            return Err(Error::config(format!(
                "histogram record declares K={} but has {} probabilities and {} splits",
                rec.k,
                rec.target_probs.len(),
                rec.splits.len()
            )));
        }
        if let Some(s) = rec.splits.iter().find(|s| s.dim >= rec.d) {
            return Err(Error::config(format!(
                "split on dimension {} exceeds d={}",
                s.dim, rec.d
            )));
        }
        Ok(QuantTreeHistogram {
            splits: rec.splits,
            target_probs: rec.target_probs,
            dim: rec.d,
            train_size: rec.n,
            seed: rec.seed,
        })
    }

    pub fn to_text(&self) -> String {
        toml::to_string(&self.to_record()).expect("histogram record serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rec: HistogramRecord =
            toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        Self::from_record(rec)
    }
}

/// Serialized form of a histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRecord {
    pub format_version: u32,
    pub rng: String,
    pub d: usize,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
    pub target_probs: Vec<f64>,
    pub splits: Vec<Split>,
}

/// Free-function form of [`QuantTreeHistogram::build`].
pub fn build_quanttree<R: AsRef<[f64]>>(
    training: &[R],
    target_probs: &[f64],
    seed: u64,
) -> Result<QuantTreeHistogram> {
    QuantTreeHistogram::build(training, target_probs, seed)
}

pub(crate) fn validate_probs(probs: &[f64]) -> Result<()> {
    if probs.len() < 2 {
        return Err(Error::config(format!(
            "a histogram needs at least 2 bins, got {}",
            probs.len()
        )));
    }
    if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
        return Err(Error::config(format!("bin probability {p} is not positive")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::config(format!("bin probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

/// Deterministic split of `n` training points over the bins: bin `k` takes
/// `round(n_remaining * pi_k / sum_{j>=k} pi_j)` and the last bin the rest.
pub fn allocations(n: usize, probs: &[f64]) -> Result<Vec<usize>> {
    let bins = probs.len();
    let mut out = Vec::with_capacity(bins);
    let mut rem = n;
    let mut tail: f64 = probs.iter().sum();
    for (k, &p) in probs.iter().enumerate() {
        let take = if k + 1 == bins {
            rem
        } else {
            ((rem as f64 * p / tail).round() as usize).min(rem)
        };
        // every bin, including the residual one, must receive a point
        let must_leave = if k + 1 == bins { 0 } else { 1 };
        if take == 0 || take + must_leave > rem {
            return Err(Error::config(format!(
                "cannot allocate {n} training points over {bins} bins: bin {k} would be empty"
            )));
        }
        out.push(take);
        rem -= take;
        tail -= p;
    }
    Ok(out)
}

fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    // adjacent floats: the midpoint may round onto `b`, which would move `b` across the split
    if m >= b {
        a
    } else {
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn uniform_allocation_is_exact() {
        assert_eq!(allocations(256, &uniform_probs(16)).unwrap(), vec![16; 16]);
        let data = gaussian_rows(256, 3, 1);
        let h = QuantTreeHistogram::build(&data, &uniform_probs(16), 5).unwrap();
        assert_eq!(h.splits().len(), 15);
        assert_eq!(h.bin_counts(&data).unwrap(), vec![16; 16]);
    }

    #[test]
    fn non_uniform_allocation() {
        let probs = [0.5, 0.25, 0.25];
        assert_eq!(allocations(100, &probs).unwrap(), vec![50, 25, 25]);
        let data = gaussian_rows(100, 2, 2);
        let h = QuantTreeHistogram::build(&data, &probs, 9).unwrap();
        assert_eq!(h.bin_counts(&data).unwrap(), vec![50, 25, 25]);
    }

    fn seed_with_first_direction(dir: Direction) -> u64 {
        (0..u64::MAX)
            .find(|&s| {
                let mut rng = rng_from_seed(s);
                let _dim: usize = rng.random_range(0..1);
                let lower = rng.random_bool(0.5);
                (dir == Direction::Lower) == lower
            })
            .unwrap()
    }

    #[test]
    fn one_dimensional_hand_trace() {
        let data = vec![[1.0], [2.0], [3.0], [4.0]];
        let seed = seed_with_first_direction(Direction::Lower);
        let h = QuantTreeHistogram::build(&data, &[0.5, 0.5], seed).unwrap();
        assert_eq!(
            h.splits(),
            &[Split {
                dim: 0,
                threshold: 2.5,
                direction: Direction::Lower
            }]
        );
        assert_eq!(h.locate(&[1.5]).unwrap(), 0);
        assert_eq!(h.locate(&[10.0]).unwrap(), 1);
        assert_eq!(h.bin_counts(&data).unwrap(), vec![2, 2]);

        // upper direction takes the largest points instead
        let seed = seed_with_first_direction(Direction::Upper);
        let h = QuantTreeHistogram::build(&data, &[0.5, 0.5], seed).unwrap();
        assert_eq!(h.splits()[0].threshold, 2.5);
        assert_eq!(h.locate(&[3.0]).unwrap(), 0);
        assert_eq!(h.locate(&[1.0]).unwrap(), 1);
    }

    #[test]
    fn construction_assignment_matches_locate() {
        let data = gaussian_rows(300, 4, 3);
        let (h, assign) =
            QuantTreeHistogram::build_with_assignment(&data, &uniform_probs(16), 17).unwrap();
        for (row, bin) in data.iter().zip(&assign) {
            assert_eq!(h.locate(row).unwrap(), *bin);
        }
    }

    #[test]
    fn construction_errors() {
        let data = gaussian_rows(10, 2, 4);
        assert!(matches!(
            QuantTreeHistogram::build(&data, &uniform_probs(16), 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            QuantTreeHistogram::build(&data, &[0.5, 0.6], 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            QuantTreeHistogram::build(&data, &[1.0, 0.0], 0),
            Err(Error::Config(_))
        ));
        let mut bad = data.clone();
        bad[3][1] = f64::NAN;
        assert!(matches!(
            QuantTreeHistogram::build(&bad, &[0.5, 0.5], 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn locate_rejects_wrong_dimension() {
        let data = gaussian_rows(32, 2, 5);
        let h = QuantTreeHistogram::build(&data, &uniform_probs(4), 0).unwrap();
        assert!(matches!(h.locate(&[0.0]), Err(Error::Input(_))));
        assert_eq!(h.bin_counts::<Vec<f64>>(&[]).unwrap(), vec![0; 4]);
    }

    #[test]
    fn duplicate_values_still_partition() {
        let data: Vec<[f64; 1]> = (0..64).map(|i| [(i / 8) as f64]).collect();
        let h = QuantTreeHistogram::build(&data, &uniform_probs(4), 3).unwrap();
        let counts = h.bin_counts(&data).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 64);
    }

    #[test]
    fn fresh_samples_follow_target_probs() {
        let train = gaussian_rows(4096, 2, 6);
        let h = QuantTreeHistogram::build(&train, &uniform_probs(16), 1).unwrap();
        let test = gaussian_rows(100_000, 2, 7);
        let counts = h.bin_counts(&test).unwrap();
        // With N = 4096 training points the true bin mass is itself random
        // around 1/16 (sd ~ 0.0038); the tolerance covers both sources.
        let n = test.len() as f64;
        for c in counts {
            let p = c as f64 / n;
            let sd_sampling = (0.0625 * 0.9375 / n).sqrt();
            let sd_training = (0.0625f64 * 0.9375 / 4097.0).sqrt();
            assert!(
                (p - 0.0625).abs() < 3.0 * (sd_sampling + sd_training),
                "bin frequency {p}"
            );
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let data = gaussian_rows(256, 3, 8);
        let h = QuantTreeHistogram::build(&data, &uniform_probs(16), 21).unwrap();
        let text = h.to_text();
        let back = QuantTreeHistogram::from_record(toml::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn record_version_is_checked() {
        let data = gaussian_rows(64, 1, 8);
        let mut rec = QuantTreeHistogram::build(&data, &uniform_probs(4), 1)
            .unwrap()
            .to_record();
        rec.format_version = 99;
        assert!(QuantTreeHistogram::from_record(rec).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn every_point_lands_in_one_bin(seed in any::<u64>(), x in -50.0f64..50.0, y in -50.0f64..50.0) {
            let data = gaussian_rows(128, 2, seed);
            let h = QuantTreeHistogram::build(&data, &uniform_probs(8), seed).unwrap();
            let hits = (0..h.splits().len()).filter(|&k| {
                h.splits()[k].contains(&[x, y]) && !h.splits()[..k].iter().any(|s| s.contains(&[x, y]))
            }).count();
            let bin = h.locate(&[x, y]).unwrap();
            prop_assert!(bin < 8);
            prop_assert_eq!(hits, usize::from(bin < 7));
        }

        #[test]
        fn affine_maps_preserve_bin_sequences(seed in any::<u64>(), a in 0.1f64..5.0, b in 0.1f64..5.0, shift in -3.0f64..3.0) {
            let train = gaussian_rows(160, 2, seed);
            let test = gaussian_rows(200, 2, seed.wrapping_add(1));
            let warp = |r: &Vec<f64>| -> Vec<f64> { vec![r[0] * a + shift, r[1] * b - shift] };
            let train2: Vec<_> = train.iter().map(warp).collect();
            let test2: Vec<_> = test.iter().map(warp).collect();
            let h1 = QuantTreeHistogram::build(&train, &uniform_probs(16), seed).unwrap();
            let h2 = QuantTreeHistogram::build(&train2, &uniform_probs(16), seed).unwrap();
            for (x, y) in test.iter().zip(&test2) {
                prop_assert_eq!(h1.locate(x).unwrap(), h2.locate(y).unwrap());
            }
        }

        // Nonlinear increasing maps move the midpoints, so only points that
        // are not strictly between two bracketing order statistics keep their
        // bin; the training points themselves always do.
        #[test]
        fn monotone_maps_preserve_training_assignment(seed in any::<u64>()) {
            let train = gaussian_rows(160, 3, seed);
            let warp = |r: &Vec<f64>| -> Vec<f64> { vec![r[0] * 2.0 - 1.0, r[1].exp(), r[2].powi(3) + r[2]] };
            let train2: Vec<_> = train.iter().map(warp).collect();
            let (h1, a1) = QuantTreeHistogram::build_with_assignment(&train, &uniform_probs(16), seed).unwrap();
            let (h2, a2) = QuantTreeHistogram::build_with_assignment(&train2, &uniform_probs(16), seed).unwrap();
            prop_assert_eq!(&a1, &a2);
            for (x, y) in train.iter().zip(&train2) {
                prop_assert_eq!(h1.locate(x).unwrap(), h2.locate(y).unwrap());
            }
        }

        #[test]
        fn construction_is_deterministic(seed in any::<u64>()) {
            let data = gaussian_rows(64, 2, seed);
            let a = QuantTreeHistogram::build(&data, &uniform_probs(8), seed).unwrap();
            let b = QuantTreeHistogram::build(&data, &uniform_probs(8), seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
