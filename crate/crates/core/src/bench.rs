//! Replicated experiments: empirical ARL0, detection delay, rank
//! aggregation and classifier error rates.
//!
//! Every replicate `r` receives its own seed `derive_seed(seed, r)`, so
//! reports are identical whatever the execution order or thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::datastreams::{GaussianMixture, Sample};
use crate::ecdd::Classifier;
use crate::error::{Error, Result};
use crate::monitor::{Alarm, DriftMonitor};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Arl0,
    Delay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReplicateRecord {
    pub index: u64,
    pub t_star: Option<u64>,
    pub m_star: Option<u32>,
    pub tau: Option<u64>,
    /// Samples consumed before stopping.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub method: String,
    pub scenario: String,
    pub kind: ReportKind,
    pub replicates: usize,
    /// Empirical ARL0 or mean delay; absent when no replicate qualifies.
    pub estimate: Option<f64>,
    pub std_err: Option<f64>,
    /// Replicates entering the estimate.
    pub used: usize,
    pub false_alarms: usize,
    pub censored: usize,
    pub degenerate: bool,
    pub seed: u64,
    pub config_hash: String,
    #[serde(skip)]
    pub records: Vec<ReplicateRecord>,
}

impl ExperimentReport {
    /// Two-sided 95% normal confidence interval of the estimate.
    pub fn ci95(&self) -> Option<(f64, f64)> {
        let (m, se) = (self.estimate?, self.std_err?);
        Some((m - 1.96 * se, m + 1.96 * se))
    }

    pub fn labeled(mut self, method: &str, scenario: &str, config_hash: &str) -> Self {
        self.method = method.into();
        self.scenario = scenario.into();
        self.config_hash = config_hash.into();
        self
    }
}

fn mean_and_se(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

/// Feeds `stream` to `monitor` until the first alarm or `horizon` samples.
pub fn run_until_alarm<M, I>(monitor: &mut M, stream: I, horizon: u64) -> Result<(Option<Alarm>, u64)>
where
    M: DriftMonitor + ?Sized,
    I: IntoIterator<Item = Sample>,
{
    let mut consumed = 0;
    for sample in stream.into_iter().take(horizon as usize) {
        consumed += 1;
        if let Some(alarm) = monitor.observe(&sample)? {
            return Ok((Some(alarm), consumed));
        }
    }
    Ok((None, consumed))
}

fn run_replicates<MF, SF, M, S>(
    monitor_factory: &MF,
    stream_factory: &SF,
    replicates: usize,
    horizon: u64,
    tau: Option<u64>,
    seed: u64,
) -> Result<Vec<ReplicateRecord>>
where
    MF: Fn(u64) -> Result<M> + Sync,
    SF: Fn(u64) -> Result<S> + Sync,
    M: DriftMonitor,
    S: IntoIterator<Item = Sample>,
{
    (0..replicates as u64)
        .into_par_iter()
        .map(|index| {
            let wrap = |e: Error| Error::Replicate {
                index,
                source: Box::new(e),
            };
            let rs = derive_seed(seed, index);
            let mut monitor = monitor_factory(rs).map_err(wrap)?;
            let stream = stream_factory(rs).map_err(wrap)?;
            let (alarm, length) = run_until_alarm(&mut monitor, stream, horizon).map_err(wrap)?;
            Ok(ReplicateRecord {
                index,
                t_star: alarm.map(|a| a.t),
                m_star: alarm.and_then(|a| a.class),
                tau,
                length,
            })
        })
        .collect()
}

/// Empirical ARL0 on stationary streams. Runs without an alarm within
/// `horizon` enter the mean censored at the number of samples they consumed
/// and are counted in `censored`.
pub fn estimate_arl0<MF, SF, M, S>(
    monitor_factory: MF,
    stream_factory: SF,
    replicates: usize,
    horizon: u64,
    seed: u64,
) -> Result<ExperimentReport>
where
    MF: Fn(u64) -> Result<M> + Sync,
    SF: Fn(u64) -> Result<S> + Sync,
    M: DriftMonitor,
    S: IntoIterator<Item = Sample>,
{
    if replicates == 0 || horizon == 0 {
        return Err(Error::config("ARL0 estimation needs replicates and a horizon"));
    }
    let records = run_replicates(&monitor_factory, &stream_factory, replicates, horizon, None, seed)?;
    let times: Vec<f64> = records
        .iter()
        .map(|r| r.t_star.unwrap_or(r.length) as f64)
        .collect();
    let censored = records.iter().filter(|r| r.t_star.is_none()).count();
    let ms = mean_and_se(&times);
    Ok(ExperimentReport {
        method: String::new(),
        scenario: String::new(),
        kind: ReportKind::Arl0,
        replicates,
        estimate: ms.map(|m| m.0),
        std_err: ms.map(|m| m.1),
        used: records.len(),
        false_alarms: records.len() - censored,
        censored,
        degenerate: false,
        seed,
        config_hash: String::new(),
        records,
    })
}

/// Mean detection delay `t* - tau` over runs that alarm after `tau`; earlier
/// alarms are false alarms and runs that never alarm are censored, both
/// excluded from the mean.
pub fn estimate_delay<MF, SF, M, S>(
    monitor_factory: MF,
    stream_factory: SF,
    tau: u64,
    replicates: usize,
    seed: u64,
) -> Result<ExperimentReport>
where
    MF: Fn(u64) -> Result<M> + Sync,
    SF: Fn(u64) -> Result<S> + Sync,
    M: DriftMonitor,
    S: IntoIterator<Item = Sample>,
{
    if tau == 0 || replicates == 0 {
        return Err(Error::config("delay estimation needs tau > 0 and replicates"));
    }
    let records = run_replicates(&monitor_factory, &stream_factory, replicates, u64::MAX, Some(tau), seed)?;
    Ok(summarize_delay(records, tau, replicates, seed))
}

pub(crate) fn summarize_delay(records: Vec<ReplicateRecord>, tau: u64, replicates: usize, seed: u64) -> ExperimentReport {
    let delays: Vec<f64> = records
        .iter()
        .filter_map(|r| r.t_star.filter(|&t| t > tau).map(|t| (t - tau) as f64))
        .collect();
    let false_alarms = records
        .iter()
        .filter(|r| r.t_star.is_some_and(|t| t <= tau))
        .count();
    let censored = records.iter().filter(|r| r.t_star.is_none()).count();
    let ms = mean_and_se(&delays);
    ExperimentReport {
        method: String::new(),
        scenario: String::new(),
        kind: ReportKind::Delay,
        replicates,
        estimate: ms.map(|m| m.0),
        std_err: ms.map(|m| m.1),
        used: delays.len(),
        false_alarms,
        censored,
        degenerate: delays.is_empty(),
        seed,
        config_hash: String::new(),
        records,
    }
}

/// Monte Carlo misclassification rate of `classifier` on `samples` draws from `mixture`.
pub fn estimate_error_rate(classifier: &Classifier, mixture: &GaussianMixture, samples: usize, seed: u64) -> f64 {
    if samples == 0 {
        return 0.0;
    }
    let chunks = 64u64;
    let per = samples.div_ceil(chunks as usize);
    let wrong: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng_from_seed(derive_seed(seed, c));
            let start = c as usize * per;
            let n = per.min(samples.saturating_sub(start));
            (0..n)
                .filter(|_| {
                    let s = mixture.sample(&mut rng);
                    Some(classifier.predict(&s.x)) != s.label
                })
                .count()
        })
        .sum();
    wrong as f64 / samples as f64
}

/// Average rank of each method (rows) over scenarios (columns); rank 1 is
/// the smallest delay and ties share the mean of their ranks.
pub fn average_ranks(delays: &[Vec<f64>]) -> Result<Vec<f64>> {
    let methods = delays.len();
    if methods == 0 {
        return Err(Error::input("no methods to rank"));
    }
    let scenarios = delays[0].len();
    if scenarios == 0 {
        return Err(Error::input("no scenarios to rank"));
    }
    for (m, row) in delays.iter().enumerate() {
        if row.len() != scenarios {
            return Err(Error::input(format!(
                "method {m} has {} delays, expected {scenarios}",
                row.len()
            )));
        }
        if let Some(s) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("missing delay for method {m}, scenario {s}")));
        }
    }
    let mut totals = vec![0.0; methods];
    for s in 0..scenarios {
        let mut order: Vec<usize> = (0..methods).collect();
        order.sort_by(|&a, &b| delays[a][s].total_cmp(&delays[b][s]));
        let mut i = 0;
        while i < methods {
            let mut j = i;
            while j + 1 < methods && delays[order[j + 1]][s] == delays[order[i]][s] {
                j += 1;
            }
            // positions i..=j share ranks i+1..=j+1
            let rank = (i + j) as f64 / 2.0 + 1.0;
            for &m in &order[i..=j] {
                totals[m] += rank;
            }
            i = j + 1;
        }
    }
    Ok(totals.into_iter().map(|t| t / scenarios as f64).collect())
}

/// Seed-stable coin flips used to thin labels in partially labeled streams.
pub fn drop_labels<I>(stream: I, keep_fraction: f64, seed: u64) -> impl Iterator<Item = Sample>
where
    I: IntoIterator<Item = Sample>,
{
    let mut rng = rng_from_seed(seed);
    stream.into_iter().map(move |mut s| {
        if rng.random::<f64>() >= keep_fraction {
            s.label = None;
        }
        s
    })
}
