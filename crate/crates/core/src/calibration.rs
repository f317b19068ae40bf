//! Monte Carlo threshold calibration.
//!
//! QT-EWMA thresholds are chosen so that, on stationary data, the
//! probability of a first alarm at time `t` given no alarm before `t` is the
//! same `alpha = 1 / ARL0` at every step. Since the statistic depends only on
//! bin indices, trajectories are simulated on one-dimensional uniform data:
//! each replicate builds its own QuantTree on `N` fresh points and streams
//! fresh points through it. At each step the threshold is the empirical
//! `(1 - alpha)` quantile of the statistic over the trajectories that have
//! not yet exceeded a threshold, after which the exceeding ones are dropped.
//!
//! Past `t_max` the last threshold is reused. Survivors at late steps are
//! increasingly those whose histograms happen to fit well, so their hazard
//! under a fixed threshold keeps drifting down and the last per-step quantile
//! would be conservative for the rest of the stream. The last entry is
//! therefore fitted on the survivors themselves: they are run for another
//! `4 * ARL0` steps and the constant threshold is chosen so that first
//! exceedances per step at risk equal `alpha`.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecdd::EcddState;
use crate::error::{Error, Result};
use crate::qt_ewma::{validate_lambda, EwmaBinStatistic};
use crate::quanttree::{uniform_probs, QuantTreeHistogram};
use crate::rng::{derive_seed, rng_from_seed, StreamRng, RNG_NAME};

pub const TABLE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_T_MAX: usize = 500;
pub const DEFAULT_REPLICATES: usize = 100_000;
pub const DEFAULT_SURVIVOR_FLOOR: usize = 1000;
pub const DEFAULT_ARL0: f64 = 375.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailRule {
    /// `h_t = h_{t_max}` for `t > t_max`.
    ConstantLast,
}

/// Calibrated thresholds `h_1..h_{t_max}` plus the metadata of the
/// simulation that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub format_version: u32,
    pub rng: String,
    pub bins: usize,
    pub lambda: f64,
    pub arl0: f64,
    pub train_size: usize,
    pub t_max: usize,
    pub replicates: usize,
    pub seed: u64,
    pub tail_rule: TailRule,
    pub thresholds: Vec<f64>,
}

impl ThresholdTable {
    /// Table with explicit thresholds; `replicates` and `seed` are recorded as 0.
    pub fn from_thresholds(
        bins: usize,
        lambda: f64,
        arl0: f64,
        train_size: usize,
        thresholds: Vec<f64>,
    ) -> Self {
        ThresholdTable {
            format_version: TABLE_FORMAT_VERSION,
            rng: RNG_NAME.to_string(),
            bins,
            lambda,
            arl0,
            train_size,
            t_max: thresholds.len(),
            replicates: 0,
            seed: 0,
            tail_rule: TailRule::ConstantLast,
            thresholds,
        }
    }

    /// Threshold for the `t`-th sample (1-based); the tail rule applies past `t_max`.
    #[inline]
    pub fn threshold_at(&self, t: u64) -> f64 {
        let idx = (t.max(1) as usize).min(self.thresholds.len()) - 1;
        self.thresholds[idx]
    }

    pub fn alpha(&self) -> f64 {
        1.0 / self.arl0
    }

    pub fn check_compatible(&self, bins: usize, lambda: f64) -> Result<()> {
        if self.bins != bins {
            return Err(Error::config(format!(
                "threshold table was calibrated for K={} bins, detector uses K={bins}",
                self.bins
            )));
        }
        if (self.lambda - lambda).abs() > 1e-12 {
            return Err(Error::config(format!(
                "threshold table was calibrated for lambda={}, detector uses lambda={lambda}",
                self.lambda
            )));
        }
        Ok(())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.format_version != TABLE_FORMAT_VERSION {
            return Err(format!(
                "unsupported format_version {} (expected {TABLE_FORMAT_VERSION})",
                self.format_version
            ));
        }
        if self.thresholds.is_empty() || self.thresholds.len() != self.t_max {
            return Err(format!(
                "t_max = {} but {} thresholds are stored",
                self.t_max,
                self.thresholds.len()
            ));
        }
        if self.thresholds.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err("thresholds must be finite and positive".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("threshold table serializes")
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let table: ThresholdTable =
            toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        table.validate().map_err(|m| Error::parse(origin, m))?;
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

pub fn save_table(table: &ThresholdTable, path: impl AsRef<Path>) -> Result<()> {
    table.save(path)
}

pub fn load_table(path: impl AsRef<Path>) -> Result<ThresholdTable> {
    ThresholdTable::load(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub train_size: usize,
    pub bins: usize,
    pub lambda: f64,
    pub arl0: f64,
    pub t_max: usize,
    pub replicates: usize,
    pub seed: u64,
    pub survivor_floor: usize,
}

impl CalibrationConfig {
    pub fn new(train_size: usize, bins: usize, lambda: f64, arl0: f64) -> Self {
        CalibrationConfig {
            train_size,
            bins,
            lambda,
            arl0,
            t_max: DEFAULT_T_MAX,
            replicates: DEFAULT_REPLICATES,
            seed: 0,
            survivor_floor: DEFAULT_SURVIVOR_FLOOR,
        }
    }

    fn validate(&self) -> Result<()> {
        validate_lambda(self.lambda)?;
        if self.bins < 2 || self.train_size < self.bins {
            return Err(Error::config(format!(
                "need 2 <= K <= N, got K={} N={}",
                self.bins, self.train_size
            )));
        }
        if !(self.arl0 >= 2.0) {
            return Err(Error::config(format!("target ARL0 must be >= 2, got {}", self.arl0)));
        }
        if self.t_max == 0 {
            return Err(Error::config("t_max must be positive"));
        }
        if self.replicates == 0 || self.replicates < self.survivor_floor {
            return Err(Error::config(format!(
                "replicates ({}) must be at least the survivor floor ({})",
                self.replicates, self.survivor_floor
            )));
        }
        Ok(())
    }
}

/// One stationary trajectory: its own histogram, EWMA state and generator.
struct Trajectory {
    hist: QuantTreeHistogram,
    stat: EwmaBinStatistic,
    rng: StreamRng,
}

impl Trajectory {
    fn new(train_size: usize, bins: usize, lambda: f64, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let train: Vec<[f64; 1]> = (0..train_size).map(|_| [rng.random::<f64>()]).collect();
        let hist = QuantTreeHistogram::build(&train, &uniform_probs(bins), rng.random())?;
        let stat = EwmaBinStatistic::new(hist.target_probs(), lambda)?;
        Ok(Trajectory { hist, stat, rng })
    }

    #[inline]
    fn step(&mut self) -> f64 {
        let u: f64 = self.rng.random();
        let bin = self.hist.locate_unchecked(&[u]);
        self.stat.update_bin(bin)
    }
}

/// Statistic trajectory `T_1..T_horizon` of QT-EWMA on stationary 1-D uniform data.
pub fn simulate_stationary_trajectory(
    train_size: usize,
    bins: usize,
    lambda: f64,
    horizon: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if horizon == 0 {
        return Err(Error::config("horizon must be at least 1"));
    }
    let mut traj = Trajectory::new(train_size, bins, lambda, seed)?;
    Ok((0..horizon).map(|_| traj.step()).collect())
}

fn spawn_trajectories(cfg: &CalibrationConfig, count: usize, seed: u64) -> Result<Vec<Trajectory>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| Trajectory::new(cfg.train_size, cfg.bins, cfg.lambda, derive_seed(seed, i)))
        .collect()
}

/// Nearest-rank `q` quantile; reorders `values`.
fn nearest_rank_quantile(values: &mut [f64], q: f64) -> f64 {
    let n = values.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *v
}

/// Constant threshold giving hazard `alpha` to `trajectories` over the next
/// `horizon` steps: each trajectory keeps its running-maximum records, from
/// which the first exceedance time of any candidate threshold follows.
fn fit_tail_threshold(trajectories: &mut [Trajectory], horizon: usize, alpha: f64) -> f64 {
    let records: Vec<Vec<(usize, f64)>> = trajectories
        .par_iter_mut()
        .map(|traj| {
            let mut rec = Vec::new();
            let mut max = f64::NEG_INFINITY;
            for t in 1..=horizon {
                let v = traj.step();
                if v > max {
                    max = v;
                    rec.push((t, v));
                }
            }
            rec
        })
        .collect();
    // events - alpha * exposure, decreasing in the threshold
    let excess = |h: f64| {
        let (mut events, mut exposure) = (0.0, 0.0);
        for rec in &records {
            match rec.iter().find(|r| r.1 > h) {
                Some(&(t, _)) => {
                    events += 1.0;
                    exposure += t as f64;
                }
                None => exposure += horizon as f64,
            }
        }
        events - alpha * exposure
    };
    let (mut lo, mut hi) = records
        .iter()
        .flat_map(|r| r.iter().map(|p| p.1))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Computes a threshold table by the quantile peel described in the module docs.
pub fn calibrate_thresholds(cfg: &CalibrationConfig) -> Result<ThresholdTable> {
    cfg.validate()?;
    let alpha = 1.0 / cfg.arl0;
    let mut alive = spawn_trajectories(cfg, cfg.replicates, cfg.seed)?;
    let mut thresholds = Vec::with_capacity(cfg.t_max);
    let mut stats = Vec::with_capacity(alive.len());
    let mut scratch = Vec::with_capacity(alive.len());
    for t in 1..=cfg.t_max {
        if alive.len() < cfg.survivor_floor {
            return Err(Error::Calibration(format!(
                "only {} of {} trajectories survive at t={t} (floor {}); increase replicates or reduce t_max",
                alive.len(),
                cfg.replicates,
                cfg.survivor_floor
            )));
        }
        stats.clear();
        alive.par_iter_mut().map(Trajectory::step).collect_into_vec(&mut stats);
        scratch.clear();
        scratch.extend_from_slice(&stats);
        let h = nearest_rank_quantile(&mut scratch, 1.0 - alpha);
        thresholds.push(h);

        let mut i = 0;
        alive.retain(|_| {
            let keep = stats[i] <= h;
            i += 1;
            keep
        });
    }
    if !alive.is_empty() {
        let extra = (4.0 * cfg.arl0).ceil() as usize;
        *thresholds.last_mut().expect("t_max > 0") = fit_tail_threshold(&mut alive, extra, alpha);
    }
    Ok(ThresholdTable {
        format_version: TABLE_FORMAT_VERSION,
        rng: RNG_NAME.to_string(),
        bins: cfg.bins,
        lambda: cfg.lambda,
        arl0: cfg.arl0,
        train_size: cfg.train_size,
        t_max: cfg.t_max,
        replicates: cfg.replicates,
        seed: cfg.seed,
        tail_rule: TailRule::ConstantLast,
        thresholds,
    })
}

/// Per-step record of a held-out replay of a threshold table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExceedanceStep {
    pub t: usize,
    /// Trajectories with no exceedance before `t`.
    pub at_risk: usize,
    /// Of those, trajectories with `T_t > h_t`.
    pub exceeded: usize,
}

impl ExceedanceStep {
    pub fn rate(&self) -> f64 {
        self.exceeded as f64 / self.at_risk as f64
    }
}

/// Replays fresh stationary trajectories against `table` and reports the
/// conditional exceedance count at each step up to `horizon`.
pub fn replay_exceedance(
    table: &ThresholdTable,
    replicates: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<ExceedanceStep>> {
    let cfg = CalibrationConfig {
        replicates,
        seed,
        ..CalibrationConfig::new(table.train_size, table.bins, table.lambda, table.arl0)
    };
    let mut alive = spawn_trajectories(&cfg, replicates, seed)?;
    let mut out = Vec::with_capacity(horizon);
    let mut stats = Vec::new();
    for t in 1..=horizon {
        if alive.is_empty() {
            break;
        }
        alive.par_iter_mut().map(Trajectory::step).collect_into_vec(&mut stats);
        let h = table.threshold_at(t as u64);
        let at_risk = alive.len();
        let mut i = 0;
        alive.retain(|_| {
            let keep = stats[i] <= h;
            i += 1;
            keep
        });
        out.push(ExceedanceStep {
            t,
            at_risk,
            exceeded: at_risk - alive.len(),
        });
    }
    Ok(out)
}

/// Mean run length of ECDD on Bernoulli(`p0`) error streams with limit `limit`.
/// Runs are capped at `cap` samples.
pub fn ecdd_bernoulli_arl(
    p0: f64,
    r: f64,
    limit: f64,
    replicates: usize,
    cap: u64,
    seed: u64,
) -> Result<f64> {
    let total: u64 = (0..replicates as u64)
        .into_par_iter()
        .map(|i| -> Result<u64> {
            let mut rng = rng_from_seed(derive_seed(seed, i));
            let mut state = EcddState::new(p0, r, limit)?;
            for t in 1..=cap {
                if state.update(rng.random::<f64>() < p0).detected {
                    return Ok(t);
                }
            }
            Ok(cap)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(total as f64 / replicates as f64)
}

/// Relative tolerance on the simulated ARL0 when searching for the ECDD limit.
pub const ECDD_ARL_TOLERANCE: f64 = 0.02;

/// Control limit `L` for ECDD giving mean detection time `arl0` on
/// Bernoulli(`p0`) error streams. The same simulated streams are reused for
/// every candidate limit, so the simulated ARL0 is monotone in `L` and a
/// bisection converges. When no limit lands within [`ECDD_ARL_TOLERANCE`]
/// (very small `p0`, where one error can trigger an alarm) the search returns
/// the smallest limit it found above the target.
pub fn calibrate_ecdd_limit(p0: f64, r: f64, arl0: f64, replicates: usize, seed: u64) -> Result<f64> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::config(format!("p0 must lie in (0, 1), got {p0}")));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::config(format!("r must lie in (0, 1), got {r}")));
    }
    if !(arl0 >= 2.0) || replicates == 0 {
        return Err(Error::config("need arl0 >= 2 and at least one replicate"));
    }
    let cap = (20.0 * arl0).ceil() as u64;
    let arl = |limit: f64| ecdd_bernoulli_arl(p0, r, limit, replicates, cap, seed);
    let close = |v: f64| ((v - arl0) / arl0).abs() <= ECDD_ARL_TOLERANCE;

    let mut lo = 0.0;
    let mut hi = 1.0;
    loop {
        let v = arl(hi)?;
        if close(v) {
            return Ok(hi);
        }
        if v > arl0 {
            break;
        }
        lo = hi;
        hi *= 2.0;
        if hi > 64.0 {
            return Err(Error::Calibration(format!(
                "no ECDD limit up to 64 reaches ARL0 {arl0} for p0={p0}"
            )));
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let v = arl(mid)?;
        if close(v) {
            return Ok(mid);
        }
        if v > arl0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // Run lengths of rare-error streams are discrete in L; settle for the
    // smallest limit found whose ARL0 is at least the target.
    Ok(hi)
}
