//! Common interface for stream monitors used by the experiment harness.

use serde::{Deserialize, Serialize};

use crate::datastreams::Sample;
use crate::error::Result;

/// A detection: global time of the alarm and, when the method can tell,
/// the class that raised it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alarm {
    pub t: u64,
    pub class: Option<u32>,
}

/// Summary emitted once monitoring stops (one JSON object per run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub method: String,
    pub t_star: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_star: Option<u32>,
    pub samples_processed: u64,
    /// Samples seen by each class detector (CDM only).
    pub per_class_t: Vec<u64>,
    pub final_statistics: Vec<f64>,
    pub skipped_labels: u64,
}

pub trait DriftMonitor: Send {
    /// Feeds one sample; returns the alarm once raised (and keeps returning it).
    fn observe(&mut self, sample: &Sample) -> Result<Option<Alarm>>;

    fn report(&self) -> DetectionReport;
}

impl<M: DriftMonitor + ?Sized> DriftMonitor for Box<M> {
    fn observe(&mut self, sample: &Sample) -> Result<Option<Alarm>> {
        (**self).observe(sample)
    }

    fn report(&self) -> DetectionReport {
        (**self).report()
    }
}
