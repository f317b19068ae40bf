//! Concept-drift detection by monitoring class-conditional distributions.
//!
//! The crate builds per-class QuantTree histograms, monitors each with a
//! QT-EWMA detector whose thresholds are calibrated by Monte Carlo to a
//! target average run length (ARL0), and reports both when a drift happens
//! and which class it affected. It also ships the ECDD error-rate baseline,
//! synthetic Gaussian and CSV datastreams, and an experiment harness for
//! empirical ARL0, detection delay and grid studies.
//!
//! Runnable walkthroughs live in `examples/`; the `cdm` binary exposes the
//! calibration, monitoring and benchmark workflows on the command line.

pub mod bench;
pub mod calibration;
pub mod cdm;
pub mod cli;
pub mod datastreams;
pub mod ecdd;
pub mod error;
pub mod experiment;
pub mod monitor;
pub mod qt_ewma;
pub mod quanttree;
pub mod rng;

pub use calibration::{calibrate_ecdd_limit, calibrate_thresholds, CalibrationConfig, ThresholdTable};
pub use cdm::{CdmConfig, CdmMonitor, Decision, LabelPolicy};
pub use datastreams::{GaussianMixtureConfig, LabeledStream, Sample};
pub use ecdd::{Classifier, ClassifierKind, EcddMonitor, EcddState};
pub use error::{Error, Result};
pub use monitor::{Alarm, DetectionReport, DriftMonitor};
pub use qt_ewma::{QtEwmaDetector, Step};
pub use quanttree::QuantTreeHistogram;
