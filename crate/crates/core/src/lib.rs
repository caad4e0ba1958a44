//! Vs30 regression from three-component accelerograms.
//!
//! The pipeline runs [`datapipe`] (records, folds, synthetic data) through
//! [`sigprep`] (windowing and spectra) into an [`encoders`] model that
//! [`trainer`] fits and [`evalreport`] scores.

pub mod datapipe;
pub mod encoders;
pub mod evalreport;
pub mod error;
pub mod sigprep;
pub mod trainer;

pub use error::{CoreError, ErrorClass, Result};
