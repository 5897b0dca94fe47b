//! ECG-free cardiac phase and end-diastolic frame detection for cine
//! angiography sequences.

pub mod bundle;
pub mod ecg;
pub mod error;
pub mod image;
pub mod labeling;
pub mod metrics;
pub mod phasenet;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod synth;
pub mod vesselness;

pub use error::{Error, Result};
