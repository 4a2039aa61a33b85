//! Data handling around the model: ingestion and preprocessing, the EL1
//! metric, summary statistics, the train/test evaluation harness and the
//! synthetic data generator.

pub mod dataset;
pub mod metrics;
pub mod summary;
pub mod simulate;
pub mod evaluate;
