//! Measuring and reducing retraining jitter in autoregressive semantic parsers.

pub mod dataset;
pub mod evaluation;
pub mod experiment;
pub mod model;
pub mod numerics;
pub mod top_format;
pub mod training;
