//! Core library for the r2cs compressive-sensing toolkit.

pub mod config;
pub mod conv;
pub mod bundle;
pub mod gradcheck;
pub mod image_file;
pub mod layers;
pub mod error;
pub mod measurement;
pub mod metrics;
pub mod model_file;
pub mod param;
pub mod reconstructor;
pub mod recurrent;
pub mod reference;
pub mod strategy;
pub mod tape;
pub mod training;
pub mod tensor;
