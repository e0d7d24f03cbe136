pub mod tensor;
pub mod features;
pub mod linalg;
pub mod nve;
pub mod ide;
pub mod scoring;
pub mod metrics;
pub mod synth;
pub mod trainer;
pub mod config;
