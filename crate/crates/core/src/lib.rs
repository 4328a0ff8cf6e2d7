pub mod tensor;
pub mod preprocess;
pub mod synth;
pub mod rate;
pub mod anomaly;
pub mod checkpoint;
pub mod cli;
