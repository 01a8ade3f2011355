pub mod rng;
pub mod experiment;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod train;
