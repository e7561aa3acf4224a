pub mod assembly;
pub mod config;
pub mod dataset;
pub mod evolution;
pub mod genome;
pub mod runner;
pub mod speciation;
pub mod tensor;
