pub mod audio;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod manifest;
pub mod separation;
pub mod sslm;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod vision;
