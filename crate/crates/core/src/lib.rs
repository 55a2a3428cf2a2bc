//! Trajectory-averaged non-Markovian simulation of a two-level atom in a leaky
//! cavity driven by quantum bath noise and classical noise.



pub mod ensemble;
pub mod error;
pub mod evolve;
pub mod exact1x;
pub mod measures;
pub mod model;
pub mod noise_gen;
pub mod o_operator;

pub use error::{Error, Result};
pub use evolve::{DensityMatrix, RunOptions, Trajectory};
pub use exact1x::Amplitudes;
pub use measures::ObservableRecord;
pub use model::{ClassicalNoiseSpec, CorrelationSpec, EtaFrame, ModelParams, NoiseChannel, NoiseProcess};
pub use noise_gen::{NoisePath, TimeGrid};
pub use o_operator::{FCoefficients, FGrid, SignConvention};
pub mod config;
