//! Multi-period spatio-temporal flood forecasting: a tape autodiff engine,
//! FFT period division, graph Laplacian station embedding, periodic and
//! spatial self-attention blocks over an LSTM, and the data/training/CLI
//! plumbing around them.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod parallel;
pub mod params;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use graph::StationGraph;
pub use model::{ApsLstm, ModelConfig};
pub use parallel::Execution;
pub use tensor::Tensor;
