//! Multi-step-ahead epidemic case forecasting with recurrent networks.
//!
//! The crate is organised bottom-up: [`numerics`] holds the dense kernels and
//! the seeded generator, [`dataio`] turns daily case files into aligned
//! series, [`embedding`] builds lagged windows and splits, [`models`] has the
//! three LSTM variants with exact gradients, [`training`] fits them with Adam
//! and [`experiment`] runs repeated trials and recursive forecasts.

pub mod checkpoint;
pub mod dataio;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod models;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use models::{CellFormula, Model, ModelParams, ModelSpec, Predictor, Variant};
pub use numerics::{Matrix, Rng, Vector};
