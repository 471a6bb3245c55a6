//! Calendar-driven forecaster for day-granular multivariate series.
//!
//! Dates are turned into static calendar embeddings ([`calendar`]), contextualized
//! by a sliding Transformer encoder into dynamic day representations
//! ([`models::encoder`]), and decoded two ways: a global forecast mapped from
//! time alone ([`models::dert`]) and a local residual forecast extrapolated from
//! the lookback window ([`models::longlongformer`]). The [`scheduler`] composes
//! them day by day so one model trained on a 7-day-lookback / 1-day-ahead task
//! serves any horizon.
//!
//! The numeric core is generic over the scalar type ([`Scalar`]); the aliases at
//! the crate root pin it to `f64`, which is what training and all oracle checks
//! use.

pub mod autocorr;
pub mod calendar;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod numerics;
pub mod scalar;
pub mod scheduler;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = numerics::Tensor<f64>;
pub type Graph = numerics::Graph<f64>;
pub type ParamStore = numerics::ParamStore<f64>;
pub type AutocorrSeries = autocorr::AutocorrSeries<f64>;
pub type DertEncoderModel = models::encoder::EncoderModel<f64>;
pub type ModelBundle = models::ModelBundle<f64>;
pub type ForecastResult = scheduler::ForecastResult<f64>;
pub type AdamW = training::AdamW<f64>;
