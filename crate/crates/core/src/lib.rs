//! A desk-scale laboratory for probabilistic lifetime-earnings
//! forecasting on synthetic panels: parametric earnings-process
//! simulation, a toy causal sequence forecaster with dual point/quantile
//! heads, split and horizon-stratified conformal calibration, Monte Carlo
//! lifetime aggregation, a stylized tax microsimulation, and a
//! probabilistic scoring suite — all verified against analytic oracles.
//!
//! Modules map one-to-one onto the subsystems:
//!
//! - [`panel`]: domain types, synthetic generators, lifetime PDV, CSV.
//! - [`estimation`]: change moments and GMM estimation of the processes.
//! - [`tokenizer`]: annual records to fixed-dimension token vectors.
//! - [`forecaster`]: the forecaster contract and four implementations.
//! - [`conformal`]: split and horizon-stratified conformal calibration.
//! - [`downstream`]: lifetime aggregation, inequality and tax statistics.
//! - [`metrics`]: MAE/RMSE/CRPS/pinball/PICP/PINAW and the DM test.
//!
//! Everything stochastic draws from counter-based [`rng`] streams, so any
//! result is a pure function of its inputs and seed, independent of
//! thread count.

pub mod conformal;
pub mod error;
pub mod estimation;
pub mod forecaster;
pub mod math;
pub mod optim;
pub mod panel;
pub mod rng;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
