//! Multiclass recalibration with ℓp calibration-error guarantees.
//!
//! Predictions are discretized into level sets of the probability simplex,
//! per-bin errors are estimated through noisy disjoint queries on held-out
//! samples, and offending bins are patched until every estimated error is small.

pub mod calibrator;
pub mod error;
pub mod estimation;
pub mod evaluator;
pub mod partitions;
pub mod rng;
pub mod simplex;
pub mod world;

pub use calibrator::{
    calibrate, CalibParams, CalibratedPredictor, Calibration, PNorm, RunTrace, SampleMode,
};
pub use error::{Error, Result};
pub use estimation::{BinMassTable, PoolSpec};
pub use evaluator::{ErrorReport, RunAudit};
pub use simplex::{LevelSet, ProbVector};
pub use world::{make_scenario, Predictor, Scenario, World, WorldDocument};
