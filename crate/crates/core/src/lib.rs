//! Substitute-confounder estimation for longitudinal observational data.
//!
//! The crate covers the whole pipeline: simulating confounded patient
//! trajectories, fitting a recurrent factor model over the assigned
//! treatments, checking it with temporal predictive checks, and estimating
//! one-step-ahead treatment responses with IPTW outcome models that adjust
//! for the inferred substitute confounders.

pub mod checks;
pub mod data;
pub mod error;
pub mod factor;
pub mod harness;
pub mod msm;
pub mod nn;
pub mod rmsn;
pub mod numerics;
pub mod sim;

pub use error::{Error, Result};
pub use numerics::{AdamConfig, AdamState, ParamSet, RngStream, Tensor};
pub use data::{Dataset, PatientTrajectory, Provenance};
pub use factor::{FactorModel, FactorModelConfig, FactorVariant};
pub use harness::{DataSource, OutcomeKind, PipelineConfig, Scenario, ScenarioSpec, SweepConfig};
pub use sim::{SynthConfig, TumorConfig};
