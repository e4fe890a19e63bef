//! Enhanced sampling driven by the uncertainty of a learned surrogate potential.
//!
//! A Gaussian-mixture negative log-likelihood over the surrogate's latent
//! features, calibrated by inductive conformal prediction, is used as the
//! collective variable of extended-system ABF combined with a Gaussian
//! accelerated boost. Biased trajectories feed an active-learning loop whose
//! results are checked against analytic ground-truth potentials.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod baselines;
pub mod driver;
pub mod dynamics;
pub mod error;
pub mod freeenergy;
pub mod grid;
pub mod potentials;
pub mod rng;
pub mod surrogate;
pub mod uncertainty;

pub use error::{Error, Result};
pub use grid::{Axis, GridSpec};
pub use potentials::{Configuration, GroundTruthPotential, PotentialKind, Pes};
pub use surrogate::{FeatureMap, LabeledSet, SurrogateModel};
pub use uncertainty::{ConformalScale, GmmModel, GmmUncertainty, NllReference, UncertaintyOptions};
