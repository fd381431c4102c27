//! Keypoint regression with per-location mixture densities.
//!
//! A convolutional head predicts, at every pyramid cell, a mixture component
//! over the full pose vector. Training minimizes a grouped negative
//! log-likelihood; inference keeps components with high presence and
//! suppresses duplicates by pose similarity.

pub mod autodiff;
pub mod density;
pub mod error;
pub mod eval;
pub mod kv;
pub mod loss;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod train;
pub mod types;

pub use density::ComponentKind;
pub use error::{Error, Result};
pub use loss::{GroupingMode, LikelihoodSpace, LossReport};
pub use scalar::{Precision, Real};
pub use types::{
    BBox, GridAnchors, GroupPartition, KeypointSet, MixtureField, PersonAnnotation, PyramidLevel, PyramidSpec, Scene,
    SkeletonSpec,
};

pub type Field = MixtureField<f64>;
pub type Field32 = MixtureField<f32>;
pub type Keypoints = KeypointSet<f64>;
pub type Keypoints32 = KeypointSet<f32>;
pub type Box2 = BBox<f64>;
pub type Person = PersonAnnotation<f64>;
pub type Report = LossReport<f64>;
