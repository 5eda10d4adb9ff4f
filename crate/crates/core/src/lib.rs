//! Channel-feature-augmented pedestrian detection at desk scale.
//!
//! The crate covers the full loop: a synthetic street-scene generator with
//! analytic ground truth for every auxiliary channel ([`synthworld`]),
//! hand-crafted channel features ([`channels`]), a small body network with
//! multi-level feature aggregation and a channel side branch ([`backbone`]),
//! two-stage detection heads ([`heads`]), the channel feature network and
//! pixel losses ([`cfn`], [`loss`]), the staged training controller
//! ([`trainer`]) and the evaluation toolkit ([`evalkit`]).

pub mod autograd;
pub mod backbone;
pub mod boxes;
pub mod cfn;
pub mod channels;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod gradcheck;
pub mod heads;
pub mod io;
pub mod loss;
pub mod model;
pub mod params;
pub mod synthworld;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
