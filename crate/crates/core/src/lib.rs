//! Omni-modal goal-conditioned navigation at desk scale.
//!
//! A 2D simulator produces multi-modal navigation datasets, a small
//! transformer policy is trained with modality dropout over pose, image,
//! language and satellite goals, and an evaluation harness runs ablation,
//! composition and adaptation experiments.

pub mod datagen;
pub mod error;
pub mod evalcli;
pub mod geometry;
pub mod numerics;
pub mod policy;
pub mod reannotate;
pub mod toponav;
pub mod training;
pub mod worldsim;

pub use error::{Error, Result};
