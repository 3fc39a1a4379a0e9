//! Synthetic radiograph laboratory for instrument pose estimation under
//! noisy training annotations.
//!
//! The pipeline renders cone-beam radiographs of a screw inside a procedural
//! anatomy phantom ([`phantom`], [`renderer`]), trains a keypoint regressor on
//! standard-pose patches ([`patchify`], [`regressor`]), recovers image poses by
//! fitting two keypoint lines ([`estimator`]) and measures how annotation noise
//! ([`noise`]) and dataset size change the error statistics ([`stats`],
//! [`experiments`]).

pub mod error;
pub mod estimator;
pub mod exec;
pub mod experiments;
pub mod geometry;
pub mod noise;
pub mod patchify;
pub mod phantom;
pub mod regressor;
pub mod renderer;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
pub use geometry::{ImagePose, Pixel, ProjectionGeometry, Vec3, WorldPose};
