//! Keypoint regressor: a feed-forward network mapping a standard-pose patch
//! to six keypoints in normalized patch coordinates.

mod checkpoint;
mod network;
mod samples;
mod train;

pub use checkpoint::ModelCheckpoint;
pub use network::{Gradients, Layer, Network, NetworkConfig};
pub use samples::{keypoint_targets, make_training_set, AugmentSpec, SampleSet, TrainingItem};
pub use train::{train, EpochStats, TrainOutcome};

use serde::{Deserialize, Serialize};

use crate::patchify::{Patch, PatchFrame};
use crate::geometry::Pixel;
use crate::phantom::N_KEYPOINTS;
use crate::Result;

/// Number of regression outputs (x, y per keypoint).
pub const N_OUTPUTS: usize = 2 * N_KEYPOINTS;

/// Six points in normalized patch coordinates, ordered A1, A2, A3, B1, B2, B3,
/// stored as `[x0, y0, x1, y1, ...]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet(pub [f64; N_OUTPUTS]);

impl KeypointSet {
    pub fn zeros() -> Self {
        KeypointSet([0.0; N_OUTPUTS])
    }

    pub fn point(&self, k: usize) -> [f64; 2] {
        [self.0[2 * k], self.0[2 * k + 1]]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Normalized patch coordinates of image-space keypoints.
    pub fn from_pixels(pixels: &[Pixel; N_KEYPOINTS], frame: &PatchFrame) -> Self {
        let mut out = [0.0; N_OUTPUTS];
        for (k, p) in pixels.iter().enumerate() {
            let q = frame.image_to_patch_coords(*p);
            out[2 * k] = q[0];
            out[2 * k + 1] = q[1];
        }
        KeypointSet(out)
    }

    pub fn to_pixels(&self, frame: &PatchFrame) -> [Pixel; N_KEYPOINTS] {
        std::array::from_fn(|k| frame.patch_to_image_coords(self.point(k)))
    }
}

/// Anything that predicts keypoints from a patch.
pub trait KeypointRegressor: Sync {
    fn predict(&self, patch: &Patch) -> Result<KeypointSet>;
}
