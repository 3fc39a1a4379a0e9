//! Per-view scoring of a submitted pose against the ground truth.

use drrpose::geometry::{forward_angle_error, world_to_image_pose};
use drrpose::{ImagePose, Pixel, ProjectionGeometry, Vec3, WorldPose};
use serde::{Deserialize, Serialize};

/// One view of a task as the scorer sees it.
#[derive(Debug, Clone)]
pub struct ScoringView<'a> {
    pub image_id: &'a str,
    pub geometry: &'a ProjectionGeometry,
    pub truth: &'a ImagePose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewErrors {
    pub position_error_mm: f64,
    pub forward_angle_error_deg: f64,
    pub tilt_gt_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view: usize,
    pub image_id: String,
    /// The submitted pose traced onto this detector.
    pub image_pose: ImagePose,
    pub errors: ViewErrors,
}

/// Distance between the rays through `truth_px` and `est_px` where they
/// cross the plane through `origin` parallel to the detector. Identical
/// pixels give exactly zero.
pub fn instrument_plane_offset_mm(
    origin: &Vec3,
    truth_px: Pixel,
    est_px: Pixel,
    g: &ProjectionGeometry,
) -> drrpose::Result<f64> {
    let n = g.normal();
    let depth = (origin - g.source).dot(&n);
    let hit = |px: Pixel| {
        let d = g.ray_direction(px);
        let denom = d.dot(&n);
        if denom.abs() < 1e-12 {
            return Err(drrpose::Error::RayParallelToDetector);
        }
        Ok(g.source + d * (depth / denom))
    };
    Ok((hit(est_px)? - hit(truth_px)?).norm())
}

/// Traces the submitted pose onto every detector and measures the position
/// error at the instrument plane and the signed forward-angle error. Roll is
/// ignored.
pub fn score(
    submitted: &WorldPose,
    truth: &WorldPose,
    views: &[ScoringView<'_>],
) -> drrpose::Result<Vec<ViewScore>> {
    views
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ip = world_to_image_pose(submitted, v.geometry)?;
            Ok(ViewScore {
                view: i,
                image_id: v.image_id.to_string(),
                image_pose: ip,
                errors: ViewErrors {
                    position_error_mm: instrument_plane_offset_mm(&truth.origin, v.truth.x_instr, ip.x_instr, v.geometry)?,
                    forward_angle_error_deg: forward_angle_error(v.truth.alpha, ip.alpha),
                    tilt_gt_deg: v.truth.tilt,
                },
            })
        })
        .collect()
}
