//! Iterative pose estimation: patchify at the current estimate, regress the
//! six keypoints, fit the axis line and the cross line, and take their
//! intersection as the new instrument origin.

use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_deg, ImagePose, Pixel};
use crate::patchify::{extract_patch, Patch, PatchFrame, PatchSpec};
use crate::phantom::N_KEYPOINTS;
use crate::regressor::{KeypointRegressor, KeypointSet};
use crate::renderer::RadiographImage;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub iterations: usize,
    /// Lines closer to parallel than this (degrees) are not intersected.
    pub min_line_angle_deg: f64,
    pub patch: PatchSpec,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            iterations: 3,
            min_line_angle_deg: 10.0,
            patch: PatchSpec::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("estimator iterations must be >= 1".into()));
        }
        if !(0.0..90.0).contains(&self.min_line_angle_deg) {
            return Err(Error::Config(format!(
                "min line angle must lie in [0, 90), got {}",
                self.min_line_angle_deg
            )));
        }
        self.patch.validate()
    }
}

/// Infinite 2D line through `point` with unit `direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub point: [f64; 2],
    pub direction: [f64; 2],
}

impl Line {
    /// Signed orthogonal distance of `p` (positive to the left of the
    /// direction in a y-up frame).
    pub fn offset(&self, p: [f64; 2]) -> f64 {
        let (dx, dy) = (p[0] - self.point[0], p[1] - self.point[1]);
        self.direction[0] * dy - self.direction[1] * dx
    }

    pub fn closest_point(&self, p: [f64; 2]) -> [f64; 2] {
        let t = (p[0] - self.point[0]) * self.direction[0] + (p[1] - self.point[1]) * self.direction[1];
        [self.point[0] + t * self.direction[0], self.point[1] + t * self.direction[1]]
    }
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Total-least-squares line. The direction points from the first point
/// toward the last.
pub fn fit_line(points: &[[f64; 2]]) -> Result<Line> {
    if points.len() < 2 {
        return Err(Error::DegeneratePoints);
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let spread = points
        .iter()
        .map(|p| (p[0] - points[0][0]).hypot(p[1] - points[0][1]))
        .fold(0.0, f64::max);
    if spread <= 1e-9 {
        return Err(Error::DegeneratePoints);
    }
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let (x, y) = (p[0] - cx, p[1] - cy);
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
    }
    // major eigenvector of the 2x2 scatter matrix
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let mut dir = [theta.cos(), theta.sin()];
    let last = points[points.len() - 1];
    let span = [last[0] - points[0][0], last[1] - points[0][1]];
    if dir[0] * span[0] + dir[1] * span[1] < 0.0 {
        dir = [-dir[0], -dir[1]];
    }
    Ok(Line {
        point: [cx, cy],
        direction: dir,
    })
}

/// Intersection of two lines whose directions differ by at least
/// `min_angle_deg`.
pub fn intersect_lines(a: &Line, b: &Line, min_angle_deg: f64) -> Result<[f64; 2]> {
    let s = cross(a.direction, b.direction);
    let angle = s.abs().min(1.0).asin().to_degrees();
    if angle < min_angle_deg || s == 0.0 {
        return Err(Error::NearParallel(angle));
    }
    let d = [b.point[0] - a.point[0], b.point[1] - a.point[1]];
    let t = cross(d, b.direction) / s;
    Ok([a.point[0] + t * a.direction[0], a.point[1] + t * a.direction[1]])
}

/// Pose recovered from one set of keypoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reconstruction {
    pub pose: ImagePose,
    /// Lines were near parallel; the origin is line A's closest point to the
    /// B centroid.
    pub fallback: bool,
}

/// Maps keypoints to image space, fits both lines and intersects them. Depth,
/// tilt and branch are carried over from `current`.
pub fn reconstruct(
    kp: &KeypointSet,
    frame: &PatchFrame,
    current: &ImagePose,
    min_angle_deg: f64,
) -> Result<Reconstruction> {
    if !kp.is_finite() {
        return Err(Error::Format("non-finite keypoints".into()));
    }
    let px = kp.to_pixels(frame);
    let pts: [[f64; 2]; N_KEYPOINTS] = std::array::from_fn(|k| [px[k].u, px[k].v]);
    let line_a = fit_line(&pts[..3])?;
    let line_b = fit_line(&pts[3..])?;
    let (origin, fallback) = match intersect_lines(&line_a, &line_b, min_angle_deg) {
        Ok(p) => (p, false),
        Err(Error::NearParallel(_)) => (line_a.closest_point(line_b.point), true),
        Err(e) => return Err(e),
    };
    let alpha = wrap_deg(line_a.direction[1].atan2(line_a.direction[0]).to_degrees());
    Ok(Reconstruction {
        pose: ImagePose {
            x_instr: Pixel::new(origin[0], origin[1]),
            alpha,
            ..*current
        },
        fallback,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub pose: ImagePose,
    /// Initial estimate followed by the estimate after each iteration.
    pub trace: Vec<ImagePose>,
    /// Some iteration used the near-parallel fallback.
    pub fallback: bool,
    /// An iteration left the image; `pose` is the last estimate inside it.
    pub aborted: bool,
}

/// Runs `cfg.iterations` rounds of patchify, regress and reconstruct.
pub fn estimate(
    img: &RadiographImage,
    initial: &ImagePose,
    cfg: &EstimatorConfig,
    model: &dyn KeypointRegressor,
) -> Result<EstimateResult> {
    cfg.validate()?;
    let mut current = *initial;
    let mut trace = vec![current];
    let mut fallback = false;
    let mut aborted = false;
    for _ in 0..cfg.iterations {
        let patch: Patch = match extract_patch(img, &current, &cfg.patch) {
            Ok(p) => p,
            Err(Error::EstimateOutOfImage(u, v)) if trace.len() > 1 => {
                log::debug!("estimate left the image at ({u:.1}, {v:.1})");
                aborted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let kp = model.predict(&patch)?;
        let rec = reconstruct(&kp, &patch.frame, &current, cfg.min_line_angle_deg)?;
        fallback |= rec.fallback;
        let p = rec.pose.x_instr;
        if !(p.u.is_finite() && p.v.is_finite()) || !img.in_bounds(p) {
            aborted = true;
            break;
        }
        current = rec.pose;
        trace.push(current);
    }
    Ok(EstimateResult {
        pose: current,
        trace,
        fallback,
        aborted,
    })
}

/// Regressor that returns fixed image-space keypoints expressed in each
/// patch's frame. With ground-truth keypoints it isolates the geometric part
/// of the estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedKeypoints(pub [Pixel; N_KEYPOINTS]);

impl KeypointRegressor for FixedKeypoints {
    fn predict(&self, patch: &Patch) -> Result<KeypointSet> {
        Ok(KeypointSet::from_pixels(&self.0, &patch.frame))
    }
}
