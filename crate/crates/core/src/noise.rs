//! Annotation noise: zero-mean normal perturbations of image-space pose
//! parameters, scaled by a single level `eta`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::geometry::{
    image_to_world_pose, tilt_bounds, wrap_deg, world_to_image_pose, ImagePose, Pixel, ProjectionGeometry,
    WorldPose,
};
use crate::seed::{self, Rng};
use crate::stats::standard_normal;
use crate::{Error, Result};

/// Tilt draws are clamped to this magnitude (degrees) and kept this far
/// inside the reachable interval.
pub const TILT_LIMIT_DEG: f64 = 89.0;
pub const TILT_MARGIN_DEG: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevel {
    pub eta: f64,
}

impl NoiseLevel {
    pub fn new(eta: f64) -> Result<Self> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::Config(format!("noise level must be >= 0, got {eta}")));
        }
        Ok(NoiseLevel { eta })
    }

    /// Per-component position σ in pixels.
    pub fn sigma_position_px(&self) -> f64 {
        self.eta
    }

    pub fn sigma_alpha_deg(&self) -> f64 {
        10.0 * self.eta
    }

    pub fn sigma_depth_mm(&self) -> f64 {
        17.5 * self.eta
    }

    pub fn sigma_tilt_deg(&self) -> f64 {
        5.0 * self.eta
    }
}

/// One draw of image-space offsets, before any clamping.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseOffsets {
    pub du: f64,
    pub dv: f64,
    pub dalpha: f64,
    pub ddepth: f64,
    pub dtilt: f64,
}

pub fn draw_offsets(nl: NoiseLevel, rng: &mut Rng) -> PoseOffsets {
    PoseOffsets {
        du: nl.sigma_position_px() * standard_normal(rng),
        dv: nl.sigma_position_px() * standard_normal(rng),
        dalpha: nl.sigma_alpha_deg() * standard_normal(rng),
        ddepth: nl.sigma_depth_mm() * standard_normal(rng),
        dtilt: nl.sigma_tilt_deg() * standard_normal(rng),
    }
}

/// Applies offsets and clamps depth and tilt into the representable range.
pub fn apply_offsets(ip: &ImagePose, off: &PoseOffsets, g: &ProjectionGeometry) -> ImagePose {
    let mut out = ImagePose {
        x_instr: Pixel::new(ip.x_instr.u + off.du, ip.x_instr.v + off.dv),
        alpha: wrap_deg(ip.alpha + off.dalpha),
        depth: (ip.depth + off.ddepth).max(1.0),
        tilt: ip.tilt,
        far_branch: ip.far_branch,
    };
    let (lo, hi) = tilt_bounds(&out, g);
    let lo = (lo + TILT_MARGIN_DEG).max(-TILT_LIMIT_DEG);
    let hi = (hi - TILT_MARGIN_DEG).min(TILT_LIMIT_DEG);
    out.tilt = (ip.tilt + off.dtilt).clamp(lo, hi.max(lo));
    if out.far_branch && image_to_world_pose(&out, g).is_err() {
        out.far_branch = false;
    }
    out
}

/// Perturbs a ground-truth pose in image-pose space and maps it back.
/// `eta = 0` returns the pose unchanged; the random stream advances by the
/// same amount for every `eta`, so conditions share their underlying draws.
pub fn perturb(wp: &WorldPose, g: &ProjectionGeometry, nl: NoiseLevel, rng: &mut Rng) -> Result<WorldPose> {
    let off = draw_offsets(nl, rng);
    if nl.eta == 0.0 {
        return Ok(*wp);
    }
    let ip = world_to_image_pose(wp, g)?;
    let noisy = apply_offsets(&ip, &off, g);
    let mut out = image_to_world_pose(&noisy, g)?;
    out.roll = wp.roll;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub world_pose: WorldPose,
    pub image_pose: ImagePose,
    pub eta: f64,
    pub seed: u64,
}

/// Image id → annotations (one per repetition).
pub type AnnotationSet = BTreeMap<String, Vec<Annotation>>;

/// Ground-truth item to annotate.
#[derive(Debug, Clone)]
pub struct AnnotationTarget<'a> {
    pub id: &'a str,
    pub world_pose: WorldPose,
    pub geometry: &'a ProjectionGeometry,
}

pub fn annotation_seed(master: u64, image_id: &str, k: usize) -> u64 {
    seed::derive(master, &[seed::tag("annotation"), seed::tag(image_id), k as u64])
}

/// `k` independent noisy annotations per image, each from its own derived seed.
pub fn annotate_dataset(
    targets: &[AnnotationTarget<'_>],
    nl: NoiseLevel,
    k: usize,
    master_seed: u64,
    exec: Exec,
) -> Result<AnnotationSet> {
    if k == 0 {
        return Err(Error::Config("annotations per image must be >= 1".into()));
    }
    let per_image = exec.try_map(targets.len(), |i| {
        let t = &targets[i];
        let list = (0..k)
            .map(|j| {
                let s = annotation_seed(master_seed, t.id, j);
                let wp = perturb(&t.world_pose, t.geometry, nl, &mut seed::rng(s))?;
                Ok(Annotation {
                    world_pose: wp,
                    image_pose: world_to_image_pose(&wp, t.geometry)?,
                    eta: nl.eta,
                    seed: s,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok::<_, Error>((t.id.to_string(), list))
    })?;
    Ok(per_image.into_iter().collect())
}

pub fn save_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(set).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
