use serde::{Deserialize, Serialize};

use super::{KeypointSet, N_OUTPUTS};
use crate::exec::Exec;
use crate::geometry::{wrap_deg, ImagePose, Pixel, ProjectionGeometry, WorldPose};
use crate::noise::Annotation;
use crate::patchify::{extract_patch, PatchFrame, PatchSpec};
use crate::phantom::ScrewModel;
use crate::renderer::RadiographImage;
use crate::seed::{self, Rng};
use crate::stats::standard_normal;
use crate::{Error, Result};

/// Random deviations of the initial estimate around the annotated pose.
/// The same distribution draws initial estimates at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub sigma_position_px: f64,
    pub sigma_alpha_deg: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            sigma_position_px: 5.0,
            sigma_alpha_deg: 10.0,
        }
    }
}

impl AugmentSpec {
    pub fn draw_initial(&self, around: &ImagePose, rng: &mut Rng) -> ImagePose {
        let du = self.sigma_position_px * standard_normal(rng);
        let dv = self.sigma_position_px * standard_normal(rng);
        let da = self.sigma_alpha_deg * standard_normal(rng);
        ImagePose {
            x_instr: Pixel::new(around.x_instr.u + du, around.x_instr.v + dv),
            alpha: wrap_deg(around.alpha + da),
            ..*around
        }
    }
}

/// Dense storage of patches (f32) and keypoint targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub input_width: usize,
    pub inputs: Vec<f32>,
    pub targets: Vec<f64>,
}

impl SampleSet {
    pub fn new(input_width: usize) -> Self {
        SampleSet {
            input_width,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len() / N_OUTPUTS
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn target_width(&self) -> usize {
        N_OUTPUTS
    }

    pub fn push(&mut self, input: &[f32], target: &KeypointSet) {
        assert_eq!(input.len(), self.input_width, "sample width");
        self.inputs.extend_from_slice(input);
        self.targets.extend_from_slice(&target.0);
    }

    pub fn append(&mut self, other: &SampleSet) {
        assert_eq!(other.input_width, self.input_width, "sample width");
        self.inputs.extend_from_slice(&other.inputs);
        self.targets.extend_from_slice(&other.targets);
    }

    pub fn input(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.input_width..(i + 1) * self.input_width]
    }

    pub fn target(&self, i: usize) -> KeypointSet {
        KeypointSet(std::array::from_fn(|k| self.targets[i * N_OUTPUTS + k]))
    }
}

/// One radiograph with its (possibly several) annotations.
#[derive(Debug, Clone, Copy)]
pub struct TrainingItem<'a> {
    pub id: &'a str,
    pub image: &'a RadiographImage,
    pub geometry: &'a ProjectionGeometry,
    pub annotations: &'a [Annotation],
}

/// Keypoints of the annotated pose expressed in a patch frame.
pub fn keypoint_targets(
    screw: &ScrewModel,
    annotated: &WorldPose,
    g: &ProjectionGeometry,
    frame: &PatchFrame,
) -> Result<KeypointSet> {
    let kp = screw.keypoints(annotated, g)?;
    Ok(KeypointSet::from_pixels(&kp.pixels, frame))
}

/// Random stream for one (image, annotation) pair.
pub fn sample_rng(master: u64, image_id: &str, annotation: usize) -> Rng {
    seed::child_rng(master, &[seed::tag("augment"), seed::tag(image_id), annotation as u64])
}

/// Builds `patches_per_image` samples per (image, annotation) pair: the
/// patch is cut at a randomly deviated initial estimate and the targets are
/// the annotation's keypoints in that patch's frame. Returns the samples and
/// the number of skipped draws (estimate outside the image or degenerate
/// annotation).
pub fn make_training_set(
    items: &[TrainingItem<'_>],
    screw: &ScrewModel,
    spec: &PatchSpec,
    augment: &AugmentSpec,
    patches_per_image: usize,
    master_seed: u64,
    exec: Exec,
) -> Result<(SampleSet, usize)> {
    spec.validate()?;
    if items.iter().any(|it| it.annotations.is_empty()) {
        return Err(Error::Config("every training image needs at least one annotation".into()));
    }
    let parts = exec.try_map(items.len(), |i| {
        let it = &items[i];
        let mut set = SampleSet::new(spec.n_pixels());
        let mut skipped = 0usize;
        for (j, ann) in it.annotations.iter().enumerate() {
            let kp = match screw.keypoints(&ann.world_pose, it.geometry) {
                Ok(kp) => kp,
                Err(Error::DegenerateAxis) | Err(Error::BehindSource) => {
                    skipped += patches_per_image;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut rng = sample_rng(master_seed, it.id, j);
            for _ in 0..patches_per_image {
                let init = augment.draw_initial(&ann.image_pose, &mut rng);
                match extract_patch(it.image, &init, spec) {
                    Ok(patch) => {
                        let target = KeypointSet::from_pixels(&kp.pixels, &patch.frame);
                        set.push(&patch.pixels, &target);
                    }
                    Err(Error::EstimateOutOfImage(..)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
        }
        Ok((set, skipped))
    })?;
    let mut out = SampleSet::new(spec.n_pixels());
    let mut skipped = 0;
    for (s, k) in parts {
        out.append(&s);
        skipped += k;
    }
    if skipped > 0 {
        log::info!("skipped {skipped} augmented draws");
    }
    Ok((out, skipped))
}
