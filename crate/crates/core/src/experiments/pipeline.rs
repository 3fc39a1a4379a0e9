//! The single-condition steps shared by the CLI and both sweeps: annotate,
//! train, evaluate.

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::dataset::{Dataset, LoadedSplit, TRAIN, VAL};
use crate::estimator::estimate;
use crate::exec::Exec;
use crate::geometry::{forward_angle_error, position_error_mm, ImagePose};
use crate::noise::{annotate_dataset, save_annotations, AnnotationSet, AnnotationTarget, NoiseLevel};
use crate::regressor::{make_training_set, train, AugmentSpec, KeypointRegressor, SampleSet, TrainOutcome, TrainingItem};
use crate::seed;
use crate::{Error, Result};

/// Noisy annotations of every train and validation image, `k` per image,
/// written to `annotations/<eta>/k<k>.json`. The j-th annotation of an image
/// does not depend on `k`.
pub fn annotate(cfg: &ExperimentConfig, dataset: &Dataset, eta: f64, k: usize, exec: Exec) -> Result<AnnotationSet> {
    let nl = NoiseLevel::new(eta)?;
    let mut targets = Vec::new();
    for name in [TRAIN, VAL] {
        let split = dataset.split(name)?;
        for rec in &split.images {
            targets.push(AnnotationTarget {
                id: &rec.id,
                world_pose: rec.world_pose,
                geometry: split.geometry(rec),
            });
        }
    }
    let set = annotate_dataset(&targets, nl, k, cfg.seed, exec)?;
    save_annotations(&cfg.annotations_path(eta, k), &set)?;
    Ok(set)
}

/// Patches and targets for the given images of a split, using the first
/// `k` annotations of each.
pub fn build_samples(
    cfg: &ExperimentConfig,
    split: &LoadedSplit,
    indices: &[usize],
    annotations: &AnnotationSet,
    k: usize,
    exec: Exec,
) -> Result<(SampleSet, usize)> {
    let items = indices
        .iter()
        .map(|&i| {
            let rec = &split.meta.images[i];
            let anns = annotations
                .get(&rec.id)
                .filter(|a| a.len() >= k)
                .ok_or_else(|| Error::Config(format!("image {} has fewer than {k} annotations", rec.id)))?;
            Ok(TrainingItem {
                id: &rec.id,
                image: &split.images[i],
                geometry: split.geometry(i),
                annotations: &anns[..k],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    make_training_set(
        &items,
        &cfg.screw,
        &cfg.eval.estimator.patch,
        &cfg.training.augment,
        cfg.training.patches_per_image,
        cfg.seed,
        exec,
    )
}

/// Training statistics kept alongside each model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub train_images: usize,
    pub annotations_per_image: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub skipped_draws: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
}

/// Trains one model on `train_indices` of the train split (first `k`
/// annotations each) and selects the epoch by validation error on the whole
/// validation split (first annotation each).
pub fn train_condition(
    cfg: &ExperimentConfig,
    train_split: &LoadedSplit,
    val_split: &LoadedSplit,
    train_indices: &[usize],
    annotations: &AnnotationSet,
    k: usize,
    epochs: usize,
    exec: Exec,
) -> Result<(TrainOutcome, TrainingInfo)> {
    let (train_set, skipped) = build_samples(cfg, train_split, train_indices, annotations, k, exec)?;
    let all_val: Vec<usize> = (0..val_split.len()).collect();
    let (val_set, val_skipped) = build_samples(cfg, val_split, &all_val, annotations, 1, exec)?;
    let net_cfg = crate::regressor::NetworkConfig {
        epochs,
        ..cfg.training.network.clone()
    };
    log::info!(
        "training on {} samples from {} images, {} epochs",
        train_set.len(),
        train_indices.len(),
        epochs
    );
    let outcome = train(&net_cfg, &train_set, &val_set)?;
    let info = TrainingInfo {
        train_images: train_indices.len(),
        annotations_per_image: k,
        train_samples: train_set.len(),
        val_samples: val_set.len(),
        skipped_draws: skipped + val_skipped,
        epochs,
        best_epoch: outcome.best.epoch,
        best_val_mse: outcome.best.val_error,
    };
    Ok((outcome, info))
}

/// One evaluation: a test image, a repetition (initial-estimate draw) and
/// the resulting errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub image_id: String,
    pub repetition: usize,
    pub iterations: usize,
    pub x_gt_u: f64,
    pub x_gt_v: f64,
    pub x_est_u: f64,
    pub x_est_v: f64,
    pub alpha_gt: f64,
    pub alpha_est: f64,
    pub position_error_mm: f64,
    pub forward_angle_error_deg: f64,
    pub fallback: bool,
    pub aborted: bool,
    /// Position error of the initial estimate and after each iteration.
    #[serde(skip)]
    pub trace_position_error_mm: Vec<f64>,
}

/// Initial estimate for a test image and repetition. Depends only on the
/// master seed, so every condition sees the same draws.
pub fn initial_estimate(master: u64, image_id: &str, repetition: usize, gt: &ImagePose, augment: &AugmentSpec) -> ImagePose {
    let mut rng = seed::child_rng(master, &[seed::tag("initial"), seed::tag(image_id), repetition as u64]);
    augment.draw_initial(gt, &mut rng)
}

/// Runs the estimator `repetitions` times on every image of `split`.
pub fn evaluate(
    cfg: &ExperimentConfig,
    model: &dyn KeypointRegressor,
    split: &LoadedSplit,
    exec: Exec,
) -> Result<Vec<EvalRow>> {
    let reps = cfg.eval.repetitions;
    let est_cfg = &cfg.eval.estimator;
    exec.try_map(split.len() * reps, |job| {
        let (i, r) = (job / reps, job % reps);
        let rec = &split.meta.images[i];
        let g = split.geometry(i);
        let gt = rec.image_pose;
        let init = initial_estimate(cfg.seed, &rec.id, r, &gt, &cfg.training.augment);
        let res = estimate(&split.images[i], &init, est_cfg, model)?;
        let trace = res
            .trace
            .iter()
            .map(|p| position_error_mm(&rec.world_pose, p.x_instr, g))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalRow {
            image_id: rec.id.clone(),
            repetition: r,
            iterations: res.trace.len() - 1,
            x_gt_u: gt.x_instr.u,
            x_gt_v: gt.x_instr.v,
            x_est_u: res.pose.x_instr.u,
            x_est_v: res.pose.x_instr.v,
            alpha_gt: gt.alpha,
            alpha_est: res.pose.alpha,
            position_error_mm: *trace.last().expect("trace holds the initial estimate"),
            forward_angle_error_deg: forward_angle_error(gt.alpha, res.pose.alpha),
            fallback: res.fallback,
            aborted: res.aborted,
            trace_position_error_mm: trace,
        })
    })
}

/// Mean size of one detector pixel projected onto the instrument plane (mm).
pub fn instrument_plane_pixel_mm(split: &LoadedSplit) -> f64 {
    let sum: f64 = (0..split.len())
        .map(|i| {
            let g = split.geometry(i);
            g.pixel_spacing / g.magnification_at(&split.meta.images[i].world_pose.origin)
        })
        .sum();
    sum / split.len().max(1) as f64
}
