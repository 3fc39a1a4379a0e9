use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::estimator::EstimatorConfig;
use crate::geometry::CArm;
use crate::phantom::{AnatomySpec, ScrewModel};
use crate::regressor::{AugmentSpec, NetworkConfig};
use crate::{Error, Result};

/// How the dataset is laid out and how image poses are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub anatomy_seeds: Vec<u64>,
    /// Index into `anatomy_seeds` of the anatomy reserved for test and expert images.
    pub test_anatomy: usize,
    pub references_per_anatomy: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Number of two-view expert tasks.
    pub expert: usize,
    pub position_sigma_mm: f64,
    pub cone_deg: f64,
    /// C-arm angles available to train, validation and test images.
    pub view_angles_deg: Vec<f64>,
    /// Angle between the two views of an expert task.
    pub expert_view_separation_deg: f64,
    /// Poses with |tilt| at or above this are redrawn.
    pub max_tilt_deg: f64,
    /// Minimum distance of the projected origin from the image border.
    pub border_margin_px: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            anatomy_seeds: vec![101, 202, 303],
            test_anatomy: 2,
            references_per_anatomy: 20,
            train: 1000,
            val: 200,
            test: 100,
            expert: 20,
            position_sigma_mm: 5.0,
            cone_deg: 20.0,
            view_angles_deg: vec![-30.0, -15.0, 0.0, 15.0, 30.0],
            expert_view_separation_deg: 60.0,
            max_tilt_deg: 60.0,
            border_margin_px: 40.0,
        }
    }
}

impl DatasetSpec {
    /// Split sizes of the full-scale study (ten times the defaults).
    pub fn full_scale() -> Self {
        DatasetSpec {
            train: 10_000,
            val: 2_000,
            test: 1_000,
            expert: 200,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.anatomy_seeds.len() < 2 {
            return bad("need at least two anatomies".into());
        }
        if self.test_anatomy >= self.anatomy_seeds.len() {
            return bad(format!("test_anatomy {} out of range", self.test_anatomy));
        }
        let mut seeds = self.anatomy_seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.anatomy_seeds.len() {
            return bad("anatomy seeds must be distinct".into());
        }
        if self.references_per_anatomy == 0 || self.view_angles_deg.is_empty() {
            return bad("need at least one reference pose and one view angle".into());
        }
        if !(self.max_tilt_deg > 0.0 && self.max_tilt_deg < 90.0) || self.cone_deg < 0.0 || self.position_sigma_mm < 0.0 {
            return bad("invalid pose sampling parameters".into());
        }
        Ok(())
    }

    pub fn train_anatomies(&self) -> Vec<u64> {
        self.anatomy_seeds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.test_anatomy)
            .map(|(_, s)| *s)
            .collect()
    }

    pub fn test_anatomy_seed(&self) -> u64 {
        self.anatomy_seeds[self.test_anatomy]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSpec {
    /// Augmented patches drawn per (image, annotation).
    pub patches_per_image: usize,
    pub network: NetworkConfig,
    pub augment: AugmentSpec,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        TrainingSpec {
            patches_per_image: 20,
            network: NetworkConfig::default(),
            augment: AugmentSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub repetitions: usize,
    pub estimator: EstimatorConfig,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            repetitions: 10,
            estimator: EstimatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSweepSpec {
    pub etas: Vec<f64>,
}

impl Default for NoiseSweepSpec {
    fn default() -> Self {
        NoiseSweepSpec {
            etas: vec![0.0, 1.0, 2.0, 3.0, 4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SizeSweepSpec {
    pub sizes: Vec<usize>,
    pub eta: f64,
    /// Adds a condition with three annotations per image on the largest size.
    pub triple_annotation: bool,
    /// Also runs `interpolated_size`, a condition between the listed ones.
    pub include_interpolated: bool,
    pub interpolated_size: usize,
}

impl Default for SizeSweepSpec {
    fn default() -> Self {
        SizeSweepSpec {
            sizes: vec![16, 31, 63, 125, 500, 1000],
            eta: 4.0,
            triple_annotation: true,
            include_interpolated: false,
            interpolated_size: 250,
        }
    }
}

impl SizeSweepSpec {
    /// Sorted, deduplicated sizes including the optional interpolated one.
    pub fn effective_sizes(&self) -> Vec<usize> {
        let mut s = self.sizes.clone();
        if self.include_interpolated {
            s.push(self.interpolated_size);
        }
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Everything a pipeline run depends on. Serialized verbatim into every
/// result's provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Root of the `dataset/`, `annotations/`, `models/` and `results/` tree.
    pub workdir: PathBuf,
    pub dataset: DatasetSpec,
    pub anatomy: AnatomySpec,
    pub screw: ScrewModel,
    pub carm: CArm,
    /// Ray-march step in mm; 0 selects half the voxel spacing.
    pub render_step: f64,
    pub training: TrainingSpec,
    pub eval: EvalSpec,
    pub noise_sweep: NoiseSweepSpec,
    pub size_sweep: SizeSweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 7,
            workdir: PathBuf::from("work"),
            dataset: DatasetSpec::default(),
            anatomy: AnatomySpec::default(),
            screw: ScrewModel::default(),
            carm: CArm::default(),
            render_step: 0.0,
            training: TrainingSpec::default(),
            eval: EvalSpec::default(),
            noise_sweep: NoiseSweepSpec::default(),
            size_sweep: SizeSweepSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// A miniature configuration that runs the whole pipeline in seconds:
    /// coarse phantoms, a handful of images, a small network.
    pub fn smoke(workdir: &Path) -> Self {
        let mut cfg = ExperimentConfig {
            workdir: workdir.to_path_buf(),
            ..Default::default()
        };
        cfg.anatomy.dims = [32, 32, 32];
        cfg.anatomy.spacing = [4.0, 4.0, 4.0];
        cfg.anatomy.n_inclusions = 5;
        cfg.dataset.train = 8;
        cfg.dataset.val = 4;
        cfg.dataset.test = 3;
        cfg.dataset.expert = 2;
        cfg.training.patches_per_image = 4;
        cfg.training.network.hidden = vec![8];
        cfg.training.network.epochs = 3;
        cfg.training.network.batch_size = 8;
        cfg.eval.repetitions = 2;
        cfg.noise_sweep.etas = vec![0.0, 2.0];
        cfg.size_sweep.sizes = vec![2, 4, 8];
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Applies `key.path=value`. The value is parsed as JSON when possible and
    /// taken as a string otherwise. The key must name an existing field.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        let key = key.trim();
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = match slot {
                Value::Object(map) => map.get_mut(part),
                Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("`{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.anatomy.validate()?;
        self.screw.validate()?;
        self.training.network.validate()?;
        self.eval.estimator.validate()?;
        if self.training.network.input != self.eval.estimator.patch.n_pixels() {
            return Err(Error::Config(format!(
                "network input {} does not match patch size {}",
                self.training.network.input,
                self.eval.estimator.patch.n_pixels()
            )));
        }
        if self.training.patches_per_image == 0 || self.eval.repetitions == 0 {
            return Err(Error::Config("patches_per_image and repetitions must be >= 1".into()));
        }
        if self.render_step < 0.0 {
            return Err(Error::Config("render_step must be >= 0".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        if self.render_step > 0.0 {
            self.render_step
        } else {
            0.5 * self.anatomy.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
        }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.workdir.join("dataset")
    }

    pub fn annotations_path(&self, eta: f64, k: usize) -> PathBuf {
        self.workdir.join("annotations").join(eta_label(eta)).join(format!("k{k}.json"))
    }

    pub fn model_path(&self, name: &str) -> PathBuf {
        self.workdir.join("models").join(format!("{name}.ckpt"))
    }

    pub fn results_dir(&self, experiment: &str) -> PathBuf {
        self.workdir.join("results").join(experiment)
    }
}

/// Directory-safe rendering of a noise level (`4`, `0.5`).
pub fn eta_label(eta: f64) -> String {
    format!("{eta}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_touch_one_field() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("dataset.train=400").unwrap();
        assert_eq!(cfg.dataset.train, 400);
        let mut expected = ExperimentConfig::default();
        expected.dataset.train = 400;
        assert_eq!(cfg, expected);

        cfg.apply_override("workdir=/tmp/x").unwrap();
        assert_eq!(cfg.workdir, PathBuf::from("/tmp/x"));
        cfg.apply_override("noise_sweep.etas=[0,2,4]").unwrap();
        assert_eq!(cfg.noise_sweep.etas, vec![0.0, 2.0, 4.0]);
        cfg.apply_override("dataset.view_angles_deg.1=5").unwrap();
        assert_eq!(cfg.dataset.view_angles_deg[1], 5.0);

        assert!(cfg.apply_override("dataset.trian=4").is_err());
        assert!(cfg.apply_override("dataset.train=many").is_err());
        assert!(cfg.apply_override("novalue").is_err());
    }

    #[test]
    fn file_round_trip_and_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let cfg = ExperimentConfig::default();
        cfg.save(&p).unwrap();
        assert_eq!(ExperimentConfig::load(&p).unwrap(), cfg);
        std::fs::write(&p, r#"{"seed": 5, "dataset": {"train": 12}}"#).unwrap();
        let partial = ExperimentConfig::load(&p).unwrap();
        assert_eq!((partial.seed, partial.dataset.train, partial.dataset.val), (5, 12, 200));
        cfg.validate().unwrap();
    }

    #[test]
    fn split_contract() {
        let d = DatasetSpec::default();
        assert!(!d.train_anatomies().contains(&d.test_anatomy_seed()));
        assert_eq!(d.train_anatomies().len(), 2);
        let mut dup = d.clone();
        dup.anatomy_seeds = vec![1, 1, 2];
        assert!(dup.validate().is_err());
    }
}
