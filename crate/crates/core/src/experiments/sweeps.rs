//! Noise-level and dataset-size sweeps. Every condition shares the test
//! images, repetitions and initial estimates; only the training data differs.

use rand::seq::SliceRandom;

use super::config::{eta_label, ExperimentConfig};
use super::dataset::{Dataset, LoadedSplit, TEST, TRAIN, VAL};
use super::pipeline::{annotate, evaluate, train_condition};
use super::report::{write_results, ConditionResult, ExperimentResult};
use crate::exec::Exec;
use crate::noise::AnnotationSet;
use crate::seed;
use crate::{Error, Result};

/// Decoded train, validation and test splits.
pub struct LoadedData {
    pub dataset: Dataset,
    pub train: LoadedSplit,
    pub val: LoadedSplit,
    pub test: LoadedSplit,
}

pub fn load_data(cfg: &ExperimentConfig, exec: Exec) -> Result<LoadedData> {
    let dataset = Dataset::open(&cfg.dataset_dir())?;
    Ok(LoadedData {
        train: dataset.load_split(TRAIN, exec)?,
        val: dataset.load_split(VAL, exec)?,
        test: dataset.load_split(TEST, exec)?,
        dataset,
    })
}

/// Trains, saves and evaluates one condition.
#[allow(clippy::too_many_arguments)]
fn run_condition(
    cfg: &ExperimentConfig,
    data: &LoadedData,
    label: &str,
    x: Option<f64>,
    indices: &[usize],
    annotations: &AnnotationSet,
    k: usize,
    epochs: usize,
    exec: Exec,
) -> Result<ConditionResult> {
    log::info!("condition {label}");
    let (outcome, info) = train_condition(cfg, &data.train, &data.val, indices, annotations, k, epochs, exec)?;
    let path = cfg.model_path(label);
    outcome.best.save(&path)?;
    let rows = evaluate(cfg, &outcome.best, &data.test, exec)?;
    Ok(ConditionResult {
        label: label.to_string(),
        x,
        training: Some(info),
        model_file: format!("models/{label}.ckpt"),
        model_hash: crate::renderer::short_hash(&outcome.best.to_bytes()),
        rows,
    })
}

/// One model per noise level, trained on all training images.
pub fn run_noise_sweep(cfg: &ExperimentConfig, exec: Exec) -> Result<ExperimentResult> {
    cfg.validate()?;
    if cfg.noise_sweep.etas.is_empty() {
        return Err(Error::Config("noise sweep needs at least one eta".into()));
    }
    let data = load_data(cfg, exec)?;
    let all: Vec<usize> = (0..data.train.len()).collect();
    let mut conditions = Vec::new();
    for &eta in &cfg.noise_sweep.etas {
        let ann = annotate(cfg, &data.dataset, eta, 1, exec)?;
        let label = format!("eta_{}", eta_label(eta));
        conditions.push(run_condition(
            cfg,
            &data,
            &label,
            Some(eta),
            &all,
            &ann,
            1,
            cfg.training.network.epochs,
            exec,
        )?);
    }
    let result = ExperimentResult {
        name: "noise_sweep".into(),
        x_name: "eta".into(),
        conditions,
    };
    write_results(&cfg.results_dir(&result.name), &result, cfg)?;
    Ok(result)
}

/// Epochs giving `size × k` samples per epoch the same number of gradient
/// updates as `base_epochs` on `max_size` single-annotated images.
pub fn normalized_epochs(base_epochs: usize, max_size: usize, size: usize, k: usize) -> usize {
    (base_epochs * max_size).div_ceil(size * k)
}

/// Random order of the training images; the first `s` entries form the
/// subset of size `s`, so smaller subsets are contained in larger ones.
pub fn subset_order(master: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::child_rng(master, &[seed::tag("subset")]));
    order
}

/// One model per training-set size at a fixed noise level, all with the same
/// number of gradient updates; optionally a triple-annotated largest size.
pub fn run_size_sweep(cfg: &ExperimentConfig, exec: Exec) -> Result<ExperimentResult> {
    cfg.validate()?;
    let spec = &cfg.size_sweep;
    let sizes = spec.effective_sizes();
    let max = *sizes.last().ok_or_else(|| Error::Config("size sweep needs at least one size".into()))?;
    let data = load_data(cfg, exec)?;
    if max > data.train.len() {
        return Err(Error::SizeExceedsDataset {
            size: max,
            available: data.train.len(),
        });
    }
    if sizes[0] == 0 {
        return Err(Error::Config("sizes must be >= 1".into()));
    }
    let k = if spec.triple_annotation { 3 } else { 1 };
    let ann = annotate(cfg, &data.dataset, spec.eta, k, exec)?;
    let order = subset_order(cfg.seed, data.train.len());
    let base = cfg.training.network.epochs;
    let mut conditions = Vec::new();
    for &s in &sizes {
        let mut idx = order[..s].to_vec();
        idx.sort_unstable();
        let epochs = normalized_epochs(base, max, s, 1);
        conditions.push(run_condition(
            cfg,
            &data,
            &format!("n_{s}"),
            Some((s as f64).log10()),
            &idx,
            &ann,
            1,
            epochs,
            exec,
        )?);
    }
    if spec.triple_annotation {
        let mut idx = order[..max].to_vec();
        idx.sort_unstable();
        conditions.push(run_condition(
            cfg,
            &data,
            &format!("n_{max}_x3"),
            None,
            &idx,
            &ann,
            3,
            normalized_epochs(base, max, max, 3),
            exec,
        )?);
    }
    let result = ExperimentResult {
        name: "size_sweep".into(),
        x_name: "log10_train_images".into(),
        conditions,
    };
    write_results(&cfg.results_dir(&result.name), &result, cfg)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_normalization() {
        assert_eq!(normalized_epochs(40, 1000, 1000, 1), 40);
        assert_eq!(normalized_epochs(40, 1000, 63, 1), 635);
        assert_eq!(normalized_epochs(40, 10_000, 155, 1), 2581);
        assert_eq!(normalized_epochs(40, 1000, 1000, 3), 14);
    }

    #[test]
    fn subsets_are_nested_permutations() {
        let o = subset_order(3, 50);
        let mut sorted = o.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(o, subset_order(3, 50));
        let small: Vec<usize> = o[..10].to_vec();
        assert!(small.iter().all(|i| o[..25].contains(i)));
    }
}
