use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ModelCheckpoint, Network, NetworkConfig, SampleSet};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation error.
    pub best: ModelCheckpoint,
    pub history: Vec<EpochStats>,
}

fn batch(set: &SampleSet, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
    let w = set.input_width;
    let x = Array2::from_shape_fn((idx.len(), w), |(r, c)| set.inputs[idx[r] * w + c] as f64);
    let t = Array2::from_shape_fn((idx.len(), set.target_width()), |(r, c)| {
        set.targets[idx[r] * set.target_width() + c]
    });
    (x, t)
}

/// Mean-squared error of `net` over a sample set, evaluated in fixed-size
/// chunks in sample order.
pub fn evaluate_mse(net: &Network, set: &SampleSet) -> Result<f64> {
    let mut sum = 0.0;
    let chunk = 256;
    let order: Vec<usize> = (0..set.len()).collect();
    for idx in order.chunks(chunk) {
        let (x, t) = batch(set, idx);
        let y = net.forward_batch(x.view())?;
        sum += (&y - &t).iter().map(|d| d * d).sum::<f64>();
    }
    Ok(sum / (set.len() * set.target_width()) as f64)
}

fn sgd_step(net: &mut Network, velocity: &mut Network, x: ArrayView2<f64>, t: ArrayView2<f64>, lr: f64, momentum: f64) -> Result<f64> {
    let (loss, grads) = net.loss_and_gradients(x, t)?;
    for ((layer, vel), g) in net.layers.iter_mut().zip(&mut velocity.layers).zip(&grads.layers) {
        vel.weights.zip_mut_with(&g.weights, |v, &gw| *v = momentum * *v - lr * gw);
        vel.bias.zip_mut_with(&g.bias, |v, &gb| *v = momentum * *v - lr * gb);
        layer.weights += &vel.weights;
        layer.bias += &vel.bias;
    }
    Ok(loss)
}

/// Minibatch SGD with momentum on the mean-squared keypoint error. The
/// validation error is measured after every epoch and the best epoch's
/// parameters are returned. Shuffling is seeded from the config, so runs are
/// reproducible bit for bit.
pub fn train(cfg: &NetworkConfig, train_set: &SampleSet, val_set: &SampleSet) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    if train_set.input_width != cfg.input || val_set.input_width != cfg.input {
        return Err(Error::ShapeMismatch {
            expected: cfg.input,
            got: train_set.input_width,
        });
    }
    let mut net = Network::init(cfg)?;
    let mut velocity = Network::zeros(&cfg.widths(), cfg.leaky_slope);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Network)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = crate::seed::child_rng(cfg.init_seed, &[crate::seed::tag("shuffle"), epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (x, t) = batch(train_set, idx);
            let loss = sgd_step(&mut net, &mut velocity, x.view(), t.view(), lr, cfg.momentum)?;
            if !loss.is_finite() {
                return Err(Error::DivergenceDetected { epoch: epoch + 1, loss });
            }
            loss_sum += loss;
            batches += 1;
        }
        let val = evaluate_mse(&net, val_set)?;
        if !val.is_finite() {
            return Err(Error::DivergenceDetected { epoch: epoch + 1, loss: val });
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            learning_rate: lr,
            train_mse: loss_sum / batches as f64,
            val_mse: val,
        };
        log::debug!("epoch {:>4}: lr {:.2e} train {:.6} val {:.6}", stats.epoch, lr, stats.train_mse, val);
        history.push(stats);
        if best.as_ref().is_none_or(|(b, _, _)| val < *b) {
            best = Some((val, epoch + 1, net.clone()));
        }
    }
    let (val_error, epoch, network) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: ModelCheckpoint::new(cfg.clone(), epoch, val_error, network),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn linear_task(n: usize, input: usize, seed: u64) -> SampleSet {
        let mut rng = crate::seed::rng(seed);
        let a: Vec<f64> = (0..12 * input).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut set = SampleSet::new(input);
        for _ in 0..n {
            let x: Vec<f32> = (0..input).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let mut t = [0.0; 12];
            for (k, tk) in t.iter_mut().enumerate() {
                *tk = 0.1 * k as f64
                    + (0..input).map(|j| a[k * input + j] * x[j] as f64).sum::<f64>();
            }
            set.push(&x, &super::super::KeypointSet(t));
        }
        set
    }

    fn linear_cfg() -> NetworkConfig {
        NetworkConfig {
            input: 6,
            hidden: vec![],
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 16,
            epochs: 150,
            lr_milestones: vec![],
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn learns_linear_map() {
        let tr = linear_task(512, 6, 1);
        let va = linear_task(64, 6, 1);
        let out = train(&linear_cfg(), &tr, &va).unwrap();
        let mse = evaluate_mse(&out.best.network, &tr).unwrap();
        assert!(mse < 1e-6, "final mse {mse}");
    }

    #[test]
    fn returns_epoch_with_lowest_validation_error() {
        let tr = linear_task(128, 6, 2);
        let va = linear_task(32, 6, 3);
        let cfg = NetworkConfig {
            hidden: vec![8],
            epochs: 12,
            ..linear_cfg()
        };
        let out = train(&cfg, &tr, &va).unwrap();
        let best = out
            .history
            .iter()
            .min_by(|a, b| a.val_mse.total_cmp(&b.val_mse))
            .unwrap();
        assert_eq!(out.best.epoch, best.epoch);
        assert_eq!(out.best.val_error, best.val_mse);
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let tr = linear_task(40, 6, 4);
        let cfg = NetworkConfig {
            learning_rate: 0.0,
            hidden: vec![5],
            epochs: 3,
            ..linear_cfg()
        };
        let out = train(&cfg, &tr, &tr).unwrap();
        assert_eq!(out.best.network, Network::init(&cfg).unwrap());
    }

    #[test]
    fn identical_seeds_give_identical_models() {
        let tr = linear_task(100, 6, 5);
        let cfg = NetworkConfig {
            hidden: vec![7, 4],
            epochs: 4,
            ..linear_cfg()
        };
        let a = train(&cfg, &tr, &tr).unwrap();
        let b = train(&cfg, &tr, &tr).unwrap();
        assert_eq!(a.best.network.flat_params(), b.best.network.flat_params());
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let tr = linear_task(100, 6, 6);
        let cfg = NetworkConfig {
            learning_rate: 1e6,
            hidden: vec![16],
            ..linear_cfg()
        };
        assert!(matches!(train(&cfg, &tr, &tr), Err(Error::DivergenceDetected { .. })));
    }
}
