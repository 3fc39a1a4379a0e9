use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{KeypointRegressor, KeypointSet, N_OUTPUTS};
use crate::patchify::Patch;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    /// Negative-side slope of the leaky ReLU.
    pub leaky_slope: f64,
    pub init_seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning-rate multiplier applied at each milestone.
    pub lr_decay: f64,
    /// Milestones as fractions of the total epoch count.
    pub lr_milestones: Vec<f64>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input: 64 * 32,
            hidden: vec![256, 64],
            output: N_OUTPUTS,
            leaky_slope: 0.01,
            init_seed: 1,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 40,
            lr_decay: 0.3,
            lr_milestones: vec![0.5, 0.8],
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.input > 0
            && self.output == N_OUTPUTS
            && self.hidden.iter().all(|&h| h > 0)
            && self.leaky_slope >= 0.0
            && self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size > 0
            && self.epochs > 0
            && self.lr_decay > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid network config: {self:?}")))
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize)
            .count();
        self.learning_rate * self.lr_decay.powi(passed as i32)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }
}

/// Fully connected layer, `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Leaky-ReLU MLP with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub leaky_slope: f64,
}

/// Same layout as [`Network::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    /// Same order as [`Network::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }
}

impl Network {
    /// He-uniform hidden layers, Glorot-uniform output layer, zero biases.
    pub fn init(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::seed::child_rng(cfg.init_seed, &[crate::seed::tag("init")]);
        let widths = cfg.widths();
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let a = if l + 1 == n {
                    (6.0 / (fan_in + fan_out) as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-a..a));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Network {
            layers,
            leaky_slope: cfg.leaky_slope,
        })
    }

    pub fn zeros(widths: &[usize], leaky_slope: f64) -> Self {
        Network {
            layers: widths
                .windows(2)
                .map(|w| Layer {
                    weights: Array2::zeros((w[1], w[0])),
                    bias: Array1::zeros(w[1]),
                })
                .collect(),
            leaky_slope,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in layer order, each layer as row-major weights then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = *it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = *it.next().unwrap());
        }
        Ok(())
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_width() {
            return Err(Error::ShapeMismatch {
                expected: self.input_width(),
                got: width,
            });
        }
        Ok(())
    }

    #[inline]
    fn act(&self, z: f64) -> f64 {
        if z > 0.0 {
            z
        } else {
            self.leaky_slope * z
        }
    }

    /// Batched forward pass; rows of `x` are samples.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.weights.t());
            z += &l.bias;
            if i < last {
                z.mapv_inplace(|v| self.act(v));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward(&self, input: &[f32]) -> Result<KeypointSet> {
        self.check_input(input.len())?;
        if self.output_width() != N_OUTPUTS {
            return Err(Error::ShapeMismatch {
                expected: N_OUTPUTS,
                got: self.output_width(),
            });
        }
        let x = Array2::from_shape_fn((1, input.len()), |(_, j)| input[j] as f64);
        let y = self.forward_batch(x.view())?;
        Ok(KeypointSet(std::array::from_fn(|k| y[[0, k]])))
    }

    /// Mean-squared error over all outputs and rows, and its gradient with
    /// respect to every parameter.
    pub fn loss_and_gradients(&self, x: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<(f64, Gradients)> {
        self.check_input(x.ncols())?;
        if targets.ncols() != self.output_width() || targets.nrows() != x.nrows() {
            return Err(Error::ShapeMismatch {
                expected: x.nrows() * self.output_width(),
                got: targets.len(),
            });
        }
        let last = self.layers.len() - 1;
        // pre-activations and activations per layer
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len() + 1);
        let mut pre: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        acts.push(x.to_owned());
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&l.weights.t());
            z += &l.bias;
            let a = if i < last { z.mapv(|v| self.act(v)) } else { z.clone() };
            pre.push(z);
            acts.push(a);
        }
        let y = &acts[self.layers.len()];
        let diff = y - &targets;
        let count = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;

        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = diff * (2.0 / count);
        for i in (0..self.layers.len()).rev() {
            let gw = delta.t().dot(&acts[i]);
            let gb = delta.sum_axis(Axis(0));
            grads.push(Layer { weights: gw, bias: gb });
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weights);
                let slope = self.leaky_slope;
                back.zip_mut_with(&pre[i - 1], |d, &z| {
                    if z <= 0.0 {
                        *d *= slope;
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }

    /// Gradients for a single sample.
    pub fn backward(&self, input: &[f32], target: &KeypointSet) -> Result<Gradients> {
        let x = Array2::from_shape_fn((1, input.len()), |(_, j)| input[j] as f64);
        let t = Array2::from_shape_fn((1, N_OUTPUTS), |(_, j)| target.0[j]);
        Ok(self.loss_and_gradients(x.view(), t.view())?.1)
    }
}

impl KeypointRegressor for Network {
    fn predict(&self, patch: &Patch) -> Result<KeypointSet> {
        self.forward(&patch.pixels)
    }
}
