use std::collections::BTreeSet;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Network;
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Adam hyper-parameters, using the bias-corrected step size and an epsilon
/// added to `sqrt(v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "adam step size must be positive, got {}",
                self.step_size
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidConfig(format!("{name} = {b} outside (0, 1)")));
            }
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig("adam epsilon must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Adam state over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    t: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, tensor_sizes: &[usize]) -> Self {
        Adam {
            config,
            t: 0,
            first: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update over every tensor. `params[i]` and `grads[i]` must have the
    /// size given for tensor `i` at construction.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grads.len(), self.first.len());
        self.t += 1;
        let AdamConfig {
            step_size,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let alpha_t = step_size * (1.0 - beta2.powi(self.t)).sqrt() / (1.0 - beta1.powi(self.t));
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= alpha_t * m[i] / (v[i].sqrt() + epsilon);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best validation accuracy seen at any epoch end
    /// (epoch 0 being the untrained network).
    pub network: Network,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub history: Vec<EpochStats>,
}

/// Mini-batch Adam on softmax cross-entropy with per-epoch shuffling.
pub fn train(
    net: Network,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if val_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    if cfg.epochs > 0 && train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let classes = net.config().num_classes();
    if let Some(&label) = train_set
        .labels()
        .iter()
        .chain(val_set.labels())
        .find(|&&y| y >= classes)
    {
        return Err(Error::LabelOutOfRange { label, classes });
    }

    let mut best_val_accuracy = net.accuracy(val_set)?;
    let mut best = net.clone();
    let mut best_epoch = 0;
    let mut history = vec![EpochStats {
        epoch: 0,
        train_loss: f64::NAN,
        val_accuracy: best_val_accuracy,
    }];

    let sizes: Vec<usize> = net
        .weights()
        .iter()
        .zip(net.biases())
        .flat_map(|(w, b)| [w.len(), b.len()])
        .collect();
    let mut adam = Adam::new(cfg.adam, &sizes);
    let mut net = net;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let inputs = train_set.inputs();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Array2<f64> = inputs.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels()[i]).collect();
            let (loss, grads) = net.loss_and_gradient(batch.view(), &labels, Some(rng.gen()))?;
            loss_sum += loss * chunk.len() as f64;
            let grad_slices: Vec<&[f64]> = grads
                .weights
                .iter()
                .zip(&grads.biases)
                .flat_map(|(w, b)| {
                    [
                        w.as_slice().expect("standard layout"),
                        b.as_slice().expect("standard layout"),
                    ]
                })
                .collect();
            let mut params = net.params_and_slots();
            adam.step(&mut params, &grad_slices);
        }
        let val_accuracy = net.accuracy(val_set)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy,
        });
        log::debug!("epoch {epoch}: val accuracy {val_accuracy:.4}");
        if val_accuracy > best_val_accuracy {
            best_val_accuracy = val_accuracy;
            best = net.clone();
            best_epoch = epoch;
        }
    }

    Ok(TrainOutcome {
        network: best,
        best_epoch,
        best_val_accuracy,
        history,
    })
}

/// Appends `copies - 1` extra copies of each flagged point after the original
/// points, so every flagged point appears `copies` times in total. Training
/// reshuffles every epoch.
pub fn oversample(ds: &Dataset, indices: &BTreeSet<usize>, copies: usize) -> Result<Dataset> {
    if copies == 0 {
        return Err(Error::InvalidArgument("copies must be at least 1".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::InvalidArgument(format!(
            "index {bad} out of range for dataset of {} points",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for _ in 1..copies {
        order.extend(indices.iter().copied());
    }
    ds.subset(&order)
}
