//! Dense feed-forward classifiers with inverted dropout, softmax output and
//! full activation tracing.
//!
//! Weights for layer `l` are stored as a `fan_in × fan_out` matrix, so a batch
//! of row vectors `X` maps to `X·W + b`.

mod train;

pub use train::{oversample, train, Adam, AdamConfig, EpochStats, TrainConfig, TrainOutcome};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Sigmoid,
    Relu,
    /// Linear pass-through; mostly useful for convex test problems.
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Identity => {}
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Shape, activations and dropout of a network.
///
/// `dropout_rates` is either empty (no dropout) or holds one rate for the input
/// layer followed by one per hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    #[serde(default)]
    pub dropout_rates: Vec<f64>,
}

impl NetworkConfig {
    /// Sigmoid hidden layers without dropout.
    pub fn new(layer_sizes: Vec<usize>) -> Self {
        let hidden = layer_sizes.len().saturating_sub(2);
        NetworkConfig {
            layer_sizes,
            activations: vec![Activation::Sigmoid; hidden],
            dropout_rates: Vec::new(),
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activations = vec![activation; self.hidden_layers()];
        self
    }

    pub fn with_dropout(mut self, rates: Vec<f64>) -> Self {
        self.dropout_rates = rates;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::InvalidConfig(format!(
                "need input, at least one hidden and an output layer; got {} layer sizes",
                self.layer_sizes.len()
            )));
        }
        if let Some(pos) = self.layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidConfig(format!("layer {pos} has size zero")));
        }
        if self.activations.len() != self.hidden_layers() {
            return Err(Error::InvalidConfig(format!(
                "{} activations for {} hidden layers",
                self.activations.len(),
                self.hidden_layers()
            )));
        }
        if !self.dropout_rates.is_empty() && self.dropout_rates.len() != self.hidden_layers() + 1 {
            return Err(Error::InvalidConfig(format!(
                "expected {} dropout rates (input + hidden), got {}",
                self.hidden_layers() + 1,
                self.dropout_rates.len()
            )));
        }
        if let Some(r) = self
            .dropout_rates
            .iter()
            .find(|r| !(r.is_finite() && (0.0..1.0).contains(*r)))
        {
            return Err(Error::InvalidConfig(format!(
                "dropout rate {r} outside [0, 1)"
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap_or(&0)
    }

    pub fn hidden_layers(&self) -> usize {
        self.layer_sizes.len().saturating_sub(2)
    }

    /// Number of traced layers: input, every hidden layer and the output.
    pub fn trace_len(&self) -> usize {
        self.layer_sizes.len()
    }

    fn dropout_rate(&self, traced_layer: usize) -> f64 {
        self.dropout_rates.get(traced_layer).copied().unwrap_or(0.0)
    }
}

/// Per-layer activations of a single input: the input itself, every hidden
/// layer after its nonlinearity, and the softmax output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub layers: Vec<Vec<f64>>,
}

impl ActivationTrace {
    pub fn output(&self) -> &[f64] {
        self.layers.last().map_or(&[], Vec::as_slice)
    }
}

/// Parameter gradients, shaped like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    /// Flattened in the same order as [`Network::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Values recorded during a training-mode forward pass.
struct BatchTape {
    /// What each weight matrix saw as input (after dropout), `layers - 1` entries.
    fed: Vec<Array2<f64>>,
    /// Hidden activations before dropout, used for the activation derivative.
    hidden: Vec<Array2<f64>>,
    /// Scaled keep masks per traced layer below the output (`None` when no dropout).
    masks: Vec<Option<Array2<f64>>>,
    logits: Array2<f64>,
}

impl Network {
    /// Xavier-uniform weights and zero biases.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in config.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| {
                rng.gen_range(-limit..=limit)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Network {
            config,
            weights,
            biases,
        })
    }

    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let weights = config
            .layer_sizes
            .windows(2)
            .map(|p| Array2::zeros((p[0], p[1])))
            .collect();
        let biases = config.layer_sizes[1..]
            .iter()
            .map(|&s| Array1::zeros(s))
            .collect();
        Ok(Network {
            config,
            weights,
            biases,
        })
    }

    pub fn from_parts(
        config: NetworkConfig,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        config.validate()?;
        let transitions = config.layer_sizes.len() - 1;
        if weights.len() != transitions || biases.len() != transitions {
            return Err(Error::InvalidConfig(format!(
                "expected {transitions} weight matrices and bias vectors, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in config.layer_sizes.windows(2).enumerate() {
            if weights[l].dim() != (pair[0], pair[1]) || biases[l].len() != pair[1] {
                return Err(Error::InvalidConfig(format!(
                    "layer {l} parameters do not match sizes {} -> {}",
                    pair[0], pair[1]
                )));
            }
        }
        let finite = weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && biases.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        Ok(Network {
            config,
            weights,
            biases,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn num_parameters(&self) -> usize {
        self.weights.iter().map(Array2::len).sum::<usize>()
            + self.biases.iter().map(Array1::len).sum::<usize>()
    }

    /// All parameters flattened: for each layer, its weights row-major, then its biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::LengthMismatch {
                what: "parameter vector",
                left: values.len(),
                right: self.num_parameters(),
            });
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = values[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub(crate) fn params_and_slots(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.config.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim(),
                got,
            });
        }
        Ok(())
    }

    /// Inference (no dropout) or, with `dropout_rng`, a training-mode pass with
    /// inverted dropout. Returns class probabilities and optionally the trace.
    pub fn forward<R: Rng>(
        &self,
        input: &[f64],
        record: bool,
        dropout_rng: Option<&mut R>,
    ) -> Result<(Vec<f64>, Option<ActivationTrace>)> {
        self.check_dim(input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let layers = match dropout_rng {
            Some(rng) => {
                let tape = self.forward_tape(x, Some(rng));
                let mut layers: Vec<Array2<f64>> = tape.fed;
                let mut probs = tape.logits;
                softmax_rows(&mut probs);
                layers.push(probs);
                layers
            }
            None => self.layer_outputs_unchecked(x),
        };
        let probs = layers.last().expect("output layer").row(0).to_vec();
        let trace = record.then(|| ActivationTrace {
            layers: layers.iter().map(|a| a.row(0).to_vec()).collect(),
        });
        Ok((probs, trace))
    }

    /// Inference-mode activations of every traced layer for a batch (one
    /// matrix per layer, one row per input).
    pub fn layer_outputs(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<Array2<f64>>> {
        self.check_dim(inputs.ncols())?;
        Ok(self.layer_outputs_unchecked(inputs))
    }

    fn layer_outputs_unchecked(&self, inputs: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        self.layers_upto(inputs, self.weights.len())
    }

    /// Activations of one traced layer (0 = input) for a batch, skipping later layers.
    pub(crate) fn layer_output(&self, inputs: ArrayView2<'_, f64>, layer: usize) -> Array2<f64> {
        self.layers_upto(inputs, layer).pop().expect("at least the input")
    }

    /// Traced layers `0..=layer` for a batch.
    fn layers_upto(&self, inputs: ArrayView2<'_, f64>, layer: usize) -> Vec<Array2<f64>> {
        let mut out = Vec::with_capacity(layer + 1);
        out.push(inputs.to_owned());
        let last = self.weights.len() - 1;
        for l in 0..layer {
            let mut z = out[l].dot(&self.weights[l]);
            z += &self.biases[l];
            if l == last {
                softmax_rows(&mut z);
            } else {
                self.config.activations[l].apply(&mut z);
            }
            out.push(z);
        }
        out
    }

    pub fn predict_proba(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_dim(inputs.ncols())?;
        Ok(self.layer_output(inputs, self.weights.len()))
    }

    pub fn predict(&self, inputs: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        Ok(self
            .predict_proba(inputs)?
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("contiguous row")))
            .collect())
    }

    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        if ds.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let preds = self.predict(ds.inputs())?;
        let correct = preds
            .iter()
            .zip(ds.labels())
            .filter(|(p, y)| p == y)
            .count();
        Ok(correct as f64 / ds.len() as f64)
    }

    fn forward_tape<R: Rng>(&self, x: ArrayView2<'_, f64>, mut rng: Option<&mut R>) -> BatchTape {
        let n_hidden = self.config.hidden_layers();
        let mut fed = Vec::with_capacity(n_hidden + 1);
        let mut hidden = Vec::with_capacity(n_hidden);
        let mut masks = Vec::with_capacity(n_hidden + 1);

        let mut current = x.to_owned();
        for l in 0..=n_hidden {
            if l > 0 {
                hidden.push(current.clone());
            }
            let rate = self.config.dropout_rate(l);
            let mask = match rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let m = Array2::from_shape_fn(current.raw_dim(), |_| {
                        if rng.gen::<f64>() < rate {
                            0.0
                        } else {
                            keep
                        }
                    });
                    current *= &m;
                    Some(m)
                }
                _ => None,
            };
            masks.push(mask);
            let mut z = current.dot(&self.weights[l]);
            z += &self.biases[l];
            fed.push(current);
            if l < n_hidden {
                self.config.activations[l].apply(&mut z);
            }
            current = z;
        }
        BatchTape {
            fed,
            hidden,
            masks,
            logits: current,
        }
    }

    /// Mean softmax cross-entropy over the batch and its gradient.
    ///
    /// `dropout_seed = None` disables dropout.
    pub fn loss_and_gradient(
        &self,
        inputs: ArrayView2<'_, f64>,
        labels: &[usize],
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Gradients)> {
        if inputs.nrows() == 0 {
            return Err(Error::Empty("batch"));
        }
        self.check_dim(inputs.ncols())?;
        if labels.len() != inputs.nrows() {
            return Err(Error::LengthMismatch {
                what: "batch inputs/labels",
                left: inputs.nrows(),
                right: labels.len(),
            });
        }
        let classes = self.config.num_classes();
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }

        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let tape = self.forward_tape(inputs, rng.as_mut());
        let batch = inputs.nrows() as f64;

        // log-softmax for the loss, softmax for the gradient
        let mut probs = tape.logits.clone();
        let mut loss = 0.0;
        for (row, &y) in tape.logits.rows().into_iter().zip(labels) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= batch;
        softmax_rows(&mut probs);

        let mut delta = probs;
        for (i, &y) in labels.iter().enumerate() {
            delta[[i, y]] -= 1.0;
        }
        delta /= batch;

        let transitions = self.weights.len();
        let mut grad_w = vec![Array2::zeros((0, 0)); transitions];
        let mut grad_b = vec![Array1::zeros(0); transitions];
        for l in (0..transitions).rev() {
            grad_w[l] = tape.fed[l].t().dot(&delta);
            grad_b[l] = delta.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let mut d = delta.dot(&self.weights[l].t());
            if let Some(mask) = &tape.masks[l] {
                d *= mask;
            }
            let act = self.config.activations[l - 1];
            Zip::from(&mut d)
                .and(&tape.hidden[l - 1])
                .for_each(|g, &a| *g *= act.derivative_from_output(a));
            delta = d;
        }
        Ok((
            loss,
            Gradients {
                weights: grad_w,
                biases: grad_b,
            },
        ))
    }

    /// Squared distance between traced layer `layer`'s activation and `target`,
    /// together with its gradient with respect to the input. Weights are fixed
    /// and dropout is off.
    pub fn layer_target_gradient(
        &self,
        input: &[f64],
        layer: usize,
        target: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        self.check_dim(input.len())?;
        let trace_len = self.config.trace_len();
        if layer >= trace_len {
            return Err(Error::LayerOutOfRange {
                index: layer,
                valid: format!("0..{trace_len}"),
            });
        }
        if target.len() != self.config.layer_sizes[layer] {
            return Err(Error::DimensionMismatch {
                expected: self.config.layer_sizes[layer],
                got: target.len(),
            });
        }
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let acts: Vec<Array1<f64>> = self
            .layers_upto(x, layer)
            .into_iter()
            .map(|a| a.row(0).to_owned())
            .collect();
        let out_layer = self.weights.len();
        let diff = &acts[layer] - &ArrayView1::from(target);
        let loss = diff.dot(&diff);
        let mut grad = diff * 2.0;
        for l in (0..layer).rev() {
            let a = &acts[l + 1];
            if l + 1 == out_layer {
                let gp = grad.dot(a);
                grad = a * &(grad - gp);
            } else {
                let act = self.config.activations[l];
                Zip::from(&mut grad)
                    .and(a)
                    .for_each(|g, &v| *g *= act.derivative_from_output(v));
            }
            grad = self.weights[l].dot(&grad);
        }
        Ok((loss, grad.to_vec()))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Serialize, Deserialize)]
struct NetworkFile {
    format_version: u32,
    config: NetworkConfig,
    /// Per layer, row-major `fan_in × fan_out`.
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

impl Serialize for Network {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        NetworkFile {
            format_version: NETWORK_FORMAT_VERSION,
            config: self.config.clone(),
            weights: self
                .weights
                .iter()
                .map(|w| w.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Network {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let file = NetworkFile::deserialize(d)?;
        if file.format_version != NETWORK_FORMAT_VERSION {
            return Err(D::Error::custom(format!(
                "unsupported network format version {}",
                file.format_version
            )));
        }
        let mut weights = Vec::with_capacity(file.weights.len());
        for rows in file.weights {
            let r = rows.len();
            let c = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|row| row.len() != c) {
                return Err(D::Error::custom("ragged weight matrix"));
            }
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            weights.push(Array2::from_shape_vec((r, c), flat).map_err(D::Error::custom)?);
        }
        let biases = file.biases.into_iter().map(Array1::from).collect();
        Network::from_parts(file.config, weights, biases).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    type NoRng = ChaCha8Rng;

    #[test]
    fn init_is_deterministic() {
        let cfg = NetworkConfig::new(vec![2, 3, 2]);
        let a = Network::init(cfg.clone(), 7).unwrap();
        let b = Network::init(cfg, 7).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        let bits = |n: &Network| n.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn init_biases_are_zero() {
        let net = Network::init(NetworkConfig::new(vec![4, 5, 3]), 1).unwrap();
        assert!(net.biases().iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn mnist_shape_parameter_count() {
        let net = Network::init(NetworkConfig::new(vec![784, 100, 100, 100, 100, 10]), 0).unwrap();
        // 784*100+100 + 3*(100*100+100) + 100*10+10 = 78_500 + 30_300 + 1_010
        assert_eq!(net.num_parameters(), 109_810);
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(Network::init(NetworkConfig::new(vec![2, 0, 2]), 0).is_err());
        assert!(Network::init(NetworkConfig::new(vec![2, 2]), 0).is_err());
        let bad_dropout = NetworkConfig::new(vec![2, 3, 2]).with_dropout(vec![0.1, 1.0]);
        assert!(Network::init(bad_dropout, 0).is_err());
    }

    #[test]
    fn zero_network_is_uniform() {
        let net = Network::zeros(NetworkConfig::new(vec![5, 4, 10])).unwrap();
        let (p, trace) = net.forward::<NoRng>(&[0.3; 5], true, None).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 0.1, epsilon = 1e-15);
        }
        let trace = trace.unwrap();
        assert_eq!(trace.layers.len(), 3);
        assert!(trace.layers[1].iter().all(|&h| h == 0.5));
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let net = Network::zeros(NetworkConfig::new(vec![3, 2, 2])).unwrap();
        assert!(matches!(
            net.forward::<NoRng>(&[1.0, 2.0], false, None),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn trace_only_when_recorded() {
        let net = Network::init(NetworkConfig::new(vec![3, 4, 2]), 3).unwrap();
        let (_, t) = net.forward::<NoRng>(&[0.1, 0.2, 0.3], false, None).unwrap();
        assert!(t.is_none());
    }

    fn reference_forward(net: &Network, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let n = net.weights().len();
        for l in 0..n {
            let w = &net.weights()[l];
            let b = &net.biases()[l];
            let mut z = vec![0.0; w.ncols()];
            for j in 0..w.ncols() {
                let mut s = b[j];
                for i in 0..w.nrows() {
                    s += a[i] * w[[i, j]];
                }
                z[j] = s;
            }
            if l + 1 == n {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                a = e.iter().map(|v| v / s).collect();
            } else {
                a = z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
            }
        }
        a
    }

    #[test]
    fn forward_matches_straight_line_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Network::init(NetworkConfig::new(vec![6, 5, 4, 3]), 5).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen()).collect();
            let (p, _) = net.forward::<NoRng>(&x, false, None).unwrap();
            let r = reference_forward(&net, &x);
            for (a, b) in p.iter().zip(&r) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
            assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let cfg = NetworkConfig::new(vec![2, 2, 3]);
        let w = vec![Array2::zeros((2, 2)), Array2::zeros((2, 3))];
        let b = vec![Array1::zeros(2), Array1::from(vec![0.0, 800.0, 0.0])];
        let net = Network::from_parts(cfg, w, b).unwrap();
        let x = Array2::from_shape_vec((1, 2), vec![0.5, 0.5]).unwrap();
        let (loss, _) = net.loss_and_gradient(x.view(), &[1], None).unwrap();
        assert!(loss.abs() < 1e-9);
    }

    #[test]
    fn uniform_prediction_loss_is_ln_classes() {
        let net = Network::zeros(NetworkConfig::new(vec![3, 4, 10])).unwrap();
        let x = Array2::from_elem((2, 3), 0.2);
        let (loss, _) = net.loss_and_gradient(x.view(), &[3, 7], None).unwrap();
        assert_abs_diff_eq!(loss, 10f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn loss_rejects_out_of_range_label() {
        let net = Network::zeros(NetworkConfig::new(vec![3, 4, 2])).unwrap();
        let x = Array2::from_elem((1, 3), 0.2);
        assert!(matches!(
            net.loss_and_gradient(x.view(), &[2], None),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn gradient_shapes_mirror_parameters() {
        let net = Network::init(NetworkConfig::new(vec![2, 4, 3]), 2).unwrap();
        let x = Array2::from_elem((3, 2), 0.4);
        let (_, g) = net.loss_and_gradient(x.view(), &[0, 1, 2], Some(9)).unwrap();
        for (gw, w) in g.weights.iter().zip(net.weights()) {
            assert_eq!(gw.dim(), w.dim());
        }
        for (gb, b) in g.biases.iter().zip(net.biases()) {
            assert_eq!(gb.len(), b.len());
        }
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let net = Network::init(
            NetworkConfig::new(vec![3, 5, 4, 2]).with_dropout(vec![0.1, 0.2, 0.3]),
            17,
        )
        .unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: Network = serde_json::from_str(&text).unwrap();
        let bits = |n: &Network| n.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&net), bits(&back));
        assert_eq!(net.config(), back.config());
        assert!(text.contains("\"format_version\":1"));
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let cfg = NetworkConfig::new(vec![4, 3, 2]).with_dropout(vec![0.5, 0.0]);
        let net = Network::init(cfg, 4).unwrap();
        let x = [0.2, 0.4, 0.6, 0.8];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 20_000;
        let mut mean = [0.0; 4];
        for _ in 0..draws {
            let (_, t) = net.forward(&x, true, Some(&mut rng)).unwrap();
            // layers[0] records the input after its dropout mask
            for (m, v) in mean.iter_mut().zip(&t.unwrap().layers[0]) {
                *m += v / draws as f64;
            }
        }
        for (m, v) in mean.iter().zip(&x) {
            assert!((m - v).abs() / v < 0.02, "{m} vs {v}");
        }
    }

    #[test]
    fn layer_target_gradient_matches_finite_differences() {
        let net = Network::init(NetworkConfig::new(vec![4, 5, 3, 3]), 8).unwrap();
        let x = [0.3, 0.6, 0.2, 0.9];
        for layer in 1..4 {
            let width = net.config().layer_sizes[layer];
            let target: Vec<f64> = (0..width).map(|i| 0.1 + 0.2 * i as f64).collect();
            let (_, g) = net.layer_target_gradient(&x, layer, &target).unwrap();
            let h = 1e-6;
            for i in 0..4 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let lp = net.layer_target_gradient(&xp, layer, &target).unwrap().0;
                let lm = net.layer_target_gradient(&xm, layer, &target).unwrap().0;
                assert_abs_diff_eq!(g[i], (lp - lm) / (2.0 * h), epsilon = 1e-7);
            }
        }
        assert!(net.layer_target_gradient(&x, 4, &[0.0; 3]).is_err());
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        let mut net = Network::init(NetworkConfig::new(vec![2, 4, 3]), 17).unwrap();
        for b in 0..2 {
            let len = net.biases[b].len();
            net.biases[b] = Array1::from_iter((0..len).map(|i| 0.1 * i as f64 - 0.15));
        }
        let x = ndarray::arr2(&[[0.2, 0.9], [0.7, 0.1], [0.5, 0.5], [0.0, 1.0], [0.3, 0.8]]);
        let y = [0, 2, 1, 2, 0];
        let (_, g) = net.loss_and_gradient(x.view(), &y, None).unwrap();
        let analytic = g.flatten();
        let theta = net.parameters();
        let h = 1e-4;
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[i] += h;
            minus[i] -= h;
            let mut n = net.clone();
            n.set_parameters(&plus).unwrap();
            let lp = n.loss_and_gradient(x.view(), &y, None).unwrap().0;
            n.set_parameters(&minus).unwrap();
            let lm = n.loss_and_gradient(x.view(), &y, None).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "parameter {i}: {} vs {fd}", analytic[i]);
        }
    }
}
