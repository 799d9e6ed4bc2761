//! Feed-forward encoder with a tapped intermediate layer and a label-scoring
//! head.
//!
//! Layer `l` computes `a_l = act(W_l a_{l-1} + b_l)`. The head scores label
//! `v` as `w_v · a_L + c_v`. The contrastive objectives read `a_tap` while the
//! classification loss reads the head logits, so one forward pass serves both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::check_dim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `a = act(z)`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ModelConfigFile")]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_labels: usize,
    /// 1-based index of the layer whose output feeds the contrastive terms.
    pub tap_layer: usize,
    pub activation: Activation,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelConfigFile {
    input_dim: usize,
    hidden_dim: usize,
    num_layers: usize,
    num_labels: usize,
    tap_layer: Option<usize>,
    #[serde(default)]
    activation: Activation,
}

impl TryFrom<ModelConfigFile> for ModelConfig {
    type Error = Error;

    fn try_from(raw: ModelConfigFile) -> Result<Self> {
        let mut config = ModelConfig::new(raw.input_dim, raw.hidden_dim, raw.num_layers, raw.num_labels);
        if let Some(tap) = raw.tap_layer {
            config.tap_layer = tap;
        }
        config.activation = raw.activation;
        config.validate()?;
        Ok(config)
    }
}

/// `ceil(0.8 * num_layers)`, at least 1.
pub fn default_tap_layer(num_layers: usize) -> usize {
    ((4 * num_layers).div_ceil(5)).max(1)
}

impl ModelConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, num_layers: usize, num_labels: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            num_layers,
            num_labels,
            tap_layer: default_tap_layer(num_layers),
            activation: Activation::Tanh,
        }
    }

    pub fn with_tap_layer(mut self, tap_layer: usize) -> Self {
        self.tap_layer = tap_layer;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(Error::InvalidConfig(
                "input_dim, hidden_dim and num_layers must be positive".into(),
            ));
        }
        if self.num_labels < 2 {
            return Err(Error::InvalidConfig("num_labels must be at least 2".into()));
        }
        if self.tap_layer == 0 || self.tap_layer > self.num_layers {
            return Err(Error::LayerOutOfRange {
                layer: self.tap_layer,
                num_layers: self.num_layers,
            });
        }
        Ok(())
    }

    fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_layers).map(move |l| {
            let inputs = if l == 0 { self.input_dim } else { self.hidden_dim };
            (inputs, self.hidden_dim)
        })
    }

    pub fn num_params(&self) -> usize {
        let layers: usize = self.layer_shapes().map(|(i, o)| i * o + o).sum();
        layers + self.num_labels * self.hidden_dim + self.num_labels
    }
}

/// Affine map with row-major `outputs × inputs` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn row(&self, o: usize) -> &[f64] {
        &self.weights[o * self.inputs..(o + 1) * self.inputs]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| self.row(o).iter().zip(x).map(|(w, a)| w * a).sum::<f64>() + self.bias[o])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Dense>,
    pub head: Dense,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            layers: config.layer_shapes().map(|(i, o)| Dense::zeros(i, o)).collect(),
            head: Dense::zeros(config.hidden_dim, config.num_labels),
        }
    }

    fn blocks(&self) -> impl Iterator<Item = &Dense> {
        self.layers.iter().chain(std::iter::once(&self.head))
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.layers.iter_mut().chain(std::iter::once(&mut self.head))
    }

    pub fn num_params(&self) -> usize {
        self.blocks().map(|b| b.weights.len() + b.bias.len()).sum()
    }

    /// Layer weights then bias, layer by layer, head last.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for block in self.blocks() {
            flat.extend_from_slice(&block.weights);
            flat.extend_from_slice(&block.bias);
        }
        flat
    }

    pub fn unflatten(config: &ModelConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != config.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, found {}",
                config.num_params(),
                flat.len()
            )));
        }
        let mut params = Self::zeros(config);
        let mut offset = 0;
        for block in params.blocks_mut() {
            let n = block.weights.len();
            block.weights.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
            let n = block.bias.len();
            block.bias.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(params)
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .all(|b| b.weights.iter().chain(&b.bias).all(|x| x.is_finite()))
    }

    fn check_shape(&self, config: &ModelConfig) -> Result<()> {
        let expected = ModelParams::zeros(config);
        let same = self.layers.len() == expected.layers.len()
            && self
                .blocks()
                .zip(expected.blocks())
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs);
        if same {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("parameters do not match the model config".into()))
        }
    }
}

/// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases zero.
pub fn init_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(config);
    for block in params.blocks_mut() {
        let bound = 1.0 / (block.inputs as f64).sqrt();
        for w in &mut block.weights {
            *w = rng.random_range(-bound..bound);
        }
    }
    params
}

/// All intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input, `activations[l]` the output of layer `l`.
    pub activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn final_repr(&self) -> &[f64] {
        self.activations.last().expect("trace holds the input")
    }

    pub fn tapped(&self, config: &ModelConfig) -> &[f64] {
        &self.activations[config.tap_layer]
    }
}

pub fn forward(params: &ModelParams, config: &ModelConfig, x: &[f64]) -> Result<ForwardTrace> {
    check_dim(config.input_dim, x.len())?;
    params.check_shape(config)?;
    let mut activations = Vec::with_capacity(config.num_layers + 1);
    activations.push(x.to_vec());
    for layer in &params.layers {
        let z = layer.apply(activations.last().unwrap());
        activations.push(z.into_iter().map(|v| config.activation.apply(v)).collect());
    }
    let logits = params.head.apply(activations.last().unwrap());
    Ok(ForwardTrace { activations, logits })
}

/// Returns `(final_repr, tapped_repr)`.
pub fn encode(params: &ModelParams, config: &ModelConfig, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let trace = forward(params, config, x)?;
    let tapped = trace.tapped(config).to_vec();
    let mut activations = trace.activations;
    Ok((activations.pop().unwrap(), tapped))
}

pub fn score_labels(params: &ModelParams, final_repr: &[f64]) -> Result<Vec<f64>> {
    check_dim(params.head.inputs, final_repr.len())?;
    Ok(params.head.apply(final_repr))
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Backpropagate one instance's upstream gradients into `grad`.
///
/// `d_logits` is the loss gradient at the head output and `d_tap` (optional)
/// the gradient arriving directly at the tap-layer output.
pub fn accumulate_gradient(
    params: &ModelParams,
    config: &ModelConfig,
    trace: &ForwardTrace,
    d_logits: &[f64],
    d_tap: Option<&[f64]>,
    grad: &mut ModelParams,
) {
    let top = trace.final_repr();
    let head = &params.head;
    let mut upstream = vec![0.0; head.inputs];
    for (o, &g) in d_logits.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad.head.bias[o] += g;
        let row = o * head.inputs;
        for (i, &a) in top.iter().enumerate() {
            grad.head.weights[row + i] += g * a;
            upstream[i] += g * head.weights[row + i];
        }
    }

    for l in (1..=config.num_layers).rev() {
        if l == config.tap_layer {
            if let Some(d_tap) = d_tap {
                for (u, d) in upstream.iter_mut().zip(d_tap) {
                    *u += d;
                }
            }
        }
        let out = &trace.activations[l];
        let input = &trace.activations[l - 1];
        let layer = &params.layers[l - 1];
        let grad_layer = &mut grad.layers[l - 1];
        let mut next = vec![0.0; layer.inputs];
        for o in 0..layer.outputs {
            let dz = upstream[o] * config.activation.derivative_from_output(out[o]);
            if dz == 0.0 {
                continue;
            }
            grad_layer.bias[o] += dz;
            let row = o * layer.inputs;
            for (i, &a) in input.iter().enumerate() {
                grad_layer.weights[row + i] += dz * a;
                next[i] += dz * layer.weights[row + i];
            }
        }
        upstream = next;
    }
}

/// Coordinate-wise mean of the checkpoints.
///
/// Uses a running mean so that averaging identical checkpoints returns them
/// bit-for-bit.
pub fn average_checkpoints(checkpoints: &[ModelParams]) -> Result<ModelParams> {
    let first = checkpoints.first().ok_or(Error::EmptyList)?;
    let mut mean = first.flatten();
    for (k, ckpt) in checkpoints.iter().enumerate().skip(1) {
        let same_shape = ckpt.layers.len() == first.layers.len()
            && ckpt
                .blocks()
                .zip(first.blocks())
                .all(|(a, b)| a.inputs == b.inputs && a.outputs == b.outputs);
        if !same_shape {
            return Err(Error::ShapeMismatch(format!("checkpoint {k} differs in shape")));
        }
        let n = (k + 1) as f64;
        for (m, x) in mean.iter_mut().zip(ckpt.flatten()) {
            *m += (x - *m) / n;
        }
    }
    let mut out = first.clone();
    let mut offset = 0;
    for block in out.blocks_mut() {
        for x in block.weights.iter_mut().chain(block.bias.iter_mut()) {
            *x = mean[offset];
            offset += 1;
        }
    }
    Ok(out)
}

/// On-disk checkpoint: the config echo followed by the flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub num_params: usize,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: &ModelParams) -> Self {
        Self {
            model,
            num_params: params.num_params(),
            params: params.flatten(),
        }
    }

    pub fn into_params(self) -> Result<(ModelConfig, ModelParams)> {
        if self.num_params != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint header says {} parameters, body has {}",
                self.num_params,
                self.params.len()
            )));
        }
        let params = ModelParams::unflatten(&self.model, &self.params)?;
        Ok((self.model, params))
    }
}
