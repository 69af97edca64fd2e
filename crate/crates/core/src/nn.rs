//! A small dense-network core with hand-written reverse-mode gradients.
//!
//! Networks are plain values: [`DenseNet::forward_trace`] returns a [`Trace`]
//! holding every layer's input and output, and [`DenseNet::backward`] consumes
//! that trace together with the gradient of a scalar loss with respect to the
//! network output. Losses therefore live outside the network and several
//! networks can be chained by passing `Backprop::input_grad` upstream.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("backward called without a forward trace for this network")]
    NoCachedForward,
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `inputs x outputs`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights);
        z += &self.bias;
        activate(self.activation, z)
    }
}

fn activate(act: Activation, mut z: Array2<f64>) -> Array2<f64> {
    match act {
        Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
        Activation::Sigmoid => z.mapv_inplace(sigmoid),
        Activation::Tanh => z.mapv_inplace(f64::tanh),
        Activation::Linear => {}
        Activation::Softmax => {
            for mut row in z.rows_mut() {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row /= sum;
            }
        }
    }
    z
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Per-layer activations recorded by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("non-empty trace")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Accumulated parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weights *= c;
            l.bias *= c;
        }
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    /// Flattened in the same order as [`DenseNet::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

/// Output of [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct Backprop {
    pub grads: Gradients,
    /// Gradient of the loss with respect to the network input.
    pub input_grad: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Layer>,
    seed: u64,
}

impl DenseNet {
    /// Builds a network with `dims.len() - 1` layers, initialised uniformly in
    /// `±1/sqrt(fan_in)`.
    pub fn new(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self, NnError> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(NnError::InvalidArchitecture(format!(
                "{} widths need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(NnError::InvalidArchitecture("zero-width layer".into()));
        }
        let mut rng = crate::rng::seeded(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_fn((w[0], w[1]), |_| {
                        rng.random_range(-bound..bound)
                    }),
                    bias: Array1::from_shape_fn(w[1], |_| rng.random_range(-bound..bound)),
                    activation,
                }
            })
            .collect();
        Self::from_layers(layers, seed)
    }

    pub fn from_layers(layers: Vec<Layer>, seed: u64) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::InvalidArchitecture("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.ncols() {
                return Err(NnError::InvalidArchitecture(format!(
                    "layer {i}: bias length {} for {} outputs",
                    l.bias.len(),
                    l.weights.ncols()
                )));
            }
            if i + 1 < layers.len() {
                if l.activation == Activation::Softmax {
                    return Err(NnError::InvalidArchitecture(
                        "softmax is only allowed on the last layer".into(),
                    ));
                }
                if l.weights.ncols() != layers[i + 1].weights.nrows() {
                    return Err(NnError::InvalidArchitecture(format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        l.weights.ncols(),
                        i + 1,
                        layers[i + 1].weights.nrows()
                    )));
                }
            }
        }
        Ok(Self { layers, seed })
    }

    /// A single linear layer computing the identity on `width` inputs.
    pub fn identity(width: usize) -> Self {
        Self::from_layers(
            vec![Layer {
                weights: Array2::eye(width),
                bias: Array1::zeros(width),
                activation: Activation::Linear,
            }],
            0,
        )
        .expect("valid identity")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").weights.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<(), NnError> {
        if x.ncols() != self.input_width() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} input columns", self.input_width()),
                found: format!("{}", x.ncols()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(x)?;
        let mut a = self.layers[0].forward(x);
        for l in &self.layers[1..] {
            a = l.forward(&a);
        }
        Ok(a)
    }

    pub fn forward_trace(&self, x: &Array2<f64>) -> Result<Trace, NnError> {
        self.check_input(x)?;
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut a = x.clone();
        for l in &self.layers {
            let out = l.forward(&a);
            trace.inputs.push(a);
            a = out.clone();
            trace.outputs.push(out);
        }
        Ok(trace)
    }

    /// Exact gradients of a scalar loss given `grad_out = dLoss/dOutput`.
    pub fn backward(&self, trace: &Trace, grad_out: &Array2<f64>) -> Result<Backprop, NnError> {
        if trace.outputs.len() != self.layers.len() || trace.outputs.is_empty() {
            return Err(NnError::NoCachedForward);
        }
        for (l, (inp, out)) in self
            .layers
            .iter()
            .zip(trace.inputs.iter().zip(&trace.outputs))
        {
            if inp.ncols() != l.weights.nrows() || out.ncols() != l.weights.ncols() {
                return Err(NnError::NoCachedForward);
            }
        }
        if grad_out.dim() != trace.output().dim() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{:?}", trace.output().dim()),
                found: format!("{:?}", grad_out.dim()),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let out = &trace.outputs[i];
            let dz = activation_backward(l.activation, out, delta);
            let inp = &trace.inputs[i];
            grads.push(LayerGrad {
                weights: inp.t().dot(&dz),
                bias: dz.sum_axis(Axis(0)),
            });
            delta = dz.dot(&l.weights.t());
        }
        grads.reverse();
        Ok(Backprop {
            grads: Gradients { layers: grads },
            input_grad: delta,
        })
    }

    /// Clamps every weight and bias into `[-c, c]`.
    pub fn clip_weights(&mut self, c: f64) {
        assert!(c > 0.0, "clip bound must be positive");
        for l in &mut self.layers {
            l.weights.mapv_inplace(|v| v.clamp(-c, c));
            l.bias.mapv_inplace(|v| v.clamp(-c, c));
        }
    }

    pub fn max_abs_param(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.param_count() {
            return Err(NnError::ShapeMismatch {
                expected: format!("{} parameters", self.param_count()),
                found: format!("{}", params.len()),
            });
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().expect("counted"));
            l.bias.iter_mut().for_each(|b| *b = it.next().expect("counted"));
        }
        Ok(())
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut dims = vec![self.input_width()];
        dims.extend(self.layers.iter().map(|l| l.weights.ncols()));
        CheckpointHeader {
            version: CHECKPOINT_VERSION,
            seed: self.seed,
            dims,
            activations: self.layers.iter().map(|l| l.activation).collect(),
            param_count: self.param_count(),
        }
    }

    /// Writes `<stem>.json` and `<stem>.bin` (little-endian f64 parameters).
    pub fn save(&self, stem: &Path) -> Result<(), NnError> {
        let (json, bin) = checkpoint_paths(stem);
        std::fs::write(&json, serde_json::to_vec_pretty(&self.header())?)?;
        std::fs::write(&bin, params_to_bytes(&self.params()))?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self, NnError> {
        let (json, bin) = checkpoint_paths(stem);
        let header: CheckpointHeader = serde_json::from_slice(&std::fs::read(&json)?)?;
        let bytes = std::fs::read(&bin)?;
        Self::from_checkpoint(&header, &bytes)
    }

    pub fn from_checkpoint(header: &CheckpointHeader, bytes: &[u8]) -> Result<Self, NnError> {
        if header.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {}",
                header.version
            )));
        }
        let params = params_from_bytes(bytes)?;
        let mut net = Self::new(&header.dims, &header.activations, header.seed)?;
        if params.len() != header.param_count {
            return Err(NnError::Checkpoint(format!(
                "header declares {} parameters, file holds {}",
                header.param_count,
                params.len()
            )));
        }
        net.set_params(&params)?;
        Ok(net)
    }
}

fn activation_backward(act: Activation, out: &Array2<f64>, mut delta: Array2<f64>) -> Array2<f64> {
    match act {
        Activation::Relu => {
            ndarray::Zip::from(&mut delta)
                .and(out)
                .for_each(|d, &a| if a <= 0.0 { *d = 0.0 });
        }
        Activation::Sigmoid => {
            ndarray::Zip::from(&mut delta)
                .and(out)
                .for_each(|d, &a| *d *= a * (1.0 - a));
        }
        Activation::Tanh => {
            ndarray::Zip::from(&mut delta)
                .and(out)
                .for_each(|d, &a| *d *= 1.0 - a * a);
        }
        Activation::Linear => {}
        Activation::Softmax => {
            for (mut d, p) in delta.rows_mut().into_iter().zip(out.rows()) {
                let dot: f64 = d.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
                ndarray::Zip::from(&mut d)
                    .and(&p)
                    .for_each(|g, &pi| *g = pi * (*g - dot));
            }
        }
    }
    delta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub seed: u64,
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub param_count: usize,
}

fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut json = stem.as_os_str().to_owned();
    json.push(".json");
    let mut bin = stem.as_os_str().to_owned();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

pub fn params_to_bytes(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<Vec<f64>, NnError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(NnError::Checkpoint(format!(
            "parameter file length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer bound to one network's parameter layout.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, net: &DenseNet) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        let n = match kind {
            OptimizerKind::Adam => net.param_count(),
            OptimizerKind::Sgd => 0,
        };
        Self {
            kind,
            learning_rate,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn adam(learning_rate: f64, net: &DenseNet) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate, net)
    }

    pub fn sgd(learning_rate: f64, net: &DenseNet) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate, net)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one descent step.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) {
        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (l, g) in net.layers.iter_mut().zip(&grads.layers) {
                    l.weights.scaled_add(-lr, &g.weights);
                    l.bias.scaled_add(-lr, &g.bias);
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let mut idx = 0;
                let (m, v) = (&mut self.m, &mut self.v);
                let mut update = |p: &mut f64, g: f64| {
                    m[idx] = ADAM_BETA1 * m[idx] + (1.0 - ADAM_BETA1) * g;
                    v[idx] = ADAM_BETA2 * v[idx] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = m[idx] / c1;
                    let v_hat = v[idx] / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    idx += 1;
                };
                for (l, g) in net.layers.iter_mut().zip(&grads.layers) {
                    for (p, &gv) in l.weights.iter_mut().zip(g.weights.iter()) {
                        update(p, gv);
                    }
                    for (p, &gv) in l.bias.iter_mut().zip(g.bias.iter()) {
                        update(p, gv);
                    }
                }
            }
        }
    }
}

/// Analytic versus central finite-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Smallest magnitude used in the relative-error denominator.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `loss`'s analytic gradient with central differences of step `h`.
///
/// The relative error of each parameter is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<F>(net: &DenseNet, loss: F, h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&DenseNet) -> (f64, Gradients),
{
    let (_, grads) = loss(net);
    let analytic = grads.flat();
    let base = net.params();
    let mut probe = net.clone();
    let mut worst = (0.0f64, 0usize);
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_params(&p).expect("same layout");
        let plus = loss(&probe).0;
        p[i] = base[i] - h;
        probe.set_params(&p).expect("same layout");
        let minus = loss(&probe).0;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        let err = (analytic[i] - numeric).abs() / denom;
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    GradCheckReport {
        max_relative_error: worst.0,
        worst_parameter: worst.1,
        checked: base.len(),
        passed: worst.0 <= tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_layer_passes_input_through() {
        let net = DenseNet::identity(3);
        let x = array![[0.1, -2.0, 5.0], [1.0, 2.0, 3.0]];
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let layer = Layer {
            weights: Array2::zeros((2, 4)),
            bias: Array1::zeros(4),
            activation: Activation::Softmax,
        };
        let net = DenseNet::from_layers(vec![layer], 0).unwrap();
        let out = net.forward(&array![[1.0, -3.0]]).unwrap();
        for &p in out.iter() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clips_negatives() {
        let layer = Layer {
            weights: Array2::eye(2),
            bias: Array1::zeros(2),
            activation: Activation::Relu,
        };
        let net = DenseNet::from_layers(vec![layer], 0).unwrap();
        assert_eq!(net.forward(&array![[-1.0, 2.0]]).unwrap(), array![[0.0, 2.0]]);
    }

    #[test]
    fn softmax_must_be_terminal() {
        let err = DenseNet::new(
            &[2, 3, 1],
            &[Activation::Softmax, Activation::Linear],
            0,
        );
        assert!(matches!(err, Err(NnError::InvalidArchitecture(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = DenseNet::identity(3);
        assert!(matches!(
            net.forward(&Array2::zeros((1, 2))),
            Err(NnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn backward_without_trace_fails() {
        let net = DenseNet::identity(2);
        assert!(matches!(
            net.backward(&Trace::default(), &Array2::zeros((1, 2))),
            Err(NnError::NoCachedForward)
        ));
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let net = DenseNet::new(&[3, 5, 2], &[Activation::Tanh, Activation::Sigmoid], 4).unwrap();
        let x = array![[0.1, 0.2, 0.3], [0.9, -0.4, 0.0]];
        let trace = net.forward_trace(&x).unwrap();
        let bp = net.backward(&trace, &Array2::zeros((2, 2))).unwrap();
        assert!(bp.grads.flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut net = DenseNet::from_layers(
            vec![Layer {
                weights: array![[0.0]],
                bias: array![0.0],
                activation: Activation::Linear,
            }],
            0,
        )
        .unwrap();
        let mut opt = OptimizerState::sgd(0.1, &net);
        let grads = Gradients {
            layers: vec![LayerGrad {
                weights: array![[1.0]],
                bias: array![0.0],
            }],
        };
        opt.step(&mut net, &grads);
        assert!((net.layers()[0].weights[[0, 0]] + 0.1).abs() < 1e-15);
        assert_eq!(net.layers()[0].bias[0], 0.0);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_matches_hand_recurrence() {
        let mut net = DenseNet::from_layers(
            vec![Layer {
                weights: array![[0.5]],
                bias: array![0.0],
                activation: Activation::Linear,
            }],
            0,
        )
        .unwrap();
        let mut opt = OptimizerState::adam(1e-3, &net);
        let gs = [0.3, -0.2, 0.05];
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 0.5f64);
        for (t, &g) in gs.iter().enumerate() {
            let grads = Gradients {
                layers: vec![LayerGrad {
                    weights: array![[g]],
                    bias: array![0.0],
                }],
            };
            opt.step(&mut net, &grads);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let t = (t + 1) as i32;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            p -= 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((net.layers()[0].weights[[0, 0]] - p).abs() < 1e-15);
        }
        // First Adam step moves by lr * g / (|g| + eps), i.e. almost exactly lr.
        let first: f64 = 0.5 - 1e-3 * 0.3 / (0.3 + 1e-8);
        assert!((first - (0.5 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn clipping_clamps_and_is_idempotent() {
        let mut net = DenseNet::from_layers(
            vec![Layer {
                weights: array![[-2.0, 0.005, 2.0]],
                bias: array![0.0, 0.0, 0.0],
                activation: Activation::Linear,
            }],
            0,
        )
        .unwrap();
        net.clip_weights(0.01);
        assert_eq!(net.layers()[0].weights, array![[-0.01, 0.005, 0.01]]);
        let once = net.clone();
        net.clip_weights(0.01);
        assert_eq!(net, once);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let net = DenseNet::new(
            &[4, 8, 3],
            &[Activation::Relu, Activation::Softmax],
            11,
        )
        .unwrap();
        let stem = dir.path().join("net");
        net.save(&stem).unwrap();
        let back = DenseNet::load(&stem).unwrap();
        assert_eq!(back, net);
        let bytes = std::fs::read(dir.path().join("net.bin")).unwrap();
        assert_eq!(bytes.len(), net.param_count() * 8);
    }
}
