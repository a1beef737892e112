use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};

/// Element-wise (or row-wise, for softmax) output non-linearity of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Linear,
    Softmax,
}

impl Activation {
    fn apply_inplace(self, z: &mut Array2<f64>) {
        match self {
            Activation::Sigmoid => z.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Linear => {}
            Activation::Softmax => {
                for mut row in z.rows_mut() {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row.mapv_inplace(|v| v / sum);
                }
            }
        }
    }

    /// Derivative expressed through the post-activation value.
    /// Softmax is handled jointly with the loss and never reaches here.
    pub(crate) fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Sigmoid => h * (1.0 - h),
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Linear | Activation::Softmax => 1.0,
        }
    }
}

/// One fully connected layer, `h = act(W x + b)`.
///
/// `weights` is `[out_width × in_width]`: row `n` holds the incoming weights of neuron `n`.
/// A layer may carry a keep-mask; masked neurons emit exactly zero after the activation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
    pub keep: Option<Vec<bool>>,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, biases: Array1<f64>, activation: Activation) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return dim_err("layer must have at least one input and one output");
        }
        if weights.nrows() != biases.len() {
            return dim_err(format!(
                "bias length {} does not match {} weight rows",
                biases.len(),
                weights.nrows()
            ));
        }
        Ok(Self { weights, biases, activation, keep: None })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        in_width: usize,
        out_width: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_width + out_width) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot limit");
        let weights = Array2::from_shape_fn((out_width, in_width), |_| dist.sample(rng));
        Self { weights, biases: Array1::zeros(out_width), activation, keep: None }
    }

    pub fn in_width(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_width(&self) -> usize {
        self.weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn is_kept(&self, neuron: usize) -> bool {
        self.keep.as_ref().is_none_or(|k| k[neuron])
    }

    pub(crate) fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.dot(&self.weights.t());
        h += &self.biases;
        self.activation.apply_inplace(&mut h);
        if let Some(keep) = &self.keep {
            for (j, &k) in keep.iter().enumerate() {
                if !k {
                    h.column_mut(j).fill(0.0);
                }
            }
        }
        h
    }

    pub(crate) fn all_finite(&self) -> bool {
        self.weights.iter().chain(self.biases.iter()).all(|v| v.is_finite())
    }
}

/// Per-layer post-activation values for a presented frame stream.
///
/// `activations[0]` is the input itself and `activations[l]` is the output of
/// layer `l` (1-based), so hidden layer `l` reads from `activations[l - 1]`.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub activations: Vec<Array2<f64>>,
}

impl ActivationTrace {
    pub fn frame_count(&self) -> usize {
        self.activations[0].nrows()
    }

    /// Post-activation output of the network's last layer.
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("trace holds at least the input")
    }
}

/// An ordered stack of dense layers; the last layer is the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_width: usize,
    pub layers: Vec<DenseLayer>,
}

impl Network {
    pub fn new(input_width: usize, layers: Vec<DenseLayer>) -> Result<Self> {
        let net = Self { input_width, layers };
        net.validate()?;
        Ok(net)
    }

    /// Randomly initialised network with the given hidden widths and activation,
    /// and a softmax output layer of `outputs` classes.
    pub fn random<R: Rng + ?Sized>(
        input_width: usize,
        hidden: &[usize],
        outputs: usize,
        hidden_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden_activation == Activation::Softmax {
            return config_err("softmax is only allowed on the output layer");
        }
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_width;
        for &w in hidden {
            layers.push(DenseLayer::glorot(fan_in, w, hidden_activation, rng));
            fan_in = w;
        }
        layers.push(DenseLayer::glorot(fan_in, outputs, Activation::Softmax, rng));
        Self::new(input_width, layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 {
            return dim_err("input width must be positive");
        }
        if self.layers.is_empty() {
            return dim_err("network has no layers");
        }
        let mut expected = self.input_width;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_width() != expected {
                return dim_err(format!(
                    "layer {} expects {} inputs but receives {}",
                    i + 1,
                    layer.in_width(),
                    expected
                ));
            }
            if layer.biases.len() != layer.out_width() {
                return dim_err(format!("layer {} bias length mismatch", i + 1));
            }
            if layer.activation == Activation::Softmax && i + 1 != self.layers.len() {
                return config_err(format!("softmax on non-final layer {}", i + 1));
            }
            if let Some(keep) = &layer.keep {
                if keep.len() != layer.out_width() {
                    return dim_err(format!("layer {} keep-mask length mismatch", i + 1));
                }
                if !keep.iter().any(|&k| k) {
                    return input_err_layer(i + 1);
                }
            }
            expected = layer.out_width();
        }
        Ok(())
    }

    /// Number of hidden layers (every layer but the output layer).
    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(DenseLayer::out_width).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Hidden layer `layer` (1-based, as in "layer 1" being the first hidden layer).
    pub fn hidden_layer(&self, layer: usize) -> Result<&DenseLayer> {
        if layer == 0 || layer > self.hidden_count() {
            return Err(crate::Error::LayerOutOfRange {
                index: layer,
                detail: format!("network has {} hidden layers", self.hidden_count()),
            });
        }
        Ok(&self.layers[layer - 1])
    }

    fn check_input(&self, frames: ArrayView2<f64>) -> Result<()> {
        if frames.ncols() != self.input_width {
            return dim_err(format!(
                "frames have {} columns, network expects {}",
                frames.ncols(),
                self.input_width
            ));
        }
        Ok(())
    }

    /// Full forward pass recording every layer's post-activation output.
    pub fn forward(&self, frames: ArrayView2<f64>) -> Result<(Array2<f64>, ActivationTrace)> {
        self.check_input(frames)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(frames.to_owned());
        for layer in &self.layers {
            let h = layer.forward_batch(activations.last().unwrap().view());
            activations.push(h);
        }
        let out = activations.last().unwrap().clone();
        Ok((out, ActivationTrace { activations }))
    }

    /// Forward pass without keeping intermediate activations.
    pub fn predict(&self, frames: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(frames)?;
        let mut layers = self.layers.iter();
        let first = layers.next().expect("validated network has layers");
        let mut h = first.forward_batch(frames);
        for layer in layers {
            h = layer.forward_batch(h.view());
        }
        Ok(h)
    }

    /// Row-wise argmax of the network output, ties to the lowest class index.
    pub fn classify(&self, frames: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict(frames)?))
    }

    /// Remove any keep-masks carried by the layers.
    pub fn clear_masks(&mut self) {
        for layer in &mut self.layers {
            layer.keep = None;
        }
    }

    pub(crate) fn all_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::all_finite)
    }
}

fn input_err_layer(layer: usize) -> Result<()> {
    crate::error::input_err(format!("keep-mask removes every neuron of layer {layer}"))
}

pub(crate) fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
