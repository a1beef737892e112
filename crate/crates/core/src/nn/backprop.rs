use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::network::{Activation, ActivationTrace, Network};
use crate::error::{dim_err, input_err, Error, Result};

/// Parameter gradients, laid out exactly like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.biases.len())).collect(),
        }
    }

    fn check_shapes(&self, net: &Network) -> Result<()> {
        if self.weights.len() != net.layers.len() || self.biases.len() != net.layers.len() {
            return dim_err("gradient layer count does not match network");
        }
        for (i, layer) in net.layers.iter().enumerate() {
            if self.weights[i].dim() != layer.weights.dim() || self.biases[i].len() != layer.biases.len() {
                return dim_err(format!("gradient shape mismatch in layer {}", i + 1));
            }
        }
        Ok(())
    }
}

/// `g + l2 * w`, the shared L2 gradient term. Biases are not regularised.
pub(crate) fn add_l2(grad: &mut Array2<f64>, weights: &Array2<f64>, l2: f64) {
    if l2 != 0.0 {
        grad.zip_mut_with(weights, |g, &w| *g += l2 * w);
    }
}

fn check_batch(net: &Network, frames: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if frames.nrows() == 0 {
        return input_err("empty batch");
    }
    if frames.nrows() != labels.len() {
        return dim_err(format!("{} frames but {} labels", frames.nrows(), labels.len()));
    }
    let classes = net.output_width();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return input_err(format!("label {bad} outside [0, {classes})"));
    }
    Ok(())
}

fn data_loss(net: &Network, out: &Array2<f64>, labels: &[usize]) -> f64 {
    let softmax = net.layers.last().unwrap().activation == Activation::Softmax;
    let mut total = 0.0;
    for (row, &y) in out.rows().into_iter().zip(labels) {
        if softmax {
            total -= row[y].max(f64::MIN_POSITIVE).ln();
        } else {
            for (c, &h) in row.iter().enumerate() {
                let t = if c == y { 1.0 } else { 0.0 };
                total += 0.5 * (h - t) * (h - t);
            }
        }
    }
    total / labels.len() as f64
}

fn l2_penalty(net: &Network, l2: f64) -> f64 {
    if l2 == 0.0 {
        return 0.0;
    }
    0.5 * l2 * net.layers.iter().map(|l| l.weights.iter().map(|w| w * w).sum::<f64>()).sum::<f64>()
}

/// Mean per-frame loss plus `l2/2 · Σ‖W‖²`.
///
/// Softmax outputs use cross-entropy against the hard label; any other output
/// activation uses half squared error against the one-hot target.
pub fn loss(net: &Network, frames: ArrayView2<f64>, labels: &[usize], l2: f64) -> Result<f64> {
    check_batch(net, frames, labels)?;
    let out = net.predict(frames)?;
    Ok(data_loss(net, &out, labels) + l2_penalty(net, l2))
}

/// Derivative of the mean per-frame loss with respect to the output pre-activations.
pub(crate) fn output_delta(net: &Network, out: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let last = net.layers.last().unwrap();
    let scale = 1.0 / labels.len() as f64;
    let mut delta = out.clone();
    for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    if last.activation != Activation::Softmax {
        delta.zip_mut_with(out, |d, &h| *d *= last.activation.derivative_from_output(h));
    }
    delta *= scale;
    delta
}

/// Propagate an output-layer delta down through the network.
pub(crate) fn backpropagate(
    net: &Network,
    trace: &ActivationTrace,
    mut delta: Array2<f64>,
    l2: f64,
) -> Gradients {
    let n = net.layers.len();
    let mut weights = Vec::with_capacity(n);
    let mut biases = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let layer = &net.layers[i];
        let input = &trace.activations[i];
        let mut gw = delta.t().dot(input);
        add_l2(&mut gw, &layer.weights, l2);
        weights.push(gw);
        biases.push(delta.sum_axis(Axis(0)));
        if i > 0 {
            let below = &net.layers[i - 1];
            let mut next = delta.dot(&layer.weights);
            next.zip_mut_with(input, |d, &h| *d *= below.activation.derivative_from_output(h));
            if let Some(keep) = &below.keep {
                for (j, &k) in keep.iter().enumerate() {
                    if !k {
                        next.column_mut(j).fill(0.0);
                    }
                }
            }
            delta = next;
        }
    }
    weights.reverse();
    biases.reverse();
    Gradients { weights, biases }
}

/// Gradients and loss in one pass.
pub fn backward_with_loss(
    net: &Network,
    frames: ArrayView2<f64>,
    labels: &[usize],
    l2: f64,
) -> Result<(Gradients, f64)> {
    check_batch(net, frames, labels)?;
    let (out, trace) = net.forward(frames)?;
    let loss = data_loss(net, &out, labels) + l2_penalty(net, l2);
    let delta = output_delta(net, &out, labels);
    Ok((backpropagate(net, &trace, delta, l2), loss))
}

/// Gradient of the mean loss (plus L2 on weights) with respect to every parameter.
pub fn backward(net: &Network, frames: ArrayView2<f64>, labels: &[usize], l2: f64) -> Result<Gradients> {
    backward_with_loss(net, frames, labels, l2).map(|(g, _)| g)
}

/// Plain SGD, `w ← w − lr·g` for every parameter.
pub fn sgd_step(net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return input_err(format!("learning rate must be finite and non-negative, got {lr}"));
    }
    grads.check_shapes(net)?;
    if lr == 0.0 {
        return Ok(());
    }
    for (i, layer) in net.layers.iter_mut().enumerate() {
        layer.weights.scaled_add(-lr, &grads.weights[i]);
        layer.biases.scaled_add(-lr, &grads.biases[i]);
    }
    if !net.all_finite() {
        return Err(Error::NonFinite("SGD step produced NaN or infinite parameters".into()));
    }
    Ok(())
}
