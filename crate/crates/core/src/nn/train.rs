use log::debug;
use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backprop::{backward_with_loss, sgd_step};
use super::network::{argmax_rows, Network};
use crate::datagen::FrameCorpus;
use crate::error::{config_err, input_err, Error, Result};

const EVAL_CHUNK: usize = 4096;

/// Mini-batch SGD settings.
///
/// `initial_lr` is a per-frame rate: each step moves the parameters by
/// `lr × Σ_frames ∇loss`, i.e. the mean-batch gradient scaled by `lr × batch_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub constant_epochs: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub l2: f64,
    pub seed: u64,
    /// Consecutive non-improving epochs tolerated after the constant phase.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.008,
            constant_epochs: 4,
            batch_size: 64,
            max_epochs: 20,
            l2: 1e-4,
            seed: 0,
            patience: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return config_err(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be at least 1");
        }
        if !(self.l2 >= 0.0) {
            return config_err("l2 must be non-negative");
        }
        if self.patience == 0 {
            return config_err("patience must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub cv_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    NoImprovement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// CV error of the network before the first epoch.
    pub initial_cv_error: f64,
    pub epochs: Vec<EpochRecord>,
    pub stop: StopReason,
}

/// True when the last entry of `cv` is not strictly below every earlier entry.
fn failed_to_improve(cv: &[f64]) -> bool {
    match cv.split_last() {
        Some((last, earlier)) if !earlier.is_empty() => {
            *last >= earlier.iter().copied().fold(f64::INFINITY, f64::min)
        }
        _ => false,
    }
}

/// Learning rate for epoch `epoch` (1-based), given CV errors observed so far.
///
/// `cv[0]` is the error before training and `cv[e]` the error after epoch `e`.
/// Epochs up to `constant_epochs` use `current`; later epochs halve it whenever the
/// latest CV error failed to improve on the best seen before it.
pub fn next_learning_rate(cv: &[f64], epoch: usize, constant_epochs: usize, current: f64) -> f64 {
    if epoch <= constant_epochs || epoch <= 1 {
        return current;
    }
    if failed_to_improve(&cv[..epoch.min(cv.len())]) {
        current / 2.0
    } else {
        current
    }
}

/// Misclassified frames / total frames.
pub fn evaluate(net: &Network, corpus: &FrameCorpus) -> Result<f64> {
    if corpus.is_empty() {
        return input_err("cannot evaluate on an empty corpus");
    }
    let wrong = count_errors(net, corpus.frames.view(), &corpus.labels)?;
    Ok(wrong as f64 / corpus.len() as f64)
}

fn count_errors(net: &Network, frames: ArrayView2<f64>, labels: &[usize]) -> Result<usize> {
    let mut wrong = 0;
    for (chunk, ys) in frames.axis_chunks_iter(Axis(0), EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let pred = argmax_rows(&net.predict(chunk)?);
        wrong += pred.iter().zip(ys).filter(|(p, y)| p != y).count();
    }
    Ok(wrong)
}

/// One shuffled pass over `frames` with per-frame learning rate `lr`.
/// Returns the frame-weighted mean training loss.
pub(crate) fn run_epoch<F>(
    net: &mut Network,
    frames: ArrayView2<f64>,
    labels: &[usize],
    batch_size: usize,
    l2: f64,
    lr: f64,
    rng: &mut ChaCha8Rng,
    mut step: F,
) -> Result<f64>
where
    F: FnMut(&mut Network, &super::Gradients, f64, f64) -> Result<()>,
{
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    for idx in order.chunks(batch_size) {
        let x = frames.select(Axis(0), idx);
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (grads, loss) = backward_with_loss(net, x.view(), &y, l2)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss became {loss}")));
        }
        total += loss * idx.len() as f64;
        step(net, &grads, lr * idx.len() as f64, l2)?;
    }
    Ok(total / labels.len() as f64)
}

/// Train with a constant learning rate for `constant_epochs`, then halve it whenever
/// cross-validation error stops improving; stop after `patience` consecutive
/// non-improving epochs or at `max_epochs`.
pub fn train(
    mut net: Network,
    train_set: &FrameCorpus,
    cv_set: &FrameCorpus,
    cfg: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    cfg.validate()?;
    if cv_set.is_empty() {
        return input_err("cross-validation corpus is empty");
    }
    if train_set.is_empty() {
        return input_err("training corpus is empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = evaluate(&net, cv_set)?;
    let mut cv = vec![initial];
    let mut epochs = Vec::new();
    let mut lr = cfg.initial_lr;
    let mut stale = 0;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        lr = next_learning_rate(&cv, epoch, cfg.constant_epochs, lr);
        let train_loss = run_epoch(
            &mut net,
            train_set.frames.view(),
            &train_set.labels,
            cfg.batch_size,
            cfg.l2,
            lr,
            &mut rng,
            |n, g, step_lr, _| sgd_step(n, g, step_lr),
        )
        .map_err(|e| match e {
            Error::NonFinite(detail) => Error::Diverged { epoch, detail },
            other => other,
        })?;
        let cv_error = evaluate(&net, cv_set)?;
        cv.push(cv_error);
        debug!("epoch {epoch}: lr {lr} loss {train_loss:.5} cv {cv_error:.4}");
        epochs.push(EpochRecord { epoch, lr, train_loss, cv_error });

        if epoch > cfg.constant_epochs {
            if failed_to_improve(&cv) {
                stale += 1;
            } else {
                stale = 0;
            }
            if stale >= cfg.patience {
                stop = StopReason::NoImprovement;
                break;
            }
        }
    }
    Ok((net, TrainHistory { initial_cv_error: initial, epochs, stop }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{Domain, FrameCorpus};
    use crate::nn::network::{Activation, DenseLayer};
    use ndarray::{Array1, Array2};
    use rand::Rng;

    #[test]
    fn halves_after_constant_phase_on_stall() {
        let cv = [10.0, 9.0, 8.0, 7.0, 7.1];
        let mut lr = 0.008;
        for epoch in 1..=4 {
            lr = next_learning_rate(&cv, epoch, 4, lr);
            assert_eq!(lr, 0.008);
        }
        assert_eq!(next_learning_rate(&cv, 5, 4, lr), 0.004);
    }

    #[test]
    fn keeps_rate_while_improving() {
        let cv = [10.0, 9.0, 8.0, 7.0, 6.0, 5.0];
        assert_eq!(next_learning_rate(&cv, 6, 4, 0.008), 0.008);
    }

    fn blobs(n: usize, seed: u64) -> FrameCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let frames = Array2::from_shape_fn((n, 2), |(i, j)| {
            let centre = if labels[i] == 0 { -2.0 } else { 2.0 };
            centre * if j == 0 { 1.0 } else { 0.5 } + rng.random_range(-1.0..1.0)
        });
        FrameCorpus::from_parts(frames, labels, 2, Domain::InDomain, None).unwrap()
    }

    fn small_net(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::random(2, &[6, 6], 2, Activation::Sigmoid, &mut rng).unwrap()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let tr = blobs(400, 1);
        let cv = blobs(100, 2);
        let cfg = TrainConfig { batch_size: 16, max_epochs: 15, initial_lr: 0.02, ..Default::default() };
        let (net, hist) = train(small_net(0), &tr, &cv, &cfg).unwrap();
        assert!(!hist.epochs.is_empty());
        let err = evaluate(&net, &tr).unwrap();
        assert!(err < 0.05, "train error {err}");
    }

    #[test]
    fn single_epoch_budget() {
        let tr = blobs(50, 1);
        let cfg = TrainConfig { max_epochs: 1, ..Default::default() };
        let (_, hist) = train(small_net(0), &tr, &tr, &cfg).unwrap();
        assert_eq!(hist.epochs.len(), 1);
        assert_eq!(hist.stop, StopReason::MaxEpochs);
    }

    #[test]
    fn training_is_deterministic() {
        let tr = blobs(120, 3);
        let cv = blobs(40, 4);
        let cfg = TrainConfig { batch_size: 8, max_epochs: 3, seed: 7, ..Default::default() };
        let (a, ha) = train(small_net(1), &tr, &cv, &cfg).unwrap();
        let (b, hb) = train(small_net(1), &tr, &cv, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
    }

    #[test]
    fn divergence_is_reported() {
        let tr = blobs(50, 1);
        let cfg = TrainConfig { initial_lr: 1e300, max_epochs: 3, batch_size: 5, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::random(2, &[6, 6], 2, Activation::Relu, &mut rng).unwrap();
        let err = train(net, &tr, &tr, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn empty_cv_rejected() {
        let tr = blobs(10, 1);
        let empty = FrameCorpus::from_parts(Array2::zeros((0, 2)), vec![], 2, Domain::InDomain, None).unwrap();
        assert!(train(small_net(0), &tr, &empty, &TrainConfig::default()).is_err());
    }

    #[test]
    fn constant_output_on_balanced_four_classes() {
        let layer = DenseLayer::new(Array2::zeros((4, 1)), Array1::from(vec![1.0, 0.0, 0.0, 0.0]), Activation::Softmax).unwrap();
        let net = Network::new(1, vec![layer]).unwrap();
        let corpus = FrameCorpus::from_parts(
            Array2::from_shape_fn((8, 1), |(i, _)| i as f64),
            (0..8).map(|i| i % 4).collect(),
            4,
            Domain::InDomain,
            None,
        )
        .unwrap();
        assert_eq!(evaluate(&net, &corpus).unwrap(), 0.75);
    }

    #[test]
    fn memorised_singleton_has_zero_error() {
        let layer = DenseLayer::new(Array2::from_elem((2, 1), 0.0), Array1::from(vec![0.0, 5.0]), Activation::Softmax).unwrap();
        let net = Network::new(1, vec![layer]).unwrap();
        let corpus =
            FrameCorpus::from_parts(Array2::from_elem((1, 1), 0.3), vec![1], 2, Domain::InDomain, None).unwrap();
        assert_eq!(evaluate(&net, &corpus).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_matches_frame_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let net = Network::random(3, &[5, 4], 3, Activation::Sigmoid, &mut rng).unwrap();
        let n = 5000;
        let frames = Array2::from_shape_fn((n, 3), |_| rng.random_range(-2.0..2.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let corpus = FrameCorpus::from_parts(frames.clone(), labels.clone(), 3, Domain::InDomain, None).unwrap();
        let mut wrong = 0;
        for i in 0..n {
            let out = net.predict(frames.slice(ndarray::s![i..i + 1, ..])).unwrap();
            let row = out.row(0);
            let mut best = 0;
            for c in 1..3 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best != labels[i] {
                wrong += 1;
            }
        }
        assert_eq!(evaluate(&net, &corpus).unwrap(), wrong as f64 / n as f64);
    }
}
