//! Unsupervised adaptation with frozen pseudo-labels.
//!
//! | variant | start model | updated parameters          | data                         |
//! |---------|-------------|-----------------------------|------------------------------|
//! | A       | baseline    | all                         | adaptation set               |
//! | B       | baseline    | selected neurons only       | adaptation set               |
//! | C       | model B     | all                         | adaptation + original subset |
//! | D       | baseline    | all                         | adaptation + original subset |
//!
//! Pseudo-labels always come from the baseline and are generated once. Updating a
//! neuron means updating its incoming weights and its bias.

use std::fmt;
use std::str::FromStr;

use log::warn;
use ndarray::{concatenate, Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::FrameCorpus;
use crate::error::{config_err, dim_err, input_err, Error, Result};
use crate::nn::{argmax_rows, backward_with_loss, run_epoch, Gradients, Network};
use crate::pruning::PruneMask;
use crate::saliency::Method;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "A")]
    ModelA,
    #[serde(rename = "B")]
    ModelB,
    #[serde(rename = "C")]
    ModelC,
    #[serde(rename = "D")]
    ModelD,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::ModelA => "Model-A",
            Variant::ModelB => "Model-B",
            Variant::ModelC => "Model-C",
            Variant::ModelD => "Model-D",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim_start_matches("Model-").to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::ModelA),
            "B" => Ok(Variant::ModelB),
            "C" => Ok(Variant::ModelC),
            "D" => Ok(Variant::ModelD),
            other => input_err(format!("unknown adaptation variant '{other}'")),
        }
    }
}

/// Neurons whose incoming parameters may change, for every layer including the output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateMask {
    pub layers: Vec<Vec<bool>>,
}

impl UpdateMask {
    pub fn all(net: &Network) -> Self {
        Self { layers: net.layers.iter().map(|l| vec![true; l.out_width()]).collect() }
    }

    pub fn none(net: &Network) -> Self {
        Self { layers: net.layers.iter().map(|l| vec![false; l.out_width()]).collect() }
    }

    /// Select exactly the neurons a prune mask would remove.
    pub fn from_prune_mask(net: &Network, mask: &PruneMask) -> Result<Self> {
        mask.validate(net)?;
        let mut out = Self::none(net);
        for (sel, keep) in out.layers.iter_mut().zip(&mask.keep) {
            for (s, k) in sel.iter_mut().zip(keep) {
                *s = !k;
            }
        }
        Ok(out)
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        if self.layers.len() != net.layers.len()
            || self.layers.iter().zip(&net.layers).any(|(m, l)| m.len() != l.out_width())
        {
            return dim_err("update mask does not match the network shape");
        }
        Ok(())
    }

    /// Number of parameters (incoming weights + bias) the mask lets move.
    pub fn parameter_count(&self, net: &Network) -> usize {
        self.layers
            .iter()
            .zip(&net.layers)
            .map(|(m, l)| m.iter().filter(|&&s| s).count() * (l.in_width() + 1))
            .sum()
    }
}

/// Where a selective update mask comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSource {
    pub method: Method,
    pub layers: Vec<usize>,
    pub hypo_pct: f64,
    pub hyper_pct: f64,
}

impl Default for MaskSource {
    fn default() -> Self {
        Self { method: Method::Mi, layers: vec![1, 2], hypo_pct: 8.0, hyper_pct: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationPlan {
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_source: Option<MaskSource>,
}

impl AdaptationPlan {
    /// The variant with its default mask source (MI bands of layers 1-2 for B).
    pub fn standard(variant: Variant) -> Self {
        let mask_source = (variant == Variant::ModelB).then(MaskSource::default);
        Self { variant, mask_source }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub l2: f64,
    /// Per-frame learning rate of the first epoch; halved every epoch after.
    pub initial_lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Fraction of the original training set blended into the update stream.
    pub data_mix: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub update_mask: Option<UpdateMask>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { l2: 0.001, initial_lr: 0.004, max_epochs: 10, batch_size: 64, data_mix: 0.0, seed: 0, update_mask: None }
    }
}

impl AdaptConfig {
    /// Defaults for a variant: 50 % original data for C and D, none otherwise.
    pub fn for_variant(variant: Variant) -> Self {
        let data_mix = match variant {
            Variant::ModelC | Variant::ModelD => 0.5,
            _ => 0.0,
        };
        Self { data_mix, ..Self::default() }
    }

    /// Learning rate of epoch `epoch` (1-based): `initial_lr / 2^(epoch-1)`.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        self.initial_lr / 2f64.powi(epoch as i32 - 1)
    }

    fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) {
            return config_err("initial_lr must be positive");
        }
        if !(self.l2 >= 0.0) {
            return config_err("l2 must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.data_mix) {
            return config_err(format!("data_mix must lie in [0, 1], got {}", self.data_mix));
        }
        if self.batch_size == 0 {
            return config_err("batch_size must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// FNV-1a digest of every parameter's bit pattern after the epoch.
    pub param_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptHistory {
    pub variant: Variant,
    pub updated_parameters: usize,
    pub stream_frames: usize,
    pub epochs: Vec<AdaptEpoch>,
}

#[derive(Debug, Clone)]
pub struct Adapted {
    pub model: Network,
    pub history: AdaptHistory,
}

/// Replace labels with the model's argmax decisions (ties to the lowest class).
pub fn pseudo_label(model: &Network, unlabeled: &FrameCorpus) -> Result<FrameCorpus> {
    if unlabeled.is_empty() {
        return input_err("nothing to label");
    }
    if model.output_width() != unlabeled.num_classes {
        return dim_err(format!(
            "model has {} outputs, corpus has {} classes",
            model.output_width(),
            unlabeled.num_classes
        ));
    }
    let mut out = unlabeled.clone();
    let mut labels = Vec::with_capacity(unlabeled.len());
    for chunk in unlabeled.frames.axis_chunks_iter(Axis(0), 4096) {
        labels.extend(argmax_rows(&model.predict(chunk)?));
    }
    out.labels = labels;
    Ok(out)
}

/// SGD with L2 restricted to the selected neurons' incoming weights and biases;
/// everything else is left bit-identical. `grads` must not already contain L2.
pub fn selective_update_step(
    net: &mut Network,
    grads: &Gradients,
    mask: &UpdateMask,
    lr: f64,
    l2: f64,
) -> Result<()> {
    mask.validate(net)?;
    if grads.weights.len() != net.layers.len()
        || grads.weights.iter().zip(&net.layers).any(|(g, l)| g.dim() != l.weights.dim())
    {
        return dim_err("gradient shape mismatch");
    }
    if mask.layers.iter().flatten().all(|&s| !s) {
        warn!("selective update mask covers no parameters; step skipped");
        return Ok(());
    }
    for (i, layer) in net.layers.iter_mut().enumerate() {
        for (n, &selected) in mask.layers[i].iter().enumerate() {
            if !selected {
                continue;
            }
            let mut row = layer.weights.row_mut(n);
            let g = grads.weights[i].row(n);
            row.zip_mut_with(&g, |w, &gw| {
                let step = gw + l2 * *w;
                *w -= lr * step;
            });
            layer.biases[n] -= lr * grads.biases[i][n];
        }
    }
    if !net.all_finite() {
        return Err(Error::NonFinite("selective update produced NaN or infinite parameters".into()));
    }
    Ok(())
}

fn param_digest(net: &Network) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for layer in &net.layers {
        for v in layer.weights.iter().chain(layer.biases.iter()) {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    format!("{h:016x}")
}

fn check_plan(plan: &AdaptationPlan, cfg: &AdaptConfig, predecessor: Option<&Network>) -> Result<()> {
    match plan.variant {
        Variant::ModelA => {
            if cfg.update_mask.is_some() || cfg.data_mix != 0.0 {
                return config_err("Model-A updates every parameter on adaptation data only");
            }
        }
        Variant::ModelB => {
            if cfg.update_mask.is_none() {
                return config_err("Model-B needs an update mask");
            }
            if cfg.data_mix != 0.0 {
                return config_err("Model-B uses adaptation data only (data_mix = 0)");
            }
        }
        Variant::ModelC => {
            if predecessor.is_none() {
                return config_err("Model-C fine-tunes a Model-B result; none was given");
            }
            if cfg.update_mask.is_some() {
                return config_err("Model-C updates every parameter");
            }
        }
        Variant::ModelD => {
            if cfg.update_mask.is_some() {
                return config_err("Model-D updates every parameter");
            }
        }
    }
    Ok(())
}

/// Run one adaptation variant.
///
/// `baseline` produces the frozen pseudo-labels; training starts from `predecessor`
/// for Model-C and from `baseline` otherwise. `original` supplies the labelled
/// in-domain frames mixed in when `cfg.data_mix > 0`.
pub fn adapt(
    baseline: &Network,
    adaptation: &FrameCorpus,
    original: &FrameCorpus,
    plan: &AdaptationPlan,
    cfg: &AdaptConfig,
    predecessor: Option<&Network>,
) -> Result<Adapted> {
    cfg.validate()?;
    check_plan(plan, cfg, predecessor)?;
    let labelled = pseudo_label(baseline, adaptation)?;
    let mut model = match plan.variant {
        Variant::ModelC => predecessor.expect("checked above").clone(),
        _ => baseline.clone(),
    };
    let mask = cfg.update_mask.clone().unwrap_or_else(|| UpdateMask::all(&model));
    mask.validate(&model)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (frames, labels) = if cfg.data_mix > 0.0 {
        if original.width() != adaptation.width() {
            return dim_err("original and adaptation corpora differ in frame width");
        }
        let n = (cfg.data_mix * original.len() as f64).round() as usize;
        let mut picked = sample(&mut rng, original.len(), n).into_vec();
        picked.sort_unstable();
        let extra = original.frames.select(Axis(0), &picked);
        let frames: Array2<f64> = concatenate(Axis(0), &[labelled.frames.view(), extra.view()])
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let mut labels = labelled.labels.clone();
        labels.extend(picked.iter().map(|&i| original.labels[i]));
        (frames, labels)
    } else {
        (labelled.frames, labelled.labels)
    };

    let mut history = AdaptHistory {
        variant: plan.variant,
        updated_parameters: mask.parameter_count(&model),
        stream_frames: labels.len(),
        epochs: Vec::with_capacity(cfg.max_epochs),
    };
    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr_for_epoch(epoch);
        let loss = run_epoch(
            &mut model,
            frames.view(),
            &labels,
            cfg.batch_size,
            0.0,
            lr,
            &mut rng,
            |net, grads, step_lr, _| selective_update_step(net, grads, &mask, step_lr, cfg.l2),
        )
        .map_err(|e| match e {
            Error::NonFinite(detail) => Error::Diverged { epoch, detail },
            other => other,
        })?;
        history.epochs.push(AdaptEpoch { epoch, lr, loss, param_digest: param_digest(&model) });
    }
    Ok(Adapted { model, history })
}

/// Convenience for tests and tools: one full-batch selective step on a labelled batch.
pub fn selective_step_on_batch(
    net: &mut Network,
    frames: &Array2<f64>,
    labels: &[usize],
    mask: &UpdateMask,
    lr: f64,
    l2: f64,
) -> Result<()> {
    let (grads, _) = backward_with_loss(net, frames.view(), labels, 0.0)?;
    selective_update_step(net, &grads, mask, lr, l2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Domain;
    use crate::nn::{backward, sgd_step, Activation, DenseLayer};
    use ndarray::{array, Array1};
    use rand::Rng;

    fn net(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::random(4, &[6, 5], 3, Activation::Sigmoid, &mut rng).unwrap()
    }

    fn corpus(seed: u64, n: usize) -> FrameCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Array2::from_shape_fn((n, 4), |_| rng.random_range(-1.0..1.0));
        let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
        FrameCorpus::from_parts(frames, labels, 3, Domain::OutOfDomain, None).unwrap()
    }

    #[test]
    fn argmax_pseudo_label() {
        let layer = DenseLayer::new(Array2::zeros((3, 1)), array![0.1, 2.3, -1.0], Activation::Linear).unwrap();
        let n = Network::new(1, vec![layer]).unwrap();
        let c = FrameCorpus::from_parts(array![[0.0]], vec![0], 3, Domain::OutOfDomain, None).unwrap();
        assert_eq!(pseudo_label(&n, &c).unwrap().labels, vec![1]);
    }

    #[test]
    fn tied_logits_label_zero() {
        let layer = DenseLayer::new(Array2::zeros((3, 1)), Array1::zeros(3), Activation::Linear).unwrap();
        let n = Network::new(1, vec![layer]).unwrap();
        let c = FrameCorpus::from_parts(array![[1.0]], vec![2], 3, Domain::OutOfDomain, None).unwrap();
        assert_eq!(pseudo_label(&n, &c).unwrap().labels, vec![0]);
    }

    #[test]
    fn pseudo_labels_match_loop_and_ignore_order() {
        let n = net(1);
        let c = corpus(2, 300);
        let labels = pseudo_label(&n, &c).unwrap().labels;
        for (i, row) in c.frames.rows().into_iter().enumerate() {
            let out = n.predict(row.insert_axis(Axis(0))).unwrap();
            let mut best = 0;
            for k in 1..3 {
                if out[[0, k]] > out[[0, best]] {
                    best = k;
                }
            }
            assert_eq!(labels[i], best);
        }
        let rev: Vec<usize> = (0..300).rev().collect();
        let flipped = FrameCorpus::from_parts(c.frames.select(Axis(0), &rev), vec![0; 300], 3, Domain::OutOfDomain, None).unwrap();
        let flipped_labels = pseudo_label(&n, &flipped).unwrap().labels;
        assert_eq!(rev.iter().map(|&i| labels[i]).collect::<Vec<_>>(), flipped_labels);
    }

    #[test]
    fn empty_selection_is_a_no_op() {
        let mut n = net(3);
        let c = corpus(4, 16);
        let before = n.clone();
        selective_step_on_batch(&mut n, &c.frames, &c.labels, &UpdateMask::none(&before), 0.5, 0.001).unwrap();
        assert_eq!(n, before);
    }

    #[test]
    fn full_selection_equals_plain_sgd_with_l2() {
        let base = net(5);
        let c = corpus(6, 16);
        let mut a = base.clone();
        selective_step_on_batch(&mut a, &c.frames, &c.labels, &UpdateMask::all(&base), 0.3, 0.001).unwrap();
        let mut b = base.clone();
        let g = backward(&base, c.frames.view(), &c.labels, 0.001).unwrap();
        sgd_step(&mut b, &g, 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn changed_parameters_are_exactly_the_selected_ones() {
        let base = net(7);
        let c = corpus(8, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mask = UpdateMask::none(&base);
        for layer in &mut mask.layers {
            for s in layer.iter_mut() {
                *s = rng.random_bool(0.4);
            }
        }
        let mut n = base.clone();
        selective_step_on_batch(&mut n, &c.frames, &c.labels, &mask, 0.5, 0.001).unwrap();
        for (i, (after, before)) in n.layers.iter().zip(&base.layers).enumerate() {
            for r in 0..after.out_width() {
                let row_changed = after.weights.row(r) != before.weights.row(r) || after.biases[r] != before.biases[r];
                assert_eq!(row_changed, mask.layers[i][r], "layer {i} neuron {r}");
            }
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let base = net(1);
        let c = corpus(2, 40);
        let cfg = AdaptConfig { max_epochs: 0, ..Default::default() };
        let out = adapt(&base, &c, &c, &AdaptationPlan::standard(Variant::ModelA), &cfg, None).unwrap();
        assert_eq!(out.model, base);
        assert!(out.history.epochs.is_empty());
    }

    #[test]
    fn lr_halves_every_epoch() {
        let base = net(1);
        let c = corpus(2, 40);
        let cfg = AdaptConfig { max_epochs: 4, ..Default::default() };
        let out = adapt(&base, &c, &c, &AdaptationPlan::standard(Variant::ModelA), &cfg, None).unwrap();
        let lrs: Vec<f64> = out.history.epochs.iter().map(|e| e.lr).collect();
        assert_eq!(lrs, vec![0.004, 0.002, 0.001, 0.0005]);
    }

    #[test]
    fn model_c_requires_predecessor() {
        let base = net(1);
        let c = corpus(2, 40);
        let cfg = AdaptConfig::for_variant(Variant::ModelC);
        assert!(adapt(&base, &c, &c, &AdaptationPlan::standard(Variant::ModelC), &cfg, None).is_err());
        assert!(adapt(&base, &c, &c, &AdaptationPlan::standard(Variant::ModelC), &cfg, Some(&base)).is_ok());
    }

    #[test]
    fn model_b_with_empty_mask_is_unchanged() {
        let base = net(1);
        let c = corpus(2, 40);
        let cfg = AdaptConfig { update_mask: Some(UpdateMask::none(&base)), max_epochs: 3, ..Default::default() };
        let out = adapt(&base, &c, &c, &AdaptationPlan::standard(Variant::ModelB), &cfg, None).unwrap();
        assert_eq!(out.model, base);
    }

    #[test]
    fn inconsistent_plans_rejected() {
        let base = net(1);
        let c = corpus(2, 40);
        let mixed_a = AdaptConfig { data_mix: 0.5, ..Default::default() };
        assert!(adapt(&base, &c, &c, &AdaptationPlan::standard(Variant::ModelA), &mixed_a, None).is_err());
        assert!(adapt(&base, &c, &c, &AdaptationPlan::standard(Variant::ModelB), &AdaptConfig::default(), None).is_err());
        let bad_mix = AdaptConfig { data_mix: 1.5, ..Default::default() };
        assert!(adapt(&base, &c, &c, &AdaptationPlan::standard(Variant::ModelD), &bad_mix, None).is_err());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("b".parse::<Variant>().unwrap(), Variant::ModelB);
        assert_eq!("Model-D".parse::<Variant>().unwrap(), Variant::ModelD);
        assert!("E".parse::<Variant>().is_err());
    }
}
