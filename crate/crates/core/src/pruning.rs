//! Prune plans, neuron masks and structural surgery.
//!
//! A [`PruneMask`] is the canonical representation: it marks neurons of an
//! unchanged architecture. [`apply_mask`] silences them (output forced to zero
//! after the activation) while [`structural_prune`] physically removes them.

use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, input_err, Error, Result};
use crate::nn::Network;
use crate::saliency::{band_select, mid_select, Method, SaliencyReport};

/// Which part of the saliency ranking to remove.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "band", rename_all = "snake_case")]
pub enum Band {
    Hypo { pct: f64 },
    Hyper { pct: f64 },
    Mid { pct: f64 },
    Both { hypo_pct: f64, hyper_pct: f64 },
}

impl Band {
    pub fn name(&self) -> &'static str {
        match self {
            Band::Hypo { .. } => "hypo",
            Band::Hyper { .. } => "hyper",
            Band::Mid { .. } => "mid",
            Band::Both { .. } => "both",
        }
    }

    /// Per-layer percentage of neurons this band removes.
    pub fn layer_pct(&self) -> f64 {
        match *self {
            Band::Hypo { pct } | Band::Hyper { pct } | Band::Mid { pct } => pct,
            Band::Both { hypo_pct, hyper_pct } => hypo_pct + hyper_pct,
        }
    }

    /// Build from the CLI vocabulary (`hypo|hyper|mid|both`).
    pub fn from_parts(name: &str, hypo_pct: f64, hyper_pct: f64, mid_pct: f64) -> Result<Self> {
        match name {
            "hypo" => Ok(Band::Hypo { pct: hypo_pct }),
            "hyper" => Ok(Band::Hyper { pct: hyper_pct }),
            "mid" => Ok(Band::Mid { pct: mid_pct }),
            "both" | "hypo+hyper" => Ok(Band::Both { hypo_pct, hyper_pct }),
            other => input_err(format!("unknown band '{other}'")),
        }
    }
}

/// Pruning instruction for one hidden layer (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    pub method: Method,
    #[serde(flatten)]
    pub band: Band,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrunePlan {
    pub layers: Vec<LayerPlan>,
}

impl PrunePlan {
    /// The same band on each listed layer.
    pub fn uniform(method: Method, layers: &[usize], band: Band) -> Self {
        Self { layers: layers.iter().map(|&layer| LayerPlan { layer, method, band }).collect() }
    }

    /// Combined hyper+hypo configuration: layers 1 and 2 lose 8 % hypo + 4 % hyper,
    /// layer 3 (the pre-final layer of a three-hidden-layer net) loses 2 % + 2 %.
    pub fn combined(method: Method, layers: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(layers.len());
        for &layer in layers {
            let band = match layer {
                1 | 2 => Band::Both { hypo_pct: 8.0, hyper_pct: 4.0 },
                3 => Band::Both { hypo_pct: 2.0, hyper_pct: 2.0 },
                other => return config_err(format!("no combined split defined for layer {other}")),
            };
            out.push(LayerPlan { layer, method, band });
        }
        Ok(Self { layers: out })
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        let mut seen = Vec::new();
        for lp in &self.layers {
            if lp.layer == 0 || lp.layer > net.hidden_count() {
                return Err(Error::LayerOutOfRange {
                    index: lp.layer,
                    detail: format!("plans may only address hidden layers 1..={}", net.hidden_count()),
                });
            }
            if seen.contains(&lp.layer) {
                return config_err(format!("layer {} planned twice", lp.layer));
            }
            seen.push(lp.layer);
            let pcts: &[f64] = match &lp.band {
                Band::Hypo { pct } | Band::Hyper { pct } | Band::Mid { pct } => &[*pct],
                Band::Both { hypo_pct, hyper_pct } => &[*hypo_pct, *hyper_pct],
            };
            if pcts.iter().any(|p| !(0.0..=100.0).contains(p)) || lp.band.layer_pct() > 100.0 {
                return config_err(format!("band percentages for layer {} exceed the layer", lp.layer));
            }
        }
        Ok(())
    }
}

/// Per-hidden-layer keep vectors plus the plan entries that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    /// `keep[l - 1][n]` is false when neuron `n` of hidden layer `l` is pruned.
    pub keep: Vec<Vec<bool>>,
    pub origins: Vec<Option<LayerPlan>>,
}

impl PruneMask {
    /// A mask that keeps every hidden neuron.
    pub fn all_true(net: &Network) -> Self {
        let keep: Vec<Vec<bool>> =
            net.layers[..net.hidden_count()].iter().map(|l| vec![true; l.out_width()]).collect();
        let origins = vec![None; keep.len()];
        Self { keep, origins }
    }

    pub fn pruned(&self, layer: usize) -> Vec<usize> {
        self.keep[layer - 1].iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i).collect()
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().flatten().filter(|&&k| !k).count()
    }

    pub fn is_all_true(&self) -> bool {
        self.pruned_count() == 0
    }

    /// Percentage of pruned neurons in each hidden layer.
    pub fn layer_percentages(&self) -> Vec<f64> {
        self.keep
            .iter()
            .map(|k| 100.0 * k.iter().filter(|&&v| !v).count() as f64 / k.len() as f64)
            .collect()
    }

    /// Percentage of pruned neurons over all hidden layers together.
    pub fn network_percentage(&self) -> f64 {
        let total: usize = self.keep.iter().map(Vec::len).sum();
        100.0 * self.pruned_count() as f64 / total as f64
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        if self.keep.len() != net.hidden_count() {
            return dim_err(format!(
                "mask covers {} layers, network has {} hidden layers",
                self.keep.len(),
                net.hidden_count()
            ));
        }
        for (i, k) in self.keep.iter().enumerate() {
            if k.len() != net.layers[i].out_width() {
                return dim_err(format!("mask width mismatch in layer {}", i + 1));
            }
            if !k.iter().any(|&v| v) {
                return input_err(format!("mask removes every neuron of layer {}", i + 1));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Neurons removed for one layer by a plan entry.
pub fn selected_neurons(report: &SaliencyReport, band: &Band) -> Result<Vec<usize>> {
    Ok(match *band {
        Band::Hypo { pct } => band_select(report, pct, 0.0)?.hypo,
        Band::Hyper { pct } => band_select(report, 0.0, pct)?.hyper,
        Band::Mid { pct } => mid_select(report, pct)?,
        Band::Both { hypo_pct, hyper_pct } => {
            let b = band_select(report, hypo_pct, hyper_pct)?;
            b.hypo.into_iter().chain(b.hyper).collect()
        }
    })
}

/// Turn saliency reports into a mask following `plan`.
pub fn build_mask(net: &Network, reports: &[SaliencyReport], plan: &PrunePlan) -> Result<PruneMask> {
    plan.validate(net)?;
    let mut mask = PruneMask::all_true(net);
    for lp in &plan.layers {
        let report = reports
            .iter()
            .find(|r| r.layer_index == lp.layer && r.method == lp.method)
            .ok_or_else(|| {
                Error::InvalidInput(format!("no {} saliency report for layer {}", lp.method, lp.layer))
            })?;
        if report.width() != net.layers[lp.layer - 1].out_width() {
            return dim_err(format!("report for layer {} does not match the network", lp.layer));
        }
        let keep = &mut mask.keep[lp.layer - 1];
        for n in selected_neurons(report, &lp.band)? {
            keep[n] = false;
        }
        mask.origins[lp.layer - 1] = Some(*lp);
    }
    mask.validate(net)?;
    Ok(mask)
}

/// Silence pruned neurons while keeping their parameters. Composes with masks
/// already on the network (a neuron stays silenced once silenced).
pub fn apply_mask(net: &Network, mask: &PruneMask) -> Result<Network> {
    mask.validate(net)?;
    let mut out = net.clone();
    for (layer, keep) in out.layers.iter_mut().zip(&mask.keep) {
        let merged: Vec<bool> = match &layer.keep {
            Some(old) => old.iter().zip(keep).map(|(a, b)| *a && *b).collect(),
            None => keep.clone(),
        };
        layer.keep = Some(merged);
    }
    out.validate()?;
    Ok(out)
}

/// Remove pruned neurons: their weight rows and biases, and the matching input
/// columns of the following layer. Existing layer masks are folded in.
pub fn structural_prune(net: &Network, mask: &PruneMask) -> Result<Network> {
    let masked = apply_mask(net, mask)?;
    let mut layers = masked.layers.clone();
    for i in 0..masked.hidden_count() {
        let keep = layers[i].keep.take().expect("apply_mask sets every hidden keep vector");
        let rows: Vec<usize> = keep.iter().enumerate().filter(|(_, &k)| k).map(|(j, _)| j).collect();
        let layer = &mut layers[i];
        layer.weights = layer.weights.select(Axis(0), &rows);
        layer.biases = Array1::from_iter(rows.iter().map(|&r| layer.biases[r]));
        let next = &mut layers[i + 1];
        next.weights = next.weights.select(Axis(1), &rows);
    }
    for layer in &mut layers {
        layer.keep = None;
    }
    Network::new(masked.input_width, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer};
    use ndarray::{Array2, array};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64, widths: &[usize]) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Network::random(5, widths, 3, Activation::Sigmoid, &mut rng).unwrap()
    }

    fn mbp_reports(n: &Network) -> Vec<SaliencyReport> {
        (1..=n.hidden_count()).map(|l| crate::saliency::mbp_saliency(n, l).unwrap()).collect()
    }

    fn random_mask(rng: &mut ChaCha8Rng, n: &Network) -> PruneMask {
        let mut mask = PruneMask::all_true(n);
        for keep in &mut mask.keep {
            for k in keep.iter_mut() {
                *k = rng.random_bool(0.7);
            }
            if !keep.iter().any(|&v| v) {
                keep[0] = true;
            }
        }
        mask
    }

    #[test]
    fn wide_layer_one_loses_41() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let big = Network::new(
            4,
            vec![
                DenseLayer::glorot(4, 2048, Activation::Sigmoid, &mut rng),
                DenseLayer::glorot(2048, 8, Activation::Sigmoid, &mut rng),
                DenseLayer::glorot(8, 2, Activation::Softmax, &mut rng),
            ],
        )
        .unwrap();
        let plan = PrunePlan::uniform(Method::Mbp, &[1], Band::Hypo { pct: 2.0 });
        let mask = build_mask(&big, &mbp_reports(&big), &plan).unwrap();
        assert_eq!(mask.pruned(1).len(), 41);
        assert!(mask.keep[1].iter().all(|&k| k));
        let smaller = structural_prune(&big, &mask).unwrap();
        assert_eq!(smaller.layers[0].out_width(), 2007);
    }

    #[test]
    fn zero_percent_plan_keeps_everything() {
        let n = net(1, &[10, 10, 10]);
        let plan = PrunePlan::uniform(Method::Mbp, &[1, 2, 3], Band::Both { hypo_pct: 0.0, hyper_pct: 0.0 });
        assert!(build_mask(&n, &mbp_reports(&n), &plan).unwrap().is_all_true());
    }

    #[test]
    fn mid_band_matches_independent_sort() {
        let n = net(2, &[128, 16]);
        let reports = mbp_reports(&n);
        let plan = PrunePlan::uniform(Method::Mbp, &[1], Band::Mid { pct: 5.0 });
        let mask = build_mask(&n, &reports, &plan).unwrap();
        let mut order: Vec<(f64, usize)> = reports[0].scores.iter().copied().zip(0..).collect();
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<usize> = order[61..67].iter().map(|&(_, i)| i).collect();
        want.sort_unstable();
        assert_eq!(mask.pruned(1), want);
    }

    #[test]
    fn combined_split_for_three_layers() {
        let plan = PrunePlan::combined(Method::Mi, &[1, 2, 3]).unwrap();
        let bands: Vec<Band> = plan.layers.iter().map(|l| l.band).collect();
        assert_eq!(
            bands,
            vec![
                Band::Both { hypo_pct: 8.0, hyper_pct: 4.0 },
                Band::Both { hypo_pct: 8.0, hyper_pct: 4.0 },
                Band::Both { hypo_pct: 2.0, hyper_pct: 2.0 },
            ]
        );
    }

    #[test]
    fn output_layer_cannot_be_planned() {
        let n = net(1, &[6, 6]);
        let plan = PrunePlan::uniform(Method::Mbp, &[3], Band::Hypo { pct: 10.0 });
        assert!(matches!(build_mask(&n, &mbp_reports(&n), &plan), Err(Error::LayerOutOfRange { .. })));
    }

    #[test]
    fn oversized_band_rejected() {
        let n = net(1, &[6, 6]);
        let plan = PrunePlan::uniform(Method::Mbp, &[1], Band::Both { hypo_pct: 70.0, hyper_pct: 40.0 });
        assert!(build_mask(&n, &mbp_reports(&n), &plan).is_err());
    }

    #[test]
    fn all_true_mask_is_bit_identical() {
        let n = net(4, &[7, 6]);
        let x = Array2::from_shape_fn((9, 5), |(i, j)| (i as f64 - j as f64) * 0.3);
        let masked = apply_mask(&n, &PruneMask::all_true(&n)).unwrap();
        assert_eq!(masked.predict(x.view()).unwrap(), n.predict(x.view()).unwrap());
        assert_eq!(structural_prune(&n, &PruneMask::all_true(&n)).unwrap(), n);
    }

    #[test]
    fn silencing_a_disconnected_neuron_changes_nothing() {
        let mut n = net(5, &[4, 4]);
        n.layers[1].weights.column_mut(2).fill(0.0);
        let mut mask = PruneMask::all_true(&n);
        mask.keep[0][2] = false;
        let x = Array2::from_shape_fn((6, 5), |(i, j)| (i * j) as f64 * 0.1);
        assert_eq!(apply_mask(&n, &mask).unwrap().predict(x.view()).unwrap(), n.predict(x.view()).unwrap());
    }

    #[test]
    fn hand_checked_surgery() {
        // width-4 layer, drop neuron 2: next layer loses column 2
        let l1 = DenseLayer::new(
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, -0.5]],
            array![0.0, 0.1, 0.2, 0.3],
            Activation::Sigmoid,
        )
        .unwrap();
        let l2 = DenseLayer::new(
            array![[1.0, 2.0, 3.0, 4.0], [-1.0, -2.0, -3.0, -4.0]],
            array![0.0, 0.0],
            Activation::Sigmoid,
        )
        .unwrap();
        let l3 = DenseLayer::new(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0], Activation::Softmax).unwrap();
        let n = Network::new(2, vec![l1, l2, l3]).unwrap();
        let mut mask = PruneMask::all_true(&n);
        mask.keep[0][2] = false;
        let s = structural_prune(&n, &mask).unwrap();
        assert_eq!(s.layers[1].weights, array![[1.0, 2.0, 4.0], [-1.0, -2.0, -4.0]]);
        assert_eq!(s.layers[0].biases, array![0.0, 0.1, 0.3]);
        let masked = apply_mask(&n, &mask).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_fn((20, 2), |_| rng.random_range(-2.0..2.0));
        let a = masked.predict(x.view()).unwrap();
        let b = s.predict(x.view()).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn emptying_a_layer_is_rejected() {
        let n = net(1, &[3, 3]);
        let mut mask = PruneMask::all_true(&n);
        mask.keep[0] = vec![false; 3];
        assert!(apply_mask(&n, &mask).is_err());
        assert!(structural_prune(&n, &mask).is_err());
    }

    #[test]
    fn mask_json_round_trip() {
        let n = net(1, &[10, 10]);
        let plan = PrunePlan::combined(Method::Mbp, &[1, 2]).unwrap();
        let mask = build_mask(&n, &mbp_reports(&n), &plan).unwrap();
        assert_eq!(PruneMask::from_json(&mask.to_json().unwrap()).unwrap(), mask);
    }

    proptest! {
        #[test]
        fn masking_equals_surgery(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let widths = [rng.random_range(2..10), rng.random_range(2..10)];
            let n = net(seed, &widths);
            let mask = random_mask(&mut rng, &n);
            let x = Array2::from_shape_fn((8, 5), |_| rng.random_range(-3.0..3.0));
            let a = apply_mask(&n, &mask).unwrap().predict(x.view()).unwrap();
            let b = structural_prune(&n, &mask).unwrap().predict(x.view()).unwrap();
            for (u, v) in a.iter().zip(b.iter()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn surgery_shrinks_unless_all_true(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = net(seed, &[6, 7]);
            let mask = random_mask(&mut rng, &n);
            let s = structural_prune(&n, &mask).unwrap();
            if mask.is_all_true() {
                prop_assert_eq!(s.param_count(), n.param_count());
            } else {
                prop_assert!(s.param_count() < n.param_count());
            }
        }

        #[test]
        fn masking_is_idempotent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = net(seed, &[6, 7]);
            let mask = random_mask(&mut rng, &n);
            let once = apply_mask(&n, &mask).unwrap();
            prop_assert_eq!(apply_mask(&once, &mask).unwrap(), once);
        }

        #[test]
        fn mask_construction_is_deterministic(seed in any::<u64>(), hypo in 0.0f64..20.0, hyper in 0.0f64..20.0) {
            let n = net(seed, &[20, 12]);
            let plan = PrunePlan::uniform(Method::Mbp, &[1, 2], Band::Both { hypo_pct: hypo, hyper_pct: hyper });
            let a = build_mask(&n, &mbp_reports(&n), &plan).unwrap();
            let b = build_mask(&n, &mbp_reports(&n), &plan).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
