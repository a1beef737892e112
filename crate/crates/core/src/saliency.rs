//! Per-neuron saliency for one hidden layer.
//!
//! Three estimators are provided:
//!
//! - **MBP**: weight power, `Σ_j w_nj² + b_n²` over the neuron's incoming parameters.
//! - **OBS**: second-order sensitivity `Σ_q w_q² H_qq / 2` over the incoming parameters,
//!   with `H_qq` the Gauss–Newton diagonal of the loss Hessian on a calibration set.
//! - **MI**: mean absolute cumulative cross-correlation between a neuron's output and
//!   each of its inputs over a temporal window `q`,
//!   `r[t] = 1/N Σ_p | Σ_{k=-(q/2-1)}^{q/2} x_n[t] · x_p[t+k] |`,
//!   averaged over every `t` whose window lies inside one utterance.
//!
//! Scores are ranked ascending (ties to the lower index) and split into
//! hypo / mid / hyper bands by percentage.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::datagen::{FrameCorpus, Segment};
use crate::error::{config_err, input_err, Error, Result};
use crate::nn::{Activation, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Mbp,
    Obs,
    Mi,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Mbp, Method::Obs, Method::Mi];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Mbp => "MBP",
            Method::Obs => "OBS",
            Method::Mi => "MI",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mbp" => Ok(Method::Mbp),
            "obs" => Ok(Method::Obs),
            "mi" => Ok(Method::Mi),
            other => input_err(format!("unknown saliency method '{other}'")),
        }
    }
}

/// Scores for one layer and method, with an ascending rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    /// 1-based hidden layer number.
    #[serde(rename = "layer")]
    pub layer_index: usize,
    pub method: Method,
    pub scores: Vec<f64>,
    pub ranking: Vec<usize>,
}

impl SaliencyReport {
    pub fn new(layer_index: usize, method: Method, scores: Vec<f64>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return input_err(format!("saliency scores must be finite and non-negative, got {bad}"));
        }
        let ranking = rank_ascending(&scores);
        Ok(Self { layer_index, method, scores, ranking })
    }

    pub fn width(&self) -> usize {
        self.scores.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Indices sorted ascending by score; equal scores keep index order.
pub fn rank_ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

/// Window and sample-size settings for the cross-correlation estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiConfig {
    /// Even window length; offsets run from `-(q/2 - 1)` to `q/2`.
    pub window_q: usize,
    /// Cap on calibration frames taken from the start of the stream.
    pub max_frames: usize,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self { window_q: 10, max_frames: 4000 }
    }
}

impl MiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_q < 2 || self.window_q % 2 != 0 {
            return config_err(format!("window_q must be even and >= 2, got {}", self.window_q));
        }
        if self.max_frames == 0 {
            return config_err("max_frames must be positive");
        }
        Ok(())
    }

    /// Offsets `(lo, hi)` with `k ∈ [-lo, hi]`.
    pub fn offsets(&self) -> (usize, usize) {
        (self.window_q / 2 - 1, self.window_q / 2)
    }
}

/// Magnitude-based saliency: `Σ_j w_nj² + b_n²`.
pub fn mbp_saliency(net: &Network, layer_index: usize) -> Result<SaliencyReport> {
    let layer = net.hidden_layer(layer_index)?;
    let scores = layer
        .weights
        .rows()
        .into_iter()
        .zip(layer.biases.iter())
        .map(|(row, b)| row.iter().map(|w| w * w).sum::<f64>() + b * b)
        .collect();
    SaliencyReport::new(layer_index, Method::Mbp, scores)
}

/// OBD/OBS per-weight saliency for a loss locally quadratic in `w` with curvature `h`.
pub fn obs_weight_saliency(weight: f64, hessian_diag: f64) -> f64 {
    weight * weight * hessian_diag / 2.0
}

/// Gauss–Newton diagonal of the mean calibration loss for the incoming weights and
/// biases of hidden layer `layer_index`. Returns `(H_W, H_b)` shaped like the layer.
pub fn gauss_newton_diagonal(
    net: &Network,
    layer_index: usize,
    frames: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let target = layer_index - 1;
    net.hidden_layer(layer_index)?;
    if frames.nrows() == 0 {
        return input_err("calibration set is empty");
    }
    let (out, trace) = net.forward(frames)?;
    let n_frames = frames.nrows();
    let last = net.layers.last().unwrap();
    let classes = last.out_width();
    let width = net.layers[target].out_width();
    let input = &trace.activations[target];
    let mut hw = Array2::<f64>::zeros(net.layers[target].weights.raw_dim());
    let mut hb = Array1::<f64>::zeros(width);

    for t in 0..n_frames {
        // Jacobian of the output pre-activations w.r.t. the target layer pre-activations,
        // propagated top-down one output unit at a time: jac is [classes × width_l].
        let mut jac = Array2::<f64>::eye(classes);
        for l in (target + 1..net.layers.len()).rev() {
            let below = &net.layers[l - 1];
            let h_below = trace.activations[l].row(t);
            let mut next = jac.dot(&net.layers[l].weights);
            for (j, mut col) in next.axis_iter_mut(Axis(1)).enumerate() {
                let d = if below.is_kept(j) { below.activation.derivative_from_output(h_below[j]) } else { 0.0 };
                col *= d;
            }
            jac = next;
        }
        // output curvature A: softmax-CE → diag(p) − ppᵀ; otherwise squared error → diag(f'(z)²)
        let p = out.row(t);
        let a = if last.activation == Activation::Softmax {
            let mut a = Array2::from_shape_fn((classes, classes), |(i, j)| -p[i] * p[j]);
            for i in 0..classes {
                a[[i, i]] += p[i];
            }
            a
        } else {
            Array2::from_diag(&p.mapv(|h| last.activation.derivative_from_output(h).powi(2)))
        };
        // c_n = g_nᵀ A g_n with g_n the n-th Jacobian column
        let ag = a.dot(&jac);
        let x = input.row(t);
        for n in 0..width {
            let c: f64 = jac.column(n).dot(&ag.column(n));
            hb[n] += c;
            let mut row = hw.row_mut(n);
            row.zip_mut_with(&x, |h, &xi| *h += c * xi * xi);
        }
    }
    let scale = 1.0 / n_frames as f64;
    hw *= scale;
    hb *= scale;
    Ok((hw, hb))
}

/// Second-order saliency: `Σ_q w_q² · H_qq / 2` over each neuron's incoming weights and bias.
pub fn obs_saliency(net: &Network, layer_index: usize, calib: &FrameCorpus) -> Result<SaliencyReport> {
    if calib.is_empty() {
        return input_err("OBS saliency needs a non-empty calibration set");
    }
    let (hw, hb) = gauss_newton_diagonal(net, layer_index, calib.frames.view())?;
    let layer = &net.layers[layer_index - 1];
    let scores = (0..layer.out_width())
        .map(|n| {
            let w: f64 = layer
                .weights
                .row(n)
                .iter()
                .zip(hw.row(n).iter())
                .map(|(&w, &h)| obs_weight_saliency(w, h))
                .sum();
            w + obs_weight_saliency(layer.biases[n], hb[n])
        })
        .collect();
    SaliencyReport::new(layer_index, Method::Obs, scores)
}

/// Cross-correlation scores from explicit input/output activation streams.
///
/// `inputs` is `[T × N]` (previous layer), `outputs` is `[T × M]`; the window never
/// crosses a segment boundary and only full windows contribute.
pub fn cross_correlation_scores(
    inputs: ArrayView2<f64>,
    outputs: ArrayView2<f64>,
    segments: &[Segment],
    cfg: &MiConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if inputs.nrows() != outputs.nrows() {
        return input_err("input and output streams differ in length");
    }
    let (lo, hi) = cfg.offsets();
    let n_inputs = inputs.ncols();
    let mut totals = vec![0.0; outputs.ncols()];
    let mut count = 0usize;
    for seg in segments {
        if seg.len() < cfg.window_q {
            continue;
        }
        // running window sums S_p[t] = Σ_k x_p[t+k]
        for t in seg.start + lo..seg.end - hi {
            let window = inputs.slice(ndarray::s![t - lo..=t + hi, ..]);
            let sums = window.sum_axis(Axis(0));
            let mean_abs = sums.iter().map(|s| s.abs()).sum::<f64>() / n_inputs as f64;
            for (total, &x) in totals.iter_mut().zip(outputs.row(t).iter()) {
                *total += x.abs() * mean_abs;
            }
            count += 1;
        }
    }
    if count == 0 {
        return input_err(format!("stream has no utterance of at least {} frames", cfg.window_q));
    }
    Ok(totals.into_iter().map(|s| s / count as f64).collect())
}

/// Temporal cross-correlation saliency of hidden layer `layer_index`.
pub fn mi_saliency(
    net: &Network,
    layer_index: usize,
    calib_stream: &FrameCorpus,
    cfg: &MiConfig,
) -> Result<SaliencyReport> {
    cfg.validate()?;
    net.hidden_layer(layer_index)?;
    if calib_stream.len() < cfg.window_q {
        return input_err(format!(
            "stream of {} frames is shorter than the window {}",
            calib_stream.len(),
            cfg.window_q
        ));
    }
    let (frames, segments) = truncate_stream(calib_stream, cfg.max_frames);
    let (_, trace) = net.forward(frames)?;
    let scores = cross_correlation_scores(
        trace.activations[layer_index - 1].view(),
        trace.activations[layer_index].view(),
        &segments,
        cfg,
    )?;
    SaliencyReport::new(layer_index, Method::Mi, scores)
}

fn truncate_stream(corpus: &FrameCorpus, max_frames: usize) -> (ArrayView2<'_, f64>, Vec<Segment>) {
    let end = corpus.len().min(max_frames);
    let segments = corpus
        .segments
        .iter()
        .filter(|s| s.start < end)
        .map(|s| Segment { start: s.start, end: s.end.min(end) })
        .collect();
    (corpus.frames.slice(ndarray::s![..end, ..]), segments)
}

/// Dispatch to one of the three estimators.
pub fn compute_saliency(
    net: &Network,
    layer_index: usize,
    method: Method,
    calib: &FrameCorpus,
    mi: &MiConfig,
) -> Result<SaliencyReport> {
    match method {
        Method::Mbp => mbp_saliency(net, layer_index),
        Method::Obs => obs_saliency(net, layer_index, calib),
        Method::Mi => mi_saliency(net, layer_index, calib, mi),
    }
}

/// `round_half_up(pct · width / 100)`; 2 % of 2048 is 41.
pub fn percent_to_count(pct: f64, width: usize) -> usize {
    (pct * width as f64 / 100.0 + 0.5).floor() as usize
}

/// Neuron ids of the three saliency bands.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bands {
    pub hypo: Vec<usize>,
    pub mid: Vec<usize>,
    pub hyper: Vec<usize>,
}

/// Lowest `hypo_pct` of the ranking is hypo, highest `hyper_pct` is hyper, the rest is mid.
pub fn band_select(report: &SaliencyReport, hypo_pct: f64, hyper_pct: f64) -> Result<Bands> {
    for p in [hypo_pct, hyper_pct] {
        if !(0.0..=100.0).contains(&p) {
            return input_err(format!("percentage {p} outside [0, 100]"));
        }
    }
    if hypo_pct + hyper_pct > 100.0 {
        return input_err("hypo and hyper percentages exceed 100");
    }
    let width = report.width();
    let n_hypo = percent_to_count(hypo_pct, width);
    let n_hyper = percent_to_count(hyper_pct, width);
    if n_hypo + n_hyper > width {
        return input_err(format!("{n_hypo} hypo + {n_hyper} hyper neurons overlap in a layer of {width}"));
    }
    let r = &report.ranking;
    Ok(Bands {
        hypo: r[..n_hypo].to_vec(),
        mid: r[n_hypo..width - n_hyper].to_vec(),
        hyper: r[width - n_hyper..].to_vec(),
    })
}

/// The `pct` percent of neurons centred on the median of the ranking.
pub fn mid_select(report: &SaliencyReport, pct: f64) -> Result<Vec<usize>> {
    if !(0.0..=100.0).contains(&pct) {
        return input_err(format!("percentage {pct} outside [0, 100]"));
    }
    let width = report.width();
    let n = percent_to_count(pct, width);
    let start = (width - n) / 2;
    Ok(report.ranking[start..start + n].to_vec())
}
