//! Synthetic frame-classification corpus.
//!
//! Frames are drawn from a hidden Markov label chain. Each class owns a smooth
//! log-spectral envelope; a slow quasi-periodic modulation, per-utterance level
//! offsets and temporally smoothed jitter are layered on top. Degradations act on
//! the linear spectral power before root compression, after which every frame is
//! stacked with `context` neighbours on each side (clamped at utterance edges).
//!
//! In-domain data is clean or carries additive coloured noise; out-of-domain data
//! is smeared in time by a causal exponential-decay kernel, a stand-in for room
//! reverberation, and its label chain favours low class indices.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, input_err, Error, Result};

/// Affine map applied after root compression, centring compressed unit power at zero.
const FEATURE_GAIN: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    InDomain,
    OutOfDomain,
}

/// Half-open frame range `[start, end)` of one utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub markov_stay_prob: f64,
    /// SNR range in dB for noisy in-domain data.
    pub noise_snr_db: (f64, f64),
    /// Reverberation decay range (seconds to fall by 60 dB).
    pub reverb_decay: (f64, f64),
    /// Gain of the reverberant tail relative to the direct frame.
    pub reverb_tail_gain: f64,
    pub root_compress: f64,
    /// Frames stacked on either side of the centre frame.
    pub context: usize,
    pub frame_rate: f64,
    pub segment_len: usize,
    /// Standard deviation (dB) of class envelope deviations.
    pub envelope_spread_db: f64,
    /// Standard deviation (dB) of per-frame jitter.
    pub jitter_db: f64,
    /// Peak depth (dB) of the quasi-periodic modulation.
    pub modulation_db: f64,
    /// Standard deviation (dB) of per-utterance level offsets.
    pub level_db: f64,
    /// Seed of the class envelopes, shared by every corpus drawn from this spec.
    pub envelope_seed: u64,
    /// Class-prior skew of out-of-domain data: class `k` is entered with weight
    /// `exp(−skew · k / (C − 1))`. Zero keeps the prior uniform.
    pub out_of_domain_skew: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            num_classes: 24,
            feature_dim: 40,
            markov_stay_prob: 0.9,
            noise_snr_db: (0.0, 15.0),
            reverb_decay: (0.1, 0.8),
            reverb_tail_gain: 0.8,
            root_compress: 15.0,
            context: 8,
            frame_rate: 100.0,
            segment_len: 200,
            envelope_spread_db: 2.5,
            jitter_db: 4.0,
            modulation_db: 3.0,
            level_db: 3.0,
            envelope_seed: 7,
            out_of_domain_skew: 2.0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return config_err("num_classes must be at least 2");
        }
        if self.feature_dim == 0 {
            return config_err("feature_dim must be positive");
        }
        if !(self.markov_stay_prob > 0.0 && self.markov_stay_prob < 1.0) {
            return config_err("markov_stay_prob must lie in (0, 1)");
        }
        if self.noise_snr_db.0 > self.noise_snr_db.1 || self.reverb_decay.0 > self.reverb_decay.1 {
            return config_err("ranges must be ordered (low, high)");
        }
        if self.reverb_decay.0 < 0.0 || self.reverb_tail_gain < 0.0 {
            return config_err("reverberation parameters must be non-negative");
        }
        if !(self.root_compress >= 1.0) || !(self.frame_rate > 0.0) {
            return config_err("root_compress must be >= 1 and frame_rate positive");
        }
        if self.segment_len <= 2 * self.context {
            return config_err("segment_len must exceed twice the context");
        }
        if !(self.out_of_domain_skew >= 0.0 && self.out_of_domain_skew.is_finite()) {
            return config_err("out_of_domain_skew must be finite and non-negative");
        }
        Ok(())
    }

    /// Width of a stacked frame, `feature_dim · (2·context + 1)`.
    pub fn frame_width(&self) -> usize {
        self.feature_dim * (2 * self.context + 1)
    }

    /// Class log-spectral envelopes in dB, `[num_classes × feature_dim]`.
    pub fn envelopes(&self) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.envelope_seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let f = self.feature_dim;
        let mut env = Array2::zeros((self.num_classes, f));
        for mut row in env.rows_mut() {
            let raw: Vec<f64> = (0..f).map(|_| normal.sample(&mut rng)).collect();
            // three-tap smoothing keeps envelopes formant-like
            let smooth: Vec<f64> = (0..f)
                .map(|i| {
                    let lo = i.saturating_sub(1);
                    let hi = (i + 1).min(f - 1);
                    (raw[lo] + 2.0 * raw[i] + raw[hi]) / 4.0
                })
                .collect();
            let sd = (smooth.iter().map(|v| v * v).sum::<f64>() / f as f64).sqrt().max(1e-12);
            for (i, v) in row.iter_mut().enumerate() {
                let tilt = -6.0 * i as f64 / f as f64;
                *v = tilt + self.envelope_spread_db * smooth[i] / sd;
            }
        }
        env
    }

    /// Relative weight of entering each class under a given prior skew.
    pub fn class_weights(&self, skew: f64) -> Vec<f64> {
        let top = (self.num_classes - 1).max(1) as f64;
        (0..self.num_classes).map(|k| (-skew * k as f64 / top).exp()).collect()
    }

    /// Row-stochastic label transition matrix of the hidden chain.
    pub fn transition_matrix(&self) -> Array2<f64> {
        let c = self.num_classes;
        let off = (1.0 - self.markov_stay_prob) / (c - 1) as f64;
        Array2::from_shape_fn((c, c), |(i, j)| if i == j { self.markov_stay_prob } else { off })
    }
}

/// Linear spectral power kept alongside the stacked features so degradations compose.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSource {
    pub power: Array2<f64>,
    pub spec: GeneratorSpec,
}

/// Time-ordered feature frames with labels, utterance boundaries and a domain tag.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameCorpus {
    pub frames: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub domain: Domain,
    pub segments: Vec<Segment>,
    pub source: Option<SpectralSource>,
}

impl FrameCorpus {
    /// Assemble a corpus from raw parts. `segments = None` treats the stream as one utterance.
    pub fn from_parts(
        frames: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        domain: Domain,
        segments: Option<Vec<Segment>>,
    ) -> Result<Self> {
        if frames.nrows() != labels.len() {
            return dim_err(format!("{} frames but {} labels", frames.nrows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return input_err(format!("label {bad} outside [0, {num_classes})"));
        }
        let segments = segments.unwrap_or_else(|| {
            if labels.is_empty() {
                vec![]
            } else {
                vec![Segment { start: 0, end: labels.len() }]
            }
        });
        let corpus = Self { frames, labels, num_classes, domain, segments, source: None };
        corpus.check_segments()?;
        Ok(corpus)
    }

    fn check_segments(&self) -> Result<()> {
        let mut cursor = 0;
        for s in &self.segments {
            if s.start != cursor || s.end <= s.start {
                return input_err("segments must be non-empty, ordered and contiguous");
            }
            cursor = s.end;
        }
        if cursor != self.labels.len() {
            return input_err("segments do not cover the corpus");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames.ncols()
    }

    /// Corpus made of the listed utterances, in the given order.
    pub fn select_segments(&self, which: &[usize]) -> Result<Self> {
        let mut rows = Vec::new();
        let mut segments = Vec::with_capacity(which.len());
        for &i in which {
            let seg = *self
                .segments
                .get(i)
                .ok_or_else(|| Error::InvalidInput(format!("segment {i} out of range")))?;
            let start = rows.len();
            rows.extend(seg.start..seg.end);
            segments.push(Segment { start, end: rows.len() });
        }
        Ok(Self {
            frames: self.frames.select(Axis(0), &rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
            domain: self.domain,
            segments,
            source: self.source.as_ref().map(|s| SpectralSource {
                power: s.power.select(Axis(0), &rows),
                spec: s.spec.clone(),
            }),
        })
    }

    /// Seeded sample of whole utterances covering roughly `fraction` of the frames.
    /// Always returns at least one utterance.
    pub fn sample_segments(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return input_err(format!("fraction must lie in (0, 1], got {fraction}"));
        }
        if self.segments.is_empty() {
            return input_err("cannot sample from an empty corpus");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..self.segments.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let target = (fraction * self.len() as f64).round() as usize;
        let mut chosen = Vec::new();
        let mut covered = 0;
        for i in order {
            if covered >= target.max(1) {
                break;
            }
            covered += self.segments[i].len();
            chosen.push(i);
        }
        chosen.sort_unstable();
        self.select_segments(&chosen)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Binary corpus container: magic, little-endian header length, JSON header, then
/// the stacked frames and (optionally) the spectral power as little-endian f64.
const CORPUS_MAGIC: &[u8; 8] = b"PKCORP01";

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    spec: Option<GeneratorSpec>,
    labels: Vec<usize>,
    segments: Vec<Segment>,
    domain_tag: Domain,
    num_classes: usize,
    rows: usize,
    cols: usize,
    power_cols: Option<usize>,
}

fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> Result<()> {
    for &v in m.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let mut data = vec![0.0; rows * cols];
    r.read_f64_into::<LittleEndian>(&mut data)?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Dimension(e.to_string()))
}

impl FrameCorpus {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = CorpusHeader {
            spec: self.source.as_ref().map(|s| s.spec.clone()),
            labels: self.labels.clone(),
            segments: self.segments.clone(),
            domain_tag: self.domain,
            num_classes: self.num_classes,
            rows: self.frames.nrows(),
            cols: self.frames.ncols(),
            power_cols: self.source.as_ref().map(|s| s.power.ncols()),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CORPUS_MAGIC)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        write_matrix(w, &self.frames)?;
        if let Some(src) = &self.source {
            write_matrix(w, &src.power)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CORPUS_MAGIC {
            return input_err("not a corpus file");
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let h: CorpusHeader = serde_json::from_slice(&json)?;
        let frames = read_matrix(r, h.rows, h.cols)?;
        let source = match (h.power_cols, h.spec) {
            (Some(pc), Some(spec)) => Some(SpectralSource { power: read_matrix(r, h.rows, pc)?, spec }),
            _ => None,
        };
        let mut corpus = Self::from_parts(frames, h.labels, h.num_classes, h.domain_tag, Some(h.segments))?;
        corpus.source = source;
        Ok(corpus)
    }
}

fn segment_bounds(total: usize, segment_len: usize) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < total {
        let end = (start + segment_len).min(total);
        out.push(Segment { start, end });
        start = end;
    }
    // a short trailing utterance is merged into its predecessor
    if out.len() > 1 && out.last().unwrap().len() < segment_len / 2 {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

/// Root-compress the power and stack `context` neighbours, clamped inside each utterance.
pub fn featurize(power: &Array2<f64>, segments: &[Segment], spec: &GeneratorSpec) -> Array2<f64> {
    let f = power.ncols();
    let ctx = spec.context;
    let compressed = power.mapv(|p| FEATURE_GAIN * (p.max(0.0).powf(1.0 / spec.root_compress) - 1.0));
    let width = f * (2 * ctx + 1);
    let mut frames = Array2::zeros((power.nrows(), width));
    for seg in segments {
        for t in seg.start..seg.end {
            let mut row = frames.row_mut(t);
            for (slot, off) in (-(ctx as isize)..=ctx as isize).enumerate() {
                let src = (t as isize + off).clamp(seg.start as isize, seg.end as isize - 1) as usize;
                row.slice_mut(ndarray::s![slot * f..(slot + 1) * f]).assign(&compressed.row(src));
            }
        }
    }
    frames
}

/// Sample a label sequence from the Markov chain; the first label is uniform.
pub fn sample_labels(spec: &GeneratorSpec, length: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let c = spec.num_classes;
    let mut labels = Vec::with_capacity(length);
    let mut cur = rng.random_range(0..c);
    for t in 0..length {
        if t > 0 && rng.random::<f64>() >= spec.markov_stay_prob {
            let step = rng.random_range(1..c);
            cur = (cur + step) % c;
        }
        labels.push(cur);
    }
    labels
}

/// Label sequence whose jumps land on class `k` with probability proportional to
/// [`GeneratorSpec::class_weights`]; `skew = 0` reproduces [`sample_labels`].
pub fn sample_labels_skewed(spec: &GeneratorSpec, length: usize, skew: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if skew == 0.0 {
        return sample_labels(spec, length, rng);
    }
    let w = spec.class_weights(skew);
    let first = WeightedIndex::new(&w).expect("positive weights");
    let mut labels = Vec::with_capacity(length);
    let mut cur = first.sample(rng);
    for t in 0..length {
        if t > 0 && rng.random::<f64>() >= spec.markov_stay_prob {
            let mut others = w.clone();
            others[cur] = 0.0;
            cur = WeightedIndex::new(&others).expect("at least two classes").sample(rng);
        }
        labels.push(cur);
    }
    labels
}

/// Clean in-domain corpus of `length` frames.
pub fn generate_clean(spec: &GeneratorSpec, length: usize, seed: u64) -> Result<FrameCorpus> {
    clean_with_skew(spec, length, seed, 0.0)
}

fn clean_with_skew(spec: &GeneratorSpec, length: usize, seed: u64, skew: f64) -> Result<FrameCorpus> {
    spec.validate()?;
    if length <= 2 * spec.context {
        return input_err(format!("length {length} must exceed twice the context ({})", spec.context));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = sample_labels_skewed(spec, length, skew, &mut rng);
    let segments = segment_bounds(length, spec.segment_len);
    let env = spec.envelopes();
    let f = spec.feature_dim;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut power = Array2::zeros((length, f));
    for seg in &segments {
        let level = spec.level_db * normal.sample(&mut rng);
        let period = rng.random_range(12.0..30.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let bin_phase: Vec<f64> = (0..f).map(|i| 0.3 * i as f64).collect();
        let mut jitter = vec![0.0; f];
        for t in seg.start..seg.end {
            let y = labels[t];
            let prev = if t > seg.start { labels[t - 1] } else { y };
            let arg = std::f64::consts::TAU * (t - seg.start) as f64 / period + phase;
            for i in 0..f {
                // AR(1) jitter: temporally smooth nuisance
                jitter[i] = 0.6 * jitter[i] + 0.8 * spec.jitter_db * normal.sample(&mut rng);
                let shape = if prev != y { 0.5 * (env[[y, i]] + env[[prev, i]]) } else { env[[y, i]] };
                let db = shape + level + spec.modulation_db * (arg + bin_phase[i]).sin() + jitter[i];
                power[[t, i]] = 10f64.powf(db / 10.0);
            }
        }
    }
    let frames = featurize(&power, &segments, spec);
    Ok(FrameCorpus {
        frames,
        labels,
        num_classes: spec.num_classes,
        domain: Domain::InDomain,
        segments,
        source: Some(SpectralSource { power, spec: spec.clone() }),
    })
}

fn require_source(corpus: &FrameCorpus) -> Result<&SpectralSource> {
    corpus
        .source
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("corpus carries no spectral power to degrade".into()))
}

fn rebuild(corpus: &FrameCorpus, power: Array2<f64>, domain: Domain) -> FrameCorpus {
    let spec = corpus.source.as_ref().unwrap().spec.clone();
    FrameCorpus {
        frames: featurize(&power, &corpus.segments, &spec),
        labels: corpus.labels.clone(),
        num_classes: corpus.num_classes,
        domain,
        segments: corpus.segments.clone(),
        source: Some(SpectralSource { power, spec }),
    }
}

/// Add coloured noise to every utterance, SNR drawn per utterance by `snr_db`.
fn add_noise(corpus: &FrameCorpus, mut snr_db: impl FnMut(&mut ChaCha8Rng) -> f64, seed: u64) -> Result<FrameCorpus> {
    let src = require_source(corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut power = src.power.clone();
    let f = power.ncols();
    for seg in &corpus.segments {
        let snr = snr_db(&mut rng);
        if snr == f64::INFINITY {
            continue;
        }
        let slope = rng.random_range(0.0..3.0);
        let colour: Vec<f64> = (0..f).map(|i| (-slope * i as f64 / f as f64).exp()).collect();
        let ratio = 10f64.powf(-snr / 10.0);
        for t in seg.start..seg.end {
            let noise: Vec<f64> = colour.iter().map(|c| c * rng.random_range(0.5..1.5)).collect();
            let noise_sum: f64 = noise.iter().sum();
            let mut row = power.row_mut(t);
            let signal: f64 = row.sum();
            let gain = ratio * signal / noise_sum;
            for (p, n) in row.iter_mut().zip(&noise) {
                *p += gain * n;
            }
        }
    }
    Ok(rebuild(corpus, power, Domain::InDomain))
}

/// Additive coloured noise at a fixed per-frame SNR (dB). `+∞` leaves the corpus unchanged.
pub fn degrade_noise(corpus: &FrameCorpus, snr_db: f64, seed: u64) -> Result<FrameCorpus> {
    if snr_db.is_nan() {
        return input_err("SNR must not be NaN");
    }
    if snr_db == f64::INFINITY {
        require_source(corpus)?;
        let mut out = corpus.clone();
        out.domain = Domain::InDomain;
        return Ok(out);
    }
    add_noise(corpus, |_| snr_db, seed)
}

/// Additive noise with per-utterance SNR drawn uniformly from `range` (dB).
pub fn degrade_noise_range(corpus: &FrameCorpus, range: (f64, f64), seed: u64) -> Result<FrameCorpus> {
    add_noise(corpus, |rng| rng.random_range(range.0..=range.1), seed)
}

/// Causal kernel `h[m] = g^[m>0] · 10^(−6m / (decay · frame_rate))` for `m` up to the
/// 60 dB point. `decay = 0` gives the delta kernel.
pub fn reverb_kernel(decay: f64, frame_rate: f64, tail_gain: f64) -> Vec<f64> {
    let span = decay * frame_rate;
    if span <= 0.0 {
        return vec![1.0];
    }
    let len = span.floor() as usize + 1;
    (0..len)
        .map(|m| {
            let gain = if m == 0 { 1.0 } else { tail_gain };
            gain * 10f64.powf(-6.0 * m as f64 / span)
        })
        .collect()
}

fn convolve(corpus: &FrameCorpus, mut kernel_for: impl FnMut(&mut ChaCha8Rng) -> Vec<f64>, seed: u64) -> Result<FrameCorpus> {
    let src = require_source(corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut power = Array2::zeros(src.power.raw_dim());
    for seg in &corpus.segments {
        let kernel = kernel_for(&mut rng);
        for t in seg.start..seg.end {
            let mut acc = power.row_mut(t);
            for (m, &h) in kernel.iter().enumerate() {
                if m > t - seg.start {
                    break;
                }
                acc.scaled_add(h, &src.power.row(t - m));
            }
        }
    }
    Ok(rebuild(corpus, power, Domain::OutOfDomain))
}

/// Per-channel temporal smearing with a fixed decay time (seconds); never crosses utterances.
pub fn degrade_reverb(corpus: &FrameCorpus, decay: f64, seed: u64) -> Result<FrameCorpus> {
    if !(decay >= 0.0) {
        return input_err(format!("decay must be non-negative, got {decay}"));
    }
    let spec = &require_source(corpus)?.spec;
    let kernel = reverb_kernel(decay, spec.frame_rate, spec.reverb_tail_gain);
    convolve(corpus, |_| kernel.clone(), seed)
}

/// Reverberation with per-utterance decay drawn uniformly from the spec's range.
pub fn degrade_reverb_range(corpus: &FrameCorpus, seed: u64) -> Result<FrameCorpus> {
    let spec = require_source(corpus)?.spec.clone();
    let (lo, hi) = spec.reverb_decay;
    convolve(
        corpus,
        |rng| reverb_kernel(rng.random_range(lo..=hi), spec.frame_rate, spec.reverb_tail_gain),
        seed,
    )
}

/// Recording condition of a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Clean,
    Noisy,
    Reverb,
}

/// In-domain multi-condition data: half of the utterances clean, half noisy.
pub fn generate_in_domain(spec: &GeneratorSpec, length: usize, seed: u64) -> Result<FrameCorpus> {
    let clean = generate_clean(spec, length, seed)?;
    let noisy = degrade_noise_range(&clean, spec.noise_snr_db, seed ^ 0x6e6f_6973_65)?;
    let src = clean.source.as_ref().unwrap();
    let mut power = src.power.clone();
    for (i, seg) in clean.segments.iter().enumerate() {
        if i % 2 == 1 {
            let rows = ndarray::s![seg.start..seg.end, ..];
            power.slice_mut(rows).assign(&noisy.source.as_ref().unwrap().power.slice(rows));
        }
    }
    Ok(rebuild(&clean, power, Domain::InDomain))
}

/// Out-of-domain data: labels drawn with the skewed prior, reverberated (decay drawn
/// from the spec's range), then noisy.
pub fn generate_out_of_domain(spec: &GeneratorSpec, length: usize, seed: u64) -> Result<FrameCorpus> {
    let clean = clean_with_skew(spec, length, seed, spec.out_of_domain_skew)?;
    let rev = degrade_reverb_range(&clean, seed ^ 0x7265_7665_7262)?;
    let noisy = degrade_noise_range(&rev, spec.noise_snr_db, seed ^ 0x6e6f_6973_65)?;
    let mut out = noisy;
    out.domain = Domain::OutOfDomain;
    Ok(out)
}

pub fn generate(spec: &GeneratorSpec, condition: Condition, length: usize, seed: u64) -> Result<FrameCorpus> {
    match condition {
        Condition::Clean => generate_clean(spec, length, seed),
        Condition::Noisy => generate_in_domain(spec, length, seed),
        Condition::Reverb => generate_out_of_domain(spec, length, seed),
    }
}

/// Mean lag-1 autocorrelation of the per-channel compressed features (centre frame).
pub fn lag1_autocorrelation(corpus: &FrameCorpus) -> f64 {
    let Some(src) = &corpus.source else { return f64::NAN };
    let f = src.power.ncols();
    let ctx = src.spec.context;
    let centre = corpus.frames.slice(ndarray::s![.., ctx * f..(ctx + 1) * f]);
    let mut total = 0.0;
    for ch in 0..f {
        let col = centre.column(ch);
        let mean = col.mean().unwrap_or(0.0);
        let var: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        let mut cov = 0.0;
        for seg in &corpus.segments {
            for t in seg.start + 1..seg.end {
                cov += (col[t] - mean) * (col[t - 1] - mean);
            }
        }
        total += cov / var.max(1e-300);
    }
    total / f as f64
}
