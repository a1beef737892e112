//! Declarative experiment runner.
//!
//! One [`ExperimentConfig`] describes data, model, training, pruning cells and
//! adaptation cells. For every seed a baseline is trained once; each cell then
//! works on its own copy of that baseline and is scored on in-domain and
//! out-of-domain evaluation sets. Results are averaged over seeds.

mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{mean_std, report, Format, ResultRow, ResultTable, METRIC};

use crate::adaptation::{adapt, AdaptConfig, AdaptationPlan, MaskSource, UpdateMask, Variant};
use crate::datagen::{generate_in_domain, generate_out_of_domain, FrameCorpus, GeneratorSpec};
use crate::error::{config_err, Error, Result};
use crate::nn::{evaluate, train, Activation, Network, TrainConfig};
use crate::pruning::{apply_mask, build_mask, Band, LayerPlan, PruneMask, PrunePlan};
use crate::saliency::{compute_saliency, MiConfig, Method, SaliencyReport};

/// Environment variable capping the number of concurrently running cells.
pub const WORKERS_ENV: &str = "PRUNEKIT_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self { hidden: vec![128, 128, 128], activation: Activation::Sigmoid }
    }
}

/// Corpus sizes in frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSizes {
    pub train: usize,
    pub cv: usize,
    pub eval_in: usize,
    pub adapt: usize,
    pub eval_out: usize,
    /// Training frames used to estimate saliency.
    pub calib: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        Self { train: 24_000, cv: 3_000, eval_in: 6_000, adapt: 6_000, eval_out: 6_000, calib: 4_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandKind {
    Hypo,
    Hyper,
    Mid,
    /// Half hypo, half hyper.
    Both,
}

impl BandKind {
    fn band(self, pct: f64) -> Band {
        match self {
            BandKind::Hypo => Band::Hypo { pct },
            BandKind::Hyper => Band::Hyper { pct },
            BandKind::Mid => Band::Mid { pct },
            BandKind::Both => Band::Both { hypo_pct: pct / 2.0, hyper_pct: pct / 2.0 },
        }
    }
}

/// Grid of single-band prune plans: every method × band × layer set × percentage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sweep {
    pub methods: Vec<Method>,
    pub bands: Vec<BandKind>,
    pub layers: Vec<Vec<usize>>,
    pub start_pct: f64,
    pub stop_pct: f64,
    pub step_pct: f64,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            bands: vec![BandKind::Hypo, BandKind::Hyper, BandKind::Mid],
            layers: vec![vec![1], vec![2], vec![3]],
            start_pct: 2.0,
            stop_pct: 12.0,
            step_pct: 2.0,
        }
    }
}

impl Sweep {
    pub fn percentages(&self) -> Result<Vec<f64>> {
        if !(self.step_pct > 0.0) || !(self.start_pct > 0.0) || !(self.stop_pct < 100.0) || self.stop_pct < self.start_pct {
            return config_err("sweep percentages must satisfy 0 < start <= stop < 100 with a positive step");
        }
        let n = ((self.stop_pct - self.start_pct) / self.step_pct + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|i| self.start_pct + i as f64 * self.step_pct).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneCell {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub plan: PrunePlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptCell {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub plan: AdaptationPlan,
    /// Defaults to the variant's standard settings; `seed` is replaced by the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<AdaptConfig>,
}

impl AdaptCell {
    pub fn standard(variant: Variant) -> Self {
        Self { id: None, plan: AdaptationPlan::standard(variant), config: None }
    }

    fn config_for(&self, seed: u64) -> AdaptConfig {
        let mut cfg = self.config.clone().unwrap_or_else(|| AdaptConfig::for_variant(self.plan.variant));
        cfg.seed = seed;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub generator: GeneratorSpec,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub data: DataSizes,
    pub mi: MiConfig,
    pub sweeps: Vec<Sweep>,
    pub prune: Vec<PruneCell>,
    pub adaptation: Vec<AdaptCell>,
    pub seeds: Vec<u64>,
    pub workers: Option<usize>,
    /// Directory receiving `results.csv` and `results.txt`.
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut prune = Vec::new();
        for method in Method::ALL {
            for layers in [&[1, 2][..], &[1, 2, 3][..]] {
                prune.push(PruneCell { id: None, plan: PrunePlan::combined(method, layers).expect("layers 1-3") });
            }
        }
        Self {
            generator: GeneratorSpec::default(),
            model: ModelShape::default(),
            train: TrainConfig::default(),
            data: DataSizes::default(),
            mi: MiConfig::default(),
            sweeps: vec![Sweep::default()],
            prune,
            adaptation: [Variant::ModelA, Variant::ModelB, Variant::ModelC, Variant::ModelD]
                .into_iter()
                .map(AdaptCell::standard)
                .collect(),
            seeds: vec![0, 1, 2],
            workers: None,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Experiment without any pruning or adaptation cells.
    pub fn baseline_only() -> Self {
        Self { sweeps: Vec::new(), prune: Vec::new(), adaptation: Vec::new(), ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return config_err("at least one seed is required");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return config_err("seeds must be distinct");
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return config_err("model needs at least one non-empty hidden layer");
        }
        if self.model.activation == Activation::Softmax {
            return config_err("softmax is reserved for the output layer");
        }
        if self.workers == Some(0) {
            return config_err("workers must be at least 1");
        }
        let d = &self.data;
        if [d.train, d.cv, d.eval_in, d.adapt, d.eval_out, d.calib].contains(&0) {
            return config_err("every data split needs at least one frame");
        }
        self.generator.validate()?;
        self.train.validate()?;
        self.mi.validate()?;
        for sweep in &self.sweeps {
            sweep.percentages()?;
        }
        self.cells()?;
        Ok(())
    }

    /// Every configured cell, sorted by id.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let mut cells = Vec::new();
        for sweep in &self.sweeps {
            let pcts = sweep.percentages()?;
            for &method in &sweep.methods {
                for &band in &sweep.bands {
                    for layers in &sweep.layers {
                        for &pct in &pcts {
                            let plan = PrunePlan::uniform(method, layers, band.band(pct));
                            cells.push(Cell::prune(None, plan, &self.model.hidden)?);
                        }
                    }
                }
            }
        }
        for pc in &self.prune {
            cells.push(Cell::prune(pc.id.clone(), pc.plan.clone(), &self.model.hidden)?);
        }
        for ac in &self.adaptation {
            cells.push(Cell::adapt(ac)?);
        }
        cells.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in cells.windows(2) {
            if pair[0].id == pair[1].id {
                return config_err(format!("duplicate cell id '{}'", pair[0].id));
            }
        }
        if cells.iter().any(|c| c.id == BASELINE_ID) {
            return config_err("cell id 'baseline' is reserved");
        }
        Ok(cells)
    }

    /// Effective worker count: configured value (or available cores), capped by `PRUNEKIT_WORKERS`.
    pub fn resolved_workers(&self) -> usize {
        resolve_workers(self.workers, std::env::var(WORKERS_ENV).ok().as_deref())
    }
}

pub fn resolve_workers(configured: Option<usize>, env: Option<&str>) -> usize {
    let base = configured
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1);
    match env.map(|v| v.trim().parse::<usize>()) {
        Some(Ok(cap)) if cap >= 1 => base.min(cap),
        Some(_) => {
            warn!("ignoring invalid {WORKERS_ENV} value {:?}", env.unwrap_or_default());
            base
        }
        None => base,
    }
}

pub const BASELINE_ID: &str = "baseline";

#[derive(Debug, Clone, PartialEq)]
pub enum CellKind {
    Prune(PrunePlan),
    Adapt(AdaptCell),
}

/// One scored unit of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub kind: CellKind,
    pub method: String,
    pub band: String,
    pub layers: String,
    pub pct: f64,
}

fn join_layers(layers: &[usize]) -> String {
    layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("+")
}

impl Cell {
    fn prune(id: Option<String>, plan: PrunePlan, hidden: &[usize]) -> Result<Self> {
        if plan.layers.is_empty() {
            return config_err("a prune cell needs at least one planned layer");
        }
        let same = |f: &dyn Fn(&LayerPlan) -> String| {
            let first = f(&plan.layers[0]);
            if plan.layers.iter().all(|lp| f(lp) == first) { first } else { "mixed".to_string() }
        };
        let method = same(&|lp| lp.method.to_string());
        let band = same(&|lp| lp.band.name().to_string());
        let layer_ids: Vec<usize> = plan.layers.iter().map(|lp| lp.layer).collect();
        for &l in &layer_ids {
            if l == 0 || l > hidden.len() {
                return config_err(format!("prune plan addresses layer {l}; the model has {} hidden layers", hidden.len()));
            }
        }
        let (mut removed, mut total) = (0.0, 0.0);
        for lp in &plan.layers {
            let w = hidden[lp.layer - 1] as f64;
            removed += lp.band.layer_pct() * w;
            total += w;
        }
        let pct = removed / total;
        let layers = join_layers(&layer_ids);
        let id = id.unwrap_or_else(|| format!("prune:{method}:{band}:L{layers}:{pct:05.2}"));
        Ok(Self { id, kind: CellKind::Prune(plan), method, band, layers, pct })
    }

    fn adapt(cell: &AdaptCell) -> Result<Self> {
        if cell.config.as_ref().is_some_and(|c| c.update_mask.is_some()) {
            return config_err("adaptation cells derive update masks from mask_source; remove update_mask");
        }
        let variant = cell.plan.variant;
        if variant == Variant::ModelB && cell.plan.mask_source.is_none() {
            return config_err("Model-B cells need a mask_source");
        }
        let (method, band, layers, pct) = match &cell.plan.mask_source {
            Some(src) => (src.method.to_string(), "both".to_string(), join_layers(&src.layers), src.hypo_pct + src.hyper_pct),
            None => ("-".to_string(), "-".to_string(), "all".to_string(), 0.0),
        };
        let letter = variant.to_string().trim_start_matches("Model-").to_string();
        let id = cell.id.clone().unwrap_or_else(|| format!("adapt:{letter}"));
        Ok(Self { id, kind: CellKind::Adapt(cell.clone()), method, band, layers, pct })
    }

    fn saliency_needs(&self) -> Vec<(Method, usize)> {
        match &self.kind {
            CellKind::Prune(plan) => plan.layers.iter().map(|lp| (lp.method, lp.layer)).collect(),
            CellKind::Adapt(cell) => {
                let src = match cell.plan.variant {
                    Variant::ModelC => Some(predecessor_source(cell)),
                    _ => cell.plan.mask_source.clone(),
                };
                src.map(|s| s.layers.iter().map(|&l| (s.method, l)).collect()).unwrap_or_default()
            }
        }
    }
}

fn predecessor_source(cell: &AdaptCell) -> MaskSource {
    cell.plan.mask_source.clone().unwrap_or_default()
}

/// Data splits of one seed.
pub struct SeedData {
    pub train: FrameCorpus,
    pub cv: FrameCorpus,
    pub eval_in: FrameCorpus,
    pub adapt: FrameCorpus,
    pub eval_out: FrameCorpus,
    pub calib: FrameCorpus,
}

fn split_seed(seed: u64, split: u64) -> u64 {
    // splitmix64 finaliser keeps neighbouring seeds' corpora unrelated
    let mut z = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(split.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedData {
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let g = &cfg.generator;
        let d = &cfg.data;
        let train = generate_in_domain(g, d.train, split_seed(seed, 1))?;
        let calib_segments: Vec<usize> = (0..train.segments.len())
            .take_while(|&i| train.segments[i].start < d.calib)
            .collect();
        let calib = train.select_segments(&calib_segments)?;
        Ok(Self {
            cv: generate_in_domain(g, d.cv, split_seed(seed, 2))?,
            eval_in: generate_in_domain(g, d.eval_in, split_seed(seed, 3))?,
            adapt: generate_out_of_domain(g, d.adapt, split_seed(seed, 4))?,
            eval_out: generate_out_of_domain(g, d.eval_out, split_seed(seed, 5))?,
            calib,
            train,
        })
    }
}

/// Train the seed's baseline from a Glorot initialisation drawn from `seed`.
pub fn train_baseline(cfg: &ExperimentConfig, data: &SeedData, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::random(
        data.train.width(),
        &cfg.model.hidden,
        cfg.generator.num_classes,
        cfg.model.activation,
        &mut rng,
    )?;
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let (net, history) = train(net, &data.train, &data.cv, &tc)?;
    info!("seed {seed}: baseline trained for {} epochs ({:?})", history.epochs.len(), history.stop);
    Ok(net)
}

type Reports = BTreeMap<(Method, usize), std::result::Result<SaliencyReport, String>>;

fn reports_for(reports: &Reports, needs: &[(Method, usize)]) -> Result<Vec<SaliencyReport>> {
    needs
        .iter()
        .map(|key| match reports.get(key) {
            Some(Ok(r)) => Ok(r.clone()),
            Some(Err(e)) => Err(Error::InvalidInput(format!("{} saliency of layer {}: {e}", key.0, key.1))),
            None => Err(Error::InvalidInput(format!("{} saliency of layer {} missing", key.0, key.1))),
        })
        .collect()
}

fn source_mask(net: &Network, src: &MaskSource, reports: &Reports) -> Result<UpdateMask> {
    let plan = PrunePlan {
        layers: src
            .layers
            .iter()
            .map(|&layer| LayerPlan {
                layer,
                method: src.method,
                band: Band::Both { hypo_pct: src.hypo_pct, hyper_pct: src.hyper_pct },
            })
            .collect(),
    };
    let needs: Vec<_> = src.layers.iter().map(|&l| (src.method, l)).collect();
    let mask = build_mask(net, &reports_for(reports, &needs)?, &plan)?;
    UpdateMask::from_prune_mask(net, &mask)
}

/// Build the model a cell is scored with.
pub fn cell_model(
    cell: &Cell,
    baseline: &Network,
    data: &SeedData,
    reports: &Reports,
    seed: u64,
) -> Result<Network> {
    match &cell.kind {
        CellKind::Prune(plan) => {
            let mask: PruneMask = build_mask(baseline, &reports_for(reports, &cell.saliency_needs())?, plan)?;
            apply_mask(baseline, &mask)
        }
        CellKind::Adapt(ac) => {
            let mut cfg = ac.config_for(seed);
            let predecessor = match ac.plan.variant {
                Variant::ModelB => {
                    let src = ac.plan.mask_source.as_ref().expect("validated");
                    cfg.update_mask = Some(source_mask(baseline, src, reports)?);
                    None
                }
                Variant::ModelC => {
                    let src = predecessor_source(ac);
                    let b_cfg = AdaptConfig {
                        update_mask: Some(source_mask(baseline, &src, reports)?),
                        data_mix: 0.0,
                        ..cfg.clone()
                    };
                    let b_plan = AdaptationPlan { variant: Variant::ModelB, mask_source: Some(src) };
                    Some(adapt(baseline, &data.adapt, &data.train, &b_plan, &b_cfg, None)?.model)
                }
                _ => None,
            };
            let plan = AdaptationPlan { variant: ac.plan.variant, mask_source: None };
            Ok(adapt(baseline, &data.adapt, &data.train, &plan, &cfg, predecessor.as_ref())?.model)
        }
    }
}

type Score = std::result::Result<(f64, f64), String>;

fn score(net: &Network, data: &SeedData) -> Result<(f64, f64)> {
    Ok((evaluate(net, &data.eval_in)?, evaluate(net, &data.eval_out)?))
}

/// Per-seed scores of every cell, keyed by cell id (the baseline uses [`BASELINE_ID`]).
pub type SeedScores = BTreeMap<String, Score>;

fn run_seed(cfg: &ExperimentConfig, cells: &[Cell], seed: u64) -> SeedScores {
    let mut out = SeedScores::new();
    let prepared = SeedData::generate(cfg, seed).and_then(|data| {
        let net = train_baseline(cfg, &data, seed)?;
        Ok((data, net))
    });
    let (data, baseline) = match prepared {
        Ok(p) => p,
        Err(e) => {
            let msg = format!("seed {seed}: baseline failed: {e}");
            out.insert(BASELINE_ID.to_string(), Err(msg.clone()));
            for c in cells {
                out.insert(c.id.clone(), Err(msg.clone()));
            }
            return out;
        }
    };
    out.insert(BASELINE_ID.to_string(), score(&baseline, &data).map_err(|e| format!("seed {seed}: {e}")));

    let needs: BTreeSet<(Method, usize)> = cells.iter().flat_map(|c| c.saliency_needs()).collect();
    let reports: Reports = needs
        .into_par_iter()
        .map(|(method, layer)| {
            let r = compute_saliency(&baseline, layer, method, &data.calib, &cfg.mi).map_err(|e| e.to_string());
            ((method, layer), r)
        })
        .collect();

    let scored: Vec<(String, Score)> = cells
        .par_iter()
        .map(|cell| {
            let s = cell_model(cell, &baseline, &data, &reports, seed)
                .and_then(|m| score(&m, &data))
                .map_err(|e| format!("seed {seed}: {e}"));
            if let Err(e) = &s {
                warn!("cell {} failed: {e}", cell.id);
            }
            (cell.id.clone(), s)
        })
        .collect();
    out.extend(scored);
    out
}

fn aggregate(id: &str, kind: &str, method: &str, band: &str, layers: &str, pct: f64, per_seed: &[&Score]) -> ResultRow {
    let ok: Vec<(f64, f64)> = per_seed.iter().filter_map(|s| s.as_ref().ok().copied()).collect();
    let errors: Vec<&str> = per_seed.iter().filter_map(|s| s.as_ref().err().map(String::as_str)).collect();
    let ins: Vec<f64> = ok.iter().map(|s| s.0).collect();
    let outs: Vec<f64> = ok.iter().map(|s| s.1).collect();
    let (im, is) = mean_std(&ins).unzip();
    let (om, os) = mean_std(&outs).unzip();
    ResultRow {
        id: id.into(),
        kind: kind.into(),
        method: method.into(),
        band: band.into(),
        layers: layers.into(),
        pct,
        seeds: ok.len(),
        in_domain_fer_mean: im,
        in_domain_fer_std: is,
        out_of_domain_fer_mean: om,
        out_of_domain_fer_std: os,
        failed: errors.len(),
        error: errors.join("; "),
    }
}

/// Full run with per-seed detail, for callers needing more than means.
pub struct ExperimentRun {
    pub table: ResultTable,
    pub per_seed: Vec<(u64, SeedScores)>,
}

pub fn run_experiment_detailed(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let cells = cfg.cells()?;
    let workers = cfg.resolved_workers();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    info!("{} cells x {} seeds on {workers} workers", cells.len(), cfg.seeds.len());
    let per_seed: Vec<(u64, SeedScores)> =
        cfg.seeds.iter().map(|&seed| (seed, pool.install(|| run_seed(cfg, &cells, seed)))).collect();

    let collect = |id: &str| -> Vec<&Score> { per_seed.iter().map(|(_, s)| &s[id]).collect() };
    let mut rows = vec![aggregate(BASELINE_ID, "baseline", "-", "-", "-", 0.0, &collect(BASELINE_ID))];
    for c in &cells {
        let kind = match c.kind {
            CellKind::Prune(_) => "prune",
            CellKind::Adapt(_) => "adapt",
        };
        rows.push(aggregate(&c.id, kind, &c.method, &c.band, &c.layers, c.pct, &collect(&c.id)));
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let table = ResultTable { rows };
    if let Some(dir) = &cfg.output_dir {
        persist(&table, dir)?;
    }
    Ok(ExperimentRun { table, per_seed })
}

/// Run every cell for every seed. Cell failures are recorded in the table, not returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    Ok(run_experiment_detailed(cfg)?.table)
}

pub fn persist(table: &ResultTable, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), report(table, Format::Csv)?)?;
    fs::write(dir.join("results.txt"), report(table, Format::Text)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let generator = GeneratorSpec { num_classes: 3, feature_dim: 6, context: 1, segment_len: 40, ..Default::default() };
        ExperimentConfig {
            generator,
            model: ModelShape { hidden: vec![10, 8], activation: Activation::Sigmoid },
            train: TrainConfig { max_epochs: 2, constant_epochs: 1, ..Default::default() },
            data: DataSizes { train: 400, cv: 120, eval_in: 120, adapt: 160, eval_out: 120, calib: 120 },
            sweeps: Vec::new(),
            prune: Vec::new(),
            adaptation: Vec::new(),
            seeds: vec![0, 1],
            workers: Some(2),
            ..Default::default()
        }
    }

    #[test]
    fn empty_cell_lists_give_baseline_only() {
        let t = run_experiment(&tiny()).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].id, BASELINE_ID);
        assert_eq!(t.rows[0].seeds, 2);
    }

    #[test]
    fn default_sweep_has_six_percentages() {
        assert_eq!(Sweep::default().percentages().unwrap(), vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
        let cfg = ExperimentConfig::default();
        let cells = cfg.cells().unwrap();
        for method in Method::ALL {
            for band in ["hypo", "hyper", "mid"] {
                for layers in ["1", "2", "3"] {
                    let n = cells
                        .iter()
                        .filter(|c| c.method == method.to_string() && c.band == band && c.layers == layers)
                        .count();
                    assert_eq!(n, 6);
                }
            }
        }
    }

    #[test]
    fn ids_are_unique_and_sorted() {
        let cells = ExperimentConfig::default().cells().unwrap();
        assert!(cells.windows(2).all(|w| w[0].id < w[1].id));
        let mut cfg = tiny();
        cfg.adaptation = vec![AdaptCell::standard(Variant::ModelA), AdaptCell::standard(Variant::ModelA)];
        assert!(cfg.cells().is_err());
    }

    #[test]
    fn worker_cap() {
        assert_eq!(resolve_workers(Some(8), Some("3")), 3);
        assert_eq!(resolve_workers(Some(2), Some("3")), 2);
        assert_eq!(resolve_workers(Some(4), Some("zero")), 4);
        assert_eq!(resolve_workers(Some(4), None), 4);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = tiny();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.sweeps = vec![Sweep { stop_pct: 100.0, ..Sweep::default() }];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny();
        cfg.prune = vec![PruneCell { id: None, plan: PrunePlan::uniform(Method::Mbp, &[3], Band::Hypo { pct: 2.0 }) }];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn failing_cell_is_recorded_and_others_continue() {
        let mut cfg = tiny();
        cfg.prune = vec![
            PruneCell { id: Some("ok".into()), plan: PrunePlan::uniform(Method::Mbp, &[1], Band::Hypo { pct: 20.0 }) },
            // removes every neuron of layer 2, which the network rejects
            PruneCell { id: Some("broken".into()), plan: PrunePlan::uniform(Method::Mbp, &[2], Band::Hypo { pct: 100.0 }) },
        ];
        let t = run_experiment(&cfg).unwrap();
        assert!(t.has_failures());
        assert_eq!(t.row("broken").unwrap().failed, 2);
        assert_eq!(t.row("ok").unwrap().failed, 0);
        assert_eq!(t.row("ok").unwrap().seeds, 2);
    }

    #[test]
    fn adaptation_cells_run() {
        let mut cfg = tiny();
        cfg.adaptation = [Variant::ModelA, Variant::ModelB, Variant::ModelC, Variant::ModelD]
            .into_iter()
            .map(|v| {
                let mut c = AdaptCell::standard(v);
                c.config = Some(AdaptConfig { max_epochs: 2, ..AdaptConfig::for_variant(v) });
                c
            })
            .collect();
        for c in &mut cfg.adaptation {
            if let Some(src) = &mut c.plan.mask_source {
                src.hypo_pct = 20.0;
                src.hyper_pct = 10.0;
            }
        }
        let t = run_experiment(&cfg).unwrap();
        assert!(!t.has_failures(), "{t:?}");
        assert_eq!(t.rows.len(), 5);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        let minimal = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(minimal, cfg);
    }
}
