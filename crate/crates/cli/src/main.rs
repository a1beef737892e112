use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use prunekit::adaptation::{adapt, AdaptConfig, AdaptationPlan, UpdateMask, Variant};
use prunekit::datagen::{generate, Condition, FrameCorpus, GeneratorSpec};
use prunekit::harness::{report, run_experiment, ExperimentConfig, Format, ResultTable};
use prunekit::nn::{evaluate, train, Activation, Network, TrainConfig};
use prunekit::pruning::{apply_mask, build_mask, structural_prune, Band, LayerPlan, PrunePlan};
use prunekit::saliency::{compute_saliency, MiConfig, Method, SaliencyReport};

#[derive(Parser)]
#[command(name = "prunekit", version, about = "Neuron saliency, pruning and selective adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConditionArg {
    Clean,
    Noisy,
    Reverb,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Sigmoid,
    Relu,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum BandArg {
    Hypo,
    Hyper,
    Mid,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenerateData {
        #[arg(long, value_enum, default_value = "clean")]
        condition: ConditionArg,
        #[arg(long, default_value_t = 10_000)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// GeneratorSpec JSON; defaults are used for missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train a baseline network.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        cv: PathBuf,
        /// TrainConfig JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "128,128,128")]
        hidden: Vec<usize>,
        #[arg(long, value_enum, default_value = "sigmoid")]
        activation: ActivationArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
        /// Where to write the training history JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score the neurons of one hidden layer.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Calibration corpus (needed by OBS and MI).
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        window_q: usize,
        #[arg(long, default_value_t = 4000)]
        max_frames: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Prune a network from saliency reports.
    Prune {
        #[arg(long)]
        model: PathBuf,
        /// Saliency report JSON files, one per pruned layer.
        #[arg(long = "saliency", required_unless_present = "plan", num_args = 1..)]
        reports: Vec<PathBuf>,
        /// Full PrunePlan JSON; overrides --band and the percentages.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "hypo")]
        band: BandArg,
        #[arg(long, default_value_t = 2.0)]
        pct: f64,
        /// Hyper share when --band both.
        #[arg(long, default_value_t = 0.0)]
        hyper_pct: f64,
        /// Physically remove neurons instead of masking them.
        #[arg(long)]
        structural: bool,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Adapt a baseline to unlabelled data with pseudo-labels.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Labelled original training corpus for --mix.
        #[arg(long)]
        original: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        /// Saliency reports selecting the updatable neurons (Model-B, and the Model-B step of Model-C).
        #[arg(long = "mask-from", num_args = 1..)]
        mask_from: Vec<PathBuf>,
        #[arg(long, default_value_t = 8.0)]
        hypo_pct: f64,
        #[arg(long, default_value_t = 4.0)]
        hyper_pct: f64,
        /// Model-B result to fine-tune (Model-C).
        #[arg(long)]
        predecessor: Option<PathBuf>,
        #[arg(long)]
        mix: Option<f64>,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.004)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Frame error rate of a model on one or more corpora.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(required = true)]
        data: Vec<PathBuf>,
    },
    /// Run a full experiment from a JSON config.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides output_dir from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Print the default config and exit.
        #[arg(long)]
        print_default: bool,
    },
    /// Render a result table (CSV or JSON) in another format.
    Report {
        input: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: prunekit::Error| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: prunekit::Error| e.to_string())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<FrameCorpus> {
    FrameCorpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_model(path: &Path) -> Result<Network> {
    Network::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenerateData { condition, frames, seed, spec, out } => {
            let spec: GeneratorSpec = match spec {
                Some(p) => read_json(&p)?,
                None => GeneratorSpec::default(),
            };
            let condition = match condition {
                ConditionArg::Clean => Condition::Clean,
                ConditionArg::Noisy => Condition::Noisy,
                ConditionArg::Reverb => Condition::Reverb,
            };
            let corpus = generate(&spec, condition, frames, seed)?;
            corpus.save(&out)?;
            println!("{} frames x {} features -> {}", corpus.len(), corpus.width(), out.display());
        }
        Command::Train { train: train_path, cv, config, hidden, activation, seed, out, history } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            cfg.seed = seed;
            let train_set = load_corpus(&train_path)?;
            let cv_set = load_corpus(&cv)?;
            let act = match activation {
                ActivationArg::Sigmoid => Activation::Sigmoid,
                ActivationArg::Relu => Activation::Relu,
                ActivationArg::Linear => Activation::Linear,
            };
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let net = Network::random(train_set.width(), &hidden, train_set.num_classes, act, &mut rng)?;
            let (net, hist) = train(net, &train_set, &cv_set, &cfg)?;
            net.save(&out)?;
            if let Some(h) = history {
                write_json(&h, &hist)?;
            }
            let last = hist.epochs.last().map_or(hist.initial_cv_error, |e| e.cv_error);
            println!("trained {} epochs, cv frame error rate {:.4} -> {}", hist.epochs.len(), last, out.display());
        }
        Command::Saliency { model, layer, method, calib, window_q, max_frames, out } => {
            let net = load_model(&model)?;
            let calib = match (calib, method) {
                (Some(p), _) => load_corpus(&p)?,
                (None, Method::Mbp) => empty_corpus(&net)?,
                (None, _) => bail!("--calib is required for {method}"),
            };
            let mi = MiConfig { window_q, max_frames };
            let rep = compute_saliency(&net, layer, method, &calib, &mi)?;
            let text = rep.to_json()?;
            match out {
                Some(p) => fs::write(&p, text + "\n")?,
                None => println!("{text}"),
            }
        }
        Command::Prune { model, reports, plan, band, pct, hyper_pct, structural, out, mask_out } => {
            let net = load_model(&model)?;
            let reports: Vec<SaliencyReport> = reports.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
            let plan: PrunePlan = match plan {
                Some(p) => read_json(&p)?,
                None => PrunePlan {
                    layers: reports
                        .iter()
                        .map(|r| LayerPlan { layer: r.layer_index, method: r.method, band: band_of(band, pct, hyper_pct) })
                        .collect(),
                },
            };
            let mask = build_mask(&net, &reports, &plan)?;
            let pruned = if structural { structural_prune(&net, &mask)? } else { apply_mask(&net, &mask)? };
            pruned.save(&out)?;
            if let Some(m) = mask_out {
                fs::write(&m, mask.to_json()? + "\n")?;
            }
            println!(
                "pruned {} neurons ({:.2}% of hidden neurons) -> {}",
                mask.pruned_count(),
                mask.network_percentage(),
                out.display()
            );
        }
        Command::Adapt {
            model,
            data,
            original,
            variant,
            mask_from,
            hypo_pct,
            hyper_pct,
            predecessor,
            mix,
            epochs,
            lr,
            seed,
            out,
            history,
        } => {
            let baseline = load_model(&model)?;
            let adapt_set = load_corpus(&data)?;
            let mut cfg = AdaptConfig { max_epochs: epochs, initial_lr: lr, seed, ..AdaptConfig::for_variant(variant) };
            if let Some(m) = mix {
                cfg.data_mix = m;
            }
            let original = match &original {
                Some(p) => load_corpus(p)?,
                None if cfg.data_mix > 0.0 => bail!("--original is required when mixing in original data"),
                None => adapt_set.clone(),
            };
            if variant == Variant::ModelB {
                cfg.update_mask = Some(mask_from_reports(&baseline, &mask_from, hypo_pct, hyper_pct)?);
            }
            let pred = match (variant, predecessor) {
                (Variant::ModelC, Some(p)) => Some(load_model(&p)?),
                (Variant::ModelC, None) if !mask_from.is_empty() => {
                    info!("no predecessor given; running the Model-B step first");
                    let b_cfg = AdaptConfig {
                        update_mask: Some(mask_from_reports(&baseline, &mask_from, hypo_pct, hyper_pct)?),
                        data_mix: 0.0,
                        ..cfg.clone()
                    };
                    let b_plan = AdaptationPlan::standard(Variant::ModelB);
                    Some(adapt(&baseline, &adapt_set, &original, &b_plan, &b_cfg, None)?.model)
                }
                (_, p) => p.map(|p| load_model(&p)).transpose()?,
            };
            let plan = AdaptationPlan { variant, mask_source: None };
            let result = adapt(&baseline, &adapt_set, &original, &plan, &cfg, pred.as_ref())?;
            result.model.save(&out)?;
            if let Some(h) = history {
                write_json(&h, &result.history)?;
            }
            println!(
                "{variant}: {} epochs, {} updatable parameters -> {}",
                result.history.epochs.len(),
                result.history.updated_parameters,
                out.display()
            );
        }
        Command::Evaluate { model, data } => {
            let net = load_model(&model)?;
            for p in &data {
                let corpus = load_corpus(p)?;
                println!("{}\tframe error rate {:.6}", p.display(), evaluate(&net, &corpus)?);
            }
        }
        Command::Experiment { config, out_dir, print_default } => {
            if print_default {
                println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default())?);
                return Ok(ExitCode::SUCCESS);
            }
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p).with_context(|| format!("loading {}", p.display()))?,
                None => ExperimentConfig::default(),
            };
            if out_dir.is_some() {
                cfg.output_dir = out_dir;
            }
            let table = run_experiment(&cfg)?;
            print!("{}", report(&table, Format::Text)?);
            if table.has_failures() {
                eprintln!("some cells failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report { input, format } => {
            let format: Format = format.parse()?;
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let table = if input.extension().is_some_and(|e| e == "json") {
                ResultTable::from_json(&text)?
            } else {
                ResultTable::from_csv(&text)?
            };
            print!("{}", report(&table, format)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn band_of(band: BandArg, pct: f64, hyper_pct: f64) -> Band {
    match band {
        BandArg::Hypo => Band::Hypo { pct },
        BandArg::Hyper => Band::Hyper { pct },
        BandArg::Mid => Band::Mid { pct },
        BandArg::Both => Band::Both { hypo_pct: pct, hyper_pct },
    }
}

fn mask_from_reports(net: &Network, paths: &[PathBuf], hypo_pct: f64, hyper_pct: f64) -> Result<UpdateMask> {
    if paths.is_empty() {
        bail!("--mask-from is required for Model-B");
    }
    let reports: Vec<SaliencyReport> = paths.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let plan = PrunePlan {
        layers: reports
            .iter()
            .map(|r| LayerPlan { layer: r.layer_index, method: r.method, band: Band::Both { hypo_pct, hyper_pct } })
            .collect(),
    };
    Ok(UpdateMask::from_prune_mask(net, &build_mask(net, &reports, &plan)?)?)
}

// MBP needs no data; a one-frame placeholder keeps the dispatch uniform.
fn empty_corpus(net: &Network) -> Result<FrameCorpus> {
    let frames = ndarray::Array2::zeros((1, net.input_width));
    Ok(FrameCorpus::from_parts(frames, vec![0], net.output_width(), prunekit::datagen::Domain::InDomain, None)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
