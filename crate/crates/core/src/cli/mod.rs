//! `quantbench` command line: train, calibrate, quantize, learn bitwidths,
//! evaluate, write cards and run observation recipes.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{parse_allowed_bits, DatasetKind, ModelKind, ObserverChoice, RunConfig, SEED_ENV};

use crate::error::{QuantError, Result};
use crate::mpq::{constraint_report, learn_bitwidths, mark_learnable, write_history, BitwidthAllocation, LabelSource};
use crate::network::{
    build_mlp, build_toy_resnet_with, init_params, load_model, save_model, Mode, ModelGraph, SiteKind, ToyResNetConfig,
};
use crate::numcore::Tensor;
use crate::pipeline::tables::{to_json, write_text};
use crate::pipeline::{
    calibrate_model, calibration_sample, evaluate, load_idx, make_blobs, make_images, make_spirals, run_and_write,
    train_fp_baseline, ExperimentSpec, LabeledSet, Recipe, ResultTable, HOLDOUT_FRACTION,
};
use crate::quantcard::{build_card, render_card, BudgetConstraint, CardFormat, CardInputs, CardResults, DataKind};
use crate::quantize::{BitSpec, Granularity, QuantizerSpec, RangeMode};

/// Exit code for a learned allocation that misses its bit budget.
pub const EXIT_CONSTRAINTS_UNMET: i32 = 3;

macro_rules! key_args {
    ($($field:ident: $help:literal,)*) => {
        /// Every configuration key, settable as `--key value`.
        #[derive(Debug, Clone, Default, Args)]
        #[command(next_help_heading = "Configuration keys (override the config file)")]
        pub struct KeyArgs {
            $(
                #[arg(long, alias = stringify!($field), value_name = "VALUE", help = $help,
                      num_args = 0..=1, default_missing_value = "true")]
                pub $field: Option<String>,
            )*
        }

        impl KeyArgs {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn overrides(&self) -> Vec<(&'static str, String)> {
                let mut v = Vec::new();
                $(
                    if let Some(x) = &self.$field {
                        v.push((stringify!($field), x.clone()));
                    }
                )*
                v
            }
        }
    };
}

key_args! {
    seed: "Root seed for every named random stream [default: $QUANTBENCH_SEED or 0]",
    out: "Output directory [default: out]",
    model_path: "Model manifest to read [default: the previous command's output in --out]",
    dataset: "blobs | spirals | images | idx [default: blobs]",
    classes: "Synthetic dataset classes [default: 4]",
    dims: "Blob dimensionality [default: 8]",
    n_per_class: "Synthetic examples per class [default: 300]",
    noise: "Spiral or image noise [default: 0.9]",
    image_hw: "Synthetic image side length [default: 8]",
    idx_images: "IDX image file (dataset = idx)",
    idx_labels: "IDX label file (dataset = idx)",
    model: "mlp | toy_resnet [default: mlp]",
    hidden: "MLP hidden widths, e.g. 16,128,16",
    width: "Toy resnet stem channels [default: 8]",
    depth: "Toy resnet residual blocks [default: 2]",
    epochs: "Baseline training epochs [default: 20]",
    train_lr: "Baseline Adam learning rate [default: 0.01]",
    train_batch: "Baseline batch size [default: 32]",
    weight_bits: "Uniform weight bitwidth [default: 8]",
    act_bits: "Uniform activation bitwidth [default: 8]",
    weight_symmetric: "Symmetric weight quantizers [default: false]",
    act_symmetric: "Symmetric activation quantizers [default: false]",
    weight_per_channel: "One weight range per output channel [default: true]",
    act_observer: "minmax | percentile [default: minmax]",
    percentile: "Percentile for the percentile observer [default: 99.99]",
    calibration_budget: "Unlabeled calibration examples [default: 1024 minmax, 320 percentile]",
    residual_strategy: "quantize_all | high_precision_add | unquantized_skip",
    quantize_skip: "Requantize downsample skips under high_precision_add [default: false]",
    pool_strategy: "high_precision_requant | integer_arithmetic",
    first_last: "pin8_bit | quantize [default: pin8_bit]",
    lambda1: "Weight-budget penalty weight; 0 leaves weights unconstrained [default: 1]",
    lambda2: "Activation-budget penalty weight; 0 leaves activations unconstrained [default: 1]",
    target_w: "Average weight bit target [default: 4]",
    target_a: "Average activation bit target [default: 4]",
    steps: "Bitwidth search steps [default: 1500]",
    batch_size: "Bitwidth search batch size [default: 32]",
    lr: "Bitwidth search Adam learning rate [default: 0.01]",
    samples: "Training examples the search may read [default: 1024]",
    allowed_bits: "Allowed bitwidths: 2..8 or a set such as 2,4,8 [default: 2..8]",
    include_first_last_in_avg: "Count first/last layers in the averages [default: true]",
    label_source: "ground_truth | pseudolabels [default: ground_truth]",
    ema_decay: "Decay of the accuracy moving average [default: 0.9]",
    learn_act_ranges: "Learn activation clipping ranges with the bitwidths [default: true]",
    seeds: "Seeds run by observe, counting up from seed [default: 5]",
    parallel: "Run observe seeds concurrently [default: false]",
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML file of configuration keys.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub keys: KeyArgs,
}

#[derive(Debug, Parser)]
#[command(name = "quantbench", version, about = "Quantization experiments on desk-scale models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a floating-point baseline and save it as model.json.
    TrainFp(CommonArgs),
    /// Apply the quantizer axes and calibrate ranges; saves calibrated.json.
    Calibrate(CommonArgs),
    /// Evaluate at uniform weight_bits/act_bits; saves quantized.json, a table and a card.
    Quantize(CommonArgs),
    /// Learn per-layer bitwidths; exits 3 when the budget is not met.
    LearnBits(CommonArgs),
    /// Report holdout accuracy of a saved model.
    Eval(CommonArgs),
    /// Write a quantization card for a saved model.
    Card(CommonArgs),
    /// Run an observation recipe (obs1..obs8) over several seeds.
    Observe {
        recipe: Recipe,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    ConstraintsUnmet,
}

impl Status {
    pub fn code(self) -> i32 {
        match self {
            Status::Success => 0,
            Status::ConstraintsUnmet => EXIT_CONSTRAINTS_UNMET,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(s) => s.code(),
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<Status> {
    let (name, common) = match &cli.command {
        Command::TrainFp(c) => ("train_fp", c),
        Command::Calibrate(c) => ("calibrate", c),
        Command::Quantize(c) => ("quantize", c),
        Command::LearnBits(c) => ("learn_bits", c),
        Command::Eval(c) => ("eval", c),
        Command::Card(c) => ("card", c),
        Command::Observe { common, .. } => ("observe", common),
    };
    let cfg = RunConfig::load(common.config.as_deref(), &common.keys.overrides())?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| QuantError::io(&cfg.out, e))?;
    write_text(&cfg.out.join(format!("{name}.config.toml")), &cfg.to_toml()?)?;
    match &cli.command {
        Command::TrainFp(_) => cmd_train_fp(&cfg),
        Command::Calibrate(_) => cmd_calibrate(&cfg),
        Command::Quantize(_) => cmd_quantize(&cfg),
        Command::LearnBits(_) => cmd_learn_bits(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::Card(_) => cmd_card(&cfg),
        Command::Observe { recipe, .. } => cmd_observe(&cfg, *recipe),
    }
}

/// The configured dataset, flattened to vectors when the model is an MLP.
pub fn load_dataset(cfg: &RunConfig) -> Result<LabeledSet> {
    let data = match cfg.dataset {
        DatasetKind::Blobs => make_blobs(cfg.classes, cfg.dims, cfg.n_per_class, cfg.seed)?,
        DatasetKind::Spirals => make_spirals(cfg.classes, cfg.n_per_class, cfg.noise, cfg.seed)?,
        DatasetKind::Images => make_images(cfg.classes, cfg.image_hw, cfg.n_per_class, cfg.noise, cfg.seed)?,
        DatasetKind::Idx => match (&cfg.idx_images, &cfg.idx_labels) {
            (Some(i), Some(l)) => load_idx(i, l)?,
            _ => return Err(QuantError::Config("dataset = idx needs idx_images and idx_labels".into())),
        },
    };
    if cfg.model == ModelKind::Mlp && data.sample_shape().len() > 1 {
        let n = data.len();
        let flat = data.sample_shape().iter().product();
        let inputs = Tensor::new(vec![n, flat], data.inputs.data().to_vec())?;
        return LabeledSet::new(inputs, data.labels, data.classes, data.provenance);
    }
    Ok(data)
}

fn split(cfg: &RunConfig) -> Result<(LabeledSet, LabeledSet)> {
    load_dataset(cfg)?.split(HOLDOUT_FRACTION, cfg.seed)
}

/// Fresh, seeded model shaped for `data`.
pub fn build_model(cfg: &RunConfig, data: &LabeledSet) -> Result<ModelGraph> {
    let shape = data.sample_shape();
    let mut m = match cfg.model {
        ModelKind::Mlp => build_mlp(shape.iter().product(), &cfg.hidden, data.classes)?,
        ModelKind::ToyResnet => {
            if shape.len() != 3 || shape[1] != shape[2] {
                return Err(QuantError::Config(format!(
                    "toy_resnet needs square [channels, h, w] inputs, dataset gives {shape:?}"
                )));
            }
            build_toy_resnet_with(ToyResNetConfig {
                in_channels: shape[0],
                input_hw: shape[1],
                width: cfg.width,
                depth_blocks: cfg.depth,
                classes: data.classes,
            })?
        }
    };
    m.residual_strategy = cfg.residual_strategy;
    m.quantize_skip = cfg.quantize_skip;
    m.pool_strategy = cfg.pool_strategy;
    m.first_last_policy = cfg.first_last;
    init_params(&mut m, cfg.seed);
    Ok(m)
}

/// Replaces every quantizer spec with the configured axes. Clears calibration.
pub fn apply_quant_axes(model: &mut ModelGraph, cfg: &RunConfig) {
    let spec = |bits: u32, symmetric: bool, per_channel: bool| QuantizerSpec {
        bits: BitSpec::Fixed(bits),
        symmetric,
        granularity: if per_channel {
            Granularity::PerChannel { axis: 0 }
        } else {
            Granularity::PerTensor
        },
        range_mode: RangeMode::Static,
    };
    let w = spec(cfg.weight_bits, cfg.weight_symmetric, cfg.weight_per_channel);
    let a = spec(cfg.act_bits, cfg.act_symmetric, false);
    model.map_weight_specs(|_| w);
    model.map_act_specs(|_| a);
    model.residual_strategy = cfg.residual_strategy;
    model.quantize_skip = cfg.quantize_skip;
    model.pool_strategy = cfg.pool_strategy;
    model.first_last_policy = cfg.first_last;
}

fn model_path(cfg: &RunConfig, fallbacks: &[&str]) -> Result<PathBuf> {
    if let Some(p) = &cfg.model_path {
        return Ok(p.clone());
    }
    fallbacks
        .iter()
        .map(|f| cfg.out.join(f))
        .find(|p| p.exists())
        .ok_or_else(|| QuantError::Config(format!("no model_path given and none of {fallbacks:?} in {}", cfg.out.display())))
}

fn calibrated_copy(model: &ModelGraph, train: &LabeledSet, cfg: &RunConfig) -> Result<ModelGraph> {
    let mut m = model.clone();
    apply_quant_axes(&mut m, cfg);
    let cal = cfg.calibration();
    let sample = calibration_sample(&train.inputs, cal.budget, cfg.seed);
    calibrate_model(&m, &sample, &cal)
}

fn is_calibrated(model: &ModelGraph) -> Result<bool> {
    Ok(!model.quant.is_empty() && model.uncalibrated_sites()?.is_empty())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value)?)
}

fn write_table(dir: &Path, table: &ResultTable) -> Result<()> {
    let stem = format!("{}_{}", table.recipe, table.seed);
    write_text(&dir.join(format!("{stem}.csv")), &table.to_csv()?)?;
    write_json(&dir.join(format!("{stem}.json")), table)
}

fn write_card(
    dir: &Path,
    stem: &str,
    model: &ModelGraph,
    inputs: &CardInputs,
    results: &CardResults,
) -> Result<()> {
    let card = build_card(model, inputs, results)?;
    write_text(&dir.join(format!("{stem}.card.md")), &render_card(&card, CardFormat::Markdown)?)?;
    write_text(&dir.join(format!("{stem}.card.txt")), &render_card(&card, CardFormat::StructuredText)?)
}

fn ptq_card_inputs(cfg: &RunConfig, train: &LabeledSet) -> CardInputs {
    CardInputs {
        act_observer: Some(cfg.observer()),
        learned_act_ranges: false,
        allowed_bits: None,
        constraint: Some(BudgetConstraint::None),
        examples: Some(cfg.calibration().budget.min(train.len())),
        data_kind: Some(DataKind::Unlabeled),
        epoch_fraction: Some(0.0),
    }
}

pub fn cmd_train_fp(cfg: &RunConfig) -> Result<Status> {
    let data = load_dataset(cfg)?;
    let model = build_model(cfg, &data)?;
    let base = train_fp_baseline(&model, &data, &cfg.train(), cfg.seed)?;
    save_model(&base.model, cfg.out.join("model.json"))?;
    let mut t = ResultTable::new("train_fp", cfg.seed, &["train_accuracy", "holdout_accuracy", "final_loss"]);
    let last = base.epoch_losses.last().copied().unwrap_or(f64::NAN);
    t.push("fp", vec![base.train_accuracy, base.holdout_accuracy, last])?;
    write_table(&cfg.out, &t)?;
    write_card(
        &cfg.out,
        "model",
        &base.model,
        &CardInputs::default(),
        &CardResults {
            baseline_accuracy: Some(base.holdout_accuracy),
            ..CardResults::default()
        },
    )?;
    println!("holdout accuracy {:.4}", base.holdout_accuracy);
    Ok(Status::Success)
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<Status> {
    let model = load_model(model_path(cfg, &["model.json"])?)?;
    let (train, _) = split(cfg)?;
    let cal = calibrated_copy(&model, &train, cfg)?;
    save_model(&cal, cfg.out.join("calibrated.json"))?;
    let ranges: Vec<(String, Vec<f64>, Vec<f64>)> = cal
        .quant
        .iter()
        .map(|(s, st)| (s.clone(), st.raw_min.data().to_vec(), st.raw_max.data().to_vec()))
        .collect();
    write_json(&cfg.out.join("calibration.json"), &ranges)?;
    println!("calibrated {} quantizer sites", cal.quant.len());
    Ok(Status::Success)
}

pub fn cmd_quantize(cfg: &RunConfig) -> Result<Status> {
    let model = load_model(model_path(cfg, &["calibrated.json", "model.json"])?)?;
    let (train, holdout) = split(cfg)?;
    let mut q = if is_calibrated(&model)? {
        model.clone()
    } else {
        calibrated_copy(&model, &train, cfg)?
    };
    q.set_bits_where(Some(SiteKind::Weight), cfg.weight_bits)?;
    q.set_bits_where(Some(SiteKind::Activation), cfg.act_bits)?;
    let fp = evaluate(&q, &holdout, Mode::FloatingPoint)?;
    let acc = evaluate(&q, &holdout, Mode::Quantized)?;
    save_model(&q, cfg.out.join("quantized.json"))?;
    let config = format!("w{}a{}", cfg.weight_bits, cfg.act_bits);
    let mut t = ResultTable::new("quantize", cfg.seed, &["fp_accuracy", "accuracy"]);
    t.push(config.clone(), vec![fp, acc])?;
    write_table(&cfg.out, &t)?;
    let results = CardResults {
        baseline_accuracy: q.baseline_accuracy.or(Some(fp)),
        quantized_accuracy: Some(acc),
        seeds: Some(1),
        table: Some(format!("quantize_{}.csv", cfg.seed)),
    };
    write_card(&cfg.out, &format!("quantize_{config}"), &q, &ptq_card_inputs(cfg, &train), &results)?;
    println!("fp accuracy {fp:.4}, {config} accuracy {acc:.4}");
    Ok(Status::Success)
}

pub fn cmd_learn_bits(cfg: &RunConfig) -> Result<Status> {
    let model = load_model(model_path(cfg, &["model.json"])?)?;
    let (train, holdout) = split(cfg)?;
    let mpq = cfg.mpq();
    let pool = train.sample(mpq.samples, cfg.seed, "mpq_pool");
    let mut m = model.clone();
    apply_quant_axes(&mut m, cfg);
    let cal = crate::pipeline::CalibrationConfig {
        budget: pool.len(),
        ..cfg.calibration()
    };
    let mut cal_model = calibrate_model(&m, &pool.inputs, &cal)?;
    mark_learnable(&mut cal_model)?;
    let out = learn_bitwidths(&cal_model, &pool, &mpq, cfg.seed)?;
    let mut q = cal_model.clone();
    out.apply(&mut q)?;
    let acc = evaluate(&q, &holdout, Mode::Quantized)?;
    let fp = evaluate(&q, &holdout, Mode::FloatingPoint)?;

    write_json::<BitwidthAllocation>(&cfg.out.join("allocation.json"), &out.allocation)?;
    write_history(cfg.out.join("history.jsonl"), &out.history)?;
    save_model(&q, cfg.out.join("mpq_model.json"))?;
    let r = constraint_report(&out.allocation)?;
    let mut t = ResultTable::new(
        "learn_bits",
        cfg.seed,
        &["fp_accuracy", "accuracy", "avg_weight_bits", "avg_act_bits", "model_size_bytes", "meets_constraints"],
    );
    let meets = out.allocation.meets_constraints;
    t.push(
        "mpq",
        vec![fp, acc, r.avg_w_including, r.avg_a_including, r.model_bytes as f64, f64::from(u8::from(meets))],
    )?;
    write_table(&cfg.out, &t)?;
    let inputs = CardInputs {
        act_observer: Some(cfg.observer()),
        learned_act_ranges: mpq.learn_act_ranges,
        allowed_bits: Some(mpq.allowed_bits.clone()),
        constraint: Some(BudgetConstraint::AverageBits {
            weights: mpq.active_target_w(),
            activations: mpq.active_target_a(),
        }),
        examples: Some(out.samples_used),
        data_kind: Some(match mpq.label_source {
            LabelSource::GroundTruth => DataKind::Labeled,
            LabelSource::Pseudolabels => DataKind::Pseudolabels,
        }),
        epoch_fraction: Some((mpq.steps * mpq.batch_size) as f64 / train.len() as f64),
    };
    let results = CardResults {
        baseline_accuracy: q.baseline_accuracy.or(Some(fp)),
        quantized_accuracy: Some(acc),
        seeds: Some(1),
        table: Some(format!("learn_bits_{}.csv", cfg.seed)),
    };
    write_card(&cfg.out, "learn_bits", &q, &inputs, &results)?;
    println!(
        "avg weight bits {:.3}, avg act bits {:.3}, accuracy {acc:.4}, meets constraints {meets}",
        r.avg_w_including, r.avg_a_including
    );
    if meets {
        Ok(Status::Success)
    } else {
        eprintln!("error: learned allocation misses its bit budget (allocation.json still written)");
        Ok(Status::ConstraintsUnmet)
    }
}

fn eval_mode(model: &ModelGraph) -> Result<Mode> {
    Ok(if is_calibrated(model)? {
        Mode::Quantized
    } else {
        Mode::FloatingPoint
    })
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<Status> {
    let path = model_path(cfg, &["mpq_model.json", "quantized.json", "calibrated.json", "model.json"])?;
    let model = load_model(&path)?;
    let (_, holdout) = split(cfg)?;
    let mode = eval_mode(&model)?;
    let acc = evaluate(&model, &holdout, mode)?;
    let config = if mode == Mode::Quantized { "quantized" } else { "fp" };
    let mut t = ResultTable::new("eval", cfg.seed, &["accuracy"]);
    t.push(config, vec![acc])?;
    write_table(&cfg.out, &t)?;
    println!("{} {config} accuracy {acc:.6}", path.display());
    Ok(Status::Success)
}

pub fn cmd_card(cfg: &RunConfig) -> Result<Status> {
    let path = model_path(cfg, &["mpq_model.json", "quantized.json", "calibrated.json", "model.json"])?;
    let model = load_model(&path)?;
    let (train, holdout) = split(cfg)?;
    let mode = eval_mode(&model)?;
    let fp = evaluate(&model, &holdout, Mode::FloatingPoint)?;
    let results = CardResults {
        baseline_accuracy: model.baseline_accuracy.or(Some(fp)),
        quantized_accuracy: match mode {
            Mode::Quantized => Some(evaluate(&model, &holdout, mode)?),
            Mode::FloatingPoint => None,
        },
        seeds: Some(1),
        table: None,
    };
    let inputs = match mode {
        Mode::Quantized => ptq_card_inputs(cfg, &train),
        Mode::FloatingPoint => CardInputs::default(),
    };
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    write_card(&cfg.out, stem, &model, &inputs, &results)?;
    println!("wrote {}", cfg.out.join(format!("{stem}.card.md")).display());
    Ok(Status::Success)
}

/// Experiment settings from the run configuration. Dataset and model sizes stay at
/// the recipe defaults.
pub fn experiment_spec(cfg: &RunConfig, recipe: Recipe) -> ExperimentSpec {
    ExperimentSpec {
        seeds: (cfg.seed..cfg.seed + cfg.seeds as u64).collect(),
        train: cfg.train(),
        act_observer: cfg.observer(),
        calibration_budget: cfg.calibration_budget,
        mpq: cfg.mpq(),
        residual_strategy: cfg.residual_strategy,
        quantize_skip: cfg.quantize_skip,
        pool_strategy: cfg.pool_strategy,
        parallel: cfg.parallel,
        ..ExperimentSpec::for_recipe(recipe)
    }
}

pub fn cmd_observe(cfg: &RunConfig, recipe: Recipe) -> Result<Status> {
    let out = run_and_write(&experiment_spec(cfg, recipe), &cfg.out)?;
    for row in &out.summary.rows {
        println!("{:<32} {:<28} {:.5} ± {:.5}", row.config, row.metric, row.mean, row.std);
    }
    Ok(Status::Success)
}
