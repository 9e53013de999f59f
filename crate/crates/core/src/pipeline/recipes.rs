//! The eight observation recipes. Each sweeps one quantization axis over a
//! desk-scale model for every seed and reports per-seed tables, a summary
//! and one card per configuration.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::mpq::{
    constraint_report, featuremap_layers, learn_bitwidths, mark_learnable, max_featuremap_allocation,
    uniform_max_featuremap_bytes, AllowedBits, BitwidthAllocation, LabelSource, MPQConfig, MpqOutcome,
};
use crate::network::{
    build_mlp, build_toy_resnet_with, forward_graph, init_params, FirstLastPolicy, ForwardOptions, Mode, ModelGraph,
    PoolStrategy, ResidualStrategy, SiteKind, ToyResNetConfig,
};
use crate::numcore::{Graph, Tensor};
use crate::quantcard::{build_card, render_card, BudgetConstraint, CardFormat, CardInputs, CardResults, DataKind, QuantizationCard};
use crate::quantize::{quantization_mse, Granularity, ObserverKind, QuantizerSpec};

use super::calibrate::{calibrate_model, calibration_sample, default_budget, CalibrationConfig};
use super::data::{make_blobs, make_images, LabeledSet};
use super::eval::evaluate;
use super::tables::{to_json, write_tables, write_text, ResultTable, SummaryTable};
use super::train::{train_fp_baseline, Baseline, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Obs1,
    Obs2,
    Obs3,
    Obs4,
    Obs5,
    Obs6,
    Obs7,
    Obs8,
}

impl Recipe {
    pub const ALL: [Recipe; 8] = [
        Recipe::Obs1,
        Recipe::Obs2,
        Recipe::Obs3,
        Recipe::Obs4,
        Recipe::Obs5,
        Recipe::Obs6,
        Recipe::Obs7,
        Recipe::Obs8,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Recipe::Obs1 => "obs1",
            Recipe::Obs2 => "obs2",
            Recipe::Obs3 => "obs3",
            Recipe::Obs4 => "obs4",
            Recipe::Obs5 => "obs5",
            Recipe::Obs6 => "obs6",
            Recipe::Obs7 => "obs7",
            Recipe::Obs8 => "obs8",
        }
    }

    /// Bitwidths (or bit budgets) swept when the experiment does not override them.
    pub fn default_bits(self) -> Vec<u32> {
        match self {
            Recipe::Obs1 => (2..=8).collect(),
            Recipe::Obs2 | Recipe::Obs3 | Recipe::Obs8 => vec![2, 3, 4, 8],
            Recipe::Obs5 => vec![3, 6],
            Recipe::Obs6 => vec![2, 3, 4],
            Recipe::Obs4 | Recipe::Obs7 => vec![4],
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Recipe {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL
            .into_iter()
            .find(|r| r.id() == s)
            .ok_or_else(|| QuantError::Config(format!("unknown recipe `{s}` (expected obs1..obs8)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub recipe: Recipe,
    pub seeds: Vec<u64>,
    pub image_classes: usize,
    pub image_hw: usize,
    pub image_per_class: usize,
    pub image_noise: f64,
    pub blob_classes: usize,
    pub blob_dims: usize,
    pub blob_per_class: usize,
    pub resnet_width: usize,
    pub resnet_depth: usize,
    pub mlp_hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Epoch budget of the weaker baseline in `obs8`.
    pub weak_epochs: usize,
    pub act_observer: ObserverKind,
    /// Unlabeled calibration examples; defaults to 1024 for min/max and 320 for percentile.
    pub calibration_budget: Option<usize>,
    pub bits: Option<Vec<u32>>,
    pub mpq: MPQConfig,
    pub residual_strategy: ResidualStrategy,
    pub quantize_skip: bool,
    pub pool_strategy: PoolStrategy,
    /// Run seeds on separate threads.
    pub parallel: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            recipe: Recipe::Obs1,
            seeds: (0..5).collect(),
            image_classes: 4,
            image_hw: 8,
            image_per_class: 500,
            image_noise: 0.9,
            blob_classes: 4,
            blob_dims: 8,
            blob_per_class: 300,
            resnet_width: 8,
            resnet_depth: 2,
            mlp_hidden: vec![16, 128, 16],
            train: TrainConfig::default(),
            weak_epochs: 2,
            act_observer: ObserverKind::MinMax,
            calibration_budget: None,
            bits: None,
            mpq: MPQConfig::default(),
            residual_strategy: ResidualStrategy::HighPrecisionAdd,
            quantize_skip: false,
            pool_strategy: PoolStrategy::HighPrecisionRequant,
            parallel: false,
        }
    }
}

impl ExperimentSpec {
    pub fn for_recipe(recipe: Recipe) -> Self {
        ExperimentSpec {
            recipe,
            ..Self::default()
        }
    }

    pub fn bits(&self) -> Vec<u32> {
        self.bits.clone().unwrap_or_else(|| self.recipe.default_bits())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(QuantError::Config("an experiment needs at least one seed".into()));
        }
        if self.bits().is_empty() || self.bits().iter().any(|&b| !(2..=32).contains(&b)) {
            return Err(QuantError::Config(format!("bit sweep {:?} must be nonempty within 2..=32", self.bits())));
        }
        self.act_observer.validate()?;
        self.mpq.validate()
    }

    fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            act_observer: self.act_observer,
            budget: self.calibration_budget.unwrap_or_else(|| default_budget(self.act_observer)),
            ..CalibrationConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Arch {
    ToyResNet,
    Mlp,
}

impl Recipe {
    fn arch(self) -> Arch {
        match self {
            Recipe::Obs4 | Recipe::Obs5 | Recipe::Obs7 => Arch::Mlp,
            _ => Arch::ToyResNet,
        }
    }
}

/// Everything needed to write a card for one configuration of one seed.
#[derive(Debug, Clone)]
struct ConfigArtifact {
    config: String,
    model: ModelGraph,
    inputs: CardInputs,
}

struct SeedResult {
    table: ResultTable,
    artifacts: Vec<ConfigArtifact>,
    baseline_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct RecipeOutput {
    pub spec: ExperimentSpec,
    pub tables: Vec<ResultTable>,
    pub summary: SummaryTable,
    pub cards: Vec<(String, QuantizationCard)>,
}

impl RecipeOutput {
    /// Writes per-seed tables, the summary, the resolved experiment and
    /// `<recipe>_<config>.card.{md,txt}` for every configuration.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_tables(dir, &self.tables, &self.summary)?;
        write_text(&dir.join(format!("{}_spec.json", self.spec.recipe)), &to_json(&self.spec)?)?;
        for (config, card) in &self.cards {
            let stem = format!("{}_{config}.card", self.spec.recipe);
            write_text(&dir.join(format!("{stem}.md")), &render_card(card, CardFormat::Markdown)?)?;
            write_text(&dir.join(format!("{stem}.txt")), &render_card(card, CardFormat::StructuredText)?)?;
        }
        Ok(())
    }
}

/// Runs recipes while reusing trained baselines across them.
#[derive(Default)]
pub struct Runner {
    cache: Mutex<HashMap<String, Baseline>>,
}

pub fn run_observation(spec: &ExperimentSpec) -> Result<RecipeOutput> {
    Runner::default().run(spec)
}

impl Runner {
    pub fn run(&self, spec: &ExperimentSpec) -> Result<RecipeOutput> {
        spec.validate()?;
        let results: Vec<SeedResult> = if spec.parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = spec.seeds.iter().map(|&seed| s.spawn(move || self.run_seed(spec, seed))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(QuantError::Training("seed worker panicked".into()))))
                    .collect::<Result<Vec<_>>>()
            })?
        } else {
            spec.seeds.iter().map(|&seed| self.run_seed(spec, seed)).collect::<Result<Vec<_>>>()?
        };

        let tables: Vec<ResultTable> = results.iter().map(|r| r.table.clone()).collect();
        let summary = SummaryTable::from_tables(&tables)?;
        let baseline = results.iter().map(|r| r.baseline_accuracy).sum::<f64>() / results.len() as f64;
        let mut cards = Vec::new();
        for art in &results[0].artifacts {
            let card_results = CardResults {
                baseline_accuracy: Some(baseline),
                quantized_accuracy: summary.mean(&art.config, "accuracy"),
                seeds: Some(spec.seeds.len()),
                table: Some(format!("{}_summary.csv", spec.recipe)),
            };
            cards.push((art.config.clone(), build_card(&art.model, &art.inputs, &card_results)?));
        }
        Ok(RecipeOutput {
            spec: spec.clone(),
            tables,
            summary,
            cards,
        })
    }

    /// Trains (or reuses) the floating-point baseline of `arch` for `seed`.
    fn baseline(&self, spec: &ExperimentSpec, arch: Arch, epochs: usize, seed: u64) -> Result<Baseline> {
        let train = TrainConfig { epochs, ..spec.train };
        let key = match arch {
            Arch::ToyResNet => format!(
                "resnet/{}/{}/{}/{}/{}/{}/{}/{:?}/{seed}",
                spec.image_classes,
                spec.image_hw,
                spec.image_per_class,
                spec.image_noise,
                spec.resnet_width,
                spec.resnet_depth,
                epochs,
                train
            ),
            Arch::Mlp => format!(
                "mlp/{}/{}/{}/{:?}/{:?}/{seed}",
                spec.blob_classes, spec.blob_dims, spec.blob_per_class, spec.mlp_hidden, train
            ),
        };
        if let Some(b) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(b.clone());
        }
        let (mut model, data) = match arch {
            Arch::ToyResNet => (
                build_toy_resnet_with(ToyResNetConfig {
                    in_channels: 1,
                    input_hw: spec.image_hw,
                    width: spec.resnet_width,
                    depth_blocks: spec.resnet_depth,
                    classes: spec.image_classes,
                })?,
                make_images(spec.image_classes, spec.image_hw, spec.image_per_class, spec.image_noise, seed)?,
            ),
            Arch::Mlp => (
                build_mlp(spec.blob_dims, &spec.mlp_hidden, spec.blob_classes)?,
                make_blobs(spec.blob_classes, spec.blob_dims, spec.blob_per_class, seed)?,
            ),
        };
        init_params(&mut model, seed);
        let b = train_fp_baseline(&model, &data, &train, seed)?;
        self.cache.lock().expect("cache lock").insert(key, b.clone());
        Ok(b)
    }

    fn run_seed(&self, spec: &ExperimentSpec, seed: u64) -> Result<SeedResult> {
        let arch = spec.recipe.arch();
        let base = self.baseline(spec, arch, spec.train.epochs, seed)?;
        let mut model = base.model.clone();
        if arch == Arch::ToyResNet {
            model.residual_strategy = spec.residual_strategy;
            model.quantize_skip = spec.quantize_skip;
            model.pool_strategy = spec.pool_strategy;
        }
        let ctx = SeedCtx {
            spec,
            seed,
            base: &base,
        };
        let (table, artifacts) = match spec.recipe {
            Recipe::Obs1 => ctx.obs1(model)?,
            Recipe::Obs2 => ctx.obs2(model)?,
            Recipe::Obs3 => ctx.obs3(model)?,
            Recipe::Obs4 => ctx.obs4(model)?,
            Recipe::Obs5 => ctx.obs5(model)?,
            Recipe::Obs6 => ctx.obs6(model)?,
            Recipe::Obs7 => ctx.obs7(model)?,
            Recipe::Obs8 => {
                let weak = self.baseline(spec, arch, spec.weak_epochs, seed)?;
                ctx.obs8(&weak)?
            }
        };
        Ok(SeedResult {
            table,
            artifacts,
            baseline_accuracy: base.holdout_accuracy,
        })
    }
}

struct SeedCtx<'a> {
    spec: &'a ExperimentSpec,
    seed: u64,
    base: &'a Baseline,
}

type Sweep = (ResultTable, Vec<ConfigArtifact>);

/// Rows fed through the float model when measuring activation error.
const MSE_ROWS: usize = 256;

impl SeedCtx<'_> {
    fn table(&self, metrics: &[&str]) -> ResultTable {
        ResultTable::new(self.spec.recipe.id(), self.seed, metrics)
    }

    /// Calibrates on the enforced unlabeled budget drawn from the training split.
    fn calibrate(&self, model: &ModelGraph) -> Result<(ModelGraph, usize)> {
        let cfg = self.spec.calibration();
        let sample = calibration_sample(&self.base.train.inputs, cfg.budget, self.seed);
        let n = sample.shape()[0];
        Ok((calibrate_model(model, &sample, &cfg)?, n))
    }

    fn calibration_card(&self, examples: usize, constraint: BudgetConstraint) -> CardInputs {
        CardInputs {
            act_observer: Some(self.spec.act_observer),
            learned_act_ranges: false,
            allowed_bits: None,
            constraint: Some(constraint),
            examples: Some(examples),
            data_kind: Some(DataKind::Unlabeled),
            epoch_fraction: Some(0.0),
        }
    }

    fn mpq_card(&self, cfg: &MPQConfig, out: &MpqOutcome) -> CardInputs {
        let processed = (cfg.steps * cfg.batch_size.min(out.samples_used)) as f64;
        CardInputs {
            act_observer: Some(self.spec.act_observer),
            learned_act_ranges: cfg.learn_act_ranges,
            allowed_bits: Some(cfg.allowed_bits.clone()),
            constraint: Some(BudgetConstraint::AverageBits {
                weights: cfg.active_target_w(),
                activations: cfg.active_target_a(),
            }),
            examples: Some(out.samples_used),
            data_kind: Some(match cfg.label_source {
                LabelSource::GroundTruth => DataKind::Labeled,
                LabelSource::Pseudolabels => DataKind::Pseudolabels,
            }),
            epoch_fraction: Some(processed / self.base.train.len() as f64),
        }
    }

    fn accuracy(&self, model: &ModelGraph) -> Result<f64> {
        evaluate(model, &self.base.holdout, Mode::Quantized)
    }

    fn with_bits(model: &ModelGraph, kind: Option<SiteKind>, bits: u32) -> Result<ModelGraph> {
        let mut m = model.clone();
        m.set_bits_where(kind, bits)?;
        Ok(m)
    }

    /// Mean quantization MSE over activation sites on holdout activations.
    fn act_mse(&self, model: &ModelGraph) -> Result<f64> {
        let rows: Vec<usize> = (0..self.base.holdout.len().min(MSE_ROWS)).collect();
        let mut seen: Vec<(String, Tensor)> = Vec::new();
        let mut tap = |name: &str, t: &Tensor| seen.push((name.to_string(), t.clone()));
        let mut g = Graph::new();
        let x = g.constant(self.base.holdout.inputs.select_rows(&rows));
        forward_graph(&mut g, model, x, &mut ForwardOptions::new(Mode::FloatingPoint).with_tap(&mut tap))?;
        let mut total = 0.0;
        for (name, t) in &seen {
            let st = &model.quant[name];
            total += quantization_mse(t, &st.spec, &st.state)?;
        }
        Ok(total / seen.len().max(1) as f64)
    }

    fn weight_mse(model: &ModelGraph) -> Result<f64> {
        let sites: Vec<_> = model.sites()?.into_iter().filter(|s| s.kind == SiteKind::Weight).collect();
        let mut total = 0.0;
        for s in &sites {
            let st = &model.quant[&s.name];
            total += quantization_mse(model.param(&s.name)?, &st.spec, &st.state)?;
        }
        Ok(total / sites.len().max(1) as f64)
    }

    fn obs1(&self, model: ModelGraph) -> Result<Sweep> {
        let mut t = self.table(&["accuracy", "act_mse"]);
        let mut arts = Vec::new();
        for (mode, symmetric) in [("asymmetric", false), ("symmetric", true)] {
            let mut m = model.clone();
            m.map_act_specs(|s| QuantizerSpec { symmetric, ..s });
            let (cal, n) = self.calibrate(&m)?;
            for b in self.spec.bits() {
                let q = Self::with_bits(&cal, Some(SiteKind::Activation), b)?;
                let config = format!("{mode}_a{b}");
                t.push(&config, vec![self.accuracy(&q)?, self.act_mse(&q)?])?;
                arts.push(self.artifact(config, q, self.calibration_card(n, BudgetConstraint::None)));
            }
        }
        Ok((t, arts))
    }

    fn obs2(&self, model: ModelGraph) -> Result<Sweep> {
        let mut t = self.table(&["accuracy", "weight_mse"]);
        let mut arts = Vec::new();
        for (mode, granularity) in [
            ("per_tensor", Granularity::PerTensor),
            ("per_channel", Granularity::PerChannel { axis: 0 }),
        ] {
            let mut m = model.clone();
            m.map_weight_specs(|s| QuantizerSpec { granularity, ..s });
            let (cal, n) = self.calibrate(&m)?;
            for b in self.spec.bits() {
                let q = Self::with_bits(&cal, Some(SiteKind::Weight), b)?;
                let config = format!("{mode}_w{b}");
                t.push(&config, vec![self.accuracy(&q)?, Self::weight_mse(&q)?])?;
                arts.push(self.artifact(config, q, self.calibration_card(n, BudgetConstraint::None)));
            }
        }
        Ok((t, arts))
    }

    fn obs3(&self, model: ModelGraph) -> Result<Sweep> {
        let mut t = self.table(&["accuracy"]);
        let mut arts = Vec::new();
        for (mode, strategy) in [
            ("quantize_all", ResidualStrategy::QuantizeAll),
            ("high_precision_add", ResidualStrategy::HighPrecisionAdd),
            ("unquantized_skip", ResidualStrategy::UnquantizedSkip),
        ] {
            let mut m = model.clone();
            m.residual_strategy = strategy;
            m.quant.clear();
            let (cal, n) = self.calibrate(&m)?;
            for b in self.spec.bits() {
                let q = Self::with_bits(&cal, Some(SiteKind::Activation), b)?;
                let config = format!("{mode}_a{b}");
                t.push(&config, vec![self.accuracy(&q)?])?;
                arts.push(self.artifact(config, q, self.calibration_card(n, BudgetConstraint::None)));
            }
        }
        Ok((t, arts))
    }

    fn report_row(&self, q: &ModelGraph, alloc: &BitwidthAllocation) -> Result<Vec<f64>> {
        let r = constraint_report(alloc)?;
        Ok(vec![
            r.model_bytes as f64,
            r.avg_w_including,
            r.avg_w_excluding,
            r.total_featuremap_bytes as f64,
            r.avg_a_including,
            r.avg_a_excluding,
            self.accuracy(q)?,
        ])
    }

    /// Labeled pool for a search: calibration and optimization read the same examples.
    fn mpq_run(&self, model: &ModelGraph, cfg: &MPQConfig) -> Result<(ModelGraph, MpqOutcome, CardInputs)> {
        let pool = self.base.train.sample(cfg.samples, self.seed, "mpq_pool");
        let cal_cfg = CalibrationConfig {
            budget: pool.len(),
            ..self.spec.calibration()
        };
        let mut cal = calibrate_model(model, &pool.inputs, &cal_cfg)?;
        mark_learnable(&mut cal)?;
        let out = learn_bitwidths(&cal, &pool, cfg, self.seed)?;
        let mut q = cal.clone();
        out.apply(&mut q)?;
        let card = self.mpq_card(cfg, &out);
        Ok((q, out, card))
    }

    fn obs4(&self, model: ModelGraph) -> Result<Sweep> {
        let mut t = self.table(&[
            "model_size_bytes",
            "weight_bits_incl_first_last",
            "weight_bits_excl_first_last",
            "total_featmap_bytes",
            "act_bits_incl_first_last",
            "act_bits_excl_first_last",
            "accuracy",
        ]);
        let mut arts = Vec::new();
        let b = self.spec.bits()[0];
        for (config, policy) in [
            (format!("uniform_w{b}a{b}_quantized_ends"), FirstLastPolicy::Quantize),
            (format!("uniform_w{b}a{b}_pinned_ends"), FirstLastPolicy::Pin8Bit),
        ] {
            let mut m = model.clone();
            m.first_last_policy = policy;
            m.quant.clear();
            let (cal, n) = self.calibrate(&m)?;
            let q = Self::with_bits(&cal, None, b)?;
            let alloc = BitwidthAllocation::from_model(&q, None, None, true)?;
            t.push(&config, self.report_row(&q, &alloc)?)?;
            arts.push(self.artifact(config, q, self.calibration_card(n, BudgetConstraint::None)));
        }
        for (config, include) in [("mpq_avg_incl_first_last", true), ("mpq_avg_excl_first_last", false)] {
            let mut m = model.clone();
            m.first_last_policy = FirstLastPolicy::Pin8Bit;
            m.quant.clear();
            let cfg = MPQConfig {
                target_w: b as f64,
                target_a: b as f64,
                pin_first_last: true,
                include_first_last_in_avg: include,
                ..self.spec.mpq.clone()
            };
            let (q, out, card) = self.mpq_run(&m, &cfg)?;
            t.push(config, self.report_row(&q, &out.allocation)?)?;
            arts.push(self.artifact(config.to_string(), q, card));
        }
        Ok((t, arts))
    }

    fn obs5(&self, model: ModelGraph) -> Result<Sweep> {
        let mut t = self.table(&["accuracy", "avg_weight_bits", "avg_act_bits", "meets_constraints"]);
        let mut arts = Vec::new();
        let mut m = model;
        m.first_last_policy = FirstLastPolicy::Quantize;
        m.quant.clear();
        for budget in self.spec.bits() {
            for (mode, allowed) in [
                ("any_integer", AllowedBits::AnyInteger { min: 2, max: 8 }),
                ("set_2_4_8", AllowedBits::Set(vec![2, 4, 8])),
            ] {
                let cfg = MPQConfig {
                    allowed_bits: allowed,
                    target_w: budget as f64,
                    target_a: budget as f64,
                    pin_first_last: false,
                    ..self.spec.mpq.clone()
                };
                let (q, out, card) = self.mpq_run(&m, &cfg)?;
                let a = &out.allocation;
                let config = format!("{mode}_avg{budget}");
                let met = if a.meets_constraints { 1.0 } else { 0.0 };
                t.push(&config, vec![self.accuracy(&q)?, a.achieved_w, a.achieved_a, met])?;
                arts.push(self.artifact(config, q, card));
            }
        }
        Ok((t, arts))
    }

    fn obs6(&self, model: ModelGraph) -> Result<Sweep> {
        let mut t = self.table(&["accuracy", "max_featmap_bytes", "total_featmap_bytes", "avg_act_bits"]);
        let mut arts = Vec::new();
        let (cal, n) = self.calibrate(&model)?;
        let layers = featuremap_layers(&cal)?;
        let stats = |bits: &dyn Fn(&str) -> u32| -> (f64, f64, f64) {
            let bytes: Vec<usize> = layers.iter().map(|(s, e)| (e * bits(s) as usize).div_ceil(8)).collect();
            let elems: usize = layers.iter().map(|(_, e)| e).sum();
            let weighted: usize = layers.iter().map(|(s, e)| e * bits(s) as usize).sum();
            (
                *bytes.iter().max().unwrap_or(&0) as f64,
                bytes.iter().sum::<usize>() as f64,
                weighted as f64 / elems.max(1) as f64,
            )
        };
        for b in self.spec.bits() {
            let uniform = Self::with_bits(&cal, Some(SiteKind::Activation), b)?;
            let (mx, total, avg) = stats(&|_| b);
            let config = format!("uniform_a{b}");
            t.push(&config, vec![self.accuracy(&uniform)?, mx, total, avg])?;
            arts.push(self.artifact(config, uniform, self.calibration_card(n, BudgetConstraint::None)));

            let cap = uniform_max_featuremap_bytes(&layers, b);
            let alloc = max_featuremap_allocation(&layers, cap)?;
            let mut q = cal.clone();
            for (site, &bits) in &alloc {
                q.set_site_bits(site, bits)?;
            }
            let (mx, total, avg) = stats(&|s| alloc[s]);
            let config = format!("max_featmap_a{b}");
            t.push(&config, vec![self.accuracy(&q)?, mx, total, avg])?;
            arts.push(self.artifact(config, q, self.calibration_card(n, BudgetConstraint::MaxFeatureMap { cap_bytes: cap })));
        }
        Ok((t, arts))
    }

    fn obs7(&self, model: ModelGraph) -> Result<Sweep> {
        let mut t = self.table(&["accuracy", "avg_weight_bits", "avg_act_bits"]);
        let mut arts = Vec::new();
        let b = self.spec.bits()[0] as f64;
        for (config, source) in [("ground_truth", LabelSource::GroundTruth), ("pseudolabels", LabelSource::Pseudolabels)] {
            let cfg = MPQConfig {
                label_source: source,
                target_w: b,
                target_a: b,
                ..self.spec.mpq.clone()
            };
            let (q, out, card) = self.mpq_run(&model, &cfg)?;
            t.push(config, vec![self.accuracy(&q)?, out.allocation.achieved_w, out.allocation.achieved_a])?;
            arts.push(self.artifact(config.to_string(), q, card));
        }
        Ok((t, arts))
    }

    fn obs8(&self, weak: &Baseline) -> Result<Sweep> {
        let mut t = self.table(&["fp_accuracy", "accuracy"]);
        let mut arts = Vec::new();
        for (name, base) in [("weak", weak), ("strong", self.base)] {
            let ctx = SeedCtx {
                spec: self.spec,
                seed: self.seed,
                base,
            };
            let mut m = base.model.clone();
            m.residual_strategy = self.spec.residual_strategy;
            m.quantize_skip = self.spec.quantize_skip;
            m.pool_strategy = self.spec.pool_strategy;
            let (cal, n) = ctx.calibrate(&m)?;
            for b in self.spec.bits() {
                let q = Self::with_bits(&cal, Some(SiteKind::Weight), b)?;
                let config = format!("{name}_baseline_w{b}");
                t.push(&config, vec![base.holdout_accuracy, ctx.accuracy(&q)?])?;
                arts.push(self.artifact(config, q, self.calibration_card(n, BudgetConstraint::None)));
            }
        }
        Ok((t, arts))
    }

    fn artifact(&self, config: String, model: ModelGraph, inputs: CardInputs) -> ConfigArtifact {
        ConfigArtifact { config, model, inputs }
    }
}

/// Runs a recipe and writes its outputs under `dir`.
pub fn run_and_write(spec: &ExperimentSpec, dir: &Path) -> Result<RecipeOutput> {
    let out = run_observation(spec)?;
    out.write(dir)?;
    Ok(out)
}

/// Labeled data of an experiment's architecture for `seed`, as the recipes generate it.
pub fn recipe_dataset(spec: &ExperimentSpec, seed: u64) -> Result<LabeledSet> {
    match spec.recipe.arch() {
        Arch::ToyResNet => make_images(spec.image_classes, spec.image_hw, spec.image_per_class, spec.image_noise, seed),
        Arch::Mlp => make_blobs(spec.blob_classes, spec.blob_dims, spec.blob_per_class, seed),
    }
}
