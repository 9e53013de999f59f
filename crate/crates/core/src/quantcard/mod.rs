//! Five-section disclosure cards for quantization results.
//!
//! The TOML form is canonical and round-trips exactly; Markdown is a view.
//! Every field is derived from configuration and results. Anything that
//! cannot be derived is written as `undisclosed`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::mpq::AllowedBits;
use crate::network::{FirstLastPolicy, LayerKind, ModelGraph, PoolStrategy, ResidualStrategy, SiteKind};
use crate::quantize::{BitSpec, Granularity, ObserverKind, QuantizerSpec, RangeMode};

pub const UNDISCLOSED: &str = "undisclosed";

pub const ROW_LABELS: [&str; 5] = [
    "Quantization Method",
    "Quantized Operations",
    "Mixed Precision",
    "Resource Complexity",
    "Pretrained Model",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub scheme: String,
    pub weights: String,
    pub activations: String,
    pub range_estimation: String,
    pub learned_ranges: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperationsSection {
    pub residual: String,
    pub skip: String,
    pub first_last: String,
    pub pooling: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedPrecisionSection {
    pub allowed_bitwidths: String,
    pub constraint: String,
    pub pinned_layers: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSection {
    pub examples: String,
    pub data_type: String,
    pub train_time: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainedSection {
    pub baseline_accuracy: String,
    pub quantized_accuracy: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizationCard {
    pub quantization_method: MethodSection,
    pub quantized_operations: OperationsSection,
    pub mixed_precision: MixedPrecisionSection,
    pub resource_complexity: ResourceSection,
    pub pretrained_model: PretrainedSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Labeled,
    Unlabeled,
    Pseudolabels,
    Synthetic,
}

/// How the bit budget was expressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetConstraint {
    None,
    AverageBits { weights: Option<f64>, activations: Option<f64> },
    MaxFeatureMap { cap_bytes: usize },
}

/// Experiment facts that the model itself does not record.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CardInputs {
    pub act_observer: Option<ObserverKind>,
    pub learned_act_ranges: bool,
    /// Allowed set of a mixed-precision search, if one ran.
    pub allowed_bits: Option<AllowedBits>,
    pub constraint: Option<BudgetConstraint>,
    /// Examples read after applying the sample budget.
    pub examples: Option<usize>,
    pub data_kind: Option<DataKind>,
    /// Optimizer examples processed divided by one floating-point epoch.
    pub epoch_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CardResults {
    pub baseline_accuracy: Option<f64>,
    pub quantized_accuracy: Option<f64>,
    /// Number of seeds averaged into `quantized_accuracy`.
    pub seeds: Option<usize>,
    /// Result table holding the per-seed values.
    pub table: Option<String>,
}

fn or_undisclosed(v: Option<String>) -> String {
    v.unwrap_or_else(|| UNDISCLOSED.to_string())
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn describe_specs(specs: &[QuantizerSpec]) -> Option<String> {
    let kinds: BTreeSet<String> = specs
        .iter()
        .map(|s| {
            let sym = if s.symmetric { "symmetric" } else { "asymmetric" };
            let gran = match s.granularity {
                Granularity::PerTensor => "per-tensor".to_string(),
                Granularity::PerChannel { axis } => format!("per-channel (axis {axis})"),
            };
            format!("{sym} {gran}")
        })
        .collect();
    match kinds.len() {
        0 => Some("not quantized".into()),
        _ => Some(kinds.into_iter().collect::<Vec<_>>().join(" / ")),
    }
}

fn bits_summary(model: &ModelGraph, kind: SiteKind) -> Result<Option<String>> {
    let mut bits = BTreeSet::new();
    for s in model.sites()?.iter().filter(|s| s.kind == kind) {
        match model.site_bits(&s.name) {
            Some(b) => bits.insert(b),
            None => return Ok(None),
        };
    }
    Ok(Some(bits.iter().map(u32::to_string).collect::<Vec<_>>().join("/")))
}

fn allowed_text(a: &AllowedBits) -> String {
    match a {
        AllowedBits::AnyInteger { min, max } => format!("any integer in [{min}, {max}]"),
        AllowedBits::Set(m) => format!("{{{}}}", m.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")),
    }
}

/// Derives a card from the quantized model, the experiment inputs and its results.
pub fn build_card(model: &ModelGraph, inputs: &CardInputs, results: &CardResults) -> Result<QuantizationCard> {
    let sites = model.sites()?;
    let specs = |k: SiteKind| -> Vec<QuantizerSpec> { sites.iter().filter(|s| s.kind == k).map(|s| s.spec).collect() };
    let (w_specs, a_specs) = (specs(SiteKind::Weight), specs(SiteKind::Activation));
    let calibrated = model.uncalibrated_sites()?.is_empty();

    let learned_ranges = inputs.learned_act_ranges || a_specs.iter().any(|s| s.range_mode == RangeMode::LearnedMinMax);
    let method = MethodSection {
        scheme: "uniform".into(),
        weights: or_undisclosed(describe_specs(&w_specs)),
        activations: or_undisclosed(describe_specs(&a_specs)),
        range_estimation: or_undisclosed(inputs.act_observer.map(|o| match o {
            ObserverKind::MinMax => "static, min/max calibration".to_string(),
            ObserverKind::Percentile(p) => format!("static, {p}th percentile calibration"),
        })),
        learned_ranges: if learned_ranges {
            "per-tensor activation ranges learned".into()
        } else {
            "none".into()
        },
    };

    let has = |f: fn(&LayerKind) -> bool| model.layers.iter().any(|l| f(&l.kind));
    let residual = has(|k| matches!(k, LayerKind::ResidualBlock { .. }));
    let downsample = has(|k| matches!(k, LayerKind::ResidualBlock { in_ch, out_ch, stride } if stride != &1 || in_ch != out_ch));
    let na = || "not applicable".to_string();
    let ops = OperationsSection {
        residual: if !residual {
            na()
        } else {
            match model.residual_strategy {
                ResidualStrategy::QuantizeAll => "both add inputs and the sum requantized".into(),
                ResidualStrategy::HighPrecisionAdd => "add in high precision, sum requantized".into(),
                ResidualStrategy::UnquantizedSkip => "skip stream kept in floating point".into(),
            }
        },
        skip: if !downsample {
            na()
        } else if model.residual_strategy == ResidualStrategy::QuantizeAll
            || (model.residual_strategy == ResidualStrategy::HighPrecisionAdd && model.quantize_skip)
        {
            "downsample branch output quantized".into()
        } else {
            "downsample branch output not quantized".into()
        },
        first_last: match model.first_last_policy {
            FirstLastPolicy::Quantize => "quantized like other layers".into(),
            FirstLastPolicy::Pin8Bit => "pinned to 8 bits".into(),
        },
        pooling: if !has(|k| matches!(k, LayerKind::AvgPool)) {
            na()
        } else {
            match model.pool_strategy {
                PoolStrategy::HighPrecisionRequant => "high-precision average, output requantized".into(),
                PoolStrategy::IntegerArithmetic => "integer average on the input grid".into(),
            }
        },
    };

    let learned = sites.iter().any(|s| s.spec.bits == BitSpec::Learned);
    let bit_text = if calibrated {
        match (bits_summary(model, SiteKind::Weight)?, bits_summary(model, SiteKind::Activation)?) {
            (Some(w), Some(a)) => {
                let single = !w.contains('/') && !a.contains('/') && w == a;
                Some(if single {
                    format!("single fixed bitwidth: {w} bits")
                } else {
                    format!("weights {w} bits, activations {a} bits")
                })
            }
            _ => None,
        }
    } else {
        None
    };
    let allowed = match (&inputs.allowed_bits, learned) {
        (Some(a), _) => Some(format!("{} ({})", allowed_text(a), or_undisclosed(bit_text))),
        (None, true) => None,
        (None, false) => bit_text,
    };
    let pinned: Vec<String> = sites.iter().filter(|s| s.pinned).map(|s| s.name.clone()).collect();
    let mixed = MixedPrecisionSection {
        allowed_bitwidths: or_undisclosed(allowed),
        constraint: or_undisclosed(inputs.constraint.as_ref().map(|c| match c {
            BudgetConstraint::None => "none".to_string(),
            BudgetConstraint::AverageBits { weights, activations } => {
                let f = |v: &Option<f64>| v.map_or("unconstrained".to_string(), |t| format!("<= {t}"));
                format!("average bits: weights {}, activations {}", f(weights), f(activations))
            }
            BudgetConstraint::MaxFeatureMap { cap_bytes } => format!("maximum feature map <= {cap_bytes} bytes"),
        })),
        pinned_layers: if pinned.is_empty() {
            "none".into()
        } else {
            format!("{} at 8 bits", pinned.join(", "))
        },
    };

    let resource = ResourceSection {
        examples: or_undisclosed(inputs.examples.map(|n| format!("{n} examples"))),
        data_type: or_undisclosed(inputs.data_kind.map(|k| {
            match k {
                DataKind::Labeled => "Labeled training data",
                DataKind::Unlabeled => "Unlabeled training data",
                DataKind::Pseudolabels => "pseudolabels from baseline",
                DataKind::Synthetic => "Synthetic data",
            }
            .to_string()
        })),
        train_time: or_undisclosed(inputs.epoch_fraction.map(|f| {
            if f == 0.0 {
                "calibration forward passes only".to_string()
            } else {
                format!("{:.1}% of one epoch train time", 100.0 * f)
            }
        })),
    };

    let pretrained = PretrainedSection {
        baseline_accuracy: or_undisclosed(results.baseline_accuracy.or(model.baseline_accuracy).map(pct)),
        quantized_accuracy: or_undisclosed(results.quantized_accuracy.map(|a| {
            let mut s = pct(a);
            if let Some(n) = results.seeds.filter(|&n| n > 1) {
                s += &format!(" (mean of {n} seeds)");
            }
            if let Some(t) = &results.table {
                s += &format!(", per-seed values in {t}");
            }
            s
        })),
    };

    Ok(QuantizationCard {
        quantization_method: method,
        quantized_operations: ops,
        mixed_precision: mixed,
        resource_complexity: resource,
        pretrained_model: pretrained,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CardFormat {
    Markdown,
    StructuredText,
}

fn cell(s: &str) -> String {
    s.replace('|', "\\|").replace("\r\n", "<br>").replace(['\n', '\r'], "<br>")
}

impl QuantizationCard {
    fn rows(&self) -> [String; 5] {
        let m = &self.quantization_method;
        let o = &self.quantized_operations;
        let x = &self.mixed_precision;
        let r = &self.resource_complexity;
        let p = &self.pretrained_model;
        [
            format!(
                "{}; weights {}; activations {}; {}; learned ranges: {}",
                m.scheme, m.weights, m.activations, m.range_estimation, m.learned_ranges
            ),
            format!(
                "residual: {}; skip: {}; first/last layer: {}; pooling: {}",
                o.residual, o.skip, o.first_last, o.pooling
            ),
            format!(
                "allowed: {}; constraint: {}; pinned: {}",
                x.allowed_bitwidths, x.constraint, x.pinned_layers
            ),
            format!("{} | {}; train time: {}", r.examples, r.data_type, r.train_time),
            format!("baseline: {}; quantized: {}", p.baseline_accuracy, p.quantized_accuracy),
        ]
    }
}

pub fn render_card(card: &QuantizationCard, format: CardFormat) -> Result<String> {
    match format {
        CardFormat::StructuredText => toml::to_string(card).map_err(|e| QuantError::Serde(e.to_string())),
        CardFormat::Markdown => {
            let mut out = String::from("| Quantization Card | |\n| --- | --- |\n");
            for (label, row) in ROW_LABELS.iter().zip(card.rows()) {
                out += &format!("| {label} | {} |\n", cell(&row));
            }
            Ok(out)
        }
    }
}

/// Parses the structured form.
pub fn parse_card(text: &str) -> Result<QuantizationCard> {
    toml::from_str(text).map_err(|e| QuantError::Serde(e.to_string()))
}
