//! Datasets, baseline training, calibration, evaluation and the
//! observation recipes.

pub mod calibrate;
pub mod data;
pub mod eval;
pub mod recipes;
pub mod tables;
pub mod train;

pub use calibrate::{calibrate_model, calibration_sample, default_budget, CalibrationConfig};
pub use data::{idx_from_bytes, load_idx, make_blobs, make_images, make_spirals, parse_idx, LabeledSet, Provenance, HOLDOUT_FRACTION};
pub use eval::{evaluate, model_hash, pseudolabel};
pub use train::{train_fp_baseline, Baseline, TrainConfig};
pub use recipes::{recipe_dataset, run_and_write, run_observation, ExperimentSpec, Recipe, RecipeOutput, Runner};
pub use tables::{mean_std, write_tables, ResultTable, SummaryRow, SummaryTable, TableRow};
