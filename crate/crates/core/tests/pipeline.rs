use quantbench::network::{build_mlp, build_toy_resnet, Mode};
use quantbench::pipeline::{
    calibrate_model, calibration_sample, evaluate, load_idx, make_blobs, make_images, make_spirals, mean_std,
    pseudolabel, run_observation, train_fp_baseline, CalibrationConfig, ExperimentSpec, Provenance,
    Recipe, ResultTable, SummaryTable, TrainConfig,
};
use quantbench::quantize::ObserverKind;
use quantbench::{QuantError, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};

fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

#[test]
fn idx_files_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..3 * 2 * 2).map(|i| (i * 20) as u8).collect();
    std::fs::write(dir.path().join("img"), idx(0x803, &[3, 2, 2], &pixels)).unwrap();
    std::fs::write(dir.path().join("lab"), idx(0x801, &[3], &[2, 0, 1])).unwrap();
    let set = load_idx(dir.path().join("img"), dir.path().join("lab")).unwrap();
    assert_eq!(set.inputs.shape(), &[3, 1, 2, 2]);
    assert_eq!(set.labels, vec![2, 0, 1]);
    assert_eq!(set.classes, 3);
    assert_eq!(set.inputs.data()[5], 100.0 / 255.0);
    let err = load_idx(dir.path().join("img"), dir.path().join("missing")).unwrap_err();
    assert!(matches!(err, QuantError::Io { .. }), "{err}");
}

#[test]
fn idx_count_mismatch_is_reported() {
    let img = idx(0x803, &[2, 1, 1], &[0, 255]);
    let lab = idx(0x801, &[3], &[0, 1, 1]);
    let err = quantbench::pipeline::idx_from_bytes(&img, &lab).unwrap_err();
    assert!(err.to_string().contains("2 images but 3 labels"), "{err}");
}

#[test]
fn generators_are_seeded_and_balanced() {
    for set in [
        make_blobs(3, 4, 20, 9).unwrap(),
        make_spirals(3, 20, 0.1, 9).unwrap(),
        make_images(3, 6, 20, 0.5, 9).unwrap(),
    ] {
        assert_eq!(set.len(), 60);
        for c in 0..3 {
            assert_eq!(set.labels.iter().filter(|&&l| l == c).count(), 20);
        }
    }
    assert_eq!(make_spirals(2, 30, 0.2, 1).unwrap(), make_spirals(2, 30, 0.2, 1).unwrap());
    assert_ne!(make_spirals(2, 30, 0.2, 1).unwrap(), make_spirals(2, 30, 0.2, 2).unwrap());
}

#[test]
fn evaluate_counts_hits_of_a_constant_model() {
    let data = make_blobs(4, 3, 25, 0).unwrap();
    let mut m = build_mlp(3, &[4], 4).unwrap();
    for t in m.params.values_mut() {
        *t = t.map(|_| 0.0);
    }
    m.params.get_mut("fc2.bias").unwrap().data_mut()[2] = 1.0;
    let expected = data.labels.iter().filter(|&&l| l == 2).count() as f64 / data.len() as f64;
    assert_eq!(evaluate(&m, &data, Mode::FloatingPoint).unwrap(), expected);
}

#[test]
fn trained_baseline_beats_chance_and_is_reproducible() {
    let data = make_blobs(3, 4, 60, 3).unwrap();
    let m = build_mlp(4, &[16], 3).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        ..TrainConfig::default()
    };
    let a = train_fp_baseline(&m, &data, &cfg, 3).unwrap();
    let b = train_fp_baseline(&m, &data, &cfg, 3).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.epoch_losses.len(), 8);
    assert!(a.epoch_losses.last() < a.epoch_losses.first());
    assert!(a.holdout_accuracy > 0.9, "{}", a.holdout_accuracy);
    assert_eq!(a.model.baseline_accuracy, Some(a.holdout_accuracy));
    assert_eq!(a.train.len() + a.holdout.len(), data.len());
}

#[test]
fn pseudolabels_record_the_labelling_model() {
    let data = make_blobs(2, 2, 10, 0).unwrap();
    let m = build_mlp(2, &[4], 2).unwrap();
    let p = pseudolabel(&m, &data.inputs).unwrap();
    let fp = quantbench::network::forward(&m, &data.inputs, Mode::FloatingPoint).unwrap();
    assert_eq!(p.labels, fp.argmax_rows());
    assert!(matches!(p.provenance, Provenance::Pseudolabel { .. }));
}

#[test]
fn calibration_never_reads_past_its_budget() {
    let m = build_mlp(2, &[4], 2).unwrap();
    let mut data = vec![0.5; 40 * 2];
    for v in &mut data[20..] {
        *v = 1e6;
    }
    let x = Tensor::new(vec![40, 2], data).unwrap();
    let cfg = CalibrationConfig {
        budget: 10,
        batch_size: 3,
        ..CalibrationConfig::default()
    };
    let q = calibrate_model(&m, &x, &cfg).unwrap();
    for st in q.quant.values() {
        assert!(st.raw_max.max() < 1e3, "{:?}", st.raw_max);
    }
    assert_eq!(calibration_sample(&x, 7, 0).shape(), &[7, 2]);
    assert_eq!(calibration_sample(&x, 7, 0), calibration_sample(&x, 7, 0));
    let empty = Tensor::zeros(&[0, 2]);
    assert!(matches!(calibrate_model(&m, &empty, &cfg), Err(QuantError::Calibration(_))));
}

#[test]
fn percentile_clips_heavy_tails_inside_minmax() {
    let m = build_toy_resnet(4, 2, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = StudentT::new(1.5).unwrap();
    let vals: Vec<f64> = (0..64 * 64).map(|_| t.sample(&mut rng)).collect();
    let x = Tensor::new(vec![64, 1, 8, 8], vals).unwrap();
    let minmax = calibrate_model(&m, &x, &CalibrationConfig::default()).unwrap();
    let pct = calibrate_model(
        &m,
        &x,
        &CalibrationConfig {
            act_observer: ObserverKind::Percentile(99.0),
            ..CalibrationConfig::default()
        },
    )
    .unwrap();
    let width = |q: &quantbench::network::ModelGraph, s: &str| q.quant[s].raw_max.max() - q.quant[s].raw_min.min();
    let mut tighter = 0;
    for s in m.sites().unwrap().iter().filter(|s| s.kind == quantbench::network::SiteKind::Activation) {
        assert!(width(&pct, &s.name) <= width(&minmax, &s.name), "{}", s.name);
        tighter += usize::from(width(&pct, &s.name) < width(&minmax, &s.name));
    }
    assert!(tighter > 0);
}

#[test]
fn summaries_carry_per_seed_mean_and_sample_std() {
    let mut tables = Vec::new();
    for (seed, v) in [(0u64, 0.5), (1, 0.7), (2, 0.9)] {
        let mut t = ResultTable::new("obs1", seed, &["accuracy"]);
        t.push("w4", vec![v]).unwrap();
        tables.push(t);
    }
    let s = SummaryTable::from_tables(&tables).unwrap();
    let row = s.row("w4", "accuracy").unwrap();
    assert_eq!(row.per_seed, vec![0.5, 0.7, 0.9]);
    assert!((row.mean - 0.7).abs() < 1e-15);
    assert!((row.std - 0.2).abs() < 1e-15);
    assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
    let csv = s.to_csv().unwrap();
    assert!(csv.lines().next().unwrap().contains("std"), "{csv}");
    let mut bad = ResultTable::new("obs1", 3, &["accuracy"]);
    bad.push("w8", vec![1.0]).unwrap();
    tables.push(bad);
    assert!(SummaryTable::from_tables(&tables).is_err());
}

fn tiny(recipe: Recipe) -> ExperimentSpec {
    ExperimentSpec {
        seeds: vec![0, 1],
        blob_per_class: 40,
        image_per_class: 40,
        train: TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        },
        bits: Some(vec![4]),
        ..ExperimentSpec::for_recipe(recipe)
    }
}

#[test]
fn recipes_are_seed_deterministic() {
    for recipe in [Recipe::Obs1, Recipe::Obs3] {
        let spec = tiny(recipe);
        let (a, b) = (run_observation(&spec).unwrap(), run_observation(&spec).unwrap());
        assert_eq!(a.tables, b.tables);
        assert_eq!(a.cards, b.cards);
        assert_eq!(a.summary.seeds, vec![0, 1]);
        assert!(a.summary.rows.iter().all(|r| r.per_seed.len() == 2));
    }
}

#[test]
fn threaded_seeds_match_sequential_seeds() {
    let spec = tiny(Recipe::Obs2);
    let seq = run_observation(&spec).unwrap();
    let par = run_observation(&ExperimentSpec { parallel: true, ..spec }).unwrap();
    assert_eq!(seq.tables, par.tables);
}

#[test]
fn recipe_ids_parse() {
    for r in Recipe::ALL {
        assert_eq!(r.id().parse::<Recipe>().unwrap(), r);
    }
    assert!("obs9".parse::<Recipe>().is_err());
}

#[test]
fn empty_seed_list_is_rejected() {
    let spec = ExperimentSpec {
        seeds: vec![],
        ..tiny(Recipe::Obs1)
    };
    assert!(run_observation(&spec).is_err());
}
