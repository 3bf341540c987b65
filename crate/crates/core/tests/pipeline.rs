use bnnkh_core::attack::{AttackConfig, KeyMode};
use bnnkh_core::bnn::random_model;
use bnnkh_core::metrics::{emit_report, render_csv, run_experiment, ExperimentConfig, ReportFormat, CSV_HEADER};
use bnnkh_core::{BnnModel, LabeledDataset, SplitTag};

fn labeled(model: &BnnModel, n: usize) -> LabeledDataset {
    let dim = model.input_dim();
    let images: Vec<u8> = (0..n * dim).map(|i| ((i * 37 + i / dim * 11) % 256) as u8).collect();
    let labels = images.chunks_exact(dim).map(|x| model.predict(x).unwrap() as u8).collect();
    LabeledDataset::new(images, labels, 1, dim, SplitTag::Attacker).unwrap()
}

fn setup() -> (BnnModel, LabeledDataset, LabeledDataset) {
    let model = random_model(&[48, 32, 32, 32, 5], 3);
    let data = labeled(&model, 120);
    let test = data.select(&(0..120).rev().collect::<Vec<_>>(), SplitTag::Test).unwrap();
    (model, data, test)
}

fn config(variants: usize) -> ExperimentConfig {
    let attack = AttackConfig { key_mode: KeyMode::Shared, threads: 1, ..AttackConfig::block(4) };
    ExperimentConfig::new(variants, attack, 11)
}

/// Drops the fields that depend on timing.
fn without_clock(mut v: serde_json::Value) -> serde_json::Value {
    for rec in v["variants"].as_array_mut().unwrap() {
        rec["report"]["wall_clock_s"] = serde_json::Value::Null;
    }
    v["aggregates"]["wall_clock_s"] = serde_json::Value::Null;
    v
}

#[test]
fn experiment_is_deterministic() {
    let (model, data, test) = setup();
    let a = run_experiment(&model, &data, Some(&test), &config(3)).unwrap();
    let b = run_experiment(&model, &data, Some(&test), &config(3)).unwrap();
    assert_eq!(
        without_clock(serde_json::to_value(&a).unwrap()),
        without_clock(serde_json::to_value(&b).unwrap())
    );
    assert_eq!(a.aggregates.completed, 3);
    let seeds: Vec<u64> = a.variants.iter().map(|v| v.key_seed).collect();
    assert!(seeds[0] != seeds[1] && seeds[1] != seeds[2]);
}

#[test]
fn single_variant_has_zero_spread() {
    let (model, data, _) = setup();
    let s = run_experiment(&model, &data, None, &config(1)).unwrap();
    let report = s.variants[0].report.as_ref().unwrap();
    let bm = s.aggregates.bit_match.unwrap();
    assert_eq!(bm.mean, report.mean_bit_match.unwrap());
    assert_eq!(bm.std, 0.0);
    assert_eq!(s.aggregates.recovered_accuracy.unwrap().mean, report.accuracy.recovered);
    assert!(s.aggregates.test_recovered_accuracy.is_none());
}

#[test]
fn reports_round_trip_and_recompute() {
    let (model, data, test) = setup();
    let s = run_experiment(&model, &data, Some(&test), &config(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let json_path = dir.path().join("s.json");
    emit_report(&s, ReportFormat::Json, &json_path).unwrap();
    let back: bnnkh_core::metrics::ExperimentSummary =
        serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(back, s);

    let csv_path = dir.path().join("s.csv");
    emit_report(&s, ReportFormat::Csv, &csv_path).unwrap();
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv, render_csv(&s));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], CSV_HEADER);
    let header: Vec<&str> = CSV_HEADER.split(',').collect();
    let column = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let mean = |name: &str| {
        let values: Vec<f64> = lines[1..]
            .iter()
            .map(|l| l.split(',').nth(column(name)).unwrap().parse::<f64>().unwrap())
            .collect();
        values.iter().sum::<f64>() / values.len() as f64
    };
    let agg = &s.aggregates;
    assert!((mean("bit_match_mean") - agg.bit_match.unwrap().mean).abs() < 1e-12);
    assert!((mean("encrypted_accuracy") - agg.encrypted_accuracy.unwrap().mean).abs() < 1e-12);
    assert!((mean("recovered_accuracy") - agg.recovered_accuracy.unwrap().mean).abs() < 1e-12);
    assert!((mean("test_recovered_accuracy") - agg.test_recovered_accuracy.unwrap().mean).abs() < 1e-12);
}

#[test]
fn failed_variants_are_recorded() {
    // unequal hidden widths cannot take a shared key, so every variant fails
    let model = random_model(&[48, 32, 16, 32, 5], 4);
    let data = labeled(&model, 40);
    let mut cfg = config(2);
    cfg.attack.key_mode = KeyMode::PerLayer;
    let dir = tempfile::tempdir().unwrap();
    cfg.output = Some(dir.path().join("partial.json"));
    let s = run_experiment(&model, &data, None, &cfg).unwrap();
    assert_eq!((s.aggregates.completed, s.aggregates.failed), (0, 2));
    assert!(s.variants.iter().all(|v| v.report.is_none() && v.error.is_some()));
    assert!(cfg.output.unwrap().exists());
    let csv = render_csv(&s);
    assert!(csv.lines().skip(1).all(|l| l.contains(",failed,")));
}

#[test]
fn invalid_configurations_are_rejected() {
    let (model, data, _) = setup();
    let mut cfg = config(2);
    cfg.attack.block_size = 3;
    assert!(run_experiment(&model, &data, None, &cfg).is_err());
    assert!(run_experiment(&model, &data, None, &config(0)).is_err());
}
