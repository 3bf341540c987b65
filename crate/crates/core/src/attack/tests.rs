use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::engine::{masks_of, Evaluator, Varying};
use super::*;
use crate::bnn::{correct_count, random_model};
use crate::data::SplitTag;

/// Samples labeled by the plain model, with a share of random labels.
fn teacher_data(model: &BnnModel, n: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = model.input_dim();
    let images: Vec<u8> = (0..n * dim).map(|_| rng.random()).collect();
    let labels = images
        .chunks_exact(dim)
        .map(|img| {
            if rng.random_bool(0.1) {
                rng.random_range(0..model.class_count()) as u8
            } else {
                model.predict(img).unwrap() as u8
            }
        })
        .collect();
    LabeledDataset::new(images, labels, 1, dim, SplitTag::Attacker).unwrap()
}

fn random_keys(model: &BnnModel, seed: u64) -> KeySet {
    KeySet::generate_for(model, seed, false).unwrap()
}

/// Greedy search written directly against materialized models.
fn naive_recover(enc: &BnnModel, data: &LabeledDataset, g: usize, passes: usize) -> KeySet {
    let mut guess = KeySet::zeros_for(enc);
    for l in 0..enc.hidden_count() {
        let len = guess.key(l).len();
        for _ in 0..passes {
            for start in (0..len).step_by(g) {
                let mut best = (0usize, -1.0f64);
                for p in 0..1usize << g {
                    let mut trial = guess.clone();
                    set_block(trial.key_mut(l), start, g, p);
                    let acc = evaluate_candidate(enc, &trial, data).unwrap();
                    if acc > best.1 {
                        best = (p, acc);
                    }
                }
                set_block(guess.key_mut(l), start, g, best.0);
            }
        }
    }
    guess
}

#[test]
fn evaluator_count_matches_materialized_model() {
    let model = random_model(&[50, 130, 70, 66, 5], 3);
    let data = teacher_data(&model, 300, 4);
    let set = BinarizedSet::new(&data);
    for seed in 0..5 {
        let keys = random_keys(&model, seed);
        let enc = encrypt_model(&model, &keys).unwrap();
        let ev = Evaluator::new(&enc, &set);
        let guess = random_keys(&model, 100 + seed);
        let reference = correct_count(&encrypt_model(&enc, &guess).unwrap(), &data).unwrap();
        assert_eq!(ev.count(&masks_of(&guess)) as usize, reference);
        assert_eq!(ev.count(&masks_of(&keys)) as usize, correct_count(&model, &data).unwrap());
    }
}

#[test]
fn block_search_matches_full_evaluation() {
    let model = random_model(&[50, 130, 70, 66, 5], 5);
    let data = teacher_data(&model, 300, 6);
    let set = BinarizedSet::new(&data);
    let enc = encrypt_model(&model, &random_keys(&model, 7)).unwrap();
    let ev = Evaluator::new(&enc, &set);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for layer in 0..3 {
        let guess = random_keys(&model, 9 + layer as u64);
        let mut masks = masks_of(&guess);
        let mut search = ev.block_search(Varying::Layer(layer), &masks);
        assert_eq!(search.correct(), ev.count(&masks));
        for word in 0..masks[layer].len() {
            let pairs = guess.key(layer).len() - word * 32;
            let even = (0..pairs.min(32)).fold(0u64, |m, k| m | 1 << (2 * k));
            let candidates: Vec<u64> = (0..6).map(|_| rng.random::<u64>() & even).collect();
            let counts = search.evaluate(word, &candidates);
            for (c, &n) in candidates.iter().zip(&counts) {
                let mut m = masks.clone();
                m[layer][word] = *c;
                assert_eq!(n, ev.count(&m), "layer {layer} word {word}");
            }
            // later words are searched on top of the committed choice
            search.commit(word, candidates[1]);
            masks[layer][word] = candidates[1];
            assert_eq!(search.correct(), ev.count(&masks));
        }
    }
}

#[test]
fn shared_block_search_matches_full_evaluation() {
    let model = random_model(&[40, 96, 96, 96, 4], 11);
    let data = teacher_data(&model, 200, 12);
    let set = BinarizedSet::new(&data);
    let enc = encrypt_model(&model, &KeySet::generate_for(&model, 13, true).unwrap()).unwrap();
    let ev = Evaluator::new(&enc, &set);
    let guess = KeySet::generate_for(&model, 14, true).unwrap();
    let mut masks = masks_of(&guess);
    let mut search = ev.block_search(Varying::AllHidden, &masks);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for word in 0..2 {
        let even = if word == 0 { 0x5555_5555_5555_5555 } else { 0x5555_5555 };
        let candidates: Vec<u64> = (0..6).map(|_| rng.random::<u64>() & even).collect();
        let counts = search.evaluate(word, &candidates);
        for (c, &n) in candidates.iter().zip(&counts) {
            let mut m = masks.clone();
            for layer in &mut m {
                layer[word] = *c;
            }
            assert_eq!(n, ev.count(&m));
        }
        search.commit(word, candidates[2]);
        for layer in &mut masks {
            layer[word] = candidates[2];
        }
        assert_eq!(search.correct(), ev.count(&masks));
    }
}

#[test]
fn recovery_matches_naive_greedy_search() {
    let model = random_model(&[30, 24, 16, 16, 4], 21);
    let data = teacher_data(&model, 150, 22);
    let enc = encrypt_model(&model, &random_keys(&model, 23)).unwrap();
    for (g, passes) in [(1, 1), (2, 2), (4, 1)] {
        let cfg = AttackConfig {
            method: if g == 1 { Method::SingleBit } else { Method::Block },
            block_size: g,
            passes,
            ..AttackConfig::default()
        };
        let report = recover(&enc, &data, &cfg, None).unwrap();
        assert_eq!(report.recovered_keys().unwrap(), naive_recover(&enc, &data, g, passes), "G={g}");
    }
}

#[test]
fn single_bit_equals_block_of_one() {
    let model = random_model(&[30, 24, 20, 16, 4], 31);
    let data = teacher_data(&model, 150, 32);
    let enc = encrypt_model(&model, &random_keys(&model, 33)).unwrap();
    let single = recover_single_bit(&enc, &data, &AttackConfig::single_bit()).unwrap();
    let block = recover_block(&enc, &data, &AttackConfig::block(1)).unwrap();
    assert_eq!(single.recovered_keys().unwrap(), block.recovered_keys().unwrap());
    assert_eq!(single.total_evaluations, block.total_evaluations);
    assert!(recover_block(&enc, &data, &AttackConfig::single_bit()).is_err());
}

#[test]
fn evaluation_counts_follow_closed_forms() {
    let model = random_model(&[20, 32, 32, 16, 3], 41);
    let data = teacher_data(&model, 40, 42);
    let enc = encrypt_model(&model, &random_keys(&model, 43)).unwrap();
    let single = recover(&enc, &data, &AttackConfig { passes: 2, ..AttackConfig::single_bit() }, None).unwrap();
    let evals: Vec<u64> = single.per_layer.iter().map(|l| l.evaluations).collect();
    assert_eq!(evals, vec![2 * 16 * 2, 2 * 16 * 2, 2 * 8 * 2]);
    let block = recover(&enc, &data, &AttackConfig::block(4), None).unwrap();
    let evals: Vec<u64> = block.per_layer.iter().map(|l| l.evaluations).collect();
    assert_eq!(evals, vec![16 * 4, 16 * 4, 16 * 2]);
    assert_eq!(block.total_evaluations, 160);
}

#[test]
fn trajectory_never_decreases() {
    let model = random_model(&[30, 32, 32, 32, 4], 51);
    let data = teacher_data(&model, 200, 52);
    let keys = KeySet::generate_for(&model, 53, true).unwrap();
    let enc = encrypt_model(&model, &keys).unwrap();
    for mode in [KeyMode::PerLayer, KeyMode::Shared] {
        let cfg = AttackConfig { key_mode: mode, passes: 2, ..AttackConfig::block(2) };
        let report = recover(&enc, &data, &cfg, Some(&keys)).unwrap();
        let counts: Vec<u32> = report.trajectory.iter().map(|p| p.correct).collect();
        assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{mode:?}: {counts:?}");
        let last = *counts.last().unwrap() as f64 / data.len() as f64;
        assert_eq!(last, report.accuracy.recovered);
        assert!(report.accuracy.recovered >= report.accuracy.encrypted);
        assert_eq!(report.accuracy.original_if_known, Some(evaluate_accuracy_of(&model, &data)));
    }
}

fn evaluate_accuracy_of(model: &BnnModel, data: &LabeledDataset) -> f64 {
    correct_count(model, data).unwrap() as f64 / data.len() as f64
}

#[test]
fn shared_mode_recovers_one_key_for_all_layers() {
    let model = random_model(&[30, 16, 16, 16, 4], 61);
    let data = teacher_data(&model, 150, 62);
    let keys = KeySet::generate_for(&model, 63, true).unwrap();
    let enc = encrypt_model(&model, &keys).unwrap();
    let cfg = AttackConfig { key_mode: KeyMode::Shared, ..AttackConfig::block(4) };
    let report = recover(&enc, &data, &cfg, Some(&keys)).unwrap();
    let rec = report.recovered_keys().unwrap();
    assert!(rec.is_shared());
    assert_eq!(report.total_evaluations, 16 * 2);
    assert_eq!(
        evaluate_candidate(&enc, &rec, &data).unwrap(),
        report.accuracy.recovered
    );
}

#[test]
fn recovered_keys_do_not_depend_on_thread_count() {
    let model = random_model(&[40, 64, 64, 64, 5], 71);
    let data = teacher_data(&model, 600, 72);
    let enc = encrypt_model(&model, &random_keys(&model, 73)).unwrap();
    let run = |threads| {
        let cfg = AttackConfig { threads, ..AttackConfig::block(4) };
        let r = recover(&enc, &data, &cfg, None).unwrap();
        (r.recovered_keys().unwrap(), r.trajectory)
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(0));
}

#[test]
fn block_search_over_whole_key_equals_brute_force() {
    for seed in 0..10 {
        let model = random_model(&[12, 8, 3], 80 + seed);
        let data = teacher_data(&model, 64, 90 + seed);
        let keys = random_keys(&model, seed);
        let enc = encrypt_model(&model, &keys).unwrap();
        let brute = brute_force_key(&enc, &data, DEFAULT_BRUTE_FORCE_LIMIT, KeyMode::PerLayer).unwrap();
        assert_eq!(brute.evaluated, 16);
        let report = recover(&enc, &data, &AttackConfig::block(4), None).unwrap();
        assert_eq!(report.recovered_keys().unwrap(), brute.keys);
        assert_eq!(report.accuracy.recovered, brute.accuracy);
    }
}

#[test]
fn brute_force_prefers_smallest_key_on_ties() {
    // every prediction is the same class, so every key ties
    let model = random_model(&[12, 8, 3], 1);
    let data = LabeledDataset::new(vec![0; 12 * 4], vec![0; 4], 1, 12, SplitTag::Test).unwrap();
    let brute = brute_force_key(&model, &data, 16, KeyMode::PerLayer).unwrap();
    assert_eq!(brute.evaluated, 16);
    assert_eq!(brute.keys, KeySet::zeros_for(&model));
}

#[test]
fn brute_force_respects_limit() {
    let model = random_model(&[12, 8, 8, 3], 2);
    let data = teacher_data(&model, 10, 3);
    assert!(brute_force_key(&model, &data, 16, KeyMode::PerLayer).is_err());
    let shared = brute_force_key(&model, &data, 16, KeyMode::Shared).unwrap();
    assert!(shared.keys.is_shared());
}

#[test]
fn config_validation() {
    let model = random_model(&[20, 512, 512, 512, 10], 1);
    let err = AttackConfig::block(3).validate(&model).unwrap_err().to_string();
    assert!(err.contains("block size must divide key length"), "{err}");
    assert!(AttackConfig::block(32).validate(&model).is_err());
    for g in [1, 2, 4, 8, 16] {
        AttackConfig::block(g).validate(&model).unwrap();
    }
    let bad_order = AttackConfig { layer_order: vec![0, 0, 1], ..AttackConfig::default() };
    assert!(bad_order.validate(&model).is_err());
    let reversed = AttackConfig { layer_order: vec![2, 1, 0], ..AttackConfig::default() };
    reversed.validate(&model).unwrap();
    assert!(AttackConfig { passes: 0, ..AttackConfig::default() }.validate(&model).is_err());
}

#[test]
fn reversed_layer_order_is_honored() {
    let model = random_model(&[30, 24, 20, 16, 4], 101);
    let data = teacher_data(&model, 120, 102);
    let enc = encrypt_model(&model, &random_keys(&model, 103)).unwrap();
    let cfg = AttackConfig { layer_order: vec![2, 1, 0], ..AttackConfig::block(2) };
    let report = recover(&enc, &data, &cfg, None).unwrap();
    let order: Vec<usize> = report.trajectory.iter().map(|p| p.layer).collect();
    assert_eq!(order.first(), Some(&2));
    assert_eq!(order.last(), Some(&0));
}

#[test]
fn report_json_uses_documented_field_names() {
    let model = random_model(&[12, 8, 3], 5);
    let data = teacher_data(&model, 20, 6);
    let keys = random_keys(&model, 7);
    let enc = encrypt_model(&model, &keys).unwrap();
    let report = recover(&enc, &data, &AttackConfig::block(2), Some(&keys)).unwrap();
    let json: serde_json::Value = serde_json::to_value(&report).unwrap();
    for field in ["method", "G", "passes", "samples", "per_layer", "accuracy", "wall_clock_s", "threads", "seed"] {
        assert!(json.get(field).is_some(), "{field}");
    }
    assert!(json["per_layer"][0]["bit_match"].is_number());
    assert!(json["accuracy"]["original_if_known"].is_number());
    let back: AttackReport = serde_json::from_value(json).unwrap();
    assert_eq!(back, report);
}
