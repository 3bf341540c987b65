//! Accuracy-guided key recovery.
//!
//! Starting from the all-zero (no swap) guess, each block of `G`
//! consecutive key bits is set to whichever of its `2^G` patterns gives the
//! most correct predictions on the attacker's labeled samples, with every
//! other bit held at its current value. Single-bit recovery is the `G = 1`
//! case. Comparisons use integer correct-counts, and ties go to the
//! numerically smallest pattern (so a tie on one bit keeps "no swap").

mod brute;
mod engine;

pub use brute::{brute_force_key, BruteForceResult, DEFAULT_BRUTE_FORCE_LIMIT};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bnn::{correct_count_binarized, BinarizedSet, BnnModel, WORD_BITS};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::transform::{common_length, encrypt_model, key_lengths, KeySet, PufKey};
use engine::{masks_of, Evaluator, Varying};

/// Largest supported block; blocks must also fit inside one 64-bit
/// activation word, which holds for every power of two up to 32 pairs.
pub const MAX_BLOCK_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SingleBit,
    Block,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyMode {
    /// Independent key per hidden layer, recovered one layer at a time.
    PerLayer,
    /// One key applied to every hidden layer at once.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: Method,
    pub block_size: usize,
    pub passes: usize,
    pub eval_samples: usize,
    /// Hidden layer indices in recovery order; empty means first to last.
    pub layer_order: Vec<usize>,
    pub key_mode: KeyMode,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            method: Method::Block,
            block_size: 4,
            passes: 1,
            eval_samples: 5000,
            layer_order: Vec::new(),
            key_mode: KeyMode::PerLayer,
            threads: 0,
            seed: 1,
        }
    }
}

impl AttackConfig {
    pub fn single_bit() -> Self {
        Self {
            method: Method::SingleBit,
            block_size: 1,
            ..Self::default()
        }
    }

    pub fn block(block_size: usize) -> Self {
        Self {
            method: Method::Block,
            block_size,
            ..Self::default()
        }
    }

    /// Block size actually searched.
    pub fn effective_block_size(&self) -> usize {
        match self.method {
            Method::SingleBit => 1,
            Method::Block => self.block_size,
        }
    }

    fn order(&self, hidden: usize) -> Vec<usize> {
        if self.layer_order.is_empty() {
            (0..hidden).collect()
        } else {
            self.layer_order.clone()
        }
    }

    /// Checks the configuration against the key lengths of `model`.
    pub fn validate(&self, model: &BnnModel) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::InvalidArgument("passes must be at least 1".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::InvalidArgument("eval samples must be at least 1".into()));
        }
        let hidden = model.hidden_count();
        if hidden == 0 {
            return Err(Error::InvalidArgument("model has no hidden layers to attack".into()));
        }
        let lengths = key_lengths(model);
        if lengths.contains(&0) || model.layers()[..hidden].iter().any(|l| l.out_dim() % 2 != 0)
        {
            return Err(Error::InvalidArgument("hidden layers need even width".into()));
        }
        let order = self.order(hidden);
        let mut seen = vec![false; hidden];
        for &l in &order {
            if l >= hidden || std::mem::replace(&mut seen[l], true) {
                return Err(Error::InvalidArgument(format!(
                    "layer order {order:?} is not a permutation of 0..{hidden}"
                )));
            }
        }
        if self.key_mode == KeyMode::Shared {
            common_length(&lengths)?;
        }
        let g = self.effective_block_size();
        let searched: Vec<usize> = match self.key_mode {
            KeyMode::PerLayer => order.iter().map(|&l| lengths[l]).collect(),
            KeyMode::Shared => vec![lengths[0]],
        };
        if g == 0 || searched.iter().any(|&len| len % g != 0) {
            return Err(Error::InvalidArgument(format!(
                "block size must divide key length (block size {g}, key lengths {searched:?})"
            )));
        }
        if !g.is_power_of_two() || g > MAX_BLOCK_SIZE {
            return Err(Error::InvalidArgument(format!(
                "block size must be a power of two no larger than {MAX_BLOCK_SIZE}, got {g}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub recovered_key: String,
    pub bit_match: Option<f64>,
    pub evaluations: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub encrypted: f64,
    pub recovered: f64,
    pub original_if_known: Option<f64>,
}

/// Correct-count after one block decision.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub layer: usize,
    pub pass: usize,
    pub block: usize,
    pub correct: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub method: Method,
    #[serde(rename = "G")]
    pub block_size: usize,
    pub passes: usize,
    pub samples: usize,
    pub key_mode: KeyMode,
    pub layer_order: Vec<usize>,
    pub per_layer: Vec<LayerReport>,
    pub mean_bit_match: Option<f64>,
    pub accuracy: AccuracyReport,
    pub total_evaluations: u64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub wall_clock_s: f64,
    pub threads: usize,
    pub seed: u64,
}

impl AttackReport {
    pub fn recovered_keys(&self) -> Result<KeySet> {
        let keys = self
            .per_layer
            .iter()
            .map(|l| l.recovered_key.parse())
            .collect::<Result<Vec<PufKey>>>()?;
        Ok(match self.key_mode {
            KeyMode::Shared => {
                let n = keys.len();
                KeySet::shared(keys[0].clone(), n)
            }
            KeyMode::PerLayer => KeySet::per_layer(keys),
        })
    }

    /// Fills per-layer bit matches against the true keys.
    pub fn score_against(&mut self, truth: &KeySet) -> Result<()> {
        if truth.len() != self.per_layer.len() {
            return Err(Error::Dimension(format!(
                "{} true keys for {} layers",
                truth.len(),
                self.per_layer.len()
            )));
        }
        let mut sum = 0.0;
        for (entry, key) in self.per_layer.iter_mut().zip(truth.keys()) {
            let recovered: PufKey = entry.recovered_key.parse()?;
            let m = crate::metrics::key_bit_match(key, &recovered)?;
            entry.bit_match = Some(m);
            sum += m;
        }
        self.mean_bit_match = Some(sum / self.per_layer.len() as f64);
        Ok(())
    }
}

/// Accuracy of `enc_model` trial-decrypted with `guess`, computed by
/// materializing the decrypted model.
pub fn evaluate_candidate(enc_model: &BnnModel, guess: &KeySet, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model = encrypt_model(enc_model, guess)?;
    Ok(correct_count_binarized(&model, &BinarizedSet::new(data))? as f64 / data.len() as f64)
}

pub(crate) fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn check_data(enc_model: &BnnModel, data: &LabeledDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.pixels_per_image() != enc_model.input_dim() {
        return Err(Error::Dimension(format!(
            "images have {} pixels, model expects {}",
            data.pixels_per_image(),
            enc_model.input_dim()
        )));
    }
    Ok(())
}

/// Candidate mask words for one block: pattern `p` read big-endian over
/// the block's bits, so `p = 0` is all "no swap".
fn block_candidates(block_start: usize, g: usize) -> (usize, u64, Vec<u64>) {
    let first_bit = 2 * block_start;
    let word = first_bit / WORD_BITS;
    let offset = first_bit % WORD_BITS;
    let candidates = (0..1u64 << g)
        .map(|p| {
            (0..g).fold(0u64, |m, i| {
                if (p >> (g - 1 - i)) & 1 == 1 {
                    m | 1 << (offset + 2 * i)
                } else {
                    m
                }
            })
        })
        .collect::<Vec<_>>();
    let block_mask = candidates[candidates.len() - 1];
    (word, block_mask, candidates)
}

fn set_block(key: &mut PufKey, block_start: usize, g: usize, pattern: usize) {
    for i in 0..g {
        key.set(block_start + i, (pattern >> (g - 1 - i)) & 1 == 1);
    }
}

struct Search<'a> {
    ev: Evaluator<'a>,
    g: usize,
    passes: usize,
    trajectory: Vec<TrajectoryPoint>,
}

impl Search<'_> {
    /// Block search over `varying`, updating `guess` (all layers in
    /// `targets`) in place. Returns the number of candidate evaluations.
    fn run(&mut self, guess: &mut KeySet, varying: Varying, targets: &[usize]) -> u64 {
        let mut search = self.ev.block_search(varying, &masks_of(guess));
        let len = guess.key(targets[0]).len();
        let mut evaluations = 0;
        for pass in 0..self.passes {
            for (b, block_start) in (0..len).step_by(self.g).enumerate() {
                let (word, block_mask, candidates) = block_candidates(block_start, self.g);
                let fixed = search.current(word) & !block_mask;
                let values: Vec<u64> = candidates.iter().map(|c| fixed | c).collect();
                let counts = search.evaluate(word, &values);
                evaluations += counts.len() as u64;
                let (best, &correct) = counts
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                    .expect("at least one candidate");
                search.commit(word, values[best]);
                debug_assert_eq!(search.correct(), correct);
                for &t in targets {
                    set_block(guess.key_mut(t), block_start, self.g, best);
                }
                self.trajectory.push(TrajectoryPoint {
                    layer: targets[0],
                    pass,
                    block: b,
                    correct,
                });
            }
        }
        evaluations
    }
}

/// Runs single-bit or block recovery according to `cfg.method`.
///
/// When `truth` is given, the report carries per-layer bit matches and the
/// original model's accuracy on `data`.
pub fn recover(
    enc_model: &BnnModel,
    data: &LabeledDataset,
    cfg: &AttackConfig,
    truth: Option<&KeySet>,
) -> Result<AttackReport> {
    cfg.validate(enc_model)?;
    check_data(enc_model, data)?;
    let started = Instant::now();
    let pool = build_pool(cfg.threads)?;
    let set = BinarizedSet::new(data);
    let hidden = enc_model.hidden_count();
    let order = cfg.order(hidden);
    let g = cfg.effective_block_size();

    let mut report = pool.install(|| {
        let mut search = Search {
            ev: Evaluator::new(enc_model, &set),
            g,
            passes: cfg.passes,
            trajectory: Vec::new(),
        };
        let zero = KeySet::zeros_for(enc_model);
        let encrypted = search.ev.count(&masks_of(&zero));
        let mut per_layer_evals = vec![0u64; hidden];
        let guess = match cfg.key_mode {
            KeyMode::PerLayer => {
                let mut guess = zero;
                for &t in &order {
                    per_layer_evals[t] = search.run(&mut guess, Varying::Layer(t), &[t]);
                }
                guess
            }
            KeyMode::Shared => {
                let len = key_lengths(enc_model)[0];
                let mut guess = KeySet::shared(PufKey::zeros(len), hidden);
                let all: Vec<usize> = (0..hidden).collect();
                let evals = search.run(&mut guess, Varying::AllHidden, &all);
                per_layer_evals.iter_mut().for_each(|e| *e = evals);
                guess
            }
        };
        let recovered = search.ev.count(&masks_of(&guess));
        let original = truth.map(|t| search.ev.count(&masks_of(t)));
        let n = set.len() as f64;
        let total_evaluations = match cfg.key_mode {
            KeyMode::PerLayer => per_layer_evals.iter().sum(),
            KeyMode::Shared => per_layer_evals[0],
        };
        AttackReport {
            method: cfg.method,
            block_size: g,
            passes: cfg.passes,
            samples: set.len(),
            key_mode: cfg.key_mode,
            layer_order: order.clone(),
            per_layer: (0..hidden)
                .map(|l| LayerReport {
                    layer: l,
                    recovered_key: guess.key(l).to_text(),
                    bit_match: None,
                    evaluations: per_layer_evals[l],
                })
                .collect(),
            mean_bit_match: None,
            accuracy: AccuracyReport {
                encrypted: encrypted as f64 / n,
                recovered: recovered as f64 / n,
                original_if_known: original.map(|c| c as f64 / n),
            },
            total_evaluations,
            trajectory: search.trajectory,
            wall_clock_s: 0.0,
            threads: pool.current_num_threads(),
            seed: cfg.seed,
        }
    });
    if let Some(t) = truth {
        if t.len() != hidden {
            return Err(Error::Dimension(format!(
                "{} true keys for {hidden} hidden layers",
                t.len()
            )));
        }
        report.score_against(t)?;
    }
    report.wall_clock_s = started.elapsed().as_secs_f64();
    Ok(report)
}

fn require_method(cfg: &AttackConfig, method: Method) -> Result<()> {
    if cfg.method != method {
        return Err(Error::InvalidArgument(format!(
            "configuration is for {:?}, not {method:?}",
            cfg.method
        )));
    }
    Ok(())
}

pub fn recover_single_bit(
    enc_model: &BnnModel,
    data: &LabeledDataset,
    cfg: &AttackConfig,
) -> Result<AttackReport> {
    require_method(cfg, Method::SingleBit)?;
    recover(enc_model, data, cfg, None)
}

pub fn recover_block(
    enc_model: &BnnModel,
    data: &LabeledDataset,
    cfg: &AttackConfig,
) -> Result<AttackReport> {
    require_method(cfg, Method::Block)?;
    recover(enc_model, data, cfg, None)
}

#[cfg(test)]
mod tests;
