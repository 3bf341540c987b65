//! Exhaustive key search, usable only on tiny models.

use rayon::prelude::*;

use super::engine::{masks_of, Evaluator};
use super::KeyMode;
use crate::bnn::{BinarizedSet, BnnModel};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::transform::{common_length, key_lengths, KeySet, PufKey};

pub const DEFAULT_BRUTE_FORCE_LIMIT: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct BruteForceResult {
    pub keys: KeySet,
    pub correct: u32,
    pub accuracy: f64,
    pub evaluated: u64,
}

/// Key set for index `v`, read as the concatenation of all searched keys
/// with the first layer's bit 0 as the most significant bit.
fn keys_for(v: u64, lengths: &[usize], mode: KeyMode, hidden: usize) -> KeySet {
    let total: usize = lengths.iter().sum();
    let mut pos = 0;
    let keys: Vec<PufKey> = lengths
        .iter()
        .map(|&len| {
            let bits = (0..len)
                .map(|j| (v >> (total - 1 - (pos + j))) & 1 == 1)
                .collect();
            pos += len;
            PufKey::new(bits)
        })
        .collect();
    match mode {
        KeyMode::PerLayer => KeySet::per_layer(keys),
        KeyMode::Shared => KeySet::shared(keys[0].clone(), hidden),
    }
}

/// Evaluates every key and returns the most accurate one, ties going to
/// the numerically smallest key.
pub fn brute_force_key(
    enc_model: &BnnModel,
    data: &LabeledDataset,
    limit: u64,
    mode: KeyMode,
) -> Result<BruteForceResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hidden = enc_model.hidden_count();
    let all = key_lengths(enc_model);
    let lengths = match mode {
        KeyMode::PerLayer => all,
        KeyMode::Shared => vec![common_length(&all)?],
    };
    let total: usize = lengths.iter().sum();
    let space = if total >= 64 { u64::MAX } else { 1u64 << total };
    if total >= 64 || space > limit {
        return Err(Error::InvalidArgument(format!(
            "key space of {total} bits exceeds the brute-force limit of {limit} keys"
        )));
    }
    let set = BinarizedSet::new(data);
    let ev = Evaluator::new(enc_model, &set);
    let (correct, v) = (0..space)
        .into_par_iter()
        .map(|v| {
            let keys = keys_for(v, &lengths, mode, hidden);
            (ev.count(&masks_of(&keys)), v)
        })
        .reduce(
            || (0, u64::MAX),
            |a, b| match a.0.cmp(&b.0) {
                std::cmp::Ordering::Greater => a,
                std::cmp::Ordering::Less => b,
                std::cmp::Ordering::Equal => {
                    if a.1 <= b.1 {
                        a
                    } else {
                        b
                    }
                }
            },
        );
    Ok(BruteForceResult {
        keys: keys_for(v, &lengths, mode, hidden),
        correct,
        accuracy: correct as f64 / set.len() as f64,
        evaluated: space,
    })
}
