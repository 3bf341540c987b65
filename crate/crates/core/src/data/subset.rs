use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LabeledDataset, SplitTag, CLASS_COUNT};
use crate::error::{Error, Result};

/// Indices into a source dataset chosen for the attacker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetSelection {
    pub indices: Vec<usize>,
    source_len: usize,
}

fn check_request(total: usize, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("subset size must be at least 1".into()));
    }
    if n > total {
        return Err(Error::InvalidArgument(format!(
            "requested {n} samples from a set of {total}"
        )));
    }
    Ok(())
}

fn shuffled_indices(total: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

impl SubsetSelection {
    /// Seeded shuffle of all indices, then the first `n`.
    pub fn shuffled(source: &LabeledDataset, n: usize, seed: u64) -> Result<Self> {
        check_request(source.len(), n)?;
        let mut indices = shuffled_indices(source.len(), seed);
        indices.truncate(n);
        Ok(Self {
            indices,
            source_len: source.len(),
        })
    }

    /// Same shuffle, but takes `n / 10` per class (remainder to the lowest
    /// classes). Errors if a class has too few samples.
    pub fn class_balanced(source: &LabeledDataset, n: usize, seed: u64) -> Result<Self> {
        check_request(source.len(), n)?;
        let mut quota = [n / CLASS_COUNT; CLASS_COUNT];
        for q in quota.iter_mut().take(n % CLASS_COUNT) {
            *q += 1;
        }
        let mut indices = Vec::with_capacity(n);
        for i in shuffled_indices(source.len(), seed) {
            let class = source.label(i) as usize;
            if quota[class] > 0 {
                quota[class] -= 1;
                indices.push(i);
            }
        }
        if let Some(class) = quota.iter().position(|&q| q > 0) {
            return Err(Error::InvalidArgument(format!(
                "class {class} has too few samples for a balanced subset of {n}"
            )));
        }
        Ok(Self {
            indices,
            source_len: source.len(),
        })
    }

    pub fn apply(&self, source: &LabeledDataset) -> Result<LabeledDataset> {
        self.check_source(source)?;
        source.select(&self.indices, SplitTag::Attacker)
    }

    /// Everything not selected, in source order.
    pub fn complement(&self, source: &LabeledDataset) -> Result<LabeledDataset> {
        self.check_source(source)?;
        let mut taken = vec![false; source.len()];
        for &i in &self.indices {
            taken[i] = true;
        }
        let rest: Vec<usize> = (0..source.len()).filter(|&i| !taken[i]).collect();
        source.select(&rest, SplitTag::HeldOut)
    }

    fn check_source(&self, source: &LabeledDataset) -> Result<()> {
        if source.len() != self.source_len {
            return Err(Error::InvalidArgument(format!(
                "selection built for {} samples applied to {}",
                self.source_len,
                source.len()
            )));
        }
        Ok(())
    }
}

pub fn attacker_subset(test_set: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    SubsetSelection::shuffled(test_set, n, seed)?.apply(test_set)
}

pub fn class_balanced_subset(
    test_set: &LabeledDataset,
    n: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    SubsetSelection::class_balanced(test_set, n, seed)?.apply(test_set)
}

/// Test samples the attacker never saw under `selection`.
pub fn held_out(test_set: &LabeledDataset, selection: &SubsetSelection) -> Result<LabeledDataset> {
    selection.complement(test_set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> LabeledDataset {
        let images: Vec<u8> = (0..n).map(|i| i as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        LabeledDataset::new(images, labels, 1, 1, SplitTag::Test).unwrap()
    }

    #[test]
    fn repeatable_and_seed_sensitive() {
        let t = toy(200);
        let a = SubsetSelection::shuffled(&t, 50, 1).unwrap();
        let b = SubsetSelection::shuffled(&t, 50, 1).unwrap();
        let c = SubsetSelection::shuffled(&t, 50, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.indices.iter().zip(&c.indices).any(|(x, y)| x != y));
        assert_eq!(a.apply(&t).unwrap().split(), SplitTag::Attacker);
    }

    #[test]
    fn full_take_is_a_permutation() {
        let t = toy(37);
        let s = SubsetSelection::shuffled(&t, 37, 9).unwrap();
        let mut sorted = s.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..37).collect::<Vec<_>>());
        assert!(s.complement(&t).unwrap().is_empty());
    }

    #[test]
    fn empty_or_oversized_request_errors() {
        let t = toy(10);
        assert!(attacker_subset(&t, 0, 1).is_err());
        assert!(attacker_subset(&t, 11, 1).is_err());
    }

    #[test]
    fn balanced_quota() {
        let t = toy(100);
        let s = class_balanced_subset(&t, 25, 3).unwrap();
        let mut counts = [0; 10];
        for &l in s.labels() {
            counts[l as usize] += 1;
        }
        assert_eq!(counts, [3, 3, 3, 3, 3, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn held_out_is_disjoint_complement() {
        let t = toy(30);
        let s = SubsetSelection::shuffled(&t, 12, 4).unwrap();
        let rest = held_out(&t, &s).unwrap();
        assert_eq!(rest.len(), 18);
        let attacker = s.apply(&t).unwrap();
        for (img, _) in rest.iter() {
            assert!(!attacker.images().contains(&img[0]));
        }
    }
}
