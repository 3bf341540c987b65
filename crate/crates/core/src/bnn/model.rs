use rayon::prelude::*;

use super::bits::{binarize_into, words_for, PackedBitMatrix, WORD_BITS};
use super::bn::{BatchNormParams, Threshold};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BnnLayer {
    weights: PackedBitMatrix,
    bn: Option<BatchNormParams>,
    binarized_output: bool,
    thresholds: Vec<Threshold>,
}

impl BnnLayer {
    pub fn new(
        weights: PackedBitMatrix,
        bn: Option<BatchNormParams>,
        binarized_output: bool,
    ) -> Result<Self> {
        Self::validated(weights, bn, binarized_output, 0)
    }

    pub(crate) fn validated(
        weights: PackedBitMatrix,
        bn: Option<BatchNormParams>,
        binarized_output: bool,
        index: usize,
    ) -> Result<Self> {
        if let Some(row) = weights.first_dirty_row() {
            return Err(Error::Invariant {
                layer: index,
                index: row,
                what: "nonzero padding bits".into(),
            });
        }
        if let Some(bn) = &bn {
            bn.validate(index, weights.out_dim())?;
        }
        let thresholds = if binarized_output {
            (0..weights.out_dim())
                .map(|k| match &bn {
                    Some(bn) => Threshold::compile(bn, k, weights.in_dim()),
                    None => Threshold::AtLeast(0),
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            weights,
            bn,
            binarized_output,
            thresholds,
        })
    }

    pub fn weights(&self) -> &PackedBitMatrix {
        &self.weights
    }

    pub fn bn(&self) -> Option<&BatchNormParams> {
        self.bn.as_ref()
    }

    pub fn binarized_output(&self) -> bool {
        self.binarized_output
    }

    pub fn in_dim(&self) -> usize {
        self.weights.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.out_dim()
    }

    /// Exchanges output neurons `a` and `b`: weight rows and every BN entry.
    pub fn swap_neurons(&mut self, a: usize, b: usize) {
        self.weights.swap_rows(a, b);
        if let Some(bn) = &mut self.bn {
            bn.swap(a, b);
        }
        if !self.thresholds.is_empty() {
            self.thresholds.swap(a, b);
        }
    }

    /// Reference activation for neuron `k` (no fused threshold).
    pub fn reference_sign(&self, k: usize, a: i32) -> bool {
        match &self.bn {
            Some(bn) => bn.sign(k, a),
            None => a >= 0,
        }
    }

    #[inline]
    pub(crate) fn fire(&self, k: usize, a: i32) -> bool {
        match &self.bn {
            Some(bn) => self.thresholds[k].fire(bn, k, a),
            None => a >= 0,
        }
    }

    #[inline]
    pub(crate) fn score(&self, k: usize, a: i32) -> f64 {
        match &self.bn {
            Some(bn) => bn.affine(k, a),
            None => a as f64,
        }
    }

    /// Packs the activations of `preacts` into `out` (which must be zeroed
    /// to the right length by the caller).
    #[inline]
    pub(crate) fn pack_activations(&self, preacts: &[i32], out: &mut [u64]) {
        out.fill(0);
        for (k, &a) in preacts.iter().enumerate() {
            if self.fire(k, a) {
                out[k / WORD_BITS] |= 1 << (k % WORD_BITS);
            }
        }
    }
}

/// Index of the largest score; the lowest index wins ties.
#[inline]
pub fn argmax(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (k, s) in scores.into_iter().enumerate() {
        if s > best_score {
            best = k;
            best_score = s;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnnModel {
    layers: Vec<BnnLayer>,
    provenance: String,
}

impl BnnModel {
    pub fn new(layers: Vec<BnnLayer>, provenance: impl Into<String>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("model needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension(format!(
                    "layer {l} outputs {} but layer {} takes {}",
                    pair[0].out_dim(),
                    l + 1,
                    pair[1].in_dim()
                )));
            }
            if !pair[0].binarized_output() {
                return Err(Error::Dimension(format!(
                    "layer {l} is not binarized but is followed by another layer"
                )));
            }
        }
        if layers.last().is_some_and(BnnLayer::binarized_output) {
            return Err(Error::Dimension("output layer must not be binarized".into()));
        }
        Ok(Self {
            layers,
            provenance: provenance.into(),
        })
    }

    pub fn layers(&self) -> &[BnnLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [BnnLayer] {
        &mut self.layers
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn class_count(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Number of binarized (encryptable) layers preceding the output layer.
    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn predict(&self, image: &[u8]) -> Result<usize> {
        if image.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "image has {} pixels, model expects {}",
                image.len(),
                self.input_dim()
            )));
        }
        let mut scratch = Scratch::new(self);
        binarize_into(image, &mut scratch.input);
        Ok(scratch.classify(self))
    }

    /// Predicts from an already binarized input vector.
    pub fn predict_bits(&self, input: &[u64]) -> usize {
        let mut scratch = Scratch::new(self);
        scratch.input.copy_from_slice(input);
        scratch.classify(self)
    }
}

/// Reusable per-thread buffers for a forward pass.
pub(crate) struct Scratch {
    pub input: Vec<u64>,
    acts: Vec<Vec<u64>>,
    preacts: Vec<i32>,
}

impl Scratch {
    pub fn new(model: &BnnModel) -> Self {
        let widest = model.layers.iter().map(BnnLayer::out_dim).max().unwrap_or(0);
        Self {
            input: vec![0; words_for(model.input_dim())],
            acts: model.layers[..model.hidden_count()]
                .iter()
                .map(|l| vec![0; words_for(l.out_dim())])
                .collect(),
            preacts: vec![0; widest],
        }
    }

    pub fn classify(&mut self, model: &BnnModel) -> usize {
        let hidden = model.hidden_count();
        for l in 0..hidden {
            let layer = &model.layers[l];
            let pre = &mut self.preacts[..layer.out_dim()];
            let x = if l == 0 { &self.input } else { &self.acts[l - 1] };
            layer.weights.preactivations_into(x, pre);
            layer.pack_activations(pre, &mut self.acts[l]);
        }
        let out = &model.layers[hidden];
        let pre = &mut self.preacts[..out.out_dim()];
        let x = if hidden == 0 { &self.input } else { &self.acts[hidden - 1] };
        out.weights.preactivations_into(x, pre);
        argmax(pre.iter().enumerate().map(|(k, &a)| out.score(k, a)))
    }
}

/// Samples binarized once for repeated evaluation.
#[derive(Clone, Debug)]
pub struct BinarizedSet {
    words_per_sample: usize,
    bits: Vec<u64>,
    labels: Vec<u8>,
}

impl BinarizedSet {
    pub fn new(data: &LabeledDataset) -> Self {
        let words_per_sample = words_for(data.pixels_per_image());
        let mut bits = vec![0u64; words_per_sample * data.len()];
        for (chunk, (img, _)) in bits.chunks_exact_mut(words_per_sample).zip(data.iter()) {
            binarize_into(img, chunk);
        }
        Self {
            words_per_sample,
            bits,
            labels: data.labels().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn words_per_sample(&self) -> usize {
        self.words_per_sample
    }

    #[inline]
    pub fn sample(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words_per_sample..(i + 1) * self.words_per_sample]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

const CHUNK: usize = 256;

/// Number of correctly classified samples. Integer reduction, so the result
/// does not depend on how rayon splits the work.
pub fn correct_count_binarized(model: &BnnModel, set: &BinarizedSet) -> Result<usize> {
    if set.words_per_sample() != words_for(model.input_dim()) {
        return Err(Error::Dimension(format!(
            "samples have {} words, model expects {}",
            set.words_per_sample(),
            words_for(model.input_dim())
        )));
    }
    let starts: Vec<usize> = (0..set.len()).step_by(CHUNK).collect();
    Ok(starts
        .into_par_iter()
        .map(|start| {
            let mut scratch = Scratch::new(model);
            (start..(start + CHUNK).min(set.len()))
                .filter(|&i| {
                    scratch.input.copy_from_slice(set.sample(i));
                    scratch.classify(model) == set.labels()[i] as usize
                })
                .count()
        })
        .sum())
}

pub fn correct_count(model: &BnnModel, data: &LabeledDataset) -> Result<usize> {
    if data.pixels_per_image() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "images have {} pixels, model expects {}",
            data.pixels_per_image(),
            model.input_dim()
        )));
    }
    correct_count_binarized(model, &BinarizedSet::new(data))
}

pub fn evaluate_accuracy(model: &BnnModel, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(correct_count(model, data)? as f64 / data.len() as f64)
}
