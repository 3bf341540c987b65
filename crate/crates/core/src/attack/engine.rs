//! Candidate evaluation for key search.
//!
//! A trial decryption swaps neuron pairs of a hidden layer, which is the
//! same as permuting that layer's packed activation vector. The evaluator
//! therefore never rebuilds a model: it runs the encrypted model and
//! permutes activations with per-layer pair masks.
//!
//! During a block search only one activation word of the varied layer(s)
//! changes between candidates, so everything up to and including that
//! layer is cached, and the next layer's pre-activations are patched from
//! a cached base by re-counting a single word per neuron.

use rayon::prelude::*;

use crate::bnn::{argmax, swap_adjacent_pairs, words_for, BinarizedSet, BnnLayer, BnnModel};
use crate::transform::KeySet;

/// Pair masks per hidden layer (see [`crate::transform::PufKey::pair_masks`]).
pub(crate) type Masks = Vec<Vec<u64>>;

pub(crate) fn masks_of(keys: &KeySet) -> Masks {
    keys.keys().iter().map(|k| k.pair_masks()).collect()
}

const CHUNK: usize = 250;

fn chunks(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(CHUNK)
        .map(|s| (s, (s + CHUNK).min(n)))
        .collect()
}

/// Which layers take the candidate pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Varying {
    Layer(usize),
    AllHidden,
}

impl Varying {
    fn first(self) -> usize {
        match self {
            Varying::Layer(l) => l,
            Varying::AllHidden => 0,
        }
    }

    fn includes(self, layer: usize) -> bool {
        match self {
            Varying::Layer(l) => l == layer,
            Varying::AllHidden => true,
        }
    }
}

/// Replacement of one mask word in the varied layers.
#[derive(Clone, Copy, Debug)]
struct Override {
    varying: Varying,
    word: usize,
    value: u64,
}

impl Override {
    #[inline]
    fn mask(&self, masks: &Masks, layer: usize, w: usize) -> u64 {
        if w == self.word && self.varying.includes(layer) {
            self.value
        } else {
            masks[layer][w]
        }
    }
}

struct Buffers {
    acts: Vec<Vec<u64>>,
    pre: Vec<i32>,
}

impl Buffers {
    fn new(model: &BnnModel) -> Self {
        let widest = model.layers().iter().map(BnnLayer::out_dim).max().unwrap_or(0);
        Self {
            acts: model.layers()[..model.hidden_count()]
                .iter()
                .map(|l| vec![0; words_for(l.out_dim())])
                .collect(),
            pre: vec![0; widest],
        }
    }
}

#[inline]
fn permute(words: &mut [u64], layer: usize, masks: &Masks, ov: Option<&Override>) {
    for (w, word) in words.iter_mut().enumerate() {
        let m = match ov {
            Some(o) => o.mask(masks, layer, w),
            None => masks[layer][w],
        };
        if m != 0 {
            *word = swap_adjacent_pairs(*word, m);
        }
    }
}

pub(crate) struct Evaluator<'a> {
    model: &'a BnnModel,
    data: &'a BinarizedSet,
}

impl<'a> Evaluator<'a> {
    pub fn new(model: &'a BnnModel, data: &'a BinarizedSet) -> Self {
        Self { model, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Runs hidden layers `from..hidden` on `x` (the already permuted input
    /// to layer `from`) and returns the predicted class.
    fn tail(
        &self,
        from: usize,
        x: &[u64],
        masks: &Masks,
        ov: Option<&Override>,
        buf: &mut Buffers,
    ) -> usize {
        let layers = self.model.layers();
        let hidden = self.model.hidden_count();
        for l in from..hidden {
            let layer = &layers[l];
            let (before, rest) = buf.acts.split_at_mut(l);
            let input = if l == from { x } else { &before[l - 1] };
            let pre = &mut buf.pre[..layer.out_dim()];
            layer.weights().preactivations_into(input, pre);
            layer.pack_activations(pre, &mut rest[0]);
            permute(&mut rest[0], l, masks, ov);
        }
        let out = &layers[hidden];
        let input = if hidden == from { x } else { &buf.acts[hidden - 1] };
        let pre = &mut buf.pre[..out.out_dim()];
        out.weights().preactivations_into(input, pre);
        argmax(pre.iter().enumerate().map(|(k, &a)| out.score(k, a)))
    }

    fn predict(&self, i: usize, masks: &Masks, buf: &mut Buffers) -> usize {
        self.tail(0, self.data.sample(i), masks, None, buf)
    }

    /// Correct predictions of the model decrypted with `masks`.
    pub fn count(&self, masks: &Masks) -> u32 {
        chunks(self.len())
            .into_par_iter()
            .map(|(s, e)| {
                let mut buf = Buffers::new(self.model);
                (s..e)
                    .filter(|&i| self.predict(i, masks, &mut buf) == self.data.labels()[i] as usize)
                    .count() as u32
            })
            .sum()
    }

    /// Unpermuted outputs of layer `layer` for every sample, with the
    /// layers before it decrypted by `masks`.
    fn raw_outputs(&self, layer: usize, masks: &Masks) -> Vec<u64> {
        let target = &self.model.layers()[layer];
        let words = words_for(target.out_dim());
        let parts: Vec<Vec<u64>> = chunks(self.len())
            .into_par_iter()
            .map(|(s, e)| {
                let mut buf = Buffers::new(self.model);
                let mut out = vec![0u64; (e - s) * words];
                for (i, dst) in (s..e).zip(out.chunks_exact_mut(words)) {
                    for l in 0..=layer {
                        let lay = &self.model.layers()[l];
                        let (before, rest) = buf.acts.split_at_mut(l);
                        let input = if l == 0 { self.data.sample(i) } else { &before[l - 1] };
                        let pre = &mut buf.pre[..lay.out_dim()];
                        lay.weights().preactivations_into(input, pre);
                        lay.pack_activations(pre, &mut rest[0]);
                        if l < layer {
                            permute(&mut rest[0], l, masks, None);
                        }
                    }
                    dst.copy_from_slice(&buf.acts[layer]);
                }
                out
            })
            .collect();
        parts.concat()
    }

    /// Prepares a block search over `varying` layers starting from the
    /// guess `masks`.
    pub fn block_search(&self, varying: Varying, masks: &Masks) -> BlockSearch<'_, 'a> {
        let first = varying.first();
        let raw = self.raw_outputs(first, masks);
        let mut search = BlockSearch {
            ev: self,
            varying,
            first,
            words: words_for(self.model.layers()[first].out_dim()),
            raw,
            columns: self.model.layers()[first + 1..]
                .iter()
                .map(|layer| {
                    let w = layer.weights();
                    (0..w.words_per_row())
                        .flat_map(|word| (0..w.out_dim()).map(move |j| w.row(j)[word]))
                        .collect()
                })
                .collect(),
            masks: masks.clone(),
            base: BlockBase::default(),
        };
        search.base = search.full_base();
        search
    }
}

/// Forward state of every sample under the current guess, from the first
/// varied layer onward.
#[derive(Default)]
struct BlockBase {
    /// `acts[d]`: permuted activations of layer `first + d`.
    acts: Vec<Vec<u64>>,
    /// `pre[d]`: pre-activations of layer `first + 1 + d`.
    pre: Vec<Vec<i32>>,
    correct: Vec<bool>,
}

impl BlockBase {
    fn with_depth(depth: usize) -> Self {
        Self {
            acts: vec![Vec::new(); depth],
            pre: vec![Vec::new(); depth],
            correct: Vec::new(),
        }
    }

    fn concat(parts: Vec<BlockBase>, depth: usize) -> Self {
        let mut out = Self::with_depth(depth);
        for part in parts {
            for d in 0..depth {
                out.acts[d].extend(&part.acts[d]);
                out.pre[d].extend(&part.pre[d]);
            }
            out.correct.extend(part.correct);
        }
        out
    }
}

/// One changed activation word: index, value under the guess, new value.
type Change = (usize, u64, u64);

struct SampleScratch {
    pre: Vec<i32>,
    acts: Vec<u64>,
    changed: Vec<Change>,
    next: Vec<Change>,
}

pub(crate) struct BlockSearch<'e, 'a> {
    ev: &'e Evaluator<'a>,
    varying: Varying,
    first: usize,
    words: usize,
    /// Unpermuted outputs of the first varied layer.
    raw: Vec<u64>,
    /// Weights of each later layer, word-major: `columns[d][w * out + j]`
    /// is word `w` of neuron `j`'s row in layer `first + 1 + d`.
    columns: Vec<Vec<u64>>,
    masks: Masks,
    base: BlockBase,
}

impl BlockSearch<'_, '_> {
    fn raw(&self, i: usize) -> &[u64] {
        &self.raw[i * self.words..(i + 1) * self.words]
    }

    fn depth(&self) -> usize {
        self.ev.model.hidden_count() - self.first
    }

    fn scratch(&self) -> SampleScratch {
        let widest = self.ev.model.layers().iter().map(BnnLayer::out_dim).max().unwrap_or(0);
        SampleScratch {
            pre: vec![0; widest],
            acts: vec![0; words_for(widest)],
            changed: Vec::new(),
            next: Vec::new(),
        }
    }

    fn full_base(&self) -> BlockBase {
        let ev = self.ev;
        let layers = ev.model.layers();
        let depth = self.depth();
        let parts: Vec<BlockBase> = chunks(ev.len())
            .into_par_iter()
            .map(|(s, e)| {
                let mut part = BlockBase::with_depth(depth);
                for i in s..e {
                    let mut h = self.raw(i).to_vec();
                    permute(&mut h, self.first, &self.masks, None);
                    for d in 0..depth {
                        let layer = &layers[self.first + 1 + d];
                        let mut pre = vec![0i32; layer.out_dim()];
                        layer.weights().preactivations_into(&h, &mut pre);
                        part.acts[d].extend_from_slice(&h);
                        if d + 1 == depth {
                            let class = argmax(pre.iter().enumerate().map(|(k, &a)| layer.score(k, a)));
                            part.correct.push(class == ev.data.labels()[i] as usize);
                        } else {
                            h = vec![0u64; words_for(layer.out_dim())];
                            layer.pack_activations(&pre, &mut h);
                            permute(&mut h, self.first + 1 + d, &self.masks, None);
                        }
                        part.pre[d].extend(pre);
                    }
                }
                part
            })
            .collect();
        BlockBase::concat(parts, depth)
    }

    /// Whether sample `i` is classified correctly with mask word `ov.word`
    /// of the varied layers set to `ov.value`.
    ///
    /// Starts from the cached state and pushes only the activation words
    /// that differ from it through the rest of the network. With `record`,
    /// the sample's full new state is appended there.
    fn sample(
        &self,
        i: usize,
        ov: &Override,
        sc: &mut SampleScratch,
        mut record: Option<&mut BlockBase>,
    ) -> bool {
        let base = &self.base;
        let n = self.ev.len();
        let layers = self.ev.model.layers();
        let hidden = self.ev.model.hidden_count();
        let per_layer = self.varying != Varying::AllHidden;
        let label = self.ev.data.labels()[i] as usize;

        let w0 = self.words;
        let old = base.acts[0][i * w0 + ov.word];
        let new = swap_adjacent_pairs(self.raw(i)[ov.word], ov.value);
        sc.changed.clear();
        if new != old {
            sc.changed.push((ov.word, old, new));
        }
        if let Some(rec) = record.as_deref_mut() {
            let start = rec.acts[0].len();
            rec.acts[0].extend_from_slice(&base.acts[0][i * w0..(i + 1) * w0]);
            rec.acts[0][start + ov.word] = new;
        }

        // Depth from which the cached state is still valid.
        let mut keep_from = None;
        for l in self.first + 1..=hidden {
            let d = l - self.first - 1;
            if sc.changed.is_empty() && per_layer {
                keep_from = Some(d);
                break;
            }
            let layer = &layers[l];
            let out = layer.out_dim();
            let base_pre = &base.pre[d][i * out..(i + 1) * out];
            let pre = &mut sc.pre[..out];
            pre.copy_from_slice(base_pre);
            for &(w, o, n) in &sc.changed {
                let flipped = o ^ n;
                let f = flipped.count_ones() as i32;
                let column = &self.columns[d][w * out..(w + 1) * out];
                for (p, &row) in pre.iter_mut().zip(column) {
                    // bits of `flipped` that agreed before now disagree
                    let agreed = (!(row ^ o) & flipped).count_ones() as i32;
                    *p += 2 * (f - 2 * agreed);
                }
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.pre[d].extend_from_slice(pre);
            }
            if l == hidden {
                let ok = if sc.changed.is_empty() {
                    base.correct[i]
                } else {
                    argmax(pre.iter().enumerate().map(|(k, &a)| layer.score(k, a))) == label
                };
                if let Some(rec) = record {
                    rec.correct.push(ok);
                }
                return ok;
            }
            let words = words_for(out);
            let base_acts = &base.acts[d + 1][i * words..(i + 1) * words];
            let acts = &mut sc.acts[..words];
            sc.next.clear();
            if sc.changed.is_empty() {
                // Same activations, only this layer's mask word differs.
                acts.copy_from_slice(base_acts);
                let delta = self.masks[l][ov.word] ^ ov.mask(&self.masks, l, ov.word);
                acts[ov.word] = swap_adjacent_pairs(acts[ov.word], delta);
                if acts[ov.word] != base_acts[ov.word] {
                    sc.next.push((ov.word, base_acts[ov.word], acts[ov.word]));
                }
            } else {
                layer.pack_activations(pre, acts);
                permute(acts, l, &self.masks, Some(ov));
                sc.next.extend(
                    acts.iter()
                        .zip(base_acts)
                        .enumerate()
                        .filter(|(_, (a, b))| a != b)
                        .map(|(w, (&a, &b))| (w, b, a)),
                );
            }
            if let Some(rec) = record.as_deref_mut() {
                rec.acts[d + 1].extend_from_slice(acts);
            }
            std::mem::swap(&mut sc.changed, &mut sc.next);
        }

        let k = keep_from.expect("the loop returns at the output layer");
        if let Some(rec) = record {
            for d in k..self.depth() {
                if d > k {
                    let w = base.acts[d].len() / n;
                    rec.acts[d].extend_from_slice(&base.acts[d][i * w..(i + 1) * w]);
                }
                let out = base.pre[d].len() / n;
                rec.pre[d].extend_from_slice(&base.pre[d][i * out..(i + 1) * out]);
            }
            rec.correct.push(base.correct[i]);
        }
        base.correct[i]
    }

    /// Correct counts for each candidate value of mask word `word` of the
    /// varied layers, all other mask words held at the current guess.
    pub fn evaluate(&self, word: usize, candidates: &[u64]) -> Vec<u32> {
        let sample_chunks = chunks(self.ev.len());
        let jobs: Vec<(usize, (usize, usize))> = (0..candidates.len())
            .flat_map(|c| sample_chunks.iter().map(move |&r| (c, r)))
            .collect();
        let current = self.current(word);
        let counts: Vec<(usize, u32)> = jobs
            .into_par_iter()
            .map(|(c, (s, e))| {
                if candidates[c] == current {
                    let n = self.base.correct[s..e].iter().filter(|&&ok| ok).count();
                    return (c, n as u32);
                }
                let ov = Override {
                    varying: self.varying,
                    word,
                    value: candidates[c],
                };
                let mut sc = self.scratch();
                let n = (s..e).filter(|&i| self.sample(i, &ov, &mut sc, None)).count();
                (c, n as u32)
            })
            .collect();
        let mut totals = vec![0u32; candidates.len()];
        for (c, n) in counts {
            totals[c] += n;
        }
        totals
    }

    /// Current mask word `word` of the varied layers.
    pub fn current(&self, word: usize) -> u64 {
        self.masks[self.first][word]
    }

    /// Fixes mask word `word` of the varied layers to `value`.
    pub fn commit(&mut self, word: usize, value: u64) {
        if self.current(word) == value {
            return;
        }
        let ov = Override {
            varying: self.varying,
            word,
            value,
        };
        let depth = self.depth();
        let parts: Vec<BlockBase> = chunks(self.ev.len())
            .into_par_iter()
            .map(|(s, e)| {
                let mut sc = self.scratch();
                let mut part = BlockBase::with_depth(depth);
                for i in s..e {
                    self.sample(i, &ov, &mut sc, Some(&mut part));
                }
                part
            })
            .collect();
        self.base = BlockBase::concat(parts, depth);
        for (l, m) in self.masks.iter_mut().enumerate() {
            if self.varying.includes(l) && word < m.len() {
                m[word] = value;
            }
        }
    }

    /// Correct count under the current guess.
    pub fn correct(&self) -> u32 {
        self.base.correct.iter().filter(|&&c| c).count() as u32
    }
}
