//! Straight-through-estimator training of the binarized MLP.
//!
//! Forward passes use `sign(latent)` weights and `sign(bn(z))` activations
//! with the same `sign(0) = +1` convention as inference. Gradients flow
//! through the sign functions only where the latent weight (or BN output)
//! lies inside the clip range.

use log::info;
use matrixmultiply::sgemm;
use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bnn::{evaluate_accuracy, BatchNormParams, BnnLayer, BnnModel, PackedBitMatrix};
use crate::data::{LabeledDataset, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::transform::derive_seed;

/// Layer widths from input to output.
pub const DEFAULT_DIMS: [usize; 5] = [784, 512, 512, 512, 10];

/// Largest attacker set the baseline accepts.
pub const ATTACKER_SAMPLE_LIMIT: usize = 5000;

const ADAM_BETA1: f32 = 0.9;
const ADAM_BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-7;
/// Activation STE passes gradient where `|bn output| <= 1`.
const ACTIVATION_CLIP: f32 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f32,
    pub latent_clip: f32,
    pub bn_momentum: f32,
    pub bn_epsilon: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dims: DEFAULT_DIMS.to_vec(),
            epochs: 10,
            batch_size: 128,
            seed: 0,
            learning_rate: 1e-3,
            latent_clip: 1.0,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer widths {:?}", self.dims)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.latent_clip > 0.0) || !(self.bn_epsilon > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate, latent clip and BN epsilon must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidArgument("BN momentum must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn provenance(&self) -> String {
        format!(
            "ste-adam seed={} epochs={} batch={} lr={} latent_clip={} bn_momentum={} bn_eps={} dims={:?}",
            self.seed,
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.latent_clip,
            self.bn_momentum,
            self.bn_epsilon,
            self.dims
        )
    }
}

#[derive(Clone, Debug, Default)]
struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32, t: i32) {
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Real-valued training state of one layer.
#[derive(Clone, Debug)]
pub struct LatentLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `in_dim x out_dim`.
    pub weights: Vec<f32>,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub binarized_output: bool,
    adam_w: Adam,
    adam_gamma: Adam,
    adam_beta: Adam,
}

#[derive(Clone, Debug)]
pub struct LatentModel {
    pub layers: Vec<LatentLayer>,
    latent_clip: f32,
    step: i32,
}

/// Gradients of the batch loss, one entry per layer.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub weights: Vec<Vec<f32>>,
    pub gamma: Vec<Vec<f32>>,
    pub beta: Vec<Vec<f32>>,
}

struct LayerCache {
    input: Vec<f32>,
    binary_weights: Vec<f32>,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    output: Vec<f32>,
}

#[inline]
fn sign(v: f32) -> f32 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `c = a * b` for row-major `a: m x k`, `b: k x n`, with optional
/// transposes expressed through strides.
#[allow(clippy::too_many_arguments)]
fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    c: &mut [f32],
) {
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the strides address only elements inside `a`, `b` and `c`,
    // whose lengths are m*k, k*n and m*n respectively.
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl LatentModel {
    /// Glorot-uniform latent weights (clipped), unit gamma, zero beta.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
        let last = cfg.dims.len() - 2;
        let layers = cfg
            .dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (in_dim, out_dim) = (w[0], w[1]);
                let limit = (6.0 / (in_dim + out_dim) as f32).sqrt().min(cfg.latent_clip);
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite range");
                LatentLayer {
                    in_dim,
                    out_dim,
                    weights: (0..in_dim * out_dim).map(|_| dist.sample(&mut rng)).collect(),
                    gamma: vec![1.0; out_dim],
                    beta: vec![0.0; out_dim],
                    running_mean: vec![0.0; out_dim],
                    running_var: vec![1.0; out_dim],
                    binarized_output: l != last,
                    adam_w: Adam::new(in_dim * out_dim),
                    adam_gamma: Adam::new(out_dim),
                    adam_beta: Adam::new(out_dim),
                }
            })
            .collect();
        Ok(Self {
            layers,
            latent_clip: cfg.latent_clip,
            step: 0,
        })
    }

    pub fn latent_clip(&self) -> f32 {
        self.latent_clip
    }

    fn forward(
        &mut self,
        input: Vec<f32>,
        batch: usize,
        momentum: Option<f32>,
        epsilon: f32,
    ) -> (Vec<f32>, Vec<LayerCache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for layer in &mut self.layers {
            let (n_in, n_out) = (layer.in_dim, layer.out_dim);
            let wb: Vec<f32> = layer.weights.iter().map(|&w| sign(w)).collect();
            let mut z = vec![0.0f32; batch * n_out];
            matmul(
                batch,
                n_in,
                n_out,
                &x,
                (n_in as isize, 1),
                &wb,
                (n_out as isize, 1),
                &mut z,
            );

            let mut mean = vec![0.0f32; n_out];
            for row in z.chunks_exact(n_out) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= batch as f32);
            let mut var = vec![0.0f32; n_out];
            for row in z.chunks_exact(n_out) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= batch as f32);
            if let Some(mom) = momentum {
                for k in 0..n_out {
                    layer.running_mean[k] = mom * layer.running_mean[k] + (1.0 - mom) * mean[k];
                    layer.running_var[k] = mom * layer.running_var[k] + (1.0 - mom) * var[k];
                }
            }
            let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();
            let mut xhat = z;
            let mut y = vec![0.0f32; batch * n_out];
            for (xr, yr) in xhat.chunks_exact_mut(n_out).zip(y.chunks_exact_mut(n_out)) {
                for k in 0..n_out {
                    xr[k] = (xr[k] - mean[k]) * inv_std[k];
                    yr[k] = layer.gamma[k] * xr[k] + layer.beta[k];
                }
            }
            let next = if layer.binarized_output {
                y.iter().map(|&v| sign(v)).collect()
            } else {
                y.clone()
            };
            caches.push(LayerCache {
                input: std::mem::replace(&mut x, next),
                binary_weights: wb,
                xhat,
                inv_std,
                output: y,
            });
        }
        (x, caches)
    }

    /// Mean softmax cross-entropy and its gradient w.r.t. the logits.
    fn loss_and_grad(logits: &[f32], labels: &[u8], classes: usize) -> (f64, Vec<f32>) {
        let batch = labels.len();
        let mut grad = vec![0.0f32; logits.len()];
        let mut loss = 0.0f64;
        for ((row, g), &label) in logits
            .chunks_exact(classes)
            .zip(grad.chunks_exact_mut(classes))
            .zip(labels)
        {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f32;
            for (gi, &v) in g.iter_mut().zip(row) {
                *gi = (v - max).exp();
                total += *gi;
            }
            for gi in g.iter_mut() {
                *gi /= total;
            }
            loss -= (g[label as usize].max(1e-30) as f64).ln();
            g[label as usize] -= 1.0;
            g.iter_mut().for_each(|gi| *gi /= batch as f32);
        }
        (loss / batch as f64, grad)
    }

    /// Loss and STE gradients for one batch; updates BN running statistics
    /// when `momentum` is given.
    pub fn gradients(
        &mut self,
        input: Vec<f32>,
        labels: &[u8],
        momentum: Option<f32>,
        epsilon: f32,
    ) -> (f64, Gradients) {
        let batch = labels.len();
        let classes = self.layers.last().map_or(0, |l| l.out_dim);
        let (logits, caches) = self.forward(input, batch, momentum, epsilon);
        let (loss, mut dy) = Self::loss_and_grad(&logits, labels, classes);

        let n_layers = self.layers.len();
        let mut grads = Gradients {
            weights: vec![Vec::new(); n_layers],
            gamma: vec![Vec::new(); n_layers],
            beta: vec![Vec::new(); n_layers],
        };
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            let cache = &caches[l];
            let (n_in, n_out) = (layer.in_dim, layer.out_dim);

            let mut dgamma = vec![0.0f32; n_out];
            let mut dbeta = vec![0.0f32; n_out];
            let mut mean_dxhat = vec![0.0f32; n_out];
            let mut mean_dxhat_xhat = vec![0.0f32; n_out];
            for (dr, xr) in dy.chunks_exact(n_out).zip(cache.xhat.chunks_exact(n_out)) {
                for k in 0..n_out {
                    dgamma[k] += dr[k] * xr[k];
                    dbeta[k] += dr[k];
                    let dxhat = dr[k] * layer.gamma[k];
                    mean_dxhat[k] += dxhat;
                    mean_dxhat_xhat[k] += dxhat * xr[k];
                }
            }
            mean_dxhat.iter_mut().for_each(|v| *v /= batch as f32);
            mean_dxhat_xhat.iter_mut().for_each(|v| *v /= batch as f32);
            let mut dz = dy;
            for (dr, xr) in dz.chunks_exact_mut(n_out).zip(cache.xhat.chunks_exact(n_out)) {
                for k in 0..n_out {
                    let dxhat = dr[k] * layer.gamma[k];
                    dr[k] = (dxhat - mean_dxhat[k] - xr[k] * mean_dxhat_xhat[k]) * cache.inv_std[k];
                }
            }

            let mut dw = vec![0.0f32; n_in * n_out];
            matmul(
                n_in,
                batch,
                n_out,
                &cache.input,
                (1, n_in as isize),
                &dz,
                (n_out as isize, 1),
                &mut dw,
            );
            for (g, &w) in dw.iter_mut().zip(&layer.weights) {
                if w.abs() > self.latent_clip {
                    *g = 0.0;
                }
            }

            dy = if l > 0 {
                let mut dx = vec![0.0f32; batch * n_in];
                matmul(
                    batch,
                    n_out,
                    n_in,
                    &dz,
                    (n_out as isize, 1),
                    &cache.binary_weights,
                    (1, n_out as isize),
                    &mut dx,
                );
                for (g, &y) in dx.iter_mut().zip(&caches[l - 1].output) {
                    if y.abs() > ACTIVATION_CLIP {
                        *g = 0.0;
                    }
                }
                dx
            } else {
                Vec::new()
            };
            grads.weights[l] = dw;
            grads.gamma[l] = dgamma;
            grads.beta[l] = dbeta;
        }
        (loss, grads)
    }

    /// One Adam step followed by clipping latent weights into range.
    pub fn apply(&mut self, grads: &Gradients, lr: f32) {
        self.step += 1;
        let clip = self.latent_clip;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.adam_w.step(&mut layer.weights, &grads.weights[l], lr, self.step);
            layer.weights.iter_mut().for_each(|w| *w = w.clamp(-clip, clip));
            layer.adam_gamma.step(&mut layer.gamma, &grads.gamma[l], lr, self.step);
            layer.adam_beta.step(&mut layer.beta, &grads.beta[l], lr, self.step);
        }
    }

    /// Binarizes latent weights and freezes BN running statistics.
    pub fn to_bnn(&self, provenance: String, epsilon: f32) -> Result<BnnModel> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let weights = PackedBitMatrix::from_fn(layer.in_dim, layer.out_dim, |i, j| {
                    if layer.weights[i * layer.out_dim + j] >= 0.0 {
                        1
                    } else {
                        -1
                    }
                });
                let bn = BatchNormParams {
                    gamma: layer.gamma.clone(),
                    beta: layer.beta.clone(),
                    mu: layer.running_mean.clone(),
                    var: layer.running_var.clone(),
                    epsilon,
                };
                BnnLayer::validated(weights, Some(bn), layer.binarized_output, l)
            })
            .collect::<Result<Vec<_>>>()?;
        BnnModel::new(layers, provenance)
    }
}

/// ±1 input rows for the given sample indices.
fn gather_inputs(data: &LabeledDataset, indices: &[usize]) -> (Vec<f32>, Vec<u8>) {
    let pixels = data.pixels_per_image();
    let mut x = Vec::with_capacity(indices.len() * pixels);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        x.extend(data.image(i).iter().map(|&p| if p >= 128 { 1.0f32 } else { -1.0 }));
        labels.push(data.label(i));
    }
    (x, labels)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train_with_report(
    train_set: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(BnnModel, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train_set.pixels_per_image() != cfg.dims[0] {
        return Err(Error::Dimension(format!(
            "images have {} pixels, first layer takes {}",
            train_set.pixels_per_image(),
            cfg.dims[0]
        )));
    }
    if cfg.dims[cfg.dims.len() - 1] != CLASS_COUNT {
        return Err(Error::Dimension(format!(
            "output width must be {CLASS_COUNT}"
        )));
    }
    let mut model = LatentModel::init(cfg)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = gather_inputs(train_set, chunk);
            let (loss, grads) =
                model.gradients(x, &labels, Some(cfg.bn_momentum), cfg.bn_epsilon);
            model.apply(&grads, cfg.learning_rate);
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        info!("epoch {}/{}: mean loss {mean:.4}", epoch + 1, cfg.epochs);
        report.epoch_losses.push(mean);
    }
    let bnn = model.to_bnn(cfg.provenance(), cfg.bn_epsilon)?;
    Ok((bnn, report))
}

pub fn train_model(train_set: &LabeledDataset, cfg: &TrainConfig) -> Result<BnnModel> {
    train_with_report(train_set, cfg).map(|(m, _)| m)
}

#[derive(Clone, Debug)]
pub struct BaselineResult {
    pub model: BnnModel,
    pub held_out_accuracy: f64,
}

/// Trains from scratch on the attacker's labeled samples only and scores
/// the result on `held_out`.
pub fn reverse_engineer_baseline(
    attacker_set: &LabeledDataset,
    held_out: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<BaselineResult> {
    if attacker_set.len() > ATTACKER_SAMPLE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "attacker set has {} samples, limit is {ATTACKER_SAMPLE_LIMIT}",
            attacker_set.len()
        )));
    }
    let model = train_model(attacker_set, cfg)?;
    let held_out_accuracy = evaluate_accuracy(&model, held_out)?;
    Ok(BaselineResult {
        model,
        held_out_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitTag;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            dims: vec![4, 6, 10],
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    fn toy_inputs(batch: usize, seed: u64) -> (Vec<f32>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..batch * 4)
            .map(|_| if rand::Rng::random::<bool>(&mut rng) { 1.0 } else { -1.0 })
            .collect();
        let labels = (0..batch).map(|i| (i % 10) as u8).collect();
        (x, labels)
    }

    #[test]
    fn ste_blocks_gradient_outside_clip() {
        let cfg = tiny_cfg();
        let mut m = LatentModel::init(&cfg).unwrap();
        // Push some latents past the clip without changing their sign.
        for (i, w) in m.layers[0].weights.iter_mut().enumerate() {
            if i % 3 == 0 {
                *w = 1.5 * sign(*w);
            }
        }
        let (x, labels) = toy_inputs(8, 3);
        let (_, g) = m.gradients(x, &labels, None, 1e-5);
        for (i, (&gw, &w)) in g.weights[0].iter().zip(&m.layers[0].weights).enumerate() {
            if i % 3 == 0 {
                assert!(w.abs() > 1.0);
                assert_eq!(gw, 0.0);
            }
        }
        assert!(g.weights[0].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn latent_weights_stay_clipped() {
        let cfg = TrainConfig {
            learning_rate: 0.5,
            ..tiny_cfg()
        };
        let mut m = LatentModel::init(&cfg).unwrap();
        for step in 0..20 {
            let (x, labels) = toy_inputs(8, step);
            let (_, g) = m.gradients(x, &labels, Some(0.9), 1e-5);
            m.apply(&g, cfg.learning_rate);
            for layer in &m.layers {
                assert!(layer.weights.iter().all(|w| w.abs() <= cfg.latent_clip));
            }
        }
    }

    #[test]
    fn weight_gradient_matches_finite_difference_of_linear_part() {
        // With binarization held fixed, dL/dWb equals the float gradient of
        // the same network; check one entry numerically on the output layer.
        let cfg = TrainConfig {
            dims: vec![4, 10],
            ..tiny_cfg()
        };
        let mut m = LatentModel::init(&cfg).unwrap();
        let (x, labels) = toy_inputs(6, 5);
        let (_, g) = m.gradients(x.clone(), &labels, None, 1e-5);
        // Perturb gamma (a continuous parameter) and compare.
        let k = 3;
        let h = 1e-2f32;
        m.layers[0].gamma[k] += h;
        let (lp, _) = m.gradients(x.clone(), &labels, None, 1e-5);
        m.layers[0].gamma[k] -= 2.0 * h;
        let (lm, _) = m.gradients(x, &labels, None, 1e-5);
        let numeric = (lp - lm) / (2.0 * h as f64);
        assert!((numeric - g.gamma[0][k] as f64).abs() < 1e-3, "{numeric} vs {}", g.gamma[0][k]);
    }

    #[test]
    fn deterministic_and_rejects_empty() {
        let images: Vec<u8> = (0..40 * 4).map(|i| ((i * 37) % 256) as u8).collect();
        let labels: Vec<u8> = (0..40).map(|i| (i % 10) as u8).collect();
        let data = LabeledDataset::new(images, labels, 2, 2, SplitTag::Train).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..tiny_cfg()
        };
        let a = train_model(&data, &cfg).unwrap();
        let b = train_model(&data, &cfg).unwrap();
        assert_eq!(crate::bnn::encode_model(&a), crate::bnn::encode_model(&b));
        let empty = LabeledDataset::new(vec![], vec![], 2, 2, SplitTag::Train).unwrap();
        assert!(matches!(train_model(&empty, &cfg), Err(Error::EmptyDataset)));
    }
}
