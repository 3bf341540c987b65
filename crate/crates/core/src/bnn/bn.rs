use crate::error::{Error, Result};

/// Per-neuron batch-norm statistics and affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mu: Vec<f32>,
    pub var: Vec<f32>,
    pub epsilon: f32,
}

const GAMMA_FLOOR: f64 = 1e-12;

impl BatchNormParams {
    pub fn identity(len: usize, epsilon: f32) -> Self {
        Self {
            gamma: vec![1.0; len],
            beta: vec![0.0; len],
            mu: vec![0.0; len],
            var: vec![1.0; len],
            epsilon,
        }
    }

    pub fn len(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }

    /// `layer` is only used to label errors.
    pub fn validate(&self, layer: usize, expected_len: usize) -> Result<()> {
        for (name, arr) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("mu", &self.mu),
            ("var", &self.var),
        ] {
            if arr.len() != expected_len {
                return Err(Error::Dimension(format!(
                    "layer {layer}: {name} has {} entries, expected {expected_len}",
                    arr.len()
                )));
            }
            if let Some(index) = arr.iter().position(|v| !v.is_finite()) {
                return Err(Error::Invariant {
                    layer,
                    index,
                    what: format!("{name} is not finite"),
                });
            }
        }
        if let Some(index) = self.var.iter().position(|&v| v < 0.0) {
            return Err(Error::Invariant {
                layer,
                index,
                what: format!("var = {} < 0", self.var[index]),
            });
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Invariant {
                layer,
                index: 0,
                what: format!("epsilon = {} must be > 0", self.epsilon),
            });
        }
        Ok(())
    }

    /// `gamma * (a - mu) / sqrt(var + eps) + beta`, evaluated in f64.
    #[inline]
    pub fn affine(&self, k: usize, a: i32) -> f64 {
        let scale = (self.var[k] as f64 + self.epsilon as f64).sqrt();
        self.gamma[k] as f64 * (a as f64 - self.mu[k] as f64) / scale + self.beta[k] as f64
    }

    /// Reference hidden activation: `true` is +1. `sign(0) = +1`.
    #[inline]
    pub fn sign(&self, k: usize, a: i32) -> bool {
        self.affine(k, a) >= 0.0
    }

    pub fn swap(&mut self, a: usize, b: usize) {
        self.gamma.swap(a, b);
        self.beta.swap(a, b);
        self.mu.swap(a, b);
        self.var.swap(a, b);
    }
}

/// Integer form of the BN-then-sign step for one neuron.
///
/// Built by searching the reference formula over the reachable
/// pre-activation range, so it agrees with [`BatchNormParams::sign`] on every
/// integer input in `[-in_dim, in_dim]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Threshold {
    /// +1 iff `a >= t`.
    AtLeast(i32),
    /// +1 iff `a <= t`.
    AtMost(i32),
    /// Scale too close to zero; evaluate the reference formula.
    Reference,
}

impl Threshold {
    pub fn compile(bn: &BatchNormParams, k: usize, in_dim: usize) -> Self {
        let gamma = bn.gamma[k] as f64;
        if gamma.abs() < GAMMA_FLOOR {
            return Threshold::Reference;
        }
        let n = in_dim as i32;
        if gamma > 0.0 {
            // smallest a in [-n, n+1] with sign(a) = +1; n+1 means never
            let (mut lo, mut hi) = (-n, n + 1);
            while lo < hi {
                let mid = lo + (hi - lo) / 2;
                if bn.sign(k, mid) {
                    hi = mid;
                } else {
                    lo = mid + 1;
                }
            }
            Threshold::AtLeast(lo)
        } else {
            // largest a in [-n-1, n] with sign(a) = +1; -n-1 means never
            let (mut lo, mut hi) = (-n - 1, n);
            while lo < hi {
                let mid = lo + (hi - lo + 1) / 2;
                if bn.sign(k, mid) {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            Threshold::AtMost(lo)
        }
    }

    #[inline]
    pub fn fire(self, bn: &BatchNormParams, k: usize, a: i32) -> bool {
        match self {
            Threshold::AtLeast(t) => a >= t,
            Threshold::AtMost(t) => a <= t,
            Threshold::Reference => bn.sign(k, a),
        }
    }
}
