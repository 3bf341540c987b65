//! Keyed adjacent-neuron swapping of hidden layers.
//!
//! Bit `k` of a layer key exchanges output neurons `2k` and `2k + 1`
//! (weight rows together with gamma, beta, mu and var). The operation is its
//! own inverse, so the same call encrypts and decrypts.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bnn::{BnnLayer, BnnModel, WORD_BITS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PufKey {
    bits: Vec<bool>,
}

/// SplitMix64 finalizer; turns `(base, stream)` into an independent seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl PufKey {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![false; len],
        }
    }

    /// Uniform random key from a seeded ChaCha8 stream.
    pub fn generate(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidArgument("key length must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            bits: (0..len).map(|_| rng.random::<bool>()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, k: usize) -> bool {
        self.bits[k]
    }

    pub fn set(&mut self, k: usize, value: bool) {
        self.bits[k] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Even-position word masks: bit `2k` of the activation vector is set
    /// when pair `k` is swapped.
    pub fn pair_masks(&self) -> Vec<u64> {
        let mut masks = vec![0u64; (2 * self.len()).div_ceil(WORD_BITS)];
        for (k, &b) in self.bits.iter().enumerate() {
            if b {
                masks[2 * k / WORD_BITS] |= 1 << (2 * k % WORD_BITS);
            }
        }
        masks
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        text.parse()
    }
}

impl fmt::Display for PufKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for PufKey {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let body = text
            .strip_suffix("\r\n")
            .or_else(|| text.strip_suffix('\n'))
            .unwrap_or(text);
        if body.is_empty() {
            return Err(Error::KeyParse {
                index: 0,
                reason: "empty key".into(),
            });
        }
        body.chars()
            .enumerate()
            .map(|(index, c)| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::KeyParse {
                    index,
                    reason: format!("unexpected character {other:?}"),
                }),
            })
            .collect::<Result<Vec<_>>>()
            .map(PufKey::new)
    }
}

/// One key per hidden layer, in layer order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeySet {
    keys: Vec<PufKey>,
    shared: bool,
}

impl KeySet {
    pub fn per_layer(keys: Vec<PufKey>) -> Self {
        Self {
            keys,
            shared: false,
        }
    }

    pub fn shared(key: PufKey, layers: usize) -> Self {
        Self {
            keys: vec![key; layers],
            shared: true,
        }
    }

    /// All-zero (identity) keys sized to `model`'s hidden layers.
    pub fn zeros_for(model: &BnnModel) -> Self {
        Self::per_layer(key_lengths(model).into_iter().map(PufKey::zeros).collect())
    }

    /// Random keys for `model`. Shared mode requires equal hidden widths.
    pub fn generate_for(model: &BnnModel, seed: u64, shared: bool) -> Result<Self> {
        let lengths = key_lengths(model);
        if shared {
            let len = common_length(&lengths)?;
            Ok(Self::shared(PufKey::generate(len, seed)?, lengths.len()))
        } else {
            lengths
                .iter()
                .enumerate()
                .map(|(l, &len)| PufKey::generate(len, derive_seed(seed, l as u64)))
                .collect::<Result<Vec<_>>>()
                .map(Self::per_layer)
        }
    }

    pub fn keys(&self) -> &[PufKey] {
        &self.keys
    }

    pub fn key(&self, layer: usize) -> &PufKey {
        &self.keys[layer]
    }

    pub(crate) fn key_mut(&mut self, layer: usize) -> &mut PufKey {
        &mut self.keys[layer]
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    /// One key per line.
    pub fn to_text(&self) -> String {
        self.keys.iter().map(|k| format!("{k}\n")).collect()
    }

    /// Parses one key per nonblank line. The set is marked shared when it
    /// holds more than one line and all lines are identical.
    pub fn from_text(text: &str) -> Result<Self> {
        let keys = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse())
            .collect::<Result<Vec<PufKey>>>()?;
        if keys.is_empty() {
            return Err(Error::KeyParse {
                index: 0,
                reason: "no keys in text".into(),
            });
        }
        let shared = keys.len() > 1 && keys.iter().all(|k| k == &keys[0]);
        Ok(Self { keys, shared })
    }
}

/// Key length `out_dim / 2` of each hidden layer.
pub fn key_lengths(model: &BnnModel) -> Vec<usize> {
    model.layers()[..model.hidden_count()]
        .iter()
        .map(|l| l.out_dim() / 2)
        .collect()
}

pub(crate) fn common_length(lengths: &[usize]) -> Result<usize> {
    match lengths.split_first() {
        Some((&first, rest)) if rest.iter().all(|&l| l == first) => Ok(first),
        Some(_) => Err(Error::InvalidArgument(format!(
            "a shared key needs equal hidden widths, got key lengths {lengths:?}"
        ))),
        None => Err(Error::InvalidArgument("model has no hidden layers".into())),
    }
}

pub fn generate_key(length: usize, seed: u64) -> Result<PufKey> {
    PufKey::generate(length, seed)
}

fn check_layer_key(layer: &BnnLayer, key: &PufKey) -> Result<()> {
    if layer.out_dim() % 2 != 0 {
        return Err(Error::Dimension(format!(
            "layer has odd width {}, cannot pair neurons",
            layer.out_dim()
        )));
    }
    if key.len() != layer.out_dim() / 2 {
        return Err(Error::Dimension(format!(
            "key has {} bits, layer of width {} needs {}",
            key.len(),
            layer.out_dim(),
            layer.out_dim() / 2
        )));
    }
    Ok(())
}

pub(crate) fn swap_in_place(layer: &mut BnnLayer, key: &PufKey) -> Result<()> {
    check_layer_key(layer, key)?;
    for (k, _) in key.bits().iter().enumerate().filter(|(_, &b)| b) {
        layer.swap_neurons(2 * k, 2 * k + 1);
    }
    Ok(())
}

/// Exchanges neurons `2k, 2k+1` for every set key bit.
pub fn apply_swap(layer: &BnnLayer, key: &PufKey) -> Result<BnnLayer> {
    let mut out = layer.clone();
    swap_in_place(&mut out, key)?;
    Ok(out)
}

/// Applies `keys` to every hidden layer; the output layer is left alone.
pub fn encrypt_model(model: &BnnModel, keys: &KeySet) -> Result<BnnModel> {
    if keys.len() != model.hidden_count() {
        return Err(Error::Dimension(format!(
            "{} keys for {} hidden layers",
            keys.len(),
            model.hidden_count()
        )));
    }
    let mut out = model.clone();
    for (layer, key) in out.layers_mut().iter_mut().zip(keys.keys()) {
        swap_in_place(layer, key)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bnn::{random_model, BatchNormParams, PackedBitMatrix};

    fn four_wide() -> BnnLayer {
        let weights = PackedBitMatrix::from_fn(3, 4, |i, j| if (i + j) % 2 == 0 { 1 } else { -1 });
        let bn = BatchNormParams {
            gamma: vec![1.0, 2.0, 3.0, 4.0],
            beta: vec![0.1, 0.2, 0.3, 0.4],
            mu: vec![-1.0, -2.0, -3.0, -4.0],
            var: vec![10.0, 20.0, 30.0, 40.0],
            epsilon: 1e-5,
        };
        BnnLayer::new(weights, Some(bn), true).unwrap()
    }

    #[test]
    fn key_10_swaps_first_pair_only() {
        let layer = four_wide();
        let out = apply_swap(&layer, &"10".parse().unwrap()).unwrap();
        let w = out.weights();
        assert_eq!(w.row(0), layer.weights().row(1));
        assert_eq!(w.row(1), layer.weights().row(0));
        assert_eq!(w.row(2), layer.weights().row(2));
        assert_eq!(w.row(3), layer.weights().row(3));
        let bn = out.bn().unwrap();
        assert_eq!(bn.gamma, vec![2.0, 1.0, 3.0, 4.0]);
        assert_eq!(bn.beta, vec![0.2, 0.1, 0.3, 0.4]);
        assert_eq!(bn.mu, vec![-2.0, -1.0, -3.0, -4.0]);
        assert_eq!(bn.var, vec![20.0, 10.0, 30.0, 40.0]);
    }

    #[test]
    fn zero_key_is_identity_and_errors_are_reported() {
        let layer = four_wide();
        assert_eq!(apply_swap(&layer, &PufKey::zeros(2)).unwrap(), layer);
        assert!(apply_swap(&layer, &PufKey::zeros(3)).is_err());
        let odd = BnnLayer::new(PackedBitMatrix::zeros(2, 3), None, true).unwrap();
        assert!(apply_swap(&odd, &PufKey::zeros(1)).is_err());
    }

    #[test]
    fn text_forms() {
        let k: PufKey = "1010\n".parse().unwrap();
        assert_eq!(k.bits(), &[true, false, true, false]);
        assert_eq!(k.to_text(), "1010");
        match "10a1".parse::<PufKey>() {
            Err(Error::KeyParse { index, .. }) => assert_eq!(index, 2),
            other => panic!("{other:?}"),
        }
        assert!("".parse::<PufKey>().is_err());
        let long = PufKey::generate(256, 5).unwrap();
        assert_eq!(PufKey::from_text(&long.to_text()).unwrap(), long);
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_key(256, 11).unwrap();
        assert_eq!(a.len(), 256);
        assert_eq!(a, generate_key(256, 11).unwrap());
        assert_ne!(a, generate_key(256, 12).unwrap());
        assert!(generate_key(0, 1).is_err());
    }

    #[test]
    fn golden_seed_42() {
        // Frozen from the first run of ChaCha8 seeded with 42.
        let k = generate_key(256, 42).unwrap();
        assert_eq!(k.to_text(), GOLDEN_42);
    }

    const GOLDEN_42: &str = "0101100110100001111011011111110011000000101001100000010111111110001001011000010101111001111110011111000100100010111111001001111010110010000010000101000111010110101011100100001011010000010110011101101000001010110011000100111000100100000111111101100010101010";

    #[test]
    fn keyset_text_and_shared_flag() {
        let m = random_model(&[6, 8, 8, 4], 2);
        let shared = KeySet::generate_for(&m, 9, true).unwrap();
        assert!(shared.is_shared());
        let parsed = KeySet::from_text(&shared.to_text()).unwrap();
        assert_eq!(parsed, shared);
        let per = KeySet::generate_for(&m, 9, false).unwrap();
        assert_ne!(per.key(0), per.key(1));
        assert!(!KeySet::from_text(&per.to_text()).unwrap().is_shared());
    }

    #[test]
    fn model_encryption_is_an_involution_and_skips_output() {
        let m = random_model(&[20, 8, 8, 4], 3);
        let keys = KeySet::generate_for(&m, 1, false).unwrap();
        let enc = encrypt_model(&m, &keys).unwrap();
        assert_ne!(enc, m);
        assert_eq!(enc.layers()[2], m.layers()[2]);
        assert_eq!(encrypt_model(&enc, &keys).unwrap(), m);
        assert_eq!(encrypt_model(&m, &KeySet::zeros_for(&m)).unwrap(), m);
    }

    #[test]
    fn pair_masks_mark_even_bits() {
        let k: PufKey = "1001".parse().unwrap();
        assert_eq!(k.pair_masks(), vec![0b0100_0001]);
    }
}
