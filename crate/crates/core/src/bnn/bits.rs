use crate::error::{Error, Result};

pub const WORD_BITS: usize = 64;

pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask of the valid bits in the last word of a `bits`-long vector.
fn tail_mask(bits: usize) -> u64 {
    match bits % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

#[inline]
pub fn get_bit(words: &[u64], i: usize) -> bool {
    words[i / WORD_BITS] >> (i % WORD_BITS) & 1 == 1
}

#[inline]
pub fn set_bit(words: &mut [u64], i: usize, value: bool) {
    let mask = 1u64 << (i % WORD_BITS);
    if value {
        words[i / WORD_BITS] |= mask;
    } else {
        words[i / WORD_BITS] &= !mask;
    }
}

/// Packs a ±1 vector; zero is treated as +1.
pub fn pack_signs(values: &[i8]) -> Vec<u64> {
    let mut words = vec![0u64; words_for(values.len())];
    for (i, &v) in values.iter().enumerate() {
        set_bit(&mut words, i, v >= 0);
    }
    words
}

pub fn unpack_signs(words: &[u64], len: usize) -> Vec<i8> {
    (0..len).map(|i| if get_bit(words, i) { 1 } else { -1 }).collect()
}

/// Input transform: bit set iff `pixel / 255 >= 0.5`, i.e. `pixel >= 128`.
pub fn binarize_input(image: &[u8], expected_len: usize) -> Result<Vec<u64>> {
    if image.len() != expected_len {
        return Err(Error::Dimension(format!(
            "image has {} pixels, expected {expected_len}",
            image.len()
        )));
    }
    let mut words = vec![0u64; words_for(image.len())];
    binarize_into(image, &mut words);
    Ok(words)
}

pub(crate) fn binarize_into(image: &[u8], out: &mut [u64]) {
    out.fill(0);
    for (i, &p) in image.iter().enumerate() {
        // 127/255 < 0.5 <= 128/255
        if p >= 128 {
            out[i / WORD_BITS] |= 1 << (i % WORD_BITS);
        }
    }
}

/// Binary weight matrix stored one bit-row per output neuron.
///
/// Logical weight `W[i][j]` (input `i`, output `j`) is bit `i` of row `j`;
/// a set bit means +1. Padding bits past `in_dim` are always zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBitMatrix {
    in_dim: usize,
    out_dim: usize,
    words_per_row: usize,
    data: Vec<u64>,
}

impl PackedBitMatrix {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        let words_per_row = words_for(in_dim);
        Self {
            in_dim,
            out_dim,
            words_per_row,
            data: vec![0; words_per_row * out_dim],
        }
    }

    /// Builds from raw row words, rejecting nonzero padding.
    pub fn from_words(in_dim: usize, out_dim: usize, data: Vec<u64>) -> Result<Self> {
        let m = Self {
            in_dim,
            out_dim,
            words_per_row: words_for(in_dim),
            data,
        };
        if m.data.len() != m.words_per_row * out_dim {
            return Err(Error::Dimension(format!(
                "{} words for a {in_dim}x{out_dim} matrix",
                m.data.len()
            )));
        }
        if let Some(row) = m.first_dirty_row() {
            return Err(Error::Format(format!("nonzero padding bits in row {row}")));
        }
        Ok(m)
    }

    pub(crate) fn from_words_unchecked(in_dim: usize, out_dim: usize, data: Vec<u64>) -> Self {
        debug_assert_eq!(data.len(), words_for(in_dim) * out_dim);
        Self {
            in_dim,
            out_dim,
            words_per_row: words_for(in_dim),
            data,
        }
    }

    /// `weight(i, j)` returns the logical ±1 weight from input `i` to output `j`.
    pub fn from_fn(in_dim: usize, out_dim: usize, mut weight: impl FnMut(usize, usize) -> i8) -> Self {
        let mut m = Self::zeros(in_dim, out_dim);
        for j in 0..out_dim {
            let row = m.row_mut(j);
            for i in 0..in_dim {
                set_bit(row, i, weight(i, j) >= 0);
            }
        }
        m
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[u64] {
        &self.data[j * self.words_per_row..(j + 1) * self.words_per_row]
    }

    fn row_mut(&mut self, j: usize) -> &mut [u64] {
        &mut self.data[j * self.words_per_row..(j + 1) * self.words_per_row]
    }

    pub fn weight(&self, input: usize, output: usize) -> i8 {
        if get_bit(self.row(output), input) {
            1
        } else {
            -1
        }
    }

    pub fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        let w = self.words_per_row;
        let (lo, hi) = (a.min(b), a.max(b));
        let (head, tail) = self.data.split_at_mut(hi * w);
        head[lo * w..(lo + 1) * w].swap_with_slice(&mut tail[..w]);
    }

    pub fn first_dirty_row(&self) -> Option<usize> {
        if self.in_dim % WORD_BITS == 0 || self.words_per_row == 0 {
            return None;
        }
        let mask = !tail_mask(self.in_dim);
        (0..self.out_dim).find(|&j| self.row(j)[self.words_per_row - 1] & mask != 0)
    }

    /// Integer pre-activations `a[j] = in_dim - 2 * popcount(row_j ^ x)`.
    pub fn preactivations(&self, x: &[u64]) -> Result<Vec<i32>> {
        if x.len() != self.words_per_row {
            return Err(Error::Dimension(format!(
                "input has {} words, layer expects {}",
                x.len(),
                self.words_per_row
            )));
        }
        if self.in_dim % WORD_BITS != 0 && x[x.len() - 1] & !tail_mask(self.in_dim) != 0 {
            return Err(Error::Dimension("input padding bits must be zero".into()));
        }
        let mut out = vec![0; self.out_dim];
        self.preactivations_into(x, &mut out);
        Ok(out)
    }

    #[inline]
    pub(crate) fn preactivations_into(&self, x: &[u64], out: &mut [i32]) {
        let n = self.in_dim as i32;
        for (row, a) in self.data.chunks_exact(self.words_per_row).zip(out.iter_mut()) {
            *a = n - 2 * mismatches(row, x) as i32;
        }
    }
}

#[inline]
pub(crate) fn mismatches(row: &[u64], x: &[u64]) -> u32 {
    row.iter().zip(x).map(|(r, v)| (r ^ v).count_ones()).sum()
}

/// Exchanges the bits of each adjacent pair `(2k, 2k+1)` selected by
/// `pair_mask` (which has bits only at even positions).
#[inline]
pub fn swap_adjacent_pairs(word: u64, pair_mask: u64) -> u64 {
    const EVEN: u64 = 0x5555_5555_5555_5555;
    let swapped = ((word & EVEN) << 1) | ((word >> 1) & EVEN);
    let full = pair_mask | (pair_mask << 1);
    (word & !full) | (swapped & full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_threshold() {
        assert_eq!(binarize_input(&[0; 784], 784).unwrap(), vec![0; 13]);
        let all = binarize_input(&[255; 784], 784).unwrap();
        assert_eq!(all.iter().map(|w| w.count_ones()).sum::<u32>(), 784);
        let mut img = [0u8; 784];
        img[0] = 127;
        img[1] = 128;
        let b = binarize_input(&img, 784).unwrap();
        assert!(!get_bit(&b, 0));
        assert!(get_bit(&b, 1));
        assert!(binarize_input(&[0; 783], 784).is_err());
    }

    #[test]
    fn tiny_preactivations() {
        let plus = PackedBitMatrix::from_fn(2, 1, |_, _| 1);
        let x = pack_signs(&[1, 1]);
        assert_eq!(plus.preactivations(&x).unwrap(), vec![2]);
        let mixed = PackedBitMatrix::from_fn(2, 1, |i, _| if i == 0 { 1 } else { -1 });
        assert_eq!(mixed.preactivations(&x).unwrap(), vec![0]);
    }

    #[test]
    fn dimension_and_padding_checks() {
        let m = PackedBitMatrix::zeros(3, 2);
        assert!(m.preactivations(&[0, 0]).is_err());
        assert!(m.preactivations(&[0b1000]).is_err());
        assert!(PackedBitMatrix::from_words(3, 1, vec![0b1111]).is_err());
        assert!(PackedBitMatrix::from_words(3, 1, vec![0b111]).is_ok());
    }

    #[test]
    fn pair_swap_word() {
        // bits 0,1 = (1,0) swapped -> (0,1); pair 1 untouched
        assert_eq!(swap_adjacent_pairs(0b0101, 0b0001), 0b0110);
        assert_eq!(swap_adjacent_pairs(0b0101, 0), 0b0101);
        assert_eq!(swap_adjacent_pairs(0b0110, 0b0101), 0b1001);
    }

    #[test]
    fn swap_rows_exchanges_only_targets() {
        let mut m = PackedBitMatrix::from_fn(70, 3, |i, j| if (i + j) % 3 == 0 { 1 } else { -1 });
        let orig = m.clone();
        m.swap_rows(2, 0);
        assert_eq!(m.row(0), orig.row(2));
        assert_eq!(m.row(2), orig.row(0));
        assert_eq!(m.row(1), orig.row(1));
    }
}
