//! Sign binarization, the clipped straight-through estimator, and bit packing.
//!
//! Packed encoding: element `i` of a ±1 vector lives at bit `i % 64` of word
//! `i / 64`; a set bit means +1, a clear bit means −1. Bits past `nbits` are
//! always zero.

use std::io::Read;

use crate::autodiff::{read_exact, read_u32};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const WORD_BITS: usize = 64;

/// `+1` where `x >= 0`, `-1` otherwise (so `sign(0) = +1`).
#[inline]
pub fn sign(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn sign_binarize(x: &Tensor) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|&v| sign(v)).collect()).expect("same shape")
}

/// Clipped straight-through gradient: passes `upstream` where `|input| <= 1`.
pub fn ste_backward(upstream: &Tensor, input: &Tensor) -> Result<Tensor> {
    if upstream.shape() != input.shape() {
        return Err(Error::shape(format!(
            "ste_backward: gradient {:?} vs input {:?}",
            upstream.shape(),
            input.shape()
        )));
    }
    Tensor::new(input.shape(), ste_backward_slice(upstream.data(), input.data()))
}

pub(crate) fn ste_backward_slice(upstream: &[f32], input: &[f32]) -> Vec<f32> {
    upstream
        .iter()
        .zip(input)
        .map(|(&g, &x)| if x.abs() <= 1.0 { g } else { 0.0 })
        .collect()
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitVector {
    nbits: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for BitVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BitVector({}b, ", self.nbits)?;
        for b in self.to_bytes() {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

impl BitVector {
    pub fn zeros(nbits: usize) -> Self {
        BitVector {
            nbits,
            words: vec![0; nbits.div_ceil(WORD_BITS)],
        }
    }

    /// Builds from booleans, `true` meaning +1.
    pub fn from_bools(bits: impl IntoIterator<Item = bool>) -> Self {
        let mut words = Vec::new();
        let mut nbits = 0;
        for b in bits {
            if nbits % WORD_BITS == 0 {
                words.push(0);
            }
            if b {
                words[nbits / WORD_BITS] |= 1 << (nbits % WORD_BITS);
            }
            nbits += 1;
        }
        BitVector { nbits, words }
    }

    pub fn len(&self) -> usize {
        self.nbits
    }

    pub fn is_empty(&self) -> bool {
        self.nbits == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.nbits);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.nbits, "bit {i} out of 0..{}", self.nbits);
        let mask = 1u64 << (i % WORD_BITS);
        if value {
            self.words[i / WORD_BITS] |= mask;
        } else {
            self.words[i / WORD_BITS] &= !mask;
        }
    }

    pub fn complement(&self) -> BitVector {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(self.nbits);
        }
        BitVector {
            nbits: self.nbits,
            words,
        }
    }

    /// Payload bytes, little-endian bit order, `ceil(nbits / 8)` of them.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.nbits.div_ceil(8);
        self.words
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(n)
            .collect()
    }

    pub fn from_bytes(nbits: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != nbits.div_ceil(8) {
            return Err(Error::Format(format!(
                "{nbits} bits need {} bytes, got {}",
                nbits.div_ceil(8),
                bytes.len()
            )));
        }
        let mut words = vec![0u64; nbits.div_ceil(WORD_BITS)];
        for (i, &b) in bytes.iter().enumerate() {
            words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        if let Some(last) = words.last() {
            if last & !tail_mask(nbits) != 0 {
                return Err(Error::Format("padding bits must be zero".into()));
            }
        }
        Ok(BitVector { nbits, words })
    }

    /// `nbits` as u32 LE, then the payload bytes.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = (self.nbits as u32).to_le_bytes().to_vec();
        out.extend(self.to_bytes());
        out
    }

    pub fn deserialize<R: Read>(r: &mut R) -> Result<Self> {
        let nbits = read_u32(r, "bit count")? as usize;
        let mut payload = vec![0u8; nbits.div_ceil(8)];
        read_exact(r, &mut payload, "bit payload")?;
        Self::from_bytes(nbits, &payload)
    }
}

/// Mask selecting the live bits of the final word.
#[inline]
fn tail_mask(nbits: usize) -> u64 {
    match nbits % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Packs a ±1 slice; any other value is rejected.
pub fn pack(values: &[f32]) -> Result<BitVector> {
    if let Some((i, v)) = values.iter().enumerate().find(|(_, &v)| v != 1.0 && v != -1.0) {
        return Err(Error::invalid(format!("pack: element {i} is {v}, expected ±1")));
    }
    Ok(BitVector::from_bools(values.iter().map(|&v| v == 1.0)))
}

pub fn unpack(b: &BitVector) -> Vec<f32> {
    (0..b.len()).map(|i| if b.get(i) { 1.0 } else { -1.0 }).collect()
}

/// `Σ a[i]·b[i]` under ±1 semantics, as `nbits − 2·popcount(a XOR b)`.
pub fn binary_dot(a: &BitVector, b: &BitVector) -> Result<i32> {
    if a.nbits != b.nbits {
        return Err(Error::shape(format!(
            "binary_dot: {} bits vs {} bits",
            a.nbits, b.nbits
        )));
    }
    Ok(binary_dot_words(&a.words, &b.words, a.nbits))
}

#[inline]
pub(crate) fn binary_dot_words(a: &[u64], b: &[u64], nbits: usize) -> i32 {
    let mut diff = 0u32;
    let last = a.len().saturating_sub(1);
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let mut d = x ^ y;
        if i == last {
            d &= tail_mask(nbits);
        }
        diff += d.count_ones();
    }
    nbits as i32 - 2 * diff as i32
}

/// Rows of equal-length bit vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedMatrix {
    row_bits: usize,
    rows: Vec<BitVector>,
}

impl PackedMatrix {
    pub fn new(row_bits: usize, rows: Vec<BitVector>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.len() != row_bits) {
            return Err(Error::shape(format!(
                "packed row has {} bits, expected {row_bits}",
                r.len()
            )));
        }
        Ok(PackedMatrix { row_bits, rows })
    }

    /// Packs the signs of a real `[rows, cols]` matrix.
    pub fn from_signs(m: &Tensor) -> Result<Self> {
        if m.rank() != 2 {
            return Err(Error::shape(format!("expected a matrix, got {:?}", m.shape())));
        }
        let cols = m.shape()[1];
        let rows = m
            .data()
            .chunks_exact(cols)
            .map(|row| BitVector::from_bools(row.iter().map(|&v| v >= 0.0)))
            .collect();
        Self::new(cols, rows)
    }

    pub fn rows(&self) -> &[BitVector] {
        &self.rows
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn row_bits(&self) -> usize {
        self.row_bits
    }

    /// Bytes needed for the packed payload of all rows.
    pub fn payload_bytes(&self) -> usize {
        self.rows.len() * self.row_bits.div_ceil(8)
    }

    /// `binary_dot` of every row with `x`.
    pub fn matvec(&self, x: &BitVector) -> Result<Vec<i32>> {
        if x.len() != self.row_bits {
            return Err(Error::shape(format!(
                "matvec: input has {} bits, rows have {}",
                x.len(),
                self.row_bits
            )));
        }
        Ok(self
            .rows
            .iter()
            .map(|r| binary_dot_words(&r.words, &x.words, self.row_bits))
            .collect())
    }
}
