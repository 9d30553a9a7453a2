//! Exact integer convolution computed as
//! `sum_{m,n} 2^(m+n) * bitcount(c_m(I) AND c_n(W))` over packed bit planes.
//!
//! Inputs are unsigned. Weights are sign-magnitude: the magnitude planes go
//! through the AND/bitcount datapath and each bitcount is split by the sign of
//! the element-wise product, the negative part being subtracted.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerShape, QuantSpec};

pub const MAX_BITS: u32 = 31;

/// Bit planes of a fixed-point tensor. Plane `m` is a packed bitset of the
/// `m`-th magnitude bit of every element, in row-major element order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitPlaneTensor {
    len: usize,
    bits: u32,
    frac_bits: u32,
    words: usize,
    planes: Vec<u64>,
    /// Set where the element is negative; empty when unsigned.
    sign: Vec<u64>,
}

fn words_for(len: usize) -> usize {
    len.div_ceil(64).max(1)
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::Config(format!("bit width {bits} outside 1..={MAX_BITS}")));
    }
    Ok(())
}

fn check_range(x: &[i64], bits: u32, signed: bool, offset: usize) -> Result<()> {
    let limit = 1i64 << bits;
    for (i, &v) in x.iter().enumerate() {
        let ok = if signed { v.unsigned_abs() < limit as u64 } else { (0..limit).contains(&v) };
        if !ok {
            return Err(Error::Range { index: offset + i, value: v, bits });
        }
    }
    Ok(())
}

impl BitPlaneTensor {
    fn empty(len: usize, bits: u32, signed: bool) -> Self {
        let words = words_for(len);
        BitPlaneTensor {
            len,
            bits,
            frac_bits: 0,
            words,
            planes: vec![0; words * bits as usize],
            sign: if signed { vec![0; words] } else { Vec::new() },
        }
    }

    /// Overwrites the planes with `x`, which must already be in range.
    fn fill(&mut self, x: impl Iterator<Item = i64>) {
        self.planes.fill(0);
        self.sign.fill(0);
        let signed = self.is_signed();
        for (i, v) in x.enumerate() {
            let (word, bit) = (i / 64, 1u64 << (i % 64));
            let mut mag = v.unsigned_abs();
            if signed && v < 0 {
                self.sign[word] |= bit;
            }
            let mut m = 0;
            while mag != 0 {
                if mag & 1 != 0 {
                    self.planes[m * self.words + word] |= bit;
                }
                mag >>= 1;
                m += 1;
            }
        }
    }

    pub fn with_frac_bits(mut self, frac_bits: u32) -> Self {
        self.frac_bits = frac_bits;
        self
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of magnitude planes.
    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn is_signed(&self) -> bool {
        !self.sign.is_empty()
    }

    pub fn plane(&self, m: u32) -> &[u64] {
        let m = m as usize;
        &self.planes[m * self.words..(m + 1) * self.words]
    }

    pub fn bit(&self, m: u32, i: usize) -> bool {
        self.plane(m)[i / 64] >> (i % 64) & 1 != 0
    }

    pub fn is_negative(&self, i: usize) -> bool {
        self.is_signed() && self.sign[i / 64] >> (i % 64) & 1 != 0
    }

    fn sign_word(&self, k: usize) -> u64 {
        if self.sign.is_empty() {
            0
        } else {
            self.sign[k]
        }
    }

    pub fn recompose(&self) -> Vec<i64> {
        (0..self.len)
            .map(|i| {
                let mag: i64 = (0..self.bits).filter(|&m| self.bit(m, i)).map(|m| 1i64 << m).sum();
                if self.is_negative(i) {
                    -mag
                } else {
                    mag
                }
            })
            .collect()
    }

    /// Real value of element `i`: `code * 2^-frac_bits`.
    pub fn value(&self, i: usize) -> f64 {
        let code: i64 = (0..self.bits).filter(|&m| self.bit(m, i)).map(|m| 1i64 << m).sum();
        let v = code as f64 * (-(self.frac_bits as f64)).exp2();
        if self.is_negative(i) {
            -v
        } else {
            v
        }
    }
}

/// Splits `x` into `bits` magnitude planes (plus a sign plane when `signed`).
/// Every `|x[i]|` must be below `2^bits`; unsigned operands must be
/// non-negative.
pub fn decompose(x: &[i64], bits: u32, signed: bool) -> Result<BitPlaneTensor> {
    check_bits(bits)?;
    check_range(x, bits, signed, 0)?;
    let mut t = BitPlaneTensor::empty(x.len(), bits, signed);
    t.fill(x.iter().copied());
    Ok(t)
}

/// Operation counts of the bit-serial datapath.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitConvTrace {
    /// Row-pair AND operations: one per (input plane, weight plane) pair per
    /// kernel footprint.
    pub and_row_ops: u64,
    /// `and_row_ops` weighted by the number of columns ANDed in parallel.
    pub and_bit_ops: u64,
    /// Population counts taken, one per row-pair AND.
    pub bitcounts: u64,
    /// Shift-and-accumulate steps, one per row-pair AND.
    pub shift_accums: u64,
    /// Total set bits seen by the bitcounters.
    pub ones_counted: u64,
    /// Input sub-array (re)loads, one per kernel footprint per channel.
    pub input_writes: u64,
}

impl AddAssign for BitConvTrace {
    fn add_assign(&mut self, o: Self) {
        self.and_row_ops += o.and_row_ops;
        self.and_bit_ops += o.and_bit_ops;
        self.bitcounts += o.bitcounts;
        self.shift_accums += o.shift_accums;
        self.ones_counted += o.ones_counted;
        self.input_writes += o.input_writes;
    }
}

impl std::iter::Sum for BitConvTrace {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        let mut t = BitConvTrace::default();
        for x in iter {
            t += x;
        }
        t
    }
}

/// Whether AND steps against all-zero weight planes are counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    /// Every plane pair is executed and counted.
    #[default]
    Logical,
    /// Weight planes with no set bit are skipped.
    SkipZeroWeightPlanes,
}

fn dot_unchecked(i: &BitPlaneTensor, w: &BitPlaneTensor, mode: TraceMode, trace: &mut BitConvTrace) -> i64 {
    let words = i.words;
    let mut acc = 0i64;
    for n in 0..w.bits {
        let wp = w.plane(n);
        if mode == TraceMode::SkipZeroWeightPlanes && wp.iter().all(|&x| x == 0) {
            continue;
        }
        for m in 0..i.bits {
            let ip = i.plane(m);
            let (mut pos, mut neg) = (0i64, 0i64);
            for k in 0..words {
                let a = ip[k] & wp[k];
                let s = i.sign_word(k) ^ w.sign_word(k);
                neg += (a & s).count_ones() as i64;
                pos += (a & !s).count_ones() as i64;
            }
            acc += (pos - neg) << (m + n);
            trace.and_row_ops += 1;
            trace.and_bit_ops += i.len as u64;
            trace.bitcounts += 1;
            trace.shift_accums += 1;
            trace.ones_counted += (pos + neg) as u64;
        }
    }
    acc
}

/// Exact integer dot product of two same-length plane tensors.
pub fn bitwise_dot(i: &BitPlaneTensor, w: &BitPlaneTensor) -> Result<(i64, BitConvTrace)> {
    bitwise_dot_with(i, w, TraceMode::Logical)
}

pub fn bitwise_dot_with(i: &BitPlaneTensor, w: &BitPlaneTensor, mode: TraceMode) -> Result<(i64, BitConvTrace)> {
    if i.len != w.len {
        return Err(Error::Shape(format!("dot product of {} and {} elements", i.len, w.len)));
    }
    let mut trace = BitConvTrace::default();
    let v = dot_unchecked(i, w, mode, &mut trace);
    Ok((v, trace))
}

/// Bit widths of the two convolution operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperandBits {
    /// Unsigned input magnitude bits.
    pub input: u32,
    /// Weight magnitude bits (excluding the sign).
    pub weight: u32,
    pub signed_weights: bool,
}

impl OperandBits {
    pub fn from_spec(spec: &QuantSpec) -> Self {
        OperandBits { input: spec.input_bits, weight: spec.weight_magnitude_bits(), signed_weights: spec.signed }
    }
}

/// Output dimensions `[F, H', W']` of a valid cross-correlation.
pub fn conv_output_dims(dims: [usize; 3], shape: &LayerShape) -> Result<[usize; 3]> {
    if dims[0] != shape.channels {
        return Err(Error::Shape(format!("{} input channels for a {}-channel kernel", dims[0], shape.channels)));
    }
    if dims[1] < shape.kernel_h || dims[2] < shape.kernel_w || shape.stride == 0 {
        return Err(Error::Shape(format!(
            "{}x{} kernel (stride {}) does not fit {}x{} input",
            shape.kernel_h, shape.kernel_w, shape.stride, dims[1], dims[2]
        )));
    }
    Ok([
        shape.filters,
        (dims[1] - shape.kernel_h) / shape.stride + 1,
        (dims[2] - shape.kernel_w) / shape.stride + 1,
    ])
}

/// Weight planes of every kernel `(f, c)`, indexed `f * C + c`.
pub(crate) fn kernel_planes(weights: &[i64], shape: &LayerShape, bits: OperandBits) -> Vec<BitPlaneTensor> {
    let k = shape.kernel_len();
    weights
        .chunks(k)
        .map(|chunk| {
            let mut t = BitPlaneTensor::empty(k, bits.weight, bits.signed_weights);
            t.fill(chunk.iter().copied());
            t
        })
        .collect()
}

/// Loads the input footprint of channel `c` at output position `(oy, ox)`.
pub(crate) fn load_footprint(
    tile: &mut BitPlaneTensor,
    input: &[i64],
    dims: [usize; 3],
    shape: &LayerShape,
    c: usize,
    oy: usize,
    ox: usize,
) {
    let (h, w) = (dims[1], dims[2]);
    let base = c * h * w;
    let (y0, x0) = (oy * shape.stride, ox * shape.stride);
    tile.fill(
        (0..shape.kernel_h)
            .flat_map(|ky| (0..shape.kernel_w).map(move |kx| (ky, kx)))
            .map(|(ky, kx)| input[base + (y0 + ky) * w + x0 + kx]),
    );
}

pub(crate) fn input_tile(shape: &LayerShape, bits: OperandBits) -> BitPlaneTensor {
    BitPlaneTensor::empty(shape.kernel_len(), bits.input, false)
}

pub(crate) fn check_operands(
    input: &[i64],
    dims: [usize; 3],
    weights: &[i64],
    shape: &LayerShape,
    bits: OperandBits,
) -> Result<[usize; 3]> {
    check_bits(bits.input)?;
    check_bits(bits.weight)?;
    if input.len() != dims.iter().product::<usize>() {
        return Err(Error::Shape(format!("{} input values for dims {:?}", input.len(), dims)));
    }
    if weights.len() != shape.len() {
        return Err(Error::Shape(format!("{} weight values for {} expected", weights.len(), shape.len())));
    }
    let out = conv_output_dims(dims, shape)?;
    check_range(input, bits.input, false, 0)?;
    check_range(weights, bits.weight, bits.signed_weights, 0)?;
    Ok(out)
}

/// Integer cross-correlation of a `C x H x W` input with `F x C x kh x kw`
/// weights, computed plane by plane. The input footprint is reloaded for
/// every output position and channel.
pub fn bitwise_conv2d(
    input: &[i64],
    dims: [usize; 3],
    weights: &[i64],
    shape: &LayerShape,
    bits: OperandBits,
    mode: TraceMode,
) -> Result<(Vec<i64>, BitConvTrace)> {
    let out_dims = check_operands(input, dims, weights, shape, bits)?;
    let planes = kernel_planes(weights, shape, bits);
    let (fs, cs) = (shape.filters, shape.channels);
    let (oh, ow) = (out_dims[1], out_dims[2]);
    let mut out = vec![0i64; fs * oh * ow];
    let mut trace = BitConvTrace::default();
    let mut tile = input_tile(shape, bits);
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..cs {
                load_footprint(&mut tile, input, dims, shape, c, oy, ox);
                trace.input_writes += 1;
                for f in 0..fs {
                    out[(f * oh + oy) * ow + ox] += dot_unchecked(&tile, &planes[f * cs + c], mode, &mut trace);
                }
            }
        }
    }
    Ok((out, trace))
}

fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}

/// Signed accumulator width that holds any dot product of `elements` pairs of
/// `bits_i`-bit and `bits_w`-bit magnitudes.
pub fn accumulator_width(bits_i: u32, bits_w: u32, elements: u64) -> u32 {
    bits_i + bits_w + ceil_log2(elements) + 1
}
