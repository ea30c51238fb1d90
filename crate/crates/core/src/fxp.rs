//! Bit-exact 8-bit fixed-point tensor kernels.
//!
//! Values are signed 8-bit with a shared fraction-bit count; products
//! accumulate in 32 bits and requantize by an arithmetic right shift of
//! `fraction_bits` followed by saturation to `[-128, 127]`. The shift
//! truncates (no rounding) so every execution route is bit-comparable.
//! Channel-split convolution keeps partial sums at full accumulator width
//! and requantizes once after recombination, which is what makes the split
//! exactly equal to the unsplit convolution.

use crate::graph::{window_extent, LayerSpec, Padding, TensorShape};
use thiserror::Error;

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FxpError {
    #[error("fraction_bits must be in 0..=7, got {0}")]
    FractionBits(u8),
    #[error("value buffer length {len} does not match shape {shape}")]
    LengthMismatch { len: usize, shape: TensorShape },
    #[error("fraction bits differ: {a} vs {b}")]
    FractionMismatch { a: u8, b: u8 },
    #[error("kernel expects {expected} input channels, tensor has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("kernel dims ({k_h}x{k_w}, c={c}, n={n}) do not match layer spec")]
    KernelMismatch {
        k_h: usize,
        k_w: usize,
        c: usize,
        n: usize,
    },
    #[error("groups {groups} must divide {what} {value}")]
    Divisibility {
        groups: usize,
        what: &'static str,
        value: usize,
    },
    #[error("split point g={g} out of range for {c} channels")]
    SplitRange { g: usize, c: usize },
    #[error("partial OFM shapes differ: {a} vs {b}")]
    PartialMismatch { a: TensorShape, b: TensorShape },
    #[error("layer kind '{0}' is not handled by this kernel")]
    UnsupportedKind(&'static str),
    #[error("spatial rule failed: {0}")]
    Shape(#[from] crate::graph::ShapeError),
}

/// 8-bit fixed-point tensor in row-major (h, w, c) order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FxpTensor {
    pub shape: TensorShape,
    pub fraction_bits: u8,
    values: Vec<i8>,
}

impl FxpTensor {
    pub fn new(shape: TensorShape, fraction_bits: u8, values: Vec<i8>) -> Result<Self, FxpError> {
        if fraction_bits > 7 {
            return Err(FxpError::FractionBits(fraction_bits));
        }
        if values.len() != shape.elements() {
            return Err(FxpError::LengthMismatch {
                len: values.len(),
                shape,
            });
        }
        Ok(Self {
            shape,
            fraction_bits,
            values,
        })
    }

    pub fn zeros(shape: TensorShape, fraction_bits: u8) -> Self {
        Self {
            shape,
            fraction_bits,
            values: vec![0; shape.elements()],
        }
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    #[inline]
    fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.shape.w + x) * self.shape.c + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> i8 {
        self.values[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: i8) {
        let i = self.idx(y, x, c);
        self.values[i] = v;
    }

    /// Copy of channels `[from, from + count)` as a new tensor.
    pub fn slice_channels(&self, from: usize, count: usize) -> Result<FxpTensor, FxpError> {
        if from + count > self.shape.c || count == 0 {
            return Err(FxpError::SplitRange {
                g: from + count,
                c: self.shape.c,
            });
        }
        let shape = TensorShape {
            h: self.shape.h,
            w: self.shape.w,
            c: count,
        };
        let mut values = Vec::with_capacity(shape.elements());
        for y in 0..self.shape.h {
            for x in 0..self.shape.w {
                for c in 0..count {
                    values.push(self.get(y, x, from + c));
                }
            }
        }
        Ok(FxpTensor {
            shape,
            fraction_bits: self.fraction_bits,
            values,
        })
    }
}

/// Convolution weights in (ky, kx, c, n) order where `c` is channels per
/// group; grouped kernels store `C_I / groups` along the `c` axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvKernel {
    pub k_h: usize,
    pub k_w: usize,
    pub c: usize,
    pub n: usize,
    pub fraction_bits: u8,
    values: Vec<i8>,
}

impl ConvKernel {
    pub fn new(
        k_h: usize,
        k_w: usize,
        c: usize,
        n: usize,
        fraction_bits: u8,
        values: Vec<i8>,
    ) -> Result<Self, FxpError> {
        if fraction_bits > 7 {
            return Err(FxpError::FractionBits(fraction_bits));
        }
        if values.len() != k_h * k_w * c * n {
            return Err(FxpError::LengthMismatch {
                len: values.len(),
                shape: TensorShape {
                    h: k_h * k_w,
                    w: c,
                    c: n.max(1),
                },
            });
        }
        Ok(Self {
            k_h,
            k_w,
            c,
            n,
            fraction_bits,
            values,
        })
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, ky: usize, kx: usize, c: usize, n: usize) -> i8 {
        self.values[((ky * self.k_w + kx) * self.c + c) * self.n + n]
    }

    /// Sub-kernel over input channels `[from, from + count)`.
    pub fn slice_channels(&self, from: usize, count: usize) -> Result<ConvKernel, FxpError> {
        if from + count > self.c || count == 0 {
            return Err(FxpError::SplitRange {
                g: from + count,
                c: self.c,
            });
        }
        let mut values = Vec::with_capacity(self.k_h * self.k_w * count * self.n);
        for ky in 0..self.k_h {
            for kx in 0..self.k_w {
                for c in 0..count {
                    for n in 0..self.n {
                        values.push(self.get(ky, kx, from + c, n));
                    }
                }
            }
        }
        ConvKernel::new(self.k_h, self.k_w, count, self.n, self.fraction_bits, values)
    }

    /// Sub-kernel over output filters `[from, from + count)`.
    pub fn slice_filters(&self, from: usize, count: usize) -> Result<ConvKernel, FxpError> {
        if from + count > self.n || count == 0 {
            return Err(FxpError::SplitRange {
                g: from + count,
                c: self.n,
            });
        }
        let mut values = Vec::with_capacity(self.k_h * self.k_w * self.c * count);
        for ky in 0..self.k_h {
            for kx in 0..self.k_w {
                for c in 0..self.c {
                    for n in 0..count {
                        values.push(self.get(ky, kx, c, from + n));
                    }
                }
            }
        }
        ConvKernel::new(self.k_h, self.k_w, self.c, count, self.fraction_bits, values)
    }
}

/// Depthwise weights in (ky, kx, c) order: one k x k filter per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthwiseKernel {
    pub k: usize,
    pub c: usize,
    pub fraction_bits: u8,
    values: Vec<i8>,
}

impl DepthwiseKernel {
    pub fn new(k: usize, c: usize, fraction_bits: u8, values: Vec<i8>) -> Result<Self, FxpError> {
        if fraction_bits > 7 {
            return Err(FxpError::FractionBits(fraction_bits));
        }
        if values.len() != k * k * c {
            return Err(FxpError::LengthMismatch {
                len: values.len(),
                shape: TensorShape {
                    h: k,
                    w: k,
                    c: c.max(1),
                },
            });
        }
        Ok(Self {
            k,
            c,
            fraction_bits,
            values,
        })
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, ky: usize, kx: usize, c: usize) -> i8 {
        self.values[(ky * self.k + kx) * self.c + c]
    }
}

/// Convolution output held at 32-bit accumulator width, before
/// requantization. Partial results of a channel-split convolution stay in
/// this form until [`combine_partials`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialOfm {
    pub shape: TensorShape,
    pub fraction_bits: u8,
    acc: Vec<i32>,
}

impl PartialOfm {
    pub fn accumulators(&self) -> &[i32] {
        &self.acc
    }

    /// Requantize this partial on its own (used when a lone partial is the
    /// final result, e.g. for transfer-size accounting tests).
    pub fn requantize(&self) -> FxpTensor {
        FxpTensor {
            shape: self.shape,
            fraction_bits: self.fraction_bits,
            values: self.acc.iter().map(|&a| requantize(a, self.fraction_bits)).collect(),
        }
    }
}

/// Arithmetic right shift by `fraction_bits`, then saturate to i8.
#[inline]
pub fn requantize(acc: i32, fraction_bits: u8) -> i8 {
    (acc >> fraction_bits).clamp(QMIN, QMAX) as i8
}

/// Quantize real values: `saturate(round(x * 2^f))`, rounding half away
/// from zero.
pub fn quantize(
    real_values: &[f64],
    shape: TensorShape,
    fraction_bits: u8,
) -> Result<FxpTensor, FxpError> {
    if fraction_bits > 7 {
        return Err(FxpError::FractionBits(fraction_bits));
    }
    if real_values.len() != shape.elements() {
        return Err(FxpError::LengthMismatch {
            len: real_values.len(),
            shape,
        });
    }
    let scale = f64::from(1u32 << fraction_bits);
    let values = real_values
        .iter()
        .map(|&x| (x * scale).round().clamp(f64::from(QMIN), f64::from(QMAX)) as i8)
        .collect();
    FxpTensor::new(shape, fraction_bits, values)
}

fn conv_params(spec: &LayerSpec) -> Result<(usize, usize, usize, usize, Padding, usize), FxpError> {
    match *spec {
        LayerSpec::Conv {
            k_h,
            k_w,
            n,
            stride,
            padding,
            groups,
        } => Ok((k_h, k_w, n, stride, padding, groups)),
        LayerSpec::Pointwise { n } => Ok((1, 1, n, 1, Padding::Same, 1)),
        _ => Err(FxpError::UnsupportedKind(spec.kind_name())),
    }
}

/// Zero-based padding offsets for a `same` window (extra pad goes to the
/// bottom/right).
fn pad_begin(input: usize, k: usize, stride: usize, padding: Padding, out: usize) -> usize {
    match padding {
        Padding::Valid => 0,
        Padding::Same => {
            let needed = ((out - 1) * stride + k).saturating_sub(input);
            needed / 2
        }
    }
}

/// Core convolution at accumulator width. Accumulation order is fixed:
/// input channel outermost, then ky, then kx.
fn conv_core(
    ifm: &FxpTensor,
    weights: &ConvKernel,
    spec: &LayerSpec,
) -> Result<PartialOfm, FxpError> {
    let (k_h, k_w, n, stride, padding, groups) = conv_params(spec)?;
    if ifm.fraction_bits != weights.fraction_bits {
        return Err(FxpError::FractionMismatch {
            a: ifm.fraction_bits,
            b: weights.fraction_bits,
        });
    }
    let c_in = ifm.shape.c;
    if groups == 0 || !c_in.is_multiple_of(groups) {
        return Err(FxpError::Divisibility {
            groups,
            what: "input channels",
            value: c_in,
        });
    }
    if !n.is_multiple_of(groups) {
        return Err(FxpError::Divisibility {
            groups,
            what: "filters",
            value: n,
        });
    }
    let c_per_group = c_in / groups;
    let n_per_group = n / groups;
    if weights.k_h != k_h || weights.k_w != k_w || weights.c != c_per_group || weights.n != n {
        return Err(FxpError::KernelMismatch {
            k_h: weights.k_h,
            k_w: weights.k_w,
            c: weights.c,
            n: weights.n,
        });
    }

    let oh = window_extent(ifm.shape.h, k_h, stride, padding)?;
    let ow = window_extent(ifm.shape.w, k_w, stride, padding)?;
    let pad_top = pad_begin(ifm.shape.h, k_h, stride, padding, oh);
    let pad_left = pad_begin(ifm.shape.w, k_w, stride, padding, ow);

    let out_shape = TensorShape { h: oh, w: ow, c: n };
    let mut acc = vec![0i32; out_shape.elements()];
    for oy in 0..oh {
        for ox in 0..ow {
            for no in 0..n {
                let group = no / n_per_group;
                let mut sum = 0i32;
                for ci in 0..c_per_group {
                    let c_abs = group * c_per_group + ci;
                    for ky in 0..k_h {
                        let iy = (oy * stride + ky) as isize - pad_top as isize;
                        if iy < 0 || iy >= ifm.shape.h as isize {
                            continue;
                        }
                        for kx in 0..k_w {
                            let ix = (ox * stride + kx) as isize - pad_left as isize;
                            if ix < 0 || ix >= ifm.shape.w as isize {
                                continue;
                            }
                            let a = i32::from(ifm.get(iy as usize, ix as usize, c_abs));
                            let b = i32::from(weights.get(ky, kx, ci, no));
                            sum += a * b;
                        }
                    }
                }
                acc[(oy * ow + ox) * n + no] = sum;
            }
        }
    }
    Ok(PartialOfm {
        shape: out_shape,
        fraction_bits: ifm.fraction_bits,
        acc,
    })
}

/// Standard (optionally grouped) convolution with zero padding.
pub fn conv2d(ifm: &FxpTensor, weights: &ConvKernel, spec: &LayerSpec) -> Result<FxpTensor, FxpError> {
    Ok(conv_core(ifm, weights, spec)?.requantize())
}

/// Depthwise convolution: one k x k filter per input channel, output
/// channels equal input channels.
pub fn depthwise_conv2d(
    ifm: &FxpTensor,
    weights: &DepthwiseKernel,
    spec: &LayerSpec,
) -> Result<FxpTensor, FxpError> {
    let (k, stride, padding) = match *spec {
        LayerSpec::DepthwiseConv { k, stride, padding } => (k, stride, padding),
        _ => return Err(FxpError::UnsupportedKind(spec.kind_name())),
    };
    if ifm.fraction_bits != weights.fraction_bits {
        return Err(FxpError::FractionMismatch {
            a: ifm.fraction_bits,
            b: weights.fraction_bits,
        });
    }
    if weights.k != k || weights.c != ifm.shape.c {
        return Err(FxpError::ChannelMismatch {
            expected: weights.c,
            got: ifm.shape.c,
        });
    }
    let oh = window_extent(ifm.shape.h, k, stride, padding)?;
    let ow = window_extent(ifm.shape.w, k, stride, padding)?;
    let pad_top = pad_begin(ifm.shape.h, k, stride, padding, oh);
    let pad_left = pad_begin(ifm.shape.w, k, stride, padding, ow);

    let out_shape = TensorShape {
        h: oh,
        w: ow,
        c: ifm.shape.c,
    };
    let mut out = FxpTensor::zeros(out_shape, ifm.fraction_bits);
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..ifm.shape.c {
                let mut sum = 0i32;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad_top as isize;
                    if iy < 0 || iy >= ifm.shape.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad_left as isize;
                        if ix < 0 || ix >= ifm.shape.w as isize {
                            continue;
                        }
                        sum += i32::from(ifm.get(iy as usize, ix as usize, c))
                            * i32::from(weights.get(ky, kx, c));
                    }
                }
                out.set(oy, ox, c, requantize(sum, ifm.fraction_bits));
            }
        }
    }
    Ok(out)
}

/// Split a convolution across its input channels: partial A covers the
/// first `C_I - g` channels, partial B the remaining `g`. Both partials are
/// kept at accumulator width; recombining with [`combine_partials`] is
/// bit-identical to [`conv2d`] on the unsplit input.
pub fn channel_split_conv(
    ifm: &FxpTensor,
    weights: &ConvKernel,
    spec: &LayerSpec,
    g: usize,
) -> Result<(PartialOfm, PartialOfm), FxpError> {
    let (.., groups) = conv_params(spec)?;
    if groups != 1 {
        return Err(FxpError::Divisibility {
            groups,
            what: "channel-split convolution input channels",
            value: ifm.shape.c,
        });
    }
    let c = ifm.shape.c;
    if g == 0 || g >= c {
        return Err(FxpError::SplitRange { g, c });
    }
    let keep = c - g;
    let ifm_a = ifm.slice_channels(0, keep)?;
    let ifm_b = ifm.slice_channels(keep, g)?;
    let w_a = weights.slice_channels(0, keep)?;
    let w_b = weights.slice_channels(keep, g)?;
    let a = conv_core(&ifm_a, &w_a, spec)?;
    let b = conv_core(&ifm_b, &w_b, spec)?;
    Ok((a, b))
}

/// Sum two partial OFMs at accumulator width, then requantize once.
pub fn combine_partials(a: &PartialOfm, b: &PartialOfm) -> Result<FxpTensor, FxpError> {
    if a.shape != b.shape {
        return Err(FxpError::PartialMismatch {
            a: a.shape,
            b: b.shape,
        });
    }
    if a.fraction_bits != b.fraction_bits {
        return Err(FxpError::FractionMismatch {
            a: a.fraction_bits,
            b: b.fraction_bits,
        });
    }
    let values = a
        .acc
        .iter()
        .zip(&b.acc)
        .map(|(&x, &y)| requantize(x + y, a.fraction_bits))
        .collect();
    FxpTensor::new(a.shape, a.fraction_bits, values)
}

/// Grouped convolution realized as independent per-group convolutions whose
/// outputs are concatenated along channels. This is a distinct route from
/// `conv2d`'s internal group indexing and must agree with it exactly.
pub fn grouped_conv2d(
    ifm: &FxpTensor,
    weights: &ConvKernel,
    spec: &LayerSpec,
) -> Result<FxpTensor, FxpError> {
    let (k_h, k_w, n, stride, padding, groups) = conv_params(spec)?;
    if groups == 0 || !ifm.shape.c.is_multiple_of(groups) || !n.is_multiple_of(groups) {
        return Err(FxpError::Divisibility {
            groups,
            what: "channels",
            value: ifm.shape.c,
        });
    }
    let c_per_group = ifm.shape.c / groups;
    let n_per_group = n / groups;
    let sub_spec = LayerSpec::Conv {
        k_h,
        k_w,
        n: n_per_group,
        stride,
        padding,
        groups: 1,
    };
    let mut parts = Vec::with_capacity(groups);
    for gi in 0..groups {
        let ifm_g = ifm.slice_channels(gi * c_per_group, c_per_group)?;
        let w_g = weights.slice_filters(gi * n_per_group, n_per_group)?;
        parts.push(conv2d(&ifm_g, &w_g, &sub_spec)?);
    }
    let refs: Vec<&FxpTensor> = parts.iter().collect();
    concat(&refs)
}

/// Max pooling; out-of-bounds window positions act as -128.
pub fn maxpool(ifm: &FxpTensor, k: usize, stride: usize, padding: Padding) -> Result<FxpTensor, FxpError> {
    pool(ifm, k, stride, padding, true)
}

/// Average pooling; padded positions contribute zero and the divisor is
/// always k*k (integer division truncating toward zero).
pub fn avgpool(ifm: &FxpTensor, k: usize, stride: usize, padding: Padding) -> Result<FxpTensor, FxpError> {
    pool(ifm, k, stride, padding, false)
}

fn pool(
    ifm: &FxpTensor,
    k: usize,
    stride: usize,
    padding: Padding,
    take_max: bool,
) -> Result<FxpTensor, FxpError> {
    let oh = window_extent(ifm.shape.h, k, stride, padding)?;
    let ow = window_extent(ifm.shape.w, k, stride, padding)?;
    let pad_top = pad_begin(ifm.shape.h, k, stride, padding, oh);
    let pad_left = pad_begin(ifm.shape.w, k, stride, padding, ow);
    let out_shape = TensorShape {
        h: oh,
        w: ow,
        c: ifm.shape.c,
    };
    let mut out = FxpTensor::zeros(out_shape, ifm.fraction_bits);
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..ifm.shape.c {
                let mut max = i8::MIN;
                let mut sum = 0i32;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad_top as isize;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad_left as isize;
                        let inside = iy >= 0
                            && iy < ifm.shape.h as isize
                            && ix >= 0
                            && ix < ifm.shape.w as isize;
                        if inside {
                            let v = ifm.get(iy as usize, ix as usize, c);
                            max = max.max(v);
                            sum += i32::from(v);
                        }
                    }
                }
                let v = if take_max {
                    max
                } else {
                    (sum / (k * k) as i32).clamp(QMIN, QMAX) as i8
                };
                out.set(oy, ox, c, v);
            }
        }
    }
    Ok(out)
}

/// Concatenate along channels. Inputs must agree on spatial dims and
/// fraction bits.
pub fn concat(inputs: &[&FxpTensor]) -> Result<FxpTensor, FxpError> {
    let first = inputs
        .first()
        .ok_or(FxpError::UnsupportedKind("empty concat"))?;
    let mut c_total = 0;
    for t in inputs {
        if t.shape.h != first.shape.h || t.shape.w != first.shape.w {
            return Err(FxpError::PartialMismatch {
                a: first.shape,
                b: t.shape,
            });
        }
        if t.fraction_bits != first.fraction_bits {
            return Err(FxpError::FractionMismatch {
                a: first.fraction_bits,
                b: t.fraction_bits,
            });
        }
        c_total += t.shape.c;
    }
    let shape = TensorShape {
        h: first.shape.h,
        w: first.shape.w,
        c: c_total,
    };
    let mut values = Vec::with_capacity(shape.elements());
    for y in 0..shape.h {
        for x in 0..shape.w {
            for t in inputs {
                for c in 0..t.shape.c {
                    values.push(t.get(y, x, c));
                }
            }
        }
    }
    FxpTensor::new(shape, first.fraction_bits, values)
}

/// Elementwise saturating addition of same-shape tensors.
pub fn add_tensors(inputs: &[&FxpTensor]) -> Result<FxpTensor, FxpError> {
    let first = inputs
        .first()
        .ok_or(FxpError::UnsupportedKind("empty add"))?;
    for t in inputs {
        if t.shape != first.shape {
            return Err(FxpError::PartialMismatch {
                a: first.shape,
                b: t.shape,
            });
        }
        if t.fraction_bits != first.fraction_bits {
            return Err(FxpError::FractionMismatch {
                a: first.fraction_bits,
                b: t.fraction_bits,
            });
        }
    }
    let mut values = Vec::with_capacity(first.shape.elements());
    for i in 0..first.shape.elements() {
        let sum: i32 = inputs.iter().map(|t| i32::from(t.values[i])).sum();
        values.push(sum.clamp(QMIN, QMAX) as i8);
    }
    FxpTensor::new(first.shape, first.fraction_bits, values)
}

/// Select part `part` of `parts` equal channel slices.
pub fn channel_split(ifm: &FxpTensor, part: usize, parts: usize) -> Result<FxpTensor, FxpError> {
    if parts < 2 || part >= parts || !ifm.shape.c.is_multiple_of(parts) {
        return Err(FxpError::Divisibility {
            groups: parts,
            what: "split channels",
            value: ifm.shape.c,
        });
    }
    let per = ifm.shape.c / parts;
    ifm.slice_channels(part * per, per)
}

/// Group-transpose channel permutation: viewing channels as a
/// `groups x (C/groups)` matrix, output channel `pos * groups + group`
/// takes input channel `group * (C/groups) + pos`.
pub fn channel_shuffle(ifm: &FxpTensor, groups: usize) -> Result<FxpTensor, FxpError> {
    if groups == 0 || !ifm.shape.c.is_multiple_of(groups) {
        return Err(FxpError::Divisibility {
            groups,
            what: "shuffle channels",
            value: ifm.shape.c,
        });
    }
    let per = ifm.shape.c / groups;
    let mut out = FxpTensor::zeros(ifm.shape, ifm.fraction_bits);
    for y in 0..ifm.shape.h {
        for x in 0..ifm.shape.w {
            for c in 0..ifm.shape.c {
                let group = c / per;
                let pos = c % per;
                out.set(y, x, pos * groups + group, ifm.get(y, x, c));
            }
        }
    }
    Ok(out)
}
