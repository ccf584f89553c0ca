//! Affine 8-bit quantization.
//!
//! A code `q` stands for the real value `scale · (q − zero_point)`. Inputs
//! and weights are per-tensor asymmetric `u8`. The quantized convolution
//! accumulates exact `i32` sums; turning those sums back into `u8`
//! activations (requantize) or `f32` values (dequantize) are separate steps
//! so the executor can time them on their own.
//!
//! All rounding is round-half-to-even.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{check_conv, valid_cols, ConvParams};
use crate::tensor::{ChannelSliceView, DType, Shape, Tensor};

pub const QMIN: i32 = 0;
pub const QMAX: i32 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Argument(format!(
                "quantization scale {scale} must be positive and finite"
            )));
        }
        if !(QMIN..=QMAX).contains(&zero_point) {
            return Err(Error::Argument(format!("zero point {zero_point} outside [0, 255]")));
        }
        Ok(QuantParams { scale, zero_point })
    }

    /// Parameters covering `[min(lo, 0), max(hi, 0)]`.
    ///
    /// A range collapsed to a single point falls back to `scale = 1` with
    /// the zero point placed on that value.
    pub fn from_range(lo: f32, hi: f32) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::Argument(format!("invalid calibration range [{lo}, {hi}]")));
        }
        let lo = f64::from(lo.min(0.0));
        let hi = f64::from(hi.max(0.0));
        if hi == lo {
            let zp = (-lo).round_ties_even().clamp(f64::from(QMIN), f64::from(QMAX)) as i32;
            return Self::new(1.0, zp);
        }
        let span = hi - lo;
        let scale = (span / 255.0) as f32;
        // −lo / scale, written so that symmetric ranges land exactly on .5
        let zp = (-lo * 255.0 / span)
            .round_ties_even()
            .clamp(f64::from(QMIN), f64::from(QMAX)) as i32;
        Self::new(scale, zp)
    }

    #[inline]
    pub fn quantize(&self, x: f32) -> u8 {
        let q = (f64::from(x) / f64::from(self.scale)).round_ties_even() + f64::from(self.zero_point);
        q.clamp(f64::from(QMIN), f64::from(QMAX)) as u8
    }

    #[inline]
    pub fn dequantize(&self, q: u8) -> f32 {
        self.scale * (i32::from(q) - self.zero_point) as f32
    }

    /// Lowest and highest real values the 8-bit codes can represent.
    pub fn representable_range(&self) -> (f32, f32) {
        (self.dequantize(0), self.dequantize(255))
    }
}

/// Calibrate parameters from the min/max of a float tensor.
pub fn choose_quant_params(t: &Tensor) -> Result<QuantParams> {
    let data = t.as_f32()?;
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("calibration tensor holds non-finite values".into()));
    }
    let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    QuantParams::from_range(lo, hi)
}

/// An 8-bit tensor together with the map back to real values.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    tensor: Tensor,
    params: QuantParams,
}

impl QTensor {
    pub fn new(tensor: Tensor, params: QuantParams) -> Result<Self> {
        if tensor.dtype() != DType::U8 {
            return Err(Error::DType {
                expected: DType::U8,
                found: tensor.dtype(),
            });
        }
        Ok(QTensor { tensor, params })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn params(&self) -> QuantParams {
        self.params
    }

    pub fn shape(&self) -> Shape {
        self.tensor.shape()
    }

    pub fn into_parts(self) -> (Tensor, QuantParams) {
        (self.tensor, self.params)
    }
}

fn same_shape(a: &Tensor, b: Shape) -> Result<()> {
    if a.shape() != b {
        return Err(Error::Shape(format!("expected {b}, found {}", a.shape())));
    }
    Ok(())
}

const CHUNK: usize = 1 << 14;

pub fn quantize_into(src: &Tensor, p: QuantParams, dst: &mut Tensor) -> Result<()> {
    same_shape(dst, src.shape())?;
    let x = src.as_f32()?;
    dst.data_mut::<u8>()?
        .par_chunks_mut(CHUNK)
        .zip(x.par_chunks(CHUNK))
        .for_each(|(q, x)| {
            for (q, &x) in q.iter_mut().zip(x) {
                *q = p.quantize(x);
            }
        });
    Ok(())
}

pub fn quantize_tensor(t: &Tensor, p: QuantParams) -> Result<QTensor> {
    let mut q = Tensor::new(t.shape(), DType::U8)?;
    quantize_into(t, p, &mut q)?;
    QTensor::new(q, p)
}

pub fn dequantize_into(src: &Tensor, p: QuantParams, dst: &mut Tensor) -> Result<()> {
    same_shape(dst, src.shape())?;
    let q = src.as_u8()?;
    dst.as_f32_mut()?
        .par_chunks_mut(CHUNK)
        .zip(q.par_chunks(CHUNK))
        .for_each(|(x, q)| {
            for (x, &q) in x.iter_mut().zip(q) {
                *x = p.dequantize(q);
            }
        });
    Ok(())
}

pub fn dequantize_tensor(q: &QTensor) -> Result<Tensor> {
    let mut x = Tensor::zeros(q.shape())?;
    dequantize_into(&q.tensor, q.params, &mut x)?;
    Ok(x)
}

/// Real value of `i32` accumulators whose unit is `acc_scale`
/// (`scale_in · scale_w`), written into a view.
pub fn dequantize_accumulators_into(acc: &Tensor, acc_scale: f32, dst: &mut ChannelSliceView<'_>) -> Result<()> {
    let shape = acc.shape();
    if dst.shape() != shape {
        return Err(Error::Shape(format!(
            "dequantize target is {}, accumulators are {shape}",
            dst.shape()
        )));
    }
    let a = acc.as_i32()?;
    let s = f64::from(acc_scale);
    let per_item = shape.c * shape.plane();
    for n in 0..shape.n {
        let src = &a[n * per_item..(n + 1) * per_item];
        dst.batch_mut::<f32>(n)?
            .par_chunks_mut(CHUNK)
            .zip(src.par_chunks(CHUNK))
            .for_each(|(x, a)| {
                for (x, &a) in x.iter_mut().zip(a) {
                    *x = (f64::from(a) * s) as f32;
                }
            });
    }
    Ok(())
}

/// `(scale_in · scale_w) / scale_out`, the factor mapping accumulators onto
/// the output's 8-bit grid.
pub fn requantize_multiplier(input: QuantParams, weights: QuantParams, output: QuantParams) -> f64 {
    f64::from(input.scale) * f64::from(weights.scale) / f64::from(output.scale)
}

#[inline]
fn requantize_one(acc: i32, multiplier: f64, zero_point: i32) -> u8 {
    let q = (f64::from(acc) * multiplier).round_ties_even() + f64::from(zero_point);
    q.clamp(f64::from(QMIN), f64::from(QMAX)) as u8
}

/// Map accumulators to 8-bit codes of `out_params`, writing into a view so
/// fire expand branches can land directly in their channel range.
pub fn requantize_into(
    acc: &Tensor,
    multiplier: f64,
    out_params: QuantParams,
    dst: &mut ChannelSliceView<'_>,
) -> Result<()> {
    let shape = acc.shape();
    if dst.shape() != shape {
        return Err(Error::Shape(format!(
            "requantize target is {}, accumulators are {shape}",
            dst.shape()
        )));
    }
    let a = acc.as_i32()?;
    let per_item = shape.c * shape.plane();
    for n in 0..shape.n {
        let src = &a[n * per_item..(n + 1) * per_item];
        dst.batch_mut::<u8>(n)?
            .par_chunks_mut(CHUNK)
            .zip(src.par_chunks(CHUNK))
            .for_each(|(q, a)| {
                for (q, &a) in q.iter_mut().zip(a) {
                    *q = requantize_one(a, multiplier, out_params.zero_point);
                }
            });
    }
    Ok(())
}

/// ReLU on 8-bit codes: anything below the zero point represents a
/// negative value and is raised to it.
pub fn qrelu_view(view: &mut ChannelSliceView<'_>, zero_point: i32) -> Result<()> {
    let zp = zero_point.clamp(QMIN, QMAX) as u8;
    for n in 0..view.shape().n {
        view.batch_mut::<u8>(n)?.par_chunks_mut(CHUNK).for_each(|q| {
            for q in q {
                *q = (*q).max(zp);
            }
        });
    }
    Ok(())
}

/// Bias in accumulator units, rounded half-to-even.
pub fn quantize_bias(bias: &[f32], acc_scale: f32) -> Vec<i32> {
    bias.iter()
        .map(|&b| {
            (f64::from(b) / f64::from(acc_scale))
                .round_ties_even()
                .clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32
        })
        .collect()
}

/// Largest accumulator magnitude a convolution over `taps = c·kh·kw`
/// products can reach, given the worst bias.
pub fn accumulator_bound(taps: usize, max_abs_bias: i64) -> i64 {
    taps as i64 * 255 * 255 + max_abs_bias
}

/// Refuse shapes whose accumulators could overflow `i32`.
pub fn check_accumulator_range(taps: usize, bias: &[i32]) -> Result<()> {
    let worst_bias = bias.iter().map(|&b| i64::from(b).abs()).max().unwrap_or(0);
    let bound = accumulator_bound(taps, worst_bias);
    if bound > i64::from(i32::MAX) {
        return Err(Error::Argument(format!(
            "accumulator bound {bound} over {taps} taps overflows i32"
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn qconv_plane(
    input: &[u8],
    in_shape: Shape,
    in_zp: i32,
    filter: &[u8],
    w_zp: i32,
    bias: i32,
    p: &ConvParams,
    out: &mut [i32],
    out_h: usize,
    out_w: usize,
) {
    out.fill(bias);
    let (in_h, in_w) = (in_shape.h, in_shape.w);
    let plane = in_h * in_w;
    let (kh, kw, stride, pad) = (p.kernel_h, p.kernel_w, p.stride, p.pad);
    // Operands are offset to i16 (|x| <= 255) so the widening multiply vectorizes.
    let in_zp = in_zp as i16;
    let tap = |q: u8| i32::from(i16::from(q) - w_zp as i16);
    let mac = |o: &mut i32, v: u8, wv: i32| *o += i32::from(i16::from(v) - in_zp) * wv;

    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        for (c, &q) in filter.iter().enumerate() {
            let wv = tap(q);
            if wv == 0 {
                continue;
            }
            for (o, &v) in out.iter_mut().zip(&input[c * plane..(c + 1) * plane]) {
                mac(o, v, wv);
            }
        }
        return;
    }

    for c in 0..in_shape.c {
        let src = &input[c * plane..(c + 1) * plane];
        let taps = &filter[c * kh * kw..(c + 1) * kh * kw];
        for i in 0..kh {
            for y in 0..out_h {
                let iy = (y * stride + i) as isize - pad as isize;
                if iy < 0 || iy >= in_h as isize {
                    continue;
                }
                let row = &src[iy as usize * in_w..(iy as usize + 1) * in_w];
                let dst = &mut out[y * out_w..(y + 1) * out_w];
                for j in 0..kw {
                    let wv = tap(taps[i * kw + j]);
                    if wv == 0 {
                        continue;
                    }
                    let (lo, hi) = valid_cols(j, pad, stride, in_w, out_w);
                    if lo >= hi {
                        continue;
                    }
                    if stride == 1 {
                        let base = lo + j - pad;
                        for (o, &v) in dst[lo..hi].iter_mut().zip(&row[base..base + (hi - lo)]) {
                            mac(o, v, wv);
                        }
                    } else {
                        for (x, o) in dst[lo..hi].iter_mut().enumerate() {
                            mac(o, row[(x + lo) * stride + j - pad], wv);
                        }
                    }
                }
            }
        }
    }
}

/// Quantized convolution producing raw `i32` accumulators
/// `bias + Σ (q_in − zp_in)·(q_w − zp_w)`.
pub fn qconv2d_accumulate(
    input: &QTensor,
    weights: &QTensor,
    bias: &[i32],
    p: &ConvParams,
    acc: &mut Tensor,
) -> Result<()> {
    qconv2d_accumulate_raw(
        &input.tensor,
        input.params.zero_point,
        &weights.tensor,
        weights.params.zero_point,
        bias,
        p,
        acc,
    )
}

/// [`qconv2d_accumulate`] over plain `u8` tensors and explicit zero points.
pub fn qconv2d_accumulate_raw(
    input: &Tensor,
    in_zp: i32,
    weights: &Tensor,
    w_zp: i32,
    bias: &[i32],
    p: &ConvParams,
    acc: &mut Tensor,
) -> Result<()> {
    let in_shape = input.shape();
    let w_shape = weights.shape();
    let out_shape = check_conv(in_shape, w_shape, p, acc.shape())?;
    for zp in [in_zp, w_zp] {
        if !(QMIN..=QMAX).contains(&zp) {
            return Err(Error::Argument(format!("zero point {zp} outside [0, 255]")));
        }
    }
    if bias.len() != w_shape.n {
        return Err(Error::Shape(format!("{} biases for {} filters", bias.len(), w_shape.n)));
    }
    let src = input.as_u8()?;
    let filters = weights.as_u8()?;
    let per_filter = in_shape.c * p.kernel_h * p.kernel_w;
    let in_batch = in_shape.c * in_shape.plane();
    let out_batch = out_shape.c * out_shape.plane();
    let dst = acc.data_mut::<i32>()?;

    for n in 0..in_shape.n {
        let x = &src[n * in_batch..(n + 1) * in_batch];
        dst[n * out_batch..(n + 1) * out_batch]
            .par_chunks_mut(out_shape.plane())
            .enumerate()
            .for_each(|(o, plane)| {
                qconv_plane(
                    x,
                    in_shape,
                    in_zp,
                    &filters[o * per_filter..(o + 1) * per_filter],
                    w_zp,
                    bias[o],
                    p,
                    plane,
                    out_shape.h,
                    out_shape.w,
                );
            });
    }
    Ok(())
}

/// Quantized convolution followed by requantization to `out_params`.
pub fn qconv2d(
    input: &QTensor,
    weights: &QTensor,
    bias: &[i32],
    p: &ConvParams,
    out_params: QuantParams,
) -> Result<QTensor> {
    let shape = p.output_shape(input.shape(), weights.shape().n)?;
    check_accumulator_range(input.shape().c * p.kernel_h * p.kernel_w, bias)?;
    let mut acc = Tensor::new(shape, DType::I32)?;
    qconv2d_accumulate(input, weights, bias, p, &mut acc)?;
    let mut out = Tensor::new(shape, DType::U8)?;
    let m = requantize_multiplier(input.params, weights.params, out_params);
    requantize_into(&acc, m, out_params, &mut out.view_mut())?;
    QTensor::new(out, out_params)
}
