//! Float compute primitives: direct convolution, ReLU, max and global
//! average pooling, scaling, softmax and top-k.
//!
//! Kernels write into caller-provided buffers (`*_into`, or a
//! [`ChannelSliceView`] for convolution) so the executor can run without
//! allocating. The allocating wrappers exist for tests and one-off use.
//!
//! Work is split across the current rayon pool by output channel. Each
//! output element is always produced by one worker with a fixed summation
//! order, so results do not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ChannelSliceView, DType, Element, Shape, Tensor};

/// Geometry of a 2-D convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    /// Symmetric zero padding on every border.
    pub pad: usize,
}

impl ConvParams {
    pub fn new(kernel_h: usize, kernel_w: usize, stride: usize, pad: usize) -> Result<Self> {
        if kernel_h == 0 || kernel_w == 0 {
            return Err(Error::Argument("kernel extent must be at least 1".into()));
        }
        if stride == 0 {
            return Err(Error::Argument("stride must be at least 1".into()));
        }
        Ok(ConvParams {
            kernel_h,
            kernel_w,
            stride,
            pad,
        })
    }

    pub fn square(kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        Self::new(kernel, kernel, stride, pad)
    }

    /// Output shape for an input of `input` and `out_channels` filters.
    pub fn output_shape(&self, input: Shape, out_channels: usize) -> Result<Shape> {
        let oh = window_extent(input.h, self.kernel_h, self.stride, self.pad)?;
        let ow = window_extent(input.w, self.kernel_w, self.stride, self.pad)?;
        Shape::new(input.n, out_channels, oh, ow)
    }
}

/// `floor((len + 2·pad − kernel) / stride) + 1`, rejecting windows that do
/// not fit the padded input.
pub fn window_extent(len: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if kernel > padded {
        return Err(Error::Shape(format!(
            "window {kernel} larger than padded extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Convolution filters `(out_channels, in_channels, kh, kw)` plus one bias
/// per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor {
    tensor: Tensor,
    bias: Vec<f32>,
}

impl WeightTensor {
    pub fn new(tensor: Tensor, bias: Vec<f32>) -> Result<Self> {
        if tensor.dtype() != DType::F32 {
            return Err(Error::DType {
                expected: DType::F32,
                found: tensor.dtype(),
            });
        }
        if bias.len() != tensor.shape().n {
            return Err(Error::Shape(format!(
                "{} biases for {} filters",
                bias.len(),
                tensor.shape().n
            )));
        }
        Ok(WeightTensor { tensor, bias })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.tensor.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.tensor.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.tensor.shape();
        (s.h, s.w)
    }
}

/// Validates a convolution and returns `(output shape)`.
pub(crate) fn check_conv(input: Shape, filters: Shape, p: &ConvParams, out: Shape) -> Result<Shape> {
    if filters.c != input.c {
        return Err(Error::Shape(format!(
            "filters expect {} input channels, input has {}",
            filters.c, input.c
        )));
    }
    if (filters.h, filters.w) != (p.kernel_h, p.kernel_w) {
        return Err(Error::Shape(format!(
            "filters are {}x{}, params say {}x{}",
            filters.h, filters.w, p.kernel_h, p.kernel_w
        )));
    }
    let expected = p.output_shape(input, filters.n)?;
    if out != expected {
        return Err(Error::Shape(format!(
            "output is {out}, convolution produces {expected}"
        )));
    }
    Ok(expected)
}

/// Range of output columns `x` whose input column `x·stride + j − pad`
/// falls inside `[0, in_w)`.
#[inline]
pub(crate) fn valid_cols(j: usize, pad: usize, stride: usize, in_w: usize, out_w: usize) -> (usize, usize) {
    let lo = if j >= pad { 0 } else { (pad - j).div_ceil(stride) };
    let last = in_w + pad;
    let hi = if last <= j {
        0
    } else {
        ((last - j - 1) / stride + 1).min(out_w)
    };
    (lo, hi.max(lo))
}

/// Direct convolution of one batch item into one output plane.
///
/// Per output element the sum is `bias`, then contributions in
/// channel-major, then kernel-row, then kernel-column order.
#[allow(clippy::too_many_arguments)]
fn conv_plane(
    input: &[f32],
    in_shape: Shape,
    filter: &[f32],
    bias: f32,
    p: &ConvParams,
    out: &mut [f32],
    out_h: usize,
    out_w: usize,
) {
    out.fill(bias);
    let (in_h, in_w) = (in_shape.h, in_shape.w);
    let plane = in_h * in_w;
    let (kh, kw, stride, pad) = (p.kernel_h, p.kernel_w, p.stride, p.pad);

    if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        for (c, &wv) in filter.iter().enumerate() {
            let src = &input[c * plane..(c + 1) * plane];
            for (o, &v) in out.iter_mut().zip(src) {
                *o += wv * v;
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
                    let wv = taps[i * kw + j];
                    let (lo, hi) = valid_cols(j, pad, stride, in_w, out_w);
                    if lo >= hi {
                        continue;
                    }
                    if stride == 1 {
                        let base = lo + j - pad;
                        for (o, &v) in dst[lo..hi].iter_mut().zip(&row[base..base + (hi - lo)]) {
                            *o += wv * v;
                        }
                    } else {
                        for (x, o) in dst[lo..hi].iter_mut().enumerate() {
                            *o += wv * row[(x + lo) * stride + j - pad];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution writing into `out`, which may be a channel slice of a
/// larger buffer. Only the slice's channels are touched.
pub fn conv2d(input: &Tensor, weights: &WeightTensor, p: &ConvParams, out: &mut ChannelSliceView<'_>) -> Result<()> {
    let in_shape = input.shape();
    let out_shape = check_conv(in_shape, weights.tensor.shape(), p, out.shape())?;
    let src = input.as_f32()?;
    let filters = weights.tensor.as_f32()?;
    let per_filter = in_shape.c * p.kernel_h * p.kernel_w;
    let out_plane = out_shape.plane();
    let in_batch = in_shape.c * in_shape.plane();

    for n in 0..in_shape.n {
        let x = &src[n * in_batch..(n + 1) * in_batch];
        out.batch_mut::<f32>(n)?
            .par_chunks_mut(out_plane)
            .enumerate()
            .for_each(|(o, plane)| {
                conv_plane(
                    x,
                    in_shape,
                    &filters[o * per_filter..(o + 1) * per_filter],
                    weights.bias[o],
                    p,
                    plane,
                    out_shape.h,
                    out_shape.w,
                );
            });
    }
    Ok(())
}

/// Allocating convolution.
pub fn conv2d_new(input: &Tensor, weights: &WeightTensor, p: &ConvParams) -> Result<Tensor> {
    let shape = p.output_shape(input.shape(), weights.out_channels())?;
    let mut out = Tensor::zeros(shape)?;
    conv2d(input, weights, p, &mut out.view_mut())?;
    Ok(out)
}

const ELEMENTWISE_CHUNK: usize = 1 << 14;

fn relu_slice(data: &mut [f32]) {
    data.par_chunks_mut(ELEMENTWISE_CHUNK).for_each(|chunk| {
        for x in chunk {
            *x = x.max(0.0);
        }
    });
}

pub fn relu_in_place(t: &mut Tensor) -> Result<()> {
    relu_slice(t.as_f32_mut()?);
    Ok(())
}

/// ReLU over the channels of a view only.
pub fn relu_view(view: &mut ChannelSliceView<'_>) -> Result<()> {
    for n in 0..view.shape().n {
        relu_slice(view.batch_mut::<f32>(n)?);
    }
    Ok(())
}

pub fn relu(t: &Tensor) -> Result<Tensor> {
    let mut out = t.clone();
    relu_in_place(&mut out)?;
    Ok(out)
}

/// Max-pooling window geometry. Padded positions never win the max.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolParams {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Argument("pool kernel and stride must be at least 1".into()));
        }
        if pad >= kernel {
            return Err(Error::Argument(format!(
                "pool padding {pad} must be smaller than kernel {kernel}"
            )));
        }
        Ok(PoolParams { kernel, stride, pad })
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let oh = window_extent(input.h, self.kernel, self.stride, self.pad)?;
        let ow = window_extent(input.w, self.kernel, self.stride, self.pad)?;
        Shape::new(input.n, input.c, oh, ow)
    }
}

fn maxpool_plane<T: Element>(src: &[T], in_h: usize, in_w: usize, p: &PoolParams, dst: &mut [T], out_w: usize) {
    for (y, row) in dst.chunks_mut(out_w).enumerate() {
        let y0 = (y * p.stride) as isize - p.pad as isize;
        let ys = y0.max(0) as usize..((y0 + p.kernel as isize).min(in_h as isize)) as usize;
        for (x, o) in row.iter_mut().enumerate() {
            let x0 = (x * p.stride) as isize - p.pad as isize;
            let xs = x0.max(0) as usize..((x0 + p.kernel as isize).min(in_w as isize)) as usize;
            let mut best = src[ys.start * in_w + xs.start];
            for iy in ys.clone() {
                for &v in &src[iy * in_w + xs.start..iy * in_w + xs.end] {
                    if v > best {
                        best = v;
                    }
                }
            }
            *o = best;
        }
    }
}

/// Max pooling into a preallocated `out` whose shape must already match.
/// Works on float and 8-bit tensors alike.
pub fn maxpool2d_into(input: &Tensor, p: &PoolParams, out: &mut Tensor) -> Result<()> {
    let in_shape = input.shape();
    let expected = p.output_shape(in_shape)?;
    if out.shape() != expected {
        return Err(Error::Shape(format!(
            "pool output is {}, expected {expected}",
            out.shape()
        )));
    }
    if input.dtype() != out.dtype() {
        return Err(Error::DType {
            expected: input.dtype(),
            found: out.dtype(),
        });
    }
    match input.dtype() {
        DType::F32 => maxpool_typed::<f32>(input, p, out, expected),
        DType::U8 => maxpool_typed::<u8>(input, p, out, expected),
        DType::I32 => maxpool_typed::<i32>(input, p, out, expected),
    }
}

fn maxpool_typed<T: Element>(input: &Tensor, p: &PoolParams, out: &mut Tensor, out_shape: Shape) -> Result<()> {
    let in_shape = input.shape();
    let src = input.data::<T>()?;
    let in_plane = in_shape.plane();
    out.data_mut::<T>()?
        .par_chunks_mut(out_shape.plane())
        .zip(src.par_chunks(in_plane))
        .for_each(|(dst, plane)| maxpool_plane(plane, in_shape.h, in_shape.w, p, dst, out_shape.w));
    Ok(())
}

pub fn maxpool2d(input: &Tensor, p: &PoolParams) -> Result<Tensor> {
    let mut out = Tensor::new(p.output_shape(input.shape())?, input.dtype())?;
    maxpool2d_into(input, p, &mut out)?;
    Ok(out)
}

/// Mean of each channel plane, summed in row-major order in `f32`.
pub fn global_avgpool_into(input: &Tensor, out: &mut Tensor) -> Result<()> {
    let s = input.shape();
    let expected = Shape::new(s.n, s.c, 1, 1)?;
    if out.shape() != expected {
        return Err(Error::Shape(format!(
            "global pool output is {}, expected {expected}",
            out.shape()
        )));
    }
    let src = input.as_f32()?;
    let count = s.plane() as f32;
    out.as_f32_mut()?
        .par_iter_mut()
        .zip(src.par_chunks(s.plane()))
        .for_each(|(o, plane)| {
            let mut sum = 0.0f32;
            for &v in plane {
                sum += v;
            }
            *o = sum / count;
        });
    Ok(())
}

pub fn global_avgpool(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1)?)?;
    global_avgpool_into(input, &mut out)?;
    Ok(out)
}

pub fn scale_in_place(t: &mut Tensor, coeff: f32) -> Result<()> {
    if !coeff.is_finite() {
        return Err(Error::Argument(format!("scale coefficient {coeff} is not finite")));
    }
    for x in t.as_f32_mut()? {
        *x *= coeff;
    }
    Ok(())
}

pub fn scale(t: &Tensor, coeff: f32) -> Result<Tensor> {
    let mut out = t.clone();
    scale_in_place(&mut out, coeff)?;
    Ok(out)
}

/// Softmax over the channel axis of `(n, c, 1, 1)` logits.
///
/// The maximum logit is subtracted before exponentiation; the normalizer is
/// accumulated in `f64`.
pub fn softmax_into(logits: &Tensor, out: &mut Tensor) -> Result<()> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::Shape(format!("softmax expects (n, c, 1, 1), got {s}")));
    }
    if out.shape() != s {
        return Err(Error::Shape(format!("softmax output is {}, expected {s}", out.shape())));
    }
    let src = logits.as_f32()?;
    let dst = out.as_f32_mut()?;
    for (x, y) in src.chunks(s.c).zip(dst.chunks_mut(s.c)) {
        let m = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut total = 0.0f64;
        for (o, &v) in y.iter_mut().zip(x) {
            *o = (v - m).exp();
            total += f64::from(*o);
        }
        for o in y.iter_mut() {
            *o = (f64::from(*o) / total) as f32;
        }
    }
    Ok(())
}

pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let mut out = Tensor::zeros(logits.shape())?;
    softmax_into(logits, &mut out)?;
    Ok(out)
}

/// The `k` most probable classes of the first batch item, highest first.
/// Equal probabilities are ordered by lower class index.
pub fn top_k(probs: &Tensor, k: usize) -> Result<Vec<(usize, f32)>> {
    let s = probs.shape();
    let per_item = s.c * s.plane();
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if k > per_item {
        return Err(Error::Argument(format!("k = {k} exceeds {per_item} classes")));
    }
    let values = &probs.as_f32()?[..per_item];
    let mut order: Vec<usize> = (0..per_item).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    Ok(order.into_iter().take(k).map(|i| (i, values[i])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], values: Vec<f32>) -> Tensor {
        Tensor::from_vec(Shape::new(shape[0], shape[1], shape[2], shape[3]).unwrap(), values).unwrap()
    }

    #[test]
    fn pointwise_scaling_conv() {
        let input = t([1, 1, 3, 3], vec![1.0; 9]);
        let w = WeightTensor::new(t([1, 1, 1, 1], vec![2.0]), vec![0.0]).unwrap();
        let out = conv2d_new(&input, &w, &ConvParams::square(1, 1, 0).unwrap()).unwrap();
        assert_eq!(out.as_f32().unwrap(), &[2.0; 9]);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let values: Vec<f32> = (0..20).map(|i| (i as f32 * 0.37).sin()).collect();
        let input = t([1, 1, 4, 5], values.clone());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = WeightTensor::new(t([1, 1, 3, 3], k), vec![0.0]).unwrap();
        let out = conv2d_new(&input, &w, &ConvParams::square(3, 1, 1).unwrap()).unwrap();
        assert_eq!(out.as_f32().unwrap(), values.as_slice());
    }

    #[test]
    fn conv_into_slice_leaves_other_channels() {
        let input = t([1, 1, 2, 2], vec![1.0; 4]);
        let w = WeightTensor::new(t([1, 1, 1, 1], vec![3.0]), vec![1.0]).unwrap();
        let mut out = Tensor::new(Shape::new(1, 3, 2, 2).unwrap(), DType::F32).unwrap();
        out.as_f32_mut().unwrap().fill(-7.0);
        conv2d(
            &input,
            &w,
            &ConvParams::square(1, 1, 0).unwrap(),
            &mut out.slice_channels(1, 1).unwrap(),
        )
        .unwrap();
        let d = out.as_f32().unwrap();
        assert_eq!(&d[0..4], &[-7.0; 4]);
        assert_eq!(&d[4..8], &[4.0; 4]);
        assert_eq!(&d[8..12], &[-7.0; 4]);
    }

    #[test]
    fn conv_shape_errors() {
        let input = t([1, 2, 4, 4], vec![0.0; 32]);
        let w = WeightTensor::new(t([1, 3, 3, 3], vec![0.0; 27]), vec![0.0]).unwrap();
        let p = ConvParams::square(3, 1, 1).unwrap();
        assert!(matches!(conv2d_new(&input, &w, &p), Err(Error::Shape(_))));

        let w = WeightTensor::new(t([1, 2, 3, 3], vec![0.0; 18]), vec![0.0]).unwrap();
        let mut wrong = Tensor::zeros(Shape::new(1, 1, 3, 3).unwrap()).unwrap();
        assert!(matches!(
            conv2d(&input, &w, &p, &mut wrong.view_mut()),
            Err(Error::Shape(_))
        ));
        assert!(WeightTensor::new(t([2, 1, 1, 1], vec![0.0; 2]), vec![0.0]).is_err());
    }

    #[test]
    fn valid_cols_cover_exactly_the_in_range_columns() {
        for in_w in 1..9 {
            for k in 1..5 {
                for pad in 0..k {
                    for stride in 1..4 {
                        let Ok(out_w) = window_extent(in_w, k, stride, pad) else {
                            continue;
                        };
                        for j in 0..k {
                            let (lo, hi) = valid_cols(j, pad, stride, in_w, out_w);
                            for x in 0..out_w {
                                let ix = (x * stride + j) as isize - pad as isize;
                                let inside = ix >= 0 && ix < in_w as isize;
                                assert_eq!(
                                    inside,
                                    (lo..hi).contains(&x),
                                    "in_w={in_w} k={k} pad={pad} s={stride} j={j} x={x}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn relu_examples() {
        let mut x = t([1, 3, 1, 1], vec![-1.0, 0.0, 2.5]);
        relu_in_place(&mut x).unwrap();
        assert_eq!(x.as_f32().unwrap(), &[0.0, 0.0, 2.5]);
        let pos = t([1, 2, 1, 2], vec![0.0, 1.0, 3.5, 9.0]);
        assert_eq!(relu(&pos).unwrap(), pos);
    }

    #[test]
    fn maxpool_examples() {
        let x = t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = PoolParams::new(2, 2, 0).unwrap();
        assert_eq!(maxpool2d(&x, &p).unwrap().as_f32().unwrap(), &[4.0]);

        let c = t([1, 2, 5, 5], vec![1.5; 50]);
        let p = PoolParams::new(3, 2, 0).unwrap();
        let out = maxpool2d(&c, &p).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 2, 2, 2).unwrap());
        assert!(out.as_f32().unwrap().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn maxpool_padding_never_wins() {
        let x = t([1, 1, 2, 2], vec![-1.0, -2.0, -3.0, -4.0]);
        let p = PoolParams::new(2, 1, 1).unwrap();
        let out = maxpool2d(&x, &p).unwrap();
        assert_eq!(
            out.as_f32().unwrap(),
            &[-1.0, -1.0, -2.0, -1.0, -1.0, -2.0, -3.0, -3.0, -4.0]
        );
    }

    #[test]
    fn maxpool_window_too_large() {
        let x = t([1, 1, 2, 2], vec![0.0; 4]);
        let p = PoolParams::new(3, 1, 0).unwrap();
        assert!(matches!(maxpool2d(&x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn global_avgpool_examples() {
        let x = t([1, 2, 2, 2], vec![3.0, 3.0, 3.0, 3.0, 1.0, 2.0, 3.0, 4.0]);
        let out = global_avgpool(&x).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 2, 1, 1).unwrap());
        assert_eq!(out.as_f32().unwrap(), &[3.0, 2.5]);
    }

    #[test]
    fn scale_examples() {
        let x = t([1, 3, 1, 1], vec![4.0, -0.3, 1e-30]);
        let same = scale(&x, 1.0).unwrap();
        assert_eq!(same, x);
        assert_eq!(scale(&x, 0.5).unwrap().as_f32().unwrap()[0], 2.0);
        assert!(scale(&x, f32::NAN).is_err());
    }

    #[test]
    fn softmax_examples() {
        let out = softmax(&t([1, 4, 1, 1], vec![0.7; 4])).unwrap();
        assert_eq!(out.as_f32().unwrap(), &[0.25; 4]);

        let out = softmax(&t([1, 2, 1, 1], vec![0.0, 3f32.ln()])).unwrap();
        let p = out.as_f32().unwrap();
        assert!((p[0] - 0.25).abs() < 1e-7 && (p[1] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let out = softmax(&t([1, 3, 1, 1], vec![1e30, 1e30, -1e30])).unwrap();
        assert_eq!(out.as_f32().unwrap(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn softmax_rejects_spatial_input() {
        assert!(matches!(softmax(&t([1, 1, 2, 1], vec![0.0; 2])), Err(Error::Shape(_))));
    }

    #[test]
    fn top_k_examples() {
        let p = t([1, 3, 1, 1], vec![0.1, 0.7, 0.2]);
        assert_eq!(top_k(&p, 1).unwrap(), vec![(1, 0.7)]);
        let tie = t([1, 2, 1, 1], vec![0.5, 0.5]);
        assert_eq!(top_k(&tie, 2).unwrap(), vec![(0, 0.5), (1, 0.5)]);
        assert!(matches!(top_k(&p, 0), Err(Error::Argument(_))));
        assert!(top_k(&p, 4).is_err());
    }
}
