//! Brute-force oracles and random instance generators shared by the
//! integration tests and the acceptance runner.
#![allow(dead_code)]

use num_bigint::BigInt;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use tinyinfer::graph::{FireConfig, FireWeights};
use tinyinfer::ops::{ConvParams, PoolParams, WeightTensor};
use tinyinfer::quant::QTensor;
use tinyinfer::{Shape, Tensor};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut StdRng, shape: Shape, lo: f32, hi: f32) -> Tensor {
    let v = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, v).unwrap()
}

pub fn random_weights(rng: &mut StdRng, out: usize, inp: usize, kh: usize, kw: usize) -> WeightTensor {
    let bound = (3.0 / (inp * kh * kw) as f32).sqrt();
    let t = random_tensor(rng, Shape::new(out, inp, kh, kw).unwrap(), -bound, bound);
    let bias = (0..out).map(|_| rng.random_range(-0.5..0.5)).collect();
    WeightTensor::new(t, bias).unwrap()
}

/// Convolution by six nested loops in f64. Returns the exact sums and the
/// sum of absolute terms (the scale against which rounding is judged).
pub fn conv_oracle(input: &Tensor, w: &WeightTensor, p: &ConvParams) -> (Vec<f64>, Vec<f64>) {
    let s = input.shape();
    let ws = w.tensor().shape();
    let oh = (s.h + 2 * p.pad - p.kernel_h) / p.stride + 1;
    let ow = (s.w + 2 * p.pad - p.kernel_w) / p.stride + 1;
    let x = input.as_f32().unwrap();
    let f = w.tensor().as_f32().unwrap();
    let mut sums = Vec::with_capacity(s.n * ws.n * oh * ow);
    let mut mags = Vec::with_capacity(sums.capacity());
    for n in 0..s.n {
        for o in 0..ws.n {
            for y in 0..oh {
                for xo in 0..ow {
                    let b = f64::from(w.bias()[o]);
                    let (mut acc, mut mag) = (b, b.abs());
                    for c in 0..s.c {
                        for i in 0..p.kernel_h {
                            for j in 0..p.kernel_w {
                                let iy = (y * p.stride + i) as isize - p.pad as isize;
                                let ix = (xo * p.stride + j) as isize - p.pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let xv = x[((n * s.c + c) * s.h + iy as usize) * s.w + ix as usize];
                                let wv = f[((o * s.c + c) * p.kernel_h + i) * p.kernel_w + j];
                                let t = f64::from(xv) * f64::from(wv);
                                acc += t;
                                mag += t.abs();
                            }
                        }
                    }
                    sums.push(acc);
                    mags.push(mag);
                }
            }
        }
    }
    (sums, mags)
}

/// Largest `|got − exact| / Σ|terms|` over all outputs.
pub fn conv_rel_error(got: &Tensor, exact: &[f64], mags: &[f64]) -> f64 {
    got.as_f32()
        .unwrap()
        .iter()
        .zip(exact)
        .zip(mags)
        .map(|((&g, &e), &m)| {
            if m == 0.0 {
                (f64::from(g) - e).abs()
            } else {
                (f64::from(g) - e).abs() / m
            }
        })
        .fold(0.0, f64::max)
}

/// Max pooling by scanning every window; padding never contributes.
pub fn maxpool_oracle(input: &Tensor, p: &PoolParams) -> Vec<f32> {
    let s = input.shape();
    let oh = (s.h + 2 * p.pad - p.kernel) / p.stride + 1;
    let ow = (s.w + 2 * p.pad - p.kernel) / p.stride + 1;
    let x = input.as_f32().unwrap();
    let mut out = Vec::new();
    for nc in 0..s.n * s.c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut best: Option<f32> = None;
                for i in 0..p.kernel {
                    for j in 0..p.kernel {
                        let iy = (y * p.stride + i) as isize - p.pad as isize;
                        let ix = (xo * p.stride + j) as isize - p.pad as isize;
                        if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                            continue;
                        }
                        let v = x[nc * s.h * s.w + iy as usize * s.w + ix as usize];
                        best = Some(best.map_or(v, |b: f32| b.max(v)));
                    }
                }
                out.push(best.expect("every window overlaps the input"));
            }
        }
    }
    out
}

pub fn mean_oracle(input: &Tensor) -> Vec<f64> {
    let s = input.shape();
    input
        .as_f32()
        .unwrap()
        .chunks(s.h * s.w)
        .map(|plane| plane.iter().map(|&v| f64::from(v)).sum::<f64>() / plane.len() as f64)
        .collect()
}

pub fn softmax_oracle(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().map(|&v| f64::from(v)).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

pub fn relu_oracle(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Full sort, descending probability, ascending index on ties.
pub fn top_k_oracle(probs: &[f32], k: usize) -> Vec<(usize, f32)> {
    let mut all: Vec<(usize, f32)> = probs.iter().copied().enumerate().collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Integer convolution accumulators in arbitrary precision.
pub fn qconv_oracle(input: &QTensor, weights: &QTensor, bias: &[i32], p: &ConvParams) -> Vec<BigInt> {
    let s = input.shape();
    let ws = weights.shape();
    let oh = (s.h + 2 * p.pad - p.kernel_h) / p.stride + 1;
    let ow = (s.w + 2 * p.pad - p.kernel_w) / p.stride + 1;
    let x = input.tensor().as_u8().unwrap();
    let f = weights.tensor().as_u8().unwrap();
    let (zx, zw) = (
        BigInt::from(input.params().zero_point),
        BigInt::from(weights.params().zero_point),
    );
    let mut out = Vec::new();
    for n in 0..s.n {
        for o in 0..ws.n {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = BigInt::from(bias[o]);
                    for c in 0..s.c {
                        for i in 0..p.kernel_h {
                            for j in 0..p.kernel_w {
                                let iy = (y * p.stride + i) as isize - p.pad as isize;
                                let ix = (xo * p.stride + j) as isize - p.pad as isize;
                                // Padding holds the real value 0, i.e. the input zero point.
                                let q = if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    zx.clone()
                                } else {
                                    BigInt::from(x[((n * s.c + c) * s.h + iy as usize) * s.w + ix as usize])
                                };
                                let w = BigInt::from(f[((o * s.c + c) * p.kernel_h + i) * p.kernel_w + j]);
                                acc += (q - &zx) * (w - &zw);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// Fire module that materializes each branch and copies both into a fresh
/// concatenation buffer.
pub fn fire_copy_reference(input: &Tensor, cfg: &FireConfig, w: &FireWeights) -> Tensor {
    use tinyinfer::ops::{conv2d_new, relu};
    let sq = relu(&conv2d_new(input, &w.squeeze, &ConvParams::square(1, 1, 0).unwrap()).unwrap()).unwrap();
    let e1 = relu(&conv2d_new(&sq, &w.expand1, &ConvParams::square(1, 1, 0).unwrap()).unwrap()).unwrap();
    let e3 = relu(&conv2d_new(&sq, &w.expand3, &ConvParams::square(3, 1, 1).unwrap()).unwrap()).unwrap();
    let s = input.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, cfg.out_channels(), s.h, s.w).unwrap()).unwrap();
    let plane = s.h * s.w;
    let (a, b) = (e1.as_f32().unwrap(), e3.as_f32().unwrap());
    let dst = out.as_f32_mut().unwrap();
    for n in 0..s.n {
        let base = n * cfg.out_channels() * plane;
        dst[base..base + cfg.expand1 * plane]
            .copy_from_slice(&a[n * cfg.expand1 * plane..(n + 1) * cfg.expand1 * plane]);
        dst[base + cfg.expand1 * plane..base + cfg.out_channels() * plane]
            .copy_from_slice(&b[n * cfg.expand3 * plane..(n + 1) * cfg.expand3 * plane]);
    }
    out
}

pub fn random_fire(rng: &mut StdRng) -> (Tensor, FireConfig, FireWeights) {
    let in_c = rng.random_range(1..=24);
    let cfg = FireConfig::new(
        rng.random_range(1..=8),
        rng.random_range(1..=12),
        rng.random_range(1..=12),
    )
    .unwrap();
    let (h, w) = (rng.random_range(1..=9), rng.random_range(1..=9));
    let n = rng.random_range(1..=2);
    let input = random_tensor(rng, Shape::new(n, in_c, h, w).unwrap(), -2.0, 2.0);
    let weights = FireWeights {
        squeeze: random_weights(rng, cfg.squeeze, in_c, 1, 1),
        expand1: random_weights(rng, cfg.expand1, cfg.squeeze, 1, 1),
        expand3: random_weights(rng, cfg.expand3, cfg.squeeze, 3, 3),
    };
    (input, cfg, weights)
}

/// Kernel, stride and padding of SqueezeNet's convolution layers.
pub const SQUEEZENET_CONV_GEOMETRY: [(usize, usize, usize); 3] = [(7, 2, 0), (1, 1, 0), (3, 1, 1)];

/// A random convolution with SqueezeNet geometry at reduced size.
pub fn random_conv(rng: &mut StdRng) -> (Tensor, WeightTensor, ConvParams) {
    let (k, stride, pad) = SQUEEZENET_CONV_GEOMETRY[rng.random_range(0..3)];
    let in_c = if k == 7 { 3 } else { rng.random_range(1..=48) };
    let out_c = rng.random_range(1..=16);
    let h = rng.random_range(k.max(1)..=k + 12);
    let w = rng.random_range(k.max(1)..=k + 12);
    let input = random_tensor(rng, Shape::new(1, in_c, h, w).unwrap(), -3.0, 3.0);
    (
        input,
        random_weights(rng, out_c, in_c, k, k),
        ConvParams::square(k, stride, pad).unwrap(),
    )
}

/// Bitwise equality of two float tensors.
pub fn bit_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape()
        && a.as_f32()
            .unwrap()
            .iter()
            .zip(b.as_f32().unwrap())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}
