use std::collections::BTreeMap;
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::model_io::{decode_input, encode_raw_input, Preprocess, WeightStore, INPUT_SIZE};
use crate::ops::{ConvParams, PoolParams};
use crate::quant::QuantParams;
use crate::tensor::{Shape, Tensor};

use super::build::{build_graph, Graph, QuantMode};
use super::exec::Session;
use super::{FireConfig, LayerParams, LayerSpec};

pub const NUM_CLASSES: usize = 1000;

pub const ARCH: &str = "squeezenet1_0";

const FIRES: [(&str, usize, usize, usize); 8] = [
    ("fire2", 16, 64, 64),
    ("fire3", 16, 64, 64),
    ("fire4", 32, 128, 128),
    ("fire5", 32, 128, 128),
    ("fire6", 48, 192, 192),
    ("fire7", 48, 192, 192),
    ("fire8", 64, 256, 256),
    ("fire9", 64, 256, 256),
];

/// The SqueezeNet v1.0 layer list. `attenuation`, when given, scales the
/// logits before the softmax.
pub fn squeezenet_v1_0(attenuation: Option<f32>) -> Vec<LayerSpec> {
    let pool = || LayerParams::MaxPool(PoolParams::new(3, 2, 0).expect("static params"));
    let fire = |i: usize| {
        let (name, s, e1, e3) = FIRES[i];
        LayerSpec::new(
            name,
            LayerParams::Fire(FireConfig::new(s, e1, e3).expect("static config")),
        )
    };
    let mut layers = vec![
        LayerSpec::new(
            "conv1",
            LayerParams::Conv {
                filters: 96,
                conv: ConvParams::square(7, 2, 0).expect("static params"),
            },
        ),
        LayerSpec::new("relu1", LayerParams::ReLU),
        LayerSpec::new("pool1", pool()),
        fire(0),
        fire(1),
        fire(2),
        LayerSpec::new("pool4", pool()),
        fire(3),
        fire(4),
        fire(5),
        fire(6),
        LayerSpec::new("pool8", pool()),
        fire(7),
        LayerSpec::new(
            "conv10",
            LayerParams::Conv {
                filters: NUM_CLASSES,
                conv: ConvParams::square(1, 1, 0).expect("static params"),
            },
        ),
        LayerSpec::new("relu10", LayerParams::ReLU),
        LayerSpec::new("pool10", LayerParams::GlobalAvgPool),
    ];
    if let Some(a) = attenuation {
        layers.push(LayerSpec::new("scale", LayerParams::Scale(a)));
    }
    layers.push(LayerSpec::new("prob", LayerParams::Softmax));
    layers
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuildOptions {
    pub quantized: bool,
    pub quant_mode: QuantMode,
    /// Logit attenuation; `None` leaves the scale layer out.
    pub attenuation: Option<f32>,
    pub input_size: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            quantized: false,
            quant_mode: QuantMode::default(),
            attenuation: Some(1.0),
            input_size: INPUT_SIZE,
        }
    }
}

impl BuildOptions {
    pub fn input_shape(&self) -> Result<Shape> {
        Shape::new(1, 3, self.input_size, self.input_size)
    }
}

pub fn build_squeezenet(store: &WeightStore, opts: &BuildOptions) -> Result<Graph> {
    if let Some(arch) = store.arch() {
        if arch != ARCH {
            return Err(Error::build("model", format!("weights are for `{arch}`, not `{ARCH}`")));
        }
    }
    let layers = squeezenet_v1_0(opts.attenuation);
    build_graph(
        opts.input_shape()?,
        &layers,
        store,
        opts.quantized.then_some(opts.quant_mode),
    )
}

/// Every convolution of SqueezeNet v1.0 as (weight prefix, out, in, kernel).
fn conv_table() -> Vec<(String, usize, usize, usize)> {
    let mut t = vec![("conv1".to_string(), 96, 3, 7)];
    let mut in_c = 96;
    for (name, s, e1, e3) in FIRES {
        t.push((format!("{name}.squeeze"), s, in_c, 1));
        t.push((format!("{name}.expand1x1"), e1, s, 1));
        t.push((format!("{name}.expand3x3"), e3, s, 3));
        in_c = e1 + e3;
    }
    t.push(("conv10".to_string(), NUM_CLASSES, in_c, 1));
    t
}

/// Seeded random SqueezeNet weights: He-uniform filters, small biases.
///
/// conv1 is further divided by 64 because it sees mean-subtracted pixel
/// values rather than unit-variance activations; without that the logits
/// are large enough to saturate the softmax.
pub fn synthetic_weights(seed: u64) -> Result<WeightStore> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    store.set_arch(ARCH)?;
    store.set_source(&format!("synthetic seed {seed}"))?;
    store.set_preprocess(Preprocess::default())?;
    for (name, out, inp, k) in conv_table() {
        let fan_in = inp * k * k;
        let gain = if name == "conv1" { 1.0 / 64.0 } else { 1.0 };
        let bound = (gain * (6.0 / fan_in as f64).sqrt()) as f32;
        let w: Vec<f32> = (0..out * fan_in).map(|_| rng.random_range(-bound..bound)).collect();
        let b: Vec<f32> = (0..out).map(|_| rng.random_range(-0.01..0.01)).collect();
        store.insert_f32(format!("{name}.weight"), &[out, inp, k, k], &w)?;
        store.insert_f32(format!("{name}.bias"), &[out], &b)?;
    }
    Ok(store)
}

/// Seeded random RGB image, interleaved row-major.
pub fn synthetic_image(seed: u64, size: usize) -> Vec<u8> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..size * size * 3).map(|_| rng.random()).collect()
}

/// [`synthetic_image`] run through the input preprocessing.
pub fn synthetic_input(seed: u64, size: usize, pre: &Preprocess) -> Result<Tensor> {
    decode_input(&encode_raw_input(&synthetic_image(seed, size)), pre, size)
}

/// Records per-activation ranges for an arbitrary float network by running
/// `inputs` through it; the ranges are stored in `store` so quantized
/// graphs can be built from it.
pub fn calibrate_layers(
    input_shape: Shape,
    layers: &[LayerSpec],
    store: &mut WeightStore,
    inputs: &[Tensor],
    workers: usize,
) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Argument("calibration needs at least one input".into()));
    }
    let graph = Arc::new(build_graph(input_shape, layers, store, None)?);
    let mut session = Session::new(graph, workers)?;
    let mut ranges: BTreeMap<String, (f32, f32)> = BTreeMap::new();
    let mut widen = |key: &str, t: &Tensor| {
        let values = t.as_f32().expect("float graph");
        let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let e = ranges.entry(key.to_string()).or_insert((lo, hi));
        e.0 = e.0.min(lo);
        e.1 = e.1.max(hi);
    };
    for x in inputs {
        widen("input", x);
        session.run_observed(x, &mut widen)?;
    }
    for (key, (lo, hi)) in ranges {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::build(key, "activation range is not finite"));
        }
        store.set_activation(&key, lo, hi, QuantParams::from_range(lo, hi)?)?;
    }
    Ok(())
}

/// [`calibrate_layers`] for SqueezeNet v1.0.
pub fn calibrate(store: &mut WeightStore, inputs: &[Tensor], opts: &BuildOptions, workers: usize) -> Result<()> {
    calibrate_layers(
        opts.input_shape()?,
        &squeezenet_v1_0(opts.attenuation),
        store,
        inputs,
        workers,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LayerKind;

    #[test]
    fn shape_chain_matches_reference_extents() {
        let store = synthetic_weights(1).unwrap();
        let g = build_squeezenet(&store, &BuildOptions::default()).unwrap();
        let table: BTreeMap<_, _> = g.shape_table().iter().cloned().collect();
        assert_eq!(table["conv1"].dims(), [1, 96, 111, 111]);
        assert_eq!(table["pool1"].dims(), [1, 96, 55, 55]);
        assert_eq!(table["fire4"].dims(), [1, 256, 55, 55]);
        assert_eq!(table["pool4"].dims(), [1, 256, 27, 27]);
        assert_eq!(table["pool8"].dims(), [1, 512, 13, 13]);
        assert_eq!(table["conv10"].dims(), [1, 1000, 13, 13]);
        assert_eq!(g.output_shape().dims(), [1, 1000, 1, 1]);
    }

    #[test]
    fn three_max_pools_after_conv1_fire4_fire8() {
        let layers = squeezenet_v1_0(None);
        let names: Vec<_> = layers.iter().map(|l| l.name.as_str()).collect();
        let pools: Vec<_> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind() == LayerKind::MaxPool)
            .map(|(i, _)| names[i - 1])
            .collect();
        assert_eq!(pools, ["relu1", "fire4", "fire8"]);
        assert_eq!(names.last(), Some(&"prob"));
        assert!(!names.contains(&"scale"));
    }

    #[test]
    fn missing_weight_names_the_layer() {
        let mut store = synthetic_weights(1).unwrap();
        store.remove("fire6.expand3x3.weight");
        let err = build_squeezenet(&store, &BuildOptions::default()).unwrap_err();
        assert!(err.to_string().contains("fire6.expand3x3"), "{err}");
    }

    #[test]
    fn quantized_build_requires_calibration() {
        let store = synthetic_weights(1).unwrap();
        let opts = BuildOptions {
            quantized: true,
            ..BuildOptions::default()
        };
        assert!(matches!(build_squeezenet(&store, &opts), Err(Error::Build { .. })));
    }

    #[test]
    fn synthetic_weights_are_reproducible() {
        let a = synthetic_weights(7).unwrap().to_bytes();
        let b = synthetic_weights(7).unwrap().to_bytes();
        let c = synthetic_weights(8).unwrap().to_bytes();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
