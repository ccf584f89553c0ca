mod common;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use common::*;

use tinyinfer::graph::{
    build_graph, build_squeezenet, calibrate, calibrate_layers, fire, synthetic_input, synthetic_weights, BuildOptions,
    Clock, FireConfig, FireWeights, LayerKind, LayerParams, LayerSpec, QuantMode, Session,
};
use tinyinfer::model_io::{Preprocess, WeightStore};
use tinyinfer::ops::{conv2d_new, global_avgpool, maxpool2d, relu, softmax, ConvParams, PoolParams};
use tinyinfer::{allocation_count, Error, Shape, Tensor};

fn squeezenet(quant: Option<QuantMode>) -> (WeightStore, Tensor, Arc<tinyinfer::graph::Graph>) {
    let mut store = synthetic_weights(42).unwrap();
    let input = synthetic_input(7, 227, &Preprocess::default()).unwrap();
    if quant.is_some() {
        calibrate(&mut store, std::slice::from_ref(&input), &BuildOptions::default(), 4).unwrap();
    }
    let opts = BuildOptions {
        quantized: quant.is_some(),
        quant_mode: quant.unwrap_or_default(),
        ..BuildOptions::default()
    };
    let g = Arc::new(build_squeezenet(&store, &opts).unwrap());
    (store, input, g)
}

fn assert_is_distribution(p: &Tensor) {
    let total: f64 = p.as_f32().unwrap().iter().map(|&v| f64::from(v)).sum();
    assert!((total - 1.0).abs() <= 1e-5, "sum {total}");
}

#[test]
fn float_squeezenet_is_deterministic_allocation_free_and_worker_invariant() {
    let (_, input, g) = squeezenet(None);
    let mut outputs = Vec::new();
    for workers in [1, 2, 4] {
        let mut s = Session::new(Arc::clone(&g), workers).unwrap();
        for _ in 0..2 {
            let before = allocation_count();
            let (p, report) = s.run(&input).unwrap();
            assert_eq!(allocation_count(), before, "run allocated tensors");
            assert_eq!(report.entries.len(), g.step_count());
            outputs.push(p.clone());
        }
    }
    assert_eq!(outputs[0].shape(), Shape::new(1, 1000, 1, 1).unwrap());
    assert_is_distribution(&outputs[0]);
    for o in &outputs[1..] {
        assert!(bit_equal(&outputs[0], o));
    }
}

#[test]
fn quantized_squeezenet_is_worker_invariant_and_normalized() {
    for mode in [QuantMode::Requantize, QuantMode::FloatBetweenLayers] {
        let (_, input, g) = squeezenet(Some(mode));
        let mut outputs = Vec::new();
        for workers in [1, 4] {
            let mut s = Session::new(Arc::clone(&g), workers).unwrap();
            let before = allocation_count();
            let (p, _) = s.run(&input).unwrap();
            assert_eq!(allocation_count(), before);
            outputs.push(p.clone());
        }
        assert_is_distribution(&outputs[0]);
        assert!(bit_equal(&outputs[0], &outputs[1]));
    }
}

#[test]
fn shape_table_matches_analytic_extents() {
    let (_, _, g) = squeezenet(None);
    let ext = |n: usize, k: usize, s: usize| (n - k) / s + 1;
    let conv1 = ext(227, 7, 2);
    let pool1 = ext(conv1, 3, 2);
    let pool4 = ext(pool1, 3, 2);
    let pool8 = ext(pool4, 3, 2);
    assert_eq!((conv1, pool1, pool4, pool8), (111, 55, 27, 13));
    let expected: Vec<(&str, [usize; 4])> = vec![
        ("conv1", [1, 96, conv1, conv1]),
        ("relu1", [1, 96, conv1, conv1]),
        ("pool1", [1, 96, pool1, pool1]),
        ("fire2", [1, 128, pool1, pool1]),
        ("fire3", [1, 128, pool1, pool1]),
        ("fire4", [1, 256, pool1, pool1]),
        ("pool4", [1, 256, pool4, pool4]),
        ("fire5", [1, 256, pool4, pool4]),
        ("fire6", [1, 384, pool4, pool4]),
        ("fire7", [1, 384, pool4, pool4]),
        ("fire8", [1, 512, pool4, pool4]),
        ("pool8", [1, 512, pool8, pool8]),
        ("fire9", [1, 512, pool8, pool8]),
        ("conv10", [1, 1000, pool8, pool8]),
        ("relu10", [1, 1000, pool8, pool8]),
        ("pool10", [1, 1000, 1, 1]),
        ("scale", [1, 1000, 1, 1]),
        ("prob", [1, 1000, 1, 1]),
    ];
    let got: Vec<(&str, [usize; 4])> = g.shape_table().iter().map(|(n, s)| (n.as_str(), s.dims())).collect();
    assert_eq!(got, expected);
}

#[test]
fn quantized_layer_list_has_conversion_stages() {
    let (_, _, g) = squeezenet(Some(QuantMode::Requantize));
    let kinds: Vec<LayerKind> = g.layers().iter().map(LayerSpec::kind).collect();
    assert!(kinds.contains(&LayerKind::Quantize));
    assert!(kinds.contains(&LayerKind::Dequantize));
    // Between any two integer convolutions the chain passes a Requantize
    // (fire modules requantize internally).
    let conv_like: Vec<usize> = kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| matches!(k, LayerKind::Conv | LayerKind::Fire))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(kinds[conv_like[0] + 1], LayerKind::Requantize);
    let steps: Vec<_> = g.steps().collect();
    for w in steps.windows(2) {
        if w[0].kind == LayerKind::Conv {
            assert!(
                matches!(w[1].kind, LayerKind::Requantize | LayerKind::Dequantize),
                "{} is followed by {}",
                w[0].name,
                w[1].name
            );
        }
    }
    assert_eq!(kinds.last(), Some(&LayerKind::Softmax));
    assert!(g.is_quantized());
}

#[test]
fn unit_attenuation_equals_no_scale_node() {
    let store = synthetic_weights(3).unwrap();
    let input = synthetic_input(4, 227, &Preprocess::default()).unwrap();
    let run = |attenuation| {
        let opts = BuildOptions {
            attenuation,
            ..BuildOptions::default()
        };
        let g = Arc::new(build_squeezenet(&store, &opts).unwrap());
        g.run(&input, 2).unwrap().0
    };
    let with = run(Some(1.0));
    assert!(bit_equal(&with, &run(None)));
    let top = |t: &Tensor| tinyinfer::ops::top_k(t, 1).unwrap()[0].0;
    for a in [0.5, 3.0] {
        assert_eq!(top(&run(Some(a))), top(&with));
    }
}

#[test]
fn wrong_input_shape_is_a_shape_error() {
    let (_, _, g) = squeezenet(None);
    let mut s = Session::new(g, 1).unwrap();
    let x = Tensor::zeros(Shape::new(1, 3, 224, 224).unwrap()).unwrap();
    assert!(matches!(s.run(&x), Err(Error::Shape(_))));
}

#[test]
fn build_errors_name_the_layer() {
    let mut store = synthetic_weights(1).unwrap();
    store.rename("conv10.weight", "classifier.weight");
    let err = build_squeezenet(&store, &BuildOptions::default()).unwrap_err();
    assert!(matches!(&err, Error::Build { layer, .. } if layer == "conv10"), "{err}");

    let mut store = synthetic_weights(1).unwrap();
    store
        .insert_f32("fire3.squeeze.weight", &[16, 128, 3, 3], &vec![0.0; 16 * 128 * 9])
        .unwrap();
    let err = build_squeezenet(&store, &BuildOptions::default()).unwrap_err();
    assert!(err.to_string().contains("fire3.squeeze"), "{err}");
}

/// A small custom network checked against the same kernels called by hand.
#[test]
fn custom_graph_matches_manual_composition() {
    let mut r = rng(5);
    let mut store = WeightStore::new();
    let conv_w = random_weights(&mut r, 6, 3, 3, 3);
    let fw = FireWeights {
        squeeze: random_weights(&mut r, 2, 6, 1, 1),
        expand1: random_weights(&mut r, 3, 2, 1, 1),
        expand3: random_weights(&mut r, 4, 2, 3, 3),
    };
    let put = |store: &mut WeightStore, name: &str, w: &tinyinfer::ops::WeightTensor| {
        let d = w.tensor().shape().dims();
        store
            .insert_f32(format!("{name}.weight"), &d, w.tensor().as_f32().unwrap())
            .unwrap();
        store.insert_f32(format!("{name}.bias"), &[d[0]], w.bias()).unwrap();
    };
    put(&mut store, "c1", &conv_w);
    put(&mut store, "f.squeeze", &fw.squeeze);
    put(&mut store, "f.expand1x1", &fw.expand1);
    put(&mut store, "f.expand3x3", &fw.expand3);

    let cp = ConvParams::square(3, 1, 1).unwrap();
    let pp = PoolParams::new(2, 2, 0).unwrap();
    let cfg = FireConfig::new(2, 3, 4).unwrap();
    let layers = vec![
        LayerSpec::new("c1", LayerParams::Conv { filters: 6, conv: cp }),
        LayerSpec::new("r1", LayerParams::ReLU),
        LayerSpec::new("p1", LayerParams::MaxPool(pp)),
        LayerSpec::new("f", LayerParams::Fire(cfg)),
        LayerSpec::new("gap", LayerParams::GlobalAvgPool),
        LayerSpec::new("sm", LayerParams::Softmax),
    ];
    let shape = Shape::new(1, 3, 10, 10).unwrap();
    let g = Arc::new(build_graph(shape, &layers, &store, None).unwrap());
    let x = random_tensor(&mut r, shape, -1.0, 1.0);
    let (got, report) = g.run(&x, 3).unwrap();

    let h = maxpool2d(&relu(&conv2d_new(&x, &conv_w, &cp).unwrap()).unwrap(), &pp).unwrap();
    let expected = softmax(&global_avgpool(&fire(&h, &cfg, &fw).unwrap()).unwrap()).unwrap();
    assert!(bit_equal(&got, &expected));
    let names: Vec<&str> = report.entries.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "c1",
            "r1",
            "p1",
            "f/squeeze",
            "f/squeeze_relu",
            "f/expand1x1",
            "f/expand1x1_relu",
            "f/expand3x3",
            "f/expand3x3_relu",
            "f/concat",
            "gap",
            "sm"
        ]
    );
    assert!(g.buffer_count() < g.step_count());
}

#[test]
fn duplicate_layer_names_are_rejected() {
    let layers = vec![
        LayerSpec::new("a", LayerParams::ReLU),
        LayerSpec::new("a", LayerParams::ReLU),
    ];
    let err = build_graph(Shape::new(1, 1, 2, 2).unwrap(), &layers, &WeightStore::new(), None).unwrap_err();
    assert!(matches!(err, Error::Build { .. }));
}

#[test]
fn calibration_ranges_are_unions_and_include_zero() {
    let layers = vec![
        LayerSpec::new(
            "c",
            LayerParams::Conv {
                filters: 2,
                conv: ConvParams::square(1, 1, 0).unwrap(),
            },
        ),
        LayerSpec::new("r", LayerParams::ReLU),
        LayerSpec::new("gap", LayerParams::GlobalAvgPool),
    ];
    let mut store = WeightStore::new();
    store.insert_f32("c.weight", &[2, 1, 1, 1], &[1.0, -1.0]).unwrap();
    store.insert_f32("c.bias", &[2], &[0.0, 0.0]).unwrap();
    let shape = Shape::new(1, 1, 2, 2).unwrap();
    let a = Tensor::from_vec(shape, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::from_vec(shape, vec![-5.0f32, 0.5, 0.5, 0.5]).unwrap();

    let mut s1 = store.clone();
    calibrate_layers(shape, &layers, &mut s1, std::slice::from_ref(&a), 1).unwrap();
    assert_eq!(s1.activation_range("input"), Some((1.0, 4.0)));
    assert_eq!(s1.activation_range("c"), Some((0.0, 4.0)));

    let mut s2 = store.clone();
    calibrate_layers(shape, &layers, &mut s2, &[a.clone(), b], 1).unwrap();
    assert_eq!(s2.activation_range("input"), Some((-5.0, 4.0)));
    assert_eq!(s2.activation_range("c"), Some((0.0, 5.0)));
    // Input range [−5, 4] widened to contain 0 is already satisfied.
    let p = s2.activation_params("input").unwrap();
    assert_eq!(p.quantize(0.0) as i32, p.zero_point);

    let mut s3 = store.clone();
    let zeros = Tensor::zeros(shape).unwrap();
    calibrate_layers(shape, &layers, &mut s3, &[zeros], 1).unwrap();
    let p = s3.activation_params("input").unwrap();
    assert_eq!((p.scale, p.zero_point), (1.0, 0));
}

struct StepClock(AtomicU64);

impl Clock for StepClock {
    fn now(&self) -> Duration {
        Duration::from_micros(self.0.fetch_add(250, Ordering::SeqCst))
    }
}

#[test]
fn injected_clock_drives_step_timings() {
    let layers = vec![
        LayerSpec::new("gap", LayerParams::GlobalAvgPool),
        LayerSpec::new("r", LayerParams::ReLU),
        LayerSpec::new("sm", LayerParams::Softmax),
    ];
    let shape = Shape::new(1, 4, 3, 3).unwrap();
    let g = Arc::new(build_graph(shape, &layers, &WeightStore::new(), None).unwrap());
    let mut s = Session::with_clock(g, 1, Arc::new(StepClock(AtomicU64::new(0)))).unwrap();
    let x = Tensor::zeros(shape).unwrap();
    let (p, report) = s.run(&x).unwrap();
    assert_eq!(p.as_f32().unwrap(), &[0.25; 4]);
    assert_eq!(report.entries.len(), 3);
    for e in &report.entries {
        assert_eq!((e.nanos, e.iterations), (250_000, 1));
    }
    assert!((report.total_ms() - 0.75).abs() < 1e-12);
}

#[test]
fn in_place_layer_cannot_consume_the_graph_input() {
    let layers = vec![LayerSpec::new("r", LayerParams::ReLU)];
    let err = build_graph(Shape::new(1, 1, 2, 2).unwrap(), &layers, &WeightStore::new(), None).unwrap_err();
    assert!(matches!(err, Error::Build { .. }));
}

#[test]
fn observer_sees_every_calibration_point() {
    let (_, input, g) = squeezenet(None);
    let mut s = Session::new(g, 2).unwrap();
    let mut keys = Vec::new();
    s.run_observed(&input, |k, t| keys.push((k.to_string(), t.shape().c)))
        .unwrap();
    assert_eq!(keys.first(), Some(&("conv1".to_string(), 96)));
    assert!(keys.contains(&("fire2.squeeze".to_string(), 16)));
    assert!(keys.contains(&("fire9.expand".to_string(), 512)));
    assert_eq!(keys.last(), Some(&("conv10".to_string(), 1000)));
    assert_eq!(keys.len(), 2 + 8 * 2);
}
