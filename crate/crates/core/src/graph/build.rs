use crate::error::{Error, Result};
use crate::model_io::WeightStore;
use crate::ops::{ConvParams, PoolParams, WeightTensor};
use crate::quant::{check_accumulator_range, choose_quant_params, quantize_bias, quantize_tensor, QuantParams};
use crate::tensor::{DType, Shape, Tensor};

use super::{FireConfig, LayerKind, LayerParams, LayerSpec};

/// How a quantized graph moves activations between integer convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QuantMode {
    /// Activations stay 8-bit; each integer convolution's accumulators
    /// are requantized onto the next layer's scale.
    #[default]
    Requantize,
    /// Activations return to float after every convolution and are
    /// quantized again before the next one.
    FloatBetweenLayers,
}

pub(crate) type ValueId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Src {
    Input,
    Value(ValueId),
}

/// A channel range of a value that a step writes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Dst {
    pub value: ValueId,
    pub offset: usize,
    pub channels: usize,
}

#[derive(Debug)]
pub(crate) enum Op {
    Conv {
        weights: WeightTensor,
        params: ConvParams,
        src: Src,
        dst: Dst,
    },
    Relu {
        dst: Dst,
    },
    QRelu {
        dst: Dst,
        zero_point: i32,
    },
    MaxPool {
        params: PoolParams,
        src: Src,
        dst: ValueId,
    },
    GlobalAvgPool {
        src: Src,
        dst: ValueId,
    },
    Scale {
        dst: ValueId,
        coeff: f32,
    },
    Softmax {
        src: Src,
        dst: ValueId,
    },
    Concat,
    Quantize {
        src: Src,
        dst: ValueId,
        params: QuantParams,
    },
    QConv {
        weights: Tensor,
        w_zp: i32,
        bias: Vec<i32>,
        params: ConvParams,
        src: Src,
        in_zp: i32,
        dst: ValueId,
    },
    Requantize {
        src: ValueId,
        dst: Dst,
        multiplier: f64,
        out_params: QuantParams,
    },
    DequantizeAcc {
        src: ValueId,
        dst: Dst,
        acc_scale: f32,
    },
    Dequantize {
        src: Src,
        dst: ValueId,
        params: QuantParams,
    },
}

impl Op {
    /// Values the step reads or writes.
    fn touched(&self) -> Vec<ValueId> {
        let src = |s: &Src| match s {
            Src::Input => None,
            Src::Value(v) => Some(*v),
        };
        let mut out: Vec<ValueId> = match self {
            Op::Conv { src: s, dst, .. } => src(s).into_iter().chain([dst.value]).collect(),
            Op::Relu { dst } | Op::QRelu { dst, .. } => vec![dst.value],
            Op::MaxPool { src: s, dst, .. }
            | Op::GlobalAvgPool { src: s, dst }
            | Op::Softmax { src: s, dst }
            | Op::Quantize { src: s, dst, .. }
            | Op::QConv { src: s, dst, .. }
            | Op::Dequantize { src: s, dst, .. } => src(s).into_iter().chain([*dst]).collect(),
            Op::Scale { dst, .. } => vec![*dst],
            Op::Concat => vec![],
            Op::Requantize { src, dst, .. } | Op::DequantizeAcc { src, dst, .. } => vec![*src, dst.value],
        };
        out.dedup();
        out
    }

    /// The value whose logical shape must be set before the step runs.
    pub(crate) fn written(&self) -> Option<ValueId> {
        match self {
            Op::Conv { dst, .. } | Op::Requantize { dst, .. } | Op::DequantizeAcc { dst, .. } => Some(dst.value),
            Op::MaxPool { dst, .. }
            | Op::GlobalAvgPool { dst, .. }
            | Op::Softmax { dst, .. }
            | Op::Quantize { dst, .. }
            | Op::QConv { dst, .. }
            | Op::Dequantize { dst, .. } => Some(*dst),
            Op::Relu { .. } | Op::QRelu { .. } | Op::Scale { .. } | Op::Concat => None,
        }
    }
}

#[derive(Debug)]
pub(crate) struct Step {
    pub name: String,
    pub kind: LayerKind,
    pub op: Op,
    /// Activation key this step completes and the value holding it.
    pub probe: Option<(String, ValueId)>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ValueInfo {
    pub shape: Shape,
    pub dtype: DType,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct SlotSpec {
    pub dtype: DType,
    pub capacity: usize,
    pub first_shape: Shape,
}

/// Name and kind of one executed step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepInfo<'a> {
    pub name: &'a str,
    pub kind: LayerKind,
}

/// An executable network: weights bound, shapes checked, buffers planned.
///
/// Immutable once built; share it behind an `Arc` and give each concurrent
/// caller its own [`Session`](super::Session).
#[derive(Debug)]
pub struct Graph {
    pub(crate) input_shape: Shape,
    pub(crate) layers: Vec<LayerSpec>,
    pub(crate) shape_table: Vec<(String, Shape)>,
    pub(crate) steps: Vec<Step>,
    pub(crate) values: Vec<ValueInfo>,
    pub(crate) value_slot: Vec<usize>,
    pub(crate) slots: Vec<SlotSpec>,
    pub(crate) output: ValueId,
    pub(crate) quant_mode: Option<QuantMode>,
}

impl Graph {
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        self.values[self.output].shape
    }

    /// Layer list, including quantization stages inserted at build time.
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output shape of every entry of [`Graph::layers`].
    pub fn shape_table(&self) -> &[(String, Shape)] {
        &self.shape_table
    }

    /// Executed steps in order; fire modules appear decomposed.
    pub fn steps(&self) -> impl Iterator<Item = StepInfo<'_>> + '_ {
        self.steps.iter().map(|s| StepInfo {
            name: &s.name,
            kind: s.kind,
        })
    }

    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    pub fn quant_mode(&self) -> Option<QuantMode> {
        self.quant_mode
    }

    pub fn is_quantized(&self) -> bool {
        self.quant_mode.is_some()
    }

    /// Number of activation buffers in the plan.
    pub fn buffer_count(&self) -> usize {
        self.slots.len()
    }

    /// Bytes held by the planned activation buffers (the engine's peak
    /// activation memory).
    pub fn planned_bytes(&self) -> usize {
        self.slots.iter().map(|s| s.capacity * s.dtype.size_of()).sum()
    }
}

#[derive(Clone, Debug)]
struct Current {
    src: Src,
    shape: Shape,
    dtype: DType,
    params: Option<QuantParams>,
    /// Name under which this activation's calibration is stored.
    key: String,
}

struct Builder<'a> {
    store: &'a WeightStore,
    mode: Option<QuantMode>,
    steps: Vec<Step>,
    values: Vec<ValueInfo>,
    layers: Vec<LayerSpec>,
    shape_table: Vec<(String, Shape)>,
    cur: Current,
}

/// Binds `layers` to weights from `store` and plans execution.
///
/// With `quant` set, convolutions run on 8-bit integers using the
/// activation calibration recorded in the store.
pub fn build_graph(
    input_shape: Shape,
    layers: &[LayerSpec],
    store: &WeightStore,
    quant: Option<QuantMode>,
) -> Result<Graph> {
    input_shape.validate()?;
    let mut names = std::collections::HashSet::new();
    for l in layers {
        if !names.insert(l.name.as_str()) {
            return Err(Error::build(&l.name, "duplicate layer name"));
        }
    }
    let mut b = Builder {
        store,
        mode: quant,
        steps: Vec::new(),
        values: Vec::new(),
        layers: Vec::new(),
        shape_table: Vec::new(),
        cur: Current {
            src: Src::Input,
            shape: input_shape,
            dtype: DType::F32,
            params: None,
            key: "input".into(),
        },
    };
    for (i, layer) in layers.iter().enumerate() {
        let later_conv = layers[i + 1..]
            .iter()
            .any(|l| matches!(l.params, LayerParams::Conv { .. } | LayerParams::Fire(_)));
        b.layer(layer, later_conv)?;
    }
    b.ensure_f32()?;
    let output = match b.cur.src {
        Src::Value(v) => v,
        Src::Input => return Err(Error::build("input", "graph has no layers")),
    };
    let (value_slot, slots) = plan_buffers(&b.steps, &b.values, output);
    Ok(Graph {
        input_shape,
        layers: b.layers,
        shape_table: b.shape_table,
        steps: b.steps,
        values: b.values,
        value_slot,
        slots,
        output,
        quant_mode: quant,
    })
}

/// Assigns every value a buffer. A buffer is reused once the last step
/// touching its previous value has run; values touched by the same step
/// never share one.
fn plan_buffers(steps: &[Step], values: &[ValueInfo], output: ValueId) -> (Vec<usize>, Vec<SlotSpec>) {
    let mut first = vec![usize::MAX; values.len()];
    let mut last = vec![0usize; values.len()];
    for (i, step) in steps.iter().enumerate() {
        for v in step.op.touched() {
            first[v] = first[v].min(i);
            last[v] = last[v].max(i);
        }
    }
    last[output] = usize::MAX;

    let mut slots: Vec<SlotSpec> = Vec::new();
    let mut busy_until: Vec<usize> = Vec::new();
    let mut value_slot = vec![usize::MAX; values.len()];
    for (i, step) in steps.iter().enumerate() {
        for v in step.op.touched() {
            if first[v] != i || value_slot[v] != usize::MAX {
                continue;
            }
            let info = values[v];
            let free = (0..slots.len()).find(|&s| slots[s].dtype == info.dtype && busy_until[s] < i);
            let s = match free {
                Some(s) => s,
                None => {
                    slots.push(SlotSpec {
                        dtype: info.dtype,
                        capacity: 0,
                        first_shape: info.shape,
                    });
                    busy_until.push(0);
                    slots.len() - 1
                }
            };
            slots[s].capacity = slots[s].capacity.max(info.shape.numel());
            busy_until[s] = last[v];
            value_slot[v] = s;
        }
    }
    (value_slot, slots)
}

fn dims4(shape: &[u32]) -> Option<[usize; 4]> {
    <[u32; 4]>::try_from(shape).ok().map(|d| d.map(|x| x as usize))
}

impl<'a> Builder<'a> {
    fn value(&mut self, shape: Shape, dtype: DType) -> ValueId {
        self.values.push(ValueInfo { shape, dtype });
        self.values.len() - 1
    }

    fn push(&mut self, name: impl Into<String>, kind: LayerKind, op: Op) {
        self.steps.push(Step {
            name: name.into(),
            kind,
            op,
            probe: None,
        });
    }

    fn probe_last(&mut self, key: &str, value: ValueId) {
        if let Some(s) = self.steps.last_mut() {
            s.probe = Some((key.to_string(), value));
        }
    }

    fn record(&mut self, spec: LayerSpec) {
        self.shape_table.push((spec.name.clone(), self.cur.shape));
        self.layers.push(spec);
    }

    fn set_cur(&mut self, v: ValueId, params: Option<QuantParams>, key: Option<String>) {
        let info = self.values[v];
        self.cur.src = Src::Value(v);
        self.cur.shape = info.shape;
        self.cur.dtype = info.dtype;
        self.cur.params = params;
        if let Some(k) = key {
            self.cur.key = k;
        }
    }

    fn cur_value(&self, layer: &str) -> Result<ValueId> {
        match self.cur.src {
            Src::Value(v) => Ok(v),
            Src::Input => Err(Error::build(layer, "in-place layer cannot read the graph input")),
        }
    }

    fn full(&self, v: ValueId) -> Dst {
        Dst {
            value: v,
            offset: 0,
            channels: self.values[v].shape.c,
        }
    }

    fn act_params(&self, layer: &str, key: &str) -> Result<QuantParams> {
        self.store.activation_params(key).ok_or_else(|| {
            Error::build(
                layer,
                format!("no calibrated activation range for `{key}`; calibrate the weights first"),
            )
        })
    }

    fn float_weights(&self, layer: &str, in_c: usize, filters: usize, conv: &ConvParams) -> Result<WeightTensor> {
        let wname = format!("{layer}.weight");
        let bname = format!("{layer}.bias");
        let expected = [filters, in_c, conv.kernel_h, conv.kernel_w];
        let w = self
            .store
            .get(&wname)
            .ok_or_else(|| Error::build(layer, format!("missing weight entry `{wname}`")))?;
        if dims4(w.dims()) != Some(expected) {
            return Err(Error::build(
                layer,
                format!("`{wname}` has dims {:?}, expected {expected:?}", w.dims()),
            ));
        }
        let tensor = match (w.dtype(), w.quant()) {
            (DType::F32, _) => w.to_tensor()?,
            (DType::U8, Some(q)) => {
                let t = w.to_tensor()?;
                let values = t.as_u8()?.iter().map(|&v| q.dequantize(v)).collect();
                Tensor::from_vec(t.shape(), values)?
            }
            (dt, _) => return Err(Error::build(layer, format!("`{wname}` has unusable dtype {dt:?}"))),
        };
        let b = self
            .store
            .get(&bname)
            .ok_or_else(|| Error::build(layer, format!("missing weight entry `{bname}`")))?;
        if b.dims() != [filters as u32] {
            return Err(Error::build(
                layer,
                format!("`{bname}` has dims {:?}, expected [{filters}]", b.dims()),
            ));
        }
        let bias = b.to_f32_vec().map_err(|e| Error::build(layer, e.to_string()))?;
        WeightTensor::new(tensor, bias).map_err(|e| Error::build(layer, e.to_string()))
    }

    /// 8-bit filters, their parameters and the bias in accumulator units.
    fn quant_weights(
        &self,
        layer: &str,
        in_c: usize,
        filters: usize,
        conv: &ConvParams,
        in_params: QuantParams,
    ) -> Result<(Tensor, QuantParams, Vec<i32>)> {
        let wname = format!("{layer}.weight");
        let bname = format!("{layer}.bias");
        let w = self
            .store
            .get(&wname)
            .ok_or_else(|| Error::build(layer, format!("missing weight entry `{wname}`")))?;
        let (qt, wp) = match (w.dtype(), w.quant()) {
            (DType::U8, Some(q)) => (w.to_tensor()?, q),
            _ => {
                let f = self.float_weights(layer, in_c, filters, conv)?;
                let p = choose_quant_params(f.tensor())?;
                (quantize_tensor(f.tensor(), p)?.into_parts().0, p)
            }
        };
        let expected = [filters, in_c, conv.kernel_h, conv.kernel_w];
        if qt.shape().dims() != expected {
            return Err(Error::build(
                layer,
                format!("`{wname}` has shape {}, expected {expected:?}", qt.shape()),
            ));
        }
        let b = self
            .store
            .get(&bname)
            .ok_or_else(|| Error::build(layer, format!("missing weight entry `{bname}`")))?;
        if b.dims() != [filters as u32] {
            return Err(Error::build(
                layer,
                format!("`{bname}` has dims {:?}, expected [{filters}]", b.dims()),
            ));
        }
        let acc_scale = in_params.scale * wp.scale;
        let bias = match b.dtype() {
            DType::I32 => b.to_i32_vec()?,
            _ => quantize_bias(
                &b.to_f32_vec().map_err(|e| Error::build(layer, e.to_string()))?,
                acc_scale,
            ),
        };
        check_accumulator_range(in_c * conv.kernel_h * conv.kernel_w, &bias)
            .map_err(|e| Error::build(layer, e.to_string()))?;
        Ok((qt, wp, bias))
    }

    /// Inserts a Quantize step if the current activation is float.
    fn ensure_u8(&mut self, layer: &str, record: bool) -> Result<()> {
        if self.cur.dtype == DType::U8 {
            return Ok(());
        }
        let key = self.cur.key.clone();
        let params = self.act_params(layer, &key)?;
        let dst = self.value(self.cur.shape, DType::U8);
        let name = format!("{key}/quantize");
        self.push(
            &name,
            LayerKind::Quantize,
            Op::Quantize {
                src: self.cur.src,
                dst,
                params,
            },
        );
        self.set_cur(dst, Some(params), None);
        if record {
            self.record(LayerSpec::new(name, LayerParams::Quantize(params)));
        }
        Ok(())
    }

    /// Inserts a Dequantize step if the current activation is 8-bit.
    fn ensure_f32(&mut self) -> Result<()> {
        if self.cur.dtype == DType::F32 {
            return Ok(());
        }
        let params = self
            .cur
            .params
            .ok_or_else(|| Error::build(&self.cur.key, "8-bit activation without parameters"))?;
        let dst = self.value(self.cur.shape, DType::F32);
        let name = format!("{}/dequantize", self.cur.key);
        self.push(
            &name,
            LayerKind::Dequantize,
            Op::Dequantize {
                src: self.cur.src,
                dst,
                params,
            },
        );
        self.set_cur(dst, None, None);
        self.record(LayerSpec::new(name, LayerParams::Dequantize));
        Ok(())
    }

    fn layer(&mut self, spec: &LayerSpec, later_conv: bool) -> Result<()> {
        let name = spec.name.as_str();
        match &spec.params {
            LayerParams::Conv { filters, conv } => {
                let trailing = self.conv(name, *filters, conv, later_conv)?;
                self.record(spec.clone());
                if let Some(t) = trailing {
                    self.record(t);
                }
                return Ok(());
            }
            LayerParams::ReLU => {
                let v = self.cur_value(name)?;
                let dst = self.full(v);
                match self.cur.dtype {
                    DType::U8 => {
                        let zero_point = self.cur.params.map_or(0, |p| p.zero_point);
                        self.push(name, LayerKind::ReLU, Op::QRelu { dst, zero_point });
                    }
                    _ => self.push(name, LayerKind::ReLU, Op::Relu { dst }),
                }
                let key = self.cur.key.clone();
                self.probe_last(&key, v);
            }
            LayerParams::MaxPool(p) => {
                let shape = p
                    .output_shape(self.cur.shape)
                    .map_err(|e| Error::build(name, e.to_string()))?;
                let dst = self.value(shape, self.cur.dtype);
                self.push(
                    name,
                    LayerKind::MaxPool,
                    Op::MaxPool {
                        params: *p,
                        src: self.cur.src,
                        dst,
                    },
                );
                let params = self.cur.params;
                self.set_cur(dst, params, None);
            }
            LayerParams::Fire(cfg) => self.fire(name, cfg)?,
            LayerParams::GlobalAvgPool => {
                self.ensure_f32()?;
                let s = self.cur.shape;
                let dst = self.value(Shape::new(s.n, s.c, 1, 1)?, DType::F32);
                self.push(
                    name,
                    LayerKind::GlobalAvgPool,
                    Op::GlobalAvgPool { src: self.cur.src, dst },
                );
                self.set_cur(dst, None, None);
            }
            LayerParams::Scale(coeff) => {
                if !coeff.is_finite() {
                    return Err(Error::build(name, format!("attenuation {coeff} is not finite")));
                }
                self.ensure_f32()?;
                let dst = self.cur_value(name)?;
                self.push(name, LayerKind::Scale, Op::Scale { dst, coeff: *coeff });
            }
            LayerParams::Softmax => {
                self.ensure_f32()?;
                let s = self.cur.shape;
                if s.h != 1 || s.w != 1 {
                    return Err(Error::build(name, format!("softmax needs (n, c, 1, 1) input, got {s}")));
                }
                let dst = self.value(s, DType::F32);
                self.push(name, LayerKind::Softmax, Op::Softmax { src: self.cur.src, dst });
                self.set_cur(dst, None, None);
            }
            LayerParams::Quantize(_) | LayerParams::Requantize(_) | LayerParams::Dequantize => {
                return Err(Error::build(name, "quantization stages are inserted by the builder"));
            }
        }
        self.record(spec.clone());
        Ok(())
    }

    /// Returns the layer recorded after the convolution itself, if any.
    fn conv(&mut self, name: &str, filters: usize, conv: &ConvParams, later_conv: bool) -> Result<Option<LayerSpec>> {
        let out_shape = conv
            .output_shape(self.cur.shape, filters)
            .map_err(|e| Error::build(name, e.to_string()))?;
        let in_c = self.cur.shape.c;
        let Some(mode) = self.mode else {
            let weights = self.float_weights(name, in_c, filters, conv)?;
            let v = self.value(out_shape, DType::F32);
            let dst = self.full(v);
            self.push(
                name,
                LayerKind::Conv,
                Op::Conv {
                    weights,
                    params: *conv,
                    src: self.cur.src,
                    dst,
                },
            );
            self.set_cur(v, None, Some(name.to_string()));
            return Ok(None);
        };
        self.ensure_u8(name, true)?;
        let in_params = self.cur.params.expect("u8 activation has params");
        let (acc, acc_scale) = self.qconv(name, name, in_params, filters, conv, out_shape)?;
        if mode == QuantMode::Requantize && later_conv {
            let out_params = self.act_params(name, name)?;
            let v = self.value(out_shape, DType::U8);
            let dst = self.full(v);
            let step = format!("{name}/requantize");
            self.push(
                &step,
                LayerKind::Requantize,
                Op::Requantize {
                    src: acc,
                    dst,
                    multiplier: f64::from(acc_scale) / f64::from(out_params.scale),
                    out_params,
                },
            );
            self.set_cur(v, Some(out_params), Some(name.to_string()));
            return Ok(Some(LayerSpec::new(step, LayerParams::Requantize(out_params))));
        }
        let v = self.value(out_shape, DType::F32);
        let dst = self.full(v);
        let step = format!("{name}/dequantize");
        self.push(
            &step,
            LayerKind::Dequantize,
            Op::DequantizeAcc {
                src: acc,
                dst,
                acc_scale,
            },
        );
        self.set_cur(v, None, Some(name.to_string()));
        Ok(Some(LayerSpec::new(step, LayerParams::Dequantize)))
    }

    /// Emits an integer convolution reading the current 8-bit activation
    /// and returns the accumulator value.
    fn qconv(
        &mut self,
        step_name: &str,
        weight_layer: &str,
        in_params: QuantParams,
        filters: usize,
        conv: &ConvParams,
        out_shape: Shape,
    ) -> Result<(ValueId, f32)> {
        let in_c = self.cur.shape.c;
        let (weights, wp, bias) = self.quant_weights(weight_layer, in_c, filters, conv, in_params)?;
        let acc = self.value(out_shape, DType::I32);
        self.push(
            step_name,
            LayerKind::Conv,
            Op::QConv {
                weights,
                w_zp: wp.zero_point,
                bias,
                params: *conv,
                src: self.cur.src,
                in_zp: in_params.zero_point,
                dst: acc,
            },
        );
        Ok((acc, in_params.scale * wp.scale))
    }

    fn fire(&mut self, name: &str, cfg: &FireConfig) -> Result<()> {
        let s = self.cur.shape;
        let sq_shape = s.with_channels(cfg.squeeze);
        let out_shape = s.with_channels(cfg.out_channels());
        let sq_key = format!("{name}.squeeze");
        let ex_key = format!("{name}.expand");
        let e1_layer = format!("{name}.expand1x1");
        let e3_layer = format!("{name}.expand3x3");
        let (sq_conv, e1_conv, e3_conv) = (
            FireConfig::squeeze_conv(),
            FireConfig::expand1_conv(),
            FireConfig::expand3_conv(),
        );
        let branches = [
            (format!("{name}/expand1x1"), &e1_layer, cfg.expand1, e1_conv, 0),
            (
                format!("{name}/expand3x3"),
                &e3_layer,
                cfg.expand3,
                e3_conv,
                cfg.expand1,
            ),
        ];

        match self.mode {
            None => {
                let w = self.float_weights(&sq_key, s.c, cfg.squeeze, &sq_conv)?;
                let sq = self.value(sq_shape, DType::F32);
                let dst = self.full(sq);
                self.push(
                    format!("{name}/squeeze"),
                    LayerKind::Conv,
                    Op::Conv {
                        weights: w,
                        params: sq_conv,
                        src: self.cur.src,
                        dst,
                    },
                );
                self.push(format!("{name}/squeeze_relu"), LayerKind::ReLU, Op::Relu { dst });
                self.probe_last(&sq_key, sq);
                let out = self.value(out_shape, DType::F32);
                for (step, layer, filters, conv, offset) in branches {
                    let w = self.float_weights(layer, cfg.squeeze, filters, &conv)?;
                    let dst = Dst {
                        value: out,
                        offset,
                        channels: filters,
                    };
                    self.push(
                        &step,
                        LayerKind::Conv,
                        Op::Conv {
                            weights: w,
                            params: conv,
                            src: Src::Value(sq),
                            dst,
                        },
                    );
                    self.push(format!("{step}_relu"), LayerKind::ReLU, Op::Relu { dst });
                }
                self.push(format!("{name}/concat"), LayerKind::Concat, Op::Concat);
                self.probe_last(&ex_key, out);
                self.set_cur(out, None, Some(ex_key));
            }
            Some(QuantMode::Requantize) => {
                self.ensure_u8(name, true)?;
                let in_params = self.cur.params.expect("u8 activation has params");
                let sq_params = self.act_params(name, &sq_key)?;
                let out_params = self.act_params(name, &ex_key)?;

                let (acc, acc_scale) = self.qconv(
                    &format!("{name}/squeeze"),
                    &sq_key,
                    in_params,
                    cfg.squeeze,
                    &sq_conv,
                    sq_shape,
                )?;
                let sq = self.value(sq_shape, DType::U8);
                let dst = self.full(sq);
                self.push(
                    format!("{name}/squeeze_requantize"),
                    LayerKind::Requantize,
                    Op::Requantize {
                        src: acc,
                        dst,
                        multiplier: f64::from(acc_scale) / f64::from(sq_params.scale),
                        out_params: sq_params,
                    },
                );
                self.push(
                    format!("{name}/squeeze_relu"),
                    LayerKind::ReLU,
                    Op::QRelu {
                        dst,
                        zero_point: sq_params.zero_point,
                    },
                );
                self.set_cur(sq, Some(sq_params), Some(sq_key));

                let out = self.value(out_shape, DType::U8);
                for (step, layer, filters, conv, offset) in branches {
                    let branch_shape = s.with_channels(filters);
                    let (acc, acc_scale) = self.qconv(&step, layer, sq_params, filters, &conv, branch_shape)?;
                    let dst = Dst {
                        value: out,
                        offset,
                        channels: filters,
                    };
                    self.push(
                        format!("{step}_requantize"),
                        LayerKind::Requantize,
                        Op::Requantize {
                            src: acc,
                            dst,
                            multiplier: f64::from(acc_scale) / f64::from(out_params.scale),
                            out_params,
                        },
                    );
                    self.push(
                        format!("{step}_relu"),
                        LayerKind::ReLU,
                        Op::QRelu {
                            dst,
                            zero_point: out_params.zero_point,
                        },
                    );
                }
                self.push(format!("{name}/concat"), LayerKind::Concat, Op::Concat);
                self.set_cur(out, Some(out_params), Some(ex_key));
            }
            Some(QuantMode::FloatBetweenLayers) => {
                self.ensure_u8(name, true)?;
                let in_params = self.cur.params.expect("u8 activation has params");
                let (acc, acc_scale) = self.qconv(
                    &format!("{name}/squeeze"),
                    &sq_key,
                    in_params,
                    cfg.squeeze,
                    &sq_conv,
                    sq_shape,
                )?;
                let sq = self.value(sq_shape, DType::F32);
                let dst = self.full(sq);
                self.push(
                    format!("{name}/squeeze_dequantize"),
                    LayerKind::Dequantize,
                    Op::DequantizeAcc {
                        src: acc,
                        dst,
                        acc_scale,
                    },
                );
                self.push(format!("{name}/squeeze_relu"), LayerKind::ReLU, Op::Relu { dst });
                self.probe_last(&sq_key, sq);
                self.set_cur(sq, None, Some(sq_key));
                self.ensure_u8(name, false)?;
                let sq_params = self.cur.params.expect("u8 activation has params");
                let sq_src = self.cur.src;

                let out = self.value(out_shape, DType::F32);
                for (step, layer, filters, conv, offset) in branches {
                    self.cur.src = sq_src;
                    let branch_shape = s.with_channels(filters);
                    let (acc, acc_scale) = self.qconv(&step, layer, sq_params, filters, &conv, branch_shape)?;
                    let dst = Dst {
                        value: out,
                        offset,
                        channels: filters,
                    };
                    self.push(
                        format!("{step}_dequantize"),
                        LayerKind::Dequantize,
                        Op::DequantizeAcc {
                            src: acc,
                            dst,
                            acc_scale,
                        },
                    );
                    self.push(format!("{step}_relu"), LayerKind::ReLU, Op::Relu { dst });
                }
                self.push(format!("{name}/concat"), LayerKind::Concat, Op::Concat);
                self.probe_last(&ex_key, out);
                self.set_cur(out, None, Some(ex_key));
            }
        }
        Ok(())
    }
}
