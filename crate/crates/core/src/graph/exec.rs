use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{conv2d, global_avgpool_into, maxpool2d_into, relu_view, scale_in_place, softmax_into};
use crate::quant::{
    dequantize_accumulators_into, dequantize_into, qconv2d_accumulate_raw, qrelu_view, quantize_into, requantize_into,
};
use crate::tensor::{DType, Tensor};

use super::build::{Graph, Op, Src, ValueId};
use super::LayerKind;

/// Time source for per-step measurements.
pub trait Clock: Send + Sync {
    /// Time elapsed since an arbitrary fixed origin.
    fn now(&self) -> Duration;
}

#[derive(Debug)]
pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock { origin: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub name: String,
    pub kind: LayerKind,
    /// Total nanoseconds over `iterations` runs.
    pub nanos: u128,
    pub iterations: u32,
}

impl TimingEntry {
    pub fn mean_ms(&self) -> f64 {
        if self.iterations == 0 {
            return 0.0;
        }
        self.nanos as f64 / 1e6 / f64::from(self.iterations)
    }
}

/// One entry per executed step, in execution order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub entries: Vec<TimingEntry>,
}

impl TimingReport {
    /// Sum of the per-step means, in milliseconds.
    pub fn total_ms(&self) -> f64 {
        self.entries.iter().map(TimingEntry::mean_ms).sum()
    }

    /// Mean milliseconds spent in steps of `kind`.
    pub fn kind_ms(&self, kind: LayerKind) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(TimingEntry::mean_ms)
            .sum()
    }

    /// Adds another run of the same graph.
    pub fn accumulate(&mut self, other: &TimingReport) -> Result<()> {
        if self.entries.is_empty() {
            self.entries = other.entries.clone();
            return Ok(());
        }
        if self.entries.len() != other.entries.len() {
            return Err(Error::Report(format!(
                "cannot merge reports with {} and {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name {
                return Err(Error::Report(format!("step `{}` does not match `{}`", a.name, b.name)));
            }
            a.nanos += b.nanos;
            a.iterations += b.iterations;
        }
        Ok(())
    }
}

/// Buffers and a worker pool for running one [`Graph`].
///
/// Every activation buffer is allocated when the session is created; a run
/// allocates nothing except the timing report.
pub struct Session {
    graph: Arc<Graph>,
    slots: Vec<Tensor>,
    pool: rayon::ThreadPool,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("slots", &self.slots.len())
            .field("workers", &self.pool.current_num_threads())
            .finish()
    }
}

fn slot_pair(slots: &mut [Tensor], read: usize, write: usize) -> (&Tensor, &mut Tensor) {
    assert_ne!(read, write, "planner gave a step's input and output the same buffer");
    if read < write {
        let (a, b) = slots.split_at_mut(write);
        (&a[read], &mut b[0])
    } else {
        let (a, b) = slots.split_at_mut(read);
        (&b[0], &mut a[write])
    }
}

impl Session {
    pub fn new(graph: Arc<Graph>, workers: usize) -> Result<Self> {
        Self::with_clock(graph, workers, Arc::new(MonotonicClock::new()))
    }

    pub fn with_clock(graph: Arc<Graph>, workers: usize, clock: Arc<dyn Clock>) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Argument("worker count must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Argument(format!("cannot start {workers} workers: {e}")))?;
        let slots = graph
            .slots
            .iter()
            .map(|s| Tensor::with_capacity(s.first_shape, s.dtype, s.capacity))
            .collect::<Result<Vec<_>>>()?;
        Ok(Session {
            graph,
            slots,
            pool,
            clock,
        })
    }

    pub fn graph(&self) -> &Arc<Graph> {
        &self.graph
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Runs the graph on `input` and returns the output with per-step timings.
    pub fn run(&mut self, input: &Tensor) -> Result<(&Tensor, TimingReport)> {
        self.run_observed(input, |_, _| {})
    }

    /// Like [`Session::run`], also passing each calibration point's
    /// activation to `observer` as it is produced.
    pub fn run_observed<F>(&mut self, input: &Tensor, mut observer: F) -> Result<(&Tensor, TimingReport)>
    where
        F: FnMut(&str, &Tensor) + Send,
    {
        let g = Arc::clone(&self.graph);
        if input.shape() != g.input_shape || input.dtype() != DType::F32 {
            return Err(Error::Shape(format!(
                "input is {} {:?}, graph expects {} F32",
                input.shape(),
                input.dtype(),
                g.input_shape
            )));
        }
        let mut report = TimingReport {
            entries: Vec::with_capacity(g.steps.len()),
        };
        let Session { slots, pool, clock, .. } = self;
        pool.install(|| -> Result<()> {
            for step in &g.steps {
                if let Some(v) = step.op.written() {
                    slots[g.value_slot[v]].set_shape(g.values[v].shape)?;
                }
                let start = clock.now();
                execute(&g, slots, input, &step.op)?;
                let nanos = clock.now().saturating_sub(start).as_nanos();
                report.entries.push(TimingEntry {
                    name: step.name.clone(),
                    kind: step.kind,
                    nanos,
                    iterations: 1,
                });
                if let Some((key, v)) = &step.probe {
                    observer(key, &slots[g.value_slot[*v]]);
                }
            }
            Ok(())
        })?;
        Ok((&self.slots[g.value_slot[g.output]], report))
    }
}

fn execute(g: &Graph, slots: &mut [Tensor], input: &Tensor, op: &Op) -> Result<()> {
    let slot = |v: ValueId| g.value_slot[v];
    // Source is read-only and the destination mutable; the planner keeps them in distinct buffers.
    macro_rules! with_io {
        ($src:expr, $dst:expr, |$x:ident, $y:ident| $body:expr) => {{
            let d = slot($dst);
            match $src {
                Src::Input => {
                    let $x = input;
                    let $y = &mut slots[d];
                    $body
                }
                Src::Value(v) => {
                    let ($x, $y) = slot_pair(slots, slot(v), d);
                    $body
                }
            }
        }};
    }
    match op {
        Op::Conv {
            weights,
            params,
            src,
            dst,
        } => with_io!(*src, dst.value, |x, y| {
            let mut out = y.slice_channels(dst.offset, dst.channels)?;
            conv2d(x, weights, params, &mut out)
        }),
        Op::Relu { dst } => relu_view(&mut slots[slot(dst.value)].slice_channels(dst.offset, dst.channels)?),
        Op::QRelu { dst, zero_point } => qrelu_view(
            &mut slots[slot(dst.value)].slice_channels(dst.offset, dst.channels)?,
            *zero_point,
        ),
        Op::MaxPool { params, src, dst } => with_io!(*src, *dst, |x, y| maxpool2d_into(x, params, y)),
        Op::GlobalAvgPool { src, dst } => with_io!(*src, *dst, |x, y| global_avgpool_into(x, y)),
        Op::Scale { dst, coeff } => scale_in_place(&mut slots[slot(*dst)], *coeff),
        Op::Softmax { src, dst } => with_io!(*src, *dst, |x, y| softmax_into(x, y)),
        Op::Concat => Ok(()),
        Op::Quantize { src, dst, params } => with_io!(*src, *dst, |x, y| quantize_into(x, *params, y)),
        Op::Dequantize { src, dst, params } => with_io!(*src, *dst, |x, y| dequantize_into(x, *params, y)),
        Op::QConv {
            weights,
            w_zp,
            bias,
            params,
            src,
            in_zp,
            dst,
        } => with_io!(*src, *dst, |x, y| qconv2d_accumulate_raw(
            x, *in_zp, weights, *w_zp, bias, params, y
        )),
        Op::Requantize {
            src,
            dst,
            multiplier,
            out_params,
        } => {
            let (x, y) = slot_pair(slots, slot(*src), slot(dst.value));
            requantize_into(
                x,
                *multiplier,
                *out_params,
                &mut y.slice_channels(dst.offset, dst.channels)?,
            )
        }
        Op::DequantizeAcc { src, dst, acc_scale } => {
            let (x, y) = slot_pair(slots, slot(*src), slot(dst.value));
            dequantize_accumulators_into(x, *acc_scale, &mut y.slice_channels(dst.offset, dst.channels)?)
        }
    }
}

impl Graph {
    /// One-off run on a fresh single-use session.
    pub fn run(self: &Arc<Self>, input: &Tensor, workers: usize) -> Result<(Tensor, TimingReport)> {
        let mut s = Session::new(Arc::clone(self), workers)?;
        let (out, report) = s.run(input)?;
        Ok((out.clone(), report))
    }
}
