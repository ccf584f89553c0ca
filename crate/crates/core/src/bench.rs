//! Benchmark driver: warmup, repeated timed runs, the per-layer table and
//! the grouped breakdown.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    build_squeezenet, BuildOptions, Clock, LayerKind, MonotonicClock, QuantMode, Session, TimingReport,
};
use crate::model_io::{load_input, load_weights, WeightStore};
use crate::ops::top_k;
use crate::tensor::Tensor;

pub const REPORT_VERSION: u32 = 1;

/// The JSON Schema describing [`BenchReport`].
pub const REPORT_SCHEMA: &str = include_str!("../schema/bench_report.schema.json");

/// Time per layer group, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    /// Convolution, ReLU and concatenation.
    pub group1_ms: f64,
    /// Pooling and softmax.
    pub group2_ms: f64,
    /// Quantize, requantize and dequantize.
    pub quant_overhead_ms: f64,
    pub other_ms: f64,
    pub total_ms: f64,
}

/// Sorts each entry's mean time into its group.
pub fn group_timings(r: &TimingReport) -> Result<GroupReport> {
    if r.entries.is_empty() {
        return Err(Error::Report("timing report has no entries".into()));
    }
    let mut g = GroupReport::default();
    for e in &r.entries {
        let ms = e.mean_ms();
        let bucket = match e.kind {
            LayerKind::Conv | LayerKind::ReLU | LayerKind::Concat => &mut g.group1_ms,
            LayerKind::MaxPool | LayerKind::GlobalAvgPool | LayerKind::Softmax => &mut g.group2_ms,
            LayerKind::Quantize | LayerKind::Requantize | LayerKind::Dequantize => &mut g.quant_overhead_ms,
            LayerKind::Scale => &mut g.other_ms,
            LayerKind::Fire => {
                return Err(Error::Report(format!(
                    "entry `{}` times a whole fire module; only its parts can be grouped",
                    e.name
                )))
            }
        };
        *bucket += ms;
        g.total_ms += ms;
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Json,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub weights: PathBuf,
    pub input: PathBuf,
    pub iterations: usize,
    pub warmup: usize,
    pub workers: usize,
    pub quantized: bool,
    pub quant_mode: QuantMode,
    pub attenuation: Option<f32>,
    /// Also run the other precision and report both side by side.
    pub compare: bool,
    pub format: ReportFormat,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            weights: PathBuf::new(),
            input: PathBuf::new(),
            iterations: 10,
            warmup: 2,
            workers: 4,
            quantized: false,
            quant_mode: QuantMode::default(),
            attenuation: Some(1.0),
            compare: false,
            format: ReportFormat::Text,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Argument("iterations must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Argument("workers must be at least 1".into()));
        }
        if let Some(a) = self.attenuation {
            if !a.is_finite() {
                return Err(Error::Argument(format!("attenuation {a} is not finite")));
            }
        }
        Ok(())
    }

    fn build_options(&self, quantized: bool) -> BuildOptions {
        BuildOptions {
            quantized,
            quant_mode: self.quant_mode,
            attenuation: self.attenuation,
            ..BuildOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl RunStats {
    fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        RunStats {
            mean_ms: s.iter().sum::<f64>() / n as f64,
            median_ms: median,
            min_ms: s[0],
            max_ms: s[n - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTiming {
    pub name: String,
    pub kind: LayerKind,
    pub mean_ms: f64,
    pub min_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProb {
    pub class: usize,
    pub prob: f32,
}

/// Timings of one precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub quantized: bool,
    /// `requantize` or `float_between_layers`; absent for float runs.
    pub quant_mode: Option<String>,
    pub run: RunStats,
    pub layers: Vec<LayerTiming>,
    pub groups: GroupReport,
    /// Time in convolution steps only.
    pub conv_ms: f64,
    pub top5: Vec<ClassProb>,
    pub peak_activation_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub float_total_ms: f64,
    pub quantized_total_ms: f64,
    pub float_conv_ms: f64,
    pub quantized_conv_ms: f64,
    pub quant_overhead_ms: f64,
    /// Float conv time minus quantized conv time.
    pub conv_gain_ms: f64,
    /// Quantized total minus float total.
    pub net_change_ms: f64,
    pub top1_agrees: bool,
}

impl Comparison {
    fn new(float: &ModeReport, quant: &ModeReport) -> Self {
        Comparison {
            float_total_ms: float.groups.total_ms,
            quantized_total_ms: quant.groups.total_ms,
            float_conv_ms: float.conv_ms,
            quantized_conv_ms: quant.conv_ms,
            quant_overhead_ms: quant.groups.quant_overhead_ms,
            conv_gain_ms: float.conv_ms - quant.conv_ms,
            net_change_ms: quant.groups.total_ms - float.groups.total_ms,
            top1_agrees: float.top5.first().map(|c| c.class) == quant.top5.first().map(|c| c.class),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: u32,
    pub arch: Option<String>,
    pub source: Option<String>,
    pub attenuation: Option<f32>,
    pub workers: usize,
    pub iterations: usize,
    pub warmup: usize,
    /// The requested precision.
    pub primary: ModeReport,
    /// The other precision, when a comparison was requested.
    pub secondary: Option<ModeReport>,
    pub comparison: Option<Comparison>,
}

/// Times `iterations` runs of one graph after `warmup` untimed runs.
pub fn benchmark_mode(
    store: &WeightStore,
    input: &Tensor,
    cfg: &BenchConfig,
    quantized: bool,
    clock: Arc<dyn Clock>,
) -> Result<ModeReport> {
    cfg.validate()?;
    let graph = Arc::new(build_squeezenet(store, &cfg.build_options(quantized))?);
    let mut session = Session::with_clock(Arc::clone(&graph), cfg.workers, Arc::clone(&clock))?;
    for _ in 0..cfg.warmup {
        session.run(input)?;
    }

    let mut totals = TimingReport::default();
    let mut mins: Vec<u128> = Vec::new();
    let mut samples = Vec::with_capacity(cfg.iterations);
    let mut first: Option<Tensor> = None;
    for _ in 0..cfg.iterations {
        let start = clock.now();
        let (probs, report) = session.run(input)?;
        samples.push(clock.now().saturating_sub(start).as_secs_f64() * 1e3);
        match &first {
            None => first = Some(probs.clone()),
            Some(f) => {
                let same = f
                    .as_f32()?
                    .iter()
                    .zip(probs.as_f32()?)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return Err(Error::Report("output changed between iterations".into()));
                }
            }
        }
        if mins.is_empty() {
            mins = report.entries.iter().map(|e| e.nanos).collect();
        } else {
            for (m, e) in mins.iter_mut().zip(&report.entries) {
                *m = (*m).min(e.nanos);
            }
        }
        totals.accumulate(&report)?;
    }

    let probs = first.expect("at least one iteration");
    let top5 = top_k(&probs, 5.min(probs.shape().c))?
        .into_iter()
        .map(|(class, prob)| ClassProb { class, prob })
        .collect();
    let layers = totals
        .entries
        .iter()
        .zip(&mins)
        .map(|(e, &min)| LayerTiming {
            name: e.name.clone(),
            kind: e.kind,
            mean_ms: e.mean_ms(),
            min_ms: min as f64 / 1e6,
        })
        .collect();
    Ok(ModeReport {
        quantized,
        quant_mode: graph.quant_mode().map(|m| quant_mode_name(m).to_string()),
        run: RunStats::from_samples(&samples),
        layers,
        groups: group_timings(&totals)?,
        conv_ms: totals.kind_ms(LayerKind::Conv),
        top5,
        peak_activation_bytes: graph.planned_bytes(),
    })
}

pub fn quant_mode_name(m: QuantMode) -> &'static str {
    match m {
        QuantMode::Requantize => "requantize",
        QuantMode::FloatBetweenLayers => "float_between_layers",
    }
}

/// Benchmarks already-loaded weights and input with an injectable clock.
pub fn run_benchmark_with(
    store: &WeightStore,
    input: &Tensor,
    cfg: &BenchConfig,
    clock: Arc<dyn Clock>,
) -> Result<BenchReport> {
    cfg.validate()?;
    let primary = benchmark_mode(store, input, cfg, cfg.quantized, Arc::clone(&clock))?;
    let secondary = if cfg.compare {
        Some(benchmark_mode(store, input, cfg, !cfg.quantized, clock)?)
    } else {
        None
    };
    let comparison = secondary.as_ref().map(|s| {
        if primary.quantized {
            Comparison::new(s, &primary)
        } else {
            Comparison::new(&primary, s)
        }
    });
    Ok(BenchReport {
        version: REPORT_VERSION,
        arch: store.arch(),
        source: store.source(),
        attenuation: cfg.attenuation,
        workers: cfg.workers,
        iterations: cfg.iterations,
        warmup: cfg.warmup,
        primary,
        secondary,
        comparison,
    })
}

/// Loads the files named in `cfg` and benchmarks them.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let store = load_weights(&cfg.weights)?;
    let input = load_input(&cfg.input, &store.preprocess())?;
    run_benchmark_with(&store, &input, cfg, Arc::new(MonotonicClock::new()))
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.to_json() + "\n",
            ReportFormat::Text => self.to_text(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "model {} ({})",
            self.arch.as_deref().unwrap_or("unknown"),
            self.source.as_deref().unwrap_or("unknown source")
        );
        let _ = writeln!(
            s,
            "{} timed iterations after {} warmup, {} workers",
            self.iterations, self.warmup, self.workers
        );
        write_mode(&mut s, &self.primary);
        if let Some(m) = &self.secondary {
            write_mode(&mut s, m);
        }
        if let Some(c) = &self.comparison {
            let _ = writeln!(s, "\nfloat vs quantized");
            let _ = writeln!(
                s,
                "  total        {:>10.3} ms  {:>10.3} ms",
                c.float_total_ms, c.quantized_total_ms
            );
            let _ = writeln!(
                s,
                "  conv         {:>10.3} ms  {:>10.3} ms",
                c.float_conv_ms, c.quantized_conv_ms
            );
            let _ = writeln!(s, "  quant overhead            {:>10.3} ms", c.quant_overhead_ms);
            let _ = writeln!(s, "  conv gain    {:>10.3} ms", c.conv_gain_ms);
            let _ = writeln!(s, "  net change   {:>10.3} ms", c.net_change_ms);
            let _ = writeln!(s, "  top-1 agrees {}", c.top1_agrees);
        }
        s
    }
}

fn write_mode(s: &mut String, m: &ModeReport) {
    let label = match &m.quant_mode {
        Some(mode) => format!("quantized ({mode})"),
        None => "float".to_string(),
    };
    let _ = writeln!(s, "\n== {label} ==");
    let _ = writeln!(
        s,
        "run: mean {:.3} ms, median {:.3} ms, min {:.3} ms, max {:.3} ms",
        m.run.mean_ms, m.run.median_ms, m.run.min_ms, m.run.max_ms
    );
    let _ = writeln!(s, "{:<28} {:<14} {:>10} {:>10}", "step", "kind", "mean ms", "min ms");
    for l in &m.layers {
        let _ = writeln!(
            s,
            "{:<28} {:<14} {:>10.3} {:>10.3}",
            l.name,
            l.kind.as_str(),
            l.mean_ms,
            l.min_ms
        );
    }
    let g = &m.groups;
    let pct = |x: f64| if g.total_ms > 0.0 { 100.0 * x / g.total_ms } else { 0.0 };
    let _ = writeln!(
        s,
        "group 1 (conv, relu, concat)  {:>10.3} ms  {:>5.1}%",
        g.group1_ms,
        pct(g.group1_ms)
    );
    let _ = writeln!(
        s,
        "group 2 (pool, softmax)       {:>10.3} ms  {:>5.1}%",
        g.group2_ms,
        pct(g.group2_ms)
    );
    let _ = writeln!(
        s,
        "quantization overhead         {:>10.3} ms  {:>5.1}%",
        g.quant_overhead_ms,
        pct(g.quant_overhead_ms)
    );
    let _ = writeln!(
        s,
        "other                         {:>10.3} ms  {:>5.1}%",
        g.other_ms,
        pct(g.other_ms)
    );
    let _ = writeln!(s, "total                         {:>10.3} ms", g.total_ms);
    let _ = writeln!(s, "conv only                     {:>10.3} ms", m.conv_ms);
    let _ = writeln!(s, "peak activation memory        {} bytes", m.peak_activation_bytes);
    let _ = writeln!(s, "top-5:");
    for c in &m.top5 {
        let _ = writeln!(s, "  {:>4}  {:.6}", c.class, c.prob);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TimingEntry;

    fn entry(name: &str, kind: LayerKind, ms: u128) -> TimingEntry {
        TimingEntry {
            name: name.into(),
            kind,
            nanos: ms * 1_000_000,
            iterations: 1,
        }
    }

    #[test]
    fn groups_follow_the_kind_mapping() {
        let r = TimingReport {
            entries: vec![
                entry("conv", LayerKind::Conv, 200),
                entry("relu", LayerKind::ReLU, 30),
                entry("pool", LayerKind::MaxPool, 50),
                entry("softmax", LayerKind::Softmax, 5),
            ],
        };
        let g = group_timings(&r).unwrap();
        assert_eq!(g.group1_ms, 230.0);
        assert_eq!(g.group2_ms, 55.0);
        assert_eq!(g.total_ms, 285.0);
    }

    #[test]
    fn lone_softmax_is_group_two() {
        let r = TimingReport {
            entries: vec![entry("prob", LayerKind::Softmax, 5)],
        };
        let g = group_timings(&r).unwrap();
        assert_eq!(g.group1_ms, 0.0);
        assert_eq!(g.group2_ms, 5.0);
    }

    #[test]
    fn quant_and_scale_have_their_own_lines() {
        let r = TimingReport {
            entries: vec![
                entry("q", LayerKind::Quantize, 1),
                entry("rq", LayerKind::Requantize, 2),
                entry("dq", LayerKind::Dequantize, 3),
                entry("scale", LayerKind::Scale, 4),
                entry("fire2/concat", LayerKind::Concat, 0),
            ],
        };
        let g = group_timings(&r).unwrap();
        assert_eq!(g.quant_overhead_ms, 6.0);
        assert_eq!(g.other_ms, 4.0);
        assert_eq!(g.total_ms, 10.0);
    }

    #[test]
    fn empty_and_whole_fire_reports_are_rejected() {
        assert!(matches!(group_timings(&TimingReport::default()), Err(Error::Report(_))));
        let r = TimingReport {
            entries: vec![entry("fire2", LayerKind::Fire, 1)],
        };
        assert!(matches!(group_timings(&r), Err(Error::Report(_))));
    }

    #[test]
    fn median_of_even_count_averages_the_middle() {
        let s = RunStats::from_samples(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(s.median_ms, 2.5);
        assert_eq!(s.mean_ms, 2.5);
        assert_eq!(s.min_ms, 1.0);
        assert_eq!(s.max_ms, 4.0);
    }

    #[test]
    fn config_rejects_zero_counts() {
        let cfg = BenchConfig {
            iterations: 0,
            ..BenchConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = BenchConfig {
            workers: 0,
            ..BenchConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
