//! Benchmark and inference driver.
//!
//! Exit codes: 0 success, 2 file or format errors, 3 shape or configuration
//! errors (including bad command lines).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tinyinfer::bench::{run_benchmark, BenchConfig, ReportFormat};
use tinyinfer::graph::{
    build_squeezenet, calibrate, synthetic_image, synthetic_weights, BuildOptions, QuantMode, Session,
};
use tinyinfer::model_io::{encode_f32_input, encode_raw_input, load_input, load_weights, save_weights, INPUT_SIZE};
use tinyinfer::ops::top_k;
use tinyinfer::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "tinyinfer", version, about = "SqueezeNet v1.0 inference and benchmarking")]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// With no subcommand, the flags run a benchmark.
    #[command(flatten)]
    bench: BenchArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Time repeated inferences and print the per-layer and grouped report.
    Bench(BenchArgs),
    /// Classify one input and print the top classes.
    Run(RunArgs),
    /// Record activation ranges so a quantized graph can be built.
    Calibrate(CalibrateArgs),
    /// Write seeded random SqueezeNet weights.
    SynthWeights(SynthWeightsArgs),
    /// Write a seeded random input image.
    SynthInput(SynthInputArgs),
    /// List the entries of a weight file.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    /// 8-bit activations between convolutions.
    Requantize,
    /// Float activations between convolutions.
    FloatBetweenLayers,
}

impl From<ModeArg> for QuantMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Requantize => QuantMode::Requantize,
            ModeArg::FloatBetweenLayers => QuantMode::FloatBetweenLayers,
        }
    }
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// TIWF weight file.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// TIRAW001 or TIF32001 input file.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, env = "TINYINFER_WORKERS", default_value_t = 4)]
    workers: usize,
    /// Run convolutions on 8-bit integers (needs calibrated weights).
    #[arg(long)]
    quantized: bool,
    #[arg(long, value_enum, default_value_t = ModeArg::Requantize)]
    quant_mode: ModeArg,
    /// Logit attenuation applied after global pooling.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    attenuation: f32,
    /// Leave the attenuation layer out of the graph.
    #[arg(long, conflicts_with = "attenuation")]
    no_scale: bool,
}

impl ModelArgs {
    fn paths(&self) -> Result<(&Path, &Path)> {
        match (&self.weights, &self.input) {
            (Some(w), Some(i)) => Ok((w, i)),
            _ => Err(Error::Argument("--weights and --input are required".into())),
        }
    }

    fn attenuation(&self) -> Option<f32> {
        (!self.no_scale).then_some(self.attenuation)
    }

    fn build_options(&self) -> BuildOptions {
        BuildOptions {
            quantized: self.quantized,
            quant_mode: self.quant_mode.into(),
            attenuation: self.attenuation(),
            ..BuildOptions::default()
        }
    }
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Also benchmark the other precision and compare.
    #[arg(long)]
    compare: bool,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    format: ReportFormat,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Number of classes to print.
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// TIWF weight file to calibrate.
    #[arg(long)]
    weights: PathBuf,
    /// Calibration inputs.
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    /// Output weight file; defaults to overwriting --weights.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "TINYINFER_WORKERS", default_value_t = 4)]
    workers: usize,
}

#[derive(Args, Debug)]
struct SynthWeightsArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SynthInputArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write a planar float tensor (means already subtracted) instead of raw bytes.
    #[arg(long)]
    f32: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    weights: PathBuf,
}

fn bench(args: &BenchArgs) -> Result<()> {
    let (weights, input) = args.model.paths()?;
    let cfg = BenchConfig {
        weights: weights.to_path_buf(),
        input: input.to_path_buf(),
        iterations: args.iters,
        warmup: args.warmup,
        workers: args.model.workers,
        quantized: args.model.quantized,
        quant_mode: args.model.quant_mode.into(),
        attenuation: args.model.attenuation(),
        compare: args.compare,
        format: args.format,
    };
    let text = run_benchmark(&cfg)?.render(cfg.format);
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let (weights, input) = args.model.paths()?;
    let store = load_weights(weights)?;
    let x = load_input(input, &store.preprocess())?;
    let graph = Arc::new(build_squeezenet(&store, &args.model.build_options())?);
    let mut session = Session::new(graph, args.model.workers)?;
    let (probs, _) = session.run(&x)?;
    for (class, p) in top_k(probs, args.top)? {
        println!("{class:>4}  {p:.6}");
    }
    Ok(())
}

fn calibrate_cmd(args: &CalibrateArgs) -> Result<()> {
    let mut store = load_weights(&args.weights)?;
    let pre = store.preprocess();
    let inputs = args
        .inputs
        .iter()
        .map(|p| load_input(p, &pre))
        .collect::<Result<Vec<_>>>()?;
    calibrate(&mut store, &inputs, &BuildOptions::default(), args.workers)?;
    save_weights(&store, args.out.as_ref().unwrap_or(&args.weights))
}

fn synth_input(args: &SynthInputArgs) -> Result<()> {
    let raw = encode_raw_input(&synthetic_image(args.seed, INPUT_SIZE));
    let bytes = if args.f32 {
        let t = tinyinfer::model_io::decode_input(&raw, &Default::default(), INPUT_SIZE)?;
        encode_f32_input(&t)?
    } else {
        raw
    };
    std::fs::write(&args.out, bytes)?;
    Ok(())
}

fn inspect(args: &InspectArgs) -> Result<()> {
    let store = load_weights(&args.weights)?;
    for (name, e) in store.iter() {
        let quant = match e.quant() {
            Some(q) => format!("  scale {} zp {}", q.scale, q.zero_point),
            None => String::new(),
        };
        println!("{name:<32} {:?} {:?}{quant}", e.dtype(), e.dims());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        None => bench(&cli.bench),
        Some(Command::Bench(a)) => bench(&a),
        Some(Command::Run(a)) => run(&a),
        Some(Command::Calibrate(a)) => calibrate_cmd(&a),
        Some(Command::SynthWeights(a)) => save_weights(&synthetic_weights(a.seed)?, &a.out),
        Some(Command::SynthInput(a)) => synth_input(&a),
        Some(Command::Inspect(a)) => inspect(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
