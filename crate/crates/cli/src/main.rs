//! `csnn`: synthesize, train, quantize, convert, sweep, infer and evaluate.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a runtime
//! failure (including protocol errors during `infer`).

use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use csnn_core::cann::{evaluate, knn_baseline, quantize, sweep, train, ArchConfig, Evaluation, TrainConfig};
use csnn_core::convert::{compute_thresholds, convert, export_memory_image, DEFAULT_PERCENTILE, DEFAULT_V_MIN};
use csnn_core::harness::{
    run_batch, run_batch_loopback, serve_device, Device, EventConfig, TcpTransport, DEFAULT_TIMEOUT,
};
use csnn_core::io::{self as cio, ModelFile};
use csnn_core::snn::Engine;
use csnn_core::spectra::{load_config, synthesize_dataset, Dataset, GeneratorConfig};
use csnn_core::ISOTOPES;

#[derive(Parser, Debug)]
#[command(name = "csnn", version, about = "Event-driven CSNN toolchain for gamma-ray isotope identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a labelled dataset file.
    Synth(SynthArgs),
    /// Train a CANN on all folds except the test fold; writes a float model.
    Train(TrainArgs),
    /// Quantize a float model to int8.
    Quantize(QuantizeArgs),
    /// Calibrate thresholds and write the spiking memory image.
    Convert(ConvertArgs),
    /// Float and QAT accuracy over a kernel × pool grid, as CSV.
    Sweep(SweepArgs),
    /// Event-driven inference: one event file, or a batch over the test fold.
    Infer(InferArgs),
    /// Test-fold accuracy and confusion of a model or of the kNN baseline.
    Eval(EvalArgs),
    /// Sample the event stream of one dataset sample into an event file.
    Events(EventsArgs),
    /// Serve a device over TCP for cross-process protocol runs.
    ProtocolEcho(EchoArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Generator configuration (TOML); the built-in default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset file.
    #[arg(long, env = "CSNN_DATA")]
    data: PathBuf,
    /// Fold held out for testing (0-4).
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..5))]
    fold: u8,
}

#[derive(Args, Debug)]
struct ArchArgs {
    #[arg(long, default_value_t = 4)]
    filters: usize,
    #[arg(long, default_value_t = 5)]
    kernel: usize,
    #[arg(long, default_value_t = 16)]
    pool: usize,
}

impl ArchArgs {
    fn arch(&self) -> Result<ArchConfig> {
        let d = ArchConfig::default();
        Ok(ArchConfig::new(d.input_len, self.filters, self.kernel, self.pool, d.num_classes)?)
    }
}

#[derive(Args, Debug)]
struct TrainOpts {
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().momentum)]
    momentum: f64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    /// Training seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainOpts {
    fn config(&self, qat_enabled: bool) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            momentum: self.momentum,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            qat_enabled,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    opts: TrainOpts,
    /// Plain float training instead of quantization-aware training.
    #[arg(long)]
    no_qat: bool,
    /// Output float model file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    /// Float model file.
    #[arg(long)]
    model: PathBuf,
    /// Output int8 model file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// Int8 model file.
    #[arg(long)]
    model: PathBuf,
    /// Calibration data: the training folds of this dataset.
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    percentile: f64,
    /// Membrane floor for the conv and dense layers.
    #[arg(long, default_value_t = DEFAULT_V_MIN, allow_hyphen_values = true)]
    v_min: i32,
    /// Output memory image.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 5, 7, 9])]
    kernels: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16, 32])]
    pools: Vec<usize>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct StreamArgs {
    /// Acquisition time per sample; converted at 10,000 timesteps per second.
    #[arg(long, default_value_t = 60.0, conflicts_with = "duration")]
    seconds: f64,
    /// Acquisition time per sample in timesteps.
    #[arg(long)]
    duration: Option<u64>,
    /// Event probability per timestep.
    #[arg(long, default_value_t = 0.01)]
    rate: f64,
    /// Stream seed; sample i uses a seed derived from this and i.
    #[arg(long, default_value_t = 0)]
    stream_seed: u64,
}

impl StreamArgs {
    fn config(&self) -> EventConfig {
        let mut cfg = EventConfig::for_seconds(self.seconds, self.rate, self.stream_seed);
        if let Some(d) = self.duration {
            cfg.duration = d;
        }
        cfg
    }
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Memory image from `convert`.
    #[arg(long, env = "CSNN_IMAGE")]
    image: PathBuf,
    /// Single event file to run directly instead of a batch.
    #[arg(long, conflicts_with_all = ["data", "connect"])]
    events: Option<PathBuf>,
    /// With --events: print one `layer,neuron,weight,v,fired` line per update.
    #[arg(long, requires = "events")]
    trace: bool,
    /// Dataset for a batch run over its test fold.
    #[arg(long, env = "CSNN_DATA", required_unless_present = "events")]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u8).range(0..5))]
    fold: u8,
    #[command(flatten)]
    stream: StreamArgs,
    /// Drive a device served by `protocol-echo` instead of an in-process one.
    #[arg(long)]
    connect: Option<String>,
    /// Write the protocol transcript here.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Float or int8 model file.
    #[arg(long, required_unless_present = "knn")]
    model: Option<PathBuf>,
    /// Evaluate the k-nearest-neighbour baseline instead of a model.
    #[arg(long, conflicts_with = "model")]
    knn: Option<usize>,
}

#[derive(Args, Debug)]
struct EventsArgs {
    #[arg(long, env = "CSNN_DATA")]
    data: PathBuf,
    /// Sample index in the dataset file.
    #[arg(long)]
    index: usize,
    #[command(flatten)]
    stream: StreamArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EchoArgs {
    #[arg(long, env = "CSNN_IMAGE")]
    image: PathBuf,
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    /// Stop after this many connections; serve forever when omitted.
    #[arg(long)]
    connections: Option<usize>,
}

impl Command {
    fn outputs(&self) -> Vec<&Path> {
        match self {
            Command::Synth(a) => vec![&a.out],
            Command::Train(a) => vec![&a.out],
            Command::Quantize(a) => vec![&a.out],
            Command::Convert(a) => vec![&a.out],
            Command::Events(a) => vec![&a.out],
            Command::Infer(a) => a.out.iter().chain(&a.transcript).map(PathBuf::as_path).collect(),
            Command::Sweep(_) | Command::Eval(_) | Command::ProtocolEcho(_) => Vec::new(),
        }
    }
}

/// Fails when an output path's directory is missing.
fn require_output(path: &Path) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !dir.is_dir() {
        bail!("output directory {} does not exist", dir.display());
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    require_file(path, "dataset")?;
    cio::load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelFile> {
    require_file(path, "model")?;
    cio::load_model(path).with_context(|| format!("reading model {}", path.display()))
}

fn load_image(path: &Path) -> Result<csnn_core::convert::SnnModel> {
    require_file(path, "image")?;
    cio::load_image(path).with_context(|| format!("reading image {}", path.display()))
}

fn split(data: &DataArgs) -> Result<(Dataset, Dataset)> {
    Ok(load_dataset(&data.data)?.split(data.fold))
}

/// Writes to `path`, or standard output when absent.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn evaluation_text(kind: &str, e: &Evaluation) -> String {
    let mut out = format!("model,{kind}\naccuracy,{:.6}\nconfusion,{}\n", e.accuracy, ISOTOPES.join(","));
    for (name, row) in ISOTOPES.iter().zip(&e.confusion) {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        out += &format!("{name},{}\n", cells.join(","));
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    for out in cli.command.outputs() {
        require_output(out)?;
    }
    match cli.command {
        Command::Synth(a) => {
            let cfg = match &a.config {
                Some(p) => {
                    require_file(p, "config")?;
                    load_config(p).with_context(|| format!("reading config {}", p.display()))?
                }
                None => GeneratorConfig::default(),
            };
            let ds = synthesize_dataset(&cfg, a.seed)?;
            cio::save_dataset(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
        }
        Command::Train(a) => {
            let arch = a.arch.arch()?;
            let (train_set, _) = split(&a.data)?;
            let model = train(&train_set, &arch, &a.opts.config(!a.no_qat))?;
            cio::save_float_model(&model, &a.out)?;
        }
        Command::Quantize(a) => {
            let ModelFile::Float(m) = load_model(&a.model)? else {
                bail!("{} is already quantized", a.model.display());
            };
            cio::save_quantized_model(&quantize(&m)?, &a.out)?;
        }
        Command::Convert(a) => {
            let ModelFile::Quantized(q) = load_model(&a.model)? else {
                bail!("{} is a float model; run `csnn quantize` first", a.model.display());
            };
            let (train_set, _) = split(&a.data)?;
            let mut th = compute_thresholds(&q, &train_set, a.percentile)?;
            th.conv.v_min = a.v_min;
            th.fc.v_min = a.v_min;
            let snn = convert(&q, &th)?;
            cio::save_image(&export_memory_image(&snn)?, &a.out)?;
        }
        Command::Sweep(a) => {
            let (train_set, test_set) = split(&a.data)?;
            let rows = sweep(&train_set, &test_set, &a.kernels, &a.pools, &a.opts.config(true))?;
            let mut out = String::from("kernel,pool,weights,float_accuracy,quantized_accuracy\n");
            for r in rows {
                out += &format!(
                    "{},{},{},{:.6},{:.6}\n",
                    r.kernel_size, r.pool_size, r.weight_count, r.float_accuracy, r.quantized_accuracy
                );
            }
            emit(None, &out)?;
        }
        Command::Infer(a) => infer(a)?,
        Command::Eval(a) => {
            let (train_set, test_set) = split(&a.data)?;
            let text = match (a.knn, &a.model) {
                (Some(k), _) => evaluation_text(&format!("knn-{k}"), &knn_baseline(&train_set, &test_set, k)?),
                (None, Some(p)) => match load_model(p)? {
                    ModelFile::Float(m) => evaluation_text("float", &evaluate(&m, &test_set)?),
                    ModelFile::Quantized(q) => evaluation_text("int8", &evaluate(&q, &test_set)?),
                },
                (None, None) => unreachable!("clap requires --model or --knn"),
            };
            emit(None, &text)?;
        }
        Command::Events(a) => {
            let ds = load_dataset(&a.data)?;
            let Some(sample) = ds.samples().get(a.index) else {
                bail!("sample index {} outside 0..{}", a.index, ds.len());
            };
            let stream = a.stream.config().stream(&sample.spectrum, a.index)?;
            cio::save_events(&stream, &a.out)?;
        }
        Command::ProtocolEcho(a) => {
            let model = load_image(&a.image)?;
            let listener = TcpListener::bind(&a.listen).with_context(|| format!("binding {}", a.listen))?;
            eprintln!("listening on {}", listener.local_addr()?);
            let mut served = 0;
            while a.connections.is_none_or(|n| served < n) {
                let (conn, peer) = listener.accept()?;
                let mut device = Device::new(model.clone())?;
                serve_device(conn, &mut device)?;
                eprintln!("{peer}: {} frames rejected", device.rejected().len());
                served += 1;
            }
        }
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let model = load_image(&a.image)?;
    if let Some(path) = &a.events {
        require_file(path, "event file")?;
        let stream = cio::load_events(path).with_context(|| format!("reading events {}", path.display()))?;
        let mut engine = Engine::new(model)?;
        if a.trace {
            engine.enable_trace();
        }
        let mut out = String::new();
        for ch in stream.channels() {
            engine.process_event(usize::from(ch))?;
            for r in engine.take_trace() {
                out += &format!("{r}\n");
            }
        }
        out += &format!("{}\n", engine.result());
        return emit(a.out.as_deref(), &out);
    }
    let data = a.data.as_deref().expect("clap requires --data without --events");
    let (_, test_set) = load_dataset(data)?.split(a.fold);
    let cfg = a.stream.config();
    let (report, transcript) = match &a.connect {
        Some(addr) => {
            let mut link = TcpTransport::connect(addr.as_str(), DEFAULT_TIMEOUT)
                .with_context(|| format!("connecting to {addr}"))?;
            run_batch(&mut link, model.arch.num_classes, &test_set, &cfg)?
        }
        None => run_batch_loopback(&model, &test_set, &cfg)?,
    };
    if let Some(p) = &a.transcript {
        fs::write(p, transcript.to_string()).with_context(|| format!("writing {}", p.display()))?;
    }
    emit(a.out.as_deref(), &report.to_string())?;
    if !report.errors.is_empty() {
        bail!("{} samples failed with protocol errors", report.errors.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
