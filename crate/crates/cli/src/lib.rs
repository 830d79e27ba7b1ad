//! Subcommands of the `woodnet` tool.
//!
//! [`run`] parses arguments and executes one command, writing normal output
//! to `out` and diagnostics to `err`, and returns the process exit code.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use woodnet::datapipe::{
    center_crop_square, decode_ppm, face_crop_square, prepare_dataset, resize_bilinear, CropMode, DatasetPack,
    FaceBox, NoiseKind, Normalization, PrepareConfig, Split, SplitFractions,
};
use woodnet::gradcheck::{run_gradcheck, Fault, KINDS, TOLERANCE};
use woodnet::models::badnet_spec;
use woodnet::train::PackSplit;
use woodnet::{
    adapt_for_transfer, evaluate_split, init_weights, load_checkpoint, run_training, softmax, Checkpoint, Mode,
    MetricsReport, Network, OptimizerKind, Tensor, TrainConfig, WoodNetConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "woodnet", version, about = "Train and run small face-recognition CNNs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a packed dataset from a directory of class folders.
    Prepare(PrepareArgs),
    /// Train a network on a packed dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and print a metrics report.
    Eval(EvalArgs),
    /// Classify images, one JSON line per image.
    Infer(InferArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CropArg {
    Face,
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Additive,
    Blur,
}

#[derive(Debug, clap::Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input_dir: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "center")]
    pub crop: CropArg,
    /// JSON lines of {image, x, y, w, h}; image is the path relative to the input directory.
    #[arg(long)]
    pub face_boxes: Option<PathBuf>,
    #[arg(long, default_value_t = 224)]
    pub size: usize,
    #[arg(long, default_value_t = 19)]
    pub replicas: u32,
    #[arg(long, default_value = "0.70,0.15,0.15")]
    pub split: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 picks one per core.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    #[arg(long, value_enum, default_value = "additive")]
    pub noise: NoiseArg,
    /// Comma-separated class folder names, in label order.
    #[arg(long)]
    pub classes: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Arch {
    Woodnet,
    WoodnetMini,
    Badnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "woodnet")]
    pub arch: Arch,
    #[arg(long, default_value_t = 25)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "checkpoints")]
    pub checkpoint_dir: PathBuf,
    /// Start from this checkpoint's weights.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// Replace the head of --init-from and train only the new head.
    #[arg(long)]
    pub freeze_features: bool,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
}

#[derive(Debug, clap::Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON lines of {image, x, y, w, h}; image matches a path argument.
    #[arg(long)]
    pub face_boxes: Option<PathBuf>,
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    LinearSign,
}

#[derive(Debug, clap::Args)]
pub struct GradcheckArgs {
    /// A layer kind, or `all`.
    #[arg(long, default_value = "all")]
    pub layer: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub configs: usize,
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<FaultArg>,
}

/// How a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Verification(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Data(_) => EXIT_DATA,
            Failure::Verification(_) => EXIT_VERIFY,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<woodnet::Error> for Failure {
    fn from(e: woodnet::Error) -> Self {
        match e {
            woodnet::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::Data(format!("cannot write output: {e}")))
}

/// Parse `args` (including the program name) and run the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(rendered.as_bytes())
            } else {
                err.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message());
            f.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    match command {
        Command::Prepare(a) => cmd_prepare(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Infer(a) => cmd_infer(&a, out, err),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
    }
}

pub fn cmd_prepare(args: &PrepareArgs, out: &mut dyn Write) -> Result<i32, Failure> {
    let crop = match args.crop {
        CropArg::Face => CropMode::Face,
        CropArg::Center => CropMode::Center,
    };
    if crop == CropMode::Face && args.face_boxes.is_none() {
        return Err(Failure::Usage("--crop face requires --face-boxes".into()));
    }
    let fractions: SplitFractions = args.split.parse().map_err(|e: woodnet::Error| Failure::Usage(e.to_string()))?;
    let config = PrepareConfig {
        input_dir: args.input_dir.clone(),
        face_boxes: args.face_boxes.clone(),
        crop,
        size: args.size,
        replicas: args.replicas,
        fractions,
        seed: args.seed,
        workers: args.workers,
        noise: match args.noise {
            NoiseArg::Additive => NoiseKind::Additive,
            NoiseArg::Blur => NoiseKind::Blur,
        },
        class_names: args
            .classes
            .as_ref()
            .map(|s| s.split(',').map(|c| c.trim().to_string()).collect()),
    };
    let (pack, summary) = prepare_dataset(&config)?;
    pack.write(&args.output)?;
    write_out(out, &format!("{summary}\n"))?;
    Ok(EXIT_OK)
}

fn build_network(args: &TrainArgs, pack: &DatasetPack) -> Result<Network, Failure> {
    let class_names = pack.header.class_names.clone();
    let size = pack.header.image_size;
    if args.freeze_features && args.init_from.is_none() {
        return Err(Failure::Usage("--freeze-features requires --init-from".into()));
    }
    if let Some(path) = &args.init_from {
        let donor = load_checkpoint(path)?.network;
        let net = if args.freeze_features {
            adapt_for_transfer(donor, class_names, args.seed)?
        } else {
            donor
        };
        return Ok(net);
    }
    let mut net = match args.arch {
        Arch::Woodnet | Arch::WoodnetMini => {
            let base = if args.arch == Arch::Woodnet {
                WoodNetConfig::full(class_names.len(), args.dropout)
            } else {
                WoodNetConfig::mini(class_names.len(), args.dropout)
            };
            let config = WoodNetConfig {
                input_size: size,
                class_names,
                ..base
            };
            Network::from_spec(&config.spec()?)?
        }
        Arch::Badnet => Network::from_spec(&badnet_spec(size, 256, class_names)?)?,
    };
    init_weights(&mut net, args.seed);
    Ok(net)
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<i32, Failure> {
    let pack = DatasetPack::read(&args.data)?;
    let net = build_network(args, &pack)?;
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        optimizer: match args.optimizer {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        },
        lr: args.lr,
        seed: args.seed,
        checkpoint_dir: Some(args.checkpoint_dir.clone()),
        normalization: Some(pack.header.normalization),
    };
    let train = PackSplit::new(&pack, Split::Train);
    let val = PackSplit::new(&pack, Split::Val);
    run_training(net, &train, &val, &config, out)?;
    Ok(EXIT_OK)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<i32, Failure> {
    let split: Split = args
        .split
        .parse()
        .map_err(|_| Failure::Usage(format!("unknown split {:?}; expected train, val or test", args.split)))?;
    let pack = DatasetPack::read(&args.data)?;
    let mut net = load_checkpoint(&args.checkpoint)?.network;
    let data = PackSplit::new(&pack, split);
    let (stats, cm) = evaluate_split(&mut net, &data, args.batch_size)?;
    let report = MetricsReport::new(stats.loss, &cm);
    let json = canonical(&report)? + "\n";
    match &args.out {
        Some(path) => fs::write(path, &json).map_err(|e| io_failure(path, e))?,
        None => write_out(out, &json)?,
    }
    Ok(EXIT_OK)
}

/// One classified image.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceResult {
    pub path: String,
    pub class: String,
    pub certainty: f64,
    pub probabilities: BTreeMap<String, f64>,
}

fn canonical<T: Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_value(value)
        .and_then(|v| serde_json::to_string(&v))
        .map_err(|e| Failure::Data(e.to_string()))
}

fn read_boxes(path: &Path) -> Result<BTreeMap<String, FaceBox>, Failure> {
    #[derive(serde::Deserialize)]
    struct Record {
        image: String,
        x: i64,
        y: i64,
        w: u32,
        h: u32,
    }
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    let mut boxes = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: Record = serde_json::from_str(line)
            .map_err(|e| Failure::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        boxes.insert(r.image, FaceBox { x: r.x, y: r.y, w: r.w, h: r.h });
    }
    Ok(boxes)
}

/// Crop, resize, normalize and classify one image file.
pub fn classify_file(
    net: &mut Network,
    normalization: &Normalization,
    path: &Path,
    face: Option<&FaceBox>,
) -> woodnet::Result<InferenceResult> {
    let bytes = fs::read(path).map_err(|e| woodnet::Error::Input(format!("cannot read image: {e}")))?;
    let img = decode_ppm(&bytes)?;
    let square = match face {
        Some(b) => face_crop_square(&img, b)?,
        None => center_crop_square(&img),
    };
    let [c, h, w] = net.input_shape();
    if h != w {
        return Err(woodnet::Error::Config("network input is not square".into()));
    }
    let resized = resize_bilinear(&square, h)?;
    let mut values = Vec::with_capacity(c * h * w);
    normalization.apply(&resized.to_chw(), &mut values);
    let logits = net.forward(&Tensor::from_vec(vec![1, c, h, w], values)?, Mode::Eval)?;
    let probs = softmax(&logits)?;
    let best = woodnet::Tensor::argmax_rows(&probs)?[0];
    let names = net.class_names();
    Ok(InferenceResult {
        path: path.display().to_string(),
        class: names[best].clone(),
        certainty: probs.data()[best] as f64,
        probabilities: names
            .iter()
            .zip(probs.data())
            .map(|(n, &p)| (n.clone(), p as f64))
            .collect(),
    })
}

pub fn cmd_infer(args: &InferArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, Failure> {
    let Checkpoint {
        mut network,
        normalization,
        ..
    } = load_checkpoint(&args.checkpoint)?;
    let normalization = normalization.unwrap_or(Normalization::IDENTITY);
    let boxes = match &args.face_boxes {
        Some(p) => read_boxes(p)?,
        None => BTreeMap::new(),
    };
    let mut failed = 0;
    for path in &args.paths {
        let face = boxes.get(&path.display().to_string());
        let line = match classify_file(&mut network, &normalization, path, face) {
            Ok(r) => canonical(&r)?,
            Err(e) => {
                failed += 1;
                let _ = writeln!(err, "error: {}: {e}", path.display());
                canonical(&serde_json::json!({ "path": path.display().to_string(), "error": e.to_string() }))?
            }
        };
        write_out(out, &(line + "\n"))?;
    }
    Ok(if failed > 0 { EXIT_DATA } else { EXIT_OK })
}

pub fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<i32, Failure> {
    let kinds: Vec<&str> = if args.layer == "all" {
        KINDS.to_vec()
    } else {
        match KINDS.iter().find(|k| **k == args.layer) {
            Some(k) => vec![*k],
            None => {
                return Err(Failure::Usage(format!(
                    "unknown layer {:?}; expected all or one of {}",
                    args.layer,
                    KINDS.join(", ")
                )))
            }
        }
    };
    if args.configs == 0 {
        return Err(Failure::Usage("--configs must be at least 1".into()));
    }
    let fault = args.inject_fault.map(|FaultArg::LinearSign| Fault::LinearSignFlip);
    let reports = run_gradcheck(&kinds, args.seed, args.configs, fault)?;
    let mut text = String::new();
    for r in &reports {
        text += &format!(
            "{:<14} max relative error {:.3e} over {} configs: {}\n",
            r.kind,
            r.max_rel_error,
            r.configs,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    write_out(out, &text)?;
    if reports.iter().all(|r| r.passed()) {
        Ok(EXIT_OK)
    } else {
        Err(Failure::Verification(format!(
            "gradient check failed (tolerance {TOLERANCE:e})"
        )))
    }
}
