//! Argument parsing and dispatch for the `teg` binary.
//!
//! Every subcommand is a thin wrapper over `teg-core`; errors are mapped to
//! distinct exit codes by [`exit_code`].

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use teg::data::synthetic::{generate_dataset, ClassPool, DurationProfile, SyntheticConfig};
use teg::data::{manifest_path, read_manifest, Dataset};
use teg::error::Error;
use teg::eval::{evaluate, score_dataset};
use teg::granularity::Scale;
use teg::loss::LossConfig;
use teg::model::checkpoint::{read_checkpoint, write_checkpoint};
use teg::model::TeGConfig;
use teg::serve::{read_stream, run_stream, Emitter, EndpointConfig, ServeConfig};
use teg::trainer::{fit, TrainConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_CONFIG: i32 = 5;
pub const EXIT_TRAINING: i32 = 6;
pub const EXIT_DELIVERY: i32 = 7;
pub const EXIT_METRIC: i32 = 8;

#[derive(Debug, Parser)]
#[command(name = "teg", version, about = "Temporal-granularity video anomaly detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test feature dataset.
    Generate(GenerateArgs),
    /// Train a model on a feature dataset.
    Train(TrainArgs),
    /// Evaluate a model and write a JSON report.
    Eval(EvalArgs),
    /// Score every video of a split.
    Score(ScoreArgs),
    /// Score a line-delimited stream of segment features and deliver packets.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Laptop scale: 200 epochs, 16-wide features.
    Desk,
    /// Full scale: 1000 epochs, 1024-wide features.
    Paper,
}

impl Preset {
    pub fn epochs(self) -> usize {
        match self {
            Preset::Desk => TrainConfig::desk().epochs,
            Preset::Paper => TrainConfig::full_scale().epochs,
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Preset::Desk => 16,
            Preset::Paper => 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Short,
    Medium,
    Long,
    Mixed,
}

impl From<ProfileArg> for DurationProfile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Short => DurationProfile::Short,
            ProfileArg::Medium => DurationProfile::Medium,
            ProfileArg::Long => DurationProfile::Long,
            ProfileArg::Mixed => DurationProfile::Mixed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Short,
    Medium,
    Long,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Short => Scale::Short,
            ScaleArg::Medium => Scale::Medium,
            ScaleArg::Long => Scale::Long,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Feature width [default: 16 with desk, 1024 with paper]
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long, default_value_t = 2048)]
    pub frames: usize,
    #[arg(long, default_value_t = 100)]
    pub train_normal: usize,
    #[arg(long, default_value_t = 100)]
    pub train_abnormal: usize,
    #[arg(long, default_value_t = 25)]
    pub test_normal: usize,
    #[arg(long, default_value_t = 25)]
    pub test_abnormal: usize,
    /// Duration of planted anomalies.
    #[arg(long, value_enum, default_value = "mixed")]
    pub profile: ProfileArg,
    #[arg(long, default_value_t = 6.0)]
    pub signal_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_std: f64,
    /// Chunk lengths of the short, medium and long granularities.
    #[arg(long, value_delimiter = ',', default_value = "8,32,64")]
    pub granularities: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Training epochs [default: 200 with desk, 1000 with paper]
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr", default_value = "1e-4")]
    pub learning_rate: f64,
    #[arg(long, default_value = "5e-4")]
    pub weight_decay: f64,
    /// Apply weight decay directly to the weights instead of the gradient.
    #[arg(long)]
    pub decoupled_weight_decay: bool,
    /// Feature-magnitude hinge margin.
    #[arg(long, default_value = "100")]
    pub margin: f64,
    /// Segments averaged by the top-k selection.
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value = "1.0")]
    pub lambda_fm: f64,
    #[arg(long, default_value = "8e-4")]
    pub lambda_sparsity: f64,
    #[arg(long, default_value = "8e-4")]
    pub lambda_smoothness: f64,
    /// Attention heads.
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Hidden widths of the classifier.
    #[arg(long, value_delimiter = ',', default_value = "512,128")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    #[arg(long)]
    pub no_layer_norm: bool,
    #[arg(long, default_value_t = 64)]
    pub batch_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint period in epochs; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Directory for periodic checkpoints [default: next to --out]
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Line-delimited JSON training report [default: <out>.report.jsonl]
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Split used for the validation AUC trace.
    #[arg(long)]
    pub validation_split: Option<String>,
    /// Validation period in epochs; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    /// Train on a single granularity copied into all three slots.
    #[arg(long, value_enum)]
    pub single_scale: Option<ScaleArg>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Split whose anomaly classes count as seen.
    #[arg(long, default_value = "train")]
    pub train_split: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, value_enum)]
    pub single_scale: Option<ScaleArg>,
    /// Report path [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum)]
    pub single_scale: Option<ScaleArg>,
    /// Segment scores path [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory receiving one frame-score JSON per video.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Line-delimited JSON segment records; `-` reads standard input.
    #[arg(long)]
    pub stream: PathBuf,
    /// HTTP endpoint receiving packets; the bearer token comes from TEG_ENDPOINT_TOKEN.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long, default_value = "spool.jsonl")]
    pub spool: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 1)]
    pub min_run: usize,
    #[arg(long, default_value_t = 256)]
    pub queue_capacity: usize,
    #[arg(long, default_value = "anomaly")]
    pub anomaly_type: String,
    #[arg(long, default_value_t = 3)]
    pub max_attempts: u32,
    #[arg(long, default_value_t = 200)]
    pub backoff_ms: u64,
    #[arg(long, default_value_t = 5000)]
    pub timeout_ms: u64,
    /// Summary path [default: standard output]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Format { .. } | Error::Json(_) => EXIT_FORMAT,
        Error::Config(_) | Error::Contract(_) | Error::Shape { .. } | Error::Provider { .. } => EXIT_CONFIG,
        Error::NonFinite { .. } => EXIT_TRAINING,
        Error::Delivery(_) => EXIT_DELIVERY,
        Error::UndefinedMetric(_) => EXIT_METRIC,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("teg: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Score(a) => score(a),
        Command::Serve(a) => serve(a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            std::fs::write(p, text).map_err(io_err(p))
        }
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(io_err(Path::new("<stdout>"))),
    }
}

fn load_split(dir: &Path, split: &str, scale: Option<ScaleArg>) -> Result<Dataset, Error> {
    let d = Dataset::load(dir, split)?;
    Ok(match scale {
        Some(s) => d.single_scale(s.into()),
        None => d,
    })
}

fn generate(a: GenerateArgs) -> Result<(), Error> {
    let granularities: [usize; 3] = a
        .granularities
        .as_slice()
        .try_into()
        .map_err(|_| Error::Config("exactly three granularities are required".into()))?;
    let base = SyntheticConfig {
        dim: a.dim.unwrap_or(a.preset.dim()),
        frames: a.frames,
        profile: a.profile.into(),
        signal_scale: a.signal_scale,
        noise_std: a.noise_std,
        granularities,
        seed: a.seed,
        ..SyntheticConfig::desk_train()
    };
    let splits = [
        ("train", a.train_normal, a.train_abnormal, ClassPool::Seen),
        ("test", a.test_normal, a.test_abnormal, ClassPool::All),
    ];
    for (split, normal, abnormal, classes) in splits {
        let cfg = SyntheticConfig {
            normal_videos: normal,
            abnormal_videos: abnormal,
            classes,
            id_prefix: format!("{split}_"),
            ..base.clone()
        };
        let d = generate_dataset(&cfg)?;
        d.save(&a.out, split)?;
        log::info!("wrote {} {split} videos to {}", d.len(), a.out.display());
    }
    Ok(())
}

fn default_report_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.report.jsonl"))
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let dataset = load_split(&a.data, &a.split, a.single_scale)?;
    let validation = a
        .validation_split
        .as_deref()
        .map(|s| load_split(&a.data, s, a.single_scale))
        .transpose()?;
    let dim = dataset
        .dim()
        .ok_or_else(|| Error::Contract(format!("split {:?} is empty", a.split)))?;
    let [h1, h2] = a.hidden[..] else {
        return Err(Error::Config("--hidden takes exactly two widths".into()));
    };
    let model = TeGConfig {
        dim,
        heads: a.heads,
        fcn_hidden: (h1, h2),
        dropout_rate: a.dropout,
        use_layer_norm: !a.no_layer_norm,
    };
    let loss = LossConfig {
        margin: a.margin,
        k: a.k,
        lambda_fm: a.lambda_fm,
        lambda_sparsity: a.lambda_sparsity,
        lambda_smoothness: a.lambda_smoothness,
        ..LossConfig::default()
    };
    let checkpoint_dir = match (a.checkpoint_every, a.checkpoint_dir) {
        (_, Some(d)) => Some(d),
        (0, None) => None,
        (_, None) => Some(a.out.parent().map_or_else(PathBuf::new, Path::to_path_buf)),
    };
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(a.preset.epochs()),
        learning_rate: a.learning_rate,
        weight_decay: a.weight_decay,
        decoupled_weight_decay: a.decoupled_weight_decay,
        batch_per_class: a.batch_per_class,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        eval_every: a.eval_every,
        checkpoint_dir,
        report_path: Some(a.report.unwrap_or_else(|| default_report_path(&a.out))),
    };
    let out = fit(&dataset, validation.as_ref(), &cfg, &loss, &model)?;
    write_checkpoint(&a.out, &model, &out.params)?;
    if let Some(last) = out.report.epochs.last() {
        log::info!("epoch {} total loss {:.6}", last.epoch, last.loss.total);
    }
    Ok(())
}

/// Anomaly classes of the abnormal videos in `split`, if that split exists.
fn seen_classes(dir: &Path, split: &str) -> Result<Vec<String>, Error> {
    let path = manifest_path(dir, split);
    if !path.exists() {
        log::warn!("{} not found; every class counts as unseen", path.display());
        return Ok(Vec::new());
    }
    let classes: BTreeSet<String> = read_manifest(&path)?
        .into_iter()
        .filter(|l| l.y == 1)
        .map(|l| l.anomaly_class)
        .collect();
    Ok(classes.into_iter().collect())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let (model, params) = read_checkpoint(&a.model)?;
    let dataset = load_split(&a.data, &a.split, a.single_scale)?;
    let seen = seen_classes(&a.data, &a.train_split)?;
    let (report, _) = evaluate(&params, &model, &dataset, a.threshold, &seen)?;
    write_json(&report, a.out.as_deref())
}

#[derive(Serialize)]
struct VideoScores<'a> {
    video_id: &'a str,
    segment_scores: &'a [f64],
    max_score: f64,
}

#[derive(Serialize)]
struct FrameTrace<'a> {
    video_id: &'a str,
    anomaly_class: &'a str,
    frame_scores: &'a [f64],
    frame_truth: &'a [u8],
}

fn score(a: ScoreArgs) -> Result<(), Error> {
    let (model, params) = read_checkpoint(&a.model)?;
    let dataset = load_split(&a.data, &a.split, a.single_scale)?;
    let scored = score_dataset(&params, &model, &dataset)?;
    if let Some(dir) = &a.trace {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        for ((_, t), l) in scored.iter().zip(&dataset.labels) {
            let trace = FrameTrace {
                video_id: &t.video_id,
                anomaly_class: &l.anomaly_class,
                frame_scores: &t.scores,
                frame_truth: &t.truth,
            };
            write_json(&trace, Some(&dir.join(format!("{}.json", t.video_id))))?;
        }
    }
    let rows: Vec<VideoScores> = scored
        .iter()
        .map(|(s, t)| VideoScores {
            video_id: &t.video_id,
            segment_scores: &s.scores,
            max_score: s.max(),
        })
        .collect();
    write_json(&rows, a.out.as_deref())
}

fn serve(a: ServeArgs) -> Result<(), Error> {
    let (model, params) = read_checkpoint(&a.model)?;
    let config = ServeConfig {
        threshold: a.threshold,
        min_run: a.min_run,
        queue_capacity: a.queue_capacity,
        anomaly_type: a.anomaly_type,
    };
    let emitter = a
        .endpoint
        .map(|url| {
            Emitter::new(EndpointConfig {
                max_attempts: a.max_attempts,
                backoff_base: Duration::from_millis(a.backoff_ms),
                timeout: Duration::from_millis(a.timeout_ms),
                ..EndpointConfig::from_env(url, a.spool.clone())
            })
        })
        .transpose()?;
    let summary = if a.stream.as_os_str() == "-" {
        run_stream(read_stream(std::io::stdin().lock()), &params, &model, config, emitter.as_ref())?
    } else {
        let f = File::open(&a.stream).map_err(io_err(&a.stream))?;
        run_stream(read_stream(BufReader::new(f)), &params, &model, config, emitter.as_ref())?
    };
    if summary.spooled() > 0 {
        log::warn!("{} packets spooled to {}", summary.spooled(), a.spool.display());
    }
    match a.out.as_deref() {
        Some(p) => {
            let f = File::create(p).map_err(io_err(p))?;
            let mut w = BufWriter::new(f);
            serde_json::to_writer_pretty(&mut w, &summary)?;
            w.write_all(b"\n").map_err(io_err(p))?;
            w.flush().map_err(io_err(p))
        }
        None => write_json(&summary, None),
    }
}
