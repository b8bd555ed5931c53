//! Command-line front end: argument parsing, configuration resolution and
//! subcommand dispatch.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::ctc::{beam_decode, greedy_decode, oracle, Lattice};
use crate::data::{
    build_charset, derive_seed, detokenize, load_manifest, normalize_image, read_pgm, resize_pad, save_records, stream,
    toy_corpus, AugmentSpec, Charset, SampleRecord, PAPER, TOY_ALPHABET,
};
use crate::error::{Error, Result};
use crate::eval::{export_attention, lexicon_correct, metrics, word_confidences, EvalReport, Lexicon};
use crate::model::{
    load, save, Model, ModelConfig, FULL_HEIGHT, FULL_WIDTH, TOY_HEIGHT, TOY_WIDTH,
};
use crate::numerics::{DType, Scalar};
use crate::oracle::gradient_suite;
use crate::train::{
    infer_lattices, run_toy_experiment, train, TaskWeighting, Teacher, ToyExperiment, TrainConfig, TrainData,
};

/// Exit code for malformed invocations and missing inputs.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running a valid command.
pub const EXIT_RUNTIME: i32 = 1;

/// Checkpoint and sidecar names inside a model directory.
pub const CHECKPOINT_FILE: &str = "model.htrj";
pub const SIDECAR_FILE: &str = "model.json";
pub const LOG_FILE: &str = "train.jsonl";

#[derive(Parser, Debug)]
#[command(name = "htr", version, about = "Handwritten text recognition with teacher-student distillation")]
pub struct Cli {
    /// Print the fully resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    pub dump_config: bool,
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic line corpus and write its manifest.
    GenData(GenDataArgs),
    /// Train a teacher with CTC and the auxiliary head only.
    TrainTeacher(TrainTeacherArgs),
    /// Train a student against a trained teacher.
    Distill(DistillArgs),
    /// Transcribe a manifest and report CER, WER and SER.
    Eval(EvalArgs),
    /// Transcribe images, or decode a lattice file.
    Decode(DecodeArgs),
    /// Write one attention map as CSV and PGM.
    ExportAttention(ExportAttentionArgs),
    /// Run the CTC, decoder and gradient self-checks.
    Oracle(OracleArgs),
    /// Run the desk-scale teacher/student comparison end to end.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Full-size network for 68x864 lines.
    Full,
    /// Desk-scale network for 32x256 lines.
    Toy,
    /// Smallest network, for smoke tests.
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    Mha,
    Proxima,
}

/// Network shape selection. Explicit sizes override the preset.
#[derive(Args, Debug, Clone)]
pub struct ShapeFlags {
    /// Image height (default from the preset).
    #[arg(long)]
    pub height: Option<usize>,
    /// Image width (default from the preset).
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lstm_layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// 1-based BiLSTM layer feeding the auxiliary head.
    #[arg(long)]
    pub aux_tap: Option<usize>,
}

impl ShapeFlags {
    fn image_size(&self, preset: Preset) -> (usize, usize) {
        let (h, w) = match preset {
            Preset::Full => (FULL_HEIGHT, FULL_WIDTH),
            Preset::Toy | Preset::Tiny => (TOY_HEIGHT, TOY_WIDTH),
        };
        (self.height.unwrap_or(h), self.width.unwrap_or(w))
    }

    fn resolve(&self, preset: Preset, student: bool, classes: usize) -> ModelConfig {
        let (h, w) = self.image_size(preset);
        let mut c = match (preset, student) {
            (Preset::Full, false) => ModelConfig::teacher(classes, h, w),
            (Preset::Full, true) => ModelConfig::student(classes, h, w),
            (Preset::Toy, false) => ModelConfig {
                height: h,
                width: w,
                ..ModelConfig::toy_teacher(classes)
            },
            (Preset::Toy, true) => ModelConfig {
                height: h,
                width: w,
                ..ModelConfig::toy_student(classes)
            },
            (Preset::Tiny, _) => ModelConfig::tiny(classes, h, w),
        };
        c.blocks = self.blocks.unwrap_or(c.blocks);
        c.channels = self.channels.unwrap_or(c.channels);
        c.hidden = self.hidden.unwrap_or(c.hidden);
        c.lstm_layers = self.lstm_layers.unwrap_or(c.lstm_layers);
        c.heads = self.heads.unwrap_or(c.heads);
        c.aux_tap = self.aux_tap.unwrap_or(c.aux_tap);
        c
    }
}

/// Training hyperparameters; every default matches [`TrainConfig::default`].
#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = crate::train::BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, default_value_t = crate::train::LEARNING_RATE)]
    pub lr: f64,
    /// Global gradient-norm clip.
    #[arg(long, default_value_t = crate::train::CLIP_NORM)]
    pub clip: f64,
    /// Distillation temperature.
    #[arg(long, default_value_t = crate::distill::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, default_value_t = crate::train::SYNTHETIC_R0)]
    pub synthetic_r0: f64,
    #[arg(long, default_value_t = crate::train::SYNTHETIC_RMAX)]
    pub synthetic_rmax: f64,
    #[arg(long, default_value_t = crate::train::STAGE_THRESHOLD)]
    pub stage_threshold: f64,
    #[arg(long, default_value_t = crate::train::STAGE_DELTA)]
    pub stage_delta: f64,
    /// Train on every line from the first epoch.
    #[arg(long)]
    pub no_curriculum: bool,
    /// Early-stopping patience in epochs.
    #[arg(long, default_value_t = crate::train::PATIENCE)]
    pub patience: usize,
    /// Smallest validation-loss drop that counts as an improvement.
    #[arg(long, default_value_t = crate::train::MIN_IMPROVEMENT)]
    pub min_delta: f64,
    #[arg(long, value_enum, default_value_t = TaskWeighting::Harder)]
    pub task_weighting: TaskWeighting,
    /// Disable image augmentation.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

impl TrainFlags {
    fn resolve(&self, distill: bool) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            clip: self.clip,
            tau: self.tau,
            distill,
            synthetic_r0: self.synthetic_r0,
            synthetic_rmax: self.synthetic_rmax,
            curriculum: !self.no_curriculum,
            stage_threshold: self.stage_threshold,
            stage_delta: self.stage_delta,
            patience: self.patience,
            min_delta: self.min_delta,
            task_weighting: self.task_weighting,
            augment: if self.no_augment {
                AugmentSpec::none()
            } else {
                AugmentSpec::default()
            },
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output directory; receives `manifest.jsonl` and `images/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = TOY_HEIGHT)]
    pub height: usize,
    #[arg(long, default_value_t = TOY_WIDTH)]
    pub width: usize,
}

#[derive(Args, Debug)]
pub struct TrainTeacherArgs {
    /// Training manifest (JSON lines with image, text, source).
    #[arg(long)]
    pub train: PathBuf,
    /// Validation manifest.
    #[arg(long)]
    pub val: PathBuf,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub teacher: Preset,
    #[command(flatten)]
    pub shape: ShapeFlags,
    #[command(flatten)]
    pub train_flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Directory written by `train-teacher`.
    #[arg(long)]
    pub teacher_model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    pub student: Preset,
    /// Train the same student without the distillation term.
    #[arg(long)]
    pub no_kd: bool,
    #[command(flatten)]
    pub shape: ShapeFlags,
    #[command(flatten)]
    pub train_flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Model directory.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Word list for post-correction, one word per line.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Largest edit distance a word may be snapped across.
    #[arg(long, default_value_t = 2)]
    pub max_snap: usize,
    /// Words decoded at or above this confidence are never corrected.
    #[arg(long, default_value_t = 0.9)]
    pub confidence_threshold: f64,
    /// Beam width; greedy decoding when absent.
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long, default_value_t = crate::train::BATCH_SIZE)]
    pub batch_size: usize,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// Model directory, required for images.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// JSON lattice `{"charset": "...", "log_probs": [[...], ...]}` instead
    /// of images.
    #[arg(long, conflicts_with = "images")]
    pub lattice: Option<PathBuf>,
    /// Beam width; greedy decoding when absent.
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// PGM line images.
    pub images: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportAttentionArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Output path stem; `.csv` and `.pgm` are added.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = AttentionKind::Mha)]
    pub kind: AttentionKind,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    /// Random CTC cases compared against enumeration.
    #[arg(long, default_value_t = 200)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the finite-difference gradient suite.
    #[arg(long)]
    pub no_gradients: bool,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Output directory for logs, checkpoints and `report.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub lines: usize,
    #[arg(long, default_value_t = 200)]
    pub val_lines: usize,
    #[arg(long, default_value_t = 200)]
    pub test_lines: usize,
    #[arg(long, default_value_t = 30)]
    pub teacher_epochs: usize,
    #[arg(long, default_value_t = crate::train::TOY_STUDENT_EPOCHS)]
    pub student_epochs: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
    pub student_seeds: Vec<u64>,
    #[command(flatten)]
    pub train_flags: TrainFlags,
}

/// Everything a run depends on, as printed by `--dump-config`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paths: Vec<(String, PathBuf)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<Precision>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

/// Model directory sidecar: what is needed to rebuild and use the checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: ModelConfig,
    pub charset: Charset,
    pub precision: Precision,
    pub train: TrainConfig,
}

/// Lattice file accepted by `decode --lattice`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatticeFile {
    /// Characters for classes `1..` in sorted order; class 0 is the blank.
    pub charset: String,
    /// `[T][V]` per-frame log-probabilities.
    pub log_probs: Vec<Vec<f64>>,
}

/// Errors split by exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

/// Parses `argv`, runs the command, prints results to `out` and a single
/// JSON error line to `err` on failure. Returns the process exit code.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let msg = e.kind().to_string();
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or(&msg).trim_start_matches("error: ");
            let _ = writeln!(err, "{}", error_line("usage", first));
            return EXIT_USAGE;
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "{}", error_line("usage", &m));
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "{}", error_line(e.kind(), &e.to_string()));
            EXIT_RUNTIME
        }
    }
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn init_workers(workers: Option<usize>) -> CliResult<()> {
    if let Some(n) = workers {
        if n == 0 {
            return Err(Failure::Usage("--workers must be positive".into()));
        }
        // A pool may already exist when the CLI runs in-process more than once.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn print_json(out: &mut dyn Write, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Training(e.to_string()))?;
    writeln!(out, "{text}").map_err(|e| Error::io("stdout", e))?;
    Ok(())
}

fn say(out: &mut dyn Write, line: impl std::fmt::Display) -> CliResult<()> {
    writeln!(out, "{line}").map_err(|e| Failure::Runtime(Error::io("stdout", e)))
}

fn paths(pairs: &[(&str, &Path)]) -> Vec<(String, PathBuf)> {
    pairs.iter().map(|(k, p)| (k.to_string(), p.to_path_buf())).collect()
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CliResult<()> {
    let base = |command: &str| RunConfig {
        command: command.into(),
        workers: cli.workers,
        seed: None,
        paths: Vec::new(),
        model: None,
        train: None,
        precision: None,
        extra: serde_json::Value::Null,
    };
    match &cli.command {
        Command::GenData(a) => {
            if cli.dump_config {
                let cfg = RunConfig {
                    seed: Some(a.seed),
                    paths: paths(&[("out", &a.out)]),
                    extra: serde_json::json!({ "count": a.count, "height": a.height, "width": a.width }),
                    ..base("gen-data")
                };
                return print_json(out, &cfg);
            }
            init_workers(cli.workers)?;
            gen_data(a, out)
        }
        Command::TrainTeacher(a) => {
            let tc = a.train_flags.resolve(false);
            if cli.dump_config {
                let cfg = RunConfig {
                    seed: Some(a.train_flags.seed),
                    paths: paths(&[("train", &a.train), ("val", &a.val), ("out", &a.out)]),
                    model: Some(a.shape.resolve(a.teacher, false, 0)),
                    train: Some(tc),
                    precision: Some(a.train_flags.precision),
                    extra: serde_json::json!({ "preset": a.teacher, "classes": "from charset" }),
                    ..base("train-teacher")
                };
                return print_json(out, &cfg);
            }
            init_workers(cli.workers)?;
            require(&a.train, "training manifest")?;
            require(&a.val, "validation manifest")?;
            train_teacher(a, tc, out)
        }
        Command::Distill(a) => {
            let tc = a.train_flags.resolve(!a.no_kd);
            if cli.dump_config {
                let cfg = RunConfig {
                    seed: Some(a.train_flags.seed),
                    paths: paths(&[
                        ("train", &a.train),
                        ("val", &a.val),
                        ("teacher_model", &a.teacher_model),
                        ("out", &a.out),
                    ]),
                    model: Some(a.shape.resolve(a.student, true, 0)),
                    train: Some(tc),
                    precision: Some(a.train_flags.precision),
                    extra: serde_json::json!({ "preset": a.student, "classes": "from teacher charset" }),
                    ..base("distill")
                };
                return print_json(out, &cfg);
            }
            init_workers(cli.workers)?;
            require(&a.train, "training manifest")?;
            require(&a.val, "validation manifest")?;
            require(&a.teacher_model.join(SIDECAR_FILE), "teacher model")?;
            distill(a, tc, out)
        }
        Command::Eval(a) => {
            if cli.dump_config {
                let mut p = paths(&[("model", &a.model), ("manifest", &a.manifest)]);
                if let Some(l) = &a.lexicon {
                    p.push(("lexicon".into(), l.clone()));
                }
                let cfg = RunConfig {
                    paths: p,
                    extra: serde_json::json!({
                        "beam_width": a.beam_width,
                        "max_snap": a.max_snap,
                        "confidence_threshold": a.confidence_threshold,
                        "batch_size": a.batch_size,
                    }),
                    ..base("eval")
                };
                return print_json(out, &cfg);
            }
            init_workers(cli.workers)?;
            require(&a.model.join(SIDECAR_FILE), "model")?;
            require(&a.manifest, "manifest")?;
            if let Some(l) = &a.lexicon {
                require(l, "lexicon")?;
            }
            eval(a, out)
        }
        Command::Decode(a) => {
            if cli.dump_config {
                let mut p: Vec<(String, PathBuf)> = a.images.iter().map(|i| ("image".to_string(), i.clone())).collect();
                if let Some(m) = &a.model {
                    p.push(("model".into(), m.clone()));
                }
                if let Some(l) = &a.lattice {
                    p.push(("lattice".into(), l.clone()));
                }
                let cfg = RunConfig {
                    paths: p,
                    extra: serde_json::json!({ "beam_width": a.beam_width }),
                    ..base("decode")
                };
                return print_json(out, &cfg);
            }
            init_workers(cli.workers)?;
            decode(a, out)
        }
        Command::ExportAttention(a) => {
            if cli.dump_config {
                let cfg = RunConfig {
                    paths: paths(&[("model", &a.model), ("image", &a.image), ("out", &a.out)]),
                    extra: serde_json::json!({ "kind": a.kind, "head": a.head }),
                    ..base("export-attention")
                };
                return print_json(out, &cfg);
            }
            require(&a.model.join(SIDECAR_FILE), "model")?;
            require(&a.image, "image")?;
            export(a, out)
        }
        Command::Oracle(a) => {
            if cli.dump_config {
                let cfg = RunConfig {
                    seed: Some(a.seed),
                    extra: serde_json::json!({ "cases": a.cases, "gradients": !a.no_gradients }),
                    ..base("oracle")
                };
                return print_json(out, &cfg);
            }
            init_workers(cli.workers)?;
            run_oracle(a, out)
        }
        Command::Experiment(a) => {
            let exp = experiment_config(a);
            if cli.dump_config {
                let cfg = RunConfig {
                    seed: Some(a.train_flags.seed),
                    paths: paths(&[("out", &a.out)]),
                    train: Some(exp.train.clone()),
                    precision: Some(a.train_flags.precision),
                    extra: serde_json::to_value(&exp).map_err(|e| Error::Training(e.to_string()))?,
                    ..base("experiment")
                };
                return print_json(out, &cfg);
            }
            init_workers(cli.workers)?;
            experiment(a, exp, out)
        }
    }
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> CliResult<()> {
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let records = toy_corpus(a.count, a.height, a.width, a.seed)?;
    let manifest = a.out.join("manifest.jsonl");
    save_records(&manifest, &records)?;
    say(out, format!("wrote {} lines to {}", records.len(), manifest.display()))
}

fn load_sidecar(dir: &Path) -> Result<Sidecar> {
    let p = dir.join(SIDECAR_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: p, msg: e.to_string() })
}

fn write_model<F: Scalar>(dir: &Path, model: &Model<F>, sidecar: &Sidecar) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save(model, &dir.join(CHECKPOINT_FILE))?;
    let p = dir.join(SIDECAR_FILE);
    let text = serde_json::to_string_pretty(sidecar).map_err(|e| Error::Training(e.to_string()))?;
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

fn load_split(train: &Path, val: &Path, height: usize, width: usize) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
    let tr = load_manifest(train, height, width)?;
    let va = load_manifest(val, height, width)?;
    if tr.is_empty() || va.is_empty() {
        return Err(Error::Config("training and validation manifests must be non-empty".into()));
    }
    Ok((tr, va))
}

fn open_log(dir: &Path) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(LOG_FILE);
    File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
}

fn train_teacher(a: &TrainTeacherArgs, tc: TrainConfig, out: &mut dyn Write) -> CliResult<()> {
    let (h, w) = a.shape.image_size(a.teacher);
    let (tr, va) = load_split(&a.train, &a.val, h, w)?;
    let texts: Vec<&str> = tr.iter().chain(&va).map(|r| r.text.as_str()).collect();
    let (charset, _) = build_charset(&texts, 1)?;
    let config = a.shape.resolve(a.teacher, false, charset.num_classes());
    let data = TrainData::build(&tr, &va, &charset, &tc.augment, tc.synthetic_rmax, (h, w), tc.seed)?;
    let sidecar = Sidecar {
        config: config.clone(),
        charset,
        precision: a.train_flags.precision,
        train: tc.clone(),
    };
    match a.train_flags.precision {
        Precision::F32 => fit::<f32>(config, None, &data, &tc, &a.out, &sidecar, out),
        Precision::F64 => fit::<f64>(config, None, &data, &tc, &a.out, &sidecar, out),
    }
}

fn distill(a: &DistillArgs, tc: TrainConfig, out: &mut dyn Write) -> CliResult<()> {
    let teacher_side = load_sidecar(&a.teacher_model)?;
    let (h, w) = a.shape.image_size(a.student);
    let (tr, va) = load_split(&a.train, &a.val, h, w)?;
    let charset = teacher_side.charset.clone();
    let config = a.shape.resolve(a.student, true, charset.num_classes());
    let data = TrainData::build(&tr, &va, &charset, &tc.augment, tc.synthetic_rmax, (h, w), tc.seed)?;
    let sidecar = Sidecar {
        config: config.clone(),
        charset,
        precision: a.train_flags.precision,
        train: tc.clone(),
    };
    let ckpt = a.teacher_model.join(CHECKPOINT_FILE);
    match a.train_flags.precision {
        Precision::F32 => {
            let t = load_any::<f32>(&ckpt, &teacher_side)?;
            fit::<f32>(config, Some(&t), &data, &tc, &a.out, &sidecar, out)
        }
        Precision::F64 => {
            let t = load_any::<f64>(&ckpt, &teacher_side)?;
            fit::<f64>(config, Some(&t), &data, &tc, &a.out, &sidecar, out)
        }
    }
}

/// Loads a checkpoint written at either precision as `F`.
fn load_any<F: Scalar>(path: &Path, side: &Sidecar) -> Result<Model<F>> {
    if side.precision.dtype() == F::DTYPE {
        load::<F>(path, &side.config)
    } else {
        let m = match side.precision {
            Precision::F32 => cast_model::<f32, F>(load::<f32>(path, &side.config)?),
            Precision::F64 => cast_model::<f64, F>(load::<f64>(path, &side.config)?),
        };
        Ok(m)
    }
}

fn cast_model<A: Scalar, B: Scalar>(m: Model<A>) -> Model<B> {
    Model {
        config: m.config,
        store: m.store.cast(),
    }
}

fn fit<F: Scalar>(
    config: ModelConfig,
    teacher: Option<&Model<F>>,
    data: &TrainData,
    tc: &TrainConfig,
    dir: &Path,
    sidecar: &Sidecar,
    out: &mut dyn Write,
) -> CliResult<()> {
    let mut model = Model::<F>::new(config, derive_seed(tc.seed, &[stream::INIT]))?;
    let mut log = open_log(dir)?;
    let mut cache = teacher.map(|t| Teacher::new(t, tc.batch_size));
    let report = train(&mut model, cache.as_mut(), data, tc, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
    write_model(dir, &model, sidecar)?;
    let best = report.log.iter().find(|r| r.epoch == report.best_epoch);
    say(
        out,
        format!(
            "epochs: {}\nbest_epoch: {}\nval_cer: {:.6}\nstopped_early: {}\nparams: {}\nmodel: {}",
            report.log.len(),
            report.best_epoch,
            best.map_or(f64::NAN, |r| r.val_cer),
            report.stopped_early,
            model.param_count(),
            dir.join(CHECKPOINT_FILE).display()
        ),
    )
}

fn load_images(paths: &[PathBuf], height: usize, width: usize) -> CliResult<Vec<crate::data::GrayImage>> {
    paths
        .iter()
        .map(|p| {
            require(p, "image")?;
            let raw = read_pgm(p)?;
            Ok(normalize_image(&resize_pad(&raw, height, width, PAPER)?))
        })
        .collect()
}

fn decode_lattice(lat: &Lattice, beam: Option<usize>) -> Result<Vec<usize>> {
    match beam {
        Some(w) => beam_decode(lat, w),
        None => Ok(greedy_decode(lat)),
    }
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let side = load_sidecar(&a.model)?;
    let lexicon = a
        .lexicon
        .as_deref()
        .map(|p| Lexicon::load(p, a.max_snap, a.confidence_threshold))
        .transpose()?;
    let records = load_manifest(&a.manifest, side.config.height, side.config.width)?;
    if records.is_empty() {
        return Err(Failure::Runtime(Error::Config("manifest has no lines".into())));
    }
    let images: Vec<&_> = records.iter().map(|r| &r.image).collect();
    let ckpt = a.model.join(CHECKPOINT_FILE);
    let lattices = match side.precision {
        Precision::F32 => infer_lattices(&load::<f32>(&ckpt, &side.config)?, &images, a.batch_size)?,
        Precision::F64 => infer_lattices(&load::<f64>(&ckpt, &side.config)?, &images, a.batch_size)?,
    };
    let mut hyps = Vec::with_capacity(lattices.len());
    let mut corrections = Vec::new();
    for lat in &lattices {
        let ids = decode_lattice(lat, a.beam_width)?;
        let text = detokenize(&ids, &side.charset);
        let text = match &lexicon {
            Some(lex) => {
                let conf = word_confidences(lat, &ids, &side.charset)?;
                let fixed = lexicon_correct(&text, lex, (!conf.is_empty()).then_some(conf.as_slice()));
                if fixed != text {
                    corrections.push((text.clone(), fixed.clone()));
                }
                fixed
            }
            None => text,
        };
        hyps.push(text);
    }
    let refs: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let report = EvalReport {
        corrections,
        ..metrics(&refs, &hyps)?
    };
    if let Some(p) = &a.report {
        let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Training(e.to_string()))?;
        fs::write(p, text).map_err(|e| Error::io(p, e))?;
    }
    write!(out, "{}", report.to_text()).map_err(|e| Error::io("stdout", e))?;
    Ok(())
}

fn decode(a: &DecodeArgs, out: &mut dyn Write) -> CliResult<()> {
    if let Some(p) = &a.lattice {
        require(p, "lattice")?;
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let file: LatticeFile =
            serde_json::from_str(&text).map_err(|e| Error::Parse { path: p.clone(), msg: e.to_string() })?;
        let charset = Charset::from_chars(file.charset.chars())?;
        if charset.chars().iter().collect::<String>() != file.charset {
            return Err(Failure::Runtime(Error::Config(
                "lattice charset must list distinct characters in sorted order".into(),
            )));
        }
        let frames = file.log_probs.len();
        let classes = file.log_probs.first().map_or(0, Vec::len);
        if file.log_probs.iter().any(|r| r.len() != classes) || classes != charset.num_classes() {
            return Err(Failure::Runtime(Error::Shape(format!(
                "lattice rows must all have {} entries (charset plus blank)",
                charset.num_classes()
            ))));
        }
        let lat = Lattice::new(file.log_probs.concat(), frames, classes)?;
        return say(out, detokenize(&decode_lattice(&lat, a.beam_width)?, &charset));
    }
    let Some(dir) = &a.model else {
        return Err(Failure::Usage("decode needs --model with images, or --lattice".into()));
    };
    if a.images.is_empty() {
        return Err(Failure::Usage("decode needs at least one image or --lattice".into()));
    }
    require(&dir.join(SIDECAR_FILE), "model")?;
    let side = load_sidecar(dir)?;
    let images = load_images(&a.images, side.config.height, side.config.width)?;
    let refs: Vec<&_> = images.iter().collect();
    let ckpt = dir.join(CHECKPOINT_FILE);
    let lattices = match side.precision {
        Precision::F32 => infer_lattices(&load::<f32>(&ckpt, &side.config)?, &refs, crate::train::BATCH_SIZE)?,
        Precision::F64 => infer_lattices(&load::<f64>(&ckpt, &side.config)?, &refs, crate::train::BATCH_SIZE)?,
    };
    for lat in &lattices {
        say(out, detokenize(&decode_lattice(lat, a.beam_width)?, &side.charset))?;
    }
    Ok(())
}

fn export(a: &ExportAttentionArgs, out: &mut dyn Write) -> CliResult<()> {
    let side = load_sidecar(&a.model)?;
    if a.head >= side.config.heads {
        return Err(Failure::Usage(format!("--head {} but the model has {} heads", a.head, side.config.heads)));
    }
    let images = load_images(std::slice::from_ref(&a.image), side.config.height, side.config.width)?;
    let ckpt = a.model.join(CHECKPOINT_FILE);
    let model = load_any::<f64>(&ckpt, &side)?;
    let inf = model.infer(&crate::model::batch_images(&[&images[0]])?)?;
    let weights = match a.kind {
        AttentionKind::Mha => inf.mha_weights,
        AttentionKind::Proxima => inf.proxima_weights,
    };
    let s = weights.shape().to_vec();
    let (t, u) = (s[1], s[2]);
    let start = a.head * t * u;
    let map = &weights.data()[start..start + t * u];
    let (csv, pgm) = export_attention(map, t, u, &a.out)?;
    say(out, format!("{}\n{}", csv.display(), pgm.display()))
}

fn run_oracle(a: &OracleArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut failed = Vec::new();
    let ctc = oracle::ctc_suite(a.cases, a.seed, 1e-9)?;
    say(out, format!("ctc: {} cases, {} failures, max error {:.3e}", ctc.cases, ctc.failures, ctc.max_error))?;
    if !ctc.passed() {
        failed.push("ctc".to_string());
    }
    let dec = oracle::decoder_suite(100, a.seed)?;
    say(out, format!("decoder: {} cases, {} failures", dec.cases, dec.failures))?;
    if !dec.passed() {
        failed.push("decoder".to_string());
    }
    if !a.no_gradients {
        for c in gradient_suite(a.seed)? {
            let verdict = if c.passed() { "ok" } else { "FAIL" };
            say(out, format!("gradient {}: {:.3e} (< {:.0e}) {verdict}", c.name, c.error, c.tolerance))?;
            if !c.passed() {
                failed.push(c.name.to_string());
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Contract(format!("oracle checks failed: {}", failed.join(", ")))))
    }
}

fn experiment_config(a: &ExperimentArgs) -> ToyExperiment {
    let classes = TOY_ALPHABET.chars().count() + 1;
    ToyExperiment {
        lines: a.lines,
        val_lines: a.val_lines,
        test_lines: a.test_lines,
        teacher_epochs: a.teacher_epochs,
        student_epochs: a.student_epochs,
        student_seeds: a.student_seeds.clone(),
        seed: a.train_flags.seed,
        teacher: ModelConfig::toy_teacher(classes),
        student: ModelConfig::toy_student(classes),
        train: a.train_flags.resolve(false),
        out_dir: Some(a.out.clone()),
    }
}

fn experiment(a: &ExperimentArgs, exp: ToyExperiment, out: &mut dyn Write) -> CliResult<()> {
    let report = match a.train_flags.precision {
        Precision::F32 => run_toy_experiment::<f32>(&exp)?,
        Precision::F64 => run_toy_experiment::<f64>(&exp)?,
    };
    say(out, format!("teacher_val_cer: {:.6}", report.teacher_val_cer))?;
    say(out, format!("teacher_test_cer: {:.6}", report.teacher_test_cer))?;
    for s in &report.students {
        say(
            out,
            format!("seed {}: kd_test_cer {:.6} baseline_test_cer {:.6}", s.seed, s.kd_test_cer, s.baseline_test_cer),
        )?;
    }
    say(out, format!("median_kd_test_cer: {:.6}", report.median_kd_test_cer))?;
    say(out, format!("median_baseline_test_cer: {:.6}", report.median_baseline_test_cer))?;
    say(out, format!("seconds: {:.1}", report.seconds))
}
