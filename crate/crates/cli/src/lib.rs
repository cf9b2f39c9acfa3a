//! The `sgldm` command line: argument parsing into a resolved [`Command`]
//! and dispatch to the library.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sgldm::conditioning::{Region, SketchBitmap};
use sgldm::dataset::{build_dataset, load_split, write_toy_corpus, DatasetConfig, SplitName};
use sgldm::diffusion::Sampler;
use sgldm::evaluation::{eval_sweep, EmbedderConfig, EvalConfig};
use sgldm::pipeline::{SynthesisOptions, Synthesizer};
use sgldm::training::{
    load_checkpoint, stage1_sketches, train_image_ae, train_stage1, train_stage2, SketchSource, Stage, TrainConfig,
    TrainOptions, TrainOutcome,
};
use sgldm::Error;
use sgldm_service::ServiceConfig;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const MISSING_ARTIFACT: i32 = 3;
    pub const INVALID_INPUT: i32 = 4;
    pub const DIVERGED: i32 = 5;
}

/// Default directory for checkpoints when no path is given.
pub const CKPT_DIR_VAR: &str = "SGLDM_CKPT_DIR";

#[derive(Debug, Parser)]
#[command(name = "sgldm", version, about = "Sketch-guided latent diffusion for faces")]
pub struct Cli {
    /// More log output; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Extract multi-level sketches and SRA variants from a face image folder.
    Dataset(DatasetArgs),
    /// Train the image codec.
    TrainAe(TrainArgs),
    /// Train the region sketch autoencoders.
    TrainStage1(TrainArgs),
    /// Train the condition decoder and denoiser with frozen encoders.
    TrainStage2(Stage2Args),
    /// Synthesize a face from a sketch PNG.
    Sample(SampleArgs),
    /// Score a checkpoint on a dataset split at every abstraction level.
    Eval(EvalArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Folder of source face images.
    #[arg(long, required_unless_present = "toy")]
    pub images: Option<PathBuf>,
    /// Folder of foreground mattes with matching file stems.
    #[arg(long)]
    pub mattes: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Generate this many procedural faces first and build from them.
    #[arg(long, conflicts_with = "images")]
    pub toy: Option<usize>,
    /// Dataset config JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub canvas: Option<usize>,
    #[arg(long)]
    pub sra_variants: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    Paper,
    Toy,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root written by `dataset`.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Checkpoint to write; defaults to a file in the checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training config JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in settings used when no config file is given.
    #[arg(long, value_enum, default_value = "paper")]
    pub profile: Profile,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Append per-epoch metrics to this JSON-lines file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Stage2Args {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Stage 1 checkpoint.
    #[arg(long)]
    pub stage1: Option<PathBuf>,
    /// Image codec checkpoint.
    #[arg(long)]
    pub codec: Option<PathBuf>,
    /// Which sketches condition training.
    #[arg(long, value_enum)]
    pub sketches: Option<SketchArg>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SketchArg {
    Sra,
    All,
    Low,
    Mid,
    High,
}

impl From<SketchArg> for SketchSource {
    fn from(s: SketchArg) -> Self {
        match s {
            SketchArg::Sra => SketchSource::Sra,
            SketchArg::All => SketchSource::All,
            SketchArg::Low => SketchSource::Low,
            SketchArg::Mid => SketchSource::Mid,
            SketchArg::High => SketchSource::High,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegionArg {
    Leye,
    Reye,
    Nose,
    Mouth,
    Face,
}

impl From<RegionArg> for Region {
    fn from(r: RegionArg) -> Self {
        match r {
            RegionArg::Leye => Region::Leye,
            RegionArg::Reye => Region::Reye,
            RegionArg::Nose => Region::Nose,
            RegionArg::Mouth => Region::Mouth,
            RegionArg::Face => Region::Face,
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Sketch PNG, dark strokes on white, at the model's canvas size.
    #[arg(long)]
    pub sketch: PathBuf,
    /// Stage 2 checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "sample.png")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "ddim")]
    pub sampler: SamplerArg,
    /// DDIM stochasticity.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Regions to drop from the condition, comma separated.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub mask: Vec<RegionArg>,
    /// Resize the output to this many pixels per side.
    #[arg(long)]
    pub size: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Stage 2 checkpoint.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Report JSON to write.
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Evaluation config JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// REC stroke tolerance in pixels.
    #[arg(long)]
    pub tolerance: Option<usize>,
    /// External embedder weights for FID.
    #[arg(long)]
    pub embedder_weights: Option<PathBuf>,
    /// Perceptual-distance weights; LPIPS is null without them.
    #[arg(long)]
    pub lpips_weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Stage 2 checkpoint. Without one the service refuses jobs.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Service config JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<std::net::IpAddr>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub queue_len: Option<usize>,
    /// CORS origin to allow; repeatable. Any origin when absent.
    #[arg(long = "allow-origin")]
    pub allow_origins: Vec<String>,
}

/// A parsed and resolved invocation: config files loaded and validated,
/// flags applied, seeds fixed.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Dataset {
        images: Option<PathBuf>,
        mattes: Option<PathBuf>,
        out: PathBuf,
        toy: Option<usize>,
        config: DatasetConfig,
        seed: u64,
    },
    Train {
        data: PathBuf,
        out: PathBuf,
        config: TrainConfig,
        resume: Option<PathBuf>,
        metrics: Option<PathBuf>,
        /// Stage 1 and codec checkpoints, for stage 2.
        inputs: Option<(PathBuf, PathBuf)>,
    },
    Sample {
        ckpt: PathBuf,
        sketch: PathBuf,
        out: PathBuf,
        options: SynthesisOptions,
        size: Option<u32>,
    },
    Eval {
        ckpt: PathBuf,
        data: PathBuf,
        split: SplitName,
        out: PathBuf,
        config: EvalConfig,
    },
    Serve {
        config: ServiceConfig,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::MissingArtifact(_) => exit::MISSING_ARTIFACT,
            Error::Diverged(_) => exit::DIVERGED,
            Error::InvalidRange(_)
            | Error::ShapeMismatch { .. }
            | Error::TimestepOutOfRange { .. }
            | Error::InvalidStepOrder { .. }
            | Error::InvalidLayout(_)
            | Error::InvalidConfig(_)
            | Error::InvalidInput(_)
            | Error::EmptyDataset(_)
            | Error::Checkpoint(_)
            | Error::Image(_)
            | Error::Json(_) => exit::INVALID_INPUT,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => exit::MISSING_ARTIFACT,
            _ => exit::FAILURE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn ckpt_dir() -> PathBuf {
    std::env::var_os(CKPT_DIR_VAR).map_or_else(|| PathBuf::from("checkpoints"), PathBuf::from)
}

fn or_default(path: Option<PathBuf>, file: &str) -> PathBuf {
    path.unwrap_or_else(|| ckpt_dir().join(file))
}

fn pick_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>() >> 11;
        log::warn!("no --seed given, using seed {s}");
        s
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()).into());
    }
    let bytes = std::fs::read(path).map_err(Error::from)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())).into())
}

fn train_config(args: &TrainArgs, stage: Stage) -> Result<TrainConfig, CliError> {
    let mut config = match &args.config {
        Some(p) => {
            let c = TrainConfig::load(p)?;
            if c.stage != stage {
                return Err(Error::InvalidConfig(format!(
                    "{} is a {:?} config, this command trains {stage:?}",
                    p.display(),
                    c.stage
                ))
                .into());
            }
            c
        }
        None => match args.profile {
            Profile::Paper => TrainConfig::paper(stage),
            Profile::Toy => TrainConfig::toy(stage),
        },
    };
    config.seed = match (args.seed, &args.config) {
        (Some(s), _) => s,
        (None, Some(_)) => config.seed,
        (None, None) => pick_seed(None),
    };
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if args.max_steps.is_some() {
        config.max_steps = args.max_steps;
    }
    if let Some(b) = args.batch_size {
        config.batch_size = b;
    }
    if let Some(lr) = args.lr {
        config.optimizer.learning_rate = lr;
    }
    config.validate()?;
    Ok(config)
}

fn train_command(args: TrainArgs, stage: Stage, inputs: Option<(PathBuf, PathBuf)>, file: &str) -> Result<Command, CliError> {
    let config = train_config(&args, stage)?;
    Ok(Command::Train {
        data: args.data,
        out: or_default(args.out, file),
        config,
        resume: args.resume,
        metrics: args.metrics,
        inputs,
    })
}

/// Resolves parsed flags into a [`Command`].
pub fn resolve(cli: Cli) -> Result<Command, CliError> {
    Ok(match cli.command {
        Cmd::Dataset(a) => {
            let mut config = match &a.config {
                Some(p) => read_json(p)?,
                None if a.toy.is_some() => DatasetConfig::toy(),
                None => DatasetConfig::default(),
            };
            if let Some(c) = a.canvas {
                config.canvas = c;
            }
            if let Some(k) = a.sra_variants {
                config.sra_variants = k;
            }
            config.validate()?;
            Command::Dataset {
                images: a.images,
                mattes: a.mattes,
                out: a.out,
                toy: a.toy,
                config,
                seed: pick_seed(a.seed),
            }
        }
        Cmd::TrainAe(a) => train_command(a, Stage::ImageAe, None, "image_ae.ckpt")?,
        Cmd::TrainStage1(a) => train_command(a, Stage::One, None, "stage1.ckpt")?,
        Cmd::TrainStage2(a) => {
            let inputs = (or_default(a.stage1, "stage1.ckpt"), or_default(a.codec, "image_ae.ckpt"));
            let mut cmd = train_command(a.train, Stage::Two, Some(inputs), "stage2.ckpt")?;
            if let (Some(s), Command::Train { config, .. }) = (a.sketches, &mut cmd) {
                config.sketches = s.into();
            }
            cmd
        }
        Cmd::Sample(a) => {
            let sampler = match (a.sampler, a.eta) {
                (SamplerArg::Ddpm, Some(_)) => {
                    return Err(Error::InvalidConfig("--eta applies to the ddim sampler only".into()).into())
                }
                (SamplerArg::Ddpm, None) => Sampler::Ddpm,
                (SamplerArg::Ddim, eta) => {
                    let eta = eta.unwrap_or(0.0);
                    if !(0.0..=1.0).contains(&eta) {
                        return Err(Error::InvalidConfig(format!("--eta {eta} outside [0, 1]")).into());
                    }
                    Sampler::Ddim { eta }
                }
            };
            if a.size == Some(0) {
                return Err(Error::InvalidConfig("--size must be positive".into()).into());
            }
            Command::Sample {
                ckpt: or_default(a.ckpt, "stage2.ckpt"),
                sketch: a.sketch,
                out: a.out,
                options: SynthesisOptions {
                    steps: a.steps,
                    sampler,
                    seed: pick_seed(a.seed),
                    masked_regions: a.mask.into_iter().map(Region::from).collect(),
                },
                size: a.size,
            }
        }
        Cmd::Eval(a) => {
            let mut config: EvalConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => EvalConfig {
                    seed: pick_seed(a.seed),
                    ..EvalConfig::default()
                },
            };
            if let Some(s) = a.seed {
                config.seed = s;
            }
            if let Some(s) = a.steps {
                config.steps = s;
            }
            if let Some(t) = a.tolerance {
                config.rec_tolerance = t;
            }
            if let Some(w) = a.embedder_weights {
                config.embedder = EmbedderConfig::External { weights: w };
            }
            if a.lpips_weights.is_some() {
                config.lpips_weights = a.lpips_weights;
            }
            Command::Eval {
                ckpt: or_default(a.ckpt, "stage2.ckpt"),
                data: a.data,
                split: match a.split {
                    SplitArg::Train => SplitName::Train,
                    SplitArg::Val => SplitName::Val,
                    SplitArg::Test => SplitName::Test,
                },
                out: a.out,
                config,
            }
        }
        Cmd::Serve(a) => {
            let mut config: ServiceConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => ServiceConfig::default(),
            };
            if let Some(h) = a.host {
                config.bind.set_ip(h);
            }
            if let Some(p) = a.port {
                config.bind.set_port(p);
            }
            if let Some(m) = a.max_steps {
                config.max_steps = m;
            }
            if let Some(q) = a.queue_len {
                config.queue_len = q;
            }
            if !a.allow_origins.is_empty() {
                config.allowed_origins = a.allow_origins;
            }
            if a.ckpt.is_some() {
                config.checkpoint = a.ckpt;
            } else if config.checkpoint.is_none() {
                let fallback = ckpt_dir().join("stage2.ckpt");
                if fallback.exists() {
                    config.checkpoint = Some(fallback);
                }
            }
            Command::Serve { config }
        }
    })
}

/// Parses `argv` (program name first). Help and version requests come back
/// as an error with exit code 0 and the text to print.
pub fn parse_args<I, T>(argv: I) -> Result<Command, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError {
        code: e.exit_code(),
        message: e.render().to_string(),
    })?;
    resolve(cli)
}

fn report_training(what: &str, out: &Path, outcome: &TrainOutcome) {
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "{what}: {} steps this run, final loss {last:.6}, checkpoint {}",
        outcome.losses.len(),
        out.display()
    );
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    Ok(())
}

fn run_inner(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Dataset {
            images,
            mattes,
            out,
            toy,
            config,
            seed,
        } => {
            let (images, mattes) = match toy {
                Some(n) => {
                    let src = out.join("toy_source");
                    write_toy_corpus(&src, n, config.canvas * 2, seed)?;
                    (src.join("images"), Some(src.join("mattes")))
                }
                None => (images.expect("clap requires --images without --toy"), mattes),
            };
            let manifest = build_dataset(&images, mattes.as_deref(), &out, &config, seed)?;
            println!(
                "{} samples ({} train / {} val / {} test) in {}",
                manifest.records.len(),
                manifest.split.train.len(),
                manifest.split.val.len(),
                manifest.split.test.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            out,
            config,
            resume,
            metrics,
            inputs,
        } => {
            ensure_parent(&out)?;
            let resume = resume.as_deref().map(load_checkpoint).transpose()?;
            let opts = TrainOptions {
                checkpoint_path: Some(&out),
                metrics_log: metrics.as_deref(),
                resume: resume.as_ref(),
            };
            let (manifest, samples) = load_split(&data, SplitName::Train)?;
            let outcome = match config.stage {
                Stage::ImageAe => {
                    let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
                    train_image_ae(&images, &config, &opts)?
                }
                Stage::One => {
                    let sketches = stage1_sketches(&samples, config.sketches);
                    train_stage1(&sketches, &manifest.layout, &config, &opts)?
                }
                Stage::Two => {
                    let (s1, codec) = inputs.expect("stage 2 inputs resolved");
                    let s1 = load_checkpoint(&s1)?;
                    let codec = load_checkpoint(&codec)?;
                    train_stage2(&samples, &s1, &codec, &config, &opts)?
                }
            };
            report_training(&format!("{:?}", config.stage), &out, &outcome);
        }
        Command::Sample {
            ckpt,
            sketch,
            out,
            options,
            size,
        } => {
            let synth = Synthesizer::load(&ckpt)?;
            if !sketch.exists() {
                return Err(Error::MissingArtifact(sketch).into());
            }
            let bitmap = SketchBitmap::from_luma8(&image::open(&sketch).map_err(Error::from)?.to_luma8())?;
            let img = synth.synthesize(&bitmap, &options)?.to_rgb8();
            let img = match size {
                Some(s) if s != img.width() => image::imageops::resize(&img, s, s, image::imageops::FilterType::Lanczos3),
                _ => img,
            };
            ensure_parent(&out)?;
            img.save(&out).map_err(Error::from)?;
            println!("wrote {} (seed {})", out.display(), options.seed);
        }
        Command::Eval {
            ckpt,
            data,
            split,
            out,
            config,
        } => {
            let synth = Synthesizer::load(&ckpt)?;
            let (_, samples) = load_split(&data, split)?;
            let report = eval_sweep(&synth, &samples, &config)?;
            ensure_parent(&out)?;
            std::fs::write(&out, report.to_json()).map_err(Error::from)?;
            for l in &report.levels {
                let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{:<5} rec {} (permuted {}) fid {} lpips {}",
                    l.level.name(),
                    fmt(l.rec),
                    fmt(l.rec_permuted),
                    fmt(l.fid),
                    fmt(l.lpips)
                );
            }
            println!("wrote {}", out.display());
        }
        Command::Serve { config } => {
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(Error::from)?;
            rt.block_on(sgldm_service::serve(config))?;
        }
    }
    Ok(())
}

/// Runs a resolved command and returns the process exit code.
pub fn run(cmd: Command) -> i32 {
    match run_inner(cmd) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

/// Full entry point: logging, parsing, dispatch.
pub fn main_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let verbose = argv.iter().filter(|a| *a == "-v" || *a == "--verbose").count();
    let level = ["info", "debug", "trace"][verbose.min(2)];
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match parse_args(argv) {
        Ok(cmd) => run(cmd),
        Err(e) if e.code == exit::OK => {
            print!("{e}");
            exit::OK
        }
        Err(e) => {
            eprint!("{e}");
            if !e.message.ends_with('\n') {
                eprintln!();
            }
            e.code
        }
    }
}
