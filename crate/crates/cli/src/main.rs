//! `salfuse` command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use salfuse::config::{Conditioning, Modality, RunConfig};
use salfuse::data::checkpoint::Checkpoint;
use salfuse::data::synth::{SynthMode, SynthSpec};
use salfuse::data::{Dataset, Manifest, Split};
use salfuse::model::Model;
use salfuse::train::{evaluate, saliency, RunOutputs, Trainer};
use salfuse::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "salfuse", version, about = "Skeleton + video action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset, writing a checkpoint and a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Report which frames and joints survive fusion downsampling.
    Saliency(SaliencyArgs),
    /// Print the effective run configuration and derived sizes.
    InspectConfig(ConfigArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Fused,
    SkeletonOnly,
    VideoOnly,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration used when `--config` is absent.
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    modality: Option<ModalityArg>,
    /// Disable contrastive text supervision of the skeleton encoder.
    #[arg(long)]
    no_text_sup: bool,
    /// Also contrast the video feature with the global text bank.
    #[arg(long)]
    text_sup_video: bool,
    /// Freeze the prompt context vectors.
    #[arg(long)]
    fixed_prompts: bool,
    /// Drop the skeleton-conditioned prompt shift.
    #[arg(long)]
    no_conditioning: bool,
    /// Skip token downsampling before fusion.
    #[arg(long)]
    no_downsample: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> salfuse::Result<RunConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Preset::Toy) => RunConfig::toy(),
            (None, Preset::Paper) => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        let m = &mut cfg.model;
        if let Some(modality) = self.modality {
            m.modality = match modality {
                ModalityArg::Fused => Modality::Fused,
                ModalityArg::SkeletonOnly => Modality::SkeletonOnly,
                ModalityArg::VideoOnly => Modality::VideoOnly,
            };
        }
        if self.no_text_sup {
            m.text_sup_skeleton = false;
        }
        if self.text_sup_video {
            m.text_sup_video = true;
        }
        if self.fixed_prompts {
            m.learnable_prompts = false;
        }
        if self.no_conditioning {
            m.conditioning = Conditioning::Off;
        }
        if self.no_downsample {
            m.skeleton_iterations = 0;
            m.visual_iterations = 0;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory containing `manifest.toml`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written after every epoch.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metrics log; defaults to `<checkpoint>.metrics.log`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue the run stored at `--checkpoint`.
    #[arg(long)]
    resume: bool,
    /// Initialize the encoders from another checkpoint at the pretrained rate.
    #[arg(long)]
    warm_start: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Require the checkpoint to match this configuration.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample id from the manifest.
    #[arg(long)]
    sample: String,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generator spec file (TOML); flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<SynthMode>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    joints: Option<usize>,
    #[arg(long)]
    native_frames: Option<usize>,
    /// Square frame side in pixels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// Native frame range `start,end` outside which samples stay at rest.
    #[arg(long, value_parser = parse_window)]
    motion_window: Option<[usize; 2]>,
}

fn parse_mode(s: &str) -> Result<SynthMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_window(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s.split_once(',').ok_or("expected `start,end`")?;
    let n = |x: &str| x.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok([n(a)?, n(b)?])
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config | ErrorKind::Shape => 2,
        ErrorKind::Data | ErrorKind::Io => 3,
        ErrorKind::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::Saliency(a) => run_saliency(a),
        Command::InspectConfig(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(a: TrainArgs) -> salfuse::Result<()> {
    let cfg = a.config.resolve()?;
    let mut trainer = Trainer::new(cfg, &a.data)?;
    if a.resume {
        trainer.resume(&Checkpoint::load(&a.checkpoint)?)?;
    }
    if let Some(p) = &a.warm_start {
        let n = trainer.warm_start(&Checkpoint::load(p)?)?;
        eprintln!("warm start: {n} encoder tensors restored");
    }
    let out = RunOutputs {
        metrics: Some(a.metrics.unwrap_or_else(|| with_suffix(&a.checkpoint, ".metrics.log"))),
        timing: Some(with_suffix(&a.checkpoint, ".timing.log")),
        checkpoint: Some(a.checkpoint),
    };
    let records = trainer.fit(&out)?;
    for r in &records {
        println!("{}", r.to_line());
    }
    Ok(())
}

/// Rebuilds the stored model for a dataset.
fn load_model(ck: &Checkpoint, manifest: &Manifest) -> salfuse::Result<(Model, salfuse::ParamStore)> {
    if ck.labels != manifest.labels() {
        return Err(Error::Dataset("dataset class labels differ from the checkpoint".into()));
    }
    let (model, mut store) = Model::for_manifest(&ck.config.model, manifest, ck.seed)?;
    ck.restore(&mut store)?;
    Ok((model, store))
}

fn eval(a: EvalArgs) -> salfuse::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if let Some(p) = &a.config {
        ck.check_config(&RunConfig::load(p)?.model)?;
    }
    let data = Dataset::load(&a.data, a.split.into(), ck.config.model.frames)?;
    let (model, store) = load_model(&ck, &data.manifest)?;
    let report = evaluate(&model, &store, &data, ck.config.batch_size)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn run_saliency(a: SaliencyArgs) -> salfuse::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let manifest = Manifest::load(&a.data)?;
    let split = manifest.sample(&a.sample)?.split;
    let data = Dataset::load(&a.data, split, ck.config.model.frames)?;
    let (model, store) = load_model(&ck, &data.manifest)?;
    let report = saliency(&model, &store, &data, &a.sample)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn synth(a: SynthArgs) -> salfuse::Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("synth spec: {e}")))?
        }
        None => SynthSpec::default(),
    };
    if let Some(v) = a.mode {
        spec.mode = v;
    }
    if let Some(v) = a.classes {
        spec.classes = v;
    }
    if let Some(v) = a.per_class {
        spec.per_class = v;
    }
    if let Some(v) = a.joints {
        spec.joints = v;
    }
    if let Some(v) = a.native_frames {
        spec.native_frames = v;
    }
    if let Some(v) = a.size {
        spec.height = v;
        spec.width = v;
    }
    if let Some(v) = a.noise {
        spec.noise = v;
    }
    if a.motion_window.is_some() {
        spec.motion_window = a.motion_window;
    }
    let m = spec.generate(&a.data, a.seed)?;
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        m.samples.len(),
        m.split(Split::Train).count(),
        m.split(Split::Test).count(),
        a.data.display()
    );
    Ok(())
}

fn inspect(a: ConfigArgs) -> salfuse::Result<()> {
    let cfg = a.resolve()?;
    let m = &cfg.model;
    print!("{}", cfg.to_toml());
    println!();
    println!("# derived");
    println!("# skeleton_tokens = {}", m.skeleton_tokens());
    println!("# skeleton_width = {}", m.skeleton_width());
    println!("# skeleton_tokens_after_downsampling = {}", m.skeleton_tokens() >> m.skeleton_iterations);
    println!("# visual_tokens_after_downsampling = {}", m.frames >> m.visual_iterations);
    println!("# patches_per_frame = {}", m.patches_per_frame());
    Ok(())
}
