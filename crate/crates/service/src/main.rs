use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use promptpaint::dataset::{export_corpus, SceneSpec};
use promptpaint::evaluate::{evaluate, EvalConfig, Suite};
use promptpaint::imageio::{load_mask, load_rgb, save_rgb};
use promptpaint::metrics::{train_extractor, ExtractorConfig, FeatureExtractor};
use promptpaint::model::Model;
use promptpaint::sampler::{InpaintRequest, Mode, ObjectNegative, Pipeline, SamplerKind};
use promptpaint::trainer::{train, RunConfig};
use promptpaint_service::{serve, AppState, ServiceConfig, ENV_BIND, ENV_CHECKPOINT};

#[derive(Parser)]
#[command(name = "promptpaint", version, about = "Task-prompted diffusion inpainting on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser, caption encoder and task prompts.
    Train {
        /// JSON run config; defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Inpaint one image.
    Inpaint(InpaintArgs),
    /// Run behavioural suites against a checkpoint.
    Evaluate(EvaluateArgs),
    /// Train the evaluation classifier.
    TrainExtractor {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = ENV_BIND, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, env = ENV_CHECKPOINT)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2)]
        max_concurrent: usize,
        #[arg(long, default_value_t = 1 << 20)]
        max_body_bytes: usize,
    },
    /// Export training examples as PNG files plus a JSON-lines manifest.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run config supplying scene, routing and model settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct InpaintArgs {
    #[arg(long, env = ENV_CHECKPOINT)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    caption: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    negative: Option<NegativeArg>,
    #[arg(long, value_enum, default_value = "ddim")]
    sampler: SamplerArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, env = ENV_CHECKPOINT)]
    checkpoint: PathBuf,
    /// Directory holding extractor.bin and extractor.json.
    #[arg(long)]
    extractor: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    suite: SuiteArg,
    /// Trials (or scenes, for the context suite) per selected suite.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Context,
    Removal,
    Object,
    Shape,
}

#[derive(Clone, Copy, ValueEnum)]
enum NegativeArg {
    Empty,
    PCtxt,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Ddim,
    Ancestral,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Object,
    Context,
    Removal,
    Shape,
    All,
}

fn read_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(RunConfig::from_json(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn run_inpaint(a: InpaintArgs) -> Result<()> {
    let pipeline = Pipeline::load(&a.checkpoint)?;
    let mut req = InpaintRequest::new(
        load_rgb(&a.image)?,
        load_mask(&a.mask)?,
        match a.mode {
            ModeArg::Context => Mode::Context,
            ModeArg::Removal => Mode::Removal,
            ModeArg::Object => Mode::Object,
            ModeArg::Shape => Mode::Shape,
        },
    );
    req.caption = a.caption;
    req.alpha = a.alpha;
    req.w = a.w;
    req.steps = a.steps;
    req.seed = a.seed;
    req.negative = a.negative.map(|n| match n {
        NegativeArg::Empty => ObjectNegative::Empty,
        NegativeArg::PCtxt => ObjectNegative::PCtxt,
    });
    req.sampler = Some(match a.sampler {
        SamplerArg::Ddim => SamplerKind::Ddim,
        SamplerArg::Ancestral => SamplerKind::Ancestral,
    });
    let result = pipeline.inpaint(&req)?;
    save_rgb(&a.out, &result.image)?;
    println!("{}", serde_json::to_string_pretty(&result.metadata)?);
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let pipeline = Pipeline::load(&a.checkpoint)?;
    let ex = FeatureExtractor::load(&a.extractor)?;
    let mut cfg = EvalConfig::default();
    if let Some(n) = a.n {
        cfg.object_trials = n;
        cfg.removal_trials = n;
        cfg.shape_trials = n;
        cfg.fid_scenes = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    let suites: Vec<Suite> = match a.suite {
        SuiteArg::Object => vec![Suite::Object],
        SuiteArg::Context => vec![Suite::Context],
        SuiteArg::Removal => vec![Suite::Removal],
        SuiteArg::Shape => vec![Suite::Shape],
        SuiteArg::All => Suite::ALL.to_vec(),
    };
    let report = evaluate(&pipeline, &ex, &cfg, &suites)?;
    if let Some(dir) = a.report.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.report, serde_json::to_vec_pretty(&report)?)?;
    println!("{}", serde_json::to_string_pretty(&report.verdicts)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, out, resume } => {
            let cfg = read_run_config(config.as_deref())?;
            let manifest = train(&cfg, &out, resume)?;
            info!("finished at step {} ({})", manifest.step, manifest.checkpoint_id);
        }
        Command::Inpaint(a) => run_inpaint(a)?,
        Command::Evaluate(a) => run_evaluate(a)?,
        Command::TrainExtractor { out, steps, seed } => {
            let mut cfg = ExtractorConfig::default();
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ex = train_extractor(&cfg, &SceneSpec::default())?;
            ex.save(&out)?;
            let record = ex.record.as_ref().expect("set by training");
            info!("held-out accuracy {:.4} on {} crops", record.accuracy, record.evaluated);
            if ex.require_gate().is_err() {
                bail!("extractor accuracy {:.4} is below the gate", record.accuracy);
            }
        }
        Command::Serve {
            bind,
            checkpoint,
            max_concurrent,
            max_body_bytes,
        } => {
            let config = ServiceConfig {
                bind,
                checkpoint,
                max_concurrent,
                max_body_bytes,
                ..ServiceConfig::default()
            };
            let state = AppState::load(config)?;
            tokio::runtime::Runtime::new()?.block_on(serve(state))?;
        }
        Command::MakeDataset { out, count, seed, config } => {
            let cfg = read_run_config(config.as_deref())?;
            let (model, _) = Model::init::<f32>(&cfg.model, cfg.train.seed)?;
            let entries = export_corpus(&out, count, seed, &cfg.scene, &cfg.routing, &model.vocab)?;
            info!("wrote {} examples to {}", entries.len(), out.display());
        }
    }
    Ok(())
}
