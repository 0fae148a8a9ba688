use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use spctrl::commands;
use spctrl::service::{serve, spawn_worker};
use spctrl_core::checkpoint::load_model;
use spctrl_core::config::Config;
use spctrl_core::data::make_synthetic_dataset;
use spctrl_core::experiment::{run_experiment_eval, run_experiment_training};
use spctrl_core::pose::{load_skeleton_spec, resolve_skeleton};

#[derive(Parser)]
#[command(name = "spctrl", version, about = "Sparse-pose guided text-to-image diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base U-Net and text encoder on the synthetic set.
    PretrainBase {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the adapter, keypoint embedding module and keypoint tokens.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train every arm of the heatmap-loss efficacy experiment.
    Experiment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate every arm of the efficacy experiment and write results.json.
    ExperimentEval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sample one image for a pose document.
    Generate {
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint directory; defaults to `serve.checkpoint` of the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        cond_scale: Option<f64>,
    },
    /// Run the HTTP generation service.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a prediction file against COCO keypoint annotations.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Locate keypoints in generated images by render color.
    Estimate {
        /// Directory of `<image_id>.png` files.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw a pose document as an OpenPose-style skeleton image.
    Render {
        #[arg(long)]
        pose: PathBuf,
        /// Skeleton name (`ap10k`, `coco_human`) or spec file.
        #[arg(long, default_value = "ap10k")]
        spec: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::PretrainBase { config } => {
            let cfg = Config::load(&config)?;
            let spec = resolve_skeleton(&cfg.model.skeleton)?;
            let data = make_synthetic_dataset(cfg.data.count, &spec, cfg.data.seed, cfg.model.image_size)?;
            let out = spctrl_core::train::run_pretraining(&cfg.model, &cfg.pretrain, &data)?;
            println!("{}", out.display());
        }
        Command::Train { config, resume } => {
            let cfg = Config::load(&config)?;
            let spec = resolve_skeleton(&cfg.model.skeleton)?;
            let data = make_synthetic_dataset(cfg.data.count, &spec, cfg.data.seed, cfg.model.image_size)?;
            let out = spctrl_core::train::run_training(&cfg.model, &cfg.train, &data, resume.as_deref())?;
            println!("{}", out.display());
        }
        Command::Experiment { config } => {
            let cfg = Config::load(&config)?;
            for ckpt in run_experiment_training(&cfg)? {
                println!("{}", ckpt.display());
            }
        }
        Command::ExperimentEval { config } => {
            let cfg = Config::load(&config)?;
            println!("{}", serde_json::to_string_pretty(&run_experiment_eval(&cfg)?)?);
        }
        Command::Generate {
            pose,
            prompt,
            seed,
            out,
            checkpoint,
            config,
            steps,
            cfg_scale,
            cond_scale,
        } => {
            let cfg = load_config(config.as_ref())?;
            let ckpt = commands::default_checkpoint(checkpoint.or(cfg.serve.checkpoint))?;
            let mut sampler = cfg.serve.sampler;
            sampler.steps = steps.unwrap_or(sampler.steps);
            sampler.cfg_scale = cfg_scale.unwrap_or(sampler.cfg_scale);
            sampler.cond_scale = cond_scale.unwrap_or(sampler.cond_scale);
            commands::generate(&ckpt, &pose, &prompt, seed, &sampler, &out)?;
        }
        Command::Serve {
            config,
            port,
            checkpoint,
        } => {
            let cfg = Config::load(&config)?;
            let ckpt = commands::default_checkpoint(checkpoint.or(cfg.serve.checkpoint))?;
            let (state, _worker) = spawn_worker(move || Ok(load_model(&ckpt)?), cfg.serve.sampler)?;
            log::info!("loaded checkpoint {}", state.info().checkpoint_hash);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, port.unwrap_or(cfg.serve.port)))?;
        }
        Command::Evaluate { pred, gt, spec, out } => {
            let report = commands::evaluate(&pred, &gt, &spec, &out)?;
            println!("mAP {:.2}", report.map);
        }
        Command::Estimate { images, gt, spec, out } => {
            let spec = load_skeleton_spec(&spec)?;
            let set = commands::estimate(&images, &gt, &spec, &out)?;
            println!("{} images", set.0.len());
        }
        Command::Render { pose, spec, out } => {
            commands::render(&pose, &resolve_skeleton(&spec)?, &out)?;
        }
    }
    Ok(())
}
