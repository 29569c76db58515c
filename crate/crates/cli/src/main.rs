use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use guef_core::harness::formats::read_checkpoint;
use guef_core::harness::gradcheck::{self, GradcheckConfig};
use guef_core::harness::manifest::{read_proposals, write_proposals};
use guef_core::harness::pipeline::{evaluate, infer, video_accuracy, InferSettings};
use guef_core::harness::train::{train, TrainSinks, FINAL_CHECKPOINT};
use guef_core::harness::{synth, Manifest, RunConfig};

#[derive(Parser)]
#[command(name = "guef", version, about = "Weakly supervised temporal action localization with evidential fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => Ok(RunConfig::load(path, self.seed)?),
            None => {
                let seed = self.seed.context("either --config with a seed or --seed is required")?;
                let cfg = RunConfig::with_seed(seed);
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (features, train.jsonl, test.jsonl)
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes train.log and checkpoints into --out
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a checkpoint over a manifest and write proposals
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score proposals against a manifest's ground truth
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the report as JSON
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Fuse evidence vectors read as JSON lines
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to stdout
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of every loss term
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => {
            let cfg = common.load()?;
            let (train, test) = synth::synthesize(&cfg, &out)?;
            println!(
                "wrote {} training and {} test videos to {}",
                train.videos.len(),
                test.videos.len(),
                out.display()
            );
        }
        Command::Train { common, manifest, out } => {
            let cfg = common.load()?;
            let videos = Manifest::load(&manifest)?.load_videos()?;
            std::fs::create_dir_all(&out)?;
            let mut log = BufWriter::new(File::create(out.join("train.log"))?);
            let outcome = train(
                &cfg,
                &videos,
                TrainSinks {
                    log: &mut log,
                    checkpoint_dir: Some(&out),
                },
            )?;
            log.flush()?;
            if let Some(last) = outcome.history.last() {
                println!("{}", last.line());
            }
            if cfg.check_masses {
                println!("verified {} fused masses", outcome.masses_checked);
            }
            println!("checkpoint: {}", out.join(FINAL_CHECKPOINT).display());
        }
        Command::Infer {
            common,
            checkpoint,
            manifest,
            out,
        } => {
            let cfg = common.load()?;
            let params = read_checkpoint(&checkpoint)?;
            if params.dims().num_classes != cfg.num_classes {
                bail!(
                    "checkpoint has {} classes but the config declares {}",
                    params.dims().num_classes,
                    cfg.num_classes
                );
            }
            let m = Manifest::load(&manifest)?;
            let videos = m.load_videos()?;
            let proposal_cfg = cfg.proposal_config();
            let settings = InferSettings {
                ablation: cfg.ablation(),
                topk_ratio: cfg.topk_ratio,
                proposals: &proposal_cfg,
                nms_iou: cfg.nms_iou,
            };
            let (preds, props) = infer(&params, &videos, &settings)?;
            let mut w = output(Some(&out))?;
            write_proposals(&mut w, &props, &m)?;
            w.flush()?;
            println!(
                "{} proposals; video accuracy {:.4}",
                props.len(),
                video_accuracy(&preds, &videos, cfg.class_gate)
            );
        }
        Command::Eval {
            common,
            proposals,
            manifest,
            json,
        } => {
            let cfg = common.load()?;
            let m = Manifest::load(&manifest)?;
            let file = File::open(&proposals).with_context(|| format!("opening {}", proposals.display()))?;
            let props = read_proposals(BufReader::new(file), &proposals)?;
            let report = evaluate(&props, &m, cfg.num_classes);
            print!("{}", report.to_table());
            if let Some(path) = json {
                std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Fuse { common, input, output: out } => {
            common.load()?;
            let file = File::open(&input).with_context(|| format!("opening {}", input.display()))?;
            let mut w = output(out.as_deref())?;
            guef_core::harness::fuse::fuse_stream(BufReader::new(file), &mut w, &input)?;
            w.flush()?;
        }
        Command::Gradcheck { common, seeds } => {
            let cfg = common.load()?;
            let gc = GradcheckConfig {
                seeds: (cfg.seed..cfg.seed + seeds).collect(),
                ..GradcheckConfig::default()
            };
            let report = gradcheck::run(&gc)?;
            print!("{}", report.to_table());
            if !report.passed() {
                bail!("gradient check exceeded tolerance {:e}", gc.tolerance);
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
