use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sketchinv::pipeline::{self, PipelineConfig};
use sketchinv::preprocess::Split;
use sketchinv::sketch::Style;

/// Face sketch generation and sketch-to-photo inversion.
#[derive(Parser, Debug)]
#[command(name = "sketchinv", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Pipeline configuration (TOML, or JSON with a .json extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Desk-scale profile: 32x32 images, 8 faces, 2000 iterations.
    #[arg(long, global = true)]
    toy: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StyleArg {
    Line,
    Grayscale,
    Color,
}

impl From<StyleArg> for Style {
    fn from(s: StyleArg) -> Style {
        match s {
            StyleArg::Line => Style::Line,
            StyleArg::Grayscale => Style::Grayscale,
            StyleArg::Color => Style::Color,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a procedural face corpus with landmarks and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Align and crop every photo of a manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output side length; defaults to the configured image size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Render sketches for every photo of an aligned manifest (rewritten in place).
    Generate {
        #[arg(long)]
        manifest: PathBuf,
        /// Styles to render; all three when omitted.
        #[arg(long, value_enum)]
        style: Vec<StyleArg>,
    },
    /// Train an inversion network on the train split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        style: Option<StyleArg>,
        #[arg(long)]
        iterations: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Turn sketches into photographs with a trained checkpoint.
    Invert {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Invert the manifest's sketches instead of explicit files.
        #[arg(long, conflicts_with = "sketches")]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        sketches: Vec<PathBuf>,
    },
    /// PSNR, SSIM and R of inverted images against their photos.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        inverted: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Rank-1 identification of sketches and, optionally, inverted sketches.
    Identify {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        style: Option<StyleArg>,
        /// Directory of inverted images named after their photos.
        #[arg(long, conflicts_with = "checkpoint")]
        inverted: Option<PathBuf>,
        /// Invert the queries with this checkpoint first.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Per-layer principal-component images of one sketch's feature maps.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage on a synthetic corpus.
    Run {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let base = if g.toy {
        PipelineConfig::toy()
    } else {
        PipelineConfig::default()
    };
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::load(path, &base)?,
        None => base,
    };
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn print_summary(v: &pipeline::IdentifySummary) {
    println!("{}", serde_json::to_string_pretty(v).expect("summary serializes"));
}

fn report_skips(summary: &pipeline::DatasetSummary) {
    println!("wrote {} files, skipped {}", summary.written, summary.skipped.len());
    for (path, why) in &summary.skipped {
        println!("  skipped {path}: {why}");
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Synth { out, count } => {
            if let Some(n) = count {
                cfg.synth.count = n;
            }
            let m = pipeline::synthesize(&out, &cfg.synth, cfg.train.seed)?;
            println!(
                "wrote {} faces and {}",
                m.records.len(),
                out.join("manifest.jsonl").display()
            );
        }
        Command::Preprocess { manifest, out, size } => {
            let (_, summary) = pipeline::preprocess(&manifest, &out, size.unwrap_or(cfg.train.image_size))?;
            report_skips(&summary);
        }
        Command::Generate { manifest, style } => {
            let styles: Vec<Style> = if style.is_empty() {
                Style::ALL.to_vec()
            } else {
                style.into_iter().map(Style::from).collect()
            };
            let (_, summary) = pipeline::generate(&manifest, &styles, &cfg.sketch)?;
            report_skips(&summary);
        }
        Command::Train {
            manifest,
            out,
            style,
            iterations,
            resume,
        } => {
            if let Some(s) = style {
                cfg.train.style = s.into();
            }
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            let outcome = pipeline::train(&manifest, &cfg.train, &out, resume.as_deref())?;
            if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
                println!(
                    "iterations {}..{}: pixel loss {} -> {}",
                    first.iteration, last.iteration, first.pixel, last.pixel
                );
            }
            println!("final checkpoint {}", outcome.final_checkpoint.display());
        }
        Command::Invert {
            checkpoint,
            out,
            manifest,
            split,
            sketches,
        } => {
            let written = match manifest {
                Some(m) => pipeline::invert_manifest(&checkpoint, &m, split.split(), &out)?,
                None => {
                    anyhow::ensure!(
                        !sketches.is_empty(),
                        sketchinv::Error::InvalidArgument("no sketches given".into())
                    );
                    pipeline::invert(&checkpoint, &sketches, &out)?
                }
            };
            println!("wrote {} images to {}", written.len(), out.display());
        }
        Command::Evaluate {
            manifest,
            inverted,
            out,
            split,
        } => {
            let (report, missing) = pipeline::evaluate(&manifest, split.split(), &inverted, &cfg.metrics, &out)?;
            println!(
                "{} images: PSNR {:.4} ± {:.4}, SSIM {:.4} ± {:.4}, R {:.4} ± {:.4}",
                report.count,
                report.psnr.mean,
                report.psnr.sem,
                report.ssim.mean,
                report.ssim.sem,
                report.r.mean,
                report.r.sem
            );
            for m in missing {
                println!("  missing {m}");
            }
        }
        Command::Identify {
            manifest,
            out,
            style,
            inverted,
            checkpoint,
            split,
        } => {
            let style = style.map(Style::from).unwrap_or(cfg.train.style);
            let inverted = match checkpoint {
                Some(ck) => {
                    let dir = out.join("inverted");
                    pipeline::invert_manifest(&ck, &manifest, split.split(), &dir)?;
                    Some(dir)
                }
                None => inverted,
            };
            let summary = pipeline::identify(&manifest, split.split(), style, inverted.as_deref(), &out)?;
            print_summary(&summary);
        }
        Command::Visualize {
            checkpoint,
            sketch,
            out,
        } => {
            let written = pipeline::visualize(&checkpoint, &sketch, &out)?;
            println!("wrote {} layer images to {}", written.len(), out.display());
        }
        Command::Run { out } => {
            let run = pipeline::run_pipeline(&out, &cfg)?;
            println!(
                "pixel loss {} -> {}; {:?} split PSNR {:.4} dB, SSIM {:.4}, R {:.4}",
                run.first_pixel_loss,
                run.final_pixel_loss,
                run.eval_split,
                run.quality.psnr.mean,
                run.quality.ssim.mean,
                run.quality.r.mean
            );
            print_summary(&run.identification);
        }
    }
    Ok(())
}

/// 2 for filesystem trouble, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|e| {
        e.downcast_ref::<sketchinv::Error>()
            .is_some_and(sketchinv::Error::is_io)
            || e.downcast_ref::<std::io::Error>().is_some()
    });
    if io {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli).context("sketchinv failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
