//! Command-line harness around the core library.

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use promptgate::ablate::{run_ablation, AblationAxis};
use promptgate::checkpoint::Checkpoint;
use promptgate::config::{EvalProtocol, RunConfig};
use promptgate::datagen::{self, SynthConfig};
use promptgate::eval::{run_eval, write_report};
use promptgate::inspect::inspect;
use promptgate::train::run_train;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "promptgate", version, about = "Self-prompting gated segmenter harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic camouflage dataset as PNG image/mask pairs.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Foreground/background contrast in [0, 1].
        #[arg(long, default_value_t = 0.4)]
        delta: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Image side in pixels (multiple of 16).
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.1)]
        coverage_min: f64,
        #[arg(long, default_value_t = 0.3)]
        coverage_max: f64,
        /// First sample index (disjoint ranges give disjoint data).
        #[arg(long, default_value_t = 0)]
        start_index: u64,
    },
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-key overrides, e.g. `--set lora.rank=8`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `intrinsic` or `null_prompt_baseline`.
        #[arg(long, default_value = "intrinsic")]
        protocol: String,
        /// Report directory (defaults next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train/evaluate every row of an ablation axis.
    Ablate {
        /// `core`, `psg_operator`, `tokens`, or `lora`.
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Comma-separated model seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
    },
    /// Dump the six-map internal visualization bundle for one image.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>, sets: &[String]) -> anyhow::Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    Ok(base.with_overrides(sets)?)
}

fn parse_protocol(s: &str) -> anyhow::Result<EvalProtocol> {
    match s {
        "intrinsic" => Ok(EvalProtocol::Intrinsic),
        "null_prompt_baseline" | "null" => Ok(EvalProtocol::NullPromptBaseline),
        other => bail!("unknown protocol `{other}` (intrinsic, null_prompt_baseline)"),
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData {
            out,
            n,
            delta,
            seed,
            size,
            coverage_min,
            coverage_max,
            start_index,
        } => {
            let cfg = SynthConfig {
                resolution: size,
                delta,
                coverage: (coverage_min, coverage_max),
                seed,
            };
            let images = out.join("images");
            let masks = out.join("masks");
            std::fs::create_dir_all(&images)?;
            std::fs::create_dir_all(&masks)?;
            for i in 0..n as u64 {
                let sample = datagen::synth_sample(&cfg, start_index + i)?;
                datagen::save_sample(&sample, &out)?;
            }
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Train { config, sets } => {
            let cfg = load_config(&config, &sets)?;
            let result = run_train(&cfg)?;
            println!(
                "trained {} steps: total {:.4} -> {:.4}",
                result.steps, result.initial_total, result.final_total
            );
            println!("checkpoint: {}", result.checkpoint_path.display());
            println!("log: {}", result.log_path.display());
        }
        Command::Eval { ckpt, data, protocol, out } => {
            let protocol = parse_protocol(&protocol)?;
            let checkpoint = Checkpoint::load(&ckpt)?;
            let model = checkpoint.restore()?;
            let dataset =
                datagen::load_dataset(&data, model.cfg.model.image_size, None)?;
            let report = run_eval(&model, &dataset, protocol)?;
            let out_dir = out.unwrap_or_else(|| {
                ckpt.parent().map(PathBuf::from).unwrap_or_default().join("eval")
            });
            write_report(&report, &out_dir)?;
            println!(
                "n={} mae={:.4} f_w={:.4} s_m={:.4} e_phi={:.4} dice={:.4} iou={:.4}",
                report.n_samples, report.mae, report.f_w, report.s_m, report.e_phi,
                report.dice, report.iou
            );
            println!("report: {}", out_dir.display());
        }
        Command::Ablate { axis, config, sets, seeds } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg = load_config(&config, &sets)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>().context("parsing --seeds"))
                .collect::<anyhow::Result<_>>()?;
            let table = run_ablation(&cfg, axis, &seeds)?;
            print!("{table}");
            let out_dir = PathBuf::from(&cfg.output.dir);
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("ablation.csv"), table.to_csv())?;
            std::fs::write(
                out_dir.join("ablation.json"),
                serde_json::to_string_pretty(&table)?,
            )?;
            println!("table: {}", out_dir.join("ablation.csv").display());
        }
        Command::Inspect { ckpt, image, out } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let model = checkpoint.restore()?;
            let img = datagen::load_image(&image, model.cfg.model.image_size)?;
            let paths = inspect(&model, &img, &out)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
