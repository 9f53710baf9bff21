//! Operator CLI: dataset generation, segmentation pretraining, end-to-end
//! training, evaluation with plots, and finite-difference gradient auditing.

mod plots;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bevforecast::config::RunConfig;
use bevforecast::nn::ParamStore;
use bevforecast::scene_sim::{read_dataset, write_dataset};
use bevforecast::trainer;

#[derive(Parser)]
#[command(name = "bevforecast", about = "Map-free BEV trajectory prediction on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Paper-scale dimensions (heavy; not intended for CPU training).
    Paper,
    /// Desk-scale preset that trains on a CPU.
    Small,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Agent,
    Ego,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat key-value config file; keys override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset the config file overrides.
    #[arg(long, value_enum, default_value = "small")]
    preset: Preset,
    /// Overrides the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> bevforecast::error::Result<RunConfig> {
        let mut cfg = match self.preset {
            Preset::Paper => RunConfig::default(),
            Preset::Small => RunConfig::small(),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    bevforecast::error::Error::Config(format!(
                        "line {}: expected `key = value`, got `{line}`",
                        lineno + 1
                    ))
                })?;
                cfg.set_key(k.trim(), v.trim())?;
            }
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes (defaults to the config's n_scenes).
        #[arg(long)]
        n: Option<usize>,
        /// Predict a surrounding agent or the ego vehicle itself.
        #[arg(long, value_enum, default_value = "agent")]
        target: Target,
    },
    /// Pre-train the BEV encoder on semantic segmentation.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full prediction model.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a training checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Warm-start parameters (e.g. a pretraining checkpoint).
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: metrics CSV plus overlay plots.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// How many per-sample overlay plots to render.
        #[arg(long, default_value = "8")]
        plots: usize,
    },
    /// Run the finite-difference gradient audit.
    Gradcheck {
        #[arg(long, default_value = "0")]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn write_manifest(dir: &std::path::Path, cfg: &RunConfig, extra: &[(String, String)]) -> bevforecast::error::Result<()> {
    let mut text = format!("config_hash {}\nseed {}\n", cfg.hash(), cfg.seed);
    for (k, v) in extra {
        text.push_str(&format!("{k} {v}\n"));
    }
    fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

fn run(cli: Cli) -> bevforecast::error::Result<ExitCode> {
    match cli.cmd {
        Cmd::GenData { cfg, out, n, target } => {
            let mut cfg = cfg.load()?;
            if matches!(target, Target::Ego) {
                cfg.target_ego = true;
            }
            let n = n.unwrap_or(cfg.n_scenes);
            let samples = trainer::generate_dataset(&cfg, cfg.seed, n)?;
            write_dataset(&out, &samples)?;
            write_manifest(&out, &cfg, &[("count".into(), n.to_string())])?;
            println!("generated {n} scenes (seed {}, config hash {})", cfg.seed, cfg.hash());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Pretrain { cfg, dataset, out } => {
            let cfg = cfg.load()?;
            let samples = read_dataset(&dataset)?;
            let ps = ParamStore::new(cfg.seed);
            let acc = trainer::pretrain(&cfg, &samples, &out, &ps)?;
            write_manifest(&out, &cfg, &[("seg_accuracy".into(), format!("{acc:.4}"))])?;
            println!("pretraining done: per-cell accuracy {acc:.4} (config hash {})", cfg.hash());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train { cfg, dataset, out, checkpoint, init_from } => {
            let cfg = cfg.load()?;
            let samples = read_dataset(&dataset)?;
            let ps = ParamStore::new(cfg.seed);
            let summary = trainer::train(
                &cfg,
                &samples,
                &out,
                &ps,
                init_from.as_deref(),
                checkpoint.as_deref(),
            )?;
            write_manifest(&out, &cfg, &[("steps".into(), summary.steps.to_string())])?;
            println!(
                "training done: {} steps, final loss {:.4}, checkpoint {} (config hash {})",
                summary.steps,
                summary.final_loss,
                summary.final_checkpoint.display(),
                cfg.hash()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { cfg, dataset, checkpoint, out, plots } => {
            let cfg = cfg.load()?;
            let samples = read_dataset(&dataset)?;
            let ps = ParamStore::new(cfg.seed);
            let mut opt = bevforecast::nn::AdamW::new(cfg.weight_decay, cfg.grad_clip);
            bevforecast::checkpoint::load_checkpoint(&checkpoint, &cfg, &ps, &mut opt)?;
            fs::create_dir_all(&out)?;
            let per_layer = trainer::evaluate(&cfg, &ps, &samples)?;
            let final_result = per_layer.last().expect("at least one decoder layer");

            let mut csv = String::from("minADE5,minADE10,minFDE1,minFDE10,MissRate\n");
            csv.push_str(&format!(
                "{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                final_result.min_ade5,
                final_result.min_ade10,
                final_result.min_fde1,
                final_result.min_fde10,
                final_result.miss_rate
            ));
            fs::write(out.join("metrics.csv"), &csv)?;

            let mut per_layer_csv = String::from("layer,minADE5,minADE10,minFDE1,minFDE10,MissRate\n");
            for (l, r) in per_layer.iter().enumerate() {
                per_layer_csv.push_str(&format!(
                    "{l},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    r.min_ade5, r.min_ade10, r.min_fde1, r.min_fde10, r.miss_rate
                ));
            }
            fs::write(out.join("metrics_per_layer.csv"), &per_layer_csv)?;
            write_manifest(&out, &cfg, &[("n_samples".into(), final_result.n_samples.to_string())])?;

            let model = bevforecast::traj_decoder::Model::from_config(&cfg);
            for (i, s) in samples.iter().take(plots).enumerate() {
                ps.clear_step();
                let (pred, input) = model.predict(&ps, s)?;
                let img = plots::render_overlay(s, &pred, &input);
                img.save(out.join(format!("sample_{i:03}.png")))
                    .map_err(|e| bevforecast::error::Error::Model(format!("plot: {e}")))?;
            }
            println!(
                "eval done: minADE10 {:.3} m, miss rate {:.3} over {} samples (config hash {})",
                final_result.min_ade10,
                final_result.miss_rate,
                final_result.n_samples,
                cfg.hash()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck { seed } => {
            let reports = bevforecast::gradcheck::run_all(seed, false);
            let mut ok = true;
            for r in &reports {
                println!(
                    "{:<24} max rel err {:>12.3e}  {}",
                    r.name,
                    r.max_rel_err,
                    if r.passed { "PASS" } else { "FAIL" }
                );
                ok &= r.passed;
            }
            if ok {
                println!("all {} gradient checks passed", reports.len());
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("gradient check failure");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
