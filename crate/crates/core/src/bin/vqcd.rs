//! Command-line front end for the continual diffusion pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vqcd_core::pipeline::{
    evaluate_continual, prune_and_eval, run_pipeline, stage_assemble, stage_qsa, stage_swa,
    ActionMode, PipelineConfig,
};
use vqcd_core::suite::{generate_dataset, save_dataset, Quality, TaskSpec};
use vqcd_core::Result;

#[derive(Parser)]
#[command(name = "vqcd", version, about = "Continual offline RL with quantized space alignment and selective weight activation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Pipeline config file (JSON). Missing fields take defaults.
    #[arg(long)]
    config: PathBuf,
    /// Override the output directory.
    #[arg(long)]
    out: Option<String>,
    /// Override the per-task mask fraction (default 1/I).
    #[arg(long)]
    mask_rate: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::from_file(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if self.mask_rate.is_some() {
            cfg.mask_rate = self.mask_rate;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct SamplerArgs {
    /// Max diffusion step K.
    #[arg(long)]
    diffusion_steps: Option<usize>,
    /// DDIM stride.
    #[arg(long)]
    stride: Option<usize>,
    /// Guidance weight.
    #[arg(long)]
    omega: Option<f32>,
    /// Conditioning value in normalized return space.
    #[arg(long)]
    target_return: Option<f32>,
    /// Action decoding mode.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ActionMode>,
}

fn parse_mode(s: &str) -> std::result::Result<ActionMode, String> {
    match s {
        "joint" => Ok(ActionMode::Joint),
        "idm" => Ok(ActionMode::Idm),
        other => Err(format!("unknown mode `{other}` (expected joint|idm)")),
    }
}

impl SamplerArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(k) = self.diffusion_steps {
            cfg.k_max = k;
        }
        if let Some(s) = self.stride {
            cfg.stride = s;
        }
        if let Some(o) = self.omega {
            cfg.guidance_omega = o;
        }
        if let Some(t) = self.target_return {
            cfg.target_return = t;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline dataset from scripted policies.
    GenData {
        /// Task spec as inline JSON (see docs/formats.md).
        #[arg(long, conflicts_with_all = ["suite", "task_index"])]
        task_json: Option<String>,
        /// Built-in suite size (3 or 6).
        #[arg(long)]
        suite: Option<usize>,
        /// Task index inside the built-in suite.
        #[arg(long)]
        task_index: Option<usize>,
        /// Seed for the built-in suite's dynamics.
        #[arg(long, default_value_t = 410)]
        suite_seed: u64,
        /// Quality mix, e.g. expert:0.5,random:0.5
        #[arg(long, default_value = "expert:0.34,medium:0.33,random:0.33")]
        mix: String,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the per-task space-alignment codecs.
    TrainQsa(ConfigArgs),
    /// Sequential masked diffuser training over the task list.
    TrainSwa(ConfigArgs),
    /// Assemble per-task checkpoints into one model.
    Assemble(ConfigArgs),
    /// Evaluate the assembled model on every task.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Evaluation rollouts per task.
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Release low-magnitude mask positions and measure retention.
    Prune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        prune_threshold: f32,
    },
    /// Run the whole pipeline end to end.
    RunAll {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Print the default config as JSON.
    DefaultConfig,
}

fn parse_mix(raw: &str) -> Result<Vec<(Quality, f64)>> {
    let mut out = Vec::new();
    for part in raw.split(',') {
        let (name, frac) = part.split_once(':').ok_or_else(|| {
            vqcd_core::VqcdError::config(format!("mix entry `{part}` must be quality:fraction"))
        })?;
        let quality: Quality = name.trim().parse()?;
        let frac: f64 = frac
            .trim()
            .parse()
            .map_err(|_| vqcd_core::VqcdError::config(format!("bad fraction in `{part}`")))?;
        out.push((quality, frac));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            task_json,
            suite,
            task_index,
            suite_seed,
            mix,
            episodes,
            seed,
            out,
        } => {
            let spec: TaskSpec = match (task_json, suite, task_index) {
                (Some(json), _, _) => serde_json::from_str(&json)?,
                (None, Some(n), Some(idx)) => {
                    let tasks = match n {
                        3 => TaskSpec::suite3(suite_seed),
                        6 => TaskSpec::suite6(suite_seed),
                        other => {
                            return Err(vqcd_core::VqcdError::config(format!(
                                "unknown suite size {other} (expected 3 or 6)"
                            )))
                        }
                    };
                    tasks.get(idx).cloned().ok_or_else(|| {
                        vqcd_core::VqcdError::config(format!(
                            "task index {idx} out of range for suite {n}"
                        ))
                    })?
                }
                _ => {
                    return Err(vqcd_core::VqcdError::config(
                        "gen-data needs --task-json or --suite with --task-index",
                    ))
                }
            };
            let mix = parse_mix(&mix)?;
            let ds = generate_dataset(&spec, &mix, episodes, seed)?;
            save_dataset(&ds, &out)?;
            println!(
                "wrote {} episodes for task {} to {} (R_random {:.2}, R_expert {:.2})",
                ds.episodes.len(),
                ds.header.task.id,
                out.display(),
                ds.header.r_random,
                ds.header.r_expert
            );
        }
        Command::TrainQsa(args) => {
            let cfg = args.load()?;
            let aligners = stage_qsa(&cfg)?;
            println!("alignment ready for {} tasks", aligners.len());
        }
        Command::TrainSwa(args) => {
            let cfg = args.load()?;
            let matrix = stage_swa(&cfg)?;
            println!("trained {} tasks; diagonal returns:", matrix.n_tasks());
            for j in 0..matrix.n_tasks() {
                if let Some(v) = matrix.get(j, j) {
                    println!("  task {j}: {v:.2}");
                }
            }
        }
        Command::Assemble(args) => {
            let cfg = args.load()?;
            stage_assemble(&cfg)?;
            println!("assembled model written to {}/assembled.ckpt", cfg.out_dir);
        }
        Command::Eval {
            config,
            sampler,
            rollouts,
        } => {
            let mut cfg = config.load()?;
            sampler.apply(&mut cfg);
            cfg.validate()?;
            let artifacts = evaluate_continual(&cfg, rollouts)?;
            println!("P = {:.3}", artifacts.summary.p_mean);
            println!("normalized P = {:.2}", artifacts.summary.p_normalized);
            for (j, f) in artifacts.summary.forgetting.iter().enumerate() {
                println!("  forgetting task {j}: {f:.3}");
            }
        }
        Command::Prune {
            config,
            prune_threshold,
        } => {
            let cfg = config.load()?;
            let outcome = prune_and_eval(&cfg, prune_threshold)?;
            println!(
                "threshold {}: released {} positions ({:.2}%), score {:.2} -> {:.2}",
                outcome.threshold,
                outcome.released,
                outcome.prune_rate * 100.0,
                outcome.score_before,
                outcome.score_after
            );
        }
        Command::RunAll { config, sampler } => {
            let mut cfg = config.load()?;
            sampler.apply(&mut cfg);
            cfg.validate()?;
            let artifacts = run_pipeline(&cfg)?;
            println!("P = {:.3}", artifacts.summary.p_mean);
            println!("normalized P = {:.2}", artifacts.summary.p_normalized);
            println!("reports in {}", cfg.out_dir);
        }
        Command::DefaultConfig => {
            println!("{}", PipelineConfig::default().to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
