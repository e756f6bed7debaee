//! `pic`: invert, edit, evaluate, ablate, sweep and toy-verify.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pic_core::correction::Variant;
use pic_core::evaluation::summary_table;
use pic_core::pipeline::{self, EvaluateRequest, Overrides, RunConfig};
use pic_core::toy::SuiteOptions;
use pic_core::{ErrorClass, PicError};

#[derive(Parser)]
#[command(
    name = "pic",
    version,
    about = "Text-driven image editing by prompt interpolation and noise correction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert source images into trajectory caches.
    Invert {
        #[command(flatten)]
        run: RunArgs,
        /// Recompute and overwrite an existing cache.
        #[arg(long)]
        force: bool,
    },
    /// Edit source images with one variant.
    Edit(RunArgs),
    /// Run all four variants on shared caches.
    Ablate(RunArgs),
    /// Edit once per correction weight.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Weights to try (default 0.5,1,1.5,2,2.5).
        #[arg(long, value_delimiter = ',')]
        gammas: Vec<f64>,
    },
    /// Score source/translated pairs.
    Evaluate(EvalArgs),
    /// Run the closed-form invariant suite.
    ToyVerify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        draws: usize,
        #[arg(long, default_value_t = 100)]
        seeds: usize,
        /// Break the schedule on purpose; the suite must then fail.
        #[arg(long)]
        corrupt_schedule: bool,
        /// Write the report as JSON here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Source images.
    inputs: Vec<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Source prompt (skips captioning).
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    backbone: Option<String>,
    /// none, ptp, pnp or p2p.
    #[arg(long)]
    integration: Option<String>,
    #[arg(long)]
    resolution: Option<u32>,
    #[arg(long, short)]
    output_dir: Option<PathBuf>,
    #[arg(long, env = pic_core::cache::CACHE_DIR_ENV)]
    cache_dir: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> pic_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            gamma: self.gamma,
            tau: self.tau,
            beta: self.beta,
            steps: self.steps,
            guidance_scale: self.guidance_scale,
            seed: self.seed,
            variant: self.variant,
            backbone: self.backbone.clone(),
            integration: self.integration.clone(),
            preset: self.preset.clone(),
            source_prompt: self.prompt.clone(),
            inputs: self.inputs.clone(),
            output_dir: self.output_dir.clone(),
            cache_dir: self.cache_dir.clone(),
            resolution: self.resolution,
        });
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Task name used in the report.
    #[arg(long)]
    task: String,
    #[arg(long)]
    source_dir: PathBuf,
    #[arg(long)]
    translated_dir: PathBuf,
    /// Target prompt for CLIP similarity.
    #[arg(long)]
    target_prompt: String,
    /// Object label for the detector (defaults to the task name).
    #[arg(long)]
    label: Option<String>,
    /// sidecar, none or color:RRGGBB.
    #[arg(long)]
    detector: Option<String>,
    #[arg(long)]
    mask_margin: Option<usize>,
    #[arg(long, short, default_value = "pic-out")]
    output_dir: PathBuf,
}

fn exit_code(e: &PicError) -> u8 {
    match e.class() {
        ErrorClass::Validation | ErrorClass::Io => 1,
        ErrorClass::Numerical => 2,
        ErrorClass::ModelUnavailable => 3,
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> pic_core::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn run(cli: Cli) -> pic_core::Result<u8> {
    match cli.command {
        Command::Invert { run, force } => {
            print_json(&pipeline::cmd_invert(&run.config()?, force)?)?
        }
        Command::Edit(run) => {
            for m in pipeline::cmd_edit(&run.config()?)? {
                let l = m.ledger;
                println!(
                    "{} -> {}  ({} | forward {} corrected {} plain {} | {:.1} ms)",
                    m.input.display(),
                    m.output.display(),
                    m.target_prompt,
                    l.forward_calls,
                    l.corrected_calls,
                    l.plain_calls,
                    m.timings.edit_ms
                );
            }
        }
        Command::Ablate(run) => {
            for m in pipeline::cmd_ablate(&run.config()?)? {
                println!("{} -> {}", m.input.display(), m.sheet.display());
                if let Some(o) = &m.toy_ordering {
                    println!("toy surrogate scores over {} seeds:", o.ablation.seeds);
                    for (name, s) in &o.ablation.scores {
                        println!("  {name:<8} bd {:.4}  cs {:.4}", s.bd, s.cs);
                    }
                    println!(
                        "  ordering pic <= ddim_nc <= ddim_pi <= ddim: {}",
                        if o.ordering_holds {
                            "holds"
                        } else {
                            "violated"
                        }
                    );
                    println!(
                        "  pic alignment gap to best: {:.2}%",
                        100.0 * o.alignment_gap
                    );
                }
            }
        }
        Command::Sweep { run, gammas } => {
            for m in pipeline::cmd_sweep(&run.config()?, &gammas)? {
                println!(
                    "{} -> {} ({} outputs)",
                    m.input.display(),
                    m.sheet.display(),
                    m.runs.len()
                );
            }
        }
        Command::Evaluate(args) => {
            let mut cfg = match &args.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(d) = args.detector {
                cfg.metrics.detector = d;
            }
            if let Some(m) = args.mask_margin {
                cfg.metrics.mask_margin = m;
            }
            let req = EvaluateRequest {
                label: args.label.unwrap_or_else(|| args.task.clone()),
                task: args.task,
                source_dir: args.source_dir,
                translated_dir: args.translated_dir,
                target_prompt: args.target_prompt,
                output_dir: args.output_dir,
            };
            let report = pipeline::cmd_evaluate(&cfg, &req)?;
            for s in &report.skipped {
                log::warn!("skipped {}: {}", s.id, s.reason);
            }
            print!("{}", summary_table(std::slice::from_ref(&report)));
        }
        Command::ToyVerify {
            seed,
            draws,
            seeds,
            corrupt_schedule,
            output,
        } => {
            let opts = SuiteOptions {
                seed,
                draws,
                seeds,
                corrupt_schedule,
            };
            let report = pipeline::cmd_toy_verify(&opts, output.as_deref())?;
            print!("{}", report.to_table());
            if !report.all_passed() {
                log::error!("{} invariant checks failed", report.failures().len());
                return Ok(2);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors are validation failures; keep 2 for numerical ones
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
