//! `vla`: data generation, annotation, training, sweeps, evaluation and
//! attention visualisation for the tabletop policy.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use vla_core::sim::VariantMode;

use config::{resolve, PolicyKind, RunConfig, TeacherMode};
use error::CliError;

#[derive(Parser)]
#[command(name = "vla", version, about = "Reasoning-supervised fine-tuning of a tiny vision-language-action policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted expert and save a demonstration dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Comma-separated task names; all four by default.
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
        /// Episodes per task.
        #[arg(long)]
        episodes: Option<usize>,
        /// visual_matching or variant_aggregation.
        #[arg(long)]
        variant_mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attach teacher rationales to every demonstration step.
    Annotate {
        #[command(flatten)]
        common: Common,
        /// Directory containing `demos.*`.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, value_enum)]
        teacher: Option<TeacherArg>,
        /// Remote teacher URL (falls back to REFINEVLA_TEACHER_ENDPOINT).
        #[arg(long)]
        endpoint: Option<String>,
        /// Total attempts per remote request.
        #[arg(long)]
        retries: Option<u32>,
        /// Concurrent remote requests.
        #[arg(long)]
        concurrency: Option<usize>,
    },
    /// Train one policy.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: TrainArgs,
        /// Evaluate the best checkpoint when training ends.
        #[arg(long)]
        evaluate: bool,
    },
    /// Train one run per reasoning weight.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: TrainArgs,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Train one run per number of frozen blocks.
    SweepFreeze {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: TrainArgs,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Closed-loop success of a checkpoint or a reference policy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Paired attention heatmaps and alignment report for two checkpoints.
    VizAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        before: Option<PathBuf>,
        #[arg(long)]
        after: Option<PathBuf>,
        /// Heatmap pairs written per task.
        #[arg(long)]
        heatmaps: Option<usize>,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory containing `annotated.*`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    lambda_r: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    frozen_blocks: Option<usize>,
    #[arg(long)]
    freeze_embeddings: bool,
    /// Train on the action loss alone.
    #[arg(long)]
    action_only: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    log_interval: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Cap on validation episodes per task.
    #[arg(long)]
    val_episodes: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    init_seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<f64>>,
    /// Runs trained concurrently.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Comma-separated task names; all four by default.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    /// Episodes per task.
    #[arg(long)]
    episodes: Option<usize>,
    /// Comma-separated variant modes.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    #[arg(long)]
    max_steps: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TeacherArg {
    Oracle,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Expert,
    Random,
}

// ── flag overrides ───────────────────────────────────────────────────────

struct Overrides(Vec<(&'static str, Value)>);

impl Overrides {
    fn opt<T: serde::Serialize>(&mut self, path: &'static str, v: Option<T>) {
        if let Some(v) = v {
            self.0.push((path, json!(v)));
        }
    }

    fn flag(&mut self, path: &'static str, set: bool) {
        if set {
            self.0.push((path, Value::Bool(true)));
        }
    }

    fn common(&mut self, command: &str, c: &Common) {
        self.0.push(("command", json!(command)));
        self.opt("out", c.out.as_ref());
    }

    fn train(&mut self, a: &TrainArgs) {
        self.opt("data.annotated_dir", a.data.as_ref());
        self.opt("data.val_fraction", a.val_fraction);
        self.opt("train.lambda_r", a.lambda_r);
        self.opt("train.lr", a.lr);
        self.opt("train.max_steps", a.steps);
        self.opt("train.batch_size", a.batch_size);
        self.opt("train.frozen_blocks", a.frozen_blocks);
        self.flag("train.freeze_embeddings", a.freeze_embeddings);
        self.flag("train.action_only", a.action_only);
        self.opt("train.seed", a.seed);
        self.opt("train.eval_interval", a.eval_interval);
        self.opt("train.log_interval", a.log_interval);
        self.opt("train.patience", a.patience);
        self.opt("train.val_episodes_per_task", a.val_episodes);
        self.opt("model.layers", a.layers);
        self.opt("model.heads", a.heads);
        self.opt("model.dim", a.dim);
        self.opt("model.init_seed", a.init_seed);
    }

    fn eval(&mut self, a: &EvalArgs) -> Result<(), CliError> {
        self.opt("data.tasks", a.tasks.as_ref());
        self.opt("eval.episodes_per_task", a.episodes);
        self.opt("eval.max_steps", a.max_steps);
        self.opt("eval.seed_base", a.seed);
        if let Some(modes) = &a.modes {
            let parsed = modes.iter().map(|m| parse_mode(m)).collect::<Result<Vec<_>, _>>()?;
            self.0.push(("eval.modes", json!(parsed)));
        }
        Ok(())
    }

    fn sweep(&mut self, a: &SweepArgs) {
        self.opt("sweep.values", a.values.as_ref());
        self.opt("sweep.jobs", a.jobs);
    }
}

fn parse_mode(s: &str) -> Result<VariantMode, CliError> {
    s.parse().map_err(|e: vla_core::sim::SimError| CliError::Config(e.to_string()))
}

fn build(command: &Command) -> Result<RunConfig, CliError> {
    let mut o = Overrides(Vec::new());
    let common = match command {
        Command::GenData { common, tasks, episodes, variant_mode, seed } => {
            o.common("gen-data", common);
            o.opt("data.tasks", tasks.as_ref());
            o.opt("data.episodes_per_task", *episodes);
            o.opt("data.variant_mode", variant_mode.as_deref().map(parse_mode).transpose()?);
            o.opt("data.seed", *seed);
            common
        }
        Command::Annotate { common, input, teacher, endpoint, retries, concurrency } => {
            o.common("annotate", common);
            o.opt("data.demos_dir", input.as_ref());
            o.opt(
                "teacher.mode",
                teacher.map(|t| match t {
                    TeacherArg::Oracle => TeacherMode::Oracle,
                    TeacherArg::Remote => TeacherMode::Remote,
                }),
            );
            o.opt("teacher.remote.endpoint", endpoint.as_ref());
            o.opt("teacher.remote.max_attempts", *retries);
            o.opt("teacher.remote.concurrency", *concurrency);
            common
        }
        Command::Train { common, run, evaluate } => {
            o.common("train", common);
            o.train(run);
            o.flag("evaluate_after_train", *evaluate);
            common
        }
        Command::SweepLambda { common, run, sweep } => {
            o.common("sweep-lambda", common);
            o.train(run);
            o.sweep(sweep);
            common
        }
        Command::SweepFreeze { common, run, sweep } => {
            o.common("sweep-freeze", common);
            o.train(run);
            o.sweep(sweep);
            common
        }
        Command::Eval { common, checkpoint, policy, eval } => {
            o.common("eval", common);
            o.opt("eval_checkpoint", checkpoint.as_ref());
            o.opt(
                "eval_policy",
                policy.map(|p| match p {
                    PolicyArg::Expert => PolicyKind::Expert,
                    PolicyArg::Random => PolicyKind::Random,
                }),
            );
            o.eval(eval)?;
            common
        }
        Command::VizAttn { common, before, after, heatmaps, eval } => {
            o.common("viz-attn", common);
            o.opt("viz.before", before.as_ref());
            o.opt("viz.after", after.as_ref());
            o.opt("viz.heatmaps_per_task", *heatmaps);
            o.eval(eval)?;
            common
        }
    };
    resolve(common.config.as_deref(), o.0)
}

fn run(command: Command) -> Result<(), CliError> {
    let config = build(&command)?;
    match command {
        Command::GenData { .. } => commands::gen_data(&config),
        Command::Annotate { .. } => commands::annotate(config),
        Command::Train { .. } => commands::train(&config),
        Command::SweepLambda { .. } => commands::sweep(&config, vla_core::train::SweepAxis::LambdaR),
        Command::SweepFreeze { .. } => commands::sweep(&config, vla_core::train::SweepAxis::FrozenBlocks),
        Command::Eval { .. } => commands::eval(&config),
        Command::VizAttn { .. } => commands::viz_attn(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
