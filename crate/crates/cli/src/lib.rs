// SPDX-License-Identifier: MIT OR Apache-2.0

//! `agentlens` command line and local HTTP service.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod output;
pub mod server;

/// Exit code for malformed invocations and invalid requests.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while running a valid command.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "agentlens", version, about = "Interpretability lab for a grid-world transformer agent")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (or trace directory for commands that record one).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    /// L4 H16 W128 transformer.
    Default,
    /// L2 H4 W32 transformer used for training on a desk machine.
    Desk,
}

#[derive(Args, Debug, Clone)]
pub struct PolicyArgs {
    /// Checkpoint to load; without it a freshly initialized policy is used.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Model::Default)]
    pub model: Model,
    /// Initialization seed when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    pub init_seed: u64,
    /// Sampling temperature override.
    #[arg(long)]
    pub temperature: Option<f32>,
}

#[derive(Args, Debug, Clone)]
pub struct WorldArgs {
    /// Named scenario preset.
    #[arg(long, default_value = "villager_tree")]
    pub scenario: String,
    /// Scenario spec JSON file; overrides --scenario.
    #[arg(long)]
    pub scenario_file: Option<PathBuf>,
    /// Procedurally generated world with this seed; overrides both.
    #[arg(long)]
    pub procedural: Option<u64>,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Zero,
    Mean,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Gradient,
    Smoothgrad,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Record scripted-expert demonstrations.
    GenDemos {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 32)]
        world_size: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 400)]
        max_steps: usize,
    },
    /// Behavior cloning on a demonstration set.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        demos: PathBuf,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f32,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 0.1)]
        holdout: f64,
    },
    /// Instrumented rollout; --out becomes the trace directory.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        /// Store per-position head outputs (large).
        #[arg(long)]
        outputs: bool,
        #[arg(long, default_value_t = 1)]
        frame_stride: usize,
        /// JSON list of intervention specs applied during the rollout.
        #[arg(long)]
        interventions: Option<PathBuf>,
    },
    /// Teacher-forced replay of a trace, optionally under interventions.
    Replay {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        interventions: Option<PathBuf>,
    },
    /// Ablate every head output at every window position of one frame.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long, value_enum, default_value_t = Mode::Zero)]
        mode: Mode,
    },
    /// Input saliency of an action logit or conv channel.
    Saliency {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        frame: usize,
        /// `attack`, `logit:FACTOR:INDEX` or `channel:LAYER:CHANNEL`.
        #[arg(long, default_value = "attack")]
        target: String,
        #[arg(long, value_enum, default_value_t = Method::Gradient)]
        method: Method,
        #[arg(long, default_value_t = 32)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        sigma: f32,
        /// Dark means salient.
        #[arg(long)]
        invert: bool,
        /// Also run the cascading parameter-randomization check.
        #[arg(long)]
        sanity: bool,
    },
    /// Synthesize an input that maximizes one conv channel.
    Featviz {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        channel: usize,
        #[arg(long, default_value_t = 128)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        step_size: f32,
        #[arg(long, default_value_t = 1)]
        jitter: usize,
        #[arg(long, default_value_t = 1e-3)]
        weight_decay: f32,
    },
    /// Print the receptive-field recursion table.
    Rfmap {
        #[command(flatten)]
        common: Common,
        /// `K,S,P:K,S,P:...`; defaults to the model's conv stack.
        #[arg(long)]
        stack: Option<String>,
        #[arg(long, value_enum, default_value_t = Model::Default)]
        model: Model,
    },
    /// Per-filter activation overlays and a PCA colour map of one conv layer.
    Overlay {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        layer: usize,
    },
    /// Steered rollouts at several strengths.
    Steer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-3,0,3")]
        alphas: Vec<f32>,
        #[arg(long, default_value_t = 20)]
        rollouts: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Steering vector array file; computed from the default recipe when absent.
        #[arg(long)]
        vector: Option<PathBuf>,
    },
    /// Rollout with an action-factor confidence gate; --out is the trace directory.
    GateRollout {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long, default_value_t = 2)]
        factor: usize,
        #[arg(long)]
        threshold: f64,
        #[arg(long, default_value_t = 300)]
        steps: usize,
    },
    /// Trace utilities.
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
    /// Run the local HTTP service.
    Serve {
        #[command(flatten)]
        common: Common,
        /// JSON lab configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<Model>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
pub enum TraceCommand {
    /// Validate a trace and summarize it.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Usage errors from the lab map to 2, everything else to 1.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    let usage = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<agentlens::Error>(),
            Some(agentlens::Error::Usage(_) | agentlens::Error::Config(_))
        ) || c.downcast_ref::<commands::UsageError>().is_some()
    });
    if usage {
        EXIT_USAGE
    } else {
        EXIT_FAILURE
    }
}
