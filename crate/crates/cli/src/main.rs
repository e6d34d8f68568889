//! `dartsmini`: desk-scale differentiable architecture search with a decaying
//! auxiliary skip connection, plus its diagnostics and tabular benchmark.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dartsmini_cli::commands::{self, resolve_out_dir};

#[derive(Parser)]
#[command(name = "dartsmini", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Config file (dotted key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (falls back to $DARTSMINI_OUT, then `.`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set decay.beta0=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the bi-level architecture search and write its artifacts.
    Search(Common),
    /// Collapse diagnostics on a finished search or standalone analyses.
    Diag {
        #[command(subcommand)]
        which: DiagCmd,
    },
    /// Exhaustive tabular benchmark: build, evaluate, report.
    Bench {
        #[command(subcommand)]
        which: BenchCmd,
    },
    /// Derive or inspect discrete genotypes.
    Genotype {
        #[command(subcommand)]
        which: GenoCmd,
    },
}

#[derive(Subcommand)]
enum DiagCmd {
    /// Max Hessian eigenvalue of the validation loss w.r.t. the architecture.
    Hessian {
        #[command(flatten)]
        common: Common,
        /// Saved search state (default: <out>/state.txt).
        #[arg(long)]
        state: Option<PathBuf>,
    },
    /// Validation-accuracy grid along two normalized random directions.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        state: Option<PathBuf>,
        /// Probe radius (overrides diag.landscape.radius).
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Convergence-rate proxy of the three-op chain.
    Lambda {
        #[command(flatten)]
        common: Common,
        /// Auxiliary coefficient (overrides diag.lambda.beta).
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Trainable skip coefficient on a residual chain.
    ResnetBeta {
        #[command(flatten)]
        common: Common,
        /// Initial coefficient (overrides diag.resnet.init).
        #[arg(long)]
        init: Option<f64>,
    },
    /// Autodiff-vs-closed-form gradient identity on linear residual chains.
    Gradflow {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Train every genotype in the space and write the ground-truth table.
    Build {
        #[command(flatten)]
        common: Common,
    },
    /// Score vanilla and auxiliary-skip searches against the table.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Table file (default: <out>/bench_table.tsv).
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Aggregate eval rows into the method comparison.
    Report {
        #[command(flatten)]
        common: Common,
        /// Eval file (default: <out>/bench_eval.csv).
        #[arg(long)]
        eval: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GenoCmd {
    /// Discretize the architecture parameters of a saved search state.
    Derive {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        state: Option<PathBuf>,
        /// Retained incoming edges per node (overrides search.genotype_k).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Parse, validate and summarize a genotype file.
    Show {
        /// Genotype text file.
        file: PathBuf,
    },
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Search(c) => {
            let cfg = commands::load_config(&c.config, &c.set)?;
            commands::cmd_search(&cfg, &resolve_out_dir(c.out))
        }
        Cmd::Diag { which } => match which {
            DiagCmd::Hessian { common: c, state } => {
                let cfg = commands::load_config(&c.config, &c.set)?;
                commands::cmd_diag_hessian(&cfg, &resolve_out_dir(c.out), state)
            }
            DiagCmd::Landscape {
                common: c,
                state,
                radius,
            } => {
                let cfg = commands::load_config(&c.config, &c.set)?;
                commands::cmd_diag_landscape(&cfg, &resolve_out_dir(c.out), state, radius)
            }
            DiagCmd::Lambda { common: c, beta } => {
                let cfg = commands::load_config(&c.config, &c.set)?;
                commands::cmd_diag_lambda(&cfg, &resolve_out_dir(c.out), beta)
            }
            DiagCmd::ResnetBeta { common: c, init } => {
                let cfg = commands::load_config(&c.config, &c.set)?;
                commands::cmd_diag_resnet_beta(&cfg, &resolve_out_dir(c.out), init)
            }
            DiagCmd::Gradflow { common: c } => {
                let cfg = commands::load_config(&c.config, &c.set)?;
                commands::cmd_diag_gradflow(&cfg, &resolve_out_dir(c.out))
            }
        },
        Cmd::Bench { which } => match which {
            BenchCmd::Build { common: c } => {
                let cfg = commands::load_config(&c.config, &c.set)?;
                commands::cmd_bench_build(&cfg, &resolve_out_dir(c.out))
            }
            BenchCmd::Eval { common: c, table } => {
                let cfg = commands::load_config(&c.config, &c.set)?;
                commands::cmd_bench_eval(&cfg, &resolve_out_dir(c.out), table)
            }
            BenchCmd::Report { common: c, eval } => {
                let cfg = commands::load_config(&c.config, &c.set)?;
                commands::cmd_bench_report(&cfg, &resolve_out_dir(c.out), eval)
            }
        },
        Cmd::Genotype { which } => match which {
            GenoCmd::Derive {
                common: c,
                state,
                k,
            } => {
                let cfg = commands::load_config(&c.config, &c.set)?;
                commands::cmd_genotype_derive(&cfg, &resolve_out_dir(c.out), state, k)
            }
            GenoCmd::Show { file } => commands::cmd_genotype_show(&file),
        },
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
