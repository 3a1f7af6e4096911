//! `rdlab`: dataset generation, pretraining, experiments, evaluation and
//! report comparison.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "rdlab", version, about = "Reverse-design experiments on synthetic image edits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every configurable command.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// key=value file applied before flags
    #[arg(long = "config", value_name = "FILE")]
    pub file: Option<PathBuf>,
    /// Override one key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a triplet corpus
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict records to a single operation
        #[arg(long)]
        single_op: bool,
        /// Re-read and regenerate every record after writing
        #[arg(long)]
        verify: bool,
        /// Write into a non-empty directory
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Pretrain the image encoder, then the language model
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fine-tune a pretrained checkpoint for one experiment
    Train {
        #[arg(long)]
        exp: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train every parameter group, not only the projection
        #[arg(long)]
        unfrozen: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_name = "BOOL")]
        aux_detached: Option<bool>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Decode a split and write report files
    Eval {
        /// Defaults to ckpt_best.bin in the output directory
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Defaults to the `data` entry of the output directory's config
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Tabulate reports from several run directories
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Dump logits of the builtin probe batch as hex
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn set_flag<T: ToString>(cfg: &mut config::RunConfig, key: &str, value: Option<T>) -> rdlab::Result<()> {
    match value {
        Some(v) => cfg.set(key, v.to_string()),
        None => Ok(()),
    }
}

fn path_str(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn base(mut cfg: config::RunConfig, args: &ConfigArgs) -> rdlab::Result<config::RunConfig> {
    if let Some(f) = &args.file {
        cfg.apply_file(f)?;
    }
    for item in &args.set {
        cfg.apply_override(item)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), commands::CliError> {
    match cli.command {
        Command::GenData {
            out,
            n,
            seed,
            single_op,
            verify,
            force,
            config,
        } => {
            let mut cfg = base(config::RunConfig::gen_data(), &config)?;
            set_flag(&mut cfg, "out", path_str(out))?;
            set_flag(&mut cfg, "n", n)?;
            set_flag(&mut cfg, "seed", seed)?;
            set_flag(&mut cfg, "single_op", single_op.then_some(true))?;
            set_flag(&mut cfg, "verify", verify.then_some(true))?;
            commands::gen_data(&cfg, force)
        }
        Command::Pretrain { data, out, seed, config } => {
            let mut cfg = base(config::RunConfig::pretrain(), &config)?;
            set_flag(&mut cfg, "data", path_str(data))?;
            set_flag(&mut cfg, "out", path_str(out))?;
            set_flag(&mut cfg, "seed", seed)?;
            commands::pretrain(&cfg)
        }
        Command::Train {
            exp,
            data,
            init,
            out,
            unfrozen,
            epochs,
            aux_detached,
            seed,
            config,
        } => {
            let mut cfg = base(config::RunConfig::train(), &config)?;
            set_flag(&mut cfg, "experiment", exp)?;
            set_flag(&mut cfg, "data", path_str(data))?;
            set_flag(&mut cfg, "init", path_str(init))?;
            set_flag(&mut cfg, "out", path_str(out))?;
            set_flag(&mut cfg, "unfrozen", unfrozen.then_some(true))?;
            set_flag(&mut cfg, "epochs", epochs)?;
            set_flag(&mut cfg, "aux_detached", aux_detached)?;
            set_flag(&mut cfg, "seed", seed)?;
            commands::train(&cfg)
        }
        Command::Eval {
            ckpt,
            data,
            split,
            out,
            threads,
            config,
        } => {
            let mut cfg = base(config::RunConfig::eval(), &config)?;
            set_flag(&mut cfg, "ckpt", path_str(ckpt))?;
            set_flag(&mut cfg, "data", path_str(data))?;
            set_flag(&mut cfg, "split", split)?;
            set_flag(&mut cfg, "out", path_str(out))?;
            set_flag(&mut cfg, "threads", threads)?;
            commands::eval(&mut cfg)
        }
        Command::Compare { runs } => commands::compare(&runs),
        Command::Probe { ckpt } => commands::probe(&ckpt),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
