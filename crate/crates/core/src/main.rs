use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use darl::blockmdp::DomainSplit;
use darl::harness::{emit_plots, run_diag, run_eval, run_train, ExperimentConfig};
use darl::DarlError;

#[derive(Parser)]
#[command(name = "darl", version, about = "Domain-adversarial SAC on a pixel block MDP")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run and write metrics, summary, and a final checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot eval-mode returns of a checkpoint, printed as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        domains: PathBuf,
        #[arg(long)]
        episodes: usize,
    },
    /// Feature embedding, distances, and probe accuracy for a checkpoint.
    Diag {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learning curves across run directories.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> darl::Result<()> {
    match cli.cmd {
        Cmd::Train { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let summary = run_train(&cfg, seed, &out)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Cmd::Eval { ckpt, domains, episodes } => {
            let split = DomainSplit::load(&domains)?;
            println!("{}", serde_json::to_string(&run_eval(&ckpt, &split, episodes)?)?);
        }
        Cmd::Diag { ckpt, out } => {
            println!("{}", serde_json::to_string(&run_diag(&ckpt, &out)?)?);
        }
        Cmd::Plot { runs, out } => emit_plots(&runs, &out)?,
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error kind=usage msg={:?}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} msg={:?}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(match e {
                DarlError::Config(_) => 3,
                DarlError::Io(_) => 4,
                DarlError::NonFinite { .. } => 5,
                _ => 1,
            })
        }
    }
}
