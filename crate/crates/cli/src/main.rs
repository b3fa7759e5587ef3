//! `metgan`: batch experiments for label-conditioned tumour inpainting.

mod commands;
mod fail;
mod manifest;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use crate::commands::Command;
use crate::manifest::LoadedManifest;
use crate::run::RunContext;

#[derive(Debug, Parser)]
#[command(name = "metgan", version, about = "Tumour inpainting experiments driven by TOML manifests")]
struct Cli {
    #[arg(value_enum)]
    command: Command,

    /// Experiment manifest (TOML).
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,

    /// Single-threaded kernels for bit-exact reruns.
    #[arg(long)]
    deterministic: bool,

    /// Output directory; overrides the manifest's `output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn execute(cli: &Cli) -> anyhow::Result<PathBuf> {
    let manifest = LoadedManifest::load(&cli.manifest)?;
    let mut ctx = RunContext::start(cli.command.name(), manifest, cli.out.as_deref(), cli.deterministic)?;
    cli.command.run(&mut ctx)?;
    ctx.finish()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        // read by the tensor backend when its thread pool starts
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(&cli) {
        Ok(out) => {
            log::info!("{} finished: {}", cli.command.name(), out.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(fail::exit_code(&err) as u8)
        }
    }
}
