use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use coevolve::model::RunConfig;
use coevolve::orchestrator::{emit_report, load_config, run, BackendChoice, Mode, RunOptions};

#[derive(Parser)]
#[command(
    name = "coevolve",
    version,
    about = "Agent and task-pool co-evolution on a toy tool environment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop and write logs, pool snapshots and a checkpoint.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModeArg::Coevolve)]
        mode: ModeArg,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = BackendArg::Scripted)]
        backend: BackendArg,
        /// Chat-completion endpoint for the remote backend.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value = "default")]
        model: String,
    },
    /// Rebuild the report bundle from a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Run directory whose success curve is reported as the baseline.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Check a config file and print it with defaults filled in.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Coevolve,
    GrpoStatic,
    RandomExplore,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Coevolve => Mode::Coevolve,
            ModeArg::GrpoStatic => Mode::GrpoStatic,
            ModeArg::RandomExplore => Mode::RandomExplore,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Scripted,
    Remote,
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            mode,
            seed,
            out,
            backend,
            endpoint,
            model,
        } => {
            let mut config = read_config(config.as_deref())?;
            if let Some(s) = seed {
                config.seed = s;
            }
            let backend = match (backend, endpoint) {
                (BackendArg::Scripted, _) => BackendChoice::Scripted,
                (BackendArg::Remote, Some(endpoint)) => BackendChoice::Remote { endpoint, model },
                (BackendArg::Remote, None) => bail!("--backend remote needs --endpoint"),
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mode = Mode::from(mode);
            log::info!(
                "running {mode} with seed {} into {}",
                config.seed,
                out.display()
            );
            let output = run(
                &config,
                &RunOptions {
                    mode,
                    out_dir: Some(out.clone()),
                    backend,
                },
            )?;
            let r = &output.report;
            for p in &r.success {
                println!("step {:>4}  held-out success {:.3}", p.step, p.value);
            }
            println!("final pool size {}", output.final_pool.tasks.len());
            println!("outputs in {}", out.display());
        }
        Command::Report { out, baseline } => {
            let base = baseline.map(|b| b.join("run.ndjson"));
            let report = emit_report(&out.join("run.ndjson"), base.as_deref())?;
            let path = out.join("report.json");
            std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            println!("{}", path.display());
        }
        Command::ValidateConfig { config } => {
            let c = read_config(Some(&config))?;
            print!("{}", toml::to_string(&c)?);
        }
    }
    Ok(())
}
