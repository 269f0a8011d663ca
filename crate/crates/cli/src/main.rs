//! `sdif`: train, evaluate and ablate SDIF forgery detectors.
//!
//! Failures exit nonzero and print one JSON line `{"kind": …, "message": …}`
//! to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdif_core::config::Manifest;
use sdif_core::pipeline;
use sdif_core::Error;

#[derive(Parser, Debug)]
#[command(name = "sdif", version, about = "Domain-generalized face-forgery detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment manifest (TOML). Defaults plus `SDIF_*` overrides when omitted.
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Run a single seed instead of the manifest's seed list.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory; overrides the manifest's `out`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Require bit-reproducible execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the manifest's variant once per seed.
    Train(Common),
    /// Score a checkpoint on the validation and test splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Train the baseline, +DDA, +DDA+DFE and full ladder.
    Ablate(Common),
    /// Train the full model at every λ of the sweep grid.
    SweepLambda(Common),
    /// Write the synthetic dataset as PNG files plus manifest.csv.
    GenData(Common),
    /// Rebuild and dump the style bank a checkpoint trains against.
    BankInspect {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

struct Failure {
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn resolve(common: &Common) -> Result<(Manifest, PathBuf), Failure> {
    let mut m = match &common.manifest {
        Some(path) => Manifest::load(path)?,
        None => Manifest::from_env()?,
    };
    if let Some(seed) = common.seed {
        m.seeds = vec![seed];
    }
    if common.deterministic {
        m.deterministic = true;
    }
    let out = common.out.clone().unwrap_or_else(|| m.out.clone());
    std::fs::create_dir_all(&out).map_err(Error::from)?;
    Ok((m, out))
}

fn report(kind: &str, out: &Path) {
    log::info!("{kind} finished; results in {}", out.display());
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train(c) => {
            let (m, out) = resolve(&c)?;
            for o in pipeline::cmd_train(&m, &out)? {
                if let Some(u) = o.unseen() {
                    log::info!("seed {}: unseen auc {:.4}", o.best.meta.seed, u.auc);
                }
            }
            report("train", &out);
        }
        Command::Eval { common, checkpoint } => {
            let (m, out) = resolve(&common)?;
            pipeline::cmd_eval(&m, &checkpoint, &out)?;
            report("eval", &out);
        }
        Command::Ablate(c) => {
            let (m, out) = resolve(&c)?;
            for row in pipeline::cmd_ablate(&m, &out)?.aggregate {
                log::info!("{}: auc {:.4} ± {:.4}", row.config, row.auc_mean, row.auc_std);
            }
            report("ablate", &out);
        }
        Command::SweepLambda(c) => {
            let (m, out) = resolve(&c)?;
            pipeline::cmd_sweep_lambda(&m, &out)?;
            report("sweep-lambda", &out);
        }
        Command::GenData(c) => {
            let (m, out) = resolve(&c)?;
            let n = pipeline::cmd_gen_data(&m, m.seeds[0], &out)?;
            log::info!("wrote {n} images");
            report("gen-data", &out);
        }
        Command::BankInspect { common, checkpoint } => {
            let (m, out) = resolve(&common)?;
            pipeline::cmd_bank_inspect(&m, &checkpoint, &out)?;
            report("bank-inspect", &out);
        }
    }
    Ok(())
}

fn fail(f: Failure, code: u8) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "kind": f.kind, "message": f.message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string().lines().next().unwrap_or_default().to_string();
            return fail(Failure { kind: "usage", message }, 2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f, 1),
    }
}
