use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcco::error::ErrorClass;
use dcco::harness::{self, ExperimentConfig};
use dcco::probe::{self, Protocol};
use dcco::{Error, Result};

const OUTPUT_ROOT_ENV: &str = "DCCO_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "dcco", version, about = "Federated dual-encoder pretraining simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder and run the configured probes.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (default: $DCCO_OUTPUT_ROOT/<name>, or runs/<name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a pretrained run with one probe protocol.
    Probe {
        /// Output directory of a finished `pretrain` run.
        run: PathBuf,
        #[arg(long, default_value = "linear", value_parser = parse_protocol)]
        protocol: Protocol,
        /// Probe overrides, e.g. `--set probe.labeled_fraction=0.1`.
        #[arg(long = "set", value_parser = parse_kv)]
        set: Vec<(String, String)>,
    },
    /// Compare randomized DCCO rounds against pooled centralized steps.
    VerifyEquivalence {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-8)]
        tolerance: f64,
        /// Also write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Convert a metrics stream into a CSV for plotting.
    ExportPlot { metrics: PathBuf, out: PathBuf },
    /// Summarize the class make-up of the configured partition.
    PartitionInspect {
        #[command(flatten)]
        config: ConfigArgs,
        /// Include per-client rows.
        #[arg(long)]
        clients: bool,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Named preset (see `--preset list`).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `--set round.lambda=5`; wins over the file.
    #[arg(long = "set", value_parser = parse_kv)]
    set: Vec<(String, String)>,
    /// Client-parallel workers (0 = all cores); wins over the file.
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut set = self.set.clone();
        if let Some(w) = self.workers {
            set.push(("workers".into(), w.to_string()));
        }
        match (&self.preset, &self.config) {
            (Some(p), _) => ExperimentConfig::from_preset(p, &set),
            (None, Some(path)) => ExperimentConfig::from_toml(&fs::read_to_string(path)?, &set),
            (None, None) => ExperimentConfig::from_toml("", &set),
        }
    }
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

fn parse_protocol(s: &str) -> std::result::Result<Protocol, String> {
    match s {
        "linear" => Ok(Protocol::Linear),
        "finetune" => Ok(Protocol::Finetune),
        "scratch" => Ok(Protocol::Scratch),
        _ => Err(format!("unknown protocol `{s}` (linear, finetune, scratch)")),
    }
}

fn default_out(name: &str) -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join(name)
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

/// Outcome of a command that ran but whose numeric check failed.
struct CheckFailed;

fn run(cli: Cli) -> Result<std::result::Result<(), CheckFailed>> {
    match cli.command {
        Command::Pretrain { config, out, resume } => {
            if config.preset.as_deref() == Some("list") {
                harness::PRESETS.iter().for_each(|p| println!("{p}"));
                return Ok(Ok(()));
            }
            let config = config.load()?;
            let out = out.unwrap_or_else(|| default_out(&config.name));
            let report = harness::run_experiment(&config, &out, resume)?;
            eprintln!("artifacts written to {}", out.display());
            print_json(&report);
        }
        Command::Probe { run, protocol, set } => {
            let text = fs::read_to_string(run.join("config.toml"))?;
            let config = ExperimentConfig::from_toml(&text, &set)?;
            let prepared = harness::prepare(&config)?;
            let model = harness::load_model(&run.join("model.params"))?;
            let pc = probe::ProbeConfig {
                protocol,
                seed: config.seed,
                ..config.probe.clone()
            };
            let report = probe::evaluate(&model, &config.encoder, &prepared.labeled, &prepared.test, &pc)?;
            print_json(&report);
        }
        Command::VerifyEquivalence {
            trials,
            seed,
            tolerance,
            report,
        } => {
            let r = harness::verify_equivalence(trials, seed, tolerance)?;
            for t in &r.trials {
                println!(
                    "trial {:>3}  K={} N_k={:?} d={}  max|diff|={:.3e}  {}",
                    t.trial,
                    t.clients,
                    t.counts,
                    t.projection_dims.last().copied().unwrap_or(0),
                    t.max_abs_diff,
                    if t.passed { "ok" } else { "FAIL" }
                );
            }
            println!("max|diff| = {:.3e} (tolerance {:e}): {}", r.max_abs_diff, r.tolerance, if r.passed { "PASS" } else { "FAIL" });
            if let Some(path) = report {
                write_json(&path, &r)?;
            }
            if !r.passed {
                return Ok(Err(CheckFailed));
            }
        }
        Command::ExportPlot { metrics, out } => {
            let n = harness::export_plot_data(&metrics, &out)?;
            eprintln!("wrote {n} rows to {}", out.display());
        }
        Command::PartitionInspect { config, clients } => {
            let config = config.load()?;
            let mut report = harness::partition_inspect(&config)?;
            if !clients {
                report.clients.clear();
            }
            print_json(&report);
        }
    }
    Ok(Ok(()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value).expect("serializable");
    fs::write(path, bytes)?;
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Numeric => 1,
        ErrorClass::Config => 2,
        ErrorClass::Io => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(CheckFailed)) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
