use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde_json::Value;

use ovxd_core::gradsuite::{self, DEFAULT_SEEDS};
use ovxd_core::harness::{run_ablation, run_dir, run_eval, run_training};
use ovxd_core::{Error, OpKind, RunConfig};

const EXIT_CONFIG: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "ovxd", version, about = "Adapter fine-tuning on a synthetic open-vocabulary detection benchmark")]
struct Cli {
    /// Root directory for run outputs.
    #[arg(long, env = "OVXD_OUT", default_value = ".", global = true)]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics, benchmark and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Evaluate a checkpoint on a stored benchmark.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bench: PathBuf,
        /// CSV to append to; defaults to eval.csv next to the checkpoint.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of every op and block.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: u64,
        /// Corrupt the backward rule of one op (testing the checker).
        #[arg(long, hide = true, value_name = "OP")]
        inject_fault: Option<String>,
    },
    /// Train one model per sweep cell and tabulate final accuracies.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `knob` or `knob=v1,v2,...`; knobs: adapters, adapter.ratio_xsa,
        /// adapter.ratio_xaa, adapter.ratio_xia, adapter.ratio_text,
        /// adapter.scale_s, train.unfrozen_tail.
        #[arg(long)]
        sweep: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

fn load_config(path: &Path, sets: &[String]) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::load(path)?;
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        cfg = cfg.with_override(k.trim(), value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(out: &Path, config: &Path, sets: &[String]) -> Result<(), Error> {
    let cfg = load_config(config, sets)?;
    let report = run_training(&cfg, out)?;
    let first = report.rows.first().map_or(f64::NAN, |r| r.loss);
    let last = report.rows.last().map_or(f64::NAN, |r| r.loss);
    let m = &report.final_metrics;
    println!("loss {first:.6} -> {last:.6}");
    println!("acc_base {:.4} acc_novel {:.4} acc_all {:.4}", m.acc_base, m.acc_novel, m.acc_all);
    println!("outputs in {}", report.dir.display());
    Ok(())
}

fn eval(ckpt: &Path, bench: &Path, csv: Option<PathBuf>) -> Result<(), Error> {
    let csv = csv.unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("eval.csv"));
    let (m, row) = run_eval(ckpt, bench, Some(&csv))?;
    println!("acc_base {:.4} acc_novel {:.4} acc_all {:.4} (n_base {}, n_novel {})", m.acc_base, m.acc_novel, m.acc_all, m.n_base, m.n_novel);
    println!("{}", row.csv());
    Ok(())
}

fn gradcheck(seeds: u64, fault: Option<String>) -> Result<bool, Error> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    let fault = fault
        .map(|name| OpKind::from_name(&name).ok_or_else(|| Error::Config(format!("unknown op {name:?}"))))
        .transpose()?;
    let report = gradsuite::run_suite(seeds, fault);
    print!("{}", report.render());
    Ok(report.passed())
}

fn ablate(out: &Path, config: &Path, sweep: &str, sets: &[String]) -> Result<(), Error> {
    let cfg = load_config(config, sets)?;
    let table = run_ablation(&cfg, sweep)?;
    let csv = table.to_csv();
    let dir = run_dir(&cfg, out);
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("ablation_{}.csv", table.knob.replace('.', "_")));
    fs::write(&path, &csv)?;
    print!("{csv}");
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_CONFIG),
            };
        }
    };
    let result = match cli.cmd {
        Cmd::Train { config, sets } => train(&cli.out, &config, &sets),
        Cmd::Eval { ckpt, bench, csv } => eval(&ckpt, &bench, csv),
        Cmd::Gradcheck { seeds, inject_fault } => match gradcheck(seeds, inject_fault) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_VERIFY),
            Err(e) => Err(e),
        },
        Cmd::Ablate { config, sweep, sets } => ablate(&cli.out, &config, &sweep, &sets),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
