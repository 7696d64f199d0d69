use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use codistill::checkpoint;
use codistill::config::{RunConfig, OUTPUT_DIR_ENV};
use codistill::gradcheck::{self, TOLERANCE};
use codistill::run::{self, COMPARISON_TXT, METRICS_FILE};
use codistill::Result;

/// Cohort trainer with competitive distillation.
#[derive(Parser)]
#[command(name = "codistill", version, about)]
#[command(after_help = format!("The {OUTPUT_DIR_ENV} environment variable overrides output_dir.\n\
Exit codes: 0 ok, 2 config error, 3 data format error, 4 divergence, 5 gradcheck failure, 1 other."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured strategy; writes metrics.csv, report.json and checkpoint.ckpt.
    Train { config: PathBuf },
    /// Run every strategy listed under `compare` and tabulate accuracies.
    Compare { config: PathBuf },
    /// Check analytic loss gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a checkpoint file.
    Inspect { checkpoint: PathBuf },
}

fn train(path: PathBuf) -> Result<()> {
    let cfg = RunConfig::load(path)?;
    let report = run::run_to_dir(&cfg)?;
    for n in &report.nets {
        println!(
            "net {} {:<16} final {:6.2}%  best {:6.2}%  teacher {:>6}x",
            n.net, n.arch, n.final_accuracy, n.best_accuracy, n.times_teacher
        );
    }
    println!(
        "{}: {} iterations, {} teacher switches, {:.3} ms/step",
        report.strategy, report.iterations, report.teacher_switches, report.wall_clock_ms_per_step
    );
    println!("wrote {}", cfg.output_dir.join(METRICS_FILE).display());
    Ok(())
}

fn compare(path: PathBuf) -> Result<()> {
    let cfg = RunConfig::load(path)?;
    let cmp = run::compare(&cfg)?;
    print!("{}", run::comparison_text(&cmp.rows));
    println!("wrote {}", cfg.output_dir.join(COMPARISON_TXT).display());
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let report = gradcheck::run(seed)?;
    for c in &report.checks {
        let verdict = if c.max_rel_err < TOLERANCE { "ok" } else { "FAIL" };
        println!(
            "{}  max_rel_err {:.3e}  probes {}  skipped {}  {verdict}",
            c.kind, c.max_rel_err, c.probes, c.skipped
        );
    }
    report.into_result().map(|_| ())
}

fn inspect(path: PathBuf) -> Result<()> {
    let nets = checkpoint::read(&path)?;
    println!("{}: {} networks", path.display(), nets.len());
    for n in &nets {
        println!(
            "net {} {:<16} classes {}  params {}  feature_dim {}  checksum {:016x}",
            n.net_id,
            n.arch.label(),
            n.arch.num_classes,
            n.num_parameters(),
            n.arch.feature_dim(),
            n.checksum()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => train(config),
        Command::Compare { config } => compare(config),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Inspect { checkpoint } => inspect(checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
