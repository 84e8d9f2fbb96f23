use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fuseformer::selftest;
use fuseformer::train::TrainStage;
use fuseformer_cli::{
    cmd_bias, cmd_eval, cmd_fuse, cmd_sweep, cmd_train_ae, cmd_train_fusion, load_config, CliError, TrainSummary,
    EXIT_OK, EXIT_PROPERTY,
};

/// Visible/infrared image fusion: training, fusion, evaluation and
/// self-verification.
#[derive(Parser)]
#[command(name = "fuseformer", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train encoder and decoder as an autoencoder (stage 1).
    TrainAe {
        /// Training config (key = value); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output weight file, rewritten at every checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the fusion blocks on top of frozen stage-1 weights (stage 2).
    TrainFusion {
        /// Training config (key = value); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stage-1 weight file.
        #[arg(long)]
        stage1: PathBuf,
        /// Output weight file, rewritten at every checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Metric report (CSV) on the validation split.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fuse one visible/infrared pair.
    Fuse {
        /// Trained weight file.
        #[arg(long)]
        weights: PathBuf,
        /// Visible PGM.
        #[arg(long)]
        vis: PathBuf,
        /// Infrared PGM.
        #[arg(long)]
        ir: PathBuf,
        /// Fused PGM; `<stem>.metrics.csv`, `<stem>.diff_vis.pgm` and
        /// `<stem>.diff_ir.pgm` are written beside it.
        #[arg(long)]
        out: PathBuf,
        /// PGM maxval of the outputs (255 or 65535).
        #[arg(long, default_value_t = 255)]
        maxval: u32,
        /// Accepted for uniformity; fusion uses no randomness.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score fused images against their source pairs.
    Eval {
        /// Pair manifest: `<id> <visible> <infrared>` per line.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `<id>.pgm` for every manifest id.
        #[arg(long)]
        fused_dir: PathBuf,
        /// Report CSV.
        #[arg(long)]
        out: PathBuf,
        /// Histogram bins for entropy and MI.
        #[arg(long, default_value_t = fuseformer::metrics::DEFAULT_BINS)]
        bins: usize,
        /// Accepted for uniformity; evaluation uses no randomness.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare the dual-input fusion loss with a visible-only loss.
    BiasExp {
        /// Training config (key = value); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stage-1 weight file.
        #[arg(long)]
        stage1: PathBuf,
        /// Comma-separated split and initialization seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Comparison CSV.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed (data synthesis).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// One stage-2 run per value of a hyperparameter.
    Sweep {
        /// Training config (key = value); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stage-1 weight file.
        #[arg(long)]
        stage1: PathBuf,
        /// `layers`, `batch` or `lr`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Sweep CSV.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference checks of every operation and loss.
    Gradcheck,
    /// Gradient checks, metric oracles and the attention oracle.
    Selftest,
}

fn print_summary(s: &TrainSummary) {
    println!("epochs: {}", s.epochs);
    if let Some(l) = s.final_loss {
        println!("final loss: {l}");
    }
    if let Some(l) = s.validation_loss {
        println!("validation loss: {l}");
    }
}

fn report_checks(report: &selftest::SelftestReport) -> i32 {
    print!("{}", report.summary());
    println!("{} checks in {:.2} s", report.checks.len(), report.seconds);
    match report.first_failure() {
        Some(f) => {
            eprintln!("error: {} failed", f.name);
            EXIT_PROPERTY
        }
        None => EXIT_OK,
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::TrainAe { config, out, log, seed } => {
            let cfg = load_config(config.as_deref(), seed, TrainStage::Autoencoder)?;
            print_summary(&cmd_train_ae(&cfg, &out, log.as_deref())?);
        }
        Command::TrainFusion {
            config,
            stage1,
            out,
            log,
            report,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed, TrainStage::Fusion)?;
            print_summary(&cmd_train_fusion(&cfg, &stage1, &out, log.as_deref(), report.as_deref())?);
        }
        Command::Fuse {
            weights,
            vis,
            ir,
            out,
            maxval,
            seed: _,
        } => {
            let f = cmd_fuse(&weights, &vis, &ir, &out, maxval)?;
            let m = &f.metrics;
            println!(
                "entropy {:.6} scd {:.6} mi {:.6} ssim {:.6}",
                m.entropy, m.scd, m.mi, m.ssim
            );
        }
        Command::Eval {
            manifest,
            fused_dir,
            out,
            bins,
            seed: _,
        } => {
            let (outcome, code) = cmd_eval(&manifest, &fused_dir, &out, bins)?;
            for id in &outcome.missing {
                eprintln!("missing fused image: {}", fused_dir.join(format!("{id}.pgm")).display());
            }
            if outcome.report.rows.is_empty() {
                eprintln!("no pairs evaluated");
            }
            println!("{} pairs evaluated", outcome.report.rows.len());
            return Ok(code);
        }
        Command::BiasExp {
            config,
            stage1,
            seeds,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed, TrainStage::Fusion)?;
            let report = cmd_bias(&cfg, &stage1, &seeds, &out)?;
            print!("{}", report.to_csv());
            println!(
                "dual-input loss has higher MI(fused, infrared) on {} of {} seeds",
                report.wins(),
                report.rows.len()
            );
        }
        Command::Sweep {
            config,
            stage1,
            axis,
            values,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed, TrainStage::Fusion)?;
            print!("{}", cmd_sweep(&cfg, &stage1, &axis, &values, &out)?.to_csv());
        }
        Command::Gradcheck => {
            let start = std::time::Instant::now();
            let checks = selftest::gradient_checks();
            return Ok(report_checks(&selftest::SelftestReport {
                checks,
                seconds: start.elapsed().as_secs_f64(),
            }));
        }
        Command::Selftest => return Ok(report_checks(&selftest::run())),
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors share the config exit code
            return ExitCode::from(if e.use_stderr() { fuseformer_cli::EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
