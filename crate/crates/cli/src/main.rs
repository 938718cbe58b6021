use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ergodic_cli::config::RunConfig;
use ergodic_cli::record::write_json;
use ergodic_cli::{emit_report, run::run, CliError};

/// Solves ergodic problems with nonlinear boundary conditions and checks
/// their long-time behavior.
#[derive(Parser, Debug)]
#[command(name = "ergodic", version)]
struct Args {
    /// TOML run configuration.
    config: PathBuf,
    /// Where records and tables go (overrides `output.dir`; default `.`).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 picks automatically.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Suppress the report on stdout.
    #[arg(long)]
    quiet: bool,
}

fn execute(args: &Args, out_dir: &std::path::Path) -> Result<String, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let record = run(&cfg, out_dir)?;
    Ok(emit_report(&record))
}

fn main() -> ExitCode {
    let args = Args::parse();
    if args.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(args.threads).build_global() {
            eprintln!("warning: cannot configure thread pool: {e}");
        }
    }
    // the output directory may come from the config; peek without failing
    let out_dir = args
        .output_dir
        .clone()
        .or_else(|| RunConfig::load(&args.config).ok().and_then(|c| c.output.dir))
        .unwrap_or_else(|| PathBuf::from("."));
    match execute(&args, &out_dir) {
        Ok(report) => {
            if !args.quiet {
                print!("{report}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::ConfigInvalid(v) = &e {
                for line in v {
                    eprintln!("  - {line}");
                }
            }
            let _ = std::fs::create_dir_all(&out_dir);
            if let Err(w) = write_json(&out_dir.join("error.record"), &e.record()) {
                eprintln!("cannot write error record: {w}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
