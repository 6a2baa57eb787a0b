use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use etalab_cli::config::Mode;
use etalab_cli::run::{provenance, run_file, version_line};

#[derive(Parser, Debug)]
#[command(
    name = "etalab",
    about = "Eigenvalues of weighted Laplacians and their variation under metric and domain perturbations",
    disable_version_flag = true
)]
struct Cli {
    /// Experiment to run
    #[arg(value_enum, required_unless_present_any = ["version", "provenance"])]
    mode: Option<Mode>,

    /// JSON experiment file
    #[arg(long, required_unless_present_any = ["version", "provenance"])]
    config: Option<PathBuf>,

    /// Output directory, created if missing
    #[arg(long, required_unless_present_any = ["version", "provenance"])]
    out: Option<PathBuf>,

    /// Suppress the summary on stdout
    #[arg(long)]
    quiet: bool,

    /// Worker threads (defaults to all cores)
    #[arg(long)]
    threads: Option<usize>,

    /// Print version and build hash
    #[arg(long, short = 'V')]
    version: bool,

    /// Print version, build hash and numerical defaults
    #[arg(long)]
    provenance: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if cli.version {
        println!("{} ({})", version_line(), etalab_cli::run::BUILD_HASH);
        return ExitCode::SUCCESS;
    }
    if cli.provenance {
        print!("{}", provenance());
        return ExitCode::SUCCESS;
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let (mode, config, out) = (cli.mode.unwrap(), cli.config.unwrap(), cli.out.unwrap());
    match run_file(mode, &config, &out) {
        Ok(outcome) => {
            if !cli.quiet {
                for line in &outcome.summary {
                    println!("{line}");
                }
                for path in &outcome.artifacts {
                    println!("wrote {}", path.display());
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
