//! `catmix` — k-modes clustering and latent class analysis for binary
//! categorical data.
//!
//! Exit codes: 0 success, 1 numerical/estimation failure, 2 input error.
//! On failure a machine-readable error JSON is printed to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use catmix::dataset::Schema;
use catmix::lca::StartPolicy;
use catmix::report::{run, Command, OutputFormat, RunConfig};

#[derive(Parser)]
#[command(
    name = "catmix",
    version,
    about = "K-modes clustering and latent class analysis for binary categorical data",
    after_help = "Column roles come from header prefixes (i: indicator, c: covariate, \
                  y: outcome) unless --indicators/--covariates/--outcomes name them \
                  explicitly. The default output directory is $CATMIX_OUT_DIR or \
                  ./catmix-out."
)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Args)]
struct IoArgs {
    /// Input data CSV (UTF-8, header row, comma-separated).
    #[arg(long, short = 'i')]
    input: Option<PathBuf>,

    /// Indicator column names (comma-separated). Overrides prefix detection.
    #[arg(long, value_delimiter = ',')]
    indicators: Vec<String>,

    /// Covariate column names (comma-separated).
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,

    /// Outcome column names (comma-separated).
    #[arg(long, value_delimiter = ',')]
    outcomes: Vec<String>,

    /// Output directory.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,

    /// Table formats to write: any of text,csv,json.
    #[arg(long, value_delimiter = ',', default_values_t = ["text".to_string(), "csv".to_string(), "json".to_string()])]
    formats: Vec<String>,
}

impl IoArgs {
    fn schema(&self) -> Schema {
        if self.indicators.is_empty() && self.covariates.is_empty() && self.outcomes.is_empty() {
            Schema::HeaderPrefixes
        } else {
            Schema::Explicit {
                indicators: self.indicators.clone(),
                covariates: self.covariates.clone(),
                outcomes: self.outcomes.clone(),
            }
        }
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| {
            std::env::var_os("CATMIX_OUT_DIR")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("catmix-out"))
        })
    }

    fn formats(&self) -> Result<Vec<OutputFormat>, String> {
        self.formats
            .iter()
            .map(|f| match f.as_str() {
                "text" => Ok(OutputFormat::Text),
                "csv" => Ok(OutputFormat::Csv),
                "json" => Ok(OutputFormat::Json),
                other => Err(format!("unknown format `{other}` (use text, csv, json)")),
            })
            .collect()
    }
}

fn parse_starts(s: &str) -> Result<StartPolicy, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err("expected INITIAL,FINAL (e.g. 200,100)".into());
    }
    let n_initial: usize = parts[0].trim().parse().map_err(|_| "bad initial count")?;
    let n_final: usize = parts[1].trim().parse().map_err(|_| "bad final count")?;
    StartPolicy::new(n_initial, n_final).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum CliCommand {
    /// Endorsement proportions and selection-count summary.
    Describe {
        #[command(flatten)]
        io: IoArgs,
    },
    /// Fit k-modes with multiple random restarts.
    FitKmodes {
        #[command(flatten)]
        io: IoArgs,
        /// Cluster count.
        #[arg(long, short = 'k')]
        k: usize,
        /// Independent random restarts.
        #[arg(long, default_value_t = 50)]
        restarts: usize,
        /// Iteration cap per restart.
        #[arg(long, default_value_t = 300)]
        max_iter: usize,
        /// RNG seed (results are reproducible given the seed).
        #[arg(long)]
        seed: u64,
    },
    /// Fit a range of k and emit the elbow-plot table.
    SweepK {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value_t = 1)]
        k_min: usize,
        #[arg(long, default_value_t = 10)]
        k_max: usize,
        #[arg(long, default_value_t = 50)]
        restarts: usize,
        #[arg(long, default_value_t = 300)]
        max_iter: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Fit a latent class model with two-stage random starts.
    FitLca {
        #[command(flatten)]
        io: IoArgs,
        /// Number of latent classes K.
        #[arg(long, short = 'c')]
        classes: usize,
        /// Start policy INITIAL,FINAL.
        #[arg(long, value_parser = parse_starts, default_value = "200,100")]
        starts: StartPolicy,
        /// Absolute log-likelihood convergence tolerance.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
        /// Also write the full N x K posterior matrix.
        #[arg(long)]
        posteriors: bool,
        #[arg(long)]
        seed: u64,
    },
    /// Simulate observations from a latent class model.
    Simulate {
        /// JSON file with {"pi": [...], "rho": [[...], ...]}.
        #[arg(long)]
        params: PathBuf,
        /// Observations to draw.
        #[arg(long, short = 'n')]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Output directory.
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
    },
    /// Fit K = 1..max and tabulate information criteria (and BLRT).
    Enumerate {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value_t = 7)]
        max_classes: usize,
        #[arg(long, value_parser = parse_starts, default_value = "200,100")]
        starts: StartPolicy,
        /// Run the bootstrapped likelihood ratio test per K.
        #[arg(long)]
        blrt: bool,
        /// Bootstrap replicates for the BLRT.
        #[arg(long, default_value_t = 100)]
        bootstrap: usize,
        #[arg(long)]
        seed: u64,
    },
    /// Classification diagnostics for a saved fit.
    Diagnose {
        #[command(flatten)]
        io: IoArgs,
        /// lca_fit.json written by fit-lca.
        #[arg(long)]
        fit: PathBuf,
        /// Bootstrap replicates for class-proportion intervals (0 = skip).
        #[arg(long, default_value_t = 200)]
        bootstrap: usize,
        /// Confidence level for the intervals.
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long)]
        seed: u64,
    },
    /// ML three-step covariate / distal-outcome model for a saved fit.
    ThreeStep {
        #[command(flatten)]
        io: IoArgs,
        /// lca_fit.json written by fit-lca.
        #[arg(long)]
        fit: PathBuf,
        /// Binary covariate column.
        #[arg(long)]
        covariate: String,
        /// Real-valued outcome column.
        #[arg(long)]
        outcome: String,
    },
    /// Cross-tabulate two assignment files.
    Compare {
        /// First assignment CSV (rows of the table).
        #[arg(long)]
        a: PathBuf,
        /// Second assignment CSV (columns of the table).
        #[arg(long)]
        b: PathBuf,
        /// Condition percentages on rows instead of columns.
        #[arg(long)]
        row_pct: bool,
        #[arg(long, short = 'o')]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = ["text".to_string(), "csv".to_string(), "json".to_string()])]
        formats: Vec<String>,
    },
    /// Full pipeline: describe, k-sweep, k-modes, enumeration,
    /// diagnostics, three-step, and the cluster-vs-class crosstab.
    Replicate {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value_t = 10)]
        k_max: usize,
        #[arg(long, default_value_t = 7)]
        max_classes: usize,
        /// Class count carried into diagnostics and the three-step model.
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Cluster count for the main k-modes solution.
        #[arg(long, default_value_t = 2)]
        clusters: usize,
        #[arg(long, value_parser = parse_starts, default_value = "200,100")]
        starts: StartPolicy,
        #[arg(long)]
        blrt: bool,
        /// Bootstrap replicates for the BLRT when --blrt is given.
        #[arg(long, default_value_t = 100)]
        blrt_bootstrap: usize,
        /// Bootstrap replicates for class-proportion intervals.
        #[arg(long, default_value_t = 200)]
        bootstrap: usize,
        /// Covariate for the three-step model (default: first covariate column).
        #[arg(long)]
        covariate: Option<String>,
        /// Outcome for the three-step model (default: first outcome column).
        #[arg(long)]
        outcome: Option<String>,
        #[arg(long)]
        seed: u64,
    },
}

fn build_config(cli: Cli) -> Result<RunConfig, String> {
    let cfg = match cli.command {
        CliCommand::Describe { io } => RunConfig {
            command: Command::Describe,
            input: io.input.clone(),
            schema: io.schema(),
            seed: 0,
            out_dir: io.out_dir(),
            formats: io.formats()?,
        },
        CliCommand::FitKmodes {
            io,
            k,
            restarts,
            max_iter,
            seed,
        } => RunConfig {
            command: Command::FitKmodes {
                k,
                restarts,
                max_iter,
            },
            input: io.input.clone(),
            schema: io.schema(),
            seed,
            out_dir: io.out_dir(),
            formats: io.formats()?,
        },
        CliCommand::SweepK {
            io,
            k_min,
            k_max,
            restarts,
            max_iter,
            seed,
        } => RunConfig {
            command: Command::SweepK {
                k_min,
                k_max,
                restarts,
                max_iter,
            },
            input: io.input.clone(),
            schema: io.schema(),
            seed,
            out_dir: io.out_dir(),
            formats: io.formats()?,
        },
        CliCommand::FitLca {
            io,
            classes,
            starts,
            tol,
            posteriors,
            seed,
        } => RunConfig {
            command: Command::FitLca {
                classes,
                starts,
                tol,
                write_posteriors: posteriors,
            },
            input: io.input.clone(),
            schema: io.schema(),
            seed,
            out_dir: io.out_dir(),
            formats: io.formats()?,
        },
        CliCommand::Simulate {
            params,
            n,
            seed,
            out,
        } => RunConfig {
            command: Command::Simulate {
                params_file: params,
                n,
            },
            input: None,
            schema: Schema::HeaderPrefixes,
            seed,
            out_dir: out.unwrap_or_else(|| {
                std::env::var_os("CATMIX_OUT_DIR")
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("catmix-out"))
            }),
            formats: vec![OutputFormat::Text, OutputFormat::Csv, OutputFormat::Json],
        },
        CliCommand::Enumerate {
            io,
            max_classes,
            starts,
            blrt,
            bootstrap,
            seed,
        } => RunConfig {
            command: Command::Enumerate {
                max_classes,
                starts,
                blrt: blrt.then_some(bootstrap),
            },
            input: io.input.clone(),
            schema: io.schema(),
            seed,
            out_dir: io.out_dir(),
            formats: io.formats()?,
        },
        CliCommand::Diagnose {
            io,
            fit,
            bootstrap,
            level,
            seed,
        } => RunConfig {
            command: Command::Diagnose {
                fit_file: fit,
                bootstrap,
                level,
            },
            input: io.input.clone(),
            schema: io.schema(),
            seed,
            out_dir: io.out_dir(),
            formats: io.formats()?,
        },
        CliCommand::ThreeStep {
            io,
            fit,
            covariate,
            outcome,
        } => RunConfig {
            command: Command::ThreeStep {
                fit_file: fit,
                covariate,
                outcome,
            },
            input: io.input.clone(),
            schema: io.schema(),
            seed: 0,
            out_dir: io.out_dir(),
            formats: io.formats()?,
        },
        CliCommand::Compare {
            a,
            b,
            row_pct,
            out,
            formats,
        } => {
            let io = IoArgs {
                input: None,
                indicators: vec![],
                covariates: vec![],
                outcomes: vec![],
                out,
                formats,
            };
            RunConfig {
                command: Command::Compare {
                    a,
                    b,
                    column_pct: !row_pct,
                },
                input: None,
                schema: Schema::HeaderPrefixes,
                seed: 0,
                out_dir: io.out_dir(),
                formats: io.formats()?,
            }
        }
        CliCommand::Replicate {
            io,
            k_max,
            max_classes,
            classes,
            clusters,
            starts,
            blrt,
            blrt_bootstrap,
            bootstrap,
            covariate,
            outcome,
            seed,
        } => RunConfig {
            command: Command::Replicate {
                k_max,
                max_classes,
                classes,
                clusters,
                starts,
                blrt: blrt.then_some(blrt_bootstrap),
                bootstrap,
                covariate,
                outcome,
            },
            input: io.input.clone(),
            schema: io.schema(),
            seed,
            out_dir: io.out_dir(),
            formats: io.formats()?,
        },
    };
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(cli) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!(
                "{}",
                serde_json::json!({"error": {"message": msg, "kind": "input"}})
            );
            return ExitCode::from(2);
        }
    };

    match run(&cfg) {
        Ok(summary) => {
            for note in &summary.notes {
                println!("{note}");
            }
            println!(
                "wrote {} file(s) to {}",
                summary.files.len(),
                cfg.out_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(err) => {
            let kind = if err.is_input_error() { "input" } else { "numerical" };
            eprintln!(
                "{}",
                serde_json::json!({"error": {"message": err.to_string(), "kind": kind}})
            );
            ExitCode::from(if err.is_input_error() { 2 } else { 1 })
        }
    }
}
