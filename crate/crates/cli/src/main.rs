use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splitgnn_core::experiment::{emit_report, run_experiment, run_grid, DataSource, ExperimentConfig, ExperimentOutput, Grid};
use splitgnn_core::graph::{generate_synthetic, write_dataset, SyntheticSpec};
use splitgnn_core::privacy::transcript_audit;
use splitgnn_core::transcript::Transcript;
use splitgnn_core::Error;

#[derive(Parser)]
#[command(name = "splitgnn", version, about = "Split-learning GNN experiments over vertically partitioned graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config (or a predefined grid around it) and write CSV reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Comma-separated seeds replacing the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Homomorphically encrypted aggregation.
        #[arg(long)]
        secure: bool,
        /// table1, table2, table3 or cost.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Check a transcript CSV for privacy findings.
    Audit {
        #[arg(long)]
        transcript: PathBuf,
    },
    /// Write a synthetic dataset in the TSV directory layout.
    GenSynthetic {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(Error),
    Runtime(Error),
    Findings(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) => Failure::Config(e),
            e => Failure::Runtime(e),
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| {
        Failure::Config(Error::Config(format!("cannot read {}: {e}", path.display())))
    })
}

fn load_config(path: &Path, seeds: Option<Vec<u64>>, secure: bool) -> Result<ExperimentConfig, Failure> {
    let mut config = ExperimentConfig::from_json(&read_text(path)?).map_err(Failure::Config)?;
    if let Some(seeds) = seeds {
        config.seeds = seeds;
    }
    config.session.secure |= secure;
    // Dataset paths are relative to the config file.
    if let DataSource::Path(p) = &mut config.dataset {
        if p.is_relative() {
            *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
        }
    }
    config.validate().map_err(Failure::Config)?;
    Ok(config)
}

fn write_transcripts(dir: &Path, out: &ExperimentOutput) -> Result<(), Error> {
    if out.transcripts.is_empty() {
        return Ok(());
    }
    let dir = dir.join("transcripts");
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    for (digest, seed, t) in &out.transcripts {
        t.write_csv(&dir.join(format!("{digest}_seed{seed}.csv")))?;
    }
    Ok(())
}

/// Mean final-epoch test micro-F1 per config.
fn print_summary(out: &ExperimentOutput) {
    let mut last: BTreeMap<(String, u64), usize> = BTreeMap::new();
    for (k, r) in out.rows.iter().enumerate() {
        last.insert((r.digest.clone(), r.seed), k);
    }
    let mut groups: BTreeMap<String, (String, Vec<f64>)> = BTreeMap::new();
    for &k in last.values() {
        let r = &out.rows[k];
        let label = format!("{} {} I={} ratio={}", r.model, r.strategy, r.participants, r.ratio);
        groups.entry(r.digest.clone()).or_insert_with(|| (label, Vec::new())).1.push(r.test_f1);
    }
    let mut lines: Vec<(String, String)> = groups
        .into_iter()
        .map(|(digest, (label, f1))| {
            let mean = f1.iter().sum::<f64>() / f1.len() as f64;
            (label.clone(), format!("{digest}  {label:<40} seeds={} test_f1={mean:.4}", f1.len()))
        })
        .collect();
    lines.sort();
    for (_, line) in lines {
        println!("{line}");
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            secure,
            grid,
        } => {
            let config = load_config(&config, seeds, secure)?;
            let grid = grid.map(|g| g.parse::<Grid>()).transpose().map_err(Failure::Config)?;
            let output = match grid {
                Some(g) => run_grid(&config, g)?,
                None => run_experiment(&config)?,
            };
            emit_report(&out, &output.rows, &output.cost, &output.timing)?;
            write_transcripts(&out, &output)?;
            print_summary(&output);
            log::info!("reports written to {}", out.display());
            Ok(())
        }
        Command::Audit { transcript } => {
            let t = Transcript::read_csv(&transcript)?;
            let report = transcript_audit(&t);
            for f in &report.findings {
                match f.record {
                    Some(k) => println!("round {} record {k}: {}", f.round, f.message),
                    None => println!("round {}: {}", f.round, f.message),
                }
            }
            if report.is_clean() {
                println!("{} records, no findings", t.len());
                Ok(())
            } else {
                Err(Failure::Findings(report.findings.len()))
            }
        }
        Command::GenSynthetic { spec, out } => {
            let spec: SyntheticSpec = serde_json::from_str(&read_text(&spec)?)
                .map_err(|e| Failure::Config(Error::Config(e.to_string())))?;
            let bundle = generate_synthetic(&spec)?;
            write_dataset(&bundle, &out)?;
            println!(
                "{} nodes, {} edges, {} relations written to {}",
                bundle.graph.num_nodes(),
                bundle.graph.num_edges(),
                bundle.graph.relations.len(),
                out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Findings(n)) => {
            eprintln!("{n} audit finding(s)");
            ExitCode::from(3)
        }
    }
}
