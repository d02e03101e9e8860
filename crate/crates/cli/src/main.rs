use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use missbench_core::bench::{
    parse_seed_list, read_results_csv, run_experiment, summarize, write_summary, ExperimentConfig,
};
use missbench_core::oracles::oracle_agreement;
use missbench_core::synth::{CorrLevel, DataSpec, FstarKind, MechanismKind};
use missbench_core::theory::{run_verification, VerificationConfig};

#[derive(Parser)]
#[command(name = "missbench", version, about = "Regression with missing values: benchmark and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Dimension 50, 100k training rows, 10 seeds.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Summary table and boxplots from a results CSV.
    Summarize {
        csv: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Numeric checks of the curvature bounds and counterexamples.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "verify")]
        out: PathBuf,
    },
    /// Compare the closed-form oracles with Monte-Carlo estimates.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 10)]
        d: usize,
        #[arg(long, default_value_t = 20_000)]
        mc_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(config: PathBuf, out: Option<PathBuf>, jobs: usize, paper_scale: bool) -> anyhow::Result<()> {
    let mut cfg = ExperimentConfig::from_path(&config).with_context(|| format!("loading {}", config.display()))?;
    if paper_scale {
        cfg = cfg.paper_scale();
    }
    if let Ok(seeds) = std::env::var("MISSBENCH_SEED") {
        cfg.seeds = parse_seed_list(&seeds)?;
    }
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    let total = cfg.settings().len() * cfg.seeds.len() * cfg.methods.len();
    let done = AtomicUsize::new(0);
    let output = run_experiment(&cfg, jobs, &|r| {
        let k = done.fetch_add(1, Ordering::Relaxed) + 1;
        eprintln!(
            "[{k}/{total}] {} {} seed {}: {} ({:.1}s)",
            r.setting(),
            r.method,
            r.seed,
            r.delta.map_or(r.status.clone(), |d| format!("delta {d:.4}")),
            r.wall_time
        );
    })?;
    println!("{}", summarize(&output.records).to_text());
    println!(
        "wrote {} ({} rows, {} failed, {:.0}s)",
        output.results_csv.display(),
        output.metadata.tasks,
        output.metadata.failed,
        output.metadata.wall_time
    );
    Ok(())
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            jobs,
            paper_scale,
        } => run(config, out, jobs, paper_scale),
        Command::Summarize { csv, svg } => {
            let records = read_results_csv(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let summary = summarize(&records);
            let dir = csv.parent().map(PathBuf::from).unwrap_or_default();
            let svg = svg.unwrap_or_else(|| dir.join("svg"));
            let panels = write_summary(&summary, &dir, &svg)?;
            print!("{}", summary.to_text());
            println!("{} panels in {}", panels.len(), svg.display());
            Ok(())
        }
        Command::Verify { seed, out } => {
            let report = run_verification(seed, &VerificationConfig::default())?;
            report.write(&out)?;
            print!("{}", report.to_text());
            if !report.passed() {
                bail!("verification failed");
            }
            Ok(())
        }
        Command::OracleCheck {
            probes,
            d,
            mc_samples,
            seed,
        } => {
            let mut ok = true;
            println!("{:<7} {:<9} {:>7} {:>7}", "fstar", "mechanism", "bayes", "ci");
            for &fstar in FstarKind::ALL {
                for &mechanism in MechanismKind::ALL {
                    let spec = DataSpec::new(d, CorrLevel::High, fstar, mechanism, seed);
                    let r = oracle_agreement(&spec, probes, mc_samples)?;
                    println!(
                        "{:<7} {:<9} {:>7.3} {:>7.3}",
                        fstar.as_str(),
                        mechanism.as_str(),
                        r.bayes_fraction(),
                        r.ci_fraction()
                    );
                    ok &= r.bayes_fraction() >= 0.95 && r.ci_fraction() >= 0.95;
                }
            }
            if !ok {
                bail!("agreement below 95% in some setting");
            }
            Ok(())
        }
    }
}
