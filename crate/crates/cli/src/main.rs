use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ceg::experiment::{
    ablation_variants, compare, read_results, run_sweep, strategy_variants, Manifest, Overrides, SweepOutcome,
    Variant,
};
use ceg::{generate, save_dataset, CegError, Dataset, DomainSpec, QueryStrategy};

#[derive(Parser)]
#[command(name = "ceg", version, about = "Budget-constrained active domain generalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-domain dataset as JSON lines.
    Generate {
        /// JSON domain spec; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every (strategy, target, budget, seed) cell of a manifest.
    Run(SweepArgs),
    /// Run full CEG and each ablation listed in the manifest.
    Ablate(SweepArgs),
    /// Pivot a results CSV into a strategies x targets table.
    Compare {
        results: PathBuf,
        /// Comparison CSV path; `comparison.csv` next to the results by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SweepArgs {
    manifest: PathBuf,
    #[arg(long, env = "CEG_SEED", hide_env_values = true)]
    env_seed: Option<String>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<QueryStrategy>>,
    #[arg(long, value_delimiter = ',')]
    targets: Option<Vec<usize>>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
}

fn load_manifest(args: &SweepArgs) -> Result<Manifest, CegError> {
    let mut manifest = Manifest::load(&args.manifest)?;
    let flags = Overrides {
        seeds: args.seeds.clone(),
        budgets: args.budgets.clone(),
        strategies: args.strategies.clone(),
        targets: args.targets.clone(),
        output_dir: args.output_dir.clone(),
        parallelism: args.parallelism,
    };
    manifest.apply(args.env_seed.as_deref(), &flags)?;
    Ok(manifest)
}

fn sweep(args: &SweepArgs, variants: fn(&Manifest) -> Vec<Variant>) -> ExitCode {
    let manifest = match load_manifest(args) {
        Ok(m) => m,
        Err(e) => return fail(&e),
    };
    match run_sweep(&manifest, &variants(&manifest)) {
        Ok(outcome) => report(&manifest, &outcome),
        Err(e) => fail(&e),
    }
}

fn report(manifest: &Manifest, outcome: &SweepOutcome) -> ExitCode {
    println!(
        "{} cells succeeded, {} failed; results in {}",
        outcome.rows.len(),
        outcome.failures.len(),
        manifest.output_dir.join("results.csv").display()
    );
    for (key, err) in &outcome.failures {
        eprintln!("cell {key} failed: {err}");
    }
    if !outcome.rows.is_empty() {
        if let Ok(table) = compare(&outcome.rows) {
            print!("{}", table.to_text());
        }
    }
    ExitCode::from(outcome.exit_code() as u8)
}

fn fail(e: &CegError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(1)
}

fn cmd_generate(spec: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), CegError> {
    let mut spec: DomainSpec = match spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| CegError::Config(format!("{}: {e}", p.display())))?,
        None => DomainSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let dataset: Dataset = generate(&spec)?;
    save_dataset(&dataset, out)?;
    println!("wrote {} samples to {}", dataset.samples.len(), out.display());
    Ok(())
}

fn cmd_compare(results: &Path, out: Option<&Path>) -> Result<(), CegError> {
    let table = compare(&read_results(results)?)?;
    let out = out.map_or_else(|| results.with_file_name("comparison.csv"), Path::to_path_buf);
    table.write_csv(&out)?;
    print!("{}", table.to_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate { spec, out, seed } => match cmd_generate(spec.as_deref(), out, *seed) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(&e),
        },
        Command::Run(args) => sweep(args, strategy_variants),
        Command::Ablate(args) => sweep(args, ablation_variants),
        Command::Compare { results, out } => match cmd_compare(results, out.as_deref()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(&e),
        },
    }
}
