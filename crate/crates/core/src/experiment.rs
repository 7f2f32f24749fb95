//! Manifest-driven sweeps over (strategy, target, budget, seed) cells,
//! aggregation and comparison tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, leave_one_domain_out, load_dataset, DomainSpec, GeneratedDataset};
use crate::error::{CegError, Result};
use crate::trainer::{ablation_label, run_ablation, run_strategy, Ablation, QueryStrategy, TrainConfig};

pub const RESULTS_HEADER: [&str; 6] = ["dataset", "target", "strategy", "budget", "seed", "accuracy"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Path(PathBuf),
    Generate(DomainSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Targets {
    All(AllTag),
    List(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllTag {
    All,
}

impl Default for Targets {
    fn default() -> Self {
        Targets::All(AllTag::All)
    }
}

impl Targets {
    pub fn resolve(&self, num_domains: usize) -> Vec<usize> {
        match self {
            Targets::All(_) => (0..num_domains).collect(),
            Targets::List(v) => v.clone(),
        }
    }
}

fn default_name() -> String {
    "synthetic".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub strategies: Vec<QueryStrategy>,
    /// Budgets as fractions of the source pool size.
    pub budgets: Vec<f64>,
    #[serde(default)]
    pub targets: Targets,
    pub seeds: Vec<u64>,
    /// Overrides of the default training configuration. `budget` and `seed`
    /// are set per cell.
    #[serde(default)]
    pub config: TrainConfig,
    /// Component sets for the ablation suite.
    #[serde(default)]
    pub ablations: Vec<Ablation>,
    pub output_dir: PathBuf,
    /// Worker threads; all cores when absent.
    #[serde(default)]
    pub parallelism: Option<usize>,
}

/// Command-line values that replace manifest fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Option<Vec<u64>>,
    pub budgets: Option<Vec<f64>>,
    pub strategies: Option<Vec<QueryStrategy>>,
    pub targets: Option<Vec<usize>>,
    pub output_dir: Option<PathBuf>,
    pub parallelism: Option<usize>,
}

impl Manifest {
    /// Reads a manifest; relative dataset and output paths resolve against
    /// the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CegError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DatasetSource::Path(p) = &mut m.dataset {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if m.output_dir.is_relative() {
            m.output_dir = base.join(&m.output_dir);
        }
        Ok(m)
    }

    /// Applies `CEG_SEED` (a single seed) and then the flag overrides.
    pub fn apply(&mut self, env_seed: Option<&str>, flags: &Overrides) -> Result<()> {
        if let Some(s) = env_seed {
            let seed = s
                .trim()
                .parse()
                .map_err(|_| CegError::Config(format!("CEG_SEED is not an integer: '{s}'")))?;
            self.seeds = vec![seed];
        }
        if let Some(v) = &flags.seeds {
            self.seeds = v.clone();
        }
        if let Some(v) = &flags.budgets {
            self.budgets = v.clone();
        }
        if let Some(v) = &flags.strategies {
            self.strategies = v.clone();
        }
        if let Some(v) = &flags.targets {
            self.targets = Targets::List(v.clone());
        }
        if let Some(v) = &flags.output_dir {
            self.output_dir = v.clone();
        }
        if flags.parallelism.is_some() {
            self.parallelism = flags.parallelism;
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<GeneratedDataset<f64>> {
        match &self.dataset {
            DatasetSource::Path(p) => load_dataset(p),
            DatasetSource::Generate(spec) => generate(spec),
        }
    }
}

/// What a sweep cell runs.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Strategy(QueryStrategy),
    Ablation(Ablation),
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Strategy(s) => s.to_string(),
            Variant::Ablation(a) => ablation_label(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub variant: Variant,
    pub target: usize,
    pub budget: f64,
    pub seed: u64,
}

impl Cell {
    /// File stem for the cell's report and logs.
    pub fn key(&self) -> String {
        let label: String = self
            .variant
            .label()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        format!("{label}_t{}_b{}_s{}", self.target, self.budget, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub target: usize,
    pub strategy: String,
    pub budget: f64,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<(String, String)>,
}

impl SweepOutcome {
    /// 0 when every cell succeeded, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }
}

/// Expands the manifest into cells: variants outermost, then targets,
/// budgets and seeds.
pub fn plan(manifest: &Manifest, variants: &[Variant], num_domains: usize) -> Vec<Cell> {
    let mut cells = Vec::new();
    for v in variants {
        for &target in &manifest.targets.resolve(num_domains) {
            for &budget in &manifest.budgets {
                for &seed in &manifest.seeds {
                    cells.push(Cell {
                        variant: v.clone(),
                        target,
                        budget,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

fn budget_count(fraction: f64, sources: usize) -> usize {
    (fraction * sources as f64).floor() as usize
}

fn validate(manifest: &Manifest, variants: &[Variant], dataset: &GeneratedDataset<f64>) -> Result<()> {
    let fail = |m: &str| Err(CegError::Config(m.into()));
    if variants.is_empty() {
        return fail("manifest needs at least one strategy");
    }
    if manifest.seeds.is_empty() {
        return fail("manifest needs at least one seed");
    }
    if manifest.budgets.is_empty() {
        return fail("manifest needs at least one budget");
    }
    if manifest.budgets.iter().any(|b| !(0.0..=1.0).contains(b)) {
        return fail("budgets are fractions in [0, 1]");
    }
    if manifest.parallelism == Some(0) {
        return fail("parallelism must be positive");
    }
    let k = dataset.spec.num_domains;
    let targets = manifest.targets.resolve(k);
    if targets.is_empty() {
        return fail("manifest needs at least one target");
    }
    if let Some(t) = targets.iter().find(|t| **t >= k) {
        return Err(CegError::Config(format!("target {t} out of range for {k} domains")));
    }
    for &t in &targets {
        let sources = dataset.samples.iter().filter(|s| s.domain != t).count();
        for &b in &manifest.budgets {
            let config = TrainConfig {
                budget: budget_count(b, sources),
                ..manifest.config.clone()
            };
            config.validate(sources)?;
        }
    }
    Ok(())
}

/// Runs every cell and writes all outputs under `manifest.output_dir`:
/// `results.csv`, `aggregate.csv`, `reports/`, `query_logs/`, `train_logs/`
/// and, on partial failure, `failures.txt`.
///
/// Manifest or dataset problems are returned as errors before any cell runs.
pub fn run_sweep(manifest: &Manifest, variants: &[Variant]) -> Result<SweepOutcome> {
    let dataset = manifest.load_dataset()?;
    validate(manifest, variants, &dataset)?;
    let cells = plan(manifest, variants, dataset.spec.num_domains);

    let out = &manifest.output_dir;
    for sub in ["reports", "query_logs", "train_logs"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let _ = fs::remove_file(out.join("failures.txt"));

    let mut splits = BTreeMap::new();
    for t in cells.iter().map(|c| c.target).collect::<BTreeSet<_>>() {
        splits.insert(t, leave_one_domain_out(&dataset, t)?);
    }

    let run_cell = |cell: &Cell| -> Result<ResultRow> {
        let split = &splits[&cell.target];
        let config = TrainConfig {
            budget: budget_count(cell.budget, split.sources.len()),
            seed: cell.seed,
            ..manifest.config.clone()
        };
        let report = match &cell.variant {
            Variant::Strategy(s) => run_strategy(&TrainConfig { strategy: *s, ..config }, split)?,
            Variant::Ablation(a) => run_ablation(&config, split, a)?,
        };
        let key = cell.key();
        report.write_json(&out.join("reports").join(format!("{key}.json")))?;
        report.write_query_log(&out.join("query_logs").join(format!("{key}.jsonl")))?;
        report.write_training_log(&out.join("train_logs").join(format!("{key}.jsonl")))?;
        Ok(ResultRow {
            dataset: manifest.name.clone(),
            target: cell.target,
            strategy: cell.variant.label(),
            budget: cell.budget,
            seed: cell.seed,
            accuracy: report.final_target_accuracy,
        })
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.parallelism.unwrap_or(0))
        .build()
        .map_err(|e| CegError::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<ResultRow>> = pool.install(|| cells.par_iter().map(run_cell).collect());

    let mut outcome = SweepOutcome {
        rows: Vec::new(),
        failures: Vec::new(),
    };
    for (cell, r) in cells.iter().zip(results) {
        match r {
            Ok(row) => outcome.rows.push(row),
            Err(e) => outcome.failures.push((cell.key(), e.to_string())),
        }
    }
    write_results(&out.join("results.csv"), &outcome.rows)?;
    write_aggregate(&out.join("aggregate.csv"), &aggregate(&outcome.rows))?;
    if !outcome.failures.is_empty() {
        let text: String = outcome.failures.iter().map(|(k, e)| format!("{k}: {e}\n")).collect();
        fs::write(out.join("failures.txt"), text)?;
    }
    Ok(outcome)
}

/// Variants of `ceg run`: the manifest's strategies.
pub fn strategy_variants(manifest: &Manifest) -> Vec<Variant> {
    manifest.strategies.iter().map(|s| Variant::Strategy(*s)).collect()
}

/// Variants of `ceg ablate`: full CEG followed by each listed ablation.
pub fn ablation_variants(manifest: &Manifest) -> Vec<Variant> {
    std::iter::once(Variant::Ablation(Ablation::new()))
        .chain(manifest.ablations.iter().filter(|a| !a.is_empty()).cloned().map(Variant::Ablation))
        .collect()
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.target.to_string(),
            r.strategy.clone(),
            r.budget.to_string(),
            r.seed.to_string(),
            r.accuracy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != RESULTS_HEADER {
        return Err(CegError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {}", RESULTS_HEADER.join(",")),
        });
    }
    r.deserialize().map(|row| row.map_err(CegError::from)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub dataset: String,
    pub target: usize,
    pub strategy: String,
    pub budget: f64,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by (dataset, target, strategy, budget) in order of first appearance.
pub fn aggregate(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut groups: Vec<(ResultRow, Vec<f64>)> = Vec::new();
    for r in rows {
        let same = |g: &ResultRow| {
            g.dataset == r.dataset && g.target == r.target && g.strategy == r.strategy && g.budget == r.budget
        };
        match groups.iter_mut().find(|(g, _)| same(g)) {
            Some((_, v)) => v.push(r.accuracy),
            None => groups.push((r.clone(), vec![r.accuracy])),
        }
    }
    groups
        .into_iter()
        .map(|(g, v)| {
            let (mean, std) = mean_std(&v);
            AggregateRow {
                dataset: g.dataset,
                target: g.target,
                strategy: g.strategy,
                budget: g.budget,
                runs: v.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "target", "strategy", "budget", "runs", "mean", "std"])?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.target.to_string(),
            r.strategy.clone(),
            r.budget.to_string(),
            r.runs.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Strategies × targets table of seed-averaged accuracies plus an average column.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<String>,
    /// `None` marks a missing cell.
    pub values: Vec<Vec<Option<f64>>>,
    pub best: Vec<Vec<bool>>,
}

/// Pivots result rows. Row labels carry the budget when several budgets
/// are present. The average column is a gap when a row misses any target.
pub fn compare(rows: &[ResultRow]) -> Result<Comparison> {
    if rows.is_empty() {
        return Err(CegError::Evaluation("no result rows to compare".into()));
    }
    let budgets: BTreeSet<u64> = rows.iter().map(|r| r.budget.to_bits()).collect();
    let label = |r: &ResultRow| {
        if budgets.len() > 1 {
            format!("{}@{}", r.strategy, r.budget)
        } else {
            r.strategy.clone()
        }
    };
    let targets: Vec<usize> = rows.iter().map(|r| r.target).collect::<BTreeSet<_>>().into_iter().collect();
    let mut labels: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        let l = label(r);
        if !labels.contains(&l) {
            labels.push(l.clone());
        }
        cells.entry((l, r.target)).or_default().push(r.accuracy);
    }

    let values: Vec<Vec<Option<f64>>> = labels
        .iter()
        .map(|l| {
            let mut row: Vec<Option<f64>> = targets
                .iter()
                .map(|t| cells.get(&(l.clone(), *t)).map(|v| mean_std(v).0))
                .collect();
            let avg = row
                .iter()
                .copied()
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64);
            row.push(avg);
            row
        })
        .collect();

    let ncols = targets.len() + 1;
    let mut best = vec![vec![false; ncols]; labels.len()];
    for c in 0..ncols {
        let top = values.iter().filter_map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
        for (r, row) in values.iter().enumerate() {
            best[r][c] = row[c] == Some(top);
        }
    }

    let mut columns: Vec<String> = targets.iter().map(|t| format!("target_{t}")).collect();
    columns.push("average".into());
    Ok(Comparison {
        columns,
        rows: labels,
        values,
        best,
    })
}

impl Comparison {
    /// Fixed-width text table; best cells carry a trailing `*`, gaps show `-`.
    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>, b: bool| match v {
            Some(x) => format!("{:.2}{}", 100.0 * x, if b { "*" } else { "" }),
            None => "-".into(),
        };
        let first = self.rows.iter().map(String::len).chain([8]).max().unwrap_or(8);
        let width = self.columns.iter().map(String::len).chain([7]).max().unwrap_or(7);
        let mut out = format!("{:first$}", "strategy");
        for c in &self.columns {
            let _ = write!(out, "  {c:>width$}");
        }
        out.push('\n');
        for (r, label) in self.rows.iter().enumerate() {
            let _ = write!(out, "{label:first$}");
            for c in 0..self.columns.len() {
                let _ = write!(out, "  {:>width$}", cell(self.values[r][c], self.best[r][c]));
            }
            out.push('\n');
        }
        out
    }

    /// CSV with raw accuracies (empty for gaps) and a `best` column listing
    /// the columns in which the row is best.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["strategy".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("best".into());
        w.write_record(&header)?;
        for (r, label) in self.rows.iter().enumerate() {
            let mut rec = vec![label.clone()];
            rec.extend(self.values[r].iter().map(|v| v.map_or(String::new(), |x| x.to_string())));
            let best: Vec<&str> = self
                .columns
                .iter()
                .zip(&self.best[r])
                .filter(|(_, b)| **b)
                .map(|(c, _)| c.as_str())
                .collect();
            rec.push(best.join(";"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
