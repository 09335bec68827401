//! The `dml` command line: training, evaluation, the method comparison grid,
//! gradient checks and checkpoint inspection.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use dml_core::checkpoint;
use dml_core::config::ExperimentConfig;
use dml_core::eval::RetrievalMetrics;
use dml_core::gradsuite::{run_suite, SUITE_TOLERANCE};
use dml_core::train::{build_model, eval_row, load_datasets, Trainer, EVAL_HEADER};
use dml_core::Error;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NON_FINITE: u8 = 3;

pub const COMPARE_HEADER: &str =
    "method,tunable_params,tunable_fraction,peak_resident_bytes,R@1,MAP@R,step_ms";

#[derive(Debug, Parser)]
#[command(
    name = "dml",
    version,
    about = "Prompt-tuned ViT metric learning at desk scale"
)]
pub struct Cli {
    /// Overrides `run.seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write metrics and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the evaluation split.
    Eval(EvalArgs),
    /// Train every listed method on the same data and seed and tabulate them.
    Compare(CompareArgs),
    /// Check every analytic gradient against central differences.
    Gradcheck(GradcheckArgs),
    /// List the entries of a checkpoint file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Output directory for metrics.csv, eval.csv, model.vpck and optimizer.vpck.
    #[arg(short, long, default_value = "dml-run")]
    pub out: PathBuf,
    /// Continue from the checkpoint files in this directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Also write the metrics as CSV to this file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(short, long)]
    pub config: PathBuf,
    /// Comma-separated method names, e.g. `linear_probe,vpt,vptsp_g+bitfit`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub methods: Vec<String>,
    /// Also write the table as CSV to this file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Process exit code for an error: 2 for configuration problems, 3 for a
/// non-finite loss, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => EXIT_CONFIG,
        Some(Error::NonFinite(_)) => EXIT_NON_FINITE,
        _ => EXIT_OTHER,
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Train(a) => cmd_train(&load_config(&a.config, seed)?, &a.out, a.resume.as_deref()),
        Command::Eval(a) => cmd_eval(
            &load_config(&a.config, seed)?,
            &a.checkpoint,
            a.csv.as_deref(),
        ),
        Command::Compare(a) => {
            let cfg = load_config(&a.config, seed)?;
            let rows = compare(&cfg, &a.methods)?;
            print!("{}", compare_table(&rows));
            if let Some(path) = a.csv {
                write_file(&path, &compare_csv(&rows))?;
            }
            Ok(())
        }
        Command::Gradcheck(a) => cmd_gradcheck(a.inject_fault),
        Command::Inspect(a) => cmd_inspect(&a.path),
    }
}

pub fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = ExperimentConfig::from_json_str(&text)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    if resume.is_some() {
        cfg.pretrain.steps = 0;
    }
    let mut trainer = Trainer::from_config(cfg)?;
    if let Some(dir) = resume {
        trainer.resume(dir)?;
        log::info!("resumed at step {}", trainer.step());
    }
    let summary = trainer.run(Some(out))?;
    let params = summary.params;
    println!(
        "tunable {} of {} parameters ({:.4}%)",
        params.tunable,
        params.total,
        100.0 * params.tunable_fraction
    );
    if let Some((step, m)) = summary.evals.last() {
        print!("{}", metrics_table(*step, m));
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, path: &Path, csv: Option<&Path>) -> anyhow::Result<()> {
    let mut cfg = cfg.clone();
    cfg.pretrain.steps = 0;
    let mut trainer = Trainer::from_config(cfg)?;
    trainer.load_model_entries(checkpoint::load(path)?)?;
    let m = trainer.evaluate()?;
    print!("{}", metrics_table(0, &m));
    if let Some(p) = csv {
        write_file(p, &format!("{EVAL_HEADER}\n{}\n", eval_row(0, &m)))?;
    }
    Ok(())
}

fn metrics_table(step: u64, m: &RetrievalMetrics) -> String {
    format!(
        "{:>6} {:>8} {:>8} {:>8} {:>8}\n{:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
        "step",
        "R@1",
        "R@2",
        "R@4",
        "MAP@R",
        step,
        m.recall_at_1,
        m.recall_at_2,
        m.recall_at_4,
        m.map_at_r
    )
}

/// One row of the method comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub method: String,
    pub tunable_params: usize,
    pub tunable_fraction: f64,
    pub peak_resident_bytes: usize,
    pub recall_at_1: f64,
    pub map_at_r: f64,
    /// Median step time, or 0 unless `run.wall_clock` is set.
    pub step_ms: f64,
}

/// Trains every method from the same (optionally pretrained) encoder, data
/// and seed. All names are checked before any training starts.
pub fn compare(cfg: &ExperimentConfig, methods: &[String]) -> anyhow::Result<Vec<CompareRow>> {
    if methods.is_empty() {
        return Err(Error::config("methods", "no method given").into());
    }
    let cfgs = methods
        .iter()
        .map(|m| cfg.for_method(m.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let (train, eval) = load_datasets(cfg)?;
    let model = build_model(cfg)?;
    let mut rows = Vec::with_capacity(methods.len());
    for (name, c) in methods.iter().zip(cfgs) {
        log::info!("compare: {name}");
        let wall = c.run.wall_clock;
        let mut trainer = Trainer::new(c, model.clone(), train.clone(), eval.clone())?;
        let summary = trainer.run(None)?;
        let m = summary
            .final_metrics()
            .expect("a run always evaluates at its end");
        rows.push(CompareRow {
            method: name.trim().to_string(),
            tunable_params: summary.params.tunable,
            tunable_fraction: summary.params.tunable_fraction,
            peak_resident_bytes: summary.peak_resident_bytes,
            recall_at_1: m.recall_at_1,
            map_at_r: m.map_at_r,
            step_ms: if wall { summary.median_step_ms() } else { 0.0 },
        });
    }
    Ok(rows)
}

fn compare_cells(r: &CompareRow) -> [String; 7] {
    [
        r.method.clone(),
        r.tunable_params.to_string(),
        format!("{:.6}", r.tunable_fraction),
        r.peak_resident_bytes.to_string(),
        format!("{:.6}", r.recall_at_1),
        format!("{:.6}", r.map_at_r),
        format!("{:.3}", r.step_ms),
    ]
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = format!("{COMPARE_HEADER}\n");
    for r in rows {
        out.push_str(&compare_cells(r).join(","));
        out.push('\n');
    }
    out
}

pub fn compare_table(rows: &[CompareRow]) -> String {
    let header: Vec<String> = COMPARE_HEADER.split(',').map(String::from).collect();
    let body: Vec<[String; 7]> = rows.iter().map(compare_cells).collect();
    let widths: Vec<usize> = (0..7)
        .map(|i| {
            body.iter()
                .map(|r| r[i].len())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        for (i, c) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(out, "{c:<w$}", w = widths[0]);
            } else {
                let _ = write!(out, "  {c:>w$}", w = widths[i]);
            }
        }
        out.push('\n');
    };
    line(&header, &mut out);
    for r in &body {
        line(r, &mut out);
    }
    out
}

fn cmd_gradcheck(inject_fault: bool) -> anyhow::Result<()> {
    let results = run_suite(inject_fault)?;
    let width = results
        .iter()
        .map(|r| r.name.chars().count())
        .max()
        .unwrap_or(4);
    println!(
        "{:<width$}  {:>6}  {:>12}  status",
        "item", "coords", "max_rel_err"
    );
    for r in &results {
        let pad = width - r.name.chars().count() + r.name.len();
        println!(
            "{:<pad$}  {:>6}  {:>12.3e}  {}",
            r.name,
            r.coords,
            r.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!(
        "{} items, {failed} above {SUITE_TOLERANCE:e}",
        results.len()
    );
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> anyhow::Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let entries = checkpoint::inspect(&bytes)?;
    let shapes: Vec<String> = entries.iter().map(|e| format!("{:?}", e.shape)).collect();
    let nw = entries
        .iter()
        .map(|e| e.name.len())
        .max()
        .unwrap_or(4)
        .max(4);
    let sw = shapes.iter().map(String::len).max().unwrap_or(5).max(5);
    println!(
        "{:<nw$}  {:<sw$}  {:<5}  {:>10}",
        "name", "shape", "dtype", "bytes"
    );
    for (e, s) in entries.iter().zip(&shapes) {
        println!(
            "{:<nw$}  {:<sw$}  {:<5}  {:>10}",
            e.name, s, e.dtype, e.bytes
        );
    }
    let total: usize = entries.iter().map(|e| e.bytes).sum();
    println!("{} entries, {total} payload bytes", entries.len());
    Ok(())
}
