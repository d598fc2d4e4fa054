use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;

use printdefect::classifier::{evaluate, roc_sweep, train as fit, CostMatrix, Evaluation, RocPoint, Sample, TreeConfig};
use printdefect::dataset::{read_dataset, samples};

use crate::output::{sibling, unix_seconds, write_bytes, write_json, Timing, VERSION};
use crate::{RocArgs, TrainArgs};

fn load_samples(paths: &[PathBuf]) -> Result<(Vec<Sample>, usize)> {
    let mut all = Vec::new();
    let mut blocks = 0;
    for path in paths {
        let records = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
        blocks += records.len();
        all.extend(samples(&records));
    }
    Ok((all, blocks))
}

fn tree_config(max_depth: Option<usize>, min_leaf: Option<usize>) -> TreeConfig {
    let mut config = TreeConfig::default();
    if let Some(d) = max_depth {
        config.max_depth = d;
    }
    if let Some(m) = min_leaf {
        config.min_leaf = m;
    }
    config
}

fn dataset_name(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect::<Vec<_>>()
        .join("+")
}

fn report_path(report: Option<&Path>, out: &Path) -> PathBuf {
    report.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, None, "report.json"))
}

#[derive(Debug, Serialize)]
struct TrainReport<'a> {
    command: &'static str,
    version: &'static str,
    datasets: &'a [PathBuf],
    cost: CostMatrix,
    tree: TreeConfig,
    blocks: usize,
    samples: usize,
    model: &'a Path,
    node_count: usize,
    depth: usize,
    /// Rates of the model on its own training samples.
    training: Evaluation,
    timing: Timing,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let started_unix = unix_seconds();
    let started = Instant::now();
    let (samples, blocks) = load_samples(&args.dataset)?;
    let cost = CostMatrix::with_miss_cost(args.cost)?;
    let config = tree_config(args.max_depth, args.min_leaf);
    let model = fit(&samples, &cost, &config, &dataset_name(&args.dataset))?;
    let mut json = model.to_json()?;
    json.push('\n');
    write_bytes(&args.out, json.as_bytes())?;
    info!("trained {} nodes on {} samples", model.nodes.len(), samples.len());

    let report = TrainReport {
        command: "train",
        version: VERSION,
        datasets: &args.dataset,
        cost,
        tree: config,
        blocks,
        samples: samples.len(),
        model: &args.out,
        node_count: model.nodes.len(),
        depth: model.depth(),
        training: evaluate(&model, &samples),
        timing: Timing {
            started_unix,
            elapsed_ms: started.elapsed().as_millis(),
        },
    };
    write_json(&report_path(args.report.as_deref(), &args.out), &report)
}

#[derive(Debug, Serialize)]
struct RocReport<'a> {
    command: &'static str,
    version: &'static str,
    datasets: &'a [PathBuf],
    folds: usize,
    seed: u64,
    tree: TreeConfig,
    samples: usize,
    points: &'a [RocPoint],
    timing: Timing,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn roc(args: RocArgs) -> Result<()> {
    let started_unix = unix_seconds();
    let started = Instant::now();
    if args.costs.is_empty() {
        bail!("--costs needs at least one value");
    }
    let (samples, _) = load_samples(&args.dataset)?;
    let costs = args
        .costs
        .iter()
        .map(|&c| CostMatrix::with_miss_cost(c))
        .collect::<printdefect::Result<Vec<_>>>()?;
    let config = tree_config(args.max_depth, args.min_leaf);
    let points = roc_sweep(&samples, &costs, args.folds, &config, args.seed)?;

    let mut csv = String::from("cost,miss_rate,false_alarm\n");
    for p in &points {
        let _ = writeln!(csv, "{},{},{}", p.cost.miss_cost(), opt(p.miss_rate), opt(p.false_alarm));
    }
    write_bytes(&args.out, csv.as_bytes())?;

    let report = RocReport {
        command: "roc",
        version: VERSION,
        datasets: &args.dataset,
        folds: args.folds,
        seed: args.seed,
        tree: config,
        samples: samples.len(),
        points: &points,
        timing: Timing {
            started_unix,
            elapsed_ms: started.elapsed().as_millis(),
        },
    };
    write_json(&report_path(args.report.as_deref(), &args.out), &report)
}
