use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::{error, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use printdefect::aggregate::render_overlay;
use printdefect::blockgrid::GridConfig;
use printdefect::candidates::{BaselinePoint, CandidateConfig};
use printdefect::classifier::TreeModel;
use printdefect::dataset::{read_truth, write_records, TruthRegion};
use printdefect::imaging::{load_page, save_page, DEFAULT_DPI};
use printdefect::pipeline::{analyze_page, DetectConfig};
use printdefect::segmentation::SegmentConfig;

use crate::output::{sibling, unix_seconds, write_atomic, write_bytes, write_json, Timing, VERSION};
use crate::{DetectArgs, EXIT_OK, EXIT_PARTIAL};

/// Settings accepted from a `--config` TOML file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    dpi: Option<u32>,
    model: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    jobs: Option<usize>,
    grid: GridConfig,
    candidate: CandidateConfig,
    segment: SegmentConfig,
}

/// Fully resolved settings of a detect run.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub inputs: Vec<PathBuf>,
    pub dpi: u32,
    pub detect: DetectConfig,
    pub model: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub jobs: usize,
    pub verbosity: u8,
    pub dump_dde: Option<PathBuf>,
}

fn is_page(path: &Path) -> bool {
    let name = path.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
    name.ends_with(".png") && !name.ends_with(".annotated.png")
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut pages = Vec::new();
    for input in inputs {
        if input.is_dir() {
            for entry in fs::read_dir(input).with_context(|| format!("listing {}", input.display()))? {
                let path = entry?.path();
                if path.is_file() && is_page(&path) {
                    pages.push(path);
                }
            }
        } else {
            pages.push(input.clone());
        }
    }
    pages.sort();
    pages.dedup();
    Ok(pages)
}

fn resolve(args: &DetectArgs, verbosity: u8) -> Result<RunConfig> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => FileConfig::default(),
    };
    let mut detect = DetectConfig {
        grid: file.grid,
        candidate: file.candidate,
        segment: file.segment,
    };
    if let Some(t) = args.threshold {
        detect.candidate.threshold = t;
    }
    if let Some(w) = args.baseline_window {
        detect.candidate.baseline_window = w;
    }
    if let Some(c) = args.channel {
        detect.segment.channel = c.into();
    }
    if let Some(m) = args.method {
        detect.segment.method = m.into();
    }
    if let Some(b) = args.bins {
        detect.segment.bins = b;
    }
    if detect.candidate.threshold.is_nan() || detect.candidate.threshold < 0.0 {
        bail!("candidate threshold must be a non-negative number");
    }
    if detect.candidate.baseline_window == 0 || detect.segment.bins < 2 {
        bail!("baseline window must be positive and bins at least 2");
    }
    let dpi = args.dpi.or(file.dpi).unwrap_or(DEFAULT_DPI);
    if dpi == 0 {
        bail!("dpi must be positive");
    }
    let jobs = match args.jobs.or(file.jobs).unwrap_or(0) {
        0 => rayon::current_num_threads(),
        n => n,
    };
    let inputs = expand_inputs(&args.inputs)?;
    if inputs.is_empty() {
        bail!("no PNG pages found in the given inputs");
    }
    if args.truth.is_some() && inputs.len() != 1 {
        bail!("--truth applies to a single input page");
    }
    Ok(RunConfig {
        inputs,
        dpi,
        detect,
        model: args.model.clone().or(file.model),
        out_dir: args.out_dir.clone().or(file.out_dir),
        jobs,
        verbosity,
        dump_dde: args.dump_dde.clone(),
    })
}

#[derive(Debug, Serialize)]
struct PageReport {
    input: PathBuf,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_defects: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    candidates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<PathBuf>,
    outputs: Vec<PathBuf>,
    elapsed_ms: u128,
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    command: &'static str,
    version: &'static str,
    config: &'a RunConfig,
    pages: Vec<PageReport>,
    failed: usize,
    timing: Timing,
}

struct PageResult {
    report: PageReport,
    baseline: Vec<BaselinePoint>,
}

fn process_page(input: &Path, config: &RunConfig, model: Option<&TreeModel>, truth_flag: Option<&Path>) -> Result<PageResult> {
    let started = Instant::now();
    let mut page = load_page(input)?;
    page.set_dpi(config.dpi)?;

    let truth_path = match truth_flag {
        Some(p) => Some(p.to_path_buf()),
        None => Some(sibling(input, None, "truth.json")).filter(|p| p.is_file()),
    };
    let truth: Option<Vec<TruthRegion>> = truth_path.as_ref().map(read_truth).transpose()?;

    let file = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let analysis = analyze_page(&page, &config.detect, model, &file, truth.as_deref());

    let out = config.out_dir.as_deref();
    let features_json = sibling(input, out, "features.json");
    let features_csv = sibling(input, out, "features.csv");
    let defects_json = sibling(input, out, "defects.json");
    let blocks_csv = sibling(input, out, "blocks.csv");
    let annotated = sibling(input, out, "annotated.png");

    write_json(&features_json, &analysis.features)?;
    write_bytes(&features_csv, analysis.features.to_csv().as_bytes())?;
    write_json(&defects_json, &analysis.defects)?;
    let mut blocks = Vec::new();
    write_records(&analysis.records, &mut blocks)?;
    write_bytes(&blocks_csv, &blocks)?;
    let overlay = render_overlay(&page, &analysis.defects);
    write_atomic(&annotated, |tmp| Ok(save_page(&overlay, tmp)?))?;

    info!(
        "{}: {} candidates, {} defects",
        input.display(),
        analysis.candidates.len(),
        analysis.defects.len()
    );
    Ok(PageResult {
        report: PageReport {
            input: input.to_path_buf(),
            status: "ok",
            error: None,
            n_defects: Some(analysis.features.n_defects),
            candidates: Some(analysis.candidates.len()),
            truth: truth_path,
            outputs: vec![features_json, features_csv, defects_json, blocks_csv, annotated],
            elapsed_ms: started.elapsed().as_millis(),
        },
        baseline: analysis.baseline,
    })
}

fn dde_csv(pages: &[(PathBuf, Vec<BaselinePoint>)]) -> String {
    let mut out = String::from("file,block_idx,region,raw_dde,baseline,corrected\n");
    for (input, points) in pages {
        let file = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for p in points {
            let _ = writeln!(out, "{file},{},{},{},{},{}", p.id, p.region, p.raw, p.baseline, p.corrected);
        }
    }
    out
}

pub fn run(args: DetectArgs, verbosity: u8) -> Result<u8> {
    let started_unix = unix_seconds();
    let started = Instant::now();
    let config = resolve(&args, verbosity)?;
    let model = match &config.model {
        Some(path) => Some(TreeModel::load(path).with_context(|| format!("loading model {}", path.display()))?),
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(config.jobs).build()?;
    let results: Vec<(PathBuf, Result<PageResult>)> = pool.install(|| {
        config
            .inputs
            .par_iter()
            .map(|input| {
                let r = process_page(input, &config, model.as_ref(), args.truth.as_deref());
                (input.clone(), r)
            })
            .collect()
    });

    let mut pages = Vec::with_capacity(results.len());
    let mut dumps = Vec::new();
    let mut failed = 0;
    for (input, result) in results {
        match result {
            Ok(r) => {
                dumps.push((input, r.baseline));
                pages.push(r.report);
            }
            Err(e) => {
                error!("{}: {e:#}", input.display());
                failed += 1;
                pages.push(PageReport {
                    input,
                    status: "failed",
                    error: Some(format!("{e:#}")),
                    n_defects: None,
                    candidates: None,
                    truth: None,
                    outputs: Vec::new(),
                    elapsed_ms: 0,
                });
            }
        }
    }
    if let Some(path) = &config.dump_dde {
        write_bytes(path, dde_csv(&dumps).as_bytes())?;
    }

    let report_path = config.out_dir.clone().unwrap_or_default().join("run_report.json");
    let report = RunReport {
        command: "detect",
        version: VERSION,
        config: &config,
        pages,
        failed,
        timing: Timing {
            started_unix,
            elapsed_ms: started.elapsed().as_millis(),
        },
    };
    write_json(&report_path, &report)?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_PARTIAL })
}
