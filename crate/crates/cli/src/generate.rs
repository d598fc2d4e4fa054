use std::fs;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use printdefect::dataset::write_truth;
use printdefect::imaging::save_page;
use printdefect::synthpage::{generate, scatter_defects, standard_layout, PageSpec, Scatter};

use crate::output::{sibling, unix_seconds, write_atomic, write_json, Timing, VERSION};
use crate::GenArgs;

/// Salt separating spot placement from the page's noise stream.
const SCATTER_SALT: u64 = 7;

#[derive(Debug, Serialize)]
struct GenReport<'a> {
    command: &'static str,
    version: &'static str,
    spec: &'a PageSpec,
    page: &'a std::path::Path,
    truth: &'a std::path::Path,
    timing: Timing,
}

pub fn run(args: GenArgs) -> Result<()> {
    let started_unix = unix_seconds();
    let started = Instant::now();
    let spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            PageSpec::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => {
            let mut spec = standard_layout(args.seed);
            let scatter = Scatter {
                count: args.spots,
                ..Scatter::default()
            };
            spec.defects = scatter_defects(&spec, &scatter, SCATTER_SALT)?;
            spec
        }
    };
    let (page, truth) = generate(&spec)?;
    write_atomic(&args.out, |tmp| Ok(save_page(&page, tmp)?))?;
    let truth_path = args.truth.clone().unwrap_or_else(|| sibling(&args.out, None, "truth.json"));
    write_atomic(&truth_path, |tmp| Ok(write_truth(&truth, tmp)?))?;

    let report = GenReport {
        command: "gen",
        version: VERSION,
        spec: &spec,
        page: &args.out,
        truth: &truth_path,
        timing: Timing {
            started_unix,
            elapsed_ms: started.elapsed().as_millis(),
        },
    };
    let report_path = args.report.clone().unwrap_or_else(|| sibling(&args.out, None, "report.json"));
    write_json(&report_path, &report)
}
