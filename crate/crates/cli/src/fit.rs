use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use netprice::data::{build_week_economies, parse_trips_filtered, relocation_phantom, ColumnMap, DataError, ParseStats, PipelineParams, PipelineSummary, RowError};
use netprice::{EconomyDocument, PhantomCurve, PhantomDemand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::usage;
use crate::output::write_json;

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Trip CSV.
    #[arg(long)]
    dataset: PathBuf,
    /// Existing directory for the fitted economies.
    #[arg(long)]
    out: PathBuf,
    /// JSON with `pipeline`, `columns` and `phantom` fields, all optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of areas; overrides the configuration.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub pipeline: PipelineParams,
    pub columns: ColumnMap,
    pub phantom: Option<PhantomCurve>,
}

#[derive(Serialize)]
struct WeekEntry {
    t: usize,
    week: String,
    excluded: bool,
    m: f64,
    economy: Option<String>,
}

#[derive(Serialize)]
struct FitSummary {
    dataset: PathBuf,
    rows: u64,
    kept: u64,
    skipped_missing_area: u64,
    row_errors: usize,
    first_errors: Vec<RowError>,
    pipeline: Option<PipelineSummary>,
    economies: usize,
    weeks: Vec<WeekEntry>,
}

const SHOWN_ERRORS: usize = 20;

pub fn execute(args: FitArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
            serde_json::from_str::<FitConfig>(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?
        }
        None => FitConfig::default(),
    };
    if let Some(n) = args.n {
        cfg.pipeline.n = n;
    }
    if cfg.pipeline.n < 2 {
        return Err(usage("need at least 2 areas"));
    }
    if !args.out.is_dir() {
        return Err(usage(format!("output directory {} does not exist", args.out.display())));
    }
    if !args.dataset.is_file() {
        return Err(usage(format!("input file {} does not exist", args.dataset.display())));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs.unwrap_or(0)).build()?;

    let file = fs::File::open(&args.dataset).with_context(|| format!("opening {}", args.dataset.display()))?;
    let pipeline = &cfg.pipeline;
    let (records, stats) = parse_trips_filtered(file, &cfg.columns, pipeline.n, |r| pipeline.window.in_range(&r.start))
        .with_context(|| format!("reading {}", args.dataset.display()))?;
    let ParseStats { rows, kept, missing_area, errors } = stats;
    if missing_area > 0 {
        log::warn!("skipped {missing_area} rows without pickup or dropoff area");
    }

    let build = match build_week_economies(records, pipeline) {
        Ok(build) => Some(build),
        Err(DataError::EmptyWindow) => {
            log::warn!("no trips fall in the observation window");
            None
        }
        Err(e) => return Err(e.into()),
    };
    let phantom = match cfg.phantom {
        Some(curve) => PhantomDemand::uniform(pipeline.n, curve),
        None => relocation_phantom(pipeline.n),
    };

    let mut weeks = Vec::new();
    let mut summary = None;
    if let Some(build) = build {
        weeks = pool.install(|| {
            build
                .weeks
                .into_par_iter()
                .map(|(spec, economy)| {
                    let t = spec.week_index;
                    write_json(&args.out.join(format!("observed-week-{t}.json")), &spec)?;
                    let name = match economy {
                        Some(economy) => {
                            let name = format!("economy-week-{t}.json");
                            write_json(&args.out.join(&name), &EconomyDocument { economy, phantom: phantom.clone() })?;
                            Some(name)
                        }
                        None => None,
                    };
                    Ok(WeekEntry { t, week: spec.week, excluded: spec.excluded, m: spec.m, economy: name })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        summary = Some(build.summary);
    }

    let fit = FitSummary {
        dataset: args.dataset,
        rows,
        kept,
        skipped_missing_area: missing_area,
        row_errors: errors.len(),
        first_errors: errors.into_iter().take(SHOWN_ERRORS).collect(),
        pipeline: summary,
        economies: weeks.iter().filter(|w| w.economy.is_some()).count(),
        weeks,
    };
    write_json(&args.out.join("fit-summary.json"), &fit)
}
