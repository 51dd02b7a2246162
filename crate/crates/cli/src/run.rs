use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use netprice::benchmark::solve_optimal_dual;
use netprice::clearing::{clear_market, Adjustments};
use netprice::data::{build_stationary_economy, build_week_economies, parse_trips_filtered, relocation_phantom};
use netprice::mechanism::{run_mechanism, EconomyStream, InpParams, StepFailure, StopReason, Trajectory, Variant};
use netprice::synthetic::{example1, example1_phantom, example2, example2_phantom, random_city, weekly_variation};
use netprice::welfare::{lyapunov_f, primal_welfare, welfare_report, WelfareReport};
use netprice::{Economy, EconomyDocument, MarketOutcome, PhantomDemand};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{usage, variant_label, EconomySource, ExperimentConfig, Mode};
use crate::output::{cell, create_dir, write_csv, write_json};

/// Economies in time order with their labels; stationary modes use the first.
struct Loaded {
    economies: Vec<(String, Economy)>,
    phantom: PhantomDemand,
}

pub fn execute(cfg: ExperimentConfig) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build()?;
    pool.install(|| {
        let loaded = load(&cfg)?;
        match cfg.mode {
            Mode::Stationary | Mode::Example => run_stationary(&cfg, &loaded),
            Mode::Nonstationary => run_nonstationary(&cfg, &loaded),
            Mode::SweepPhi => run_sweep(&cfg, &loaded),
        }
    })
}

fn load(cfg: &ExperimentConfig) -> Result<Loaded> {
    let weekly = cfg.mode == Mode::Nonstationary;
    let (base, phantom) = match &cfg.economy {
        EconomySource::Example1 => (example1(), example1_phantom()),
        EconomySource::Example2 => (example2(), example2_phantom()),
        EconomySource::Random { n, seed, imbalance } => {
            let city = random_city(*n, seed.unwrap_or(cfg.seed), *imbalance);
            (city.economy, city.phantom)
        }
        EconomySource::File { path } => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let doc: EconomyDocument =
                serde_json::from_str(&text).map_err(|e| usage(format!("economy {}: {e}", path.display())))?;
            (doc.economy, doc.phantom)
        }
        EconomySource::Dataset { path, pipeline, columns } => {
            let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let (records, stats) = parse_trips_filtered(file, columns, pipeline.n, |r| pipeline.window.in_range(&r.start))?;
            log::info!("{}: {} rows, {} kept, {} without areas", path.display(), stats.rows, stats.kept, stats.missing_area);
            let phantom = override_phantom(cfg, relocation_phantom(pipeline.n));
            let economies = if weekly {
                let build = build_week_economies(records, pipeline)?;
                build.weeks.into_iter().filter_map(|(spec, e)| e.map(|e| (spec.week, e))).collect()
            } else {
                let (spec, economy, _) = build_stationary_economy(records, pipeline)?;
                vec![(spec.week, economy)]
            };
            return Ok(Loaded { economies, phantom });
        }
    };
    let phantom = override_phantom(cfg, phantom);
    let economies = if weekly {
        let weeks = weekly_variation(&base, cfg.weeks, cfg.seed, cfg.week_spread);
        weeks.into_iter().enumerate().map(|(t, e)| (format!("synthetic-{t:02}"), e)).collect()
    } else {
        vec![("stationary".to_string(), base)]
    };
    Ok(Loaded { economies, phantom })
}

fn override_phantom(cfg: &ExperimentConfig, phantom: PhantomDemand) -> PhantomDemand {
    match cfg.phantom {
        Some(curve) => PhantomDemand::uniform(phantom.n(), curve),
        None => phantom,
    }
}

fn document(economy: &Economy, phantom: &PhantomDemand) -> EconomyDocument {
    EconomyDocument { economy: economy.clone(), phantom: phantom.clone() }
}

/// Output directory of one variant: the root for a single variant.
fn variant_dir(cfg: &ExperimentConfig, variant: &Variant) -> Result<PathBuf> {
    if cfg.variants.len() == 1 {
        return Ok(cfg.out_dir().clone());
    }
    let dir = cfg.out_dir().join(variant_label(variant));
    create_dir(&dir)?;
    Ok(dir)
}

fn naive_primal(economy: &Economy, phantom: &PhantomDemand) -> Option<f64> {
    let out = clear_market(economy, phantom, &Adjustments::zero(economy.n()), None)
        .map_err(|e| log::warn!("naive clearing failed: {e}"))
        .ok()?;
    primal_welfare(&out.outcome, economy).ok()
}

#[derive(Serialize)]
struct StepDump<'a> {
    t: usize,
    #[serde(flatten)]
    outcome: &'a MarketOutcome,
    welfare: WelfareReport,
}

fn write_trajectory(dir: &Path, tr: &Trajectory, economy_at: impl Fn(usize) -> Economy + Sync, phantom: &PhantomDemand) -> Result<()> {
    let path = dir.join("trajectory.csv");
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    tr.write_csv(std::io::BufWriter::new(file))?;
    let outcomes = dir.join("outcomes");
    create_dir(&outcomes)?;
    tr.entries.par_iter().zip(&tr.outcomes).try_for_each(|(entry, outcome)| {
        let economy = economy_at(entry.t);
        let welfare = welfare_report(outcome, &economy, phantom)?;
        write_json(&outcomes.join(format!("step-{}.json", entry.t)), &StepDump { t: entry.t, outcome, welfare })
    })
}

#[derive(Serialize)]
struct FinalPoint {
    t: usize,
    phi: Vec<f64>,
    pi: Vec<f64>,
    f: f64,
    primal: f64,
    dual: f64,
    bound_detailed: f64,
    bound_coarse: f64,
}

#[derive(Serialize)]
struct StationarySummary {
    mode: Mode,
    variant: Variant,
    params: InpParams,
    n: usize,
    m: f64,
    stop: StopReason,
    steps: usize,
    backtracks: usize,
    failures: Vec<StepFailure>,
    welfare_star: f64,
    omega_star: f64,
    naive_primal: Option<f64>,
    naive_ratio: Option<f64>,
    #[serde(rename = "final")]
    last: FinalPoint,
    welfare_ratio: f64,
}

fn run_stationary(cfg: &ExperimentConfig, loaded: &Loaded) -> Result<()> {
    let (_, economy) = &loaded.economies[0];
    let phantom = &loaded.phantom;
    let out = cfg.out_dir();
    write_json(&out.join("economy.json"), &document(economy, phantom))?;
    let (star, naive) = rayon::join(|| solve_optimal_dual(economy, None), || naive_primal(economy, phantom));
    let star = star.context("solving for the optimal welfare")?;

    let summaries: Vec<StationarySummary> = cfg
        .variants
        .par_iter()
        .map(|&variant| {
            let dir = variant_dir(cfg, &variant)?;
            let tr = run_mechanism(EconomyStream::Stationary(economy), phantom, variant, &cfg.params, cfg.fail_fast)
                .with_context(|| format!("{} run", variant_label(&variant)))?;
            write_trajectory(&dir, &tr, |_| economy.clone(), phantom)?;
            let last = tr.last();
            let report = welfare_report(tr.outcomes.last().expect("one outcome per entry"), economy, phantom)?;
            let summary = StationarySummary {
                mode: cfg.mode,
                variant,
                params: cfg.params,
                n: economy.n(),
                m: economy.m(),
                stop: tr.stop,
                steps: tr.entries.len(),
                backtracks: tr.backtracks,
                failures: tr.failures.clone(),
                welfare_star: star.welfare_star,
                omega_star: star.omega_star,
                naive_primal: naive,
                naive_ratio: naive.map(|w| w / star.welfare_star),
                last: FinalPoint {
                    t: last.t,
                    phi: last.phi.clone(),
                    pi: last.pi.clone(),
                    f: last.f,
                    primal: last.primal,
                    dual: last.dual,
                    bound_detailed: report.bound_detailed,
                    bound_coarse: report.bound_coarse,
                },
                welfare_ratio: last.primal / star.welfare_star,
            };
            if cfg.variants.len() > 1 {
                write_json(&dir.join("summary.json"), &summary)?;
            }
            Ok(summary)
        })
        .collect::<Result<_>>()?;
    if let [only] = summaries.as_slice() {
        write_json(&out.join("summary.json"), only)
    } else {
        write_json(&out.join("summary.json"), &summaries)
    }
}

#[derive(Serialize)]
struct WeekBaseline {
    week: String,
    naive: Option<f64>,
    hindsight: Option<f64>,
}

#[derive(Serialize)]
struct NonstationarySummary {
    mode: Mode,
    variant: Variant,
    params: InpParams,
    weeks: Vec<WeekBaseline>,
    stop: StopReason,
    backtracks: usize,
    failures: Vec<StepFailure>,
    /// Mean over weeks with both a mechanism outcome and a hindsight optimum.
    mean_ratio: Option<f64>,
    mean_naive_ratio: Option<f64>,
    welfare_ratio: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn run_nonstationary(cfg: &ExperimentConfig, loaded: &Loaded) -> Result<()> {
    let phantom = &loaded.phantom;
    let out = cfg.out_dir();
    if loaded.economies.is_empty() {
        return Err(anyhow::anyhow!("no usable weeks"));
    }
    let economies: Vec<Economy> = loaded.economies.iter().map(|(_, e)| e.clone()).collect();
    loaded
        .economies
        .par_iter()
        .enumerate()
        .try_for_each(|(t, (_, e))| write_json(&out.join(format!("economy-week-{t}.json")), &document(e, phantom)))?;
    let baselines: Vec<WeekBaseline> = loaded
        .economies
        .par_iter()
        .map(|(week, e)| {
            let hindsight = solve_optimal_dual(e, None)
                .map_err(|err| log::warn!("{week}: hindsight optimum failed: {err}"))
                .ok()
                .map(|s| s.welfare_star);
            WeekBaseline { week: week.clone(), naive: naive_primal(e, phantom), hindsight }
        })
        .collect();

    // every week is played, however small f gets
    let params = InpParams { f_tol: cfg.params.f_tol.or(Some(0.0)), ..cfg.params };
    let summaries: Vec<NonstationarySummary> = cfg
        .variants
        .par_iter()
        .map(|&variant| {
            let dir = variant_dir(cfg, &variant)?;
            let tr = run_mechanism(EconomyStream::Sequence(&economies), phantom, variant, &params, cfg.fail_fast)
                .with_context(|| format!("{} run", variant_label(&variant)))?;
            write_trajectory(&dir, &tr, |t| economies[t.min(economies.len() - 1)].clone(), phantom)?;
            let primal: BTreeMap<usize, f64> = tr.entries.iter().map(|e| (e.t, e.primal)).collect();
            let ratio = |t: usize| Some(primal.get(&t)? / baselines[t].hindsight?);
            let naive_ratio = |t: usize| Some(baselines[t].naive? / baselines[t].hindsight?);
            let header = ["t", "week", "primal", "naive", "hindsight", "ratio", "naive_ratio"].map(String::from);
            let rows: Vec<Vec<String>> = baselines
                .iter()
                .enumerate()
                .map(|(t, b)| {
                    vec![
                        t.to_string(),
                        b.week.clone(),
                        cell(primal.get(&t).copied()),
                        cell(b.naive),
                        cell(b.hindsight),
                        cell(ratio(t)),
                        cell(naive_ratio(t)),
                    ]
                })
                .collect();
            write_csv(&dir.join("weeks.csv"), &header, &rows)?;
            let played = 0..baselines.len().min(tr.last().t + 1);
            let summary = NonstationarySummary {
                mode: cfg.mode,
                variant,
                params,
                weeks: Vec::new(),
                stop: tr.stop,
                backtracks: tr.backtracks,
                failures: tr.failures.clone(),
                mean_ratio: mean(played.clone().filter_map(ratio)),
                mean_naive_ratio: mean(played.filter_map(naive_ratio)),
                welfare_ratio: ratio(tr.last().t),
            };
            if cfg.variants.len() > 1 {
                write_json(&dir.join("summary.json"), &summary)?;
            }
            Ok(summary)
        })
        .collect::<Result<_>>()?;
    let mut summaries = summaries;
    if let [only] = summaries.as_mut_slice() {
        only.weeks = baselines;
        write_json(&out.join("summary.json"), only)
    } else {
        write_json(&out.join("summary.json"), &summaries)?;
        write_json(&out.join("weeks.json"), &baselines)
    }
}

#[derive(Serialize)]
struct SweepFailure {
    phi: f64,
    error: String,
}

#[derive(Serialize)]
struct SweepSummary {
    mode: Mode,
    location: usize,
    points: usize,
    solved: usize,
    failures: Vec<SweepFailure>,
}

fn run_sweep(cfg: &ExperimentConfig, loaded: &Loaded) -> Result<()> {
    let (_, economy) = &loaded.economies[0];
    let phantom = &loaded.phantom;
    let n = economy.n();
    let spec = &cfg.sweep;
    if spec.location >= n {
        return Err(usage(format!("sweep location {} outside 1..={}", spec.location, n - 1)));
    }
    let out = cfg.out_dir();
    write_json(&out.join("economy.json"), &document(economy, phantom))?;

    let mut header = vec!["phi".to_string()];
    header.extend((1..=n).map(|i| format!("pi_{i}")));
    for prefix in ["p", "x"] {
        header.extend((1..=n).flat_map(|i| (1..=n).map(move |j| format!("{prefix}_{i}_{j}"))));
    }
    header.extend(["f", "primal", "dual", "bound_detailed"].map(String::from));

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut warm: Option<Vec<f64>> = None;
    for k in 0..spec.points {
        let value = spec.from + (spec.to - spec.from) * k as f64 / (spec.points - 1) as f64;
        let mut free = vec![0.0; n - 1];
        free[spec.location - 1] = value;
        let cleared = clear_market(economy, phantom, &Adjustments::from_free(&free), warm.as_deref());
        let out = match cleared {
            Ok(out) => out,
            Err(err) if cfg.fail_fast => return Err(err).with_context(|| format!("clearing at phi = {value}")),
            Err(err) => {
                log::warn!("phi = {value}: {err}");
                failures.push(SweepFailure { phi: value, error: err.to_string() });
                continue;
            }
        };
        let report = welfare_report(&out, economy, phantom)?;
        let mut row = vec![value.to_string()];
        row.extend(out.pi.iter().map(|v| v.to_string()));
        row.extend(out.outcome.p.as_slice().iter().map(|v| v.to_string()));
        row.extend(out.outcome.x.as_slice().iter().map(|v| v.to_string()));
        row.extend([lyapunov_f(&out.pi), report.primal, report.dual, report.bound_detailed].map(|v| v.to_string()));
        rows.push(row);
        warm = Some(out.pi);
    }
    write_csv(&out.join("sweep.csv"), &header, &rows)?;
    let summary =
        SweepSummary { mode: cfg.mode, location: spec.location, points: spec.points, solved: rows.len(), failures };
    write_json(&out.join("summary.json"), &summary)
}
