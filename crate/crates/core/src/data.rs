//! Trip-record ingestion and per-week economy calibration.
//!
//! Records carry 1-based area ids as in the source data; grids are indexed
//! by `area - 1`. Durations are in hours, prices in dollars, flows in trips
//! per hour.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::economy::{DemandCurve, Economy, EconomyError, PhantomCurve, PhantomDemand, TimeUnit};
use crate::grid::Grid;
use crate::network::{self, NetworkError, ShortestPaths};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing required column {0:?}")]
    MissingColumn(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("no trips fall in the focal window")]
    EmptyWindow,
    #[error("cannot impute durations for {} OD pairs, first {:?}", .0.len(), .0.first())]
    Disconnected(Vec<(usize, usize)>),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Economy(#[from] EconomyError),
}

/// Source column names for each field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub start: String,
    pub seconds: String,
    pub miles: String,
    pub pickup: String,
    pub dropoff: String,
    pub fare: String,
    pub additional: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            start: "Trip Start Timestamp".into(),
            seconds: "Trip Seconds".into(),
            miles: "Trip Miles".into(),
            pickup: "Pickup Community Area".into(),
            dropoff: "Dropoff Community Area".into(),
            fare: "Fare".into(),
            additional: "Additional Charges".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub start: NaiveDateTime,
    pub pickup: usize,
    pub dropoff: usize,
    pub duration_seconds: Option<f64>,
    pub distance_miles: Option<f64>,
    pub fare: f64,
    pub additional: f64,
}

impl TripRecord {
    pub fn price(&self) -> f64 {
        self.fare + self.additional
    }

    fn od(&self) -> (usize, usize) {
        (self.pickup - 1, self.dropoff - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ParseStats {
    pub rows: u64,
    pub kept: u64,
    pub missing_area: u64,
    pub errors: Vec<RowError>,
}

const TIMESTAMP_FORMATS: [&str; 4] = ["%m/%d/%Y %I:%M:%S %p", "%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S", "%m/%d/%Y %H:%M:%S"];

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TIMESTAMP_FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(s.trim(), f).ok())
}

fn parse_number(s: &str) -> Result<Option<f64>, String> {
    let t = s.trim().replace(',', "");
    if t.is_empty() {
        return Ok(None);
    }
    t.parse::<f64>().map(Some).map_err(|_| format!("not a number: {s:?}"))
}

fn parse_area(s: &str, n_areas: usize) -> Result<Option<usize>, String> {
    match parse_number(s)? {
        None => Ok(None),
        Some(v) if v.fract() == 0.0 && v >= 1.0 && v <= n_areas as f64 => Ok(Some(v as usize)),
        Some(v) => Err(format!("area {v} outside 1..={n_areas}")),
    }
}

/// Reads trip rows in one pass. Rows without both areas are counted and
/// skipped; malformed rows are recorded as per-row errors.
pub fn parse_trips<R: Read>(
    reader: R,
    columns: &ColumnMap,
    n_areas: usize,
) -> Result<(Vec<TripRecord>, ParseStats), DataError> {
    parse_trips_filtered(reader, columns, n_areas, |_| true)
}

/// Like [`parse_trips`], keeping only records accepted by `keep`.
pub fn parse_trips_filtered<R: Read>(
    reader: R,
    columns: &ColumnMap,
    n_areas: usize,
    keep: impl Fn(&TripRecord) -> bool,
) -> Result<(Vec<TripRecord>, ParseStats), DataError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let idx = [
        col(&columns.start)?,
        col(&columns.seconds)?,
        col(&columns.miles)?,
        col(&columns.pickup)?,
        col(&columns.dropoff)?,
        col(&columns.fare)?,
        col(&columns.additional)?,
    ];
    let mut stats = ParseStats::default();
    let mut records = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let line = k as u64 + 2;
        stats.rows += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                stats.errors.push(RowError { line, message: e.to_string() });
                continue;
            }
        };
        let field = |c: usize| row.get(idx[c]).unwrap_or("");
        let parsed = (|| -> Result<Option<TripRecord>, String> {
            let pickup = parse_area(field(3), n_areas)?;
            let dropoff = parse_area(field(4), n_areas)?;
            let (Some(pickup), Some(dropoff)) = (pickup, dropoff) else {
                return Ok(None);
            };
            let start = parse_timestamp(field(0)).ok_or_else(|| format!("bad timestamp {:?}", field(0)))?;
            let duration_seconds = parse_number(field(1))?.filter(|d| *d > 0.0);
            let distance_miles = parse_number(field(2))?;
            let fare = parse_number(field(5))?.unwrap_or(0.0);
            let additional = parse_number(field(6))?.unwrap_or(0.0);
            if fare + additional < 0.0 {
                return Err(format!("negative price {}", fare + additional));
            }
            Ok(Some(TripRecord { start, pickup, dropoff, duration_seconds, distance_miles, fare, additional }))
        })();
        match parsed {
            Ok(Some(rec)) => {
                if keep(&rec) {
                    stats.kept += 1;
                    records.push(rec);
                }
            }
            Ok(None) => stats.missing_area += 1,
            Err(message) => stats.errors.push(RowError { line, message }),
        }
    }
    Ok((records, stats))
}

/// Recurring weekly window `[start_hour, end_hour)` on one weekday,
/// optionally restricted to a date range (inclusive).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeWindow {
    pub weekday: Weekday,
    pub start_hour: u32,
    pub end_hour: u32,
    pub from: Option<NaiveDate>,
    pub to: Option<NaiveDate>,
}

impl Default for TimeWindow {
    fn default() -> Self {
        Self { weekday: Weekday::Wed, start_hour: 7, end_hour: 8, from: None, to: None }
    }
}

impl TimeWindow {
    pub fn in_range(&self, ts: &NaiveDateTime) -> bool {
        let date = ts.date();
        self.from.is_none_or(|f| date >= f) && self.to.is_none_or(|t| date <= t)
    }

    pub fn contains(&self, ts: &NaiveDateTime) -> bool {
        self.in_range(ts) && ts.weekday() == self.weekday && ts.hour() >= self.start_hour && ts.hour() < self.end_hour
    }

    pub fn hours(&self) -> f64 {
        (self.end_hour - self.start_hour) as f64
    }
}

/// ISO week label, e.g. `2020-W03`.
pub fn week_label(ts: &NaiveDateTime) -> String {
    let w = ts.iso_week();
    format!("{}-W{:02}", w.year(), w.week())
}

/// Drops trips longer than `factor` times the median distance of their OD
/// pair. Returns the kept records and the drop count.
pub fn drop_distance_outliers(records: Vec<TripRecord>, factor: f64) -> (Vec<TripRecord>, usize) {
    let mut by_od: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
    for r in &records {
        if let Some(d) = r.distance_miles {
            by_od.entry(r.od()).or_default().push(d);
        }
    }
    let medians: HashMap<(usize, usize), f64> = by_od
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by(f64::total_cmp);
            let mid = v.len() / 2;
            let med = if v.len() % 2 == 0 { 0.5 * (v[mid - 1] + v[mid]) } else { v[mid] };
            (k, med)
        })
        .collect();
    let before = records.len();
    let kept: Vec<TripRecord> = records
        .into_iter()
        .filter(|r| match (r.distance_miles, medians.get(&r.od())) {
            (Some(d), Some(&med)) => !(d > factor * med),
            _ => true,
        })
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Trip-weighted mean duration in hours for each observed OD pair.
pub fn mean_durations(records: &[TripRecord], n: usize) -> Grid<Option<f64>> {
    let mut sum = Grid::zeros(n);
    let mut count = Grid::filled(n, 0u64);
    for r in records {
        if let Some(s) = r.duration_seconds {
            let od = r.od();
            sum[od] += s / 3600.0;
            count[od] += 1;
        }
    }
    Grid::from_fn(n, |i, j| (count[(i, j)] > 0).then(|| sum[(i, j)] / count[(i, j)] as f64))
}

/// Fills unobserved OD durations with shortest-path lengths over observed
/// edges. An unobserved self-pair gets the shortest round trip through
/// another location. Returns the full grid and the imputed pairs.
pub fn impute_durations(observed: &Grid<Option<f64>>) -> Result<(Grid<f64>, Vec<(usize, usize)>), DataError> {
    let n = observed.n();
    let sp = ShortestPaths::floyd_warshall(observed);
    let mut imputed = Vec::new();
    let mut missing = Vec::new();
    let d = Grid::from_fn(n, |i, j| {
        if let Some(v) = observed[(i, j)] {
            return v;
        }
        let v = if i == j {
            (0..n).filter(|&k| k != i).map(|k| sp.dist[(i, k)] + sp.dist[(k, i)]).fold(f64::INFINITY, f64::min)
        } else {
            sp.dist[(i, j)]
        };
        if v.is_finite() && v > 0.0 {
            imputed.push((i, j));
        } else {
            missing.push((i, j));
        }
        v
    });
    if missing.is_empty() {
        Ok((d, imputed))
    } else {
        Err(DataError::Disconnected(missing))
    }
}

/// Minimum driver supply serving `x_obs` with balanced flow, and the
/// driver flow attaining it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MinSupply {
    pub m: f64,
    pub on_trip: f64,
    pub y: Grid<f64>,
}

pub fn min_supply(x_obs: &Grid<f64>, d: &Grid<f64>) -> Result<MinSupply, DataError> {
    let n = x_obs.n();
    let excess: Vec<f64> = (0..n).map(|k| x_obs.col_sum(k) - x_obs.row_sum(k)).collect();
    let (z, relocation) = network::min_cost_rebalance(&excess, d)?;
    let on_trip: f64 = d.iter_indexed().map(|(i, j, &dij)| dij * x_obs[(i, j)]).sum();
    let y = Grid::from_fn(n, |i, j| x_obs[(i, j)] + z[(i, j)]);
    Ok(MinSupply { m: on_trip + relocation, on_trip, y })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Calibration {
    /// Driver cost per hour of trip time.
    pub cost_per_hour: f64,
    /// Mean rider value per hour of trip time.
    pub value_per_hour: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self { cost_per_hour: 20.0, value_per_hour: 60.0 }
    }
}

/// Exponential demand through the observed `(x_obs, p_obs)` point with
/// mean value `value_per_hour * d`; zero demand where nothing was observed.
pub fn calibrate_demand(x_obs: f64, p_obs: f64, d: f64, cal: &Calibration) -> DemandCurve {
    if x_obs > 0.0 {
        let theta = cal.value_per_hour * d;
        DemandCurve::Exponential { q0: x_obs * (p_obs / theta).exp(), theta }
    } else {
        DemandCurve::Zero
    }
}

/// Relocation curves used with calibrated economies: empty cars move only
/// on trips priced below $3.
pub fn relocation_phantom(n: usize) -> PhantomDemand {
    PhantomDemand::uniform(n, PhantomCurve::Bump { k: 500.0, r_max: 3.0, power: 4 })
}

/// Economy with costs `cost_per_hour d`, calibrated demand and minimum supply.
pub fn calibrate_economy(
    x_obs: &Grid<f64>,
    p_obs: &Grid<Option<f64>>,
    d: &Grid<f64>,
    cal: &Calibration,
) -> Result<(Economy, MinSupply), DataError> {
    let n = d.n();
    let demand = Grid::from_fn(n, |i, j| calibrate_demand(x_obs[(i, j)], p_obs[(i, j)].unwrap_or(0.0), d[(i, j)], cal));
    let c = d.map(|_, _, &v| cal.cost_per_hour * v);
    let supply = min_supply(x_obs, d)?;
    let economy = Economy::new(supply.m, d.clone(), c, demand, TimeUnit::Hours)?;
    Ok((economy, supply))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeeklyEconomySpec {
    pub week_index: usize,
    pub week: String,
    pub x_obs: Grid<f64>,
    pub p_obs: Grid<Option<f64>>,
    pub d: Grid<f64>,
    pub m: f64,
    pub excluded: bool,
}

/// Trips per hour and mean price per OD pair over `window_hours` of observation.
pub fn observed_flows(records: &[&TripRecord], n: usize, window_hours: f64) -> (Grid<f64>, Grid<Option<f64>>) {
    let mut count = Grid::filled(n, 0u64);
    let mut revenue = Grid::zeros(n);
    for r in records {
        count[r.od()] += 1;
        revenue[r.od()] += r.price();
    }
    let x = count.map(|_, _, &c| c as f64 / window_hours);
    let p = Grid::from_fn(n, |i, j| (count[(i, j)] > 0).then(|| revenue[(i, j)] / count[(i, j)] as f64));
    (x, p)
}

/// Trips from `sources` into `sinks` per window occurrence above `threshold`
/// mark the week as an event week.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventFilter {
    pub sources: Vec<usize>,
    pub sinks: Vec<usize>,
    pub threshold: u64,
}

impl Default for EventFilter {
    fn default() -> Self {
        Self { sources: vec![5, 6, 7, 8, 21, 22, 32], sinks: vec![33], threshold: 300 }
    }
}

/// Week labels whose windowed source-to-sink trip count exceeds the threshold.
pub fn detect_event_days(windowed: &[&TripRecord], filter: &EventFilter) -> BTreeSet<String> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for r in windowed {
        if filter.sources.contains(&r.pickup) && filter.sinks.contains(&r.dropoff) {
            *counts.entry(week_label(&r.start)).or_default() += 1;
        }
    }
    counts.into_iter().filter(|&(_, c)| c > filter.threshold).map(|(w, _)| w).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub n: usize,
    pub window: TimeWindow,
    pub calibration: Calibration,
    pub outlier_factor: f64,
    /// `None` disables event-week exclusion.
    pub events: Option<EventFilter>,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            n: 77,
            window: TimeWindow::default(),
            calibration: Calibration::default(),
            outlier_factor: 30.0,
            events: Some(EventFilter::default()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub outliers_dropped: usize,
    pub imputed_pairs: Vec<(usize, usize)>,
    pub excluded_weeks: Vec<String>,
    pub weeks: usize,
}

pub struct WeeklyBuild {
    pub weeks: Vec<(WeeklyEconomySpec, Option<Economy>)>,
    pub durations: Grid<f64>,
    pub summary: PipelineSummary,
}

fn pooled_durations(records: &[TripRecord], params: &PipelineParams) -> Result<(Grid<f64>, Vec<(usize, usize)>), DataError> {
    let pool: Vec<TripRecord> = records.iter().filter(|r| params.window.in_range(&r.start)).cloned().collect();
    impute_durations(&mean_durations(&pool, params.n))
}

/// One calibrated economy per ISO week with windowed trips. Durations are
/// pooled over every in-range record; excluded weeks carry no economy.
pub fn build_week_economies(records: Vec<TripRecord>, params: &PipelineParams) -> Result<WeeklyBuild, DataError> {
    let (records, outliers_dropped) = drop_distance_outliers(records, params.outlier_factor);
    if !records.iter().any(|r| params.window.contains(&r.start)) {
        return Err(DataError::EmptyWindow);
    }
    let (durations, imputed_pairs) = pooled_durations(&records, params)?;
    let windowed: Vec<&TripRecord> = records.iter().filter(|r| params.window.contains(&r.start)).collect();
    let excluded = params.events.as_ref().map(|f| detect_event_days(&windowed, f)).unwrap_or_default();
    let mut by_week: BTreeMap<String, Vec<&TripRecord>> = BTreeMap::new();
    for r in &windowed {
        by_week.entry(week_label(&r.start)).or_default().push(r);
    }
    let mut weeks = Vec::new();
    for (k, (label, recs)) in by_week.into_iter().enumerate() {
        let (x_obs, p_obs) = observed_flows(&recs, params.n, params.window.hours());
        let is_excluded = excluded.contains(&label);
        let (economy, m) = if is_excluded {
            (None, min_supply(&x_obs, &durations)?.m)
        } else {
            let (e, s) = calibrate_economy(&x_obs, &p_obs, &durations, &params.calibration)?;
            (Some(e), s.m)
        };
        let spec = WeeklyEconomySpec { week_index: k, week: label, x_obs, p_obs, d: durations.clone(), m, excluded: is_excluded };
        weeks.push((spec, economy));
    }
    let summary = PipelineSummary {
        outliers_dropped,
        imputed_pairs,
        excluded_weeks: excluded.into_iter().collect(),
        weeks: weeks.len(),
    };
    Ok(WeeklyBuild { weeks, durations, summary })
}

/// A single economy from the average windowed flow over all non-excluded weeks.
pub fn build_stationary_economy(
    records: Vec<TripRecord>,
    params: &PipelineParams,
) -> Result<(WeeklyEconomySpec, Economy, PipelineSummary), DataError> {
    let (records, outliers_dropped) = drop_distance_outliers(records, params.outlier_factor);
    let (durations, imputed_pairs) = pooled_durations(&records, params)?;
    let windowed: Vec<&TripRecord> = records.iter().filter(|r| params.window.contains(&r.start)).collect();
    let excluded = params.events.as_ref().map(|f| detect_event_days(&windowed, f)).unwrap_or_default();
    let kept: Vec<&TripRecord> =
        windowed.into_iter().filter(|r| !excluded.contains(&week_label(&r.start))).collect();
    let weeks: BTreeSet<String> = kept.iter().map(|r| week_label(&r.start)).collect();
    if weeks.is_empty() {
        return Err(DataError::EmptyWindow);
    }
    let (x_obs, p_obs) = observed_flows(&kept, params.n, params.window.hours() * weeks.len() as f64);
    let (economy, supply) = calibrate_economy(&x_obs, &p_obs, &durations, &params.calibration)?;
    let spec = WeeklyEconomySpec {
        week_index: 0,
        week: "pooled".into(),
        x_obs,
        p_obs,
        d: durations,
        m: supply.m,
        excluded: false,
    };
    let summary = PipelineSummary {
        outliers_dropped,
        imputed_pairs,
        excluded_weeks: excluded.into_iter().collect(),
        weeks: weeks.len(),
    };
    Ok((spec, economy, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "Trip Start Timestamp,Trip Seconds,Trip Miles,Pickup Community Area,Dropoff Community Area,Fare,Additional Charges\n";

    #[test]
    fn parse_skips_missing_area_and_reports_bad_rows() {
        let csv = format!(
            "{HEADER}01/02/2019 07:15:00 AM,600,2.5,1,2,10.0,2.5\n01/02/2019 07:15:00 AM,600,2.5,1,,10.0,2.5\n01/02/2019 07:30:00 AM,abc,2.5,2,1,5,0\n"
        );
        let (recs, stats) = parse_trips(csv.as_bytes(), &ColumnMap::default(), 3).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].price(), 12.5);
        assert_eq!(stats.missing_area, 1);
        assert_eq!(stats.errors.len(), 1);
        assert_eq!(stats.errors[0].line, 4);
    }

    #[test]
    fn missing_column_aborts() {
        let err = parse_trips("Fare\n1\n".as_bytes(), &ColumnMap::default(), 3).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(c) if c == "Trip Start Timestamp"));
    }

    #[test]
    fn calibration_examples() {
        let cal = Calibration::default();
        match calibrate_demand(4.0, 36.65, 1.0 / 3.0, &cal) {
            DemandCurve::Exponential { q0, theta } => {
                assert!((theta - 20.0).abs() < 1e-12);
                assert!((q0 - 25.00).abs() < 5e-3, "{q0}");
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(calibrate_demand(0.0, 0.0, 1.0, &cal), DemandCurve::Zero);
        assert_eq!(calibrate_demand(3.0, 0.0, 1.0, &cal), DemandCurve::Exponential { q0: 3.0, theta: 60.0 });
    }

    #[test]
    fn min_supply_of_example_flow() {
        let x = Grid::from_row_major(vec![0.0, 4.0, 0.0, 8.0]).unwrap();
        let d = Grid::from_row_major(vec![10.0, 20.0, 20.0, 10.0]).unwrap();
        let s = min_supply(&x, &d).unwrap();
        assert!((s.m - 240.0).abs() < 1e-9);
        let balanced = Grid::from_row_major(vec![1.0, 2.0, 2.0, 3.0]).unwrap();
        let s = min_supply(&balanced, &d).unwrap();
        assert_eq!(s.m, s.on_trip);
    }

    #[test]
    fn event_threshold() {
        let ts = NaiveDate::from_ymd_opt(2019, 6, 5).unwrap().and_hms_opt(7, 10, 0).unwrap();
        let trip = TripRecord { start: ts, pickup: 32, dropoff: 33, duration_seconds: Some(600.0), distance_miles: Some(2.0), fare: 10.0, additional: 0.0 };
        let many = vec![trip.clone(); 350];
        let refs: Vec<&TripRecord> = many.iter().collect();
        assert_eq!(detect_event_days(&refs, &EventFilter::default()).len(), 1);
        let refs: Vec<&TripRecord> = many.iter().take(299).collect();
        assert!(detect_event_days(&refs, &EventFilter::default()).is_empty());
    }

    #[test]
    fn unobserved_self_pair_uses_round_trip() {
        let mut obs = Grid::filled(3, None);
        obs[(0, 1)] = Some(0.2);
        obs[(1, 0)] = Some(0.3);
        obs[(1, 2)] = Some(0.1);
        obs[(2, 1)] = Some(0.1);
        let (d, imputed) = impute_durations(&obs).unwrap();
        assert!((d[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((d[(0, 2)] - 0.3).abs() < 1e-15);
        assert_eq!(imputed.len(), 5);
    }
}
