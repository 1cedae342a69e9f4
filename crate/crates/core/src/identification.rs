//! Identification of cell parameters from loop-detector counts and speeds.
//!
//! Sensor `j` sits at the upstream boundary of cell `j`; the last sensor sits at
//! the stretch exit. For each cell the per-period samples of its sensor are
//! turned into fundamental-diagram points, split into free-flow and congested
//! regimes by a speed threshold, and fitted with two lines: a least-squares
//! line through the origin (free flow) and a quantile-regression line
//! (congestion).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctm::{CellParams, StretchParams};
use crate::error::{Error, Result};
use crate::quantile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSample {
    pub timestamp_utc: DateTime<Utc>,
    pub sensor_id: String,
    /// Vehicles counted during the period (may be fractional after resampling).
    pub vehicle_count: f64,
    pub avg_speed_kmh: f64,
    pub period_s: f64,
}

impl SensorSample {
    pub fn validate(&self) -> Result<()> {
        if !(self.vehicle_count >= 0.0 && self.vehicle_count.is_finite()) {
            return Err(Error::Data(format!(
                "negative vehicle count {} for {}",
                self.vehicle_count, self.sensor_id
            )));
        }
        if !(self.avg_speed_kmh >= 0.0 && self.avg_speed_kmh.is_finite()) {
            return Err(Error::Data(format!(
                "negative speed {} for {}",
                self.avg_speed_kmh, self.sensor_id
            )));
        }
        if !(self.period_s > 0.0) {
            return Err(Error::Data(format!("nonpositive period for {}", self.sensor_id)));
        }
        Ok(())
    }

    pub fn flow_vehh(&self) -> f64 {
        self.vehicle_count * 3600.0 / self.period_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Free,
    Congested,
}

/// A (density, flow) point measured while the speed was `speed_kmh`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasuredPoint {
    pub density_vehkm: f64,
    pub flow_vehh: f64,
    pub speed_kmh: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FundamentalSample {
    pub density_vehkm: f64,
    pub flow_vehh: f64,
    pub regime: Regime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagramFit {
    pub free_slope: f64,
    pub congested_slope: f64,
    pub congested_intercept: f64,
    pub rho_max: f64,
    pub q_max: f64,
    pub quantile_used: f64,
}

fn check_sorted(samples: &[SensorSample]) -> Result<()> {
    for w in samples.windows(2) {
        if w[1].sensor_id != w[0].sensor_id {
            return Err(Error::Format("samples from more than one sensor".into()));
        }
        if w[1].timestamp_utc <= w[0].timestamp_utc {
            return Err(Error::Format(format!(
                "timestamps of sensor {} not increasing at {}",
                w[0].sensor_id, w[1].timestamp_utc
            )));
        }
    }
    Ok(())
}

/// Per-sample flow in veh/h of a single, time-sorted sensor series.
pub fn flows_from_counts(samples: &[SensorSample]) -> Result<Vec<f64>> {
    check_sorted(samples)?;
    samples
        .iter()
        .map(|s| {
            s.validate()?;
            Ok(s.flow_vehh())
        })
        .collect()
}

/// `rho = flow / speed`; zero flow gives zero density whatever the speed.
pub fn density_from_speed(flow_vehh: f64, speed_kmh: f64) -> Result<f64> {
    if flow_vehh == 0.0 {
        return Ok(0.0);
    }
    if !(speed_kmh > 0.0) {
        return Err(Error::Data(format!(
            "flow {flow_vehh} veh/h measured at speed {speed_kmh}"
        )));
    }
    Ok(flow_vehh / speed_kmh)
}

/// Splits every sample into `period / target_step` sub-samples.
///
/// Counts follow the piecewise-linear interpolation of the count rate between
/// sample midpoints and are rescaled so that each source period keeps its
/// exact total; speeds are linearly interpolated between midpoints.
pub fn interpolate_to_step(samples: &[SensorSample], target_step_s: f64) -> Result<Vec<SensorSample>> {
    if samples.is_empty() {
        return Err(Error::Format("cannot interpolate an empty series".into()));
    }
    check_sorted(samples)?;
    if !(target_step_s > 0.0) {
        return Err(Error::Format("target step must be positive".into()));
    }
    let mut out = Vec::new();
    let n = samples.len();
    let mid = |i: usize| samples[i].timestamp_utc.timestamp_millis() as f64 / 1000.0 + samples[i].period_s / 2.0;
    let rate = |i: usize| samples[i].vehicle_count / samples[i].period_s;
    let lerp = |t: f64, f: &dyn Fn(usize) -> f64| -> f64 {
        if n == 1 || t <= mid(0) {
            return f(0);
        }
        if t >= mid(n - 1) {
            return f(n - 1);
        }
        let j = (1..n).find(|&j| mid(j) >= t).unwrap_or(n - 1);
        let (t0, t1) = (mid(j - 1), mid(j));
        let a = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
        f(j - 1) * (1.0 - a) + f(j) * a
    };
    let speed = |i: usize| samples[i].avg_speed_kmh;

    for s in samples {
        s.validate()?;
        let ratio = s.period_s / target_step_s;
        let parts = ratio.round() as usize;
        if parts == 0 || (ratio - parts as f64).abs() > 1e-9 {
            return Err(Error::Format(format!(
                "step {target_step_s} s does not subdivide period {} s",
                s.period_s
            )));
        }
        let start = s.timestamp_utc.timestamp_millis() as f64 / 1000.0;
        let centers: Vec<f64> = (0..parts)
            .map(|p| start + (p as f64 + 0.5) * target_step_s)
            .collect();
        let raw: Vec<f64> = centers.iter().map(|&t| lerp(t, &rate).max(0.0) * target_step_s).collect();
        let raw_total: f64 = raw.iter().sum();
        let mut counts: Vec<f64> = if raw_total > 0.0 {
            raw.iter().map(|c| c * s.vehicle_count / raw_total).collect()
        } else {
            vec![s.vehicle_count / parts as f64; parts]
        };
        // Put the rounding residue on the last sub-sample so the total is exact.
        let head: f64 = counts[..parts - 1].iter().sum();
        counts[parts - 1] = (s.vehicle_count - head).max(0.0);

        for (p, &t) in centers.iter().enumerate() {
            let ts = s.timestamp_utc
                + chrono::Duration::milliseconds((p as f64 * target_step_s * 1000.0).round() as i64);
            out.push(SensorSample {
                timestamp_utc: ts,
                sensor_id: s.sensor_id.clone(),
                vehicle_count: counts[p],
                avg_speed_kmh: lerp(t, &speed),
                period_s: target_step_s,
            });
        }
    }
    Ok(out)
}

/// Free flow iff the speed is at or above the threshold.
pub fn classify_regime(points: &[MeasuredPoint], speed_threshold_kmh: f64) -> Vec<FundamentalSample> {
    points
        .iter()
        .map(|p| FundamentalSample {
            density_vehkm: p.density_vehkm,
            flow_vehh: p.flow_vehh,
            regime: if p.speed_kmh >= speed_threshold_kmh {
                Regime::Free
            } else {
                Regime::Congested
            },
        })
        .collect()
}

fn distinct_densities(points: &[FundamentalSample]) -> bool {
    match points.first() {
        Some(first) => points
            .iter()
            .any(|p| (p.density_vehkm - first.density_vehkm).abs() > 1e-9 * first.density_vehkm.abs().max(1.0)),
        None => false,
    }
}

/// Least-squares slope of flow on density through the origin.
pub fn fit_free_flow(points: &[FundamentalSample]) -> Result<f64> {
    if points.len() < 2 || !distinct_densities(points) {
        return Err(Error::Fit(format!(
            "free-flow fit needs at least 2 distinct densities, got {} points",
            points.len()
        )));
    }
    let sxy: f64 = points.iter().map(|p| p.density_vehkm * p.flow_vehh).sum();
    let sxx: f64 = points.iter().map(|p| p.density_vehkm * p.density_vehkm).sum();
    let slope = sxy / sxx;
    if !(slope > 0.0) {
        return Err(Error::Fit(format!("free-flow slope {slope} is not positive")));
    }
    Ok(slope)
}

/// Quantile-regression line of the congested branch; returns (slope, intercept).
pub fn fit_congested(points: &[FundamentalSample], q: f64) -> Result<(f64, f64)> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Fit(format!("quantile level {q} outside (0, 1)")));
    }
    if points.len() < 2 || !distinct_densities(points) {
        return Err(Error::Fit(format!(
            "congested fit needs at least 2 distinct densities, got {} points",
            points.len()
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.density_vehkm).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.flow_vehh).collect();
    let line = quantile::fit(&xs, &ys, q)?;
    if !(line.slope < 0.0) {
        return Err(Error::Fit(format!(
            "congested slope {} is not negative; data do not look congested",
            line.slope
        )));
    }
    Ok((line.slope, line.intercept))
}

/// Cell parameters from the two regression lines.
pub fn derive_cell_params(
    length_km: f64,
    free_slope: f64,
    congested: (f64, f64),
    quantile_used: f64,
) -> Result<(CellParams, DiagramFit)> {
    let (slope, intercept) = congested;
    if !(free_slope > 0.0 && slope < 0.0) {
        return Err(Error::Fit(format!(
            "need free slope > 0 > congested slope, got {free_slope} and {slope}"
        )));
    }
    if (free_slope - slope).abs() < f64::EPSILON * free_slope {
        return Err(Error::Fit("regression lines are parallel".into()));
    }
    let rho_max = -intercept / slope;
    let rho_star = intercept / (free_slope - slope);
    let q_max = free_slope * rho_star;
    if !(rho_star > 0.0 && q_max > 0.0 && rho_max > rho_star) {
        return Err(Error::Fit(format!(
            "lines intersect at density {rho_star}, flow {q_max}, jam density {rho_max}"
        )));
    }
    let cell = CellParams::new(length_km, free_slope, -slope, q_max, rho_max)?;
    Ok((
        cell,
        DiagramFit {
            free_slope,
            congested_slope: slope,
            congested_intercept: intercept,
            rho_max,
            q_max,
            quantile_used,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationConfig {
    /// Cell lengths in km, one per cell (sensor count minus one).
    pub cell_lengths_km: Vec<f64>,
    pub step_s: f64,
    pub speed_threshold_kmh: f64,
    pub quantile: f64,
    /// Sensor ids in driving order; natural ordering of the ids when absent.
    pub sensor_order: Option<Vec<String>>,
    /// Reassign points to the closer regression line after the threshold
    /// split and trim outliers before the final fit.
    pub refine: bool,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        IdentificationConfig {
            cell_lengths_km: crate::ctm::a13_cells().iter().map(|c| c.length_km).collect(),
            step_s: 10.0,
            speed_threshold_kmh: 70.0,
            quantile: 0.5,
            sensor_order: None,
            refine: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFitReport {
    pub cell: usize,
    pub sensor_id: String,
    pub fit: DiagramFit,
    pub free_points: usize,
    pub congested_points: usize,
    pub dropped_samples: usize,
    /// Points set aside as outliers by the refinement step.
    pub trimmed_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub quantile: f64,
    pub speed_threshold_kmh: f64,
    pub cells: Vec<CellFitReport>,
}

/// Boundary flows recovered from the first and last sensors at the CTM step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySeries {
    pub inflow_vehh: Vec<f64>,
    pub downstream_supply_vehh: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identification {
    pub params: StretchParams,
    pub report: FitReport,
    pub boundary: BoundarySeries,
}

fn natural_key(id: &str) -> (String, u64) {
    let digits: String = id.chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    let number = digits.chars().rev().collect::<String>().parse().unwrap_or(0);
    (id[..id.len() - digits.len()].to_string(), number)
}

/// Groups samples per sensor, each series sorted by time.
pub fn group_by_sensor(samples: &[SensorSample]) -> BTreeMap<String, Vec<SensorSample>> {
    let mut map: BTreeMap<String, Vec<SensorSample>> = BTreeMap::new();
    for s in samples {
        map.entry(s.sensor_id.clone()).or_default().push(s.clone());
    }
    for series in map.values_mut() {
        series.sort_by_key(|s| s.timestamp_utc);
    }
    map
}

fn identify_cell(
    cell: usize,
    length_km: f64,
    sensor: &str,
    series: &[SensorSample],
    config: &IdentificationConfig,
) -> Result<(CellParams, CellFitReport)> {
    let flows = flows_from_counts(series)?;
    let mut dropped = 0;
    let mut points = Vec::with_capacity(series.len());
    for (s, &flow) in series.iter().zip(&flows) {
        match density_from_speed(flow, s.avg_speed_kmh) {
            Ok(rho) if flow > 0.0 => points.push(MeasuredPoint {
                density_vehkm: rho,
                flow_vehh: flow,
                speed_kmh: s.avg_speed_kmh,
            }),
            // Empty road carries no information about either branch.
            Ok(_) => {}
            Err(_) => dropped += 1,
        }
    }
    let samples = classify_regime(&points, config.speed_threshold_kmh);
    let (mut free, mut congested): (Vec<FundamentalSample>, Vec<FundamentalSample>) =
        samples.into_iter().partition(|p| p.regime == Regime::Free);
    if congested.is_empty() {
        return Err(Error::Fit("no congested samples".into()));
    }
    let mut free_slope = fit_free_flow(&free)?;
    let mut line = fit_congested(&congested, config.quantile)?;
    let mut trimmed = 0;
    if config.refine {
        let all: Vec<FundamentalSample> = free.iter().chain(&congested).copied().collect();
        (free, congested, trimmed) = refine_split(&all, free_slope, line, config.quantile);
        free_slope = fit_free_flow(&free)?;
        line = fit_congested(&congested, config.quantile)?;
    }
    let (params, fit) = derive_cell_params(length_km, free_slope, line, config.quantile)?;
    Ok((
        params,
        CellFitReport {
            cell,
            sensor_id: sensor.to_string(),
            fit,
            free_points: free.len(),
            congested_points: congested.len(),
            dropped_samples: dropped,
            trimmed_points: trimmed,
        },
    ))
}

/// Residual of `p` against the free line and the congested line.
fn residuals(p: &FundamentalSample, free_slope: f64, line: (f64, f64)) -> (f64, f64) {
    let free = p.flow_vehh - free_slope * p.density_vehkm;
    let congested = p.flow_vehh - (line.0 * p.density_vehkm + line.1);
    (free, congested)
}

fn median_abs(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let k = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(k, f64::total_cmp);
    *m
}

/// Points near the kink of the diagram move at speeds above the threshold
/// while already congested, so the threshold split misplaces them. Each point
/// is reassigned to the line it is closer to, and points lying further than
/// 3.5 robust standard deviations from their line are set aside. Minutes that
/// straddle the critical density fall below both lines and are caught by the
/// trimming.
fn refine_split(
    points: &[FundamentalSample],
    mut free_slope: f64,
    mut line: (f64, f64),
    q: f64,
) -> (Vec<FundamentalSample>, Vec<FundamentalSample>, usize) {
    let split = |free_slope: f64, line: (f64, f64)| {
        let mut free = Vec::new();
        let mut congested = Vec::new();
        for p in points {
            let (rf, rc) = residuals(p, free_slope, line);
            if rf.abs() <= rc.abs() {
                free.push(FundamentalSample { regime: Regime::Free, ..*p });
            } else {
                congested.push(FundamentalSample { regime: Regime::Congested, ..*p });
            }
        }
        (free, congested)
    };
    let (mut free, mut congested) = split(free_slope, line);
    for _ in 0..20 {
        let (Ok(f), Ok(c)) = (fit_free_flow(&free), fit_congested(&congested, q)) else {
            break;
        };
        if f == free_slope && c == line {
            break;
        }
        free_slope = f;
        line = c;
        (free, congested) = split(free_slope, line);
    }

    let trim = |set: Vec<FundamentalSample>, pick: &dyn Fn(&FundamentalSample) -> f64| {
        let mut abs: Vec<f64> = set.iter().map(|p| pick(p).abs()).collect();
        let scale = set.iter().map(|p| p.flow_vehh).fold(0.0, f64::max);
        let limit = 3.5 * 1.4826 * median_abs(&mut abs) + 1e-9 * scale;
        let kept: Vec<FundamentalSample> = set.iter().filter(|p| pick(p).abs() <= limit).copied().collect();
        // Trimming must never starve the fit.
        if kept.len() >= 2 { kept } else { set }
    };
    let total = free.len() + congested.len();
    let free = trim(free, &|p| residuals(p, free_slope, line).0);
    let congested = trim(congested, &|p| residuals(p, free_slope, line).1);
    let trimmed = total - free.len() - congested.len();
    (free, congested, trimmed)
}

/// Runs the full identification procedure over every cell.
pub fn identify_stretch(samples: &[SensorSample], config: &IdentificationConfig) -> Result<Identification> {
    let groups = group_by_sensor(samples);
    let order: Vec<String> = match &config.sensor_order {
        Some(order) => order.clone(),
        None => {
            let mut ids: Vec<String> = groups.keys().cloned().collect();
            ids.sort_by_key(|id| natural_key(id));
            ids
        }
    };
    let cells = config.cell_lengths_km.len();
    if order.len() < cells + 1 {
        return Err(Error::Data(format!(
            "{} cells need {} sensors, found {}",
            cells,
            cells + 1,
            order.len()
        )));
    }
    let series: Vec<&Vec<SensorSample>> = order
        .iter()
        .map(|id| {
            groups
                .get(id)
                .ok_or_else(|| Error::Data(format!("sensor {id} has no samples")))
        })
        .collect::<Result<_>>()?;

    let span = |s: &Vec<SensorSample>| (s.first().map(|x| x.timestamp_utc), s.last().map(|x| x.timestamp_utc));
    let reference = span(series[0]);
    if series.iter().any(|s| span(s) != reference) {
        return Err(Error::Data("sensors cover different time ranges".into()));
    }

    let fitted: Vec<(CellParams, CellFitReport)> = (0..cells)
        .into_par_iter()
        .map(|c| {
            identify_cell(c + 1, config.cell_lengths_km[c], &order[c], series[c], config).map_err(|e| {
                Error::Identification {
                    cell: c + 1,
                    cause: e.to_string(),
                }
            })
        })
        .collect::<Result<_>>()?;

    let (cell_params, reports): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    let params = StretchParams::new(cell_params, config.step_s)?;

    let entry = interpolate_to_step(series[0], config.step_s)?;
    let exit = interpolate_to_step(series[cells], config.step_s)?;
    let last = params.cells()[cells - 1];
    let boundary = BoundarySeries {
        inflow_vehh: entry.iter().map(SensorSample::flow_vehh).collect(),
        downstream_supply_vehh: exit
            .iter()
            .map(|s| {
                if s.avg_speed_kmh < config.speed_threshold_kmh {
                    s.flow_vehh()
                } else {
                    last.max_capacity_vehh
                }
            })
            .collect(),
    };

    Ok(Identification {
        params,
        report: FitReport {
            quantile: config.quantile,
            speed_threshold_kmh: config.speed_threshold_kmh,
            cells: reports,
        },
        boundary,
    })
}

const SENSOR_COLUMNS: [&str; 5] = [
    "timestamp_utc",
    "sensor_id",
    "vehicle_count",
    "avg_speed_kmh",
    "period_s",
];

pub fn write_sensor_csv<W: Write>(samples: &[SensorSample], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(SENSOR_COLUMNS)?;
    for s in samples {
        wtr.write_record([
            s.timestamp_utc.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            s.sensor_id.clone(),
            format!("{}", s.vehicle_count),
            format!("{}", s.avg_speed_kmh),
            format!("{}", s.period_s),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_sensor_csv<R: Read>(reader: R) -> Result<Vec<SensorSample>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 5];
    for (k, col) in SENSOR_COLUMNS.iter().enumerate() {
        idx[k] = headers
            .iter()
            .position(|h| h.trim() == *col)
            .ok_or_else(|| Error::MissingColumn(col.to_string()))?;
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |k: usize| rec.get(idx[k]).unwrap_or("").trim();
        let num = |k: usize| -> Result<f64> {
            field(k).parse::<f64>().map_err(|_| {
                Error::Format(format!(
                    "row {}: cannot parse {} = `{}`",
                    line + 2,
                    SENSOR_COLUMNS[k],
                    field(k)
                ))
            })
        };
        let ts = DateTime::parse_from_rfc3339(field(0))
            .map_err(|e| Error::Format(format!("row {}: bad timestamp `{}`: {e}", line + 2, field(0))))?
            .with_timezone(&Utc);
        let sample = SensorSample {
            timestamp_utc: ts,
            sensor_id: field(1).to_string(),
            vehicle_count: num(2)?,
            avg_speed_kmh: num(3)?,
            period_s: num(4)?,
        };
        sample.validate()?;
        out.push(sample);
    }
    Ok(out)
}

pub fn write_boundary_csv<W: Write>(boundary: &BoundarySeries, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["step_index", "inflow_vehh", "downstream_supply_vehh"])?;
    for (i, (a, b)) in boundary
        .inflow_vehh
        .iter()
        .zip(&boundary.downstream_supply_vehh)
        .enumerate()
    {
        wtr.write_record([i.to_string(), a.to_string(), b.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_boundary_csv<R: Read>(reader: R) -> Result<BoundarySeries> {
    #[derive(Deserialize)]
    struct Row {
        step_index: usize,
        inflow_vehh: f64,
        downstream_supply_vehh: f64,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in ["step_index", "inflow_vehh", "downstream_supply_vehh"] {
        if !headers.iter().any(|h| h.trim() == col) {
            return Err(Error::MissingColumn(col.into()));
        }
    }
    let mut rows: Vec<Row> = Vec::new();
    for r in rdr.deserialize() {
        rows.push(r?);
    }
    rows.sort_by_key(|r| r.step_index);
    if rows.is_empty() || rows.iter().enumerate().any(|(i, r)| r.step_index != i) {
        return Err(Error::Format("boundary steps must be contiguous from 0".into()));
    }
    Ok(BoundarySeries {
        inflow_vehh: rows.iter().map(|r| r.inflow_vehh).collect(),
        downstream_supply_vehh: rows.iter().map(|r| r.downstream_supply_vehh).collect(),
    })
}
