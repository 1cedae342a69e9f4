//! Cell Transmission Model of a ramp-free highway stretch.
//!
//! The stretch is a chain of `N >= 2` cells. A charging station sits between
//! cells 1 and 2: part of the flow leaving cell 1 can be diverted into the
//! station (road-to-station, r2s) and vehicles leaving the station merge into
//! cell 2 (station-to-road, s2r). Flows are in veh/h, densities in veh/km,
//! lengths in km and the integration step is given in seconds.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack accepted when checking density bounds after a step.
const DENSITY_TOLERANCE: f64 = 1e-9;

/// Physical parameters of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParams {
    pub length_km: f64,
    pub free_flow_speed_kmh: f64,
    pub wave_speed_kmh: f64,
    pub max_capacity_vehh: f64,
    pub max_density_vehkm: f64,
}

impl CellParams {
    pub fn new(
        length_km: f64,
        free_flow_speed_kmh: f64,
        wave_speed_kmh: f64,
        max_capacity_vehh: f64,
        max_density_vehkm: f64,
    ) -> Result<Self> {
        let cell = CellParams {
            length_km,
            free_flow_speed_kmh,
            wave_speed_kmh,
            max_capacity_vehh,
            max_density_vehkm,
        };
        cell.validate()?;
        Ok(cell)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("length_km", self.length_km),
            ("free_flow_speed_kmh", self.free_flow_speed_kmh),
            ("wave_speed_kmh", self.wave_speed_kmh),
            ("max_capacity_vehh", self.max_capacity_vehh),
            ("max_density_vehkm", self.max_density_vehkm),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidParams(format!(
                    "{name} must be finite and strictly positive, got {value}"
                )));
            }
        }
        if self.wave_speed_kmh >= self.free_flow_speed_kmh {
            return Err(Error::InvalidParams(format!(
                "wave speed {} must be below free-flow speed {}",
                self.wave_speed_kmh, self.free_flow_speed_kmh
            )));
        }
        let free_branch_at_jam = self.free_flow_speed_kmh * self.max_density_vehkm;
        if self.max_capacity_vehh > free_branch_at_jam * (1.0 + 1e-12) {
            return Err(Error::InvalidParams(format!(
                "capacity {} exceeds free-flow branch at jam density {}",
                self.max_capacity_vehh, free_branch_at_jam
            )));
        }
        Ok(())
    }

    /// Density at which the free-flow branch reaches capacity.
    pub fn critical_density(&self) -> f64 {
        self.max_capacity_vehh / self.free_flow_speed_kmh
    }

    /// Free-flow crossing time of the cell, in hours.
    pub fn free_flow_time_h(&self) -> f64 {
        self.length_km / self.free_flow_speed_kmh
    }

    /// Flow of the triangular/trapezoidal fundamental diagram at `rho`.
    pub fn equilibrium_flow(&self, rho: f64) -> f64 {
        (self.free_flow_speed_kmh * rho)
            .min(self.wave_speed_kmh * (self.max_density_vehkm - rho))
            .min(self.max_capacity_vehh)
            .max(0.0)
    }

    fn check_density(&self, rho: f64) -> Result<()> {
        if !(rho.is_finite() && rho >= 0.0 && rho <= self.max_density_vehkm) {
            return Err(Error::Domain(format!(
                "density {rho} outside [0, {}]",
                self.max_density_vehkm
            )));
        }
        Ok(())
    }
}

/// Sending function: `min(v * rho, q_max)`.
pub fn demand(cell: &CellParams, rho: f64) -> Result<f64> {
    cell.check_density(rho)?;
    Ok((cell.free_flow_speed_kmh * rho).min(cell.max_capacity_vehh))
}

/// Receiving function: `min(w * (rho_max - rho), q_max)`.
pub fn supply(cell: &CellParams, rho: f64) -> Result<f64> {
    cell.check_density(rho)?;
    Ok((cell.wave_speed_kmh * (cell.max_density_vehkm - rho)).min(cell.max_capacity_vehh))
}

/// The seven cells identified on the A13 stretch, sampled at 10 s.
pub fn a13_cells() -> Vec<CellParams> {
    const ROWS: [(f64, f64, f64, f64, f64); 7] = [
        (0.39, 103.15, 21.23, 1.26e5, 7.2e3),
        (0.41, 109.34, 26.19, 1.38e5, 6.56e3),
        (0.365, 111.67, 19.91, 1.28e5, 7.58e3),
        (0.365, 112.77, 26.13, 1.40e5, 6.62e3),
        (0.365, 113.07, 27.73, 1.40e5, 6.29e3),
        (0.5, 114.12, 26.62, 1.38e5, 6.41e3),
        (0.5, 114.18, 31.11, 1.40e5, 5.73e3),
    ];
    ROWS.iter()
        .map(|&(l, v, w, q, r)| CellParams {
            length_km: l,
            free_flow_speed_kmh: v,
            wave_speed_kmh: w,
            max_capacity_vehh: q,
            max_density_vehkm: r,
        })
        .collect()
}

/// Cell chain plus integration step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StretchParams {
    cells: Vec<CellParams>,
    step_s: f64,
}

impl StretchParams {
    pub fn new(cells: Vec<CellParams>, step_s: f64) -> Result<Self> {
        if cells.len() < 2 {
            return Err(Error::InvalidParams(format!(
                "a stretch needs at least 2 cells, got {}",
                cells.len()
            )));
        }
        if !(step_s.is_finite() && step_s > 0.0) {
            return Err(Error::InvalidParams(format!("step must be positive, got {step_s}")));
        }
        for cell in &cells {
            cell.validate()?;
        }
        let params = StretchParams { cells, step_s };
        let (ratios, _) = params.cfl_ratio();
        if let Some((idx, &ratio)) = ratios.iter().enumerate().find(|(_, &r)| r >= 1.0) {
            return Err(Error::Sampling { cell: idx + 1, ratio });
        }
        Ok(params)
    }

    /// Table II stretch at T = 10 s.
    pub fn a13() -> Self {
        StretchParams::new(a13_cells(), 10.0).expect("A13 parameters are valid")
    }

    pub fn cells(&self) -> &[CellParams] {
        &self.cells
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn step_s(&self) -> f64 {
        self.step_s
    }

    pub fn step_h(&self) -> f64 {
        self.step_s / 3600.0
    }

    /// `T * v / L` for each cell, and the maximum over cells.
    pub fn cfl_ratio(&self) -> (Vec<f64>, f64) {
        let step_h = self.step_h();
        let ratios: Vec<f64> = self
            .cells
            .iter()
            .map(|c| step_h * c.free_flow_speed_kmh / c.length_km)
            .collect();
        let max = ratios.iter().copied().fold(0.0, f64::max);
        (ratios, max)
    }

    /// Time to cross the stretch at free-flow speed, in hours.
    pub fn free_flow_traversal_h(&self) -> f64 {
        self.cells.iter().map(CellParams::free_flow_time_h).sum()
    }

    pub fn free_flow_traversal_min(&self) -> f64 {
        self.free_flow_traversal_h() * 60.0
    }

    pub fn total_length_km(&self) -> f64 {
        self.cells.iter().map(|c| c.length_km).sum()
    }

    /// Number of vehicles held by `state`.
    pub fn vehicles(&self, state: &CtmState) -> f64 {
        self.cells
            .iter()
            .zip(&state.densities_vehkm)
            .map(|(c, rho)| c.length_km * rho)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtmState {
    pub densities_vehkm: Vec<f64>,
    pub step_index: u64,
}

impl CtmState {
    pub fn empty(params: &StretchParams) -> Self {
        CtmState {
            densities_vehkm: vec![0.0; params.num_cells()],
            step_index: 0,
        }
    }

    pub fn new(params: &StretchParams, densities_vehkm: Vec<f64>) -> Result<Self> {
        if densities_vehkm.len() != params.num_cells() {
            return Err(Error::InvalidParams(format!(
                "expected {} densities, got {}",
                params.num_cells(),
                densities_vehkm.len()
            )));
        }
        for (cell, &rho) in params.cells().iter().zip(&densities_vehkm) {
            cell.check_density(rho)?;
        }
        Ok(CtmState {
            densities_vehkm,
            step_index: 0,
        })
    }
}

/// Flows exchanged with the charging station during one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StationCoupling {
    pub r2s_vehh: f64,
    pub s2r_vehh: f64,
}

impl StationCoupling {
    pub const NONE: StationCoupling = StationCoupling {
        r2s_vehh: 0.0,
        s2r_vehh: 0.0,
    };
}

/// Which stream gets cell 2's receiving capacity first at the station merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePriority {
    #[default]
    Station,
    Mainline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CtmOptions {
    pub merge_priority: MergePriority,
    /// Extra time per cell is capped at `jam_cap_factor * L / v`.
    pub jam_cap_factor: f64,
    /// Below this density a cell is considered empty and runs at free-flow speed.
    pub vacuum_density_vehkm: f64,
}

impl Default for CtmOptions {
    fn default() -> Self {
        CtmOptions {
            merge_priority: MergePriority::Station,
            jam_cap_factor: 10.0,
            vacuum_density_vehkm: 1e-6,
        }
    }
}

/// Flows realized during one step. `outflow[l]` includes the r2s diversion for
/// cell 1 and `inflow[l]` includes the admitted s2r merge for cell 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFlows {
    pub inflow_vehh: Vec<f64>,
    pub outflow_vehh: Vec<f64>,
    pub r2s_vehh: f64,
    /// Portion of the requested s2r that cell 2 could accept.
    pub s2r_vehh: f64,
}

impl StepFlows {
    /// Flow entering the stretch (phi_1).
    pub fn entering(&self) -> f64 {
        self.inflow_vehh[0]
    }

    /// Flow leaving the stretch (phi_{N+1}).
    pub fn exiting(&self) -> f64 {
        *self.outflow_vehh.last().expect("non-empty stretch")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: CtmState,
    pub flows: StepFlows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TravelTimeReport {
    pub per_cell_extra_h: Vec<f64>,
    pub total_extra_h: f64,
}

impl TravelTimeReport {
    pub fn zeros(n: usize) -> Self {
        TravelTimeReport {
            per_cell_extra_h: vec![0.0; n],
            total_extra_h: 0.0,
        }
    }

    fn from_cells(per_cell_extra_h: Vec<f64>) -> Self {
        let total_extra_h = per_cell_extra_h.iter().sum();
        TravelTimeReport {
            per_cell_extra_h,
            total_extra_h,
        }
    }

    /// Extra time accumulated downstream of the station (cells 2..N).
    pub fn downstream_of_station_h(&self) -> f64 {
        self.per_cell_extra_h[1..].iter().sum()
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[TravelTimeReport]) -> Self {
        assert!(!reports.is_empty(), "mean of zero reports");
        let n = reports[0].per_cell_extra_h.len();
        let mut acc = vec![0.0; n];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(&r.per_cell_extra_h) {
                *a += v;
            }
        }
        let k = reports.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        TravelTimeReport::from_cells(acc)
    }
}

/// A stretch together with the modelling options of the station merge and
/// travel-time accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTransmissionModel {
    pub params: StretchParams,
    pub options: CtmOptions,
}

impl CellTransmissionModel {
    pub fn new(params: StretchParams) -> Self {
        CellTransmissionModel {
            params,
            options: CtmOptions::default(),
        }
    }

    pub fn with_options(params: StretchParams, options: CtmOptions) -> Self {
        CellTransmissionModel { params, options }
    }

    /// Advances the state by one step.
    ///
    /// `inflow` is the upstream demand; the stretch admits at most cell 1's
    /// supply and the admitted value is reported in the returned flows. The
    /// requested s2r may likewise be only partially admitted.
    pub fn step(
        &self,
        state: &CtmState,
        inflow: f64,
        downstream_supply: f64,
        coupling: StationCoupling,
    ) -> Result<StepOutcome> {
        let cells = self.params.cells();
        let n = cells.len();
        if state.densities_vehkm.len() != n {
            return Err(Error::InvalidParams(format!(
                "state has {} cells, stretch has {n}",
                state.densities_vehkm.len()
            )));
        }
        for (name, v) in [
            ("inflow", inflow),
            ("downstream supply", downstream_supply),
            ("r2s", coupling.r2s_vehh),
            ("s2r", coupling.s2r_vehh),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!("{name} must be nonnegative, got {v}")));
            }
        }

        let rho = &state.densities_vehkm;
        let mut send = Vec::with_capacity(n);
        let mut recv = Vec::with_capacity(n);
        for (cell, &r) in cells.iter().zip(rho) {
            send.push(demand(cell, r)?);
            recv.push(supply(cell, r)?);
        }

        let r2s = coupling.r2s_vehh;
        if r2s > send[0] * (1.0 + 1e-12) + 1e-9 {
            return Err(Error::Domain(format!(
                "r2s {r2s} exceeds cell-1 sending flow {}",
                send[0]
            )));
        }
        let r2s = r2s.min(send[0]);

        let mut inflow_v = vec![0.0; n];
        let mut outflow_v = vec![0.0; n];

        inflow_v[0] = inflow.min(recv[0]);

        // Station diverge/merge at the cell 1 -> cell 2 interface.
        let mainline_send = send[0] - r2s;
        let (road, s2r) = match self.options.merge_priority {
            MergePriority::Station => {
                let s2r = coupling.s2r_vehh.min(recv[1]);
                (mainline_send.min(recv[1] - s2r), s2r)
            }
            MergePriority::Mainline => {
                let road = mainline_send.min(recv[1]);
                (road, coupling.s2r_vehh.min(recv[1] - road))
            }
        };
        outflow_v[0] = r2s + road;
        inflow_v[1] = road + s2r;

        for l in 1..n - 1 {
            let f = send[l].min(recv[l + 1]);
            outflow_v[l] = f;
            inflow_v[l + 1] = f;
        }
        outflow_v[n - 1] = send[n - 1].min(downstream_supply);

        let step_h = self.params.step_h();
        let mut next = Vec::with_capacity(n);
        for (l, cell) in cells.iter().enumerate() {
            let mut r = rho[l] + step_h / cell.length_km * (inflow_v[l] - outflow_v[l]);
            let tol = DENSITY_TOLERANCE * cell.max_density_vehkm;
            if r < -tol || r > cell.max_density_vehkm + tol {
                return Err(Error::Consistency {
                    step: state.step_index,
                    detail: format!(
                        "density of cell {} left [0, {}]: {r}",
                        l + 1,
                        cell.max_density_vehkm
                    ),
                });
            }
            r = r.clamp(0.0, cell.max_density_vehkm);
            next.push(r);
        }

        Ok(StepOutcome {
            state: CtmState {
                densities_vehkm: next,
                step_index: state.step_index + 1,
            },
            flows: StepFlows {
                inflow_vehh: inflow_v,
                outflow_vehh: outflow_v,
                r2s_vehh: r2s,
                s2r_vehh: s2r,
            },
        })
    }

    /// Extra travel time per cell for the densities at the start of a step and
    /// the outflows realized during it.
    pub fn extra_travel_time(&self, state: &CtmState, flows: &StepFlows) -> TravelTimeReport {
        let per_cell = self
            .params
            .cells()
            .iter()
            .zip(&state.densities_vehkm)
            .zip(&flows.outflow_vehh)
            .map(|((cell, &rho), &out)| self.cell_extra_time(cell, rho, out))
            .collect();
        TravelTimeReport::from_cells(per_cell)
    }

    fn cell_extra_time(&self, cell: &CellParams, rho: f64, outflow: f64) -> f64 {
        if rho < self.options.vacuum_density_vehkm {
            return 0.0;
        }
        let free_time = cell.free_flow_time_h();
        let cap = self.options.jam_cap_factor * free_time;
        if outflow <= 0.0 {
            return cap;
        }
        let speed = outflow / rho;
        let extra = cell.length_km / speed - free_time;
        // Rounding leaves residues of order 1e-20 h in free flow.
        if extra <= 1e-12 * free_time {
            return 0.0;
        }
        extra.min(cap)
    }

    /// Rolls a copy of `state` forward with no station coupling and returns
    /// the extra travel time averaged over each prediction interval.
    ///
    /// `assumed_inflow` and `downstream_supply` hold one value per interval;
    /// the prediction covers `assumed_inflow.len()` intervals.
    pub fn predict(
        &self,
        state: &CtmState,
        assumed_inflow: &[f64],
        downstream_supply: &[f64],
        steps_per_interval: usize,
    ) -> Result<Vec<TravelTimeReport>> {
        if assumed_inflow.is_empty() {
            return Err(Error::Domain("prediction horizon must be at least 1".into()));
        }
        if downstream_supply.len() != assumed_inflow.len() {
            return Err(Error::Domain(format!(
                "downstream supply has {} intervals, inflow has {}",
                downstream_supply.len(),
                assumed_inflow.len()
            )));
        }
        if steps_per_interval == 0 {
            return Err(Error::Domain("steps per interval must be positive".into()));
        }
        let n = self.params.num_cells();
        let mut current = state.clone();
        let mut out = Vec::with_capacity(assumed_inflow.len());
        for (&inflow, &exit) in assumed_inflow.iter().zip(downstream_supply) {
            let mut acc = vec![0.0; n];
            for _ in 0..steps_per_interval {
                let outcome = self.step(&current, inflow, exit, StationCoupling::NONE)?;
                let report = self.extra_travel_time(&current, &outcome.flows);
                for (a, v) in acc.iter_mut().zip(&report.per_cell_extra_h) {
                    *a += v;
                }
                current = outcome.state;
            }
            acc.iter_mut().for_each(|a| *a /= steps_per_interval as f64);
            out.push(TravelTimeReport::from_cells(acc));
        }
        Ok(out)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CellRow {
    ell: usize,
    #[serde(rename = "L_km")]
    length_km: f64,
    #[serde(rename = "T_s")]
    step_s: f64,
    v_kmh: f64,
    w_kmh: f64,
    qmax_vehh: f64,
    rhomax_vehkm: f64,
}

const CELL_COLUMNS: [&str; 7] = [
    "ell",
    "L_km",
    "T_s",
    "v_kmh",
    "w_kmh",
    "qmax_vehh",
    "rhomax_vehkm",
];

/// Writes the stretch in the `ell,L_km,T_s,v_kmh,w_kmh,qmax_vehh,rhomax_vehkm` layout.
pub fn write_stretch_csv<W: Write>(params: &StretchParams, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for (i, c) in params.cells().iter().enumerate() {
        wtr.serialize(CellRow {
            ell: i + 1,
            length_km: c.length_km,
            step_s: params.step_s(),
            v_kmh: c.free_flow_speed_kmh,
            w_kmh: c.wave_speed_kmh,
            qmax_vehh: c.max_capacity_vehh,
            rhomax_vehkm: c.max_density_vehkm,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_stretch_csv<R: Read>(reader: R) -> Result<StretchParams> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in CELL_COLUMNS {
        if !headers.iter().any(|h| h.trim() == col) {
            return Err(Error::MissingColumn(col.to_string()));
        }
    }
    let mut rows: Vec<CellRow> = Vec::new();
    for row in rdr.deserialize() {
        rows.push(row?);
    }
    if rows.is_empty() {
        return Err(Error::Format("cell parameter file has no rows".into()));
    }
    rows.sort_by_key(|r| r.ell);
    for (i, r) in rows.iter().enumerate() {
        if r.ell != i + 1 {
            return Err(Error::Format(format!("cell indices must be 1..N, found {}", r.ell)));
        }
    }
    let step_s = rows[0].step_s;
    if rows.iter().any(|r| (r.step_s - step_s).abs() > 1e-12) {
        return Err(Error::Format("all cells must share the same T_s".into()));
    }
    let cells = rows
        .iter()
        .map(|r| {
            CellParams::new(r.length_km, r.v_kmh, r.w_kmh, r.qmax_vehh, r.rhomax_vehkm)
        })
        .collect::<Result<Vec<_>>>()?;
    StretchParams::new(cells, step_s)
}

pub fn load_stretch(path: &Path) -> Result<StretchParams> {
    read_stretch_csv(std::fs::File::open(path)?)
}

pub fn save_stretch(params: &StretchParams, path: &Path) -> Result<()> {
    write_stretch_csv(params, std::fs::File::create(path)?)
}
