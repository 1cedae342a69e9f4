//! Synthetic detector data with known ground truth.
//!
//! A stretch with known cell parameters is driven through a two-peak day by an
//! upstream demand and a fluctuating downstream bottleneck. Detector `j`
//! reports the equilibrium flow of cell `j` and the corresponding speed; the
//! last detector reports the flow leaving the stretch. Minute aggregates are
//! vehicle counts and flow-weighted harmonic-mean speeds.

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctm::{a13_cells, CellParams, CellTransmissionModel, CtmState, StationCoupling, StretchParams};
use crate::error::{Error, Result};
use crate::identification::{BoundarySeries, SensorSample};
use crate::pricing::DemandProfile;

/// A plateau of extra upstream demand with smooth shoulders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandPeak {
    pub start_h: f64,
    pub end_h: f64,
    pub extra_vehh: f64,
    pub ramp_h: f64,
}

impl DemandPeak {
    fn weight(&self, t_h: f64) -> f64 {
        let rise = smoothstep((t_h - (self.start_h - self.ramp_h)) / self.ramp_h);
        let fall = smoothstep(((self.end_h + self.ramp_h) - t_h) / self.ramp_h);
        rise.min(fall)
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandScenario {
    pub start_h: f64,
    pub end_h: f64,
    pub base_inflow_vehh: f64,
    pub peaks: Vec<DemandPeak>,
    /// Flow the section downstream of the stretch absorbs outside the peaks.
    pub open_supply_vehh: f64,
    /// Mean flow the downstream section absorbs during the peaks.
    pub bottleneck_vehh: f64,
    pub fluctuation_vehh: f64,
    pub fluctuation_period_min: f64,
}

impl DemandScenario {
    /// Morning congestion of about one hour around 08:00 and afternoon
    /// congestion of about three hours around 18:00.
    pub fn two_peak() -> Self {
        DemandScenario {
            start_h: 7.0,
            end_h: 20.0,
            base_inflow_vehh: 40_000.0,
            peaks: vec![
                DemandPeak {
                    start_h: 7.5,
                    end_h: 8.3,
                    extra_vehh: 26_000.0,
                    ramp_h: 0.1,
                },
                DemandPeak {
                    start_h: 16.5,
                    end_h: 19.3,
                    extra_vehh: 24_000.0,
                    ramp_h: 0.1,
                },
            ],
            open_supply_vehh: 150_000.0,
            bottleneck_vehh: 60_000.0,
            fluctuation_vehh: 45_000.0,
            fluctuation_period_min: 20.0,
        }
    }

    pub fn inflow_at(&self, t_h: f64) -> f64 {
        self.base_inflow_vehh
            + self
                .peaks
                .iter()
                .map(|p| p.extra_vehh * p.weight(t_h))
                .fold(0.0, f64::max)
    }

    /// The bottleneck is active during the peaks only, where it oscillates
    /// like a stop-and-go wave around its mean.
    pub fn downstream_supply_at(&self, t_h: f64) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * (t_h - self.start_h) * 60.0 / self.fluctuation_period_min;
        let restricted = self.bottleneck_vehh + self.fluctuation_vehh * phase.sin();
        let active = self.peaks.iter().map(|p| p.weight(t_h)).fold(0.0, f64::max);
        self.open_supply_vehh - (self.open_supply_vehh - restricted) * active
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.end_h > self.start_h) {
            return Err(Error::InvalidParams("scenario must end after it starts".into()));
        }
        if !(self.base_inflow_vehh >= 0.0 && self.fluctuation_vehh >= 0.0) {
            return Err(Error::InvalidParams("inflow and fluctuation must be nonnegative".into()));
        }
        if self.bottleneck_vehh < self.fluctuation_vehh {
            return Err(Error::InvalidParams("bottleneck flow would become negative".into()));
        }
        if !(self.fluctuation_period_min > 0.0) {
            return Err(Error::InvalidParams("fluctuation period must be positive".into()));
        }
        for p in &self.peaks {
            if !(p.end_h >= p.start_h && p.ramp_h > 0.0 && p.extra_vehh >= 0.0) {
                return Err(Error::InvalidParams(format!("malformed demand peak {p:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseLevels {
    /// Standard deviation of the multiplicative speed noise, as a fraction.
    pub speed_pct: f64,
    pub count_pct: f64,
}

impl NoiseLevels {
    pub fn uniform(pct: f64) -> Self {
        NoiseLevels {
            speed_pct: pct,
            count_pct: pct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub cells: Vec<CellParams>,
    pub step_s: f64,
    pub scenario: DemandScenario,
    pub noise: NoiseLevels,
}

impl GroundTruth {
    /// The A13 cells with `qmax` placed exactly at the intersection of the two
    /// branches so that a triangular diagram is recoverable from data.
    pub fn a13(noise: NoiseLevels) -> Self {
        let cells = a13_cells()
            .into_iter()
            .map(|c| {
                let v = c.free_flow_speed_kmh;
                let w = c.wave_speed_kmh;
                CellParams {
                    max_capacity_vehh: v * w * c.max_density_vehkm / (v + w),
                    ..c
                }
            })
            .collect();
        GroundTruth {
            cells,
            step_s: 10.0,
            scenario: DemandScenario::two_peak(),
            noise,
        }
    }

    pub fn stretch(&self) -> Result<StretchParams> {
        StretchParams::new(self.cells.clone(), self.step_s)
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.cells {
            c.validate()?;
        }
        self.scenario.validate()?;
        let n = self.noise;
        if !(n.speed_pct >= 0.0 && n.count_pct >= 0.0) {
            return Err(Error::InvalidParams("noise levels must be nonnegative".into()));
        }
        if (60.0 / self.step_s - (60.0 / self.step_s).round()).abs() > 1e-9 {
            return Err(Error::InvalidParams("step must divide one minute".into()));
        }
        Ok(())
    }

    pub fn day_start(&self) -> DateTime<Utc> {
        let secs = (self.scenario.start_h * 3600.0).round() as i64;
        Utc.with_ymd_and_hms(2019, 10, 15, 0, 0, 0).unwrap() + chrono::Duration::seconds(secs)
    }

    pub fn steps(&self) -> usize {
        ((self.scenario.end_h - self.scenario.start_h) * 3600.0 / self.step_s).round() as usize
    }
}

/// Noise-free simulation output at the CTM step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Densities at the start of every step.
    pub densities: Vec<Vec<f64>>,
    pub exit_flow_vehh: Vec<f64>,
    /// Upstream demand and downstream supply per step.
    pub boundary: BoundarySeries,
    /// Vehicles waiting upstream of the stretch at the start of every step.
    pub upstream_queue_veh: Vec<f64>,
}

/// Runs the ground-truth stretch over the scenario with an upstream point queue.
pub fn simulate_truth(truth: &GroundTruth) -> Result<Trajectory> {
    truth.validate()?;
    let params = truth.stretch()?;
    let step_h = params.step_h();
    let model = CellTransmissionModel::new(params.clone());
    let mut state = CtmState::empty(&params);
    let steps = truth.steps();
    let mut queue = 0.0;
    let mut traj = Trajectory {
        densities: Vec::with_capacity(steps),
        exit_flow_vehh: Vec::with_capacity(steps),
        boundary: BoundarySeries {
            inflow_vehh: Vec::with_capacity(steps),
            downstream_supply_vehh: Vec::with_capacity(steps),
        },
        upstream_queue_veh: Vec::with_capacity(steps),
    };
    for k in 0..steps {
        let t_h = truth.scenario.start_h + k as f64 * step_h;
        let arriving = truth.scenario.inflow_at(t_h);
        let exit = truth.scenario.downstream_supply_at(t_h);
        let offered = arriving + queue / step_h;
        let outcome = model.step(&state, offered, exit, StationCoupling::NONE)?;
        queue = (queue + (arriving - outcome.flows.inflow_vehh[0]) * step_h).max(0.0);

        traj.densities.push(state.densities_vehkm.clone());
        traj.exit_flow_vehh.push(outcome.flows.exiting());
        traj.boundary.inflow_vehh.push(arriving);
        traj.boundary.downstream_supply_vehh.push(exit);
        traj.upstream_queue_veh.push(queue);
        state = outcome.state;
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDay {
    pub samples: Vec<SensorSample>,
    pub trajectory: Trajectory,
}

pub fn sensor_id(j: usize) -> String {
    format!("s{}", j + 1)
}

/// Simulates the truth and produces per-minute samples for `N + 1` sensors.
pub fn generate_day(truth: &GroundTruth, seed: u64) -> Result<SyntheticDay> {
    let traj = simulate_truth(truth)?;
    let n = truth.cells.len();
    let per_minute = (60.0 / truth.step_s).round() as usize;
    let minutes = traj.densities.len() / per_minute;
    let start = truth.day_start();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let noisy = |value: f64, pct: f64, rng: &mut ChaCha8Rng| -> f64 {
        if pct == 0.0 {
            value
        } else {
            value * (1.0 + pct * unit.sample(rng)).max(0.0)
        }
    };

    let mut samples = Vec::with_capacity(minutes * (n + 1));
    for j in 0..=n {
        let id = sensor_id(j);
        for m in 0..minutes {
            let range = m * per_minute..(m + 1) * per_minute;
            let (flow_sum, rho_sum) = if j < n {
                let cell = &truth.cells[j];
                range.fold((0.0, 0.0), |(f, r), k| {
                    let rho = traj.densities[k][j];
                    (f + cell.equilibrium_flow(rho), r + rho)
                })
            } else {
                let cell = &truth.cells[n - 1];
                range.fold((0.0, 0.0), |(f, r), k| {
                    let flow = traj.exit_flow_vehh[k];
                    let rho = traj.densities[k][n - 1];
                    // Exit detector speed is the speed of the last cell.
                    let rho_seen = if rho > 0.0 && flow > 0.0 { rho.max(flow / cell.free_flow_speed_kmh) } else { 0.0 };
                    (f + flow, r + rho_seen)
                })
            };
            let free_speed = truth.cells[j.min(n - 1)].free_flow_speed_kmh;
            // Harmonic mean weighted by flow: sum(flow) / sum(flow / speed).
            let speed = if flow_sum > 0.0 && rho_sum > 0.0 {
                flow_sum / rho_sum
            } else {
                free_speed
            };
            let count = flow_sum * truth.step_s / 3600.0;
            samples.push(SensorSample {
                timestamp_utc: start + chrono::Duration::minutes(m as i64),
                sensor_id: id.clone(),
                vehicle_count: noisy(count, truth.noise.count_pct, &mut rng),
                avg_speed_kmh: noisy(speed, truth.noise.speed_pct, &mut rng),
                period_s: 60.0,
            });
        }
    }
    Ok(SyntheticDay {
        samples,
        trajectory: traj,
    })
}

pub const DEMAND_MIN_KWH: f64 = 3940.0;
pub const DEMAND_MAX_KWH: f64 = 4160.0;
pub const DEMAND_FLAT_KWH: f64 = 4050.0;

/// Grid demand per interval with morning and evening peaks.
///
/// The seed jitters the peak times and heights; every value stays inside
/// `[DEMAND_MIN_KWH, DEMAND_MAX_KWH]` by construction.
pub fn generate_demand(seed: u64, intervals: usize, interval_s: f64, start_h: f64) -> DemandProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let morning = 8.5 + rng.random_range(-0.3..0.3);
    let evening = 18.5 + rng.random_range(-0.3..0.3);
    let h_morning = rng.random_range(0.75..1.0);
    let h_evening = rng.random_range(0.85..1.0);
    let bump = |t: f64, c: f64, width: f64| (-((t - c) / width).powi(2)).exp();
    let half = 0.5 * (DEMAND_MAX_KWH - DEMAND_MIN_KWH);
    let values = (0..intervals)
        .map(|k| {
            let t = start_h + (k as f64 + 0.5) * interval_s / 3600.0;
            let shape = (h_morning * bump(t, morning, 1.2)).max(h_evening * bump(t, evening, 1.5));
            DEMAND_MIN_KWH + 2.0 * half * shape
        })
        .collect();
    DemandProfile::new(values).expect("values are finite and positive")
}

pub fn flat_demand(intervals: usize) -> DemandProfile {
    DemandProfile::constant(DEMAND_FLAT_KWH, intervals)
}
