//! Closed-loop day simulation: agents spawned from traffic, one charging game
//! per interval, station flows fed back into the cell transmission model.
//!
//! The CTM advances in steps of `T` seconds and the game in intervals of
//! `l * T`. Extra travel times per interval are the mean of the `l` step
//! values; r2s and s2r requests are spread evenly over the interval's steps and
//! whatever the road cannot absorb is carried over.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctm::{demand, CellTransmissionModel, CtmOptions, CtmState, StationCoupling, StretchParams};
use crate::error::{Error, Result};
use crate::game::{solve_game, xi_from_oracle, AgentParams, Decision, GameConfig, GameInputs, Player, PlayerStatus};
use crate::identification::BoundarySeries;
use crate::pricing::{DemandProfile, IncentiveSchedule, PriceModel};
use crate::synthdata::{generate_demand, simulate_truth, GroundTruth, NoiseLevels};

/// Battery capacities of the PEV models on the market, in kWh.
pub const CAPACITY_POOL_KWH: [f64; 15] = [
    12.0, 17.6, 24.0, 28.0, 33.0, 40.0, 42.0, 50.0, 58.0, 64.0, 75.0, 77.0, 82.0, 93.4, 100.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPools {
    pub capacity_kwh: Vec<f64>,
    pub efficiency: (f64, f64),
    /// Range of the state of charge at spawn.
    pub soc: (f64, f64),
    pub soc_ref: (f64, f64),
}

impl Default for AgentPools {
    fn default() -> Self {
        AgentPools {
            capacity_kwh: CAPACITY_POOL_KWH.to_vec(),
            efficiency: (0.85, 0.99),
            soc: (0.2, 0.8),
            soc_ref: (0.25, 0.35),
        }
    }
}

impl AgentPools {
    fn validate(&self) -> Result<()> {
        if self.capacity_kwh.is_empty() || self.capacity_kwh.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::InvalidParams("capacity pool must hold positive values".into()));
        }
        let range = |name: &str, (lo, hi): (f64, f64), upper: f64| {
            if !(lo > 0.0 && lo <= hi && hi <= upper) {
                Err(Error::InvalidParams(format!("{name} range [{lo}, {hi}] is invalid")))
            } else {
                Ok(())
            }
        };
        range("efficiency", self.efficiency, 1.0)?;
        range("state of charge", self.soc, 1.0)?;
        range("x_ref", self.soc_ref, 1.0)?;
        if self.soc_ref.1 >= 1.0 {
            return Err(Error::InvalidParams("x_ref must stay below 1".into()));
        }
        Ok(())
    }
}

/// How the discount coefficients are set before a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceCalibration {
    /// `c3 = beta1 = y * p_bar / peak`, the peak taken from the matching baseline.
    #[default]
    FromBaseline,
    /// Use `c3` and `beta1` as given.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub stretch: StretchParams,
    pub ctm_options: CtmOptions,
    pub price: PriceModel,
    pub calibration: PriceCalibration,
    pub game: GameConfig,
    pub pev_share: f64,
    pub alpha_mean: f64,
    pub alpha_std: f64,
    pub pools: AgentPools,
    /// Upstream arrivals and downstream supply, one value per CTM step.
    pub boundary: BoundarySeries,
    /// Grid demand, one value per game interval.
    pub demand: DemandProfile,
    pub seed: u64,
    /// Time of day of the first step, in hours.
    pub start_h: f64,
}

impl ScenarioConfig {
    /// Base case on the synthetic two-peak day: A13 truth, 25% incentive
    /// calibrated on the baseline, 100 spots, 5% PEVs.
    pub fn synthetic_base_case(seed: u64) -> Result<Self> {
        let truth = GroundTruth::a13(NoiseLevels::default());
        let trajectory = simulate_truth(&truth)?;
        let stretch = truth.stretch()?;
        let game = GameConfig::default();
        let steps_per_interval = (game.interval_h / stretch.step_h()).round() as usize;
        let intervals = trajectory.boundary.inflow_vehh.len() / steps_per_interval;
        let demand = generate_demand(seed, intervals, game.interval_h * 3600.0, truth.scenario.start_h);
        Ok(ScenarioConfig {
            stretch,
            ctm_options: CtmOptions::default(),
            price: PriceModel::default(),
            calibration: PriceCalibration::FromBaseline,
            game,
            pev_share: 0.05,
            alpha_mean: 0.05,
            alpha_std: 0.03,
            pools: AgentPools::default(),
            boundary: trajectory.boundary,
            demand,
            seed,
            start_h: truth.scenario.start_h,
        })
    }

    /// `l`, the number of CTM steps per game interval.
    pub fn steps_per_interval(&self) -> usize {
        (self.game.interval_h / self.stretch.step_h()).round() as usize
    }

    pub fn intervals(&self) -> usize {
        self.boundary.inflow_vehh.len() / self.steps_per_interval().max(1)
    }

    pub fn interval_start_h(&self, k: usize) -> f64 {
        self.start_h + k as f64 * self.game.interval_h
    }

    pub fn validate(&self) -> Result<()> {
        self.game.validate()?;
        self.price.validate()?;
        self.pools.validate()?;
        let l = self.steps_per_interval();
        if l == 0 || (l as f64 * self.stretch.step_h() - self.game.interval_h).abs() > 1e-9 {
            return Err(Error::InvalidParams(format!(
                "interval {} s is not a whole number of {} s steps",
                self.game.interval_h * 3600.0,
                self.stretch.step_s()
            )));
        }
        if !(0.0..=1.0).contains(&self.pev_share) {
            return Err(Error::InvalidParams(format!("p_EV {} outside [0, 1]", self.pev_share)));
        }
        if !(self.alpha_mean > 0.0 && self.alpha_mean < 1.0 && self.alpha_std >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "alpha distribution ({}, {}) is invalid",
                self.alpha_mean, self.alpha_std
            )));
        }
        let b = &self.boundary;
        if b.inflow_vehh.len() != b.downstream_supply_vehh.len() {
            return Err(Error::InvalidParams("boundary series lengths differ".into()));
        }
        if b.inflow_vehh.iter().chain(&b.downstream_supply_vehh).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParams("boundary flows must be nonnegative".into()));
        }
        if self.intervals() == 0 {
            return Err(Error::InvalidParams("the day holds no complete game interval".into()));
        }
        if self.demand.is_empty() {
            return Err(Error::InvalidParams("demand profile is empty".into()));
        }
        Ok(())
    }
}

/// Vehicle accounting at the end of a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleBalance {
    pub arrived: f64,
    pub entered: f64,
    pub exited: f64,
    pub on_road: f64,
    pub queued: f64,
    pub at_station: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    /// Extra time summed over all cells, per interval (h).
    pub delta_h: Vec<f64>,
    /// Extra time summed over cells 2..N, per interval (h).
    pub delta_station_h: Vec<f64>,
    pub per_cell_h: Vec<Vec<f64>>,
    pub exit_flow_vehh: Vec<f64>,
    pub balance: VehicleBalance,
}

impl BaselineResult {
    /// Interval with the largest downstream extra time.
    pub fn peak_interval(&self) -> usize {
        argmax(&self.delta_station_h)
    }

    pub fn peak_station_delta_h(&self) -> f64 {
        self.delta_station_h.iter().cloned().fold(0.0, f64::max)
    }
}

/// One row of the closed-loop series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub interval: usize,
    pub time_h: f64,
    pub delta0_h: f64,
    pub delta_h: f64,
    pub delta0_station_h: f64,
    pub delta_station_h: f64,
    pub r2s_vehh: f64,
    pub s2r_vehh: f64,
    pub arrivals: usize,
    pub stoppers: usize,
    pub reentries: usize,
    pub occupancy: usize,
    pub u_pev_kwh: f64,
    pub demand_kwh: f64,
    pub price: f64,
    pub predicted_price: f64,
    pub demand_component: f64,
    pub discount_component: f64,
    pub sweeps: usize,
}

/// Life of one PEV agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub id: u64,
    pub spawn_interval: usize,
    pub capacity_kwh: f64,
    pub efficiency: f64,
    pub alpha: f64,
    pub soc_ref: f64,
    pub soc_arrival: f64,
    pub stopped: bool,
    /// Interval at which the agent re-entered, when it stopped and left.
    pub reentry_interval: Option<usize>,
    pub energy_kwh: f64,
    pub soc_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub records: Vec<IntervalRecord>,
    pub per_cell_delta_h: Vec<Vec<f64>>,
    pub per_cell_delta0_h: Vec<Vec<f64>>,
    pub agents: Vec<AgentTrace>,
    pub price_model: PriceModel,
    pub calibration_peak_h: f64,
    pub balance: VehicleBalance,
    pub baseline_balance: VehicleBalance,
    pub spots: usize,
    pub station_max_kwh: f64,
    pub pi: f64,
}

impl ScenarioResult {
    pub fn delta0_h(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.delta0_h).collect()
    }

    pub fn delta_h(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.delta_h).collect()
    }

    pub fn summary(&self) -> Summary {
        let peak = argmax(&self.records.iter().map(|r| r.delta0_h).collect::<Vec<_>>());
        let sweeps: Vec<usize> = self.records.iter().filter(|r| r.sweeps > 0).map(|r| r.sweeps).collect();
        Summary {
            pi: self.pi,
            intervals: self.records.len(),
            peak_interval: peak,
            peak_time_h: self.records[peak].time_h,
            peak_delta0_h: self.records[peak].delta0_h,
            peak_delta_h: self.records[peak].delta_h,
            total_delta0_h: self.records.iter().map(|r| r.delta0_h).sum(),
            total_delta_h: self.records.iter().map(|r| r.delta_h).sum(),
            max_occupancy: self.records.iter().map(|r| r.occupancy).max().unwrap_or(0),
            max_u_pev_kwh: self.records.iter().map(|r| r.u_pev_kwh).fold(0.0, f64::max),
            agents: self.agents.len(),
            stoppers: self.agents.iter().filter(|a| a.stopped).count(),
            games: sweeps.len(),
            max_sweeps: sweeps.iter().copied().max().unwrap_or(0),
            mean_sweeps: if sweeps.is_empty() {
                0.0
            } else {
                sweeps.iter().sum::<usize>() as f64 / sweeps.len() as f64
            },
            c3: self.price_model.c3,
            beta1: self.price_model.beta1,
            calibration_peak_h: self.calibration_peak_h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pi: f64,
    pub intervals: usize,
    pub peak_interval: usize,
    pub peak_time_h: f64,
    pub peak_delta0_h: f64,
    pub peak_delta_h: f64,
    pub total_delta0_h: f64,
    pub total_delta_h: f64,
    pub max_occupancy: usize,
    pub max_u_pev_kwh: f64,
    pub agents: usize,
    pub stoppers: usize,
    pub games: usize,
    pub max_sweeps: usize,
    pub mean_sweeps: f64,
    pub c3: f64,
    pub beta1: f64,
    pub calibration_peak_h: f64,
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Percentage reduction of the cumulative extra time with respect to the baseline.
pub fn performance_index(delta0_h: &[f64], delta_h: &[f64]) -> Result<f64> {
    if delta0_h.len() != delta_h.len() {
        return Err(Error::Domain(format!(
            "series lengths differ: {} vs {}",
            delta0_h.len(),
            delta_h.len()
        )));
    }
    let base: f64 = delta0_h.iter().sum();
    if !(base > 0.0) {
        return Err(Error::UndefinedIndex);
    }
    let controlled: f64 = delta_h.iter().sum();
    Ok((base - controlled) / base * 100.0)
}

/// Draws the PEVs among the vehicles that left cell 1 during one interval.
///
/// The vehicle count `flow * lT` is rounded stochastically to an integer and
/// each vehicle is a PEV with probability `p_EV`.
pub fn spawn_agents(
    flow_vehh: f64,
    config: &ScenarioConfig,
    next_id: &mut u64,
    rng: &mut ChaCha8Rng,
) -> Vec<(AgentParams, f64)> {
    let expected = (flow_vehh.max(0.0) * config.game.interval_h).max(0.0);
    let whole = expected.floor();
    let vehicles = whole as u64 + u64::from(rng.random::<f64>() < expected - whole);
    let count = if config.pev_share <= 0.0 || vehicles == 0 {
        0
    } else {
        Binomial::new(vehicles, config.pev_share)
            .expect("share validated to lie in [0, 1]")
            .sample(rng)
    };
    let pools = &config.pools;
    let alpha = Normal::new(config.alpha_mean, config.alpha_std).expect("finite alpha distribution");
    (0..count)
        .map(|_| {
            let capacity_kwh = pools.capacity_kwh[rng.random_range(0..pools.capacity_kwh.len())];
            let efficiency = uniform(rng, pools.efficiency);
            let soc = uniform(rng, pools.soc);
            let soc_ref = uniform(rng, pools.soc_ref);
            let a = loop {
                let a = alpha.sample(rng);
                if a > 0.0 && a < 1.0 {
                    break a;
                }
            };
            let id = *next_id;
            *next_id += 1;
            (
                AgentParams {
                    id,
                    capacity_kwh,
                    efficiency,
                    alpha: a,
                    soc_ref,
                    home_price: config.price.avg_price,
                },
                soc,
            )
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Agent currently plugged in.
struct Resident {
    player: Player,
    trace: usize,
}

/// Per-interval accumulation of the step values.
#[derive(Default)]
struct IntervalFlows {
    delta: Vec<f64>,
    r2s: f64,
    s2r: f64,
    cell1_out: f64,
    exit: f64,
}

/// State of the road and the station shared by the baseline and the closed loop.
struct Road<'a> {
    config: &'a ScenarioConfig,
    model: CellTransmissionModel,
    state: CtmState,
    queue: f64,
    pending_r2s: f64,
    pending_s2r: f64,
    balance: VehicleBalance,
}

impl<'a> Road<'a> {
    fn new(config: &'a ScenarioConfig) -> Self {
        let model = CellTransmissionModel::with_options(config.stretch.clone(), config.ctm_options);
        let state = CtmState::empty(&config.stretch);
        Road {
            config,
            model,
            state,
            queue: 0.0,
            pending_r2s: 0.0,
            pending_s2r: 0.0,
            balance: VehicleBalance::default(),
        }
    }

    /// Advances the `l` steps of interval `k`, releasing the pending station flows.
    fn advance(&mut self, k: usize) -> Result<IntervalFlows> {
        let l = self.config.steps_per_interval();
        let step_h = self.config.stretch.step_h();
        let n = self.config.stretch.num_cells();
        let first = self.config.stretch.cells();
        let mut acc = IntervalFlows {
            delta: vec![0.0; n],
            ..Default::default()
        };
        for j in 0..l {
            let s = k * l + j;
            let arriving = self.config.boundary.inflow_vehh[s];
            let exit = self.config.boundary.downstream_supply_vehh[s];
            let left = (l - j) as f64 * step_h;
            let send0 = demand(&first[0], self.state.densities_vehkm[0])?;
            let coupling = StationCoupling {
                r2s_vehh: (self.pending_r2s / left).min(send0),
                s2r_vehh: self.pending_s2r / left,
            };
            let offered = arriving + self.queue / step_h;
            let outcome = self.model.step(&self.state, offered, exit, coupling)?;
            let report = self.model.extra_travel_time(&self.state, &outcome.flows);
            let f = &outcome.flows;

            self.queue = (self.queue + (arriving - f.inflow_vehh[0]) * step_h).max(0.0);
            self.pending_r2s = (self.pending_r2s - f.r2s_vehh * step_h).max(0.0);
            self.pending_s2r = (self.pending_s2r - f.s2r_vehh * step_h).max(0.0);
            self.balance.arrived += arriving * step_h;
            self.balance.entered += f.inflow_vehh[0] * step_h;
            self.balance.exited += f.exiting() * step_h;
            self.balance.at_station += (f.r2s_vehh - f.s2r_vehh) * step_h;

            for (a, v) in acc.delta.iter_mut().zip(&report.per_cell_extra_h) {
                *a += v / l as f64;
            }
            acc.r2s += f.r2s_vehh / l as f64;
            acc.s2r += f.s2r_vehh / l as f64;
            acc.cell1_out += f.outflow_vehh[0] / l as f64;
            acc.exit += f.exiting() / l as f64;
            self.state = outcome.state;
        }
        Ok(acc)
    }

    fn finish(mut self) -> VehicleBalance {
        self.balance.on_road = self.config.stretch.vehicles(&self.state);
        self.balance.queued = self.queue;
        self.balance
    }

    /// Extra time predicted over the game horizon with no station coupling.
    fn predict(&self, k: usize) -> Result<Vec<f64>> {
        let config = self.config;
        let l = config.steps_per_interval();
        let len = config.game.horizon_len();
        let s = k * l;
        let horizon_h = len as f64 * config.game.interval_h;
        let inflow = config.boundary.inflow_vehh[s] + self.queue / horizon_h;
        let last = config.intervals() - 1;
        let supply: Vec<f64> = (0..len)
            .map(|t| {
                let kk = (k + t).min(last);
                let slice = &config.boundary.downstream_supply_vehh[kk * l..(kk + 1) * l];
                slice.iter().sum::<f64>() / l as f64
            })
            .collect();
        let reports = self.model.predict(&self.state, &vec![inflow; len], &supply, l)?;
        Ok(xi_from_oracle(&reports))
    }
}

/// Replays the day without the charging station.
pub fn run_baseline(config: &ScenarioConfig) -> Result<BaselineResult> {
    config.validate()?;
    let mut road = Road::new(config);
    let intervals = config.intervals();
    let mut out = BaselineResult {
        delta_h: Vec::with_capacity(intervals),
        delta_station_h: Vec::with_capacity(intervals),
        per_cell_h: Vec::with_capacity(intervals),
        exit_flow_vehh: Vec::with_capacity(intervals),
        balance: VehicleBalance::default(),
    };
    for k in 0..intervals {
        let flows = road.advance(k)?;
        out.delta_h.push(flows.delta.iter().sum());
        out.delta_station_h.push(flows.delta[1..].iter().sum());
        out.exit_flow_vehh.push(flows.exit);
        out.per_cell_h.push(flows.delta);
    }
    out.balance = road.finish();
    Ok(out)
}

/// Price model actually used by a run on top of `baseline`.
pub fn effective_price_model(config: &ScenarioConfig, baseline: &BaselineResult) -> Result<PriceModel> {
    match config.calibration {
        PriceCalibration::Fixed => Ok(config.price),
        PriceCalibration::FromBaseline => config.price.calibrated(baseline.peak_station_delta_h()),
    }
}

/// Runs the closed loop, computing its own matching baseline.
pub fn run_atdm(config: &ScenarioConfig) -> Result<ScenarioResult> {
    let baseline = run_baseline(config)?;
    run_atdm_with_baseline(config, &baseline)
}

/// Runs the closed loop against a precomputed baseline of the same day.
pub fn run_atdm_with_baseline(config: &ScenarioConfig, baseline: &BaselineResult) -> Result<ScenarioResult> {
    config.validate()?;
    let intervals = config.intervals();
    if baseline.delta_h.len() != intervals {
        return Err(Error::InvalidParams(format!(
            "baseline covers {} intervals, scenario has {intervals}",
            baseline.delta_h.len()
        )));
    }
    let price = effective_price_model(config, baseline)?;
    let game = &config.game;
    let len = game.horizon_len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut road = Road::new(config);
    let mut residents: Vec<Resident> = Vec::new();
    let mut agents: Vec<AgentTrace> = Vec::new();
    let mut next_id = 0u64;
    let mut last_cell1_out = 0.0;
    let mut records = Vec::with_capacity(intervals);
    let mut per_cell = Vec::with_capacity(intervals);

    for k in 0..intervals {
        let tod = config.interval_start_h(k);
        let spawned = spawn_agents(last_cell1_out, config, &mut next_id, &mut rng);
        let arrivals = spawned.len();
        let mut players: Vec<Player> = residents.iter().map(|r| r.player.clone()).collect();
        for (params, soc) in spawned {
            agents.push(AgentTrace {
                id: params.id,
                spawn_interval: k,
                capacity_kwh: params.capacity_kwh,
                efficiency: params.efficiency,
                alpha: params.alpha,
                soc_ref: params.soc_ref,
                soc_arrival: soc,
                stopped: false,
                reentry_interval: None,
                energy_kwh: 0.0,
                soc_final: soc,
            });
            players.push(Player::arriving(params, soc));
        }

        let mut predicted_now = price.predicted_price(tod, config.demand.at(k), 0.0);
        let mut sweeps = 0;
        let decisions: Vec<Decision> = if players.is_empty() {
            Vec::new()
        } else {
            let xi = road.predict(k)?;
            let predicted_price: Vec<f64> = (0..len)
                .map(|t| price.predicted_price(config.interval_start_h(k + t), config.demand.at(k + t), xi[t]))
                .collect();
            predicted_now = predicted_price[0];
            let inputs = GameInputs {
                predicted_price,
                xi_h: xi,
            };
            let solution = solve_game(&players, game, &inputs).map_err(|e| Error::Interval {
                interval: k,
                source: Box::new(e),
            })?;
            sweeps = solution.sweeps;
            solution.decisions
        };

        let mut stoppers = 0;
        let mut reentries = 0;
        let mut occupancy = 0;
        let mut u_pev = 0.0;
        let mut next_residents = Vec::with_capacity(residents.len());
        let first_new = residents.len();
        let previous: Vec<Resident> = std::mem::take(&mut residents);
        let trace_of = |i: usize| -> usize {
            if i < first_new {
                previous[i].trace
            } else {
                agents.len() - arrivals + (i - first_new)
            }
        };
        let mut updates = Vec::with_capacity(players.len());
        for (i, (player, decision)) in players.into_iter().zip(decisions).enumerate() {
            updates.push((trace_of(i), player, decision));
        }
        for (trace, mut player, decision) in updates {
            let at_station = matches!(player.status, PlayerStatus::AtStation { .. });
            if !decision.stops {
                continue;
            }
            if !at_station {
                stoppers += 1;
                agents[trace].stopped = true;
                road.pending_r2s += 1.0;
            }
            if decision.block == 0 {
                reentries += 1;
                road.pending_s2r += 1.0;
                agents[trace].reentry_interval = Some(k);
                continue;
            }
            let energy = decision.energy_kwh[0];
            occupancy += 1;
            u_pev += energy;
            player.soc += player.params.soc_gain(energy);
            agents[trace].energy_kwh += energy;
            agents[trace].soc_final = player.soc;
            let elapsed = match player.status {
                PlayerStatus::AtStation { elapsed } => elapsed + 1,
                PlayerStatus::Arriving => 1,
            };
            player.status = PlayerStatus::AtStation { elapsed };
            player.carried = Some(shift(&decision));
            next_residents.push(Resident { player, trace });
        }
        residents = next_residents;

        let flows = road.advance(k)?;
        last_cell1_out = flows.cell1_out;
        let delta_station: f64 = flows.delta[1..].iter().sum();
        let realized = price.realized_price(tod, config.demand.at(k), u_pev, delta_station);
        records.push(IntervalRecord {
            interval: k,
            time_h: tod,
            delta0_h: baseline.delta_h[k],
            delta_h: flows.delta.iter().sum(),
            delta0_station_h: baseline.delta_station_h[k],
            delta_station_h: delta_station,
            r2s_vehh: flows.r2s,
            s2r_vehh: flows.s2r,
            arrivals,
            stoppers,
            reentries,
            occupancy,
            u_pev_kwh: u_pev,
            demand_kwh: config.demand.at(k),
            price: realized.price,
            predicted_price: predicted_now,
            demand_component: realized.demand_component,
            discount_component: realized.discount_component,
            sweeps,
        });
        per_cell.push(flows.delta);
    }

    let balance = road.finish();
    let delta0: Vec<f64> = records.iter().map(|r| r.delta0_h).collect();
    let delta: Vec<f64> = records.iter().map(|r| r.delta_h).collect();
    let pi = performance_index(&delta0, &delta)?;
    Ok(ScenarioResult {
        records,
        per_cell_delta_h: per_cell,
        per_cell_delta0_h: baseline.per_cell_h.clone(),
        agents,
        price_model: price,
        calibration_peak_h: baseline.peak_station_delta_h(),
        balance,
        baseline_balance: baseline.balance,
        spots: game.spots,
        station_max_kwh: game.station_max_kwh,
        pi,
    })
}

/// Moves a plan one interval forward.
fn shift(d: &Decision) -> Decision {
    let mut energy_kwh: Vec<f64> = d.energy_kwh[1..].to_vec();
    energy_kwh.push(0.0);
    Decision {
        stops: true,
        reentry: d.reentry - 1,
        block: d.block - 1,
        energy_kwh,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    /// Full incentive 07:00 to 16:00, a fifth of it otherwise.
    MorningWeighted,
}

/// One coordinate of a sweep grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Setting {
    Spots(usize),
    Incentive(f64),
    PevShare(f64),
    AlphaStd(f64),
    Schedule(ScheduleKind),
}

impl Setting {
    pub fn axis(&self) -> &'static str {
        match self {
            Setting::Spots(_) => "spots",
            Setting::Incentive(_) => "incentive",
            Setting::PevShare(_) => "pev_share",
            Setting::AlphaStd(_) => "alpha_std",
            Setting::Schedule(_) => "incentive_schedule",
        }
    }

    pub fn value(&self) -> String {
        match self {
            Setting::Spots(n) => n.to_string(),
            Setting::Incentive(v) | Setting::PevShare(v) | Setting::AlphaStd(v) => v.to_string(),
            Setting::Schedule(ScheduleKind::Constant) => "constant".into(),
            Setting::Schedule(ScheduleKind::MorningWeighted) => "morning_weighted".into(),
        }
    }

    pub fn apply(&self, config: &mut ScenarioConfig) {
        match *self {
            Setting::Spots(n) => {
                // Station energy grows with the number of spots.
                let per_spot = config.game.station_max_kwh / config.game.spots.max(1) as f64;
                config.game.spots = n;
                config.game.station_max_kwh = n as f64 * per_spot;
            }
            Setting::Incentive(y) => config.price.schedule = config.price.schedule.with_nominal(y),
            Setting::PevShare(p) => config.pev_share = p,
            Setting::AlphaStd(s) => config.alpha_std = s,
            Setting::Schedule(kind) => {
                let y = config.price.schedule.nominal();
                config.price.schedule = match kind {
                    ScheduleKind::Constant => IncentiveSchedule::constant(y),
                    ScheduleKind::MorningWeighted => IncentiveSchedule::morning_weighted(y),
                };
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Each axis lists the settings of one parameter.
    pub axes: Vec<Vec<Setting>>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    /// Cartesian product of the axes.
    pub fn points(&self) -> Result<Vec<Vec<Setting>>> {
        if self.axes.is_empty() || self.axes.iter().any(Vec::is_empty) || self.seeds.is_empty() {
            return Err(Error::EmptyGrid);
        }
        let mut points: Vec<Vec<Setting>> = vec![Vec::new()];
        for axis in &self.axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |s| {
                        let mut q = p.clone();
                        q.push(*s);
                        q
                    })
                })
                .collect();
        }
        Ok(points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub settings: Vec<Setting>,
    pub seed: u64,
    pub pi: Option<f64>,
    pub error: Option<String>,
}

/// Runs every grid point for every seed in parallel.
///
/// None of the sweepable parameters touches the road dynamics without the
/// station, so one baseline serves the whole grid. A failing point is recorded
/// in its row and the sweep goes on.
pub fn sweep(spec: &SweepSpec, base: &ScenarioConfig) -> Result<Vec<SweepRow>> {
    let points = spec.points()?;
    let baseline = run_baseline(base)?;
    let jobs: Vec<(Vec<Setting>, u64)> = points
        .iter()
        .flat_map(|p| spec.seeds.iter().map(move |&s| (p.clone(), s)))
        .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(settings, seed)| {
            let mut config = base.clone();
            config.seed = seed;
            for s in &settings {
                s.apply(&mut config);
            }
            let outcome = run_atdm_with_baseline(&config, &baseline);
            SweepRow {
                settings,
                seed,
                pi: outcome.as_ref().ok().map(|r| r.pi),
                error: outcome.err().map(|e| e.to_string()),
            }
        })
        .collect())
}

/// Mean index per grid point over the seeds that succeeded.
pub fn mean_by_point(rows: &[SweepRow]) -> Vec<(Vec<Setting>, f64)> {
    let mut out: Vec<(Vec<Setting>, f64, usize)> = Vec::new();
    for row in rows {
        let Some(pi) = row.pi else { continue };
        match out.iter_mut().find(|(s, _, _)| *s == row.settings) {
            Some(entry) => {
                entry.1 += pi;
                entry.2 += 1;
            }
            None => out.push((row.settings.clone(), pi, 1)),
        }
    }
    out.into_iter().map(|(s, sum, n)| (s, sum / n as f64)).collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let Some(first) = rows.first() else {
        wtr.write_record(["seed", "pi", "error"])?;
        wtr.flush()?;
        return Ok(());
    };
    let mut header: Vec<&str> = first.settings.iter().map(Setting::axis).collect();
    header.extend(["seed", "pi", "error"]);
    wtr.write_record(&header)?;
    for row in rows {
        let mut rec: Vec<String> = row.settings.iter().map(Setting::value).collect();
        rec.push(row.seed.to_string());
        rec.push(row.pi.map(|p| p.to_string()).unwrap_or_default());
        rec.push(row.error.clone().unwrap_or_default());
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct DeltaRow {
    interval: usize,
    time_h: f64,
    delta0_h: f64,
    delta_h: f64,
    delta0_station_h: f64,
    delta_station_h: f64,
}

#[derive(Serialize)]
struct FlowRow {
    interval: usize,
    time_h: f64,
    r2s_vehh: f64,
    s2r_vehh: f64,
    arrivals: usize,
    stoppers: usize,
    reentries: usize,
}

#[derive(Serialize)]
struct PriceRow {
    interval: usize,
    time_h: f64,
    d_kwh: f64,
    price: f64,
    predicted_price: f64,
    demand_component: f64,
    discount_component: f64,
}

#[derive(Serialize)]
struct OccupancyRow {
    interval: usize,
    time_h: f64,
    occupancy: usize,
    spots: usize,
}

#[derive(Serialize)]
struct EnergyRow {
    interval: usize,
    time_h: f64,
    u_pev_kwh: f64,
    u_max_kwh: f64,
}

#[derive(Serialize)]
struct BaselineRow {
    interval: usize,
    time_h: f64,
    delta0_h: f64,
    delta0_station_h: f64,
}

/// Files written by [`export_result`], relative to the output directory.
pub const RESULT_FILES: [&str; 7] = [
    "delta.csv",
    "flows.csv",
    "price.csv",
    "occupancy.csv",
    "energy.csv",
    "agents.csv",
    "summary.json",
];

pub fn export_result(result: &ScenarioResult, dir: &Path) -> Result<()> {
    let rs = &result.records;
    write_csv(
        &dir.join("delta.csv"),
        rs.iter().map(|r| DeltaRow {
            interval: r.interval,
            time_h: r.time_h,
            delta0_h: r.delta0_h,
            delta_h: r.delta_h,
            delta0_station_h: r.delta0_station_h,
            delta_station_h: r.delta_station_h,
        }),
    )?;
    write_csv(
        &dir.join("flows.csv"),
        rs.iter().map(|r| FlowRow {
            interval: r.interval,
            time_h: r.time_h,
            r2s_vehh: r.r2s_vehh,
            s2r_vehh: r.s2r_vehh,
            arrivals: r.arrivals,
            stoppers: r.stoppers,
            reentries: r.reentries,
        }),
    )?;
    write_csv(
        &dir.join("price.csv"),
        rs.iter().map(|r| PriceRow {
            interval: r.interval,
            time_h: r.time_h,
            d_kwh: r.demand_kwh,
            price: r.price,
            predicted_price: r.predicted_price,
            demand_component: r.demand_component,
            discount_component: r.discount_component,
        }),
    )?;
    write_csv(
        &dir.join("occupancy.csv"),
        rs.iter().map(|r| OccupancyRow {
            interval: r.interval,
            time_h: r.time_h,
            occupancy: r.occupancy,
            spots: result.spots,
        }),
    )?;
    write_csv(
        &dir.join("energy.csv"),
        rs.iter().map(|r| EnergyRow {
            interval: r.interval,
            time_h: r.time_h,
            u_pev_kwh: r.u_pev_kwh,
            u_max_kwh: result.station_max_kwh,
        }),
    )?;
    write_csv(&dir.join("agents.csv"), result.agents.iter())?;
    let file = std::fs::File::create(dir.join("summary.json"))?;
    serde_json::to_writer_pretty(file, &result.summary())?;
    Ok(())
}

/// Writes the baseline series as `delta.csv`.
pub fn export_baseline(config: &ScenarioConfig, baseline: &BaselineResult, dir: &Path) -> Result<()> {
    write_csv(
        &dir.join("delta.csv"),
        baseline.delta_h.iter().enumerate().map(|(k, &d)| BaselineRow {
            interval: k,
            time_h: config.interval_start_h(k),
            delta0_h: d,
            delta0_station_h: baseline.delta_station_h[k],
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pricing::DemandProfile;

    fn small_config(inflow: f64, supply: f64, hours: f64) -> ScenarioConfig {
        let stretch = StretchParams::a13();
        let steps = (hours * 360.0) as usize;
        let game = GameConfig::default();
        ScenarioConfig {
            stretch,
            ctm_options: CtmOptions::default(),
            price: PriceModel::default(),
            calibration: PriceCalibration::Fixed,
            game,
            pev_share: 0.05,
            alpha_mean: 0.05,
            alpha_std: 0.03,
            pools: AgentPools::default(),
            boundary: BoundarySeries {
                inflow_vehh: vec![inflow; steps],
                downstream_supply_vehh: vec![supply; steps],
            },
            demand: DemandProfile::constant(4050.0, steps / 10),
            seed: 7,
            start_h: 7.0,
        }
    }

    #[test]
    fn index_examples() {
        assert_eq!(performance_index(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(performance_index(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 100.0);
        assert!(matches!(performance_index(&[0.0], &[0.0]), Err(Error::UndefinedIndex)));
        assert!(performance_index(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn expected_spawn_count() {
        let mut config = small_config(40_000.0, 150_000.0, 1.0);
        config.pev_share = 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut id = 0;
        let runs = 4000;
        let total: usize = (0..runs)
            .map(|_| spawn_agents(3600.0, &config, &mut id, &mut rng).len())
            .sum();
        let mean = total as f64 / runs as f64;
        // 3600 veh/h * 100 s * 5% = 5 agents; binomial sd ~ 2.2, so sd of the mean ~ 0.035.
        assert!((mean - 5.0).abs() < 0.15, "mean {mean}");
        assert_eq!(id as usize, total);
    }

    #[test]
    fn spawned_attributes_respect_pools() {
        let config = small_config(40_000.0, 150_000.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut id = 0;
        for (a, soc) in spawn_agents(100_000.0, &config, &mut id, &mut rng) {
            assert!(CAPACITY_POOL_KWH.contains(&a.capacity_kwh));
            assert!((0.85..0.99).contains(&a.efficiency));
            assert!((0.25..0.35).contains(&a.soc_ref));
            assert!((0.2..0.8).contains(&soc));
            assert!(a.alpha > 0.0 && a.alpha < 1.0);
        }
    }

    #[test]
    fn zero_share_spawns_nobody() {
        let mut config = small_config(40_000.0, 150_000.0, 1.0);
        config.pev_share = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut id = 0;
        assert!(spawn_agents(90_000.0, &config, &mut id, &mut rng).is_empty());
    }

    #[test]
    fn free_flow_day_has_no_extra_time() {
        let config = small_config(30_000.0, 150_000.0, 1.0);
        let b = run_baseline(&config).unwrap();
        assert_eq!(b.delta_h.len(), 36);
        let worst = b.delta_h.iter().cloned().fold(0.0, f64::max);
        assert!(worst == 0.0, "worst {worst:e}");
        assert!(matches!(run_atdm(&config), Err(Error::UndefinedIndex)));
    }

    #[test]
    fn interval_must_hold_whole_steps() {
        let mut config = small_config(30_000.0, 150_000.0, 1.0);
        config.game.interval_h = 95.0 / 3600.0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn grid_is_cartesian() {
        let spec = SweepSpec {
            axes: vec![
                vec![Setting::Incentive(0.1), Setting::Incentive(0.2)],
                vec![Setting::PevShare(0.05), Setting::PevShare(0.1), Setting::PevShare(0.2)],
            ],
            seeds: vec![1],
        };
        assert_eq!(spec.points().unwrap().len(), 6);
        let empty = SweepSpec {
            axes: vec![vec![]],
            seeds: vec![1],
        };
        assert!(matches!(empty.points(), Err(Error::EmptyGrid)));
    }

    #[test]
    fn shift_drops_the_first_interval() {
        let d = Decision {
            stops: true,
            reentry: 3,
            block: 3,
            energy_kwh: vec![1.0, 2.0, 3.0, 0.0],
        };
        let s = shift(&d);
        assert_eq!(s.block, 2);
        assert_eq!(s.energy_kwh, vec![2.0, 3.0, 0.0, 0.0]);
    }
}
