//! Per-interval charging game between plug-in vehicles sharing the station.
//!
//! Time inside a game is relative: index 0 is the current interval and the
//! horizon covers `0..=T_h`. A stopping agent charges during a contiguous block
//! `0..r` and re-enters the road at `t_i = r`; an agent that does not stop
//! enters cell 2 at `t_i = 0`. The re-entry window `[t_i - W, t_i + W]` must
//! lie inside the horizon, which bounds every stay by `T_h - W` intervals.

use serde::{Deserialize, Serialize};

use crate::ctm::TravelTimeReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub id: u64,
    pub capacity_kwh: f64,
    /// Fraction of purchased energy that reaches the battery.
    pub efficiency: f64,
    pub alpha: f64,
    pub soc_ref: f64,
    /// Price the owner would pay away from the station, in EUR/kWh.
    pub home_price: f64,
}

impl AgentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParams(format!("agent {}: alpha {} outside (0, 1)", self.id, self.alpha)));
        }
        if !(self.soc_ref > 0.0 && self.soc_ref < 1.0) {
            return Err(Error::InvalidParams(format!("agent {}: x_ref {} outside (0, 1)", self.id, self.soc_ref)));
        }
        if !(self.capacity_kwh > 0.0 && self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "agent {}: capacity {} kWh, efficiency {}",
                self.id, self.capacity_kwh, self.efficiency
            )));
        }
        Ok(())
    }

    /// Energy bought that raises the state of charge by `delta_soc`.
    pub fn energy_for(&self, delta_soc: f64) -> f64 {
        delta_soc * self.capacity_kwh / self.efficiency
    }

    pub fn soc_gain(&self, energy_kwh: f64) -> f64 {
        self.efficiency * energy_kwh / self.capacity_kwh
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GameConfig {
    /// `T_h`; the horizon holds `T_h + 1` intervals.
    pub horizon_intervals: usize,
    /// `W`, half width of the re-entry window.
    pub half_width: usize,
    pub interval_h: f64,
    pub spots: usize,
    pub station_max_kwh: f64,
    pub u_min_kwh: f64,
    pub u_max_kwh: f64,
    pub idle_weight: f64,
    /// Extra time per vehicle re-entering in the same interval, in hours.
    pub s2r_scale_h: f64,
    pub epsilon: f64,
    pub max_sweeps: usize,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            horizon_intervals: 15,
            half_width: 3,
            interval_h: 100.0 / 3600.0,
            spots: 100,
            station_max_kwh: 416.6,
            u_min_kwh: 4.16,
            u_max_kwh: 4.16,
            idle_weight: 1.0,
            s2r_scale_h: 1.79 / 3600.0,
            epsilon: 1e-6,
            max_sweeps: 100,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_intervals <= 2 * self.half_width {
            return Err(Error::InvalidParams(format!(
                "horizon T_h = {} must exceed 2W = {}",
                self.horizon_intervals,
                2 * self.half_width
            )));
        }
        if !(self.interval_h > 0.0 && self.station_max_kwh >= 0.0 && self.u_max_kwh > 0.0) {
            return Err(Error::InvalidParams("interval and energy bounds must be positive".into()));
        }
        if !(self.u_min_kwh >= 0.0 && self.u_min_kwh <= self.u_max_kwh) {
            return Err(Error::InvalidParams(format!(
                "per-spot bounds [{}, {}] kWh are inconsistent",
                self.u_min_kwh, self.u_max_kwh
            )));
        }
        if !(self.idle_weight >= 0.0 && self.s2r_scale_h >= 0.0 && self.epsilon >= 0.0) {
            return Err(Error::InvalidParams("weights must be nonnegative".into()));
        }
        if self.max_sweeps == 0 {
            return Err(Error::InvalidParams("sweep cap must be positive".into()));
        }
        Ok(())
    }

    pub fn horizon_len(&self) -> usize {
        self.horizon_intervals + 1
    }

    pub fn min_stay(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn max_stay(&self) -> usize {
        self.horizon_intervals - self.half_width
    }

    /// Weight of relative interval `t`: `1/(W+1)` on the first `W+1`
    /// intervals, `1/(2W+1)` afterwards.
    pub fn chi(&self, t: usize) -> f64 {
        if t <= self.half_width {
            1.0 / (self.half_width + 1) as f64
        } else {
            1.0 / (2 * self.half_width + 1) as f64
        }
    }
}

/// Indicator of `[t_i - W, t_i + W]` on `0..horizon_len`.
pub fn theta(reentry: usize, half_width: usize, horizon_len: usize) -> Vec<bool> {
    let lo = reentry.saturating_sub(half_width);
    let hi = reentry + half_width;
    (0..horizon_len).map(|t| t >= lo && t <= hi).collect()
}

/// A player's plan over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// True when the agent is at (or goes to) the station.
    pub stops: bool,
    /// Relative interval at which the agent enters cell 2.
    pub reentry: usize,
    /// Number of charging intervals, starting at 0.
    pub block: usize,
    pub energy_kwh: Vec<f64>,
}

impl Decision {
    pub fn no_stop(horizon_len: usize) -> Self {
        Decision {
            stops: false,
            reentry: 0,
            block: 0,
            energy_kwh: vec![0.0; horizon_len],
        }
    }

    pub fn charging(&self, t: usize) -> bool {
        t < self.block
    }

    pub fn total_energy(&self) -> f64 {
        self.energy_kwh.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PlayerStatus {
    /// Just left cell 1; free to stop or to drive on.
    Arriving,
    /// Plugged in for `elapsed` completed intervals.
    AtStation { elapsed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Player {
    pub params: AgentParams,
    pub soc: f64,
    pub status: PlayerStatus,
    /// Plan carried over from the previous interval, already shifted to the
    /// current one. Used as the starting strategy of a station agent.
    pub carried: Option<Decision>,
}

impl Player {
    pub fn arriving(params: AgentParams, soc: f64) -> Self {
        Player {
            params,
            soc,
            status: PlayerStatus::Arriving,
            carried: None,
        }
    }
}

/// Predicted price and predicted extra travel time over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameInputs {
    pub predicted_price: Vec<f64>,
    pub xi_h: Vec<f64>,
}

impl GameInputs {
    pub fn validate(&self, config: &GameConfig) -> Result<()> {
        let n = config.horizon_len();
        if self.predicted_price.len() != n || self.xi_h.len() != n {
            return Err(Error::InvalidParams(format!(
                "inputs cover {} / {} intervals, horizon has {n}",
                self.predicted_price.len(),
                self.xi_h.len()
            )));
        }
        Ok(())
    }
}

/// `xi(t)`: predicted extra travel time through cells 2..N per interval.
pub fn xi_from_oracle(reports: &[TravelTimeReport]) -> Vec<f64> {
    reports.iter().map(TravelTimeReport::downstream_of_station_h).collect()
}

/// Aggregate of the plans of a group of players.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SharedPlan {
    pub energy_kwh: Vec<f64>,
    pub occupancy: Vec<usize>,
    /// Stoppers planning to re-enter at each interval.
    pub reentries: Vec<usize>,
}

impl SharedPlan {
    pub fn empty(horizon_len: usize) -> Self {
        SharedPlan {
            energy_kwh: vec![0.0; horizon_len],
            occupancy: vec![0; horizon_len],
            reentries: vec![0; horizon_len],
        }
    }

    pub fn from_decisions<'a>(horizon_len: usize, decisions: impl IntoIterator<Item = &'a Decision>) -> Self {
        let mut plan = SharedPlan::empty(horizon_len);
        for d in decisions {
            plan.add(d);
        }
        plan
    }

    pub fn add(&mut self, d: &Decision) {
        self.apply(d, 1.0);
    }

    pub fn remove(&mut self, d: &Decision) {
        self.apply(d, -1.0);
    }

    fn apply(&mut self, d: &Decision, sign: f64) {
        for (t, e) in d.energy_kwh.iter().enumerate() {
            self.energy_kwh[t] += sign * e;
        }
        let bump = |v: &mut usize| {
            if sign > 0.0 {
                *v += 1
            } else {
                *v -= 1
            }
        };
        for t in 0..d.block {
            bump(&mut self.occupancy[t]);
        }
        if d.stops {
            bump(&mut self.reentries[d.reentry]);
        }
    }
}

/// `xi_cs(t) = gamma * (re-entries of the other players at t)`.
pub fn xi_cs(others: &SharedPlan, s2r_scale_h: f64) -> Vec<f64> {
    others.reentries.iter().map(|&n| n as f64 * s2r_scale_h).collect()
}

/// Savings term: `sum (p_hat(t) - p_bar) u(t)`.
pub fn cost_price(agent: &AgentParams, decision: &Decision, predicted_price: &[f64]) -> f64 {
    decision
        .energy_kwh
        .iter()
        .zip(predicted_price)
        .map(|(u, p)| (p - agent.home_price) * u)
        .sum()
}

/// Time term: `sum chi(t) [(t-k) upsilon + xi(t) + xi_cs(t)] theta(t)`, with
/// `t - k` expressed in hours.
pub fn cost_time(reentry: usize, xi_h: &[f64], xi_cs_h: &[f64], config: &GameConfig) -> f64 {
    let lo = reentry.saturating_sub(config.half_width);
    let hi = (reentry + config.half_width).min(xi_h.len() - 1);
    (lo..=hi)
        .map(|t| {
            config.chi(t) * (t as f64 * config.interval_h * config.idle_weight + xi_h[t] + xi_cs_h[t])
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostSplit {
    pub price: f64,
    pub time: f64,
    pub total: f64,
}

fn evaluate(
    agent: &AgentParams,
    decision: &Decision,
    inputs: &GameInputs,
    xi_cs_h: &[f64],
    config: &GameConfig,
) -> CostSplit {
    let price = cost_price(agent, decision, &inputs.predicted_price);
    let time = cost_time(decision.reentry, &inputs.xi_h, xi_cs_h, config);
    CostSplit {
        price,
        time,
        total: agent.alpha * price + (1.0 - agent.alpha) * time,
    }
}

/// Cheapest energy schedule for a charging block `0..block`.
///
/// Each charging interval takes at least `u_min` and at most the smaller of
/// `u_max` and the station energy the others leave; the total is bounded by
/// the battery headroom and must reach `x_ref` at re-entry. The objective is
/// linear, so starting from the lower bounds, buying every profitable kWh
/// cheapest first and then topping up to the `x_ref` requirement cheapest
/// first is optimal.
fn fill_energy(
    player: &Player,
    block: usize,
    others: &SharedPlan,
    inputs: &GameInputs,
    config: &GameConfig,
) -> Option<Vec<f64>> {
    let n = config.horizon_len();
    let agent = &player.params;
    let mut energy = vec![0.0; n];
    let mut room = vec![0.0; n];
    for t in 0..block {
        if others.occupancy[t] + 1 > config.spots {
            return None;
        }
        let hi = config.u_max_kwh.min(config.station_max_kwh - others.energy_kwh[t]);
        if hi < config.u_min_kwh - 1e-9 {
            return None;
        }
        energy[t] = config.u_min_kwh;
        room[t] = (hi - config.u_min_kwh).max(0.0);
    }
    let tol = 1e-9;
    let headroom = agent.energy_for(1.0 - player.soc);
    let required = agent.energy_for(agent.soc_ref - player.soc).max(0.0);
    let mut total: f64 = energy.iter().sum();
    if total > headroom + tol {
        return None;
    }
    let mut order: Vec<usize> = (0..block).collect();
    order.sort_by(|&a, &b| inputs.predicted_price[a].total_cmp(&inputs.predicted_price[b]).then(a.cmp(&b)));
    for &t in &order {
        if inputs.predicted_price[t] - agent.home_price >= 0.0 {
            break;
        }
        let add = room[t].min(headroom - total).max(0.0);
        energy[t] += add;
        room[t] -= add;
        total += add;
    }
    for &t in &order {
        if total >= required {
            break;
        }
        let add = room[t].min(required - total).min(headroom - total).max(0.0);
        energy[t] += add;
        room[t] -= add;
        total += add;
    }
    if total < required - tol {
        return None;
    }
    Some(energy)
}

/// Candidate block lengths in tie-break order (shortest first, `0` first).
fn candidate_blocks(player: &Player, config: &GameConfig) -> Vec<usize> {
    let max = config.max_stay();
    match player.status {
        PlayerStatus::Arriving => std::iter::once(0).chain(config.min_stay()..=max).collect(),
        PlayerStatus::AtStation { elapsed } => {
            let min = config.min_stay().saturating_sub(elapsed);
            (min..=max).collect()
        }
    }
}

fn build(player: &Player, block: usize, others: &SharedPlan, inputs: &GameInputs, config: &GameConfig) -> Option<Decision> {
    let n = config.horizon_len();
    let at_station = matches!(player.status, PlayerStatus::AtStation { .. });
    if block == 0 {
        if at_station && player.soc < player.params.soc_ref {
            return None;
        }
        return Some(Decision {
            stops: at_station,
            ..Decision::no_stop(n)
        });
    }
    let energy = fill_energy(player, block, others, inputs, config)?;
    Some(Decision {
        stops: true,
        reentry: block,
        block,
        energy_kwh: energy,
    })
}

/// Checks every local and coupling constraint of `decision` given the others.
pub fn feasible(player: &Player, decision: &Decision, others: &SharedPlan, config: &GameConfig) -> bool {
    let n = config.horizon_len();
    let tol = 1e-9;
    let at_station = matches!(player.status, PlayerStatus::AtStation { .. });
    if decision.energy_kwh.len() != n || !candidate_blocks(player, config).contains(&decision.block) {
        return false;
    }
    let stops = at_station || decision.block > 0;
    if decision.stops != stops || decision.reentry != decision.block {
        return false;
    }
    let agent = &player.params;
    for (t, &u) in decision.energy_kwh.iter().enumerate() {
        if t < decision.block {
            let hi = config.u_max_kwh.min(config.station_max_kwh - others.energy_kwh[t]);
            if others.occupancy[t] + 1 > config.spots || u < config.u_min_kwh - tol || u > hi + tol {
                return false;
            }
        } else if u != 0.0 {
            return false;
        }
    }
    let soc_end = player.soc + agent.soc_gain(decision.total_energy());
    if soc_end > 1.0 + tol {
        return false;
    }
    !(stops && soc_end < agent.soc_ref - tol)
}

/// Best feasible plan of `player` against the aggregate plan of the others.
pub fn best_response(
    player: &Player,
    others: &SharedPlan,
    config: &GameConfig,
    inputs: &GameInputs,
) -> Result<(Decision, CostSplit)> {
    let xcs = xi_cs(others, config.s2r_scale_h);
    let mut best: Option<(Decision, CostSplit)> = None;
    for block in candidate_blocks(player, config) {
        let Some(decision) = build(player, block, others, inputs, config) else {
            continue;
        };
        let cost = evaluate(&player.params, &decision, inputs, &xcs, config);
        if best.as_ref().is_none_or(|(_, c)| cost.total < c.total) {
            best = Some((decision, cost));
        }
    }
    best.ok_or_else(|| {
        Error::Infeasible(format!(
            "agent {} (soc {:.3}, x_ref {:.3}) has no feasible plan",
            player.params.id, player.soc, player.params.soc_ref
        ))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSolution {
    pub decisions: Vec<Decision>,
    pub costs: Vec<CostSplit>,
    pub sweeps: usize,
    pub sweep_costs: Vec<f64>,
    pub plan: SharedPlan,
}

fn initial_decision(player: &Player, config: &GameConfig) -> Decision {
    match (&player.status, &player.carried) {
        (PlayerStatus::AtStation { .. }, Some(d)) => d.clone(),
        _ => Decision::no_stop(config.horizon_len()),
    }
}

/// Sequential (Gauss-Seidel) best-response dynamics.
///
/// Players are visited in the given order; a player switches only when its
/// best response improves its cost by more than `epsilon`. The dynamics stop
/// after the first sweep without switches.
pub fn solve_game(players: &[Player], config: &GameConfig, inputs: &GameInputs) -> Result<GameSolution> {
    config.validate()?;
    inputs.validate(config)?;
    for p in players {
        p.params.validate()?;
    }
    let n = config.horizon_len();
    let mut decisions: Vec<Decision> = players.iter().map(|p| initial_decision(p, config)).collect();
    let mut plan = SharedPlan::from_decisions(n, &decisions);
    if plan.occupancy.iter().any(|&o| o > config.spots) {
        return Err(Error::Infeasible("carried plans exceed the spot count".into()));
    }
    // A plugged-in vehicle keeps its spot: station agents without a carried
    // plan claim one before arriving agents are considered.
    for (i, player) in players.iter().enumerate() {
        if matches!(player.status, PlayerStatus::AtStation { .. }) && player.carried.is_none() {
            plan.remove(&decisions[i]);
            decisions[i] = best_response(player, &plan, config, inputs)?.0;
            plan.add(&decisions[i]);
        }
    }
    let mut costs = vec![CostSplit::default(); players.len()];
    let mut sweep_costs = Vec::new();

    for sweep in 1..=config.max_sweeps {
        let mut switched = false;
        for (i, player) in players.iter().enumerate() {
            plan.remove(&decisions[i]);
            let xcs = xi_cs(&plan, config.s2r_scale_h);
            let current = evaluate(&player.params, &decisions[i], inputs, &xcs, config);
            let current_ok = feasible(player, &decisions[i], &plan, config);
            let (candidate, cost) = best_response(player, &plan, config, inputs)?;
            if !current_ok || cost.total < current.total - config.epsilon {
                decisions[i] = candidate;
                costs[i] = cost;
                switched = true;
            } else {
                costs[i] = current;
            }
            plan.add(&decisions[i]);
        }
        // Costs recorded during the sweep may predate later switches.
        let total = players
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut others = plan.clone();
                others.remove(&decisions[i]);
                let xcs = xi_cs(&others, config.s2r_scale_h);
                costs[i] = evaluate(&p.params, &decisions[i], inputs, &xcs, config);
                costs[i].total
            })
            .sum();
        sweep_costs.push(total);
        if !switched {
            return Ok(GameSolution {
                decisions,
                costs,
                sweeps: sweep,
                sweep_costs,
                plan,
            });
        }
    }
    Err(Error::NonConvergence {
        sweeps: config.max_sweeps,
        sweep_costs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn agent(id: u64, alpha: f64) -> AgentParams {
        AgentParams {
            id,
            capacity_kwh: 60.0,
            efficiency: 0.9,
            alpha,
            soc_ref: 0.3,
            home_price: 0.205,
        }
    }

    fn flat_inputs(config: &GameConfig, price: f64, xi: f64) -> GameInputs {
        GameInputs {
            predicted_price: vec![price; config.horizon_len()],
            xi_h: vec![xi; config.horizon_len()],
        }
    }

    #[test]
    fn theta_examples() {
        let support: Vec<usize> = theta(10, 3, 16)
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(t, _)| t)
            .collect();
        assert_eq!(support, (7..=13).collect::<Vec<_>>());
        assert_eq!(theta(4, 0, 6), vec![false, false, false, false, true, false]);
        let end = theta(15, 3, 16);
        assert_eq!(end.iter().filter(|&&b| b).count(), 4);
        assert!(end[12] && end[15]);
    }

    #[test]
    fn chi_weights_sum_to_one_on_full_windows() {
        let c = GameConfig::default();
        let sum = |t_i: usize| -> f64 {
            theta(t_i, 3, 16)
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(t, _)| c.chi(t))
                .sum()
        };
        assert_relative_eq!(sum(0), 1.0, epsilon = 1e-12);
        for t_i in 7..=12 {
            assert_relative_eq!(sum(t_i), 1.0, epsilon = 1e-12);
        }
        assert_relative_eq!(c.chi(3), 0.25);
        assert_relative_eq!(c.chi(4), 1.0 / 7.0);
    }

    #[test]
    fn price_cost_examples() {
        let a = agent(0, 0.5);
        let none = Decision::no_stop(16);
        assert_eq!(cost_price(&a, &none, &[0.3; 16]), 0.0);
        let mut d = Decision::no_stop(16);
        d.energy_kwh[2] = 4.16;
        assert_eq!(cost_price(&a, &d, &[0.205; 16]), 0.0);
        let mut p = vec![0.205; 16];
        p[2] = 0.1553;
        assert_relative_eq!(cost_price(&a, &d, &p), -0.206_752, epsilon = 1e-9);
    }

    #[test]
    fn time_cost_examples() {
        let c = GameConfig::default();
        let zero = vec![0.0; 16];
        let no_idle = GameConfig { idle_weight: 0.0, ..c };
        assert_eq!(cost_time(0, &zero, &zero, &no_idle), 0.0);
        // Driving on still spends the first W+1 intervals of the window.
        assert_relative_eq!(cost_time(0, &zero, &zero, &c), 1.5 * c.interval_h, epsilon = 1e-15);
        // t_i = 5, W = 3: support 2..=8, with 2 and 3 in the first band.
        let hand = (2..=3).map(|t| 0.25 * t as f64).sum::<f64>()
            + (4..=8).map(|t| t as f64 / 7.0).sum::<f64>();
        assert_relative_eq!(cost_time(5, &zero, &zero, &c), hand * c.interval_h, epsilon = 1e-12);
        assert_relative_eq!(cost_time(9, &[0.12; 16], &zero, &no_idle), 0.12, epsilon = 1e-12);
        assert_relative_eq!(cost_time(0, &[0.12; 16], &zero, &no_idle), 0.12, epsilon = 1e-12);
    }

    #[test]
    fn xi_cs_counts_others_only() {
        let mut plan = SharedPlan::empty(16);
        assert!(xi_cs(&plan, 1.79 / 3600.0).iter().all(|&x| x == 0.0));
        for _ in 0..3 {
            plan.add(&Decision {
                stops: true,
                reentry: 8,
                block: 8,
                energy_kwh: vec![0.0; 16],
            });
        }
        let x = xi_cs(&plan, 1.79 / 3600.0);
        assert_relative_eq!(x[8] * 3600.0, 5.37, epsilon = 1e-12);
    }

    #[test]
    fn indifferent_agent_does_not_stop() {
        let c = GameConfig::default();
        let p = Player::arriving(agent(1, 0.5), 0.5);
        let (d, cost) = best_response(&p, &SharedPlan::empty(16), &c, &flat_inputs(&c, 0.205, 0.0)).unwrap();
        assert!(!d.stops);
        assert_relative_eq!(cost.total, 0.5 * 1.5 * c.interval_h, epsilon = 1e-15);
    }

    #[test]
    fn money_minded_agent_takes_the_discount() {
        let c = GameConfig::default();
        let mut inputs = flat_inputs(&c, 0.205, 0.0);
        for t in 0..7 {
            inputs.predicted_price[t] = 0.05;
        }
        let p = Player::arriving(agent(2, 0.99), 0.3);
        let (d, _) = best_response(&p, &SharedPlan::empty(16), &c, &inputs).unwrap();
        assert!(d.stops);
        assert_eq!(d.block, 7);
        assert!(d.energy_kwh[..7].iter().all(|&u| (u - 4.16).abs() < 1e-12));
    }

    #[test]
    fn full_station_forces_no_stop() {
        let c = GameConfig { spots: 2, ..GameConfig::default() };
        let mut others = SharedPlan::empty(16);
        others.occupancy = vec![2; 16];
        let mut inputs = flat_inputs(&c, 0.205, 0.0);
        inputs.predicted_price = vec![0.0; 16];
        let p = Player::arriving(agent(3, 0.99), 0.3);
        let (d, _) = best_response(&p, &others, &c, &inputs).unwrap();
        assert!(!d.stops);
    }

    #[test]
    fn station_agent_below_reference_must_keep_charging() {
        let c = GameConfig::default();
        let p = Player {
            params: agent(4, 0.01),
            soc: 0.2,
            status: PlayerStatus::AtStation { elapsed: 9 },
            carried: None,
        };
        let (d, _) = best_response(&p, &SharedPlan::empty(16), &c, &flat_inputs(&c, 0.3, 0.0)).unwrap();
        assert!(d.block >= 1);
        let soc = p.soc + p.params.soc_gain(d.total_energy());
        assert!(soc >= p.params.soc_ref - 1e-12);
    }

    #[test]
    fn greedy_fill_with_slack_bounds() {
        let c = GameConfig {
            u_min_kwh: 1.0,
            ..GameConfig::default()
        };
        let mut inputs = flat_inputs(&c, 0.3, 0.0);
        inputs.predicted_price[1] = 0.1;
        let p = Player::arriving(agent(5, 0.5), 0.5);
        let e = fill_energy(&p, 7, &SharedPlan::empty(16), &inputs, &c).unwrap();
        assert_relative_eq!(e[1], 4.16);
        for t in [0, 2, 3, 4, 5, 6] {
            assert_relative_eq!(e[t], 1.0);
        }
    }

    #[test]
    fn two_agents_one_spot() {
        let c = GameConfig { spots: 1, ..GameConfig::default() };
        let mut inputs = flat_inputs(&c, 0.205, 0.0);
        for t in 0..8 {
            inputs.predicted_price[t] = 0.0;
        }
        let players = vec![Player::arriving(agent(1, 0.9), 0.3), Player::arriving(agent(2, 0.9), 0.3)];
        let sol = solve_game(&players, &c, &inputs).unwrap();
        assert_eq!(sol.decisions.iter().filter(|d| d.stops).count(), 1);
        // Fixed point: nobody improves by deviating.
        for (i, p) in players.iter().enumerate() {
            let mut others = sol.plan.clone();
            others.remove(&sol.decisions[i]);
            let (_, best) = best_response(p, &others, &c, &inputs).unwrap();
            assert!(best.total >= sol.costs[i].total - c.epsilon);
        }
    }

    #[test]
    fn single_agent_game_matches_best_response() {
        let c = GameConfig::default();
        let mut inputs = flat_inputs(&c, 0.2, 0.1);
        for t in 7..16 {
            inputs.xi_h[t] = 0.0;
        }
        let p = Player::arriving(agent(9, 0.3), 0.4);
        let sol = solve_game(std::slice::from_ref(&p), &c, &inputs).unwrap();
        let (d, _) = best_response(&p, &SharedPlan::empty(16), &c, &inputs).unwrap();
        assert_eq!(sol.decisions[0], d);
        assert!(sol.sweeps <= 2);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let c = GameConfig {
            horizon_intervals: 6,
            half_width: 3,
            ..GameConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
