//! Brute-force reference for small charging games.
//!
//! Every plan of one agent is enumerated from scratch: all binary charging
//! patterns, all re-entry times, and for the energy LP all basic solutions
//! (at most one variable strictly between its bounds, since the only coupling
//! is one sum constraint). Costs are recomputed from the definitions without
//! calling the solver's helpers.

#![allow(dead_code)]

use atdm_core::game::{AgentParams, Decision, GameConfig, GameInputs, Player, PlayerStatus};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-9;

pub struct Instance {
    pub players: Vec<Player>,
    pub config: GameConfig,
    pub inputs: GameInputs,
}

/// Aggregates of everybody except agent `i`.
struct Others {
    occupancy: Vec<usize>,
    energy: Vec<f64>,
    reentries: Vec<usize>,
}

fn others(i: usize, decisions: &[Decision], n: usize) -> Others {
    let mut o = Others {
        occupancy: vec![0; n],
        energy: vec![0.0; n],
        reentries: vec![0; n],
    };
    for (j, d) in decisions.iter().enumerate() {
        if j == i {
            continue;
        }
        for t in 0..n {
            o.occupancy[t] += usize::from(t < d.block);
            o.energy[t] += d.energy_kwh[t];
        }
        if d.stops {
            o.reentries[d.reentry] += 1;
        }
    }
    o
}

fn chi(t: usize, w: usize) -> f64 {
    if t < w + 1 {
        1.0 / (w as f64 + 1.0)
    } else {
        1.0 / (2.0 * w as f64 + 1.0)
    }
}

fn time_cost(reentry: usize, o: &Others, inst: &Instance) -> f64 {
    let c = &inst.config;
    let n = c.horizon_intervals + 1;
    let mut sum = 0.0;
    for t in 0..n {
        let inside = t + c.half_width >= reentry && t <= reentry + c.half_width;
        if inside {
            let idle = t as f64 * c.interval_h * c.idle_weight;
            let merge = c.s2r_scale_h * o.reentries[t] as f64;
            sum += chi(t, c.half_width) * (idle + inst.inputs.xi_h[t] + merge);
        }
    }
    sum
}

fn total_cost(agent: &AgentParams, energy: &[f64], reentry: usize, o: &Others, inst: &Instance) -> f64 {
    let price: f64 = energy
        .iter()
        .zip(&inst.inputs.predicted_price)
        .map(|(u, p)| (p - agent.home_price) * u)
        .sum();
    agent.alpha * price + (1.0 - agent.alpha) * time_cost(reentry, o, inst)
}

/// Cost of agent `i` under the profile, computed from the definitions.
pub fn cost(i: usize, decisions: &[Decision], inst: &Instance) -> f64 {
    let n = inst.config.horizon_intervals + 1;
    let o = others(i, decisions, n);
    let d = &decisions[i];
    total_cost(&inst.players[i].params, &d.energy_kwh, d.reentry, &o, inst)
}

/// Structural constraints on (charging pattern, re-entry, stop flag).
fn admissible_pattern(player: &Player, flags: &[bool], reentry: usize, stops: bool, inst: &Instance) -> bool {
    let c = &inst.config;
    let w = c.half_width;
    // Charging starts at arrival and is not interrupted.
    for t in 1..flags.len() {
        if flags[t] && !flags[t - 1] {
            return false;
        }
    }
    let r = flags.iter().filter(|&&f| f).count();
    let at_station = matches!(player.status, PlayerStatus::AtStation { .. });
    let elapsed = match player.status {
        PlayerStatus::AtStation { elapsed } => elapsed,
        PlayerStatus::Arriving => 0,
    };
    // An agent already plugged in is a stopper whatever it does next.
    if stops != (at_station || r > 0) {
        return false;
    }
    // The vehicle leaves right after its last charging interval.
    if reentry != r {
        return false;
    }
    if stops && elapsed + r < 2 * w + 1 {
        return false;
    }
    reentry + w <= c.horizon_intervals
}

/// Checks the energy vector against local and coupling bounds.
fn energy_ok(player: &Player, flags: &[bool], energy: &[f64], stops: bool, o: &Others, inst: &Instance) -> bool {
    let c = &inst.config;
    for t in 0..flags.len() {
        if flags[t] {
            if o.occupancy[t] + 1 > c.spots {
                return false;
            }
            let hi = c.u_max_kwh.min(c.station_max_kwh - o.energy[t]);
            if energy[t] < c.u_min_kwh - TOL || energy[t] > hi + TOL {
                return false;
            }
        } else if energy[t] != 0.0 {
            return false;
        }
    }
    let a = &player.params;
    let soc = player.soc + a.efficiency * energy.iter().sum::<f64>() / a.capacity_kwh;
    if soc > 1.0 + TOL {
        return false;
    }
    !(stops && soc < a.soc_ref - TOL)
}

/// Minimum cost over every feasible unilateral plan of agent `i`.
pub fn best_cost(i: usize, decisions: &[Decision], inst: &Instance) -> Option<f64> {
    let c = &inst.config;
    let n = c.horizon_intervals + 1;
    let o = others(i, decisions, n);
    let player = &inst.players[i];
    let a = &player.params;
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << n) {
        let flags: Vec<bool> = (0..n).map(|t| mask & (1 << t) != 0).collect();
        for reentry in 0..n {
            for stops in [false, true] {
                if !admissible_pattern(player, &flags, reentry, stops, inst) {
                    continue;
                }
                let on: Vec<usize> = (0..n).filter(|&t| flags[t]).collect();
                let lo = c.u_min_kwh;
                let his: Vec<f64> = on.iter().map(|&t| c.u_max_kwh.min(c.station_max_kwh - o.energy[t])).collect();
                if his.iter().any(|&h| h < lo - TOL) {
                    continue;
                }
                let mut candidates: Vec<Vec<f64>> = Vec::new();
                let m = on.len();
                let smax = (1.0 - player.soc) * a.capacity_kwh / a.efficiency;
                let smin = ((a.soc_ref - player.soc) * a.capacity_kwh / a.efficiency).max(0.0);
                for bits in 0u32..(1 << m) {
                    let at_bounds: Vec<f64> = (0..m).map(|j| if bits & (1 << j) != 0 { his[j] } else { lo }).collect();
                    candidates.push(at_bounds.clone());
                    for j in 0..m {
                        let rest: f64 = at_bounds.iter().enumerate().filter(|&(k, _)| k != j).map(|(_, v)| v).sum();
                        for target in [smin, smax] {
                            let v = target - rest;
                            if v >= lo - TOL && v <= his[j] + TOL {
                                let mut u = at_bounds.clone();
                                u[j] = v.clamp(lo, his[j]);
                                candidates.push(u);
                            }
                        }
                    }
                }
                for u in candidates {
                    let mut energy = vec![0.0; n];
                    for (k, &t) in on.iter().enumerate() {
                        energy[t] = u[k];
                    }
                    if !energy_ok(player, &flags, &energy, stops, &o, inst) {
                        continue;
                    }
                    let v = total_cost(a, &energy, reentry, &o, inst);
                    if best.is_none_or(|b| v < b) {
                        best = Some(v);
                    }
                }
            }
        }
    }
    best
}

/// Every way the profile fails to be a feasible mutual best response.
pub fn violations(decisions: &[Decision], inst: &Instance, epsilon: f64) -> Vec<String> {
    let c = &inst.config;
    let n = c.horizon_intervals + 1;
    let mut out = Vec::new();
    for t in 0..n {
        let occ: usize = decisions.iter().filter(|d| t < d.block).count();
        let e: f64 = decisions.iter().map(|d| d.energy_kwh[t]).sum();
        if occ > c.spots {
            out.push(format!("t={t}: occupancy {occ} > {}", c.spots));
        }
        if e > c.station_max_kwh + TOL {
            out.push(format!("t={t}: energy {e} > {}", c.station_max_kwh));
        }
    }
    for (i, d) in decisions.iter().enumerate() {
        let o = others(i, decisions, n);
        let flags: Vec<bool> = (0..n).map(|t| t < d.block).collect();
        let player = &inst.players[i];
        if !admissible_pattern(player, &flags, d.reentry, d.stops, inst)
            || !energy_ok(player, &flags, &d.energy_kwh, d.stops, &o, inst)
        {
            out.push(format!("agent {i}: infeasible plan {d:?}"));
            continue;
        }
        let own = cost(i, decisions, inst);
        match best_cost(i, decisions, inst) {
            Some(best) if own > best + epsilon + 1e-9 => {
                out.push(format!("agent {i}: cost {own} but {best} reachable"))
            }
            None => out.push(format!("agent {i}: oracle found no feasible plan")),
            _ => {}
        }
    }
    out
}

/// Random small instance; station agents are drawn so that a plan exists.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let w = rng.random_range(0..=1usize);
    let th = rng.random_range(2 * w + 1..=6usize);
    let n = th + 1;
    let agents = rng.random_range(1..=3usize);
    let u_bar = 4.16;
    let u_min = if rng.random_bool(0.5) { u_bar } else { u_bar * rng.random_range(0.2..1.0) };
    let mut players = Vec::new();
    let mut station = 0;
    for id in 0..agents {
        let at_station = rng.random_bool(0.35);
        let soc_ref = rng.random_range(0.25..0.35);
        let mut params = AgentParams {
            id: id as u64,
            capacity_kwh: [12.0, 24.0, 40.0, 64.0, 100.0][rng.random_range(0..5)],
            efficiency: rng.random_range(0.85..0.99),
            alpha: rng.random_range(0.02..0.98),
            soc_ref,
            home_price: 0.205,
        };
        let (soc, status) = if at_station {
            station += 1;
            params.capacity_kwh = params.capacity_kwh.max(40.0);
            let elapsed = rng.random_range(1..=2 * w + 1);
            (rng.random_range(soc_ref - 0.02..0.5), PlayerStatus::AtStation { elapsed })
        } else {
            (rng.random_range(0.1..0.95), PlayerStatus::Arriving)
        };
        players.push(Player {
            params,
            soc,
            status,
            carried: None,
        });
    }
    let spots = rng.random_range(station.max(1)..=3);
    let station_max_kwh = if station > 0 || rng.random_bool(0.5) {
        u_bar * spots as f64 * rng.random_range(1.0..1.5)
    } else {
        u_bar * rng.random_range(1.0..2.5)
    };
    let config = GameConfig {
        horizon_intervals: th,
        half_width: w,
        spots,
        station_max_kwh,
        u_min_kwh: u_min,
        u_max_kwh: u_bar,
        ..GameConfig::default()
    };
    let inputs = GameInputs {
        predicted_price: (0..n).map(|_| 0.205 + rng.random_range(-0.12..0.05)).collect(),
        xi_h: (0..n).map(|_| rng.random_range(0.0..0.3)).collect(),
    };
    Instance {
        players,
        config,
        inputs,
    }
}
