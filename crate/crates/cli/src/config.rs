//! TOML scenario file.
//!
//! Parameter keys follow the usual names of the base-case table (`p_EV`, `lT`,
//! `T_h`, `delta_bar`, ...). Every key is optional; omitted keys take the
//! base-case value. Data paths are resolved relative to the config file, and
//! any data file left out is replaced by the built-in synthetic day.

use std::path::{Path, PathBuf};

use atdm_core::ctm::load_stretch;
use atdm_core::identification::read_boundary_csv;
use atdm_core::pricing::{read_demand_csv, IncentiveSchedule};
use atdm_core::scenario::{PriceCalibration, ScenarioConfig, ScheduleKind};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub parameters: Parameters,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Cell parameters in the `ell,L_km,T_s,...` layout.
    pub stretch: Option<PathBuf>,
    /// Boundary flows at the CTM step.
    pub boundary: Option<PathBuf>,
    /// Grid demand per game interval.
    pub demand: Option<PathBuf>,
    /// Time of day of the first boundary step, in hours.
    pub start_h: Option<f64>,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Parameters {
    pub p_EV: f64,
    /// Game interval in seconds.
    pub lT: f64,
    pub T_h: usize,
    pub W: usize,
    pub delta_bar: usize,
    pub u_max: f64,
    pub u_bar: f64,
    pub u_min: f64,
    pub upsilon: f64,
    /// Merge delay per re-entering vehicle, in seconds.
    pub gamma: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub p_bar: f64,
    pub incentive: f64,
    pub incentive_schedule: ScheduleKind,
    /// Recompute `c3` and `beta1` from the baseline peak.
    pub calibrate: bool,
    pub mu_alpha: f64,
    pub sigma_alpha: f64,
    pub C_pool: Vec<f64>,
    pub eta: [f64; 2],
    pub x_ref: [f64; 2],
    /// Range of the state of charge at arrival.
    pub x0: [f64; 2],
    pub epsilon: f64,
    pub max_sweeps: usize,
}

impl Default for Parameters {
    fn default() -> Self {
        let base = ScenarioConfig::synthetic_base_case(1).expect("built-in base case is valid");
        let g = base.game;
        let p = base.price;
        Parameters {
            p_EV: base.pev_share,
            lT: g.interval_h * 3600.0,
            T_h: g.horizon_intervals,
            W: g.half_width,
            delta_bar: g.spots,
            u_max: g.station_max_kwh,
            u_bar: g.u_max_kwh,
            u_min: g.u_min_kwh,
            upsilon: g.idle_weight,
            gamma: g.s2r_scale_h * 3600.0,
            c1: p.c1,
            c2: p.c2,
            c3: p.c3,
            beta0: p.beta0,
            beta1: p.beta1,
            p_bar: p.avg_price,
            incentive: p.schedule.nominal(),
            incentive_schedule: ScheduleKind::Constant,
            calibrate: true,
            mu_alpha: base.alpha_mean,
            sigma_alpha: base.alpha_std,
            C_pool: base.pools.capacity_kwh.clone(),
            eta: [base.pools.efficiency.0, base.pools.efficiency.1],
            x_ref: [base.pools.soc_ref.0, base.pools.soc_ref.1],
            x0: [base.pools.soc.0, base.pools.soc.1],
            epsilon: g.epsilon,
            max_sweeps: g.max_sweeps,
        }
    }
}

/// A parsed config file together with its raw text and location.
pub struct LoadedConfig {
    pub file: ConfigFile,
    pub text: String,
    pub dir: PathBuf,
    /// Data files actually read.
    pub inputs: Vec<PathBuf>,
}

pub fn load(path: &Path) -> Result<LoadedConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read config {}: {e}", path.display())))?;
    let file: ConfigFile =
        toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig {
        file,
        text,
        dir,
        inputs: Vec::new(),
    })
}

impl LoadedConfig {
    /// Builds the scenario, reading the referenced data files.
    pub fn scenario(&mut self) -> Result<ScenarioConfig, CliError> {
        let mut config = ScenarioConfig::synthetic_base_case(self.file.seed)?;
        let data = self.file.data.clone();
        if let Some(p) = &data.stretch {
            let path = self.dir.join(p);
            config.stretch = load_stretch(&path)?;
            self.inputs.push(path);
        }
        if let Some(p) = &data.boundary {
            let path = self.dir.join(p);
            config.boundary = read_boundary_csv(open(&path)?)?;
            self.inputs.push(path);
        }
        if let Some(p) = &data.demand {
            let path = self.dir.join(p);
            config.demand = read_demand_csv(open(&path)?)?;
            self.inputs.push(path);
        }
        if let Some(h) = data.start_h {
            config.start_h = h;
        }
        apply(&self.file.parameters, &mut config);
        config.validate()?;
        Ok(config)
    }
}

fn open(path: &Path) -> Result<std::fs::File, CliError> {
    std::fs::File::open(path).map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))
}

fn apply(p: &Parameters, config: &mut ScenarioConfig) {
    let g = &mut config.game;
    g.interval_h = p.lT / 3600.0;
    g.horizon_intervals = p.T_h;
    g.half_width = p.W;
    g.spots = p.delta_bar;
    g.station_max_kwh = p.u_max;
    g.u_max_kwh = p.u_bar;
    g.u_min_kwh = p.u_min;
    g.idle_weight = p.upsilon;
    g.s2r_scale_h = p.gamma / 3600.0;
    g.epsilon = p.epsilon;
    g.max_sweeps = p.max_sweeps;

    let price = &mut config.price;
    price.c1 = p.c1;
    price.c2 = p.c2;
    price.c3 = p.c3;
    price.beta0 = p.beta0;
    price.beta1 = p.beta1;
    price.avg_price = p.p_bar;
    price.schedule = match p.incentive_schedule {
        ScheduleKind::Constant => IncentiveSchedule::constant(p.incentive),
        ScheduleKind::MorningWeighted => IncentiveSchedule::morning_weighted(p.incentive),
    };
    config.calibration = if p.calibrate {
        PriceCalibration::FromBaseline
    } else {
        PriceCalibration::Fixed
    };

    config.pev_share = p.p_EV;
    config.alpha_mean = p.mu_alpha;
    config.alpha_std = p.sigma_alpha;
    config.pools.capacity_kwh = p.C_pool.clone();
    config.pools.efficiency = (p.eta[0], p.eta[1]);
    config.pools.soc_ref = (p.x_ref[0], p.x_ref[1]);
    config.pools.soc = (p.x0[0], p.x0[1]);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_base_case() {
        let file: ConfigFile = toml::from_str("").unwrap();
        let mut config = ScenarioConfig::synthetic_base_case(1).unwrap();
        let before = config.clone();
        apply(&file.parameters, &mut config);
        assert_eq!(config.game, before.game);
        assert_eq!(config.price, before.price);
        assert_eq!(config.pools, before.pools);
        assert_eq!(config.pev_share, 0.05);
    }

    #[test]
    fn table_names_are_accepted() {
        let text = r#"
            seed = 4
            [parameters]
            p_EV = 0.1
            delta_bar = 150
            sigma_alpha = 0.2
            incentive = 0.3
            incentive_schedule = "morning_weighted"
        "#;
        let file: ConfigFile = toml::from_str(text).unwrap();
        assert_eq!(file.seed, 4);
        assert_eq!(file.parameters.delta_bar, 150);
        assert_eq!(file.parameters.incentive_schedule, ScheduleKind::MorningWeighted);
    }

    #[test]
    fn typos_are_rejected() {
        assert!(toml::from_str::<ConfigFile>("[parameters]\np_ev = 0.1\n").is_err());
    }
}
