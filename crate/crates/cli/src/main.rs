mod axis;
mod config;
mod manifest;

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atdm_core::ctm::save_stretch;
use atdm_core::identification::{identify_stretch, read_sensor_csv, write_boundary_csv, write_sensor_csv, IdentificationConfig};
use atdm_core::pricing::write_demand_csv;
use atdm_core::scenario::{
    export_baseline, export_result, run_atdm, run_baseline, sweep, write_sweep_csv, SweepSpec, RESULT_FILES,
};
use atdm_core::synthdata::{generate_day, generate_demand, GroundTruth, NoiseLevels};
use atdm_core::Error;
use clap::{Parser, Subcommand};

use crate::manifest::ManifestBuilder;

#[derive(Parser, Debug)]
#[command(name = "atdm", version, about = "Highway congestion control through dynamic charging prices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit per-cell traffic parameters from loop-detector data.
    Identify {
        /// Sensor CSV (timestamp_utc, sensor_id, vehicle_count, avg_speed_kmh, period_s).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Quantile level of the congested-branch regression.
        #[arg(long, default_value_t = 0.5, value_parser = open_unit)]
        quantile: f64,
        /// Speed (km/h) separating free-flowing from congested samples.
        #[arg(long, default_value_t = 70.0, value_parser = positive)]
        speed_threshold: f64,
        /// Cell lengths in km, upstream first; defaults to the A13 stretch.
        #[arg(long, value_delimiter = ',', value_parser = positive)]
        cell_lengths: Option<Vec<f64>>,
        /// Keep the plain speed-threshold split.
        #[arg(long)]
        no_refine: bool,
    },
    /// Run one day with the charging station (or the baseline alone).
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only replay the day without the station.
        #[arg(long)]
        baseline_only: bool,
    },
    /// Performance index over a parameter grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `name=values`, values as `a,b,c` or `start:stop:step`. Repeat for a grid.
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
        /// Replication seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic detector day with its ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Multiplicative noise on counts and speeds, in percent.
        #[arg(long, default_value_t = 2.0, value_parser = nonnegative)]
        noise: f64,
    },
}

fn open_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not inside (0, 1)"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be positive"))
    }
}

fn nonnegative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be nonnegative"))
    }
}

/// Failure carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_IDENTIFICATION: u8 = 4;
pub const EXIT_NON_CONVERGENCE: u8 = 5;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Identification { .. } | Error::Fit(_) => EXIT_IDENTIFICATION,
            e if e.is_non_convergence() => EXIT_NON_CONVERGENCE,
            Error::InvalidParams(_) | Error::Sampling { .. } | Error::Domain(_) | Error::EmptyGrid => EXIT_USAGE,
            Error::Consistency { .. } | Error::Infeasible(_) => 1,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::data(format!("cannot create {}: {e}", out.display())))
}

fn create(path: &Path) -> Result<File, CliError> {
    File::create(path).map_err(|e| CliError::data(format!("cannot create {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn identify(
    data: &Path,
    out: &Path,
    quantile: f64,
    speed_threshold: f64,
    cell_lengths: Option<Vec<f64>>,
    refine: bool,
) -> Result<(), CliError> {
    let mut manifest = ManifestBuilder::new("identify", None);
    manifest.input(data)?;
    let file = File::open(data).map_err(|e| CliError::data(format!("cannot open {}: {e}", data.display())))?;
    let samples = read_sensor_csv(file)?;
    let mut config = IdentificationConfig {
        quantile,
        speed_threshold_kmh: speed_threshold,
        refine,
        ..Default::default()
    };
    if let Some(lengths) = cell_lengths {
        config.cell_lengths_km = lengths;
    }
    let result = identify_stretch(&samples, &config)?;
    create_dir(out)?;
    save_stretch(&result.params, &out.join("params.csv"))?;
    write_json(&out.join("fit_report.json"), &result.report)?;
    write_boundary_csv(&result.boundary, create(&out.join("boundary.csv"))?)?;
    manifest.write(out, &["params.csv", "fit_report.json", "boundary.csv"])?;
    for c in &result.report.cells {
        eprintln!(
            "cell {:>2}: v {:7.2} km/h  w {:6.2} km/h  qmax {:9.0} veh/h  rhomax {:7.1} veh/km",
            c.cell, c.fit.free_slope, -c.fit.congested_slope, c.fit.q_max, c.fit.rho_max
        );
    }
    Ok(())
}

fn simulate(config_path: &Path, out: &Path, baseline_only: bool) -> Result<(), CliError> {
    let mut loaded = config::load(config_path)?;
    let scenario = loaded.scenario()?;
    let mut manifest = ManifestBuilder::new("simulate", Some(&loaded.text)).seed(scenario.seed);
    manifest.input(config_path)?;
    for p in &loaded.inputs {
        manifest.input(p)?;
    }
    create_dir(out)?;
    if baseline_only {
        let baseline = run_baseline(&scenario)?;
        export_baseline(&scenario, &baseline, out)?;
        manifest.write(out, &["delta.csv"])?;
        return Ok(());
    }
    match run_atdm(&scenario) {
        Ok(result) => {
            export_result(&result, out)?;
            manifest.write(out, &RESULT_FILES)?;
            let s = result.summary();
            eprintln!(
                "pi = {:.4}%  stoppers {} of {} agents  peak {:.4} h -> {:.4} h",
                s.pi, s.stoppers, s.agents, s.peak_delta0_h, s.peak_delta_h
            );
            Ok(())
        }
        Err(e) if e.is_non_convergence() => {
            let path = out.join("diagnostics.json");
            write_json(&path, &diagnostics(&e))?;
            manifest.write(out, &["diagnostics.json"])?;
            Err(CliError {
                code: EXIT_NON_CONVERGENCE,
                message: format!("{e}; diagnostics in {}", path.display()),
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn diagnostics(e: &Error) -> serde_json::Value {
    let mut interval = None;
    let mut inner = e;
    if let Error::Interval { interval: k, source } = e {
        interval = Some(*k);
        inner = source;
    }
    let (sweeps, costs) = match inner {
        Error::NonConvergence { sweeps, sweep_costs } => (Some(*sweeps), sweep_costs.clone()),
        _ => (None, Vec::new()),
    };
    serde_json::json!({
        "error": e.to_string(),
        "interval": interval,
        "sweeps": sweeps,
        "sweep_costs": costs,
    })
}

fn run_sweep(config_path: &Path, axes: &[String], seeds: Option<Vec<u64>>, out: &Path) -> Result<(), CliError> {
    let axes = axes.iter().map(|a| axis::parse(a)).collect::<Result<Vec<_>, _>>()?;
    let mut loaded = config::load(config_path)?;
    let scenario = loaded.scenario()?;
    let seeds = seeds.unwrap_or_else(|| vec![scenario.seed]);
    if seeds.is_empty() {
        return Err(CliError::usage("no seeds given"));
    }
    let mut manifest = ManifestBuilder::new("sweep", Some(&loaded.text)).seed(scenario.seed);
    manifest.input(config_path)?;
    for p in &loaded.inputs {
        manifest.input(p)?;
    }
    let spec = SweepSpec { axes, seeds };
    let rows = sweep(&spec, &scenario)?;
    create_dir(out)?;
    write_sweep_csv(&rows, create(&out.join("sweep.csv"))?)?;
    manifest.write(out, &["sweep.csv"])?;
    let failed: Vec<_> = rows.iter().filter(|r| r.error.is_some()).collect();
    for r in &failed {
        let point: Vec<String> = r.settings.iter().map(|s| format!("{}={}", s.axis(), s.value())).collect();
        eprintln!("failed: {} seed {}: {}", point.join(" "), r.seed, r.error.as_deref().unwrap_or(""));
    }
    eprintln!("{} rows, {} failed", rows.len(), failed.len());
    Ok(())
}

fn synth(out: &Path, seed: u64, noise_pct: f64) -> Result<(), CliError> {
    let manifest = ManifestBuilder::new("synth", None).seed(seed);
    let truth = GroundTruth::a13(NoiseLevels::uniform(noise_pct / 100.0));
    let day = generate_day(&truth, seed)?;
    let params = truth.stretch()?;
    let interval_s = 100.0;
    let intervals = (truth.steps() as f64 * truth.step_s / interval_s) as usize;
    let demand = generate_demand(seed, intervals, interval_s, truth.scenario.start_h);
    create_dir(out)?;
    write_sensor_csv(&day.samples, create(&out.join("sensors.csv"))?)?;
    write_demand_csv(&demand, create(&out.join("demand.csv"))?)?;
    save_stretch(&params, &out.join("truth_params.csv"))?;
    write_boundary_csv(&day.trajectory.boundary, create(&out.join("boundary.csv"))?)?;
    let scenario = format!(
        "seed = {seed}\n\n[data]\nstretch = \"truth_params.csv\"\nboundary = \"boundary.csv\"\ndemand = \"demand.csv\"\nstart_h = {:?}\n",
        truth.scenario.start_h
    );
    std::fs::write(out.join("scenario.toml"), scenario).map_err(|e| CliError::data(e.to_string()))?;
    manifest.write(
        out,
        &["sensors.csv", "demand.csv", "truth_params.csv", "boundary.csv", "scenario.toml"],
    )?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Identify {
            data,
            out,
            quantile,
            speed_threshold,
            cell_lengths,
            no_refine,
        } => identify(&data, &out, quantile, speed_threshold, cell_lengths, !no_refine),
        Command::Simulate {
            config,
            out,
            baseline_only,
        } => simulate(&config, &out, baseline_only),
        Command::Sweep {
            config,
            axes,
            seeds,
            out,
        } => run_sweep(&config, &axes, seeds, &out),
        Command::Synth { out, seed, noise } => synth(&out, seed, noise),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn quantile_outside_unit_interval_is_rejected() {
        let r = Cli::try_parse_from(["atdm", "identify", "--data", "x.csv", "--out", "o", "--quantile", "1.5"]);
        assert!(r.is_err());
    }

    #[test]
    fn error_codes() {
        let code = |e: Error| CliError::from(e).code;
        assert_eq!(code(Error::MissingColumn("period_s".into())), EXIT_DATA);
        assert_eq!(
            code(Error::Identification {
                cell: 3,
                cause: "x".into()
            }),
            EXIT_IDENTIFICATION
        );
        let nc = Error::Interval {
            interval: 9,
            source: Box::new(Error::NonConvergence {
                sweeps: 100,
                sweep_costs: vec![1.0],
            }),
        };
        assert_eq!(code(nc), EXIT_NON_CONVERGENCE);
        assert_eq!(code(Error::EmptyGrid), EXIT_USAGE);
    }
}
