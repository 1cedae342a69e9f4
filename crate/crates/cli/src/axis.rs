//! Parsing of `--axis name=values` sweep arguments.

use atdm_core::scenario::{ScheduleKind, Setting};

use crate::CliError;

pub const AXES: [&str; 5] = ["spots", "incentive", "pev_share", "alpha_std", "incentive_schedule"];

/// Parses `a,b,c` or an inclusive `start:stop:step` range.
fn numbers(values: &str) -> Result<Vec<f64>, String> {
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| format!("`{s}` is not a number"));
    let parts: Vec<&str> = values.split(':').collect();
    match parts.as_slice() {
        [single] => single.split(',').filter(|s| !s.trim().is_empty()).map(parse).collect(),
        [start, stop, step] => {
            let (start, stop, step) = (parse(start)?, parse(stop)?, parse(step)?);
            if !(step > 0.0) || stop < start {
                return Err(format!("range {values} is empty or has a nonpositive step"));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
            Ok((0..n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect())
        }
        _ => Err(format!("`{values}` is neither a list nor start:stop:step")),
    }
}

pub fn parse(arg: &str) -> Result<Vec<Setting>, CliError> {
    let (name, values) = arg
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("axis `{arg}` must look like name=values")))?;
    let name = name.trim();
    let settings = match name {
        "incentive_schedule" => values
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| match s.trim() {
                "constant" => Ok(Setting::Schedule(ScheduleKind::Constant)),
                "morning_weighted" => Ok(Setting::Schedule(ScheduleKind::MorningWeighted)),
                other => Err(CliError::usage(format!(
                    "unknown schedule `{other}` (constant, morning_weighted)"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()?,
        "spots" | "incentive" | "pev_share" | "alpha_std" => {
            let xs = numbers(values).map_err(|e| CliError::usage(format!("axis {name}: {e}")))?;
            xs.into_iter()
                .map(|x| match name {
                    "spots" if x >= 1.0 && x.fract() == 0.0 => Ok(Setting::Spots(x as usize)),
                    "spots" => Err(CliError::usage(format!("spots must be positive integers, got {x}"))),
                    "incentive" => Ok(Setting::Incentive(x)),
                    "pev_share" => Ok(Setting::PevShare(x)),
                    _ => Ok(Setting::AlphaStd(x)),
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        other => {
            return Err(CliError::usage(format!(
                "unknown axis `{other}`; expected one of {}",
                AXES.join(", ")
            )))
        }
    };
    if settings.is_empty() {
        return Err(CliError::usage(format!("axis {name} has no values")));
    }
    Ok(settings)
}
