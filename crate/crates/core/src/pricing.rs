//! Congestion-discounted charging price set by the highway operator.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction `y` of the average price granted as discount at peak congestion,
/// possibly varying with the time of day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IncentiveSchedule {
    Constant {
        fraction: f64,
    },
    /// `fraction` inside `[band_start_h, band_end_h)`, `off_band_factor * fraction` elsewhere.
    TwoBand {
        fraction: f64,
        band_start_h: f64,
        band_end_h: f64,
        off_band_factor: f64,
    },
}

impl IncentiveSchedule {
    pub fn constant(fraction: f64) -> Self {
        IncentiveSchedule::Constant { fraction }
    }

    /// Full incentive from 07:00 to 16:00 and a fifth of it for the rest of the day.
    pub fn morning_weighted(fraction: f64) -> Self {
        IncentiveSchedule::TwoBand {
            fraction,
            band_start_h: 7.0,
            band_end_h: 16.0,
            off_band_factor: 0.2,
        }
    }

    pub fn nominal(&self) -> f64 {
        match *self {
            IncentiveSchedule::Constant { fraction } => fraction,
            IncentiveSchedule::TwoBand { fraction, .. } => fraction,
        }
    }

    pub fn with_nominal(self, y: f64) -> Self {
        match self {
            IncentiveSchedule::Constant { .. } => IncentiveSchedule::Constant { fraction: y },
            IncentiveSchedule::TwoBand {
                band_start_h,
                band_end_h,
                off_band_factor,
                ..
            } => IncentiveSchedule::TwoBand {
                fraction: y,
                band_start_h,
                band_end_h,
                off_band_factor,
            },
        }
    }

    /// Incentive fraction in force at `time_of_day_h` (hours after midnight).
    pub fn incentive_at(&self, time_of_day_h: f64) -> f64 {
        match *self {
            IncentiveSchedule::Constant { fraction } => fraction,
            IncentiveSchedule::TwoBand {
                fraction,
                band_start_h,
                band_end_h,
                off_band_factor,
            } => {
                let tod = time_of_day_h.rem_euclid(24.0);
                if tod >= band_start_h && tod < band_end_h {
                    fraction
                } else {
                    off_band_factor * fraction
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |y: f64| {
            if !(0.0..1.0).contains(&y) {
                Err(Error::InvalidParams(format!("incentive fraction {y} outside [0, 1)")))
            } else {
                Ok(())
            }
        };
        match *self {
            IncentiveSchedule::Constant { fraction } => check(fraction),
            IncentiveSchedule::TwoBand {
                fraction,
                band_start_h,
                band_end_h,
                off_band_factor,
            } => {
                check(fraction)?;
                check(fraction * off_band_factor)?;
                if off_band_factor < 0.0 || band_end_h < band_start_h {
                    return Err(Error::InvalidParams("malformed two-band schedule".into()));
                }
                Ok(())
            }
        }
    }
}

/// Price law coefficients.
///
/// `c3` and `beta1` are the discount coefficients at the schedule's nominal
/// incentive. When the schedule varies over the day they are scaled by
/// `incentive_at(t) / nominal`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceModel {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub avg_price: f64,
    pub schedule: IncentiveSchedule,
}

/// Realized price split into its two components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceBreakdown {
    pub price: f64,
    /// `c1 * d + c2 * u_pev`
    pub demand_component: f64,
    /// `c3 * sum of extra times`, before flooring.
    pub discount_component: f64,
}

impl Default for PriceModel {
    fn default() -> Self {
        PriceModel {
            c1: 5.07e-5,
            c2: 5.07e-5,
            c3: 0.33,
            beta0: 0.0,
            beta1: 0.3315,
            avg_price: 0.205,
            schedule: IncentiveSchedule::constant(0.25),
        }
    }
}

impl PriceModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidParams("c1 and c2 must be positive".into()));
        }
        if !(self.c3 >= 0.0 && self.beta1 >= 0.0 && self.beta0.is_finite()) {
            return Err(Error::InvalidParams("c3 and beta1 must be nonnegative".into()));
        }
        if !(self.avg_price > 0.0) {
            return Err(Error::InvalidParams("average price must be positive".into()));
        }
        self.schedule.validate()
    }

    fn schedule_scale(&self, time_of_day_h: f64) -> f64 {
        let nominal = self.schedule.nominal();
        if nominal > 0.0 {
            self.schedule.incentive_at(time_of_day_h) / nominal
        } else {
            1.0
        }
    }

    pub fn c3_at(&self, time_of_day_h: f64) -> f64 {
        self.c3 * self.schedule_scale(time_of_day_h)
    }

    pub fn beta1_at(&self, time_of_day_h: f64) -> f64 {
        self.beta1 * self.schedule_scale(time_of_day_h)
    }

    /// `p = c1 d + c2 u_pev - c3 sum_{l>=2} Delta_l`, floored at zero.
    pub fn realized_price(
        &self,
        time_of_day_h: f64,
        demand_kwh: f64,
        u_pev_kwh: f64,
        delta_sum_h: f64,
    ) -> PriceBreakdown {
        let demand_component = self.c1 * demand_kwh + self.c2 * u_pev_kwh;
        let discount_component = self.c3_at(time_of_day_h) * delta_sum_h;
        PriceBreakdown {
            price: (demand_component - discount_component).max(0.0),
            demand_component,
            discount_component,
        }
    }

    /// `p_hat = c1 d - (beta0 + beta1 sum_{l>=2} Delta_hat_l)`, floored at zero.
    pub fn predicted_price(
        &self,
        time_of_day_h: f64,
        demand_kwh: f64,
        predicted_delta_sum_h: f64,
    ) -> f64 {
        let discount = self.beta0 + self.beta1_at(time_of_day_h) * predicted_delta_sum_h;
        (self.c1 * demand_kwh - discount).max(0.0)
    }

    /// Sets `c3` and `beta1` so that the discount equals `y * avg_price` at
    /// `peak_delta_sum_h`. `y` is taken from the schedule's nominal value.
    pub fn calibrated(mut self, peak_delta_sum_h: f64) -> Result<Self> {
        let c3 = calibrate_incentive(self.schedule.nominal(), peak_delta_sum_h, self.avg_price)?;
        self.c3 = c3;
        self.beta1 = c3;
        Ok(self)
    }
}

/// Discount coefficient making the price drop by `y * avg_price` at peak congestion.
pub fn calibrate_incentive(y: f64, peak_delta_sum_h: f64, avg_price: f64) -> Result<f64> {
    if !(peak_delta_sum_h > 0.0 && peak_delta_sum_h.is_finite()) {
        return Err(Error::Calibration(format!(
            "peak congestion must be positive, got {peak_delta_sum_h}"
        )));
    }
    if !(0.0..1.0).contains(&y) {
        return Err(Error::Calibration(format!("incentive {y} outside [0, 1)")));
    }
    Ok(y * avg_price / peak_delta_sum_h)
}

/// Base grid energy demand, one value (kWh) per game interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandProfile {
    pub d_kwh: Vec<f64>,
}

impl DemandProfile {
    pub fn new(d_kwh: Vec<f64>) -> Result<Self> {
        if d_kwh.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::InvalidParams("demand must be nonnegative".into()));
        }
        Ok(DemandProfile { d_kwh })
    }

    pub fn constant(value_kwh: f64, intervals: usize) -> Self {
        DemandProfile {
            d_kwh: vec![value_kwh; intervals],
        }
    }

    pub fn len(&self) -> usize {
        self.d_kwh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_kwh.is_empty()
    }

    /// Demand at `interval`, held at the last value beyond the profile's end.
    pub fn at(&self, interval: usize) -> f64 {
        match self.d_kwh.get(interval) {
            Some(d) => *d,
            None => *self.d_kwh.last().expect("non-empty demand profile"),
        }
    }

    pub fn mean(&self) -> f64 {
        self.d_kwh.iter().sum::<f64>() / self.d_kwh.len() as f64
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DemandRow {
    interval_index: usize,
    d_kwh: f64,
}

pub fn write_demand_csv<W: Write>(profile: &DemandProfile, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for (i, &d) in profile.d_kwh.iter().enumerate() {
        wtr.serialize(DemandRow {
            interval_index: i,
            d_kwh: d,
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_demand_csv<R: Read>(reader: R) -> Result<DemandProfile> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in ["interval_index", "d_kwh"] {
        if !headers.iter().any(|h| h.trim() == col) {
            return Err(Error::MissingColumn(col.into()));
        }
    }
    let mut rows: Vec<DemandRow> = Vec::new();
    for row in rdr.deserialize() {
        rows.push(row?);
    }
    rows.sort_by_key(|r| r.interval_index);
    if rows.iter().enumerate().any(|(i, r)| r.interval_index != i) {
        return Err(Error::Format("demand intervals must be contiguous from 0".into()));
    }
    if rows.is_empty() {
        return Err(Error::Format("demand profile is empty".into()));
    }
    DemandProfile::new(rows.into_iter().map(|r| r.d_kwh).collect())
}
