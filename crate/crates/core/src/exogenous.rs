//! Fixed-length exogenous vectors: time of day, weekday, current weather and
//! a three-bin weather forecast.
//!
//! Layout (21 values):
//!
//! | range   | content                                    |
//! |---------|--------------------------------------------|
//! | 0..2    | sin, cos of the time-of-day angle          |
//! | 2..9    | one-hot day of week                        |
//! | 9..12   | weather at the bin (temp, precip, wind)    |
//! | 12..21  | weather at bins t+1, t+2, t+3              |

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth_world::{WeatherRecord, WeatherTable};

pub const EXO_DIM: usize = 21;
pub const FORECAST_BINS: usize = 3;

/// Calendar position of one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CalendarStamp {
    pub day_index: u32,
    pub time_bin: usize,
    pub day_of_week: u8,
}

impl CalendarStamp {
    pub fn new(day_index: u32, time_bin: usize, week_offset: u32) -> Self {
        CalendarStamp { day_index, time_bin, day_of_week: day_of_week(day_index, week_offset) }
    }
}

/// Weekday in `0..7`; 5 and 6 are the weekend.
pub fn day_of_week(day_index: u32, week_offset: u32) -> u8 {
    ((day_index as u64 + week_offset as u64) % 7) as u8
}

pub fn is_weekend(day_of_week: u8) -> bool {
    day_of_week >= 5
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExoVector {
    pub values: Vec<f64>,
}

/// Min-max bounds used to scale raw weather fields into [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeatherScaling {
    pub temp_c: (f64, f64),
    pub precip_mm: (f64, f64),
    pub wind_kmh: (f64, f64),
}

impl Default for WeatherScaling {
    fn default() -> Self {
        WeatherScaling { temp_c: (-20.0, 40.0), precip_mm: (0.0, 10.0), wind_kmh: (0.0, 80.0) }
    }
}

impl WeatherScaling {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("temp_c", self.temp_c), ("precip_mm", self.precip_mm), ("wind_kmh", self.wind_kmh)] {
            if !(hi > lo) {
                return Err(Error::Config(format!("weather scaling for {name} needs lo < hi, got ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    fn scale(&self, r: &WeatherRecord) -> [f64; 3] {
        let s = |v: f64, (lo, hi): (f64, f64)| ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        [s(r.temperature_c, self.temp_c), s(r.precipitation_mm, self.precip_mm), s(r.wind_kmh, self.wind_kmh)]
    }
}

pub fn encode_time_of_day(time_bin: usize, bins_per_day: usize) -> (f64, f64) {
    debug_assert!(time_bin < bins_per_day);
    let angle = TAU * time_bin as f64 / bins_per_day as f64;
    (angle.sin(), angle.cos())
}

pub fn encode_day_of_week(dow: u8) -> Result<[f64; 7]> {
    if dow > 6 {
        return Err(Error::Domain(format!("day of week {dow} outside 0..=6")));
    }
    let mut v = [0.0; 7];
    v[dow as usize] = 1.0;
    Ok(v)
}

/// Builds the exogenous vector of one frame. Forecast bins past the end of
/// the day repeat the last record of the day.
pub fn assemble_exo(stamp: &CalendarStamp, table: &WeatherTable, scaling: &WeatherScaling) -> Result<ExoVector> {
    let bins = table.bins_per_day();
    if stamp.time_bin >= bins {
        return Err(Error::Domain(format!("time bin {} outside a {bins}-bin day", stamp.time_bin)));
    }
    let mut values = Vec::with_capacity(EXO_DIM);
    let (s, c) = encode_time_of_day(stamp.time_bin, bins);
    values.extend([s, c]);
    values.extend(encode_day_of_week(stamp.day_of_week)?);
    for k in 0..=FORECAST_BINS {
        let bin = (stamp.time_bin + k).min(bins - 1);
        let rec = table.get(stamp.day_index, bin).ok_or_else(|| {
            Error::Data(format!("no weather record for day {} bin {bin}", stamp.day_index))
        })?;
        values.extend(scaling.scale(rec));
    }
    debug_assert_eq!(values.len(), EXO_DIM);
    Ok(ExoVector { values })
}

/// Source of exogenous vectors for (day, bin) pairs.
pub trait ExoProvider: Send + Sync {
    fn exo(&self, day_index: u32, time_bin: usize) -> Result<ExoVector>;
}

/// Exogenous provider backed by a weather table; the forecast is read
/// straight from the table.
#[derive(Clone, Debug)]
pub struct WeatherExo {
    pub table: WeatherTable,
    pub scaling: WeatherScaling,
    pub week_offset: u32,
}

impl ExoProvider for WeatherExo {
    fn exo(&self, day_index: u32, time_bin: usize) -> Result<ExoVector> {
        assemble_exo(&CalendarStamp::new(day_index, time_bin, self.week_offset), &self.table, &self.scaling)
    }
}
