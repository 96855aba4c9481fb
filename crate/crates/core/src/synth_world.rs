//! Synthetic cities, traffic days and weather tables.
//!
//! Traffic on a road cell is driven by three things: a time-of-day envelope
//! built from Gaussian rush hours, a weekday/weekend factor, and congestion
//! blobs that drift across the city. Congestion raises volume and lowers
//! speed. Probes are drawn per cell and bin and aggregated with the same
//! accumulator that [`rasterize_probes`](crate::grid_codec::rasterize_probes)
//! uses, so generated movies obey every codec invariant.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exogenous::{day_of_week, is_weekend};
use crate::grid_codec::{CodecParams, FrameAccumulator, GridSpec, TrafficMovie};

const NIGHT_LEVEL: f64 = 0.25;
const WEEKEND_FACTOR: f64 = 0.6;
const CONGESTION_VOLUME_GAIN: f64 = 0.8;
const CONGESTION_SLOWDOWN: f64 = 0.6;
const RUSH_SLOWDOWN: f64 = 0.3;

/// Static layout of a synthetic city.
#[derive(Clone, Debug, PartialEq)]
pub struct CityTemplate {
    pub spec: GridSpec,
    pub road_mask: Vec<bool>,
    /// Dominant heading in degrees, present exactly on road cells.
    pub flow_field: Vec<Option<f64>>,
    pub base_intensity: Vec<f64>,
    /// Free-flow speed in km/h, zero off-road.
    pub free_speed: Vec<f64>,
}

impl CityTemplate {
    pub fn road_cells(&self) -> usize {
        self.road_mask.iter().filter(|&&r| r).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RushHour {
    pub peak_bin: f64,
    pub width_bins: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_days: u32,
    pub rush_hours: Vec<RushHour>,
    /// Distance in cells a congestion blob travels per bin.
    pub drift_cells_per_bin: f64,
    /// 0 gives deterministic counts and identical probes per cell.
    pub noise_level: f64,
    pub blobs_per_day: usize,
    pub max_probes_per_cell: f64,
    pub week_offset: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_days: 4,
            rush_hours: vec![
                RushHour { peak_bin: 96.0, width_bins: 12.0 },
                RushHour { peak_bin: 210.0, width_bins: 15.0 },
            ],
            drift_cells_per_bin: 0.5,
            noise_level: 0.2,
            blobs_per_day: 3,
            max_probes_per_cell: 48.0,
            week_offset: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_days == 0 {
            return Err(Error::Config("num_days must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config(format!("noise_level {} outside [0, 1]", self.noise_level)));
        }
        if !(self.drift_cells_per_bin >= 0.0) {
            return Err(Error::Config(format!("drift_cells_per_bin {} is negative", self.drift_cells_per_bin)));
        }
        if !(self.max_probes_per_cell > 0.0) {
            return Err(Error::Config("max_probes_per_cell must be positive".into()));
        }
        if self.rush_hours.iter().any(|r| !(r.width_bins > 0.0)) {
            return Err(Error::Config("rush hour widths must be positive".into()));
        }
        Ok(())
    }

    /// Time-of-day demand multiplier in `[NIGHT_LEVEL, 1]`.
    pub fn envelope(&self, bin: usize) -> f64 {
        let t = bin as f64;
        let rush: f64 = self
            .rush_hours
            .iter()
            .map(|r| (-0.5 * ((t - r.peak_bin) / r.width_bins).powi(2)).exp())
            .sum();
        (NIGHT_LEVEL + (1.0 - NIGHT_LEVEL) * rush).min(1.0)
    }

    pub fn day_factor(&self, day_index: u32) -> f64 {
        if is_weekend(day_of_week(day_index, self.week_offset)) {
            WEEKEND_FACTOR
        } else {
            1.0
        }
    }
}

/// Derives an independent seed from `seed` and `salt`.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lays out straight corridors across the grid, each with its own heading,
/// demand level and free-flow speed.
pub fn generate_city(seed: u64, spec: GridSpec) -> Result<CityTemplate> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC17));
    let n = spec.cells();
    let mut city = CityTemplate {
        spec,
        road_mask: vec![false; n],
        flow_field: vec![None; n],
        base_intensity: vec![0.0; n],
        free_speed: vec![0.0; n],
    };
    let n_rows = (spec.height / 8).max(1);
    let n_cols = (spec.width / 8).max(1);
    let rows = pick_distinct(&mut rng, spec.height, n_rows);
    let cols = pick_distinct(&mut rng, spec.width, n_cols);

    let corridors = rows
        .into_iter()
        .map(|r| (true, r))
        .chain(cols.into_iter().map(|c| (false, c)));
    for (horizontal, line) in corridors {
        let heading: f64 = rng.random_range(0.0..360.0);
        let intensity: f64 = rng.random_range(0.4..1.0);
        let speed: f64 = rng.random_range(40.0..110.0);
        let phase: f64 = rng.random_range(0.0..TAU);
        let len = if horizontal { spec.width } else { spec.height };
        for k in 0..len {
            let cell = if horizontal { line * spec.width + k } else { k * spec.width + line };
            if city.road_mask[cell] {
                continue;
            }
            city.road_mask[cell] = true;
            city.flow_field[cell] = Some(heading);
            let wobble = 1.0 + 0.2 * (phase + TAU * k as f64 / len as f64).sin();
            city.base_intensity[cell] = intensity * wobble;
            city.free_speed[cell] = speed;
        }
    }
    Ok(city)
}

fn pick_distinct(rng: &mut ChaCha8Rng, upper: usize, count: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, upper, count.min(upper)).into_vec()
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    row: f64,
    col: f64,
    d_row: f64,
    d_col: f64,
    radius: f64,
}

impl Blob {
    fn congestion(&self, spec: &GridSpec, bin: usize, row: usize, col: usize) -> f64 {
        let (h, w) = (spec.height as f64, spec.width as f64);
        let cr = (self.row + self.d_row * bin as f64).rem_euclid(h);
        let cc = (self.col + self.d_col * bin as f64).rem_euclid(w);
        let mut dr = (row as f64 - cr).abs();
        let mut dc = (col as f64 - cc).abs();
        dr = dr.min(h - dr);
        dc = dc.min(w - dc);
        (-(dr * dr + dc * dc) / (2.0 * self.radius * self.radius)).exp()
    }
}

/// Renders one day of traffic for `template`.
pub fn simulate_day(
    template: &CityTemplate,
    config: &SynthConfig,
    codec: &CodecParams,
    day_index: u32,
) -> Result<TrafficMovie> {
    config.validate()?;
    codec.validate()?;
    if day_index >= config.num_days {
        return Err(Error::Domain(format!("day {day_index} beyond num_days {}", config.num_days)));
    }
    let spec = template.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0xDA7 + day_index as u64));
    let radius = (spec.height.min(spec.width) as f64 / 6.0).max(1.5);
    let blobs: Vec<Blob> = (0..config.blobs_per_day)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..TAU);
            Blob {
                row: rng.random_range(0.0..spec.height as f64),
                col: rng.random_range(0.0..spec.width as f64),
                d_row: config.drift_cells_per_bin * angle.sin(),
                d_col: config.drift_cells_per_bin * angle.cos(),
                radius,
            }
        })
        .collect();

    let noise = config.noise_level;
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let day_factor = config.day_factor(day_index);
    let roads: Vec<usize> = (0..spec.cells()).filter(|&c| template.road_mask[c]).collect();

    let mut movie = TrafficMovie::zeros(spec, day_index);
    let mut acc = FrameAccumulator::new(&spec);
    for t in 0..spec.bins_per_day {
        let demand = config.envelope(t) * day_factor;
        for &cell in &roads {
            let (row, col) = (cell / spec.width, cell % spec.width);
            let congestion = blobs.iter().map(|b| b.congestion(&spec, t, row, col)).sum::<f64>().min(1.0);
            let lambda = config.max_probes_per_cell
                * template.base_intensity[cell]
                * demand
                * (1.0 + CONGESTION_VOLUME_GAIN * congestion);
            let count = if noise > 0.0 && lambda > 0.0 {
                let draw = Poisson::new(lambda).unwrap().sample(&mut rng);
                (lambda + noise * (draw - lambda)).round().max(0.0) as u32
            } else {
                lambda.round() as u32
            };
            let mean_speed = template.free_speed[cell]
                * (1.0 - CONGESTION_SLOWDOWN * congestion)
                * (1.0 - RUSH_SLOWDOWN * demand);
            let flow = template.flow_field[cell].expect("road cell has a flow direction");
            for _ in 0..count {
                let (speed, heading) = if noise > 0.0 {
                    let s = mean_speed * (1.0 + 0.2 * noise * gauss.sample(&mut rng)).max(0.0);
                    let h = (flow + 40.0 * noise * gauss.sample(&mut rng)).rem_euclid(360.0);
                    (s, if h >= 360.0 { 0.0 } else { h })
                } else {
                    (mean_speed, flow)
                };
                acc.add(cell, speed, heading);
            }
        }
        acc.flush_into(movie.frame_mut(t), codec);
    }
    Ok(movie)
}

/// Weather at one (day, bin).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatherRecord {
    #[serde(rename = "day")]
    pub day_index: u32,
    #[serde(rename = "bin")]
    pub time_bin: usize,
    #[serde(rename = "temp_c")]
    pub temperature_c: f64,
    #[serde(rename = "precip_mm")]
    pub precipitation_mm: f64,
    pub wind_kmh: f64,
}

/// Weather records indexed by (day, bin). Tables read from disk may have
/// holes; lookups of a hole return `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherTable {
    bins_per_day: usize,
    slots: Vec<Option<WeatherRecord>>,
}

impl WeatherTable {
    pub fn from_records(bins_per_day: usize, records: Vec<WeatherRecord>) -> Result<Self> {
        if bins_per_day == 0 {
            return Err(Error::Config("bins_per_day must be positive".into()));
        }
        let days = records.iter().map(|r| r.day_index as usize + 1).max().unwrap_or(0);
        let mut slots = vec![None; days * bins_per_day];
        for r in records {
            if r.time_bin >= bins_per_day {
                return Err(Error::Data(format!("weather record bin {} outside {bins_per_day}-bin day", r.time_bin)));
            }
            if r.precipitation_mm < 0.0 || r.wind_kmh < 0.0 {
                return Err(Error::Data(format!("negative weather value at day {} bin {}", r.day_index, r.time_bin)));
            }
            let slot = &mut slots[r.day_index as usize * bins_per_day + r.time_bin];
            if slot.is_some() {
                return Err(Error::Data(format!("duplicate weather record for day {} bin {}", r.day_index, r.time_bin)));
            }
            *slot = Some(r);
        }
        Ok(WeatherTable { bins_per_day, slots })
    }

    pub fn bins_per_day(&self) -> usize {
        self.bins_per_day
    }

    pub fn num_days(&self) -> usize {
        self.slots.len() / self.bins_per_day
    }

    pub fn get(&self, day_index: u32, time_bin: usize) -> Option<&WeatherRecord> {
        if time_bin >= self.bins_per_day {
            return None;
        }
        self.slots.get(day_index as usize * self.bins_per_day + time_bin)?.as_ref()
    }

    pub fn records(&self) -> impl Iterator<Item = &WeatherRecord> {
        self.slots.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.records().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_complete(&self) -> bool {
        self.slots.iter().all(Option::is_some)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in self.records() {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, bins_per_day: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
        let expected = ["day", "bin", "temp_c", "precip_mm", "wind_kmh"];
        if header.iter().ne(expected) {
            return Err(Error::format("weather header", format!("expected {}", expected.join(","))));
        }
        let records = rdr
            .deserialize()
            .collect::<std::result::Result<Vec<WeatherRecord>, _>>()
            .map_err(|e| csv_error(path, e))?;
        Self::from_records(bins_per_day, records)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format("weather table", format!("{}: {e}", path.display()))
}

/// Smooth synthetic weather: a diurnal temperature cycle around a drifting
/// daily mean, Markov rain spells, and autoregressive wind.
pub fn generate_weather(seed: u64, num_days: u32, bins_per_day: usize) -> Result<WeatherTable> {
    if num_days == 0 || bins_per_day == 0 {
        return Err(Error::Config("weather table needs positive day and bin counts".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x3EA));
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let means: Vec<f64> = {
        let mut m = rng.random_range(0.0..20.0);
        (0..=num_days)
            .map(|_| {
                m += 2.0 * gauss.sample(&mut rng);
                m
            })
            .collect()
    };
    let mut records = Vec::with_capacity(num_days as usize * bins_per_day);
    let mut temp = f64::NAN;
    let mut precip: f64 = 0.0;
    let mut raining = false;
    let mut rain_target = 0.0;
    let mut wind: f64 = 15.0;
    for day in 0..num_days {
        for bin in 0..bins_per_day {
            let frac = bin as f64 / bins_per_day as f64;
            let mean = means[day as usize] * (1.0 - frac) + means[day as usize + 1] * frac;
            let target = mean + 5.0 * (TAU * (frac - 0.375)).sin() + 0.1 * gauss.sample(&mut rng);
            temp = if temp.is_nan() { target } else { temp + (target - temp).clamp(-1.0, 1.0) };

            if raining {
                if rng.random_bool(0.05) {
                    raining = false;
                }
            } else if rng.random_bool(0.01) {
                raining = true;
                rain_target = rng.random_range(0.5..5.0);
            }
            precip = 0.8 * precip + 0.2 * if raining { rain_target } else { 0.0 };

            wind = (15.0 + 0.95 * (wind - 15.0) + gauss.sample(&mut rng)).max(0.0);
            records.push(WeatherRecord {
                day_index: day,
                time_bin: bin,
                temperature_c: temp,
                precipitation_mm: precip,
                wind_kmh: wind,
            });
        }
    }
    WeatherTable::from_records(bins_per_day, records)
}
