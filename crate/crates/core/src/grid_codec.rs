//! Probe rasterization, channel encodings and the binary movie container.
//!
//! Channel order is fixed: speed, volume, heading. A cell with no probes in
//! a bin is all zeros; any cell with data has `volume >= 1`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const SPEED: usize = 0;
pub const VOLUME: usize = 1;
pub const HEADING: usize = 2;

/// Every byte value the heading channel may hold, ascending.
pub const HEADING_LEVELS: [u8; 5] = [0, 1, 85, 170, 255];

/// Quadrant codes ordered NE, SE, SW, NW.
pub const QUADRANT_CODES: [u8; 4] = [85, 255, 170, 1];

const MAGIC: &[u8; 4] = b"T4CM";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 3 + 4 * 4;

/// Grid geometry of one city.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub bins_per_day: usize,
    pub cell_size_m: u32,
    pub bin_minutes: u32,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { height: 495, width: 436, bins_per_day: 288, cell_size_m: 100, bin_minutes: 5 }
    }
}

impl GridSpec {
    pub fn new(height: usize, width: usize, bins_per_day: usize) -> Result<Self> {
        let spec = GridSpec { height, width, bins_per_day, ..GridSpec::default() };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bins_per_day == 0 {
            return Err(Error::Config(format!(
                "grid dims must be positive, got {}x{} with {} bins",
                self.height, self.width, self.bins_per_day
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn frame_len(&self) -> usize {
        self.cells() * CHANNELS
    }

    pub fn movie_len(&self) -> usize {
        self.bins_per_day * self.frame_len()
    }
}

/// One raw GPS reading, already snapped to a grid cell and time bin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbePoint {
    pub day_index: u32,
    pub time_bin: usize,
    pub row: usize,
    pub col: usize,
    pub speed_kmh: f64,
    pub heading_deg: f64,
}

/// Caps applied before mapping counts and speeds to bytes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecParams {
    pub volume_cap_min: u32,
    pub volume_cap_max: u32,
    pub speed_cap_max: f64,
}

impl Default for CodecParams {
    fn default() -> Self {
        CodecParams { volume_cap_min: 1, volume_cap_max: 64, speed_cap_max: 120.0 }
    }
}

impl CodecParams {
    pub fn validate(&self) -> Result<()> {
        if self.volume_cap_min == 0 || self.volume_cap_min >= self.volume_cap_max {
            return Err(Error::Config(format!(
                "volume caps must satisfy 0 < min < max, got ({}, {})",
                self.volume_cap_min, self.volume_cap_max
            )));
        }
        if !(self.speed_cap_max > 0.0) {
            return Err(Error::Config(format!("speed_cap_max must be positive, got {}", self.speed_cap_max)));
        }
        Ok(())
    }
}

/// One city-day as a `(bins, height, width, 3)` byte tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrafficMovie {
    pub spec: GridSpec,
    pub day_index: u32,
    data: Vec<u8>,
}

impl TrafficMovie {
    pub fn zeros(spec: GridSpec, day_index: u32) -> Self {
        TrafficMovie { spec, day_index, data: vec![0; spec.movie_len()] }
    }

    pub fn from_raw(spec: GridSpec, day_index: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != spec.movie_len() {
            return Err(Error::Shape(format!(
                "movie payload has {} bytes, grid needs {}",
                data.len(),
                spec.movie_len()
            )));
        }
        Ok(TrafficMovie { spec, day_index, data })
    }

    #[inline]
    pub fn offset(&self, t: usize, h: usize, w: usize, c: usize) -> usize {
        ((t * self.spec.height + h) * self.spec.width + w) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, t: usize, h: usize, w: usize, c: usize) -> u8 {
        self.data[self.offset(t, h, w, c)]
    }

    #[inline]
    pub fn set(&mut self, t: usize, h: usize, w: usize, c: usize, v: u8) {
        let o = self.offset(t, h, w, c);
        self.data[o] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    /// Bytes of frame `t` in `(h, w, c)` order.
    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.spec.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [u8] {
        let n = self.spec.frame_len();
        &mut self.data[t * n..(t + 1) * n]
    }

    /// Checks the heading domain and the no-data rule at every cell.
    pub fn validate(&self) -> Result<()> {
        for (i, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            if !HEADING_LEVELS.contains(&px[HEADING]) {
                return Err(Error::Data(format!("cell {i}: heading value {} is not a valid level", px[HEADING])));
            }
            if px[VOLUME] == 0 && (px[SPEED] != 0 || px[HEADING] != 0) {
                return Err(Error::Data(format!(
                    "cell {i}: volume is 0 but speed={} heading={}",
                    px[SPEED], px[HEADING]
                )));
            }
        }
        Ok(())
    }
}

/// Quadrant code of a compass heading, on half-open 90 degree intervals.
pub fn heading_bin(degrees: f64) -> Result<u8> {
    if !(0.0..360.0).contains(&degrees) {
        return Err(Error::Domain(format!("heading {degrees} outside [0, 360)")));
    }
    Ok(QUADRANT_CODES[quadrant_index(degrees)])
}

#[inline]
fn quadrant_index(degrees: f64) -> usize {
    ((degrees / 90.0) as usize).min(3)
}

/// Code of the quadrant holding the most probes, or 0 when no single
/// quadrant wins.
pub fn aggregate_heading(bin_counts: [u32; 4]) -> Result<u8> {
    let max = *bin_counts.iter().max().unwrap();
    if max == 0 {
        return Err(Error::Domain("aggregate_heading called on a cell without probes".into()));
    }
    let mut winners = bin_counts.iter().enumerate().filter(|(_, &c)| c == max);
    let (first, _) = winners.next().unwrap();
    if winners.next().is_some() {
        return Ok(0);
    }
    Ok(QUADRANT_CODES[first])
}

/// Maps a vehicle count to `{0} ∪ [1, 255]`.
pub fn encode_volume(count: u32, params: &CodecParams) -> u8 {
    if count == 0 {
        return 0;
    }
    let lo = params.volume_cap_min as f64;
    let hi = params.volume_cap_max as f64;
    let c = (count as f64).clamp(lo, hi);
    (1.0 + 254.0 * (c - lo) / (hi - lo)).round() as u8
}

/// Maps a mean speed to `[0, 255]` after capping at `speed_cap_max`.
pub fn encode_speed(avg_kmh: f64, params: &CodecParams) -> u8 {
    debug_assert!(avg_kmh >= 0.0, "negative speed {avg_kmh}");
    let v = avg_kmh.max(0.0).min(params.speed_cap_max);
    (255.0 * v / params.speed_cap_max).round() as u8
}

/// Nearest valid heading level for a normalized value, as a normalized
/// value. Ties go to the smaller level.
pub fn snap_heading(value: f64) -> f64 {
    snap_heading_level(value) as f64 / 255.0
}

/// Same as [`snap_heading`] but returns the byte level.
pub fn snap_heading_level(value: f64) -> u8 {
    let x = value * 255.0;
    let mut best = HEADING_LEVELS[0];
    let mut best_d = f64::INFINITY;
    for &lvl in &HEADING_LEVELS {
        let d = (x - lvl as f64).abs();
        if d < best_d {
            best = lvl;
            best_d = d;
        }
    }
    best
}

/// Per-cell probe statistics for a single time bin.
#[derive(Clone, Debug)]
pub struct FrameAccumulator {
    counts: Vec<u32>,
    speed_sum: Vec<f64>,
    quadrants: Vec<[u32; 4]>,
}

impl FrameAccumulator {
    pub fn new(spec: &GridSpec) -> Self {
        let n = spec.cells();
        FrameAccumulator { counts: vec![0; n], speed_sum: vec![0.0; n], quadrants: vec![[0; 4]; n] }
    }

    /// `cell` is the row-major cell index. `heading_deg` must be in [0, 360).
    #[inline]
    pub fn add(&mut self, cell: usize, speed_kmh: f64, heading_deg: f64) {
        self.counts[cell] += 1;
        self.speed_sum[cell] += speed_kmh;
        self.quadrants[cell][quadrant_index(heading_deg)] += 1;
    }

    /// Writes the encoded frame (`(h, w, c)` bytes) and resets the counters.
    pub fn flush_into(&mut self, frame: &mut [u8], params: &CodecParams) {
        for (cell, px) in frame.chunks_exact_mut(CHANNELS).enumerate() {
            let n = self.counts[cell];
            if n == 0 {
                px.fill(0);
                continue;
            }
            px[SPEED] = encode_speed(self.speed_sum[cell] / n as f64, params);
            px[VOLUME] = encode_volume(n, params);
            px[HEADING] = aggregate_heading(self.quadrants[cell]).expect("cell has probes");
        }
        self.counts.fill(0);
        self.speed_sum.fill(0.0);
        self.quadrants.fill([0; 4]);
    }
}

/// Aggregates probes of a single day into a movie.
pub fn rasterize_probes(probes: &[ProbePoint], spec: &GridSpec, params: &CodecParams) -> Result<TrafficMovie> {
    spec.validate()?;
    params.validate()?;
    let day = probes.first().map_or(0, |p| p.day_index);
    let mut by_bin: Vec<Vec<&ProbePoint>> = vec![Vec::new(); spec.bins_per_day];
    for p in probes {
        if p.day_index != day {
            return Err(Error::Domain(format!("probes mix days {day} and {}", p.day_index)));
        }
        if p.time_bin >= spec.bins_per_day || p.row >= spec.height || p.col >= spec.width {
            return Err(Error::Domain(format!(
                "probe at (bin {}, row {}, col {}) outside the grid",
                p.time_bin, p.row, p.col
            )));
        }
        if !(0.0..360.0).contains(&p.heading_deg) || !(p.speed_kmh >= 0.0) {
            return Err(Error::Domain(format!(
                "probe with speed {} heading {} out of range",
                p.speed_kmh, p.heading_deg
            )));
        }
        by_bin[p.time_bin].push(p);
    }
    let mut movie = TrafficMovie::zeros(*spec, day);
    let mut acc = FrameAccumulator::new(spec);
    for (t, bucket) in by_bin.iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        for p in bucket {
            acc.add(p.row * spec.width + p.col, p.speed_kmh, p.heading_deg);
        }
        acc.flush_into(movie.frame_mut(t), params);
    }
    Ok(movie)
}

/// Casts every byte to `f64` and divides by 255.
pub fn normalize_movie(movie: &TrafficMovie) -> Vec<f64> {
    movie.data.iter().map(|&v| v as f64 / 255.0).collect()
}

/// Inverse of [`normalize_movie`]: scales by 255, rounds and clamps.
pub fn denormalize_movie(values: &[f64], spec: GridSpec, day_index: u32) -> Result<TrafficMovie> {
    let data = values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    TrafficMovie::from_raw(spec, day_index, data)
}

/// Serializes a movie into the `T4CM` container.
pub fn encode_movie(movie: &TrafficMovie) -> Vec<u8> {
    let s = &movie.spec;
    let mut out = Vec::with_capacity(HEADER_LEN + movie.data.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&[0; 3]);
    for d in [s.bins_per_day, s.height, s.width, CHANNELS] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&movie.data);
    out
}

/// Parses a `T4CM` container. The day index is not stored in the container;
/// callers supply it (usually from the manifest or the sidecar).
pub fn decode_movie(bytes: &[u8], day_index: u32) -> Result<TrafficMovie> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format("magic", format!("expected {:?}", std::str::from_utf8(MAGIC).unwrap())));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("header", format!("{} bytes, need {HEADER_LEN}", bytes.len())));
    }
    if bytes[4] != VERSION {
        return Err(Error::format("version", format!("unsupported version {}", bytes[4])));
    }
    let dim = |i: usize| {
        let o = 8 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
    };
    let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    if c != CHANNELS {
        return Err(Error::format("channels", format!("expected {CHANNELS}, found {c}")));
    }
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::format("dims", format!("zero dimension in ({t}, {h}, {w}, {c})")));
    }
    let expected = t.checked_mul(h).and_then(|v| v.checked_mul(w)).and_then(|v| v.checked_mul(c));
    let payload = &bytes[HEADER_LEN..];
    match expected {
        Some(n) if n == payload.len() => {}
        Some(n) => {
            return Err(Error::format(
                "payload",
                format!("dims ({t}, {h}, {w}, {c}) need {n} bytes, found {} (truncated or padded)", payload.len()),
            ))
        }
        None => return Err(Error::format("dims", "dimension product overflows")),
    }
    let spec = GridSpec { height: h, width: w, bins_per_day: t, ..GridSpec::default() };
    Ok(TrafficMovie { spec, day_index, data: payload.to_vec() })
}

pub fn write_movie(movie: &TrafficMovie, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_movie(movie)).map_err(|e| Error::io(path, e))
}

pub fn read_movie(path: &Path, day_index: u32) -> Result<TrafficMovie> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_movie(&bytes, day_index)
}

/// Optional metadata stored next to a movie as `<movie path>.meta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MovieMeta {
    pub city: String,
    pub day_index: u32,
    pub codec: CodecParams,
}

pub fn meta_path(movie_path: &Path) -> PathBuf {
    let mut s = movie_path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn write_meta(movie_path: &Path, meta: &MovieMeta) -> Result<()> {
    let path = meta_path(movie_path);
    let text = toml::to_string(meta).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_meta(movie_path: &Path) -> Result<MovieMeta> {
    let path = meta_path(movie_path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::format("meta", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> CodecParams {
        CodecParams::default()
    }

    #[test]
    fn heading_bin_examples() {
        assert_eq!(heading_bin(45.0).unwrap(), 85);
        assert_eq!(heading_bin(0.0).unwrap(), 85);
        assert_eq!(heading_bin(300.0).unwrap(), 1);
        assert_eq!(heading_bin(90.0).unwrap(), 255);
        assert_eq!(heading_bin(180.0).unwrap(), 170);
        assert_eq!(heading_bin(359.999).unwrap(), 1);
        assert!(heading_bin(360.0).is_err());
        assert!(heading_bin(-0.5).is_err());
        assert!(heading_bin(f64::NAN).is_err());
    }

    #[test]
    fn aggregate_heading_examples() {
        assert_eq!(aggregate_heading([5, 1, 0, 0]).unwrap(), 85);
        assert_eq!(aggregate_heading([2, 2, 0, 0]).unwrap(), 0);
        assert_eq!(aggregate_heading([0, 0, 3, 3]).unwrap(), 0);
        assert_eq!(aggregate_heading([0, 0, 0, 1]).unwrap(), 1);
        assert_eq!(aggregate_heading([1, 1, 1, 1]).unwrap(), 0);
        assert!(aggregate_heading([0; 4]).is_err());
    }

    #[test]
    fn volume_examples() {
        let p = params();
        assert_eq!(encode_volume(0, &p), 0);
        assert_eq!(encode_volume(p.volume_cap_min, &p), 1);
        assert_eq!(encode_volume(p.volume_cap_max, &p), 255);
        assert_eq!(encode_volume(1000, &p), 255);
        let p65 = CodecParams { volume_cap_min: 1, volume_cap_max: 65, ..p };
        // 1 + 254 * 32 / 64 = 128
        assert_eq!(encode_volume(33, &p65), 128);
    }

    #[test]
    fn speed_examples() {
        let p = params();
        assert_eq!(encode_speed(0.0, &p), 0);
        assert_eq!(encode_speed(120.0, &p), 255);
        assert_eq!(encode_speed(500.0, &p), 255);
        // 255 * 0.5 = 127.5 rounds away from zero
        assert_eq!(encode_speed(60.0, &p), 128);
    }

    #[test]
    fn snap_examples() {
        assert_eq!(snap_heading_level(0.0), 0);
        assert_eq!(snap_heading_level(84.0 / 255.0), 85);
        assert_eq!(snap_heading_level(0.5), 85);
        assert_eq!(snap_heading_level(1.0), 255);
        assert_eq!(snap_heading_level(0.6 / 255.0), 1);
        assert_eq!(snap_heading_level(0.5 / 255.0), 0);
    }

    fn probe(bin: usize, row: usize, col: usize, speed: f64, heading: f64) -> ProbePoint {
        ProbePoint { day_index: 3, time_bin: bin, row, col, speed_kmh: speed, heading_deg: heading }
    }

    #[test]
    fn rasterize_examples() {
        let spec = GridSpec::new(4, 5, 6).unwrap();
        let empty = rasterize_probes(&[], &spec, &params()).unwrap();
        assert!(empty.data().iter().all(|&v| v == 0));

        let m = rasterize_probes(&[probe(2, 1, 3, 60.0, 45.0)], &spec, &params()).unwrap();
        assert_eq!(m.day_index, 3);
        assert_eq!(m.get(2, 1, 3, VOLUME), 1);
        assert_eq!(m.get(2, 1, 3, SPEED), encode_speed(60.0, &params()));
        assert_eq!(m.get(2, 1, 3, HEADING), 85);
        let nonzero = m.data().iter().filter(|&&v| v != 0).count();
        assert_eq!(nonzero, 3);

        let tie = rasterize_probes(&[probe(0, 0, 0, 30.0, 45.0), probe(0, 0, 0, 50.0, 135.0)], &spec, &params())
            .unwrap();
        assert_eq!(tie.get(0, 0, 0, HEADING), 0);
        assert_eq!(tie.get(0, 0, 0, SPEED), encode_speed(40.0, &params()));
        assert_eq!(tie.get(0, 0, 0, VOLUME), encode_volume(2, &params()));
        tie.validate().unwrap();
    }

    #[test]
    fn rasterize_rejects_mixed_days_and_out_of_grid() {
        let spec = GridSpec::new(4, 5, 6).unwrap();
        let mut other = probe(0, 0, 0, 10.0, 10.0);
        other.day_index = 4;
        let err = rasterize_probes(&[probe(0, 0, 0, 10.0, 10.0), other], &spec, &params()).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        assert!(rasterize_probes(&[probe(6, 0, 0, 1.0, 1.0)], &spec, &params()).is_err());
        assert!(rasterize_probes(&[probe(0, 4, 0, 1.0, 1.0)], &spec, &params()).is_err());
    }

    #[test]
    fn normalize_examples() {
        let spec = GridSpec::new(1, 1, 1).unwrap();
        let m = TrafficMovie::from_raw(spec, 0, vec![0, 255, 85]).unwrap();
        let n = normalize_movie(&m);
        assert_eq!(n[0], 0.0);
        assert_eq!(n[1], 1.0);
        assert_eq!(denormalize_movie(&n, spec, 0).unwrap(), m);
    }

    #[test]
    fn container_errors() {
        let spec = GridSpec::new(4, 4, 2).unwrap();
        let m = TrafficMovie::zeros(spec, 0);
        let mut bytes = encode_movie(&m);
        assert_eq!(bytes.len(), HEADER_LEN + 96);
        assert_eq!(decode_movie(&bytes, 0).unwrap(), m);

        bytes.pop();
        match decode_movie(&bytes, 0).unwrap_err() {
            Error::Format { field, detail } => {
                assert_eq!(field, "payload");
                assert!(detail.contains("96"), "{detail}");
            }
            e => panic!("unexpected {e}"),
        }

        let mut bad = encode_movie(&m);
        bad[0] = b'X';
        assert!(matches!(decode_movie(&bad, 0), Err(Error::Format { field: "magic", .. })));

        let mut chans = encode_movie(&m);
        chans[20] = 4;
        assert!(matches!(decode_movie(&chans, 0), Err(Error::Format { field: "channels", .. })));
    }

    #[test]
    fn file_and_meta_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("day.t4cm");
        let spec = GridSpec::new(3, 2, 4).unwrap();
        let data = (0..spec.movie_len()).map(|i| (i * 7 % 256) as u8).collect();
        let m = TrafficMovie::from_raw(spec, 9, data).unwrap();
        write_movie(&m, &path).unwrap();
        assert_eq!(read_movie(&path, 9).unwrap(), m);

        let meta = MovieMeta { city: "Moscow".into(), day_index: 9, codec: params() };
        write_meta(&path, &meta).unwrap();
        assert_eq!(read_meta(&path).unwrap(), meta);
    }

    #[test]
    fn validate_flags_bad_cells() {
        let spec = GridSpec::new(1, 2, 1).unwrap();
        assert!(TrafficMovie::from_raw(spec, 0, vec![0, 0, 0, 10, 3, 85]).unwrap().validate().is_ok());
        assert!(TrafficMovie::from_raw(spec, 0, vec![5, 0, 0, 0, 0, 0]).unwrap().validate().is_err());
        assert!(TrafficMovie::from_raw(spec, 0, vec![5, 1, 3, 0, 0, 0]).unwrap().validate().is_err());
    }
}
