//! Browser bindings over the synthetic city and the grid codec.

use gridcast::grid_codec::{
    aggregate_heading, heading_bin, CodecParams, GridSpec, TrafficMovie, HEADING, SPEED, VOLUME,
};
use gridcast::synth_world::{generate_city, simulate_day, CityTemplate, SynthConfig};
use wasm_bindgen::prelude::*;

const BINS: usize = 288;

#[wasm_bindgen]
pub struct CityView {
    template: CityTemplate,
    synth: SynthConfig,
    movie: TrafficMovie,
}

#[wasm_bindgen]
impl CityView {
    /// Builds a square city of `size` cells and simulates day 0.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32, noise: f64) -> Result<CityView, JsError> {
        let spec = GridSpec::new(size as usize, size as usize, BINS).map_err(js)?;
        let template = generate_city(seed as u64, spec).map_err(js)?;
        let synth = SynthConfig { seed: seed as u64, num_days: 7, noise_level: noise, ..SynthConfig::default() };
        let movie = simulate_day(&template, &synth, &CodecParams::default(), 0).map_err(js)?;
        Ok(CityView { template, synth, movie })
    }

    pub fn size(&self) -> u32 {
        self.template.spec.height as u32
    }

    pub fn set_day(&mut self, day: u32) -> Result<(), JsError> {
        self.movie = simulate_day(&self.template, &self.synth, &CodecParams::default(), day.min(6)).map_err(js)?;
        Ok(())
    }

    /// RGBA pixels of one channel at `bin`: 0 speed, 1 volume, 2 heading.
    pub fn frame_rgba(&self, bin: u32, channel: u32) -> Vec<u8> {
        let spec = self.template.spec;
        let t = (bin as usize).min(BINS - 1);
        let mut out = Vec::with_capacity(spec.cells() * 4);
        for h in 0..spec.height {
            for w in 0..spec.width {
                let px = match channel {
                    0 => ramp(self.movie.get(t, h, w, SPEED)),
                    1 => ramp(self.movie.get(t, h, w, VOLUME)),
                    _ => heading_colour(self.movie.get(t, h, w, HEADING)),
                };
                out.extend_from_slice(&px);
            }
        }
        out
    }

    /// Mean squared error of repeating the frame before `bin` for the next
    /// three bins, on normalized values.
    pub fn persistence_mse(&self, bin: u32) -> Vec<f64> {
        let t = (bin as usize).clamp(1, BINS - 3);
        let last = self.movie.frame(t - 1);
        (0..3)
            .map(|k| {
                let f = self.movie.frame(t + k);
                let s: f64 = last
                    .iter()
                    .zip(f)
                    .map(|(&a, &b)| {
                        let d = (a as f64 - b as f64) / 255.0;
                        d * d
                    })
                    .sum();
                s / f.len() as f64
            })
            .collect()
    }

    /// Demand multiplier over the day, one value per bin.
    pub fn envelope(&self) -> Vec<f64> {
        (0..BINS).map(|b| self.synth.envelope(b)).collect()
    }
}

/// Quadrant code for a compass heading in degrees.
#[wasm_bindgen]
pub fn encode_heading(degrees: f64) -> Result<u8, JsError> {
    heading_bin(degrees.rem_euclid(360.0)).map_err(js)
}

/// Cell heading for probe counts in the NE, SE, SW and NW quadrants.
#[wasm_bindgen]
pub fn cell_heading(ne: u32, se: u32, sw: u32, nw: u32) -> Result<u8, JsError> {
    aggregate_heading([ne, se, sw, nw]).map_err(js)
}

fn js(e: gridcast::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn ramp(v: u8) -> [u8; 4] {
    if v == 0 {
        return [16, 16, 24, 255];
    }
    let x = v as u16;
    [(x * 3 / 4 + 60).min(255) as u8, (x / 2 + 40) as u8, (255 - x / 2) as u8, 255]
}

fn heading_colour(v: u8) -> [u8; 4] {
    match v {
        85 => [230, 90, 60, 255],
        255 => [240, 200, 60, 255],
        170 => [70, 170, 230, 255],
        1 => [120, 210, 120, 255],
        _ => [16, 16, 24, 255],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_has_one_pixel_per_cell() {
        let v = CityView::new(3, 16, 0.2).unwrap();
        assert_eq!(v.frame_rgba(100, 1).len(), 16 * 16 * 4);
        assert_eq!(v.persistence_mse(100).len(), 3);
        assert_eq!(v.envelope().len(), BINS);
    }

    #[test]
    fn heading_codes() {
        assert_eq!(encode_heading(45.0).unwrap(), 85);
        assert_eq!(encode_heading(-45.0).unwrap(), 1);
        assert_eq!(cell_heading(2, 2, 0, 0).unwrap(), 0);
        assert_eq!(cell_heading(0, 0, 3, 1).unwrap(), 170);
    }
}
