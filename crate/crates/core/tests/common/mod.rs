#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use gridcast::exogenous::{WeatherExo, WeatherScaling, EXO_DIM};
use gridcast::grid_codec::{CodecParams, GridSpec, TrafficMovie, HEADING_LEVELS};
use gridcast::model::{to_nchw, Model, ModelConfig, Variant};
use gridcast::nn::{Graph, Tensor};
use gridcast::objectives::{training_loss, LossWeights};
use gridcast::sampler::{Batch, InMemoryStore, SequenceWindow, Strategy, OUTPUT_LEN};
use gridcast::synth_world::{generate_city, generate_weather, simulate_day, SynthConfig};
use gridcast::train::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny(variant: Variant, canvas: usize, blocks: usize, h: usize, w: usize) -> ModelConfig {
    let mut c = ModelConfig::for_variant(variant);
    c.canvas_size = canvas;
    c.grid_h = h;
    c.grid_w = w;
    c.num_blocks = blocks;
    c.base_channels = 4;
    c.block_multipliers = (0..blocks).map(|i| 1 << i.min(2)).collect();
    c.dropout_rate = 0.0;
    c.gru_encoder_units = vec![8, 6, 4];
    c.gru_decoder_units = vec![4, 6, 8];
    c.convlstm_units = vec![3, 4, 4];
    c
}

pub fn random_batch(b: usize, q: usize, h: usize, w: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frame = |n: usize| -> Vec<f64> {
        (0..n * h * w)
            .flat_map(|_| {
                let lvl = HEADING_LEVELS[rng.random_range(0..5)] as f64 / 255.0;
                [rng.random::<f64>(), rng.random::<f64>(), lvl]
            })
            .collect()
    };
    let inputs = frame(b * q);
    let targets = frame(b * OUTPUT_LEN);
    let exo = (0..b * (q + OUTPUT_LEN) * EXO_DIM).map(|_| rng.random::<f64>()).collect();
    let window_refs = (0..b).map(|i| SequenceWindow { day_index: 0, start_bin: 12 + i, input_len: q }).collect();
    Batch { inputs, targets, exo, window_refs, q, height: h, width: w }
}

/// Training loss and parameter gradients on `batch`.
pub fn loss_and_grads(model: &Model, batch: &Batch) -> (f64, BTreeMap<String, Tensor>) {
    let mut g = Graph::new(true, 5);
    let out = model.forward(&mut g, batch, true).unwrap();
    let t = g.input(to_nchw(&batch.targets, batch.size() * OUTPUT_LEN, batch.height, batch.width, 3));
    let terms = training_loss(&mut g, &out, batch, t, model.config.variant, &LossWeights::default()).unwrap();
    (g.value(terms.total).item(), g.backward(terms.total).params())
}

/// Central-difference check on `samples` random parameter entries of a
/// canvas-16, two-block model. Returns the worst relative error and how
/// many entries were compared.
pub fn gradcheck(variant: Variant, samples: usize, seed: u64) -> (f64, usize) {
    let mut cfg = tiny(variant, 16, 2, 16, 16);
    cfg.q = 2;
    let model = Model::new(cfg, seed).unwrap();
    let batch = random_batch(2, 2, 16, 16, seed + 1);
    let (_, grads) = loss_and_grads(&model, &batch);
    let names: Vec<String> = grads.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-6;
    let (mut checked, mut worst, mut tries) = (0, 0.0f64, 0);
    while checked < samples && tries < 20 * samples {
        tries += 1;
        let name = &names[rng.random_range(0..names.len())];
        let e = rng.random_range(0..grads[name].numel());
        let mut plus = model.clone();
        plus.params.param_mut(name).unwrap().data[e] += eps;
        let mut minus = model.clone();
        minus.params.param_mut(name).unwrap().data[e] -= eps;
        let fd = (loss_and_grads(&plus, &batch).0 - loss_and_grads(&minus, &batch).0) / (2.0 * eps);
        let an = grads[name].data[e];
        let scale = fd.abs().max(an.abs());
        if scale < 1e-5 {
            continue;
        }
        worst = worst.max((fd - an).abs() / scale);
        checked += 1;
    }
    (worst, checked)
}

/// Every window of one day by direct search: output start `s` with `q`
/// bins before it and three after. Non-overlapping keeps a window only when
/// it starts at or after the end of the last one kept.
pub fn brute_windows(day: u32, d: usize, q: usize, strategy: Strategy, test_bins: &[usize]) -> Vec<SequenceWindow> {
    let mut out = Vec::new();
    let mut free_from = 0;
    for s in 0..=d {
        if s < q || s + 3 > d {
            continue;
        }
        let keep = match strategy {
            Strategy::AllSlots => true,
            Strategy::LikeTest => test_bins.contains(&s),
            Strategy::NonOverlapping => s - q >= free_from,
        };
        if keep {
            out.push(SequenceWindow { day_index: day, start_bin: s, input_len: q });
            free_from = s + 3;
        }
    }
    out
}

/// A small synthetic city with weather-backed exogenous inputs.
pub fn synth_dataset(h: usize, w: usize, days: u32, synth: SynthConfig, val_days: u32) -> (Dataset, Vec<TrafficMovie>) {
    let spec = GridSpec::new(h, w, 288).unwrap();
    let city = generate_city(synth.seed, spec).unwrap();
    let cfg = SynthConfig { num_days: days, ..synth };
    let movies: Vec<TrafficMovie> =
        (0..days).map(|d| simulate_day(&city, &cfg, &CodecParams::default(), d).unwrap()).collect();
    let weather = generate_weather(cfg.seed, days, 288).unwrap();
    let data = Dataset {
        source: Arc::new(InMemoryStore::new("synthetic", movies.clone())),
        exo: Arc::new(WeatherExo { table: weather, scaling: WeatherScaling::default(), week_offset: cfg.week_offset }),
        train_days: (0..days - val_days).collect(),
        val_days: (days - val_days..days).collect(),
        bins_per_day: 288,
    };
    (data, movies)
}
