mod common;

use std::collections::BTreeMap;

use gridcast::exogenous::{assemble_exo, encode_time_of_day, CalendarStamp, WeatherScaling, EXO_DIM};
use gridcast::grid_codec::{
    decode_movie, encode_movie, encode_speed, encode_volume, heading_bin, rasterize_probes, CodecParams, GridSpec,
    ProbePoint, TrafficMovie, HEADING, HEADING_LEVELS, SPEED, VOLUME,
};
use gridcast::model::{Model, PredictionBundle, TargetBundle, Variant};
use gridcast::objectives::{heading_ce_loss, mse_metric, rae_loss, LossWeights};
use gridcast::sampler::{build_epoch_index, count_sequences, enumerate_windows, Strategy};
use gridcast::synth_world::{generate_city, generate_weather, simulate_day, RushHour, SynthConfig};
use gridcast::train::{decode_checkpoint, encode_checkpoint, Checkpoint};
use gridcast::nn::Adam;
use proptest::prelude::*;

fn strategy() -> impl proptest::strategy::Strategy<Value = Strategy> {
    prop_oneof![Just(Strategy::NonOverlapping), Just(Strategy::AllSlots), Just(Strategy::LikeTest)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn heading_bin_is_total(deg in 0.0f64..360.0) {
        let code = heading_bin(deg).unwrap();
        prop_assert!([85u8, 255, 170, 1].contains(&code));
    }

    #[test]
    fn volume_and_speed_encodings_are_monotone(a in 0u32..200, b in 0u32..200, x in 0.0f64..300.0, y in 0.0f64..300.0) {
        let p = CodecParams::default();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(encode_volume(lo, &p) <= encode_volume(hi, &p));
        let (lo, hi) = (x.min(y), x.max(y));
        prop_assert!(encode_speed(lo, &p) <= encode_speed(hi, &p));
    }

    #[test]
    fn rasterized_movies_respect_no_data(
        probes in prop::collection::vec((0usize..6, 0usize..4, 0usize..5, 0.0f64..150.0, 0.0f64..360.0), 0..60)
    ) {
        let spec = GridSpec::new(4, 5, 6).unwrap();
        let probes: Vec<ProbePoint> = probes
            .into_iter()
            .map(|(t, r, c, s, h)| ProbePoint { day_index: 2, time_bin: t, row: r, col: c, speed_kmh: s, heading_deg: h })
            .collect();
        let m = rasterize_probes(&probes, &spec, &CodecParams::default()).unwrap();
        m.validate().unwrap();
        for px in m.data().chunks_exact(3) {
            if px[VOLUME] == 0 {
                prop_assert_eq!((px[SPEED], px[HEADING]), (0, 0));
            }
            prop_assert!(HEADING_LEVELS.contains(&px[HEADING]));
        }
    }

    #[test]
    fn movie_container_round_trips(t in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let spec = GridSpec::new(h, w, t).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let data: Vec<u8> = (0..spec.movie_len()).map(|_| rand::Rng::random(&mut rng)).collect();
        let m = TrafficMovie::from_raw(spec, 3, data).unwrap();
        let back = decode_movie(&encode_movie(&m), 3).unwrap();
        prop_assert_eq!(back.data(), m.data());
    }

    #[test]
    fn window_enumeration_matches_brute_force(d in 4usize..=50, q in 1usize..=6, s in strategy(), bins in prop::collection::btree_set(0usize..60, 1..6)) {
        let bins: Vec<usize> = bins.into_iter().collect();
        prop_assume!(d >= q + 3);
        let e = enumerate_windows(&[0, 1], d, q, s, &bins).unwrap();
        let mut expect = common::brute_windows(0, d, q, s, &bins);
        expect.extend(common::brute_windows(1, d, q, s, &bins));
        let mut got = e.windows.clone();
        got.sort();
        expect.sort();
        prop_assert_eq!(&got, &expect);
        if s != Strategy::LikeTest {
            prop_assert_eq!(count_sequences(d, q, s, 2, 0).unwrap(), got.len() as u64);
        }
        for w in &got {
            prop_assert!(w.start_bin >= q && w.start_bin + 3 <= d);
        }
        if s == Strategy::NonOverlapping {
            for (a, b) in got.iter().zip(got.iter().skip(1)).filter(|(a, b)| a.day_index == b.day_index) {
                prop_assert!(a.bins().end <= b.bins().start);
            }
        }
        if s == Strategy::AllSlots {
            let firsts: Vec<usize> = got.iter().filter(|w| w.day_index == 0).map(|w| w.start_bin - q).collect();
            prop_assert_eq!(firsts, (0..=d - q - 3).collect::<Vec<_>>());
        }
    }

    #[test]
    fn epoch_shuffle_is_a_permutation(n in 1usize..200, epoch in 0u64..50, seed in any::<u64>()) {
        let windows = enumerate_windows(&[0], n + 3, 1, Strategy::AllSlots, &[]).unwrap().windows;
        let a = build_epoch_index(&windows, epoch, seed).unwrap();
        let b = build_epoch_index(&windows, epoch, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let mut sorted = a.windows.clone();
        sorted.sort();
        prop_assert_eq!(sorted, windows);
    }

    #[test]
    fn exo_vectors_have_fixed_length(day in 0u32..3, bin in 0usize..288, offset in 0u32..7) {
        let table = generate_weather(5, 3, 288).unwrap();
        let v = assemble_exo(&CalendarStamp::new(day, bin, offset), &table, &WeatherScaling::default()).unwrap();
        prop_assert_eq!(v.values.len(), EXO_DIM);
        prop_assert!(v.values.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn time_of_day_wraps_around(shift in 0usize..288) {
        let at = |b: usize| encode_time_of_day((b + shift) % 288, 288);
        let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        prop_assert!(dist(at(287), at(0)) < dist(at(0), at(72)));
    }

    #[test]
    fn rae_loss_is_nonnegative_symmetric_and_zero_on_targets(
        frames in prop::collection::vec(0.0f64..1.0, 27),
        other in prop::collection::vec(0.0f64..1.0, 27),
        emb in prop::collection::vec(-1.0f64..1.0, 6),
        emb2 in prop::collection::vec(-1.0f64..1.0, 6),
        alpha in 0.01f64..0.99,
        beta in 0.01f64..0.99,
    ) {
        let w = LossWeights { alpha, beta, ..Default::default() };
        let bundle = |f: &Vec<f64>, e: &Vec<f64>| PredictionBundle {
            batch: 1, height: 1, width: 3, frames: f.clone(), embeddings: Some(e.clone()), aux_heading_logits: None,
        };
        let target = |f: &Vec<f64>, e: &Vec<f64>| TargetBundle { frames: f.clone(), embeddings: Some(e.clone()) };
        let l = rae_loss(&bundle(&frames, &emb), &target(&other, &emb2), &w).unwrap();
        let swapped = rae_loss(&bundle(&other, &emb2), &target(&frames, &emb), &w).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!((l - swapped).abs() < 1e-15);
        prop_assert_eq!(rae_loss(&bundle(&frames, &emb), &target(&frames, &emb), &w).unwrap(), 0.0);
        if frames != other || emb != emb2 {
            prop_assert!(l > 0.0);
        }
    }

    #[test]
    fn uniform_logits_give_ln5(pixels in 1usize..50, z in -5.0f64..5.0, seed in 0usize..5) {
        let logits = vec![z; pixels * 5];
        let target: Vec<u8> = (0..pixels).map(|i| HEADING_LEVELS[(i + seed) % 5]).collect();
        prop_assert!((heading_ce_loss(&logits, &target).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn metric_total_is_the_weighted_mean_of_its_breakdown(
        b in 1usize..3, h in 1usize..4, w in 1usize..4, seed in any::<u64>()
    ) {
        let n = b * 3 * h * w * 3;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut v = |_| rand::Rng::random::<f64>(&mut rng);
        let pred: Vec<f64> = (0..n).map(&mut v).collect();
        let target: Vec<f64> = (0..n).map(&mut v).collect();
        let r = mse_metric(&pred, &target, b, h, w).unwrap();
        let mut sse = 0.0;
        let mut count = 0;
        for k in 0..3 {
            for c in 0..3 {
                sse += r.mse(k, c) * r.counts[k][c] as f64;
                count += r.counts[k][c];
            }
        }
        prop_assert_eq!(count as usize, n);
        prop_assert!((sse / count as f64 - r.mse_total()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn synthetic_days_are_valid_and_reproducible(seed in any::<u64>(), noise in 0.0f64..1.0, drift in 0.0f64..2.0) {
        let spec = GridSpec::new(6, 7, 288).unwrap();
        let cfg = SynthConfig {
            seed,
            num_days: 2,
            noise_level: noise,
            drift_cells_per_bin: drift,
            rush_hours: vec![RushHour { peak_bin: 100.0, width_bins: 10.0 }],
            ..Default::default()
        };
        let city = generate_city(seed, spec).unwrap();
        let a = simulate_day(&city, &cfg, &CodecParams::default(), 1).unwrap();
        a.validate().unwrap();
        let b = simulate_day(&generate_city(seed, spec).unwrap(), &cfg, &CodecParams::default(), 1).unwrap();
        prop_assert_eq!(a.data(), b.data());
        let weather = generate_weather(seed, 2, 288).unwrap();
        for d in 0..2 {
            for t in 0..288 {
                prop_assert!(weather.get(d, t).is_some());
            }
        }
    }

    #[test]
    fn forward_output_matches_grid(
        canvas_pow in 4u32..=6,
        blocks in 1usize..=3,
        h_frac in 0.3f64..=1.0,
        w_frac in 0.3f64..=1.0,
        variant in prop::sample::select(Variant::ALL.to_vec()),
        seed in 0u64..1000,
    ) {
        let canvas = 1usize << canvas_pow;
        let h = ((canvas as f64 * h_frac) as usize).max(1);
        let w = ((canvas as f64 * w_frac) as usize).max(1);
        let mut cfg = common::tiny(variant, canvas, blocks, h, w);
        cfg.q = 2;
        let model = Model::new(cfg.clone(), seed).unwrap();
        let batch = common::random_batch(1, 2, h, w, seed);
        let p = model.predict(&batch).unwrap();
        prop_assert_eq!((p.batch, p.height, p.width), (1, h, w));
        prop_assert_eq!(p.frames.len(), 3 * h * w * 3);
        if variant.is_rae() {
            prop_assert_eq!(p.embeddings.as_ref().unwrap().len(), 3 * cfg.embed_dim());
        } else {
            prop_assert!(p.embeddings.is_none());
        }
        let again = model.predict(&batch).unwrap();
        prop_assert_eq!(again, p);
    }

    #[test]
    fn checkpoint_reload_keeps_inference_bit_identical(variant in prop::sample::select(Variant::ALL.to_vec()), seed in 0u64..1000) {
        let mut cfg = common::tiny(variant, 16, 2, 12, 14);
        cfg.q = 2;
        let model = Model::new(cfg, seed).unwrap();
        let batch = common::random_batch(2, 2, 12, 14, seed);
        let ck = Checkpoint { model: model.clone(), optimizer: Adam::new(1e-3), epoch: 1, init_epochs: 0, history: vec![], train_config: None };
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        prop_assert_eq!(back.model.predict(&batch).unwrap(), model.predict(&batch).unwrap());
        let names: BTreeMap<_, _> = back.model.params.params().map(|(k, t)| (k.clone(), t.shape.clone())).collect();
        prop_assert_eq!(names.len(), model.params.params().count());
    }
}
