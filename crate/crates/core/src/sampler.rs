//! Training windows, per-epoch shuffling and concurrent batch assembly.
//!
//! A window anchored at output start bin `s` with input length `q` reads
//! frames `[s - q, s)` and predicts frames `[s, s + 3)`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exogenous::{ExoProvider, ExoVector, EXO_DIM};
use crate::grid_codec::{read_movie, GridSpec, TrafficMovie};

pub const OUTPUT_LEN: usize = 3;
pub const MAX_INPUT_LEN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    NonOverlapping,
    AllSlots,
    LikeTest,
}

/// One training sample: input bins `[s - q, s)`, target bins `[s, s + 3)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SequenceWindow {
    pub day_index: u32,
    pub start_bin: usize,
    pub input_len: usize,
}

impl SequenceWindow {
    pub fn input_bins(&self) -> std::ops::Range<usize> {
        self.start_bin - self.input_len..self.start_bin
    }

    pub fn output_bins(&self) -> std::ops::Range<usize> {
        self.start_bin..self.start_bin + OUTPUT_LEN
    }

    /// Every bin the window touches, inputs then outputs.
    pub fn bins(&self) -> std::ops::Range<usize> {
        self.start_bin - self.input_len..self.start_bin + OUTPUT_LEN
    }

    pub fn fits(&self, bins_per_day: usize) -> bool {
        self.start_bin >= self.input_len && self.start_bin + OUTPUT_LEN <= bins_per_day
    }
}

pub fn check_input_len(q: usize) -> Result<()> {
    if !(1..=MAX_INPUT_LEN).contains(&q) {
        return Err(Error::Domain(format!("input length q={q} outside [1, {MAX_INPUT_LEN}]")));
    }
    Ok(())
}

/// Number of windows a strategy yields. Non-overlapping counts only complete
/// windows.
pub fn count_sequences(
    bins_per_day: usize,
    q: usize,
    strategy: Strategy,
    num_days: usize,
    starts_per_day_like_test: usize,
) -> Result<u64> {
    check_input_len(q)?;
    let span = q + OUTPUT_LEN;
    if bins_per_day < span {
        return Err(Error::Domain(format!("day of {bins_per_day} bins cannot hold a window of {span}")));
    }
    let per_day = match strategy {
        Strategy::NonOverlapping => bins_per_day / span,
        Strategy::AllSlots => bins_per_day - span + 1,
        Strategy::LikeTest => starts_per_day_like_test,
    };
    Ok(num_days as u64 * per_day as u64)
}

/// Windows of every day under `strategy`, plus the like-test output bins
/// that had to be skipped because fewer than `q` bins precede them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Enumeration {
    pub windows: Vec<SequenceWindow>,
    pub skipped: Vec<(u32, usize)>,
}

pub fn enumerate_windows(
    days: &[u32],
    bins_per_day: usize,
    q: usize,
    strategy: Strategy,
    test_bins: &[usize],
) -> Result<Enumeration> {
    check_input_len(q)?;
    let span = q + OUTPUT_LEN;
    if bins_per_day < span {
        return Err(Error::Domain(format!("day of {bins_per_day} bins cannot hold a window of {span}")));
    }
    if strategy == Strategy::LikeTest && test_bins.is_empty() {
        return Err(Error::Config("like_test sampling needs the city's test bins".into()));
    }
    let mut out = Enumeration::default();
    for &day in days {
        match strategy {
            Strategy::NonOverlapping => {
                for k in 0..bins_per_day / span {
                    out.windows.push(SequenceWindow { day_index: day, start_bin: k * span + q, input_len: q });
                }
            }
            Strategy::AllSlots => {
                for first in 0..=bins_per_day - span {
                    out.windows.push(SequenceWindow { day_index: day, start_bin: first + q, input_len: q });
                }
            }
            Strategy::LikeTest => {
                for &s in test_bins {
                    let w = SequenceWindow { day_index: day, start_bin: s, input_len: q };
                    if s >= q && w.fits(bins_per_day) {
                        out.windows.push(w);
                    } else {
                        out.skipped.push((day, s));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// A shuffled ordering of windows for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochIndex {
    pub windows: Vec<SequenceWindow>,
    pub epoch: u64,
    pub seed: u64,
}

/// Permutes `windows` with an RNG keyed by `(seed, epoch)`.
pub fn build_epoch_index(windows: &[SequenceWindow], epoch: u64, seed: u64) -> Result<EpochIndex> {
    if windows.is_empty() {
        return Err(Error::Data("cannot build an epoch from zero windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut shuffled = windows.to_vec();
    shuffled.shuffle(&mut rng);
    Ok(EpochIndex { windows: shuffled, epoch, seed })
}

/// Normalized model inputs for a group of windows sharing `q`.
///
/// Frame tensors are channel-last: `inputs` is `(B, q, H, W, 3)`, `targets`
/// is `(B, 3, H, W, 3)`. `exo` holds one vector per frame of each window,
/// inputs first: `(B, q + 3, EXO_DIM)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub exo: Vec<f64>,
    pub window_refs: Vec<SequenceWindow>,
    pub q: usize,
    pub height: usize,
    pub width: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.window_refs.len()
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    /// Normalized input frame `k` of sample `b`.
    pub fn input_frame(&self, b: usize, k: usize) -> &[f64] {
        let n = self.frame_len();
        let o = (b * self.q + k) * n;
        &self.inputs[o..o + n]
    }

    pub fn target_frame(&self, b: usize, k: usize) -> &[f64] {
        let n = self.frame_len();
        let o = (b * OUTPUT_LEN + k) * n;
        &self.targets[o..o + n]
    }

    /// Exogenous vector for frame `k` of sample `b`, counting inputs then
    /// targets.
    pub fn exo_frame(&self, b: usize, k: usize) -> &[f64] {
        let o = (b * (self.q + OUTPUT_LEN) + k) * EXO_DIM;
        &self.exo[o..o + EXO_DIM]
    }
}

/// Loads movies by day index.
pub trait MovieSource: Send + Sync {
    fn movie(&self, day_index: u32) -> Result<Arc<TrafficMovie>>;
    fn city(&self) -> &str;
}

/// Movies held in memory.
#[derive(Clone, Debug, Default)]
pub struct InMemoryStore {
    pub city: String,
    movies: HashMap<u32, Arc<TrafficMovie>>,
}

impl InMemoryStore {
    pub fn new(city: impl Into<String>, movies: impl IntoIterator<Item = TrafficMovie>) -> Self {
        InMemoryStore {
            city: city.into(),
            movies: movies.into_iter().map(|m| (m.day_index, Arc::new(m))).collect(),
        }
    }

    pub fn days(&self) -> Vec<u32> {
        let mut d: Vec<u32> = self.movies.keys().copied().collect();
        d.sort_unstable();
        d
    }
}

impl MovieSource for InMemoryStore {
    fn movie(&self, day_index: u32) -> Result<Arc<TrafficMovie>> {
        self.movies
            .get(&day_index)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no movie for city {} day {day_index}", self.city)))
    }

    fn city(&self) -> &str {
        &self.city
    }
}

/// Exogenous provider returning zeros, for models that ignore exogenous
/// input.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroExo;

impl ExoProvider for ZeroExo {
    fn exo(&self, _day_index: u32, _time_bin: usize) -> Result<ExoVector> {
        Ok(ExoVector { values: vec![0.0; EXO_DIM] })
    }
}

/// Slices, normalizes and annotates the frames of `windows`.
pub fn assemble_batch(windows: &[SequenceWindow], store: &dyn MovieSource, exo: &dyn ExoProvider) -> Result<Batch> {
    let first = windows.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let q = first.input_len;
    let spec = store.movie(first.day_index)?.spec;
    let frame_len = spec.frame_len();
    let b = windows.len();
    let mut batch = Batch {
        inputs: Vec::with_capacity(b * q * frame_len),
        targets: Vec::with_capacity(b * OUTPUT_LEN * frame_len),
        exo: Vec::with_capacity(b * (q + OUTPUT_LEN) * EXO_DIM),
        window_refs: windows.to_vec(),
        q,
        height: spec.height,
        width: spec.width,
    };
    for w in windows {
        if w.input_len != q {
            return Err(Error::Data(format!("batch mixes input lengths {q} and {}", w.input_len)));
        }
        let movie = store.movie(w.day_index)?;
        if movie.spec.height != spec.height || movie.spec.width != spec.width {
            return Err(Error::Shape(format!("day {} has a different grid", w.day_index)));
        }
        if !w.fits(movie.spec.bins_per_day) {
            return Err(Error::Data(format!("window {w:?} does not fit a {}-bin day", movie.spec.bins_per_day)));
        }
        for t in w.input_bins() {
            batch.inputs.extend(movie.frame(t).iter().map(|&v| v as f64 / 255.0));
        }
        for t in w.output_bins() {
            batch.targets.extend(movie.frame(t).iter().map(|&v| v as f64 / 255.0));
        }
        for t in w.bins() {
            batch.exo.extend(exo.exo(w.day_index, t)?.values);
        }
    }
    Ok(batch)
}

/// Batches of an epoch in index order. With `workers == 0` batches are built
/// on the calling thread as they are requested. Otherwise each worker owns
/// every `workers`-th batch and pushes into its own bounded queue; the
/// consumer pulls round-robin, so the order (and content) is the same as the
/// serial path.
pub struct BatchStream {
    chunks: Vec<Vec<SequenceWindow>>,
    next: usize,
    mode: StreamMode,
}

enum StreamMode {
    Serial { store: Arc<dyn MovieSource>, exo: Arc<dyn ExoProvider> },
    Parallel { receivers: Vec<Receiver<Result<Batch>>>, handles: Vec<JoinHandle<()>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineOptions {
    pub batch_size: usize,
    pub workers: usize,
    /// Total number of batches that may wait in the prefetch buffer.
    pub prefetch_depth: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions { batch_size: 8, workers: 0, prefetch_depth: 4 }
    }
}

impl BatchStream {
    pub fn new(
        index: &EpochIndex,
        opts: PipelineOptions,
        store: Arc<dyn MovieSource>,
        exo: Arc<dyn ExoProvider>,
    ) -> Self {
        let chunks: Vec<Vec<SequenceWindow>> =
            index.windows.chunks(opts.batch_size.max(1)).map(<[_]>::to_vec).collect();
        if opts.workers == 0 {
            return BatchStream { chunks, next: 0, mode: StreamMode::Serial { store, exo } };
        }
        let n = opts.workers;
        let cap = opts.prefetch_depth.div_ceil(n).max(1);
        let mut receivers = Vec::with_capacity(n);
        let mut handles = Vec::with_capacity(n);
        for k in 0..n {
            let (tx, rx) = sync_channel(cap);
            let mine: Vec<Vec<SequenceWindow>> = chunks.iter().skip(k).step_by(n).cloned().collect();
            let store = Arc::clone(&store);
            let exo = Arc::clone(&exo);
            handles.push(std::thread::spawn(move || {
                for chunk in mine {
                    let batch = assemble_batch(&chunk, store.as_ref(), exo.as_ref());
                    if tx.send(batch).is_err() {
                        break;
                    }
                }
            }));
            receivers.push(rx);
        }
        BatchStream { chunks, next: 0, mode: StreamMode::Parallel { receivers, handles } }
    }

    pub fn num_batches(&self) -> usize {
        self.chunks.len()
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.chunks.len() {
            return None;
        }
        let i = self.next;
        self.next += 1;
        Some(match &self.mode {
            StreamMode::Serial { store, exo } => assemble_batch(&self.chunks[i], store.as_ref(), exo.as_ref()),
            StreamMode::Parallel { receivers, .. } => receivers[i % receivers.len()]
                .recv()
                .unwrap_or_else(|_| Err(Error::Data("batch producer exited early".into()))),
        })
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        if let StreamMode::Parallel { receivers, handles } = &mut self.mode {
            receivers.clear();
            for h in handles.drain(..) {
                let _ = h.join();
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub day_index: u32,
    pub path: PathBuf,
    pub split: Split,
}

/// Dataset listing for one city. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub city: String,
    pub grid: GridSpec,
    pub weather: Option<PathBuf>,
    /// Weekday of day 0, Monday = 0.
    #[serde(default)]
    pub week_offset: u32,
    pub days: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = toml::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn days(&self, split: Split) -> Vec<u32> {
        self.days.iter().filter(|e| e.split == split).map(|e| e.day_index).collect()
    }

    pub fn all_days(&self) -> Vec<u32> {
        self.days.iter().map(|e| e.day_index).collect()
    }
}

/// Reads movies listed in a manifest on first use and keeps them cached.
#[derive(Debug)]
pub struct ManifestStore {
    manifest: Manifest,
    cache: Mutex<HashMap<u32, Arc<TrafficMovie>>>,
}

impl ManifestStore {
    pub fn new(manifest: Manifest) -> Self {
        ManifestStore { manifest, cache: Mutex::new(HashMap::new()) }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }
}

impl MovieSource for ManifestStore {
    fn movie(&self, day_index: u32) -> Result<Arc<TrafficMovie>> {
        if let Some(m) = self.cache.lock().unwrap().get(&day_index) {
            return Ok(Arc::clone(m));
        }
        let entry = self.manifest.days.iter().find(|e| e.day_index == day_index).ok_or_else(|| {
            Error::Data(format!("manifest for city {} lists no day {day_index}", self.manifest.city))
        })?;
        let path = self.manifest.resolve(&entry.path);
        let movie = read_movie(&path, day_index).map_err(|e| {
            Error::Data(format!("cannot load city {} day {day_index} from {}: {e}", self.manifest.city, path.display()))
        })?;
        let movie = Arc::new(movie);
        self.cache.lock().unwrap().insert(day_index, Arc::clone(&movie));
        Ok(movie)
    }

    fn city(&self) -> &str {
        &self.manifest.city
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_codec::GridSpec;

    #[test]
    fn full_scale_counts() {
        assert_eq!(count_sequences(288, 3, Strategy::NonOverlapping, 285, 0).unwrap(), 13680);
        assert_eq!(count_sequences(288, 3, Strategy::AllSlots, 285, 0).unwrap(), 80655);
        assert_eq!(count_sequences(288, 3, Strategy::LikeTest, 285, 5).unwrap(), 1425);
        assert_eq!(count_sequences(6, 3, Strategy::AllSlots, 1, 0).unwrap(), 1);
        assert_eq!(count_sequences(288, 9, Strategy::NonOverlapping, 1, 0).unwrap(), 24);
        assert!(count_sequences(288, 13, Strategy::AllSlots, 1, 0).is_err());
        assert!(count_sequences(288, 0, Strategy::AllSlots, 1, 0).is_err());
    }

    #[test]
    fn non_overlapping_hand_enumeration() {
        let e = enumerate_windows(&[0], 12, 3, Strategy::NonOverlapping, &[]).unwrap();
        let spans: Vec<_> = e.windows.iter().map(|w| (w.input_bins(), w.output_bins())).collect();
        assert_eq!(spans, vec![(0..3, 3..6), (6..9, 9..12)]);
    }

    #[test]
    fn like_test_uses_city_bins_and_reports_skips() {
        let moscow = [57, 114, 174, 222, 258];
        let e = enumerate_windows(&[0], 288, 3, Strategy::LikeTest, &moscow).unwrap();
        assert_eq!(e.windows.iter().map(|w| w.start_bin).collect::<Vec<_>>(), moscow);
        let e = enumerate_windows(&[0, 1], 288, 12, Strategy::LikeTest, &[5, 30]).unwrap();
        assert_eq!(e.windows.len(), 2);
        assert_eq!(e.skipped, vec![(0, 5), (1, 5)]);
        assert!(enumerate_windows(&[0], 288, 3, Strategy::LikeTest, &[]).is_err());
    }

    #[test]
    fn epoch_index_is_a_deterministic_permutation() {
        let windows: Vec<_> = (0..100)
            .map(|i| SequenceWindow { day_index: i / 10, start_bin: 3 + i as usize % 10, input_len: 3 })
            .collect();
        let a = build_epoch_index(&windows, 0, 7).unwrap();
        assert_eq!(a, build_epoch_index(&windows, 0, 7).unwrap());
        let mut sorted = a.windows.clone();
        sorted.sort();
        assert_eq!(sorted, windows);
        let b = build_epoch_index(&windows, 1, 7).unwrap();
        assert_ne!(a.windows, b.windows);
        assert!(build_epoch_index(&[], 0, 0).is_err());
    }

    fn store() -> InMemoryStore {
        let spec = GridSpec::new(2, 3, 10).unwrap();
        let mut m = TrafficMovie::zeros(spec, 0);
        m.set(4, 1, 2, 1, 255);
        InMemoryStore::new("test", [m, TrafficMovie::zeros(spec, 1)])
    }

    #[test]
    fn batch_slices_and_normalizes() {
        let s = store();
        let zero = assemble_batch(&[SequenceWindow { day_index: 1, start_bin: 5, input_len: 2 }], &s, &ZeroExo).unwrap();
        assert!(zero.inputs.iter().chain(&zero.targets).all(|&v| v == 0.0));
        assert_eq!(zero.exo.len(), 5 * EXO_DIM);

        let w = SequenceWindow { day_index: 0, start_bin: 5, input_len: 2 };
        let b = assemble_batch(&[w], &s, &ZeroExo).unwrap();
        assert_eq!(b.inputs.len(), 2 * 18);
        // bin 4 is the second input frame
        assert_eq!(b.input_frame(0, 1)[(1 * 3 + 2) * 3 + 1], 1.0);
        assert_eq!(b.inputs.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn missing_movie_names_city_and_day() {
        let err = assemble_batch(&[SequenceWindow { day_index: 9, start_bin: 3, input_len: 1 }], &store(), &ZeroExo)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("test") && msg.contains("day 9"), "{msg}");
    }

    #[test]
    fn parallel_stream_matches_serial_order() {
        let s: Arc<dyn MovieSource> = Arc::new(store());
        let e = enumerate_windows(&[0, 1], 10, 2, Strategy::AllSlots, &[]).unwrap();
        let idx = build_epoch_index(&e.windows, 3, 1).unwrap();
        let serial: Vec<Batch> = BatchStream::new(
            &idx,
            PipelineOptions { batch_size: 3, workers: 0, prefetch_depth: 2 },
            Arc::clone(&s),
            Arc::new(ZeroExo),
        )
        .collect::<Result<_>>()
        .unwrap();
        let par: Vec<Batch> = BatchStream::new(
            &idx,
            PipelineOptions { batch_size: 3, workers: 3, prefetch_depth: 2 },
            s,
            Arc::new(ZeroExo),
        )
        .collect::<Result<_>>()
        .unwrap();
        assert_eq!(serial, par);
        assert_eq!(serial.iter().map(Batch::size).sum::<usize>(), e.windows.len());
    }

    #[test]
    fn dropping_a_parallel_stream_early_does_not_hang() {
        let s: Arc<dyn MovieSource> = Arc::new(store());
        let e = enumerate_windows(&[0, 1], 10, 1, Strategy::AllSlots, &[]).unwrap();
        let idx = build_epoch_index(&e.windows, 0, 0).unwrap();
        let mut stream =
            BatchStream::new(&idx, PipelineOptions { batch_size: 1, workers: 2, prefetch_depth: 2 }, s, Arc::new(ZeroExo));
        assert!(stream.next().unwrap().is_ok());
        drop(stream);
    }

    #[test]
    fn manifest_round_trip_and_store() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::new(2, 2, 6).unwrap();
        let movie = TrafficMovie::zeros(spec, 4);
        crate::grid_codec::write_movie(&movie, &dir.path().join("d4.t4cm")).unwrap();
        let m = Manifest {
            city: "synth".into(),
            grid: spec,
            weather: None,
            week_offset: 0,
            days: vec![ManifestEntry { day_index: 4, path: "d4.t4cm".into(), split: Split::Train }],
            root: PathBuf::new(),
        };
        let path = dir.path().join("manifest.toml");
        m.save(&path).unwrap();
        let loaded = Manifest::load(&path).unwrap();
        assert_eq!(loaded.days, m.days);
        let store = ManifestStore::new(loaded);
        assert_eq!(*store.movie(4).unwrap(), movie);
        assert!(store.movie(5).is_err());
    }
}
