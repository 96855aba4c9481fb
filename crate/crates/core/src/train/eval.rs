use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use super::score_batch;
use crate::error::{Error, Result};
use crate::exogenous::ExoProvider;
use crate::model::{PredictionBundle, Predictor};
use crate::objectives::MetricReport;
use crate::sampler::{assemble_batch, Batch, BatchStream, EpochIndex, MovieSource, PipelineOptions, SequenceWindow, OUTPUT_LEN};

pub const MOSCOW_BINS: [usize; 5] = [57, 114, 174, 222, 258];
pub const ISTANBUL_BINS: [usize; 5] = [57, 114, 174, 222, 258];
pub const BERLIN_BINS: [usize; 5] = [30, 69, 126, 186, 234];
pub const CHALLENGE_INPUT_LEN: usize = 12;

/// Output start bins of the challenge blocks, each preceded by one hour of
/// input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub block_start_bins: Vec<usize>,
    pub input_len: usize,
    pub output_len: usize,
}

impl EvalProtocol {
    pub fn custom(block_start_bins: Vec<usize>) -> Self {
        EvalProtocol { block_start_bins, input_len: CHALLENGE_INPUT_LEN, output_len: OUTPUT_LEN }
    }

    /// Profile by city name: `moscow`, `istanbul` or `berlin`.
    pub fn for_city(name: &str) -> Result<Self> {
        let bins = match name.to_ascii_lowercase().as_str() {
            "moscow" => MOSCOW_BINS,
            "istanbul" => ISTANBUL_BINS,
            "berlin" => BERLIN_BINS,
            other => return Err(Error::Config(format!("unknown city profile `{other}`"))),
        };
        Ok(Self::custom(bins.to_vec()))
    }

    pub fn validate(&self, bins_per_day: usize) -> Result<()> {
        if self.block_start_bins.is_empty() {
            return Err(Error::Config("evaluation protocol has no blocks".into()));
        }
        for &s in &self.block_start_bins {
            if s < self.input_len || s + self.output_len > bins_per_day {
                return Err(Error::Config(format!(
                    "block start bin {s} needs bins {}..{} but the day has {bins_per_day}",
                    s as i64 - self.input_len as i64,
                    s + self.output_len
                )));
            }
        }
        Ok(())
    }
}

/// Result of [`evaluate_challenge`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChallengeReport {
    pub report: MetricReport,
    /// `(day, output start bin)` of every block scored, in visiting order.
    pub blocks: Vec<(u32, usize)>,
    pub skipped_days: Vec<u32>,
}

/// Scores `predictor` on each block of each day. Models with `q < 12` see
/// the most recent `q` bins of the hour.
pub fn evaluate_challenge(
    predictor: &dyn Predictor,
    source: &dyn MovieSource,
    exo: &dyn ExoProvider,
    days: &[u32],
    protocol: &EvalProtocol,
) -> Result<ChallengeReport> {
    let q = predictor.input_len();
    if q == 0 || q > protocol.input_len {
        return Err(Error::Config(format!("model input length {q} exceeds the {}-bin block", protocol.input_len)));
    }
    let mut out = ChallengeReport::default();
    for &day in days {
        let movie = source.movie(day)?;
        if let Err(e) = protocol.validate(movie.spec.bins_per_day) {
            warn!("skipping day {day}: {e}");
            out.skipped_days.push(day);
            continue;
        }
        let windows: Vec<SequenceWindow> = protocol
            .block_start_bins
            .iter()
            .map(|&s| SequenceWindow { day_index: day, start_bin: s, input_len: q })
            .collect();
        let batch = assemble_batch(&windows, source, exo)?;
        let pred = predictor.predict_batch(&batch)?;
        out.report.merge(&score_batch(&pred, &batch)?);
        out.blocks.extend(windows.iter().map(|w| (day, w.start_bin)));
    }
    Ok(out)
}

/// Scores `predictor` on arbitrary windows.
pub fn evaluate_windows(
    predictor: &dyn Predictor,
    windows: &[SequenceWindow],
    opts: PipelineOptions,
    source: Arc<dyn MovieSource>,
    exo: Arc<dyn ExoProvider>,
) -> Result<MetricReport> {
    let index = EpochIndex { windows: windows.to_vec(), epoch: 0, seed: 0 };
    let mut report = MetricReport::default();
    for batch in BatchStream::new(&index, opts, source, exo) {
        let batch = batch?;
        let pred = predictor.predict_batch(&batch)?;
        report.merge(&score_batch(&pred, &batch)?);
    }
    Ok(report)
}

/// Repeats the last input frame for all three horizons.
pub fn persistence_baseline(batch: &Batch) -> PredictionBundle {
    let n = batch.frame_len();
    let mut frames = Vec::with_capacity(batch.size() * OUTPUT_LEN * n);
    for b in 0..batch.size() {
        let last = batch.input_frame(b, batch.q - 1);
        for _ in 0..OUTPUT_LEN {
            frames.extend_from_slice(last);
        }
    }
    PredictionBundle {
        batch: batch.size(),
        height: batch.height,
        width: batch.width,
        frames,
        embeddings: None,
        aux_heading_logits: None,
    }
}

/// [`persistence_baseline`] as a [`Predictor`].
#[derive(Clone, Copy, Debug)]
pub struct Persistence {
    pub q: usize,
}

impl Predictor for Persistence {
    fn input_len(&self) -> usize {
        self.q
    }

    fn predict_batch(&self, batch: &Batch) -> Result<PredictionBundle> {
        Ok(persistence_baseline(batch))
    }
}
