//! Losses and evaluation metrics.
//!
//! Everything works on the normalized `[0, 1]` scale. Frame tensors are
//! channel-last `(B, 3, H, W, 3)` with horizons +5, +10 and +15 minutes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_codec::{snap_heading_level, CHANNELS, HEADING, HEADING_LEVELS, VOLUME};
use crate::model::{ForwardVars, PredictionBundle, TargetBundle, Variant, HEADING_CLASSES};
use crate::nn::{Graph, Var};
use crate::sampler::{Batch, OUTPUT_LEN};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub clf_weight: f64,
    /// Treat the target embeddings as constants.
    pub stop_target_grad: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5, beta: 0.5, clf_weight: 1.0, stop_target_grad: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.alpha) || !open(self.beta) {
            return Err(Error::Config(format!("alpha={} beta={} must lie in (0, 1)", self.alpha, self.beta)));
        }
        if !(self.clf_weight >= 0.0 && self.clf_weight.is_finite()) {
            return Err(Error::Config(format!("clf_weight={} must be >= 0", self.clf_weight)));
        }
        Ok(())
    }
}

/// Mean of squared element differences.
pub fn l2_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("l2 on {} vs {} elements", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// `alpha * L2(frames) + beta * L2(embeddings)`.
pub fn rae_loss(pred: &PredictionBundle, target: &TargetBundle, w: &LossWeights) -> Result<f64> {
    let (Some(pe), Some(te)) = (&pred.embeddings, &target.embeddings) else {
        return Err(Error::Shape("embedding loss needs predicted and target embeddings".into()));
    };
    Ok(w.alpha * l2_loss(&pred.frames, &target.frames)? + w.beta * l2_loss(pe, te)?)
}

/// Class id (0..5) of a heading byte level.
pub fn heading_class(level: u8) -> Result<usize> {
    HEADING_LEVELS
        .iter()
        .position(|&l| l == level)
        .ok_or_else(|| Error::Data(format!("heading value {level} is not one of {HEADING_LEVELS:?}")))
}

/// Class ids for the heading channel of normalized channel-last frames.
pub fn heading_classes(frames: &[f64]) -> Result<Vec<usize>> {
    frames.chunks_exact(CHANNELS).map(|px| heading_class((px[HEADING] * 255.0).round() as u8)).collect()
}

/// Mean softmax cross-entropy; `logits` holds 5 values per pixel.
pub fn heading_ce_loss(logits: &[f64], target: &[u8]) -> Result<f64> {
    if logits.len() != target.len() * HEADING_CLASSES {
        return Err(Error::Shape(format!("{} logits for {} pixels", logits.len(), target.len())));
    }
    let mut total = 0.0;
    for (z, &t) in logits.chunks_exact(HEADING_CLASSES).zip(target) {
        let c = heading_class(t)?;
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[c];
    }
    Ok(if target.is_empty() { 0.0 } else { total / target.len() as f64 })
}

/// Fraction of pixels whose snapped heading equals the target level.
pub fn heading_accuracy(pred: &[f64], target: &[u8]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(target).filter(|(p, t)| snap_heading_level(**p) == **t).count();
    hits as f64 / pred.len() as f64
}

/// Squared-error sums per horizon and channel, mergeable across batches.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `[horizon][channel]`.
    pub sse: [[f64; 3]; 3],
    pub counts: [[u64; 3]; 3],
    pub heading_hits: u64,
    pub heading_pixels: u64,
    /// Same, restricted to pixels with non-zero target volume.
    pub heading_hits_data: u64,
    pub heading_pixels_data: u64,
}

const HORIZON_LABELS: [&str; 3] = ["5min", "10min", "15min"];

impl MetricReport {
    pub fn merge(&mut self, other: &MetricReport) {
        for h in 0..OUTPUT_LEN {
            for c in 0..CHANNELS {
                self.sse[h][c] += other.sse[h][c];
                self.counts[h][c] += other.counts[h][c];
            }
        }
        self.heading_hits += other.heading_hits;
        self.heading_pixels += other.heading_pixels;
        self.heading_hits_data += other.heading_hits_data;
        self.heading_pixels_data += other.heading_pixels_data;
    }

    pub fn mse_total(&self) -> f64 {
        let s: f64 = self.sse.iter().flatten().sum();
        let n: u64 = self.counts.iter().flatten().sum();
        ratio(s, n)
    }

    pub fn mse(&self, horizon: usize, channel: usize) -> f64 {
        ratio(self.sse[horizon][channel], self.counts[horizon][channel])
    }

    pub fn mse_by_horizon(&self, horizon: usize) -> f64 {
        ratio(self.sse[horizon].iter().sum(), self.counts[horizon].iter().sum())
    }

    pub fn mse_by_channel(&self, channel: usize) -> f64 {
        ratio((0..3).map(|h| self.sse[h][channel]).sum(), (0..3).map(|h| self.counts[h][channel]).sum())
    }

    /// The 3x3 breakdown `[horizon][channel]`.
    pub fn mse_matrix(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for (h, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.mse(h, c);
            }
        }
        m
    }

    pub fn heading_accuracy(&self) -> f64 {
        ratio(self.heading_hits as f64, self.heading_pixels)
    }

    pub fn heading_accuracy_data(&self) -> f64 {
        ratio(self.heading_hits_data as f64, self.heading_pixels_data)
    }

    pub fn pixels(&self) -> u64 {
        self.heading_pixels
    }

    /// Rows per horizon, columns per channel, tab separated.
    pub fn to_table(&self) -> String {
        let mut s = String::from("horizon\tspeed\tvolume\theading\tall\n");
        for (h, label) in HORIZON_LABELS.iter().enumerate() {
            s += &format!(
                "{label}\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\n",
                self.mse(h, 0),
                self.mse(h, 1),
                self.mse(h, 2),
                self.mse_by_horizon(h)
            );
        }
        s += &format!(
            "all\t{:.6e}\t{:.6e}\t{:.6e}\t{:.6e}\n",
            self.mse_by_channel(0),
            self.mse_by_channel(1),
            self.mse_by_channel(2),
            self.mse_total()
        );
        s += &format!("heading_accuracy\t{:.6}\n", self.heading_accuracy());
        s += &format!("heading_accuracy_data\t{:.6}\n", self.heading_accuracy_data());
        s += &format!("pixels\t{}\n", self.pixels());
        s
    }
}

fn ratio(s: f64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores predicted against target frames, both `(B, 3, H, W, 3)`.
pub fn mse_metric(pred: &[f64], target: &[f64], batch: usize, height: usize, width: usize) -> Result<MetricReport> {
    let cells = height * width;
    let expect = batch * OUTPUT_LEN * cells * CHANNELS;
    if pred.len() != expect || target.len() != expect {
        return Err(Error::Shape(format!(
            "metric inputs of {} / {} values, expected {expect}",
            pred.len(),
            target.len()
        )));
    }
    let mut r = MetricReport::default();
    for b in 0..batch {
        for h in 0..OUTPUT_LEN {
            let base = (b * OUTPUT_LEN + h) * cells * CHANNELS;
            for i in 0..cells {
                let p = &pred[base + i * CHANNELS..base + (i + 1) * CHANNELS];
                let t = &target[base + i * CHANNELS..base + (i + 1) * CHANNELS];
                for c in 0..CHANNELS {
                    let d = p[c] - t[c];
                    r.sse[h][c] += d * d;
                }
                let hit = snap_heading_level(p[HEADING]) == (t[HEADING] * 255.0).round() as u8;
                r.heading_pixels += 1;
                r.heading_hits += hit as u64;
                if t[VOLUME] > 0.0 {
                    r.heading_pixels_data += 1;
                    r.heading_hits_data += hit as u64;
                }
            }
            for c in 0..CHANNELS {
                r.counts[h][c] += cells as u64;
            }
        }
    }
    Ok(r)
}

/// Loss nodes of one training step.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub frame: Var,
    pub embedding: Option<Var>,
    pub heading_ce: Option<Var>,
}

/// Builds the training objective for `variant` on top of a forward pass.
///
/// Autoencoders: `alpha * L2(frames) + beta * L2(embeddings)`; the
/// classification variant adds `alpha * L2` on its two regression channels
/// and `clf_weight * CE` on the heading logits. ConvLSTM: frame L2 plus the
/// optional `clf_weight * CE`.
pub fn training_loss(
    g: &mut Graph,
    out: &ForwardVars,
    batch: &Batch,
    target: Var,
    variant: Variant,
    w: &LossWeights,
) -> Result<LossTerms> {
    let frame = g.mse(out.frames, target);
    let mut total;
    let mut embedding = None;
    if variant.is_rae() {
        let (Some(pe), Some(te)) = (out.embeddings, out.target_embeddings) else {
            return Err(Error::Shape("autoencoder loss needs target embeddings".into()));
        };
        let te = if w.stop_target_grad { g.detach(te) } else { te };
        let e = g.mse(pe, te);
        let a = g.affine(frame, w.alpha, 0.0);
        let b = g.affine(e, w.beta, 0.0);
        total = g.add(a, b);
        embedding = Some(e);
        if let Some(reg) = out.regression {
            let tr = g.slice1(target, 0, 2);
            let l = g.mse(reg, tr);
            let l = g.affine(l, w.alpha, 0.0);
            total = g.add(total, l);
        }
    } else {
        total = frame;
    }
    let mut heading_ce = None;
    if let Some(logits) = out.heading_logits {
        let classes = heading_classes(&batch.targets)?;
        // logits are (N, 5, H, W); classes are per (N, H, W) in the same order
        let ce = g.softmax_ce(logits, &classes);
        let scaled = g.affine(ce, w.clf_weight, 0.0);
        total = g.add(total, scaled);
        heading_ce = Some(ce);
    }
    Ok(LossTerms { total, frame, embedding, heading_ce })
}
