//! Recurrent-autoencoder forecasters and ConvLSTM baselines.
//!
//! Both families read a batch of `q` normalized input frames and produce
//! three future frames in one pass. Inside the graph frames are
//! `(N, C, H, W)` with `N = B * frames`, sample-major (`row = b * k + t`).

mod convlstm;
mod rae;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use convlstm::ConvLstmNet;
pub use rae::{EncodedFrames, EncodedSequence, RaeNet};

use crate::error::{Error, Result};
use crate::exogenous::EXO_DIM;
use crate::grid_codec::CHANNELS;
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::sampler::{Batch, OUTPUT_LEN};

pub const HEADING_CLASSES: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    RaeAll,
    RaeNotIn,
    RaeNotExo,
    RaeClf,
    ConvLstm,
    ConvLstmClf,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::RaeAll, Variant::RaeNotIn, Variant::RaeNotExo, Variant::RaeClf, Variant::ConvLstm, Variant::ConvLstmClf];

    pub fn is_rae(self) -> bool {
        !matches!(self, Variant::ConvLstm | Variant::ConvLstmClf)
    }

    /// `(use_input_skip, use_exogenous, use_clf_head)` implied by the variant.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::RaeAll => (true, true, false),
            Variant::RaeNotIn => (false, true, false),
            Variant::RaeNotExo => (true, false, false),
            Variant::RaeClf => (true, true, true),
            Variant::ConvLstm => (false, false, false),
            Variant::ConvLstmClf => (false, false, true),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::RaeAll => "RAE_all",
            Variant::RaeNotIn => "RAE_not_In",
            Variant::RaeNotExo => "RAE_not_Exo",
            Variant::RaeClf => "RAE_Clf",
            Variant::ConvLstm => "ConvLSTM",
            Variant::ConvLstmClf => "ConvLSTM+Clf",
        }
    }
}

/// Architecture hyperparameters. Defaults reproduce the full-size network
/// on the native 495x436 grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub canvas_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_blocks: usize,
    pub base_channels: usize,
    pub block_multipliers: Vec<usize>,
    pub dropout_rate: f64,
    pub gru_encoder_units: Vec<usize>,
    pub gru_decoder_units: Vec<usize>,
    pub convlstm_units: Vec<usize>,
    pub q: usize,
    pub use_input_skip: bool,
    pub use_exogenous: bool,
    pub use_clf_head: bool,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::for_variant(Variant::RaeAll)
    }
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let (use_input_skip, use_exogenous, use_clf_head) = variant.flags();
        ModelConfig {
            variant,
            canvas_size: 512,
            grid_h: 495,
            grid_w: 436,
            num_blocks: 6,
            base_channels: 16,
            block_multipliers: vec![1, 2, 4, 8, 8, 2],
            dropout_rate: 0.5,
            gru_encoder_units: vec![2048, 256, 128],
            gru_decoder_units: vec![128, 256, 2048],
            convlstm_units: vec![32, 64, 64],
            q: 3,
            use_input_skip,
            use_exogenous,
            use_clf_head,
            bn_momentum: 0.9,
        }
    }

    /// Small network for CPU-scale runs on a `h x w` grid: three blocks on
    /// the smallest power-of-two canvas that holds the grid.
    pub fn desk(variant: Variant, h: usize, w: usize) -> Self {
        let mut c = ModelConfig::for_variant(variant);
        c.canvas_size = h.max(w).next_power_of_two().max(8);
        c.grid_h = h;
        c.grid_w = w;
        c.num_blocks = 3;
        c.base_channels = 8;
        c.block_multipliers = vec![1, 2, 4];
        c.dropout_rate = 0.0;
        c.gru_encoder_units = vec![64, 32, 16];
        c.gru_decoder_units = vec![16, 32, 64];
        c.convlstm_units = vec![8, 8, 8];
        c
    }

    /// Switches variant and the flags that go with it.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        (self.use_input_skip, self.use_exogenous, self.use_clf_head) = variant.flags();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.variant.flags() != (self.use_input_skip, self.use_exogenous, self.use_clf_head) {
            return err(format!(
                "variant {} conflicts with flags input_skip={} exogenous={} clf_head={}",
                self.variant.label(),
                self.use_input_skip,
                self.use_exogenous,
                self.use_clf_head
            ));
        }
        if !(1..=crate::sampler::MAX_INPUT_LEN).contains(&self.q) {
            return err(format!("q={} outside [1, 12]", self.q));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return err("grid dims must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return err(format!("bn_momentum {} outside [0, 1)", self.bn_momentum));
        }
        if self.variant.is_rae() {
            if self.num_blocks == 0 || self.block_multipliers.len() != self.num_blocks {
                return err(format!(
                    "block_multipliers has {} entries for {} blocks",
                    self.block_multipliers.len(),
                    self.num_blocks
                ));
            }
            if self.base_channels == 0 || self.block_multipliers.contains(&0) {
                return err("channel widths must be positive".into());
            }
            let down = 1usize << self.num_blocks;
            if !self.canvas_size.is_power_of_two() || self.canvas_size % down != 0 {
                return err(format!(
                    "canvas {} must be a power of two divisible by 2^{}",
                    self.canvas_size, self.num_blocks
                ));
            }
            if self.grid_h > self.canvas_size || self.grid_w > self.canvas_size {
                return err(format!("grid {}x{} exceeds canvas {}", self.grid_h, self.grid_w, self.canvas_size));
            }
            if self.gru_encoder_units.is_empty() || self.gru_encoder_units.contains(&0) {
                return err("gru_encoder_units must be non-empty and positive".into());
            }
            let rev: Vec<usize> = self.gru_encoder_units.iter().rev().copied().collect();
            if rev != self.gru_decoder_units {
                return err(format!(
                    "gru_decoder_units {:?} must mirror gru_encoder_units {:?}",
                    self.gru_decoder_units, self.gru_encoder_units
                ));
            }
        } else if self.convlstm_units.is_empty() || self.convlstm_units.contains(&0) {
            return err("convlstm_units must be non-empty and positive".into());
        }
        Ok(())
    }

    /// Channel width of each encoder block.
    pub fn block_channels(&self) -> Vec<usize> {
        self.block_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    /// Spatial side of block `i`'s pre-pool activations.
    pub fn block_size(&self, i: usize) -> usize {
        self.canvas_size >> i
    }

    pub fn bottleneck_size(&self) -> usize {
        self.canvas_size >> self.num_blocks
    }

    pub fn bottleneck_len(&self) -> usize {
        let s = self.bottleneck_size();
        s * s * self.block_channels()[self.num_blocks - 1]
    }

    /// Width of the frame embedding (and of the predicted embeddings).
    pub fn embed_dim(&self) -> usize {
        self.gru_encoder_units[0]
    }

    pub fn output_channels(&self) -> usize {
        if self.use_clf_head && self.variant.is_rae() {
            2 + HEADING_CLASSES
        } else {
            CHANNELS
        }
    }
}

/// Three predicted frames and, for the autoencoders, their embeddings.
/// Frames are channel-last `(B, 3, H, W, 3)`; embeddings `(B, 3, E)`;
/// heading logits `(B, 3, H, W, 5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<f64>,
    pub embeddings: Option<Vec<f64>>,
    pub aux_heading_logits: Option<Vec<f64>>,
}

/// Ground truth for a batch: frames `(B, 3, H, W, 3)` and the embeddings
/// the shared encoder assigns to them, `(B, 3, E)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBundle {
    pub frames: Vec<f64>,
    pub embeddings: Option<Vec<f64>>,
}

/// Graph nodes produced by a forward pass. All frame-shaped nodes are
/// `(B * 3, C, H, W)` sample-major.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub frames: Var,
    pub embeddings: Option<Var>,
    pub target_embeddings: Option<Var>,
    pub heading_logits: Option<Var>,
    pub regression: Option<Var>,
}

/// Channel-last frames `(N, H, W, C)` to a `(N, C, H, W)` tensor.
pub fn to_nchw(data: &[f64], n: usize, h: usize, w: usize, c: usize) -> Tensor {
    let mut out = vec![0.0; data.len()];
    for s in 0..n {
        for i in 0..h * w {
            for ch in 0..c {
                out[(s * c + ch) * h * w + i] = data[(s * h * w + i) * c + ch];
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

/// Inverse of [`to_nchw`].
pub fn to_nhwc(t: &Tensor) -> Vec<f64> {
    let [n, c, h, w] = t.shape[..] else { panic!("to_nhwc needs a 4-d tensor") };
    let mut out = vec![0.0; t.numel()];
    for s in 0..n {
        for ch in 0..c {
            for i in 0..h * w {
                out[(s * h * w + i) * c + ch] = t.data[(s * c + ch) * h * w + i];
            }
        }
    }
    out
}

/// Parameter initializer: fan-in scaled uniform weights, zero biases.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    pub fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = (3.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store.insert_param(name, Tensor::new(shape.to_vec(), data));
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) {
        self.store.insert_param(name, Tensor::full(shape.to_vec(), v));
    }

    pub fn conv(&mut self, prefix: &str, out_ch: usize, in_ch: usize, k: usize) {
        self.weight(&format!("{prefix}.w"), &[out_ch, in_ch, k, k], in_ch * k * k);
        self.constant(&format!("{prefix}.b"), &[out_ch], 0.0);
    }

    pub fn batch_norm(&mut self, prefix: &str, ch: usize) {
        self.constant(&format!("{prefix}.gamma"), &[ch], 1.0);
        self.constant(&format!("{prefix}.beta"), &[ch], 0.0);
        self.store.insert_buffer(format!("{prefix}.mean"), Tensor::zeros([ch]));
        self.store.insert_buffer(format!("{prefix}.var"), Tensor::full([ch], 1.0));
    }

    pub fn linear(&mut self, prefix: &str, input: usize, output: usize) {
        self.weight(&format!("{prefix}.w"), &[input, output], input);
        self.constant(&format!("{prefix}.b"), &[output], 0.0);
    }

    pub fn gru(&mut self, prefix: &str, input: usize, units: usize) {
        self.weight(&format!("{prefix}.wx"), &[input, 3 * units], input);
        self.weight(&format!("{prefix}.wh"), &[units, 3 * units], units);
        self.constant(&format!("{prefix}.bx"), &[3 * units], 0.0);
        self.constant(&format!("{prefix}.bh"), &[3 * units], 0.0);
    }
}

/// How parameters were carried over by [`Model::warm_start`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WarmStart {
    pub copied: Vec<String>,
    /// Loaded into the leading input channels; the rest stay freshly
    /// initialized.
    pub widened: Vec<String>,
    pub fresh: Vec<String>,
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let mut init = Init { store: &mut params, rng: ChaCha8Rng::seed_from_u64(seed) };
        if config.variant.is_rae() {
            rae::init_params(&config, &mut init);
        } else {
            convlstm::init_params(&config, &mut init);
        }
        Ok(Model { config, params })
    }

    /// Builds the forward graph for `batch`. With `with_targets` the target
    /// frames are also encoded so the embedding loss can be formed.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, with_targets: bool) -> Result<ForwardVars> {
        self.check_batch(batch)?;
        if self.config.variant.is_rae() {
            RaeNet::new(&self.config, &self.params).forward(g, batch, with_targets)
        } else {
            ConvLstmNet::new(&self.config, &self.params).forward(g, batch)
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.height != self.config.grid_h || batch.width != self.config.grid_w {
            return Err(Error::Shape(format!(
                "batch grid {}x{} vs model grid {}x{}",
                batch.height, batch.width, self.config.grid_h, self.config.grid_w
            )));
        }
        if batch.q != self.config.q {
            return Err(Error::Shape(format!("batch q={} vs model q={}", batch.q, self.config.q)));
        }
        if batch.exo.len() != batch.size() * (batch.q + OUTPUT_LEN) * EXO_DIM {
            return Err(Error::Shape("exogenous block has the wrong length".into()));
        }
        Ok(())
    }

    /// Inference pass: running batch-norm statistics, no dropout.
    pub fn predict(&self, batch: &Batch) -> Result<PredictionBundle> {
        let mut g = Graph::new(false, 0);
        let out = self.forward(&mut g, batch, false)?;
        Ok(self.bundle(&g, &out, batch))
    }

    pub(crate) fn bundle(&self, g: &Graph, out: &ForwardVars, batch: &Batch) -> PredictionBundle {
        PredictionBundle {
            batch: batch.size(),
            height: batch.height,
            width: batch.width,
            frames: to_nhwc(g.value(out.frames)),
            embeddings: out.embeddings.map(|e| g.value(e).data.clone()),
            aux_heading_logits: out.heading_logits.map(|l| to_nhwc(g.value(l))),
        }
    }

    /// Encoder embeddings of the batch's target frames, `(B, 3, E)`.
    pub fn target_embeddings(&self, batch: &Batch) -> Result<Option<Vec<f64>>> {
        if !self.config.variant.is_rae() {
            return Ok(None);
        }
        let mut g = Graph::new(false, 0);
        let out = self.forward(&mut g, batch, true)?;
        Ok(out.target_embeddings.map(|e| g.value(e).data.clone()))
    }

    /// Loads parameters from another model's store. Tensors with the same
    /// shape are copied; tensors that only grew along the input-channel axis
    /// get the old values in their leading channels; anything else keeps its
    /// fresh initialization.
    pub fn warm_start(&mut self, source: &ParamStore) -> WarmStart {
        let mut report = WarmStart::default();
        let names: Vec<String> = self.params.params().map(|(k, _)| k.clone()).collect();
        for name in names {
            let dst = self.params.param_mut(&name).unwrap();
            match source.param(&name) {
                Some(src) if src.shape == dst.shape => {
                    dst.data.copy_from_slice(&src.data);
                    report.copied.push(name);
                }
                Some(src) if widened_input(&src.shape, &dst.shape) => {
                    let (o, ci_new, ci_old) = (dst.shape[0], dst.shape[1], src.shape[1]);
                    let inner: usize = dst.shape[2..].iter().product();
                    for oc in 0..o {
                        let d = (oc * ci_new) * inner;
                        let s = (oc * ci_old) * inner;
                        dst.data[d..d + ci_old * inner].copy_from_slice(&src.data[s..s + ci_old * inner]);
                    }
                    report.widened.push(name);
                }
                _ => report.fresh.push(name),
            }
        }
        let buffers: Vec<(String, Tensor)> = source.buffers().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (name, t) in buffers {
            if let Some(dst) = self.params.buffer_mut(&name) {
                if dst.shape == t.shape {
                    *dst = t;
                }
            }
        }
        report
    }
}

fn widened_input(old: &[usize], new: &[usize]) -> bool {
    old.len() == 4 && new.len() == 4 && old[0] == new[0] && old[2..] == new[2..] && old[1] < new[1]
}

/// Something that turns a batch into three predicted frames.
pub trait Predictor {
    fn input_len(&self) -> usize;
    fn predict_batch(&self, batch: &Batch) -> Result<PredictionBundle>;
}

impl Predictor for Model {
    fn input_len(&self) -> usize {
        self.config.q
    }

    fn predict_batch(&self, batch: &Batch) -> Result<PredictionBundle> {
        self.predict(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_the_full_size_network() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.block_channels(), vec![16, 32, 64, 128, 128, 32]);
        assert_eq!(c.bottleneck_size(), 8);
        assert_eq!(c.bottleneck_len(), 2048);
        assert_eq!(c.embed_dim(), 2048);
    }

    #[test]
    fn config_errors() {
        let mut c = ModelConfig::default();
        c.canvas_size = 500;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.use_exogenous = false;
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("conflicts")));
        let mut c = ModelConfig::default();
        c.gru_decoder_units = vec![128, 256, 2028];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.q = 13;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.block_multipliers.pop();
        assert!(c.validate().is_err());
        assert!(ModelConfig::for_variant(Variant::ConvLstmClf).validate().is_ok());
    }

    #[test]
    fn layout_round_trip() {
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(f64::from).collect();
        let t = to_nchw(&data, 2, 3, 4, 5);
        assert_eq!(t.shape, vec![2, 5, 3, 4]);
        assert_eq!(t.data[(1 * 5 + 2) * 12 + 7], data[(1 * 12 + 7) * 5 + 2]);
        assert_eq!(to_nhwc(&t), data);
    }
}
