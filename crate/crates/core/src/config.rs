//! Run configuration.
//!
//! One TOML document drives every subcommand. All sections and fields are
//! optional; missing values take the defaults below, unknown keys are
//! rejected.
//!
//! ```toml
//! [data]
//! city = "synthetic"     # name written to the manifest and reports
//! height = 32            # grid rows for gen-data
//! width = 32             # grid columns for gen-data
//! bins_per_day = 288
//! val_days = 1           # trailing generated days marked as validation
//!
//! [data.synth]           # synthetic world, see SynthConfig
//! seed = 0
//! num_days = 4
//! drift_cells_per_bin = 0.5
//! noise_level = 0.2
//! blobs_per_day = 3
//! max_probes_per_cell = 48.0
//! week_offset = 0
//! rush_hours = [{ peak_bin = 96.0, width_bins = 12.0 }, { peak_bin = 210.0, width_bins = 15.0 }]
//!
//! [codec]
//! volume_cap_min = 1
//! volume_cap_max = 64
//! speed_cap_max = 120.0
//!
//! [sampler]
//! strategy = "non_overlapping"   # or "all_slots", "like_test"
//! q = 3
//! batch_size = 8
//! workers = 0                    # 0 = serial, deterministic
//! prefetch_depth = 4
//!
//! [exogenous]
//! temp_c = [-20.0, 40.0]
//! precip_mm = [0.0, 10.0]
//! wind_kmh = [0.0, 80.0]
//!
//! [model]
//! preset = "desk"        # or "full" (canvas 512, 6 blocks)
//! variant = "rae_all"    # rae_not_in, rae_not_exo, rae_clf, conv_lstm, conv_lstm_clf
//! # any ModelConfig field except q and the grid may be set here to
//! # override the preset, e.g. base_channels = 16
//!
//! [loss]
//! alpha = 0.5
//! beta = 0.5
//! clf_weight = 1.0
//! stop_target_grad = false
//!
//! [train]
//! epochs = 1
//! learning_rate = 1e-3
//! seed = 0
//! # init_checkpoint = "runs/rae_not_in/checkpoints/epoch_010.t4ck"
//!
//! [eval]
//! profile = "moscow"     # or "istanbul", "berlin"
//! # block_start_bins = [57, 114, 174, 222, 258]   # overrides the profile
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exogenous::WeatherScaling;
use crate::grid_codec::{CodecParams, GridSpec};
use crate::model::{ModelConfig, Variant};
use crate::objectives::LossWeights;
use crate::sampler::{check_input_len, Strategy};
use crate::synth_world::SynthConfig;
use crate::train::{EvalProtocol, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub codec: CodecParams,
    pub sampler: SamplerSection,
    pub exogenous: WeatherScaling,
    pub model: ModelSection,
    pub loss: LossWeights,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub city: String,
    pub height: usize,
    pub width: usize,
    pub bins_per_day: usize,
    pub val_days: u32,
    pub synth: SynthConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            city: "synthetic".into(),
            height: 32,
            width: 32,
            bins_per_day: 288,
            val_days: 1,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub strategy: Strategy,
    pub q: usize,
    pub batch_size: usize,
    pub workers: usize,
    pub prefetch_depth: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { strategy: Strategy::NonOverlapping, q: 3, batch_size: 8, workers: 0, prefetch_depth: 4 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

/// Preset plus per-field overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    pub variant: Variant,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub canvas_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_blocks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_multipliers: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gru_encoder_units: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gru_decoder_units: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convlstm_units: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_input_skip: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_exogenous: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_clf_head: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bn_momentum: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: u32,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { epochs: 1, learning_rate: 1e-3, seed: 0, init_checkpoint: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub profile: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_start_bins: Option<Vec<usize>>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { profile: "moscow".into(), block_start_bins: None }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_spec()?;
        self.data.synth.validate()?;
        if self.data.val_days >= self.data.synth.num_days {
            return Err(Error::Config(format!(
                "val_days {} leaves no training day out of {}",
                self.data.val_days, self.data.synth.num_days
            )));
        }
        self.codec.validate()?;
        check_input_len(self.sampler.q).map_err(|e| Error::Config(e.to_string()))?;
        if self.sampler.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.exogenous.validate()?;
        self.loss.validate()?;
        self.model_config(self.data.height, self.data.width)?;
        self.train_config(self.model_config(self.data.height, self.data.width)?).validate()?;
        self.eval_protocol()?;
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.data.height, self.data.width, self.data.bins_per_day).map_err(|e| Error::Config(e.to_string()))
    }

    /// Model for a `grid_h x grid_w` city: the preset with section
    /// overrides applied and `q` taken from the sampler.
    pub fn model_config(&self, grid_h: usize, grid_w: usize) -> Result<ModelConfig> {
        let m = &self.model;
        let mut c = match m.preset {
            Preset::Desk => ModelConfig::desk(m.variant, grid_h, grid_w),
            Preset::Full => {
                let mut c = ModelConfig::for_variant(m.variant);
                c.grid_h = grid_h;
                c.grid_w = grid_w;
                c
            }
        };
        c.q = self.sampler.q;
        if let Some(v) = m.canvas_size {
            c.canvas_size = v;
        }
        if let Some(v) = m.num_blocks {
            c.num_blocks = v;
        }
        if let Some(v) = m.base_channels {
            c.base_channels = v;
        }
        if let Some(v) = &m.block_multipliers {
            c.block_multipliers = v.clone();
        }
        if let Some(v) = m.dropout_rate {
            c.dropout_rate = v;
        }
        if let Some(v) = &m.gru_encoder_units {
            c.gru_encoder_units = v.clone();
        }
        if let Some(v) = &m.gru_decoder_units {
            c.gru_decoder_units = v.clone();
        }
        if let Some(v) = &m.convlstm_units {
            c.convlstm_units = v.clone();
        }
        if let Some(v) = m.use_input_skip {
            c.use_input_skip = v;
        }
        if let Some(v) = m.use_exogenous {
            c.use_exogenous = v;
        }
        if let Some(v) = m.use_clf_head {
            c.use_clf_head = v;
        }
        if let Some(v) = m.bn_momentum {
            c.bn_momentum = v;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self, model: ModelConfig) -> TrainConfig {
        let mut t = TrainConfig::new(model);
        t.strategy = self.sampler.strategy;
        t.batch_size = self.sampler.batch_size;
        t.workers = self.sampler.workers;
        t.prefetch_depth = self.sampler.prefetch_depth;
        t.epochs = self.train.epochs;
        t.learning_rate = self.train.learning_rate;
        t.seed = self.train.seed;
        t.loss = self.loss;
        t.init_checkpoint = self.train.init_checkpoint.clone();
        if let Ok(p) = self.eval_protocol() {
            t.test_bins = p.block_start_bins;
        }
        t
    }

    pub fn eval_protocol(&self) -> Result<EvalProtocol> {
        match &self.eval.block_start_bins {
            Some(bins) => Ok(EvalProtocol::custom(bins.clone())),
            None => EvalProtocol::for_city(&self.eval.profile),
        }
    }

    /// This config with every model override resolved for a
    /// `grid_h x grid_w` city, so that re-running from it needs no preset
    /// knowledge.
    pub fn effective(&self, grid_h: usize, grid_w: usize) -> Result<RunConfig> {
        let c = self.model_config(grid_h, grid_w)?;
        let mut out = self.clone();
        out.model = ModelSection {
            preset: self.model.preset,
            variant: c.variant,
            canvas_size: Some(c.canvas_size),
            num_blocks: Some(c.num_blocks),
            base_channels: Some(c.base_channels),
            block_multipliers: Some(c.block_multipliers),
            dropout_rate: Some(c.dropout_rate),
            gru_encoder_units: Some(c.gru_encoder_units),
            gru_decoder_units: Some(c.gru_decoder_units),
            convlstm_units: Some(c.convlstm_units),
            use_input_skip: Some(c.use_input_skip),
            use_exogenous: Some(c.use_exogenous),
            use_clf_head: Some(c.use_clf_head),
            bn_momentum: Some(c.bn_momentum),
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
        let m = c.model_config(32, 32).unwrap();
        assert_eq!(m, ModelConfig::desk(Variant::RaeAll, 32, 32));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in ["[model]\nvarient = \"rae_all\"", "bogus = 1", "[data.synth]\nseeed = 3"] {
            assert!(matches!(RunConfig::from_toml_str(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn bad_q_is_a_config_error() {
        let e = RunConfig::from_toml_str("[sampler]\nq = 13").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn overrides_and_echo() {
        let doc = "[model]\nvariant = \"rae_not_in\"\nbase_channels = 4\n[sampler]\nq = 5\n[eval]\nprofile = \"berlin\"";
        let c = RunConfig::from_toml_str(doc).unwrap();
        let m = c.model_config(20, 24).unwrap();
        assert_eq!((m.base_channels, m.q, m.use_input_skip), (4, 5, false));
        assert_eq!(c.train_config(m.clone()).test_bins, crate::train::BERLIN_BINS);
        let eff = c.effective(20, 24).unwrap();
        let back = RunConfig::from_toml_str(&eff.to_toml().unwrap()).unwrap();
        assert_eq!(back, eff);
        assert_eq!(back.model_config(20, 24).unwrap(), m);
    }

    #[test]
    fn flag_conflicts_are_rejected() {
        let doc = "[model]\nvariant = \"conv_lstm\"\nuse_input_skip = true";
        assert!(RunConfig::from_toml_str(doc).is_err());
        assert!(RunConfig::from_toml_str("[data]\nval_days = 4").is_err());
        assert!(RunConfig::from_toml_str("[eval]\nprofile = \"paris\"").is_err());
    }
}
