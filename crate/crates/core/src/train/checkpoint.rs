//! Checkpoint container.
//!
//! Layout: magic `T4CK`, `u32` LE length of a JSON header, the header, then
//! every tensor listed in the header as raw little-endian `f64`, in order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Adam, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"T4CK";
const FORMAT_VERSION: u32 = 1;

/// Everything needed to continue training or to run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Adam,
    /// Epochs completed in this run.
    pub epoch: u32,
    /// Epochs of the checkpoint this run was warm-started from.
    pub init_epochs: u32,
    pub history: Vec<EpochRecord>,
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    /// Epoch count in "X+Y" form for fine-tuned runs.
    pub fn epochs_label(&self) -> String {
        if self.init_epochs > 0 {
            format!("{}+{}", self.init_epochs, self.epoch)
        } else {
            self.epoch.to_string()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    epoch: u32,
    init_epochs: u32,
    history: Vec<EpochRecord>,
    adam: AdamMeta,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload: Vec<&[f64]> = Vec::new();
    for (name, t) in ck.model.params.params() {
        entries.push(TensorEntry { name: name.clone(), kind: TensorKind::Param, shape: t.shape.clone() });
        payload.push(&t.data);
    }
    for (name, t) in ck.model.params.buffers() {
        entries.push(TensorEntry { name: name.clone(), kind: TensorKind::Buffer, shape: t.shape.clone() });
        payload.push(&t.data);
    }
    for (kind, map) in [(TensorKind::AdamM, &ck.optimizer.m), (TensorKind::AdamV, &ck.optimizer.v)] {
        for (name, v) in map {
            entries.push(TensorEntry { name: name.clone(), kind, shape: vec![v.len()] });
            payload.push(v);
        }
    }
    let o = &ck.optimizer;
    let header = Header {
        format_version: FORMAT_VERSION,
        model: ck.model.config.clone(),
        train: ck.train_config.clone(),
        epoch: ck.epoch,
        init_epochs: ck.init_epochs,
        history: ck.history.clone(),
        adam: AdamMeta { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps, step: o.step },
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
    let n: usize = payload.iter().map(|p| p.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * n);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in payload {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", "not a checkpoint file"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let json = bytes.get(8..8 + len).ok_or_else(|| Error::format("header", "truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::format("header", e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format("version", format!("unsupported version {}", header.format_version)));
    }
    header.model.validate()?;
    let mut rest = &bytes[8 + len..];
    let mut params = ParamStore::default();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if rest.len() < 8 * n {
            return Err(Error::format("payload", format!("tensor {} truncated", e.name)));
        }
        let data: Vec<f64> = rest[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        rest = &rest[8 * n..];
        match e.kind {
            TensorKind::Param => params.insert_param(e.name, Tensor::new(e.shape, data)),
            TensorKind::Buffer => params.insert_buffer(e.name, Tensor::new(e.shape, data)),
            TensorKind::AdamM => {
                m.insert(e.name, data);
            }
            TensorKind::AdamV => {
                v.insert(e.name, data);
            }
        }
    }
    if !rest.is_empty() {
        return Err(Error::format("payload", format!("{} trailing bytes", rest.len())));
    }
    let fresh = Model::new(header.model.clone(), 0)?;
    for (name, t) in fresh.params.params() {
        match params.param(name) {
            Some(p) if p.shape == t.shape => {}
            _ => return Err(Error::format("payload", format!("parameter {name} missing or misshapen"))),
        }
    }
    let a = header.adam;
    let optimizer = Adam { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step, m, v };
    Ok(Checkpoint {
        model: Model { config: header.model, params },
        optimizer,
        epoch: header.epoch,
        init_epochs: header.init_epochs,
        history: header.history,
        train_config: header.train,
    })
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn small() -> Model {
        let mut c = ModelConfig::for_variant(Variant::RaeClf);
        c.canvas_size = 16;
        c.grid_h = 12;
        c.grid_w = 16;
        c.num_blocks = 2;
        c.base_channels = 2;
        c.block_multipliers = vec![1, 2];
        c.gru_encoder_units = vec![6, 4];
        c.gru_decoder_units = vec![4, 6];
        Model::new(c, 9).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let model = small();
        let mut opt = Adam::new(1e-3);
        let grads: BTreeMap<String, Tensor> =
            model.params.params().map(|(k, t)| (k.clone(), Tensor::full(t.shape.clone(), 0.1))).collect();
        let mut m2 = model.clone();
        opt.update(&mut m2.params, &grads);
        let ck = Checkpoint {
            model: m2,
            optimizer: opt,
            epoch: 3,
            init_epochs: 10,
            history: vec![EpochRecord { epoch: 1, train_loss: 0.5, train_mse: 0.1, val_mse: Some(0.2), heading_acc: Some(0.9) }],
            train_config: None,
        };
        let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.epochs_label(), "10+3");
    }

    #[test]
    fn corrupt_files_name_the_field() {
        let ck = Checkpoint {
            model: small(),
            optimizer: Adam::new(1e-3),
            epoch: 0,
            init_epochs: 0,
            history: vec![],
            train_config: None,
        };
        let bytes = encode_checkpoint(&ck).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format { field: "magic", .. })));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format { field: "payload", .. })));
        assert!(matches!(decode_checkpoint(&bytes[..20]), Err(Error::Format { field: "header", .. })));
    }

    #[test]
    fn atomic_save_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.t4ck");
        let ck = Checkpoint {
            model: small(),
            optimizer: Adam::new(1e-3),
            epoch: 0,
            init_epochs: 0,
            history: vec![],
            train_config: None,
        };
        save_checkpoint(&ck, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
