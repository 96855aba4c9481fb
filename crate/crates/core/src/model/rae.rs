use super::{to_nchw, ForwardVars, Init, ModelConfig, HEADING_CLASSES};
use crate::error::{Error, Result};
use crate::exogenous::EXO_DIM;
use crate::grid_codec::CHANNELS;
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::sampler::{Batch, OUTPUT_LEN};

pub(super) fn init_params(cfg: &ModelConfig, init: &mut Init) {
    let ch = cfg.block_channels();
    let mut in_ch = CHANNELS;
    for (i, &c) in ch.iter().enumerate() {
        init.conv(&format!("enc{i}.conv0"), c, in_ch, 3);
        init.batch_norm(&format!("enc{i}.bn0"), c);
        init.conv(&format!("enc{i}.conv1"), c, c, 3);
        init.batch_norm(&format!("enc{i}.bn1"), c);
        in_ch = c;
    }
    let exo = if cfg.use_exogenous { EXO_DIM } else { 0 };
    let e = cfg.embed_dim();
    init.linear("enc.fc", cfg.bottleneck_len() + exo, e);

    let mut input = e;
    for (l, &u) in cfg.gru_encoder_units.iter().enumerate() {
        init.gru(&format!("genc{l}"), input, u);
        input = u;
    }
    let mut input = e;
    for (l, &u) in cfg.gru_decoder_units.iter().enumerate() {
        init.gru(&format!("gdec{l}"), input, u);
        input = u;
    }

    init.linear("dec.fc", e, cfg.bottleneck_len());
    let mut in_ch = ch[cfg.num_blocks - 1];
    for j in (0..cfg.num_blocks).rev() {
        let c = ch[j];
        init.weight(&format!("dec{j}.up.w"), &[in_ch, c, 2, 2], in_ch * 4);
        init.constant(&format!("dec{j}.up.b"), &[c], 0.0);
        init.conv(&format!("dec{j}.conv0"), c, 2 * c, 3);
        init.batch_norm(&format!("dec{j}.bn0"), c);
        init.conv(&format!("dec{j}.conv1"), c, c, 3);
        init.batch_norm(&format!("dec{j}.bn1"), c);
        in_ch = c;
    }
    let raw = if cfg.use_input_skip { CHANNELS } else { 0 };
    init.conv("out.conv", cfg.output_channels(), ch[0] + raw, 3);
    if cfg.use_clf_head {
        init.conv("out.fuse", CHANNELS, 2 + HEADING_CLASSES, 1);
    }
}

/// Result of encoding a stack of frames with the shared encoder.
#[derive(Clone, Debug)]
pub struct EncodedFrames {
    /// `(N, E)`.
    pub embedding: Var,
    /// Pre-pool activations per block, `(N, c_i, S / 2^i, S / 2^i)`.
    pub skips: Vec<Var>,
    /// The frames upsampled to the canvas, `(N, 3, S, S)`.
    pub canvas: Var,
}

/// Final recurrent state plus what the decoder needs from the last input.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    /// One `(B, units_l)` state per encoder layer.
    pub states: Vec<Var>,
    /// Embedding of the last input frame, `(B, E)`.
    pub last_embedding: Var,
    pub skips: Vec<Var>,
    /// Raw last frame on the canvas, present iff `use_input_skip`.
    pub raw_frame: Option<Var>,
}

/// Graph builder for the recurrent autoencoder.
pub struct RaeNet<'a> {
    cfg: &'a ModelConfig,
    params: &'a ParamStore,
}

impl<'a> RaeNet<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamStore) -> Self {
        RaeNet { cfg, params }
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        g.param(self.params, name)
    }

    fn conv_bn_relu(&self, g: &mut Graph, x: Var, conv: &str, bn: &str) -> Var {
        let w = self.p(g, &format!("{conv}.w"));
        let b = self.p(g, &format!("{conv}.b"));
        let y = g.conv2d(x, w);
        let y = g.add_axis1(y, b);
        let y = g.batch_norm(y, self.params, bn);
        g.relu(y)
    }

    fn dense(&self, g: &mut Graph, x: Var, prefix: &str) -> Var {
        let w = self.p(g, &format!("{prefix}.w"));
        let b = self.p(g, &format!("{prefix}.b"));
        g.linear(x, w, b)
    }

    /// Encodes native-resolution frames `(N, 3, H, W)`; `exo` is `(N, 21)`
    /// and ignored unless the model uses exogenous inputs.
    pub fn encode_frame(&self, g: &mut Graph, frames: Var, exo: Option<Var>) -> Result<EncodedFrames> {
        let s = self.cfg.canvas_size;
        if s % (1 << self.cfg.num_blocks) != 0 {
            return Err(Error::Config(format!("canvas {s} not divisible by 2^{}", self.cfg.num_blocks)));
        }
        let canvas = g.resize_bilinear(frames, s, s);
        let mut x = canvas;
        let mut skips = Vec::with_capacity(self.cfg.num_blocks);
        for i in 0..self.cfg.num_blocks {
            x = self.conv_bn_relu(g, x, &format!("enc{i}.conv0"), &format!("enc{i}.bn0"));
            x = self.conv_bn_relu(g, x, &format!("enc{i}.conv1"), &format!("enc{i}.bn1"));
            skips.push(x);
            x = g.max_pool2(x);
            x = g.dropout(x, self.cfg.dropout_rate);
        }
        let n = g.shape(x)[0];
        let mut flat = g.reshape(x, &[n, self.cfg.bottleneck_len()]);
        if self.cfg.use_exogenous {
            let exo = exo.ok_or_else(|| Error::Shape("exogenous inputs required".into()))?;
            flat = g.concat1(&[flat, exo]);
        }
        let e = self.dense(g, flat, "enc.fc");
        let embedding = g.tanh(e);
        Ok(EncodedFrames { embedding, skips, canvas })
    }

    fn gru_step(&self, g: &mut Graph, prefix: &str, x: Var, h: Var) -> Var {
        let u = g.shape(h)[1];
        let wx = self.p(g, &format!("{prefix}.wx"));
        let wh = self.p(g, &format!("{prefix}.wh"));
        let bx = self.p(g, &format!("{prefix}.bx"));
        let bh = self.p(g, &format!("{prefix}.bh"));
        let xw = g.linear(x, wx, bx);
        let hw = g.linear(h, wh, bh);
        let (xr, xz, xn) = (g.slice1(xw, 0, u), g.slice1(xw, u, u), g.slice1(xw, 2 * u, u));
        let (hr, hz, hn) = (g.slice1(hw, 0, u), g.slice1(hw, u, u), g.slice1(hw, 2 * u, u));
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn);
        let n = g.add(xn, rn);
        let n = g.tanh(n);
        let d = g.sub(h, n);
        let zd = g.mul(z, d);
        g.add(n, zd)
    }

    /// Encodes `inputs` `(B * q, 3, H, W)` (sample-major) and runs the
    /// recurrent encoder over the q embeddings.
    pub fn encode_sequence(&self, g: &mut Graph, inputs: Var, exo: Option<Var>, b: usize) -> Result<EncodedSequence> {
        let q = g.shape(inputs)[0] / b;
        let enc = self.encode_frame(g, inputs, exo)?;
        let mut states: Vec<Var> = self
            .cfg
            .gru_encoder_units
            .iter()
            .map(|&u| g.input(Tensor::zeros([b, u])))
            .collect();
        for t in 0..q {
            let rows: Vec<usize> = (0..b).map(|s| s * q + t).collect();
            let mut x = g.gather0(enc.embedding, &rows);
            for (l, h) in states.iter_mut().enumerate() {
                *h = self.gru_step(g, &format!("genc{l}"), x, *h);
                x = *h;
            }
        }
        let last: Vec<usize> = (0..b).map(|s| s * q + q - 1).collect();
        let last_embedding = g.gather0(enc.embedding, &last);
        let skips = enc.skips.iter().map(|&s| g.gather0(s, &last)).collect();
        let raw_frame = self.cfg.use_input_skip.then(|| g.gather0(enc.canvas, &last));
        Ok(EncodedSequence { states, last_embedding, skips, raw_frame })
    }

    /// Unrolls the recurrent decoder three steps from the encoder state.
    /// Decoder layer `l` starts from encoder layer `L - 1 - l`. Returns
    /// `(B * 3, E)` sample-major.
    pub fn predict_embeddings(&self, g: &mut Graph, seq: &EncodedSequence) -> Var {
        let b = g.shape(seq.last_embedding)[0];
        let mut states: Vec<Var> = seq.states.iter().rev().copied().collect();
        let mut x = seq.last_embedding;
        let mut steps = Vec::with_capacity(OUTPUT_LEN);
        for _ in 0..OUTPUT_LEN {
            for (l, h) in states.iter_mut().enumerate() {
                *h = self.gru_step(g, &format!("gdec{l}"), x, *h);
                x = *h;
            }
            steps.push(x);
        }
        let stacked = g.concat0(&steps);
        let rows: Vec<usize> = (0..b).flat_map(|s| (0..OUTPUT_LEN).map(move |k| k * b + s)).collect();
        g.gather0(stacked, &rows)
    }

    /// Decodes `(B * k, E)` embeddings against the skip stack of each
    /// sample's last input frame. Returns the pre-fusion output map
    /// `(B * k, out_channels, H, W)`.
    pub fn decode_frames(&self, g: &mut Graph, emb: Var, seq: &EncodedSequence) -> Result<Var> {
        let cfg = self.cfg;
        let n = g.shape(emb)[0];
        let b = g.shape(seq.last_embedding)[0];
        if n % b != 0 {
            return Err(Error::Shape(format!("{n} embeddings for {b} samples")));
        }
        let k = n / b;
        let rep: Vec<usize> = (0..b).flat_map(|s| std::iter::repeat_n(s, k)).collect();
        let ch = cfg.block_channels();
        let bs = cfg.bottleneck_size();
        let x = self.dense(g, emb, "dec.fc");
        let x = g.relu(x);
        let mut x = g.reshape(x, &[n, ch[cfg.num_blocks - 1], bs, bs]);
        for j in (0..cfg.num_blocks).rev() {
            let w = self.p(g, &format!("dec{j}.up.w"));
            let bias = self.p(g, &format!("dec{j}.up.b"));
            x = g.conv_transpose2(x, w);
            x = g.add_axis1(x, bias);
            let skip = g.gather0(seq.skips[j], &rep);
            if g.shape(skip)[1..] != g.shape(x)[1..] {
                return Err(Error::Shape(format!(
                    "skip {:?} vs decoder {:?} at block {j}",
                    g.shape(skip),
                    g.shape(x)
                )));
            }
            x = g.concat1(&[x, skip]);
            x = self.conv_bn_relu(g, x, &format!("dec{j}.conv0"), &format!("dec{j}.bn0"));
            x = self.conv_bn_relu(g, x, &format!("dec{j}.conv1"), &format!("dec{j}.bn1"));
            x = g.dropout(x, cfg.dropout_rate);
        }
        if let Some(raw) = seq.raw_frame {
            let raw = g.gather0(raw, &rep);
            x = g.concat1(&[x, raw]);
        }
        let x = g.crop(x, cfg.grid_h, cfg.grid_w);
        let w = self.p(g, "out.conv.w");
        let bias = self.p(g, "out.conv.b");
        let y = g.conv2d(x, w);
        let y = g.add_axis1(y, bias);
        Ok(g.relu(y))
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch, with_targets: bool) -> Result<ForwardVars> {
        let cfg = self.cfg;
        let b = batch.size();
        let (h, w, q) = (batch.height, batch.width, batch.q);
        let inputs = g.input(to_nchw(&batch.inputs, b * q, h, w, CHANNELS));
        let (exo_in, exo_out) = if cfg.use_exogenous {
            let (xi, xo) = split_exo(batch);
            (Some(g.input(xi)), Some(g.input(xo)))
        } else {
            (None, None)
        };
        let seq = self.encode_sequence(g, inputs, exo_in, b)?;
        let emb = self.predict_embeddings(g, &seq);
        let out = self.decode_frames(g, emb, &seq)?;
        let (frames, heading_logits, regression) = if cfg.use_clf_head {
            let reg = g.slice1(out, 0, 2);
            let logits = g.slice1(out, 2, HEADING_CLASSES);
            let probs = g.softmax1(logits);
            let fused = g.concat1(&[reg, probs]);
            let fw = self.p(g, "out.fuse.w");
            let fb = self.p(g, "out.fuse.b");
            let y = g.conv2d(fused, fw);
            let y = g.add_axis1(y, fb);
            (g.relu(y), Some(logits), Some(reg))
        } else {
            (out, None, None)
        };
        let target_embeddings = if with_targets {
            let targets = g.input(to_nchw(&batch.targets, b * OUTPUT_LEN, h, w, CHANNELS));
            Some(self.encode_frame(g, targets, exo_out)?.embedding)
        } else {
            None
        };
        Ok(ForwardVars { frames, embeddings: Some(emb), target_embeddings, heading_logits, regression })
    }
}

/// Splits the per-frame exogenous block into `(B * q, 21)` for inputs and
/// `(B * 3, 21)` for targets, both sample-major.
pub(crate) fn split_exo(batch: &Batch) -> (Tensor, Tensor) {
    let (b, q) = (batch.size(), batch.q);
    let mut xi = Vec::with_capacity(b * q * EXO_DIM);
    let mut xo = Vec::with_capacity(b * OUTPUT_LEN * EXO_DIM);
    for s in 0..b {
        for k in 0..q {
            xi.extend_from_slice(batch.exo_frame(s, k));
        }
        for k in 0..OUTPUT_LEN {
            xo.extend_from_slice(batch.exo_frame(s, q + k));
        }
    }
    (Tensor::new([b * q, EXO_DIM], xi), Tensor::new([b * OUTPUT_LEN, EXO_DIM], xo))
}
