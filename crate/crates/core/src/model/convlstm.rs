use super::{to_nchw, ForwardVars, Init, ModelConfig, HEADING_CLASSES};
use crate::error::Result;
use crate::grid_codec::CHANNELS;
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::sampler::{Batch, OUTPUT_LEN};

/// Layer widths: the configured tanh layers plus the 3-unit output layer.
fn layer_units(cfg: &ModelConfig) -> Vec<usize> {
    let mut u = cfg.convlstm_units.clone();
    u.push(CHANNELS);
    u
}

pub(super) fn init_params(cfg: &ModelConfig, init: &mut Init) {
    let mut input = CHANNELS;
    for (l, &u) in layer_units(cfg).iter().enumerate() {
        init.conv(&format!("cl{l}"), 4 * u, input + u, 3);
        // forget gate bias
        let b = init.store.param_mut(&format!("cl{l}.b")).unwrap();
        b.data[u..2 * u].fill(1.0);
        input = u;
    }
    if cfg.use_clf_head {
        init.conv("cl.clf", HEADING_CLASSES, *cfg.convlstm_units.last().unwrap(), 1);
    }
}

/// Graph builder for the convolutional LSTM baseline.
pub struct ConvLstmNet<'a> {
    cfg: &'a ModelConfig,
    params: &'a ParamStore,
}

struct Cell {
    h: Var,
    c: Var,
}

impl<'a> ConvLstmNet<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamStore) -> Self {
        ConvLstmNet { cfg, params }
    }

    fn cell(&self, g: &mut Graph, l: usize, x: Var, st: &Cell, relu: bool) -> Cell {
        let u = g.shape(st.h)[1];
        let w = g.param(self.params, &format!("cl{l}.w"));
        let b = g.param(self.params, &format!("cl{l}.b"));
        let xh = g.concat1(&[x, st.h]);
        let z = g.conv2d(xh, w);
        let z = g.add_axis1(z, b);
        let act = |g: &mut Graph, v: Var| if relu { g.relu(v) } else { g.tanh(v) };
        let i = g.slice1(z, 0, u);
        let i = g.sigmoid(i);
        let f = g.slice1(z, u, u);
        let f = g.sigmoid(f);
        let gg = g.slice1(z, 2 * u, u);
        let gg = act(g, gg);
        let o = g.slice1(z, 3 * u, u);
        let o = g.sigmoid(o);
        let fc = g.mul(f, st.c);
        let ig = g.mul(i, gg);
        let c = g.add(fc, ig);
        let ac = act(g, c);
        let h = g.mul(o, ac);
        Cell { h, c }
    }

    /// One pass through the layer stack; returns `(output, last tanh layer)`.
    fn step(&self, g: &mut Graph, x: Var, cells: &mut [Cell]) -> (Var, Var) {
        let last = cells.len() - 1;
        let mut x = x;
        let mut feat = x;
        for (l, st) in cells.iter_mut().enumerate() {
            *st = self.cell(g, l, x, st, l == last);
            if l + 1 == last {
                feat = st.h;
            }
            x = st.h;
        }
        (x, feat)
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<ForwardVars> {
        let b = batch.size();
        let (h, w, q) = (batch.height, batch.width, batch.q);
        let inputs = g.input(to_nchw(&batch.inputs, b * q, h, w, CHANNELS));
        let mut cells: Vec<Cell> = layer_units(self.cfg)
            .iter()
            .map(|&u| Cell { h: g.input(Tensor::zeros([b, u, h, w])), c: g.input(Tensor::zeros([b, u, h, w])) })
            .collect();
        let mut out = None;
        for t in 0..q {
            let rows: Vec<usize> = (0..b).map(|s| s * q + t).collect();
            let x = g.gather0(inputs, &rows);
            out = Some(self.step(g, x, &mut cells));
        }
        let mut outs = vec![out.unwrap()];
        for _ in 1..OUTPUT_LEN {
            let prev = outs.last().unwrap().0;
            outs.push(self.step(g, prev, &mut cells));
        }
        let rows: Vec<usize> = (0..b).flat_map(|s| (0..OUTPUT_LEN).map(move |k| k * b + s)).collect();
        let frames: Vec<Var> = outs.iter().map(|o| o.0).collect();
        let frames = g.concat0(&frames);
        let frames = g.gather0(frames, &rows);
        let heading_logits = if self.cfg.use_clf_head {
            let feats: Vec<Var> = outs.iter().map(|o| o.1).collect();
            let feats = g.concat0(&feats);
            let feats = g.gather0(feats, &rows);
            let cw = g.param(self.params, "cl.clf.w");
            let cb = g.param(self.params, "cl.clf.b");
            let y = g.conv2d(feats, cw);
            Some(g.add_axis1(y, cb))
        } else {
            None
        };
        Ok(ForwardVars { frames, embeddings: None, target_embeddings: None, heading_logits, regression: None })
    }
}
