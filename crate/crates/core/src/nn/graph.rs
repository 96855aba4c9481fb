//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. [`Graph::backward`]
//! walks the tape once in reverse. Image tensors are `(N, C, H, W)`;
//! "axis 1" ops treat any tensor as `(outer, axis1, inner)`.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tensor::{gemm, split_axis1, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddAxis1(Var, Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, k: usize },
    ConvT2 { x: Var, w: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Dropout(Var, Vec<f64>),
    Concat1(Vec<Var>),
    Slice1 { x: Var, start: usize },
    Gather0 { x: Var, rows: Vec<usize> },
    Concat0(Vec<Var>),
    Reshape(Var),
    Crop(Var),
    Resize { x: Var, ah: Tensor, aw: Tensor },
    Softmax1(Var),
    Mse(Var, Var),
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<String, Var>,
    train: bool,
    rng: ChaCha8Rng,
    bn_updates: Vec<BnUpdate>,
}

/// Gradients of one backward pass, indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of every parameter that took part in the forward pass.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, v)| {
                let shape = self.shapes[v.0].clone();
                let data = self.grads[v.0].clone().unwrap_or_else(|| vec![0.0; shape.iter().product()]);
                (name.clone(), Tensor { shape, data })
            })
            .collect()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    /// `train` selects batch statistics in batch norm and enables dropout;
    /// `seed` keys the dropout masks.
    pub fn new(train: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Node for a named parameter; repeated lookups share one node so
    /// gradients accumulate across time steps.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.param_vars.get(name) {
            return v;
        }
        let t = store.param(name).unwrap_or_else(|| panic!("unknown parameter {name}")).clone();
        let v = self.push(t, Op::Leaf);
        self.param_vars.insert(name.to_string(), v);
        v
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(t, Op::Leaf)
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "elementwise op on mismatched shapes");
        Tensor::new(ta.shape.clone(), ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect())
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape.clone(), t.data.iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let t = self.unary(a, |x| scale * x + shift);
        self.push(t, Op::Affine(a, scale))
    }

    /// Adds `b[c]` to every element of channel `c` (axis 1).
    pub fn add_axis1(&mut self, x: Var, b: Var) -> Var {
        let tx = self.value(x);
        let (outer, mid, inner) = tx.split_axis1();
        let tb = self.value(b);
        assert_eq!(tb.numel(), mid, "bias length {} vs axis size {mid}", tb.numel());
        let mut out = tx.clone();
        for o in 0..outer {
            for c in 0..mid {
                let bias = tb.data[c];
                let base = (o * mid + c) * inner;
                out.data[base..base + inner].iter_mut().for_each(|v| *v += bias);
            }
        }
        self.push(out, Op::AddAxis1(x, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape.len(), 2);
        assert_eq!(tb.shape.len(), 2);
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        assert_eq!(k, tb.shape[0], "matmul inner dims {:?} x {:?}", ta.shape, tb.shape);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, false, &mut c, 0.0);
        self.push(Tensor::new([m, n], c), Op::MatMul(a, b))
    }

    /// `x @ w + b` for `x: (N, in)`, `w: (in, out)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_axis1(y, b)
    }

    /// Stride-1 "same" convolution with odd kernel `k`; `w: (O, C, k, k)`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let [n, c, h, wd] = tx.shape[..] else { panic!("conv2d input must be 4-d") };
        let [o, wc, k, k2] = tw.shape[..] else { panic!("conv2d weight must be 4-d") };
        assert_eq!(c, wc, "conv2d channels {c} vs weight {wc}");
        assert!(k == k2 && k % 2 == 1);
        let hw = h * wd;
        let ckk = c * k * k;
        let mut out = vec![0.0; n * o * hw];
        let mut cols = vec![0.0; if k == 1 { 0 } else { ckk * hw }];
        for s in 0..n {
            let xs = &tx.data[s * c * hw..(s + 1) * c * hw];
            let src = if k == 1 {
                xs
            } else {
                im2col(xs, c, h, wd, k, &mut cols);
                &cols
            };
            gemm(o, ckk, hw, &tw.data, false, src, false, &mut out[s * o * hw..(s + 1) * o * hw], 0.0);
        }
        self.push(Tensor::new([n, o, h, wd], out), Op::Conv2d { x, w, k })
    }

    /// Kernel-2 stride-2 transposed convolution; `w: (C, O, 2, 2)`.
    pub fn conv_transpose2(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let [n, c, h, wd] = tx.shape[..] else { panic!("conv_transpose2 input must be 4-d") };
        let [wc, o, 2, 2] = tw.shape[..] else { panic!("conv_transpose2 weight must be (C, O, 2, 2)") };
        assert_eq!(c, wc);
        let hw = h * wd;
        let o4 = o * 4;
        let mut y = vec![0.0; o4 * hw];
        let mut out = vec![0.0; n * o * 4 * hw];
        for s in 0..n {
            let xs = &tx.data[s * c * hw..(s + 1) * c * hw];
            gemm(o4, c, hw, &tw.data, true, xs, false, &mut y, 0.0);
            let dst = &mut out[s * o4 * hw..(s + 1) * o4 * hw];
            scatter_up2(&y, dst, o, h, wd);
        }
        self.push(Tensor::new([n, o, 2 * h, 2 * wd], out), Op::ConvT2 { x, w })
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let [n, c, h, w] = tx.shape[..] else { panic!("max_pool2 input must be 4-d") };
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims, got {h}x{w}");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0u32; out.len()];
        for p in 0..n * c {
            let plane = &tx.data[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * i + di) * w + 2 * j + dj;
                        if plane[idx] > plane[best] {
                            best = idx;
                        }
                    }
                    let o = p * ho * wo + i * wo + j;
                    out[o] = plane[best];
                    argmax[o] = best as u32;
                }
            }
        }
        self.push(Tensor::new([n, c, ho, wo], out), Op::MaxPool2 { x, argmax })
    }

    /// Batch normalization over axis 1. In training mode batch statistics
    /// are used and reported through [`Graph::take_bn_updates`]; otherwise
    /// the running statistics `{name}.mean` / `{name}.var` from `store`.
    pub fn batch_norm(&mut self, x: Var, store: &ParamStore, name: &str) -> Var {
        const EPS: f64 = 1e-5;
        let gamma = self.param(store, &format!("{name}.gamma"));
        let beta = self.param(store, &format!("{name}.beta"));
        let tx = self.value(x);
        let (outer, mid, inner) = tx.split_axis1();
        let m = (outer * inner) as f64;
        let (mean, var) = if self.train {
            let mut mean = vec![0.0; mid];
            let mut var = vec![0.0; mid];
            for o in 0..outer {
                for c in 0..mid {
                    let base = (o * mid + c) * inner;
                    mean[c] += tx.data[base..base + inner].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for o in 0..outer {
                for c in 0..mid {
                    let base = (o * mid + c) * inner;
                    var[c] += tx.data[base..base + inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= m);
            (mean, var)
        } else {
            let get = |s: &str| store.buffer(&format!("{name}.{s}")).unwrap_or_else(|| panic!("missing {name}.{s}"));
            (get("mean").data.clone(), get("var").data.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; tx.numel()];
        let mut out = vec![0.0; tx.numel()];
        for o in 0..outer {
            for c in 0..mid {
                let base = (o * mid + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (tx.data[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + b[c];
                }
            }
        }
        let shape = tx.shape.clone();
        let train = self.train;
        if train {
            // unbiased variance for the running estimate
            let corr = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.bn_updates.push(BnUpdate {
                name: name.to_string(),
                mean,
                var: var.iter().map(|v| v * corr).collect(),
            });
        }
        self.push(Tensor::new(shape, out), Op::BatchNorm { x, gamma, beta, xhat, inv_std, train })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.unary(x, |v| 1.0 / (1.0 + (-v).exp()));
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.unary(x, f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n).map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let tx = self.value(x);
        let t = Tensor::new(tx.shape.clone(), tx.data.iter().zip(&mask).map(|(a, m)| a * m).collect());
        self.push(t, Op::Dropout(x, mask))
    }

    /// Concatenates along axis 1; all other dims must agree.
    pub fn concat1(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let first = self.value(xs[0]).shape.clone();
        let (outer, _, inner) = split_axis1(&first);
        let mids: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                let (o, m, i) = split_axis1(s);
                assert!(o == outer && i == inner && s.len() == first.len(), "concat1 shape mismatch {s:?} vs {first:?}");
                m
            })
            .collect();
        let total: usize = mids.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &m) in xs.iter().zip(&mids) {
                let d = &self.value(v).data;
                out.extend_from_slice(&d[o * m * inner..(o + 1) * m * inner]);
            }
        }
        let mut shape = first;
        if shape.len() == 1 {
            shape.push(1);
        }
        shape[1] = total;
        self.push(Tensor::new(shape, out), Op::Concat1(xs.to_vec()))
    }

    pub fn slice1(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let (outer, mid, inner) = tx.split_axis1();
        assert!(start + len <= mid, "slice1 {start}+{len} beyond {mid}");
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&tx.data[base..base + len * inner]);
        }
        let mut shape = tx.shape.clone();
        shape[1] = len;
        self.push(Tensor::new(shape, out), Op::Slice1 { x, start })
    }

    /// Picks rows (axis 0) by index; indices may repeat.
    pub fn gather0(&mut self, x: Var, rows: &[usize]) -> Var {
        let tx = self.value(x);
        let row = tx.numel() / tx.shape[0];
        let mut out = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            out.extend_from_slice(&tx.data[r * row..(r + 1) * row]);
        }
        let mut shape = tx.shape.clone();
        shape[0] = rows.len();
        self.push(Tensor::new(shape, out), Op::Gather0 { x, rows: rows.to_vec() })
    }

    pub fn concat0(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let tail = self.shape(xs[0])[1..].to_vec();
        let mut out = Vec::new();
        let mut n = 0;
        for &v in xs {
            let t = self.value(v);
            assert_eq!(t.shape[1..], tail[..], "concat0 shape mismatch");
            n += t.shape[0];
            out.extend_from_slice(&t.data);
        }
        let mut shape = vec![n];
        shape.extend(tail);
        self.push(Tensor::new(shape, out), Op::Concat0(xs.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = Tensor::new(shape.to_vec(), self.value(x).data.clone());
        self.push(t, Op::Reshape(x))
    }

    /// Keeps the top-left `h x w` window of each plane.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let tx = self.value(x);
        let [n, c, hi, wi] = tx.shape[..] else { panic!("crop input must be 4-d") };
        assert!(h <= hi && w <= wi);
        if h == hi && w == wi {
            return x;
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for i in 0..h {
                let base = p * hi * wi + i * wi;
                out.extend_from_slice(&tx.data[base..base + w]);
            }
        }
        self.push(Tensor::new([n, c, h, w], out), Op::Crop(x))
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let tx = self.value(x);
        let [n, c, h, w] = tx.shape[..] else { panic!("resize input must be 4-d") };
        if h == out_h && w == out_w {
            return x;
        }
        let ah = bilinear_matrix(h, out_h);
        let aw = bilinear_matrix(w, out_w);
        let mut tmp = vec![0.0; out_h * w];
        let mut out = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            gemm(out_h, h, w, &ah.data, false, &tx.data[p * h * w..(p + 1) * h * w], false, &mut tmp, 0.0);
            gemm(out_h, w, out_w, &tmp, false, &aw.data, true, &mut out[p * out_h * out_w..(p + 1) * out_h * out_w], 0.0);
        }
        self.push(Tensor::new([n, c, out_h, out_w], out), Op::Resize { x, ah, aw })
    }

    pub fn softmax1(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (outer, mid, inner) = tx.split_axis1();
        let mut out = vec![0.0; tx.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * mid + c) * inner + i;
                let max = (0..mid).map(|c| tx.data[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..mid {
                    let e = (tx.data[at(c)] - max).exp();
                    out[at(c)] = e;
                    z += e;
                }
                for c in 0..mid {
                    out[at(c)] /= z;
                }
            }
        }
        let shape = tx.shape.clone();
        self.push(Tensor::new(shape, out), Op::Softmax1(x))
    }

    /// Mean squared difference, as a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "mse on mismatched shapes");
        let s: f64 = ta.data.iter().zip(&tb.data).map(|(x, y)| (x - y) * (x - y)).sum();
        let v = s / ta.numel() as f64;
        self.push(Tensor::scalar(v), Op::Mse(a, b))
    }

    /// Mean softmax cross-entropy over axis 1 of `logits`; `targets` holds
    /// one class id per `(outer, inner)` position.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize]) -> Var {
        let tx = self.value(logits);
        let (outer, mid, inner) = tx.split_axis1();
        assert_eq!(targets.len(), outer * inner);
        let mut probs = vec![0.0; tx.numel()];
        let mut loss = 0.0;
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * mid + c) * inner + i;
                let max = (0..mid).map(|c| tx.data[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..mid).map(|c| (tx.data[at(c)] - max).exp()).sum();
                for c in 0..mid {
                    probs[at(c)] = (tx.data[at(c)] - max).exp() / z;
                }
                let t = targets[o * inner + i];
                loss += z.ln() + max - tx.data[at(t)];
            }
        }
        let v = loss / (outer * inner) as f64;
        self.push(Tensor::scalar(v), Op::SoftmaxCe { logits, targets: targets.to_vec(), probs })
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, delta: Vec<f64>| match &mut grads[v.0] {
                Some(d) => add_into(d, &delta),
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.value(*a).data, &self.value(*b).data);
                    acc(*a, g.iter().zip(tb).map(|(g, y)| g * y).collect());
                    acc(*b, g.iter().zip(ta).map(|(g, x)| g * x).collect());
                }
                Op::Affine(a, s) => acc(*a, g.iter().map(|v| v * s).collect()),
                Op::AddAxis1(x, b) => {
                    let (outer, mid, inner) = node.value.split_axis1();
                    let mut gb = vec![0.0; mid];
                    for o in 0..outer {
                        for (c, gbc) in gb.iter_mut().enumerate() {
                            let base = (o * mid + c) * inner;
                            *gbc += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    acc(*b, gb);
                    acc(*x, g.clone());
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, &g, false, &tb.data, true, &mut ga, 0.0);
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, &ta.data, true, &g, false, &mut gb, 0.0);
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Conv2d { x, w, k } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let [n, c, h, wd] = tx.shape[..] else { unreachable!() };
                    let o = tw.shape[0];
                    let (hw, ckk) = (h * wd, c * k * k);
                    let mut gx = vec![0.0; tx.numel()];
                    let mut gw = vec![0.0; tw.numel()];
                    let mut cols = vec![0.0; ckk * hw];
                    let mut gcols = vec![0.0; ckk * hw];
                    for s in 0..n {
                        let xs = &tx.data[s * c * hw..(s + 1) * c * hw];
                        let gs = &g[s * o * hw..(s + 1) * o * hw];
                        let src = if *k == 1 {
                            xs
                        } else {
                            im2col(xs, c, h, wd, *k, &mut cols);
                            &cols
                        };
                        gemm(o, hw, ckk, gs, false, src, true, &mut gw, 1.0);
                        if *k == 1 {
                            gemm(ckk, o, hw, &tw.data, true, gs, false, &mut gx[s * c * hw..(s + 1) * c * hw], 0.0);
                        } else {
                            gemm(ckk, o, hw, &tw.data, true, gs, false, &mut gcols, 0.0);
                            col2im_add(&gcols, c, h, wd, *k, &mut gx[s * c * hw..(s + 1) * c * hw]);
                        }
                    }
                    acc(*x, gx);
                    acc(*w, gw);
                }
                Op::ConvT2 { x, w } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let [n, c, h, wd] = tx.shape[..] else { unreachable!() };
                    let o = tw.shape[1];
                    let (hw, o4) = (h * wd, o * 4);
                    let mut gx = vec![0.0; tx.numel()];
                    let mut gw = vec![0.0; tw.numel()];
                    let mut gy = vec![0.0; o4 * hw];
                    for s in 0..n {
                        gather_up2(&g[s * o4 * hw..(s + 1) * o4 * hw], &mut gy, o, h, wd);
                        let xs = &tx.data[s * c * hw..(s + 1) * c * hw];
                        gemm(c, o4, hw, &tw.data, false, &gy, false, &mut gx[s * c * hw..(s + 1) * c * hw], 0.0);
                        gemm(c, hw, o4, xs, false, &gy, true, &mut gw, 1.0);
                    }
                    acc(*x, gx);
                    acc(*w, gw);
                }
                Op::MaxPool2 { x, argmax } => {
                    let tx = self.value(*x);
                    let [_, _, h, w] = tx.shape[..] else { unreachable!() };
                    let plane_out = (h / 2) * (w / 2);
                    let mut gx = vec![0.0; tx.numel()];
                    for (o, (&gv, &am)) in g.iter().zip(argmax).enumerate() {
                        let p = o / plane_out;
                        gx[p * h * w + am as usize] += gv;
                    }
                    acc(*x, gx);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let (outer, mid, inner) = node.value.split_axis1();
                    let m = (outer * inner) as f64;
                    let gam = &self.value(*gamma).data;
                    let mut gg = vec![0.0; mid];
                    let mut gbeta = vec![0.0; mid];
                    for o in 0..outer {
                        for c in 0..mid {
                            let base = (o * mid + c) * inner;
                            for i in base..base + inner {
                                gbeta[c] += g[i];
                                gg[c] += g[i] * xhat[i];
                            }
                        }
                    }
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for c in 0..mid {
                            let base = (o * mid + c) * inner;
                            let k = gam[c] * inv_std[c];
                            for i in base..base + inner {
                                gx[i] = if *train {
                                    k * (g[i] - gbeta[c] / m - xhat[i] * gg[c] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    acc(*x, gx);
                    acc(*gamma, gg);
                    acc(*beta, gbeta);
                }
                Op::Relu(x) => {
                    let tx = &self.value(*x).data;
                    acc(*x, g.iter().zip(tx).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect());
                }
                Op::Sigmoid(x) => {
                    acc(*x, g.iter().zip(&node.value.data).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
                Op::Tanh(x) => {
                    acc(*x, g.iter().zip(&node.value.data).map(|(g, y)| g * (1.0 - y * y)).collect());
                }
                Op::Dropout(x, mask) => acc(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
                Op::Concat1(xs) => {
                    let (outer, total, inner) = node.value.split_axis1();
                    let mut off = 0;
                    for &v in xs {
                        let m = split_axis1(self.shape(v)).1;
                        let mut gv = Vec::with_capacity(outer * m * inner);
                        for o in 0..outer {
                            let base = (o * total + off) * inner;
                            gv.extend_from_slice(&g[base..base + m * inner]);
                        }
                        acc(v, gv);
                        off += m;
                    }
                }
                Op::Slice1 { x, start } => {
                    let (outer, mid, inner) = self.value(*x).split_axis1();
                    let len = node.value.shape[1];
                    let mut gx = vec![0.0; outer * mid * inner];
                    for o in 0..outer {
                        let dst = (o * mid + start) * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    acc(*x, gx);
                }
                Op::Gather0 { x, rows } => {
                    let tx = self.value(*x);
                    let row = tx.numel() / tx.shape[0];
                    let mut gx = vec![0.0; tx.numel()];
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * row..(r + 1) * row], &g[k * row..(k + 1) * row]);
                    }
                    acc(*x, gx);
                }
                Op::Concat0(xs) => {
                    let mut off = 0;
                    for &v in xs {
                        let n = self.value(v).numel();
                        acc(v, g[off..off + n].to_vec());
                        off += n;
                    }
                }
                Op::Reshape(x) => acc(*x, g.clone()),
                Op::Crop(x) => {
                    let tx = self.value(*x);
                    let [n, c, hi, wi] = tx.shape[..] else { unreachable!() };
                    let [_, _, h, w] = node.value.shape[..] else { unreachable!() };
                    let mut gx = vec![0.0; tx.numel()];
                    for p in 0..n * c {
                        for i in 0..h {
                            let dst = p * hi * wi + i * wi;
                            let src = (p * h + i) * w;
                            gx[dst..dst + w].copy_from_slice(&g[src..src + w]);
                        }
                    }
                    acc(*x, gx);
                }
                Op::Resize { x, ah, aw } => {
                    let tx = self.value(*x);
                    let [n, c, h, w] = tx.shape[..] else { unreachable!() };
                    let (oh, ow) = (ah.shape[0], aw.shape[0]);
                    let mut tmp = vec![0.0; oh * w];
                    let mut gx = vec![0.0; tx.numel()];
                    for p in 0..n * c {
                        gemm(oh, ow, w, &g[p * oh * ow..(p + 1) * oh * ow], false, &aw.data, false, &mut tmp, 0.0);
                        gemm(h, oh, w, &ah.data, true, &tmp, false, &mut gx[p * h * w..(p + 1) * h * w], 0.0);
                    }
                    acc(*x, gx);
                }
                Op::Softmax1(x) => {
                    let (outer, mid, inner) = node.value.split_axis1();
                    let y = &node.value.data;
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |c: usize| (o * mid + c) * inner + i;
                            let dot: f64 = (0..mid).map(|c| g[at(c)] * y[at(c)]).sum();
                            for c in 0..mid {
                                gx[at(c)] = y[at(c)] * (g[at(c)] - dot);
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::Mse(a, b) => {
                    let (ta, tb) = (&self.value(*a).data, &self.value(*b).data);
                    let s = 2.0 * g[0] / ta.len() as f64;
                    let ga: Vec<f64> = ta.iter().zip(tb).map(|(x, y)| s * (x - y)).collect();
                    acc(*b, ga.iter().map(|v| -v).collect());
                    acc(*a, ga);
                }
                Op::SoftmaxCe { logits, targets, probs } => {
                    let (outer, mid, inner) = self.value(*logits).split_axis1();
                    let s = g[0] / (outer * inner) as f64;
                    let mut gx: Vec<f64> = probs.iter().map(|p| p * s).collect();
                    for o in 0..outer {
                        for i in 0..inner {
                            gx[(o * mid + targets[o * inner + i]) * inner + i] -= s;
                        }
                    }
                    acc(*logits, gx);
                }
            }
            grads[idx] = Some(g);
        }

        Gradients {
            grads,
            params: self.param_vars.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        }
    }
}

/// Column range `[lo, hi)` of output positions whose source `j + dj` lies
/// inside `0..w`.
fn valid_cols(w: usize, dj: isize) -> (usize, usize) {
    let lo = (-dj).max(0) as usize;
    let hi = (w as isize - dj).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ch * k + ki) * k + kj) * hw..((ch * k + ki) * k + kj + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                let (lo, hi) = valid_cols(w, dj);
                for i in 0..h {
                    let si = i as isize + di;
                    let dst = &mut row[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let s0 = (lo as isize + dj) as usize;
                    dst[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ch * k + ki) * k + kj) * hw..((ch * k + ki) * k + kj + 1) * hw];
                let di = ki as isize - pad;
                let dj = kj as isize - pad;
                let (lo, hi) = valid_cols(w, dj);
                for i in 0..h {
                    let si = i as isize + di;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let s0 = (lo as isize + dj) as usize;
                    let base = ch * hw + si as usize * w + s0;
                    let dst = &mut x[base..base + hi - lo];
                    for (d, v) in dst.iter_mut().zip(&row[i * w + lo..i * w + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `y: (O*4, H*W)` with row `o*4 + a*2 + b` → `out: (O, 2H, 2W)`.
fn scatter_up2(y: &[f64], out: &mut [f64], o: usize, h: usize, w: usize) {
    let hw = h * w;
    let w2 = 2 * w;
    for oc in 0..o {
        for a in 0..2 {
            for b in 0..2 {
                let src = &y[(oc * 4 + a * 2 + b) * hw..(oc * 4 + a * 2 + b + 1) * hw];
                for i in 0..h {
                    for j in 0..w {
                        out[oc * 4 * hw + (2 * i + a) * w2 + 2 * j + b] = src[i * w + j];
                    }
                }
            }
        }
    }
}

fn gather_up2(g: &[f64], y: &mut [f64], o: usize, h: usize, w: usize) {
    let hw = h * w;
    let w2 = 2 * w;
    for oc in 0..o {
        for a in 0..2 {
            for b in 0..2 {
                let dst = &mut y[(oc * 4 + a * 2 + b) * hw..(oc * 4 + a * 2 + b + 1) * hw];
                for i in 0..h {
                    for j in 0..w {
                        dst[i * w + j] = g[oc * 4 * hw + (2 * i + a) * w2 + 2 * j + b];
                    }
                }
            }
        }
    }
}

/// `(out, in)` interpolation matrix for 1-d bilinear resampling with
/// half-pixel centers and edge clamping.
pub fn bilinear_matrix(input: usize, output: usize) -> Tensor {
    let mut m = Tensor::zeros([output, input]);
    let scale = input as f64 / output as f64;
    for i in 0..output {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        let frac = src - lo as f64;
        m.data[i * input + lo] += 1.0 - frac;
        m.data[i * input + hi] += frac;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(loss)/d(input) for every element of every input against
    /// central differences.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let run = |ts: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::new(true, 0);
            let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
            let out = f(&mut g, &vars);
            let grads = g.backward(out);
            let gs = vars.iter().map(|&v| grads.get(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; g.value(v).numel()])).collect();
            (g.value(out).item(), gs)
        };
        let (_, analytic) = run(&inputs);
        let eps = 1e-6;
        for (ti, t) in inputs.iter().enumerate() {
            for e in 0..t.numel() {
                let mut plus = inputs.clone();
                plus[ti].data[e] += eps;
                let mut minus = inputs.clone();
                minus[ti].data[e] -= eps;
                let fd = (run(&plus).0 - run(&minus).0) / (2.0 * eps);
                let an = analytic[ti][e];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "input {ti} elem {e}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let w = rand_tensor(g.shape(y), seed);
        let w = g.input(w);
        let p = g.mul(y, w);
        let z = g.input(Tensor::zeros(g.shape(p).to_vec()));
        // mse(p, 0) is a smooth scalar readout
        g.mse(p, z)
    }

    #[test]
    fn conv2d_gradients() {
        for k in [1, 3] {
            check(vec![rand_tensor(&[2, 3, 4, 5], 1), rand_tensor(&[2, 3, k, k], 2)], |g, v| {
                let y = g.conv2d(v[0], v[1]);
                weighted_sum(g, y, 3)
            });
        }
    }

    #[test]
    fn conv_transpose_gradients() {
        check(vec![rand_tensor(&[2, 3, 2, 3], 4), rand_tensor(&[3, 2, 2, 2], 5)], |g, v| {
            let y = g.conv_transpose2(v[0], v[1]);
            weighted_sum(g, y, 6)
        });
    }

    #[test]
    fn pool_bn_activation_gradients() {
        check(vec![rand_tensor(&[2, 3, 4, 4], 7), rand_tensor(&[3], 8)], |g, v| {
            let mut store = ParamStore::default();
            store.insert_param("bn.gamma", rand_tensor(&[3], 9));
            store.insert_param("bn.beta", rand_tensor(&[3], 10));
            let p = g.max_pool2(v[0]);
            let b = g.batch_norm(p, &store, "bn");
            let r = g.relu(b);
            let s = g.sigmoid(r);
            let t = g.tanh(s);
            let t = g.add_axis1(t, v[1]);
            weighted_sum(g, t, 10)
        });
    }

    #[test]
    fn batch_norm_parameter_gradients() {
        let x = rand_tensor(&[3, 2, 2, 2], 11);
        let mut store = ParamStore::default();
        store.insert_param("bn.gamma", rand_tensor(&[2], 12));
        store.insert_param("bn.beta", rand_tensor(&[2], 13));
        let run = |s: &ParamStore| {
            let mut g = Graph::new(true, 0);
            let xv = g.input(x.clone());
            let b = g.batch_norm(xv, s, "bn");
            let out = weighted_sum(&mut g, b, 14);
            let v = g.value(out).item();
            (v, g.backward(out).params())
        };
        let (_, grads) = run(&store);
        for name in ["bn.gamma", "bn.beta"] {
            for e in 0..2 {
                let mut p = store.clone();
                p.param_mut(name).unwrap().data[e] += 1e-6;
                let mut m = store.clone();
                m.param_mut(name).unwrap().data[e] -= 1e-6;
                let fd = (run(&p).0 - run(&m).0) / 2e-6;
                assert!((fd - grads[name].data[e]).abs() < 1e-7, "{name}[{e}]");
            }
        }
    }

    #[test]
    fn structural_op_gradients() {
        check(vec![rand_tensor(&[2, 3, 4, 4], 15), rand_tensor(&[2, 2, 4, 4], 16)], |g, v| {
            let c = g.concat1(&[v[0], v[1]]);
            let s = g.slice1(c, 1, 3);
            let r = g.gather0(s, &[1, 0, 1]);
            let cat = g.concat0(&[r, s]);
            let cr = g.crop(cat, 3, 2);
            let up = g.resize_bilinear(cr, 5, 7);
            let sm = g.softmax1(up);
            let flat = g.reshape(sm, &[5, 3 * 5 * 7]);
            weighted_sum(g, flat, 17)
        });
    }

    #[test]
    fn dense_and_loss_gradients() {
        check(vec![rand_tensor(&[3, 4], 18), rand_tensor(&[4, 5], 19), rand_tensor(&[5], 20), rand_tensor(&[3, 5], 21)], |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            let t = g.tanh(y);
            let d = g.sub(t, v[3]);
            let a = g.affine(d, 0.7, 0.1);
            let m = g.mse(a, v[3]);
            let ce = g.softmax_ce(y, &[0, 4, 2]);
            let s = g.add(m, ce);
            g.affine(s, 2.0, 0.0)
        });
    }

    #[test]
    fn dropout_gradient_uses_mask() {
        let x = rand_tensor(&[4, 6], 22);
        let mut g = Graph::new(true, 99);
        let v = g.input(x.clone());
        let d = g.dropout(v, 0.5);
        let kept = g.value(d).data.iter().filter(|&&y| y != 0.0).count();
        assert!(kept > 0 && kept < 24);
        let z = g.input(Tensor::zeros([4, 6]));
        let l = g.mse(d, z);
        let gr = g.backward(l);
        for (i, (&y, &gx)) in g.value(d).data.iter().zip(gr.get(v).unwrap()).enumerate() {
            if y == 0.0 {
                assert_eq!(gx, 0.0);
            } else {
                assert!((gx - 2.0 * y * 2.0 / 24.0).abs() < 1e-12, "{i}");
            }
        }
        let mut e = Graph::new(false, 99);
        let v = e.input(x);
        assert_eq!(e.dropout(v, 0.5), v);
    }

    #[test]
    fn bilinear_identity_and_constant_preservation() {
        let m = bilinear_matrix(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.data[i * 4 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
        let up = bilinear_matrix(5, 16);
        for i in 0..16 {
            let row: f64 = up.data[i * 5..(i + 1) * 5].iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ce_of_uniform_logits_is_ln5() {
        let mut g = Graph::new(false, 0);
        let x = g.input(Tensor::zeros([2, 5, 3]));
        let l = g.softmax_ce(x, &[0, 1, 2, 3, 4, 0]);
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }
}
