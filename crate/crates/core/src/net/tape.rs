//! Recorded operation tape with reverse-mode gradients.

use std::sync::Arc;

use crate::error::{invalid, shape, Error, Result};
use crate::net::kernels::{self, gather, scatter_add, GatherIndex, NO_SOURCE};
use crate::net::param::{ParamId, ParamStore};
use crate::net::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Marks an absent token in [`Tape::embed_pair`].
pub const NO_TOKEN: u16 = u16::MAX;

enum Op {
    Input,
    Param(ParamId),
    Conv1x1 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Tap {
        x: Var,
        w_cur: Var,
        w_prev: Var,
        index: Arc<GatherIndex>,
    },
    EmbedPair {
        current: Arc<Vec<u16>>,
        previous: Arc<Vec<u16>>,
        w_cur: Var,
        w_prev: Var,
        b: Var,
    },
    Add(Var, Var),
    Gated {
        xf: Var,
        xg: Var,
        hf: Var,
        hg: Var,
        th: Tensor,
        sg: Tensor,
    },
    Relu(Var),
    Tanh(Var),
    SoftmaxCe {
        logits: Var,
        targets: Arc<Vec<u8>>,
        probs: Tensor,
    },
    WeightedSse {
        pred: Var,
        target: Arc<Tensor>,
        row_weights: Arc<Vec<f64>>,
        scale: f64,
    },
    Dot {
        x: Var,
        w: Arc<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward computations so that [`Tape::backward`] can replay them in
/// reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Records a parameter leaf; frozen parameters do not request gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = kernels::conv1x1(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv1x1 { x, w, b }, rg))
    }

    pub fn dilated_tap(&mut self, x: Var, index: Arc<GatherIndex>, w_cur: Var, w_prev: Var) -> Result<Var> {
        let out = kernels::dilated_tap_indexed(self.value(x), &index, self.value(w_cur), self.value(w_prev))?;
        let rg = self.rg(x) || self.rg(w_cur) || self.rg(w_prev);
        Ok(self.push(out, Op::Tap { x, w_cur, w_prev, index }, rg))
    }

    /// Two-tap convolution over one-hot tokens:
    /// `b + w_cur[:, current[t]] + w_prev[:, previous[t]]`, where
    /// [`NO_TOKEN`] contributes nothing.
    pub fn embed_pair(
        &mut self,
        current: Arc<Vec<u16>>,
        previous: Arc<Vec<u16>>,
        w_cur: Var,
        w_prev: Var,
        b: Var,
    ) -> Result<Var> {
        let t = current.len();
        if previous.len() != t {
            return Err(shape("token streams differ in length"));
        }
        let (wc, wp, bias) = (self.value(w_cur), self.value(w_prev), self.value(b));
        let (c, vocab) = (wc.rows(), wc.cols());
        if wp.shape() != wc.shape() || bias.numel() != c {
            return Err(shape("embedding weights disagree"));
        }
        if let Some(&bad) = current
            .iter()
            .chain(previous.iter())
            .find(|&&k| k != NO_TOKEN && k as usize >= vocab)
        {
            return Err(invalid(format!("token {bad} outside vocabulary of {vocab}")));
        }
        let mut out = Tensor::zeros(&[c, t]);
        let od = out.data_mut();
        for ch in 0..c {
            let row = &mut od[ch * t..(ch + 1) * t];
            let (wc_row, wp_row) = (&wc.data()[ch * vocab..], &wp.data()[ch * vocab..]);
            for (i, o) in row.iter_mut().enumerate() {
                let mut acc = bias.data()[ch];
                if current[i] != NO_TOKEN {
                    acc += wc_row[current[i] as usize];
                }
                if previous[i] != NO_TOKEN {
                    acc += wp_row[previous[i] as usize];
                }
                *o = acc;
            }
        }
        let rg = self.rg(w_cur) || self.rg(w_prev) || self.rg(b);
        Ok(self.push(
            out,
            Op::EmbedPair {
                current,
                previous,
                w_cur,
                w_prev,
                b,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn gated(&mut self, xf: Var, xg: Var, hf: Var, hg: Var) -> Result<Var> {
        let (z, th, sg) = kernels::gated_parts(self.value(xf), self.value(xg), self.value(hf), self.value(hg))?;
        let rg = [xf, xg, hf, hg].iter().any(|&v| self.rg(v));
        Ok(self.push(z, Op::Gated { xf, xg, hf, hg, th, sg }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    /// Mean cross-entropy of column-wise softmax against `targets`.
    pub fn softmax_ce(&mut self, logits: Var, targets: Arc<Vec<u8>>) -> Result<Var> {
        let (loss, probs) = kernels::softmax_ce_parts(self.value(logits), &targets)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            },
            rg,
        ))
    }

    /// `scale · Σ_{r,t} row_weights[r] · (pred[r,t] - target[r,t])²`.
    pub fn weighted_sse(&mut self, pred: Var, target: Arc<Tensor>, row_weights: Arc<Vec<f64>>, scale: f64) -> Result<Var> {
        let p = self.value(pred);
        p.same_shape(&target, "weighted error")?;
        if row_weights.len() != p.rows() {
            return Err(shape("one weight per row required"));
        }
        let cols = p.cols();
        let mut total = 0.0;
        for (r, w) in row_weights.iter().enumerate() {
            let row: f64 = p.data()[r * cols..(r + 1) * cols]
                .iter()
                .zip(&target.data()[r * cols..(r + 1) * cols])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += w * row;
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(scale * total),
            Op::WeightedSse {
                pred,
                target,
                row_weights,
                scale,
            },
            rg,
        ))
    }

    /// `Σ x ⊙ w` for a constant `w`; projects any output onto a scalar.
    pub fn dot(&mut self, x: Var, w: Arc<Tensor>) -> Result<Var> {
        self.value(x).same_shape(&w, "dot")?;
        let s = self.value(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, w }, rg))
    }

    /// Back-propagates from a scalar `loss`, accumulating into the `grad`
    /// field of every trainable parameter reached.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(invalid("backward called without a recorded forward pass"));
        }
        if self.value(loss).numel() != 1 {
            return Err(invalid("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, store)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("initialised above"));
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>], store: &mut ParamStore) -> Result<()> {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                let p = store.get_mut(*id);
                if p.grad.shape() != g.shape() {
                    return Err(Error::Shape(format!("gradient for {}", p.name)));
                }
                p.grad.add_assign(&g);
            }
            Op::Conv1x1 { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (c_out, c_in, t) = (wv.rows(), wv.cols(), xv.cols());
                self.accumulate_with(grads, *w, |gw| {
                    gemm(c_out, t, c_in, g.data(), false, xv.data(), true, gw.data_mut(), true)
                });
                if let Some(b) = b {
                    self.accumulate_with(grads, *b, |gb| {
                        for (acc, row) in gb.data_mut().iter_mut().zip(g.data().chunks_exact(t.max(1))) {
                            *acc += row.iter().sum::<f64>();
                        }
                    });
                }
                self.accumulate_with(grads, *x, |gx| {
                    gemm(c_in, c_out, t, wv.data(), true, g.data(), false, gx.data_mut(), true)
                });
            }
            Op::Tap { x, w_cur, w_prev, index } => {
                let (xv, wc, wp) = (self.value(*x), self.value(*w_cur), self.value(*w_prev));
                let (c_out, c_in, t) = (wc.rows(), wc.cols(), xv.cols());
                self.accumulate_with(grads, *w_cur, |gw| {
                    gemm(c_out, t, c_in, g.data(), false, xv.data(), true, gw.data_mut(), true)
                });
                if self.rg(*w_prev) {
                    let shifted = gather(xv, index)?;
                    self.accumulate_with(grads, *w_prev, |gw| {
                        gemm(c_out, t, c_in, g.data(), false, shifted.data(), true, gw.data_mut(), true)
                    });
                }
                if self.rg(*x) {
                    let mut back = vec![0.0; c_in * t];
                    gemm(c_in, c_out, t, wp.data(), true, g.data(), false, &mut back, false);
                    self.accumulate_with(grads, *x, |gx| {
                        gemm(c_in, c_out, t, wc.data(), true, g.data(), false, gx.data_mut(), true);
                        scatter_add(&back, index, c_in, gx.data_mut());
                    });
                }
            }
            Op::EmbedPair {
                current,
                previous,
                w_cur,
                w_prev,
                b,
            } => {
                let t = current.len();
                let c = g.rows();
                for (w, tokens) in [(*w_cur, current), (*w_prev, previous)] {
                    self.accumulate_with(grads, w, |gw| {
                        let vocab = gw.cols();
                        let gd = gw.data_mut();
                        for ch in 0..c {
                            let grow = &g.data()[ch * t..(ch + 1) * t];
                            for (&k, &gv) in tokens.iter().zip(grow) {
                                if k != NO_TOKEN {
                                    gd[ch * vocab + k as usize] += gv;
                                }
                            }
                        }
                    });
                }
                self.accumulate_with(grads, *b, |gb| {
                    for (acc, row) in gb.data_mut().iter_mut().zip(g.data().chunks_exact(t.max(1))) {
                        *acc += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Gated { xf, xg, hf, hg, th, sg } => {
                let n = g.numel();
                let mut gf = Tensor::zeros(g.shape());
                let mut gg = Tensor::zeros(g.shape());
                {
                    let (gfd, ggd) = (gf.data_mut(), gg.data_mut());
                    for i in 0..n {
                        let (a, s, up) = (th.data()[i], sg.data()[i], g.data()[i]);
                        gfd[i] = up * s * (1.0 - a * a);
                        ggd[i] = up * a * s * (1.0 - s);
                    }
                }
                self.accumulate(grads, *hf, gf.clone());
                self.accumulate(grads, *xf, gf);
                self.accumulate(grads, *hg, gg.clone());
                self.accumulate(grads, *xg, gg);
            }
            Op::Relu(x) => {
                let mut gx = g;
                for (gv, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let mut gx = g;
                for (gv, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                    *gv *= 1.0 - y * y;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let up = g.data()[0];
                let t = probs.cols();
                let mut gl = probs.clone();
                {
                    let d = gl.data_mut();
                    for (col, &y) in targets.iter().enumerate() {
                        d[y as usize * t + col] -= 1.0;
                    }
                    let scale = up / t as f64;
                    d.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::WeightedSse {
                pred,
                target,
                row_weights,
                scale,
            } => {
                let up = g.data()[0];
                let p = self.value(*pred);
                let cols = p.cols();
                let mut gp = Tensor::zeros(p.shape());
                for (r, w) in row_weights.iter().enumerate() {
                    let k = 2.0 * scale * w * up;
                    for c in 0..cols {
                        let i = r * cols + c;
                        gp.data_mut()[i] = k * (p.data()[i] - target.data()[i]);
                    }
                }
                self.accumulate(grads, *pred, gp);
            }
            Op::Dot { x, w } => {
                let up = g.data()[0];
                let mut gx = (**w).clone();
                gx.data_mut().iter_mut().for_each(|v| *v *= up);
                self.accumulate(grads, *x, gx);
            }
        }
        Ok(())
    }
}

/// Builds the previous-token stream for a dilation-1 causal entry layer.
pub fn previous_tokens(current: &[u16], index: &GatherIndex) -> Vec<u16> {
    index
        .sources()
        .iter()
        .map(|&s| if s == NO_SOURCE { NO_TOKEN } else { current[s as usize] })
        .collect()
}
