//! Plain-loop inference shared by the batch forward and the cached generator.
//!
//! Every column is produced by the same helpers in the same accumulation
//! order, so the two paths agree bit for bit at either precision.

use crate::dilation::{DilationPlan, LayerKind};
use crate::error::{shape, Result};
use crate::net::{Real, Tensor};
use crate::vocoder::VocoderParams;

/// Weight matrix stored row-major `[rows, cols]`.
#[derive(Debug, Clone)]
pub(crate) struct Dense<T: Real> {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<T>,
}

impl<T: Real> Dense<T> {
    fn from(t: &Tensor) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            w: t.data().iter().map(|&v| T::from_f64(v)).collect(),
        }
    }

    /// `out[o] += Σ_k w[o, k] · x[k]`, summed in `k` order.
    #[inline]
    pub fn accumulate(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.cols);
        for (o, row) in out.iter_mut().zip(self.w.chunks_exact(self.cols)) {
            let mut acc = *o;
            for (&a, &b) in row.iter().zip(x) {
                acc = acc + a * b;
            }
            *o = acc;
        }
    }

    /// `out = bias + w · x`.
    #[inline]
    pub fn affine(&self, x: &[T], bias: &[T], out: &mut [T]) {
        out.copy_from_slice(bias);
        self.accumulate(x, out);
    }

    fn column(&self, k: usize, out: &mut [T]) {
        for (o, row) in out.iter_mut().zip(self.w.chunks_exact(self.cols)) {
            *o = *o + row[k];
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Block<T: Real> {
    pub kind: LayerKind,
    pub tap_cur_f: Dense<T>,
    pub tap_prev_f: Dense<T>,
    pub tap_cur_g: Dense<T>,
    pub tap_prev_g: Dense<T>,
    pub aux_f: Dense<T>,
    pub aux_f_bias: Vec<T>,
    pub aux_g: Dense<T>,
    pub aux_g_bias: Vec<T>,
    pub res: Dense<T>,
    pub res_bias: Vec<T>,
    pub skip: Dense<T>,
    pub skip_bias: Vec<T>,
}

/// Scratch vectors for one block evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Scratch<T: Real> {
    pub xf: Vec<T>,
    pub xg: Vec<T>,
    pub z: Vec<T>,
    pub tmp: Vec<T>,
    pub skip_tmp: Vec<T>,
}

impl<T: Real> Scratch<T> {
    pub fn new(residual: usize, skip: usize) -> Self {
        Self {
            xf: vec![T::zero(); residual],
            xg: vec![T::zero(); residual],
            z: vec![T::zero(); residual],
            tmp: vec![T::zero(); residual],
            skip_tmp: vec![T::zero(); skip],
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn tanh<T: Real>(x: T) -> T {
    let two = T::one() + T::one();
    let e = (-two * x.abs()).exp_m1();
    (-e / (two + e)).copysign(x)
}

impl<T: Real> Block<T> {
    /// Conditioning projections `(hf, hg)` for one aux column.
    pub fn project_aux(&self, aux: &[T], hf: &mut [T], hg: &mut [T]) {
        self.aux_f.affine(aux, &self.aux_f_bias, hf);
        self.aux_g.affine(aux, &self.aux_g_bias, hg);
    }

    /// One column: updates `x` in place to the next layer's input and adds
    /// this block's skip output into `skip_sum`.
    pub fn step(&self, x: &mut [T], x_prev: &[T], hf: &[T], hg: &[T], skip_sum: &mut [T], s: &mut Scratch<T>) {
        s.xf.iter_mut().for_each(|v| *v = T::zero());
        self.tap_cur_f.accumulate(x, &mut s.xf);
        self.tap_prev_f.accumulate(x_prev, &mut s.xf);
        s.xg.iter_mut().for_each(|v| *v = T::zero());
        self.tap_cur_g.accumulate(x, &mut s.xg);
        self.tap_prev_g.accumulate(x_prev, &mut s.xg);
        for i in 0..s.z.len() {
            s.z[i] = tanh(s.xf[i] + hf[i]) * sigmoid(s.xg[i] + hg[i]);
        }
        self.skip.affine(&s.z, &self.skip_bias, &mut s.skip_tmp);
        for (acc, &v) in skip_sum.iter_mut().zip(&s.skip_tmp) {
            *acc = *acc + v;
        }
        self.res.affine(&s.z, &self.res_bias, &mut s.tmp);
        for (xv, &r) in x.iter_mut().zip(&s.tmp) {
            *xv = *xv + r;
        }
    }
}

/// Model input for the batch forward.
#[derive(Debug, Clone, Copy)]
pub enum EntryInput<'a, T: Real> {
    /// Emitted codes; input `t` is the one-hot of `codes[t-1]`.
    Codes(&'a [u8]),
    /// Arbitrary dense input `[levels, T]` taking the place of the one-hots.
    Dense(&'a Tensor<T>),
}

/// Inference copy of a vocoder at precision `T`.
#[derive(Debug, Clone)]
pub struct Network<T: Real> {
    pub(crate) residual: usize,
    pub(crate) skip: usize,
    pub(crate) aux_dim: usize,
    pub(crate) levels: usize,
    pub(crate) entry_cur: Dense<T>,
    pub(crate) entry_prev: Dense<T>,
    pub(crate) entry_bias: Vec<T>,
    pub(crate) blocks: Vec<Block<T>>,
    pub(crate) head_hidden: Dense<T>,
    pub(crate) head_hidden_bias: Vec<T>,
    pub(crate) head_out: Dense<T>,
    pub(crate) head_out_bias: Vec<T>,
}

fn vector<T: Real>(t: &Tensor) -> Vec<T> {
    t.data().iter().map(|&v| T::from_f64(v)).collect()
}

impl<T: Real> Network<T> {
    pub fn from_params(p: &VocoderParams) -> Self {
        let v = |id| p.store.value(id);
        let e = p.entry_ids();
        let h = p.head_ids();
        let blocks = p
            .block_ids()
            .into_iter()
            .map(|b| Block {
                kind: b.kind,
                tap_cur_f: Dense::from(v(b.tap_cur_f)),
                tap_prev_f: Dense::from(v(b.tap_prev_f)),
                tap_cur_g: Dense::from(v(b.tap_cur_g)),
                tap_prev_g: Dense::from(v(b.tap_prev_g)),
                aux_f: Dense::from(v(b.aux_f)),
                aux_f_bias: vector(v(b.aux_f_bias)),
                aux_g: Dense::from(v(b.aux_g)),
                aux_g_bias: vector(v(b.aux_g_bias)),
                res: Dense::from(v(b.res)),
                res_bias: vector(v(b.res_bias)),
                skip: Dense::from(v(b.skip)),
                skip_bias: vector(v(b.skip_bias)),
            })
            .collect();
        Self {
            residual: p.spec.residual_channels,
            skip: p.spec.skip_channels,
            aux_dim: p.aux_dim,
            levels: p.spec.quant_levels,
            entry_cur: Dense::from(v(e.cur)),
            entry_prev: Dense::from(v(e.prev)),
            entry_bias: vector(v(e.bias)),
            blocks,
            head_hidden: Dense::from(v(h.hidden)),
            head_hidden_bias: vector(v(h.hidden_bias)),
            head_out: Dense::from(v(h.out)),
            head_out_bias: vector(v(h.out_bias)),
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Entry column from the two most recent codes.
    pub(crate) fn entry_from_codes(&self, last: Option<u8>, before_last: Option<u8>, out: &mut [T]) {
        out.copy_from_slice(&self.entry_bias);
        if let Some(c) = last {
            self.entry_cur.column(c as usize, out);
        }
        if let Some(c) = before_last {
            self.entry_prev.column(c as usize, out);
        }
    }

    /// Head over a summed skip column; writes logits into `out`.
    pub(crate) fn head(&self, skip_sum: &[T], hidden: &mut Vec<T>, out: &mut [T]) {
        let relu: Vec<T> = skip_sum.iter().map(|&v| v.max(T::zero())).collect();
        hidden.resize(self.head_hidden.rows, T::zero());
        self.head_hidden.affine(&relu, &self.head_hidden_bias, hidden);
        hidden.iter_mut().for_each(|v| *v = v.max(T::zero()));
        self.head_out.affine(hidden, &self.head_out_bias, out);
    }

    pub(crate) fn dilation(block: &Block<T>, plan: &DilationPlan, t: usize) -> usize {
        match block.kind {
            LayerKind::Fixed(k) => plan.fixed_dilations()[k] as usize,
            LayerKind::Adaptive(k) => plan.adaptive_dilation(t, k) as usize,
        }
    }

    /// Layer-by-layer forward over whole sequences; logits `[levels, T]`.
    pub fn forward(&self, input: EntryInput<'_, T>, aux: &Tensor<T>, plan: &DilationPlan) -> Result<Tensor<T>> {
        let skip_sum = self.skip_features(input, aux, plan)?;
        let (sk, t_len) = (self.skip, skip_sum.len() / self.skip);
        let mut logits = Tensor::<T>::zeros(&[self.levels, t_len]);
        let mut hidden = Vec::new();
        let mut col = vec![T::zero(); self.levels];
        for t in 0..t_len {
            self.head(&skip_sum[t * sk..(t + 1) * sk], &mut hidden, &mut col);
            for (k, &v) in col.iter().enumerate() {
                logits.data_mut()[k * t_len + t] = v;
            }
        }
        Ok(logits)
    }

    /// Summed skip outputs of every block, time-major `[T, skip]`.
    fn skip_features(&self, input: EntryInput<'_, T>, aux: &Tensor<T>, plan: &DilationPlan) -> Result<Vec<T>> {
        let t_len = match input {
            EntryInput::Codes(c) => c.len(),
            EntryInput::Dense(d) => {
                if d.rows() != self.levels {
                    return Err(shape(format!("dense input has {} rows, expected {}", d.rows(), self.levels)));
                }
                d.cols()
            }
        };
        if aux.rows() != self.aux_dim || aux.cols() != t_len {
            return Err(shape(format!(
                "conditioning {:?} does not match [{}, {t_len}]",
                aux.shape(),
                self.aux_dim
            )));
        }
        plan.covers(t_len)?;
        let (r, sk) = (self.residual, self.skip);
        // time-major activations
        let mut x = vec![T::zero(); t_len * r];
        match input {
            EntryInput::Codes(codes) => {
                for t in 0..t_len {
                    let last = t.checked_sub(1).map(|i| codes[i]);
                    let before = t.checked_sub(2).map(|i| codes[i]);
                    self.entry_from_codes(last, before, &mut x[t * r..(t + 1) * r]);
                }
            }
            EntryInput::Dense(d) => {
                let zero = vec![T::zero(); self.levels];
                let mut cur = vec![T::zero(); self.levels];
                let mut prev = vec![T::zero(); self.levels];
                for t in 0..t_len {
                    for k in 0..self.levels {
                        cur[k] = d.get(k, t);
                        prev[k] = if t >= 1 { d.get(k, t - 1) } else { zero[k] };
                    }
                    let col = &mut x[t * r..(t + 1) * r];
                    col.copy_from_slice(&self.entry_bias);
                    self.entry_cur.accumulate(&cur, col);
                    self.entry_prev.accumulate(&prev, col);
                }
            }
        }
        let mut aux_cols = vec![T::zero(); t_len * self.aux_dim];
        for j in 0..self.aux_dim {
            for t in 0..t_len {
                aux_cols[t * self.aux_dim + j] = aux.get(j, t);
            }
        }
        let mut skip_sum = vec![T::zero(); t_len * sk];
        let mut scratch = Scratch::new(r, sk);
        let (mut hf, mut hg) = (vec![T::zero(); r], vec![T::zero(); r]);
        let zero = vec![T::zero(); r];
        for block in &self.blocks {
            let input = x.clone();
            for t in 0..t_len {
                let d = Self::dilation(block, plan, t);
                let prev = if t >= d { &input[(t - d) * r..(t - d + 1) * r] } else { &zero[..] };
                block.project_aux(&aux_cols[t * self.aux_dim..(t + 1) * self.aux_dim], &mut hf, &mut hg);
                let col = &mut x[t * r..(t + 1) * r];
                block.step(col, prev, &hf, &hg, &mut skip_sum[t * sk..(t + 1) * sk], &mut scratch);
            }
        }
        Ok(skip_sum)
    }
}

/// Output positions that react to a unit impulse at input `position`.
///
/// Biases are zeroed and the conditioning held at zero so every activation
/// outside the dependence set is exactly zero. The head is pointwise, so the
/// probe reads the summed skip outputs that feed it: its ReLUs could otherwise
/// silence a dependent column in a narrow network.
pub fn dependence_probe(params: &VocoderParams, plan: &DilationPlan, len: usize, position: usize) -> Result<Vec<usize>> {
    if position >= len {
        return Err(crate::error::invalid(format!("probe position {position} outside {len} samples")));
    }
    let mut quiet = params.clone();
    for p in quiet.store.iter_mut() {
        if p.name.ends_with("bias") {
            p.value.fill(0.0);
        }
    }
    let net = quiet.network::<f64>();
    let levels = net.levels();
    let aux = Tensor::<f64>::zeros(&[params.aux_dim, len]);
    let mut input = Tensor::<f64>::zeros(&[levels, len]);
    input.data_mut()[len + position] = 1.0;
    let skip = net.skip_features(EntryInput::Dense(&input), &aux, plan)?;
    Ok((0..len).filter(|&t| skip[t * net.skip..(t + 1) * net.skip].iter().any(|&v| v != 0.0)).collect())
}
