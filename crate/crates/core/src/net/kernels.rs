//! Forward kernels shared by the tape and by standalone callers.

use crate::error::{invalid, shape, Result};
use crate::net::tensor::{gemm, Tensor};

/// Marks a lookback that falls before its segment start (reads zeros).
pub const NO_SOURCE: u32 = u32::MAX;

/// Dilation of a two-tap convolution: one value for every step, or one per step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Dilation {
    Constant(usize),
    PerSample(Vec<u32>),
}

/// Source column of the "previous" tap for every output column.
///
/// Columns may be split into independent segments (batched windows); a
/// lookback never crosses into the preceding segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatherIndex {
    src: Vec<u32>,
}

fn segment_offsets(len: usize, segments: &[usize]) -> Result<Vec<usize>> {
    if segments.is_empty() {
        return Ok((0..len).collect());
    }
    if segments.iter().sum::<usize>() != len {
        return Err(shape(format!(
            "segments sum to {} but sequence has {len} steps",
            segments.iter().sum::<usize>()
        )));
    }
    Ok(segments.iter().flat_map(|&s| 0..s).collect())
}

impl GatherIndex {
    pub fn new(len: usize, dilation: &Dilation, segments: &[usize]) -> Result<Self> {
        let offsets = segment_offsets(len, segments)?;
        let src = match dilation {
            Dilation::Constant(d) => {
                if *d < 1 {
                    return Err(invalid("dilation must be at least 1"));
                }
                offsets
                    .iter()
                    .enumerate()
                    .map(|(t, &o)| if o >= *d { (t - d) as u32 } else { NO_SOURCE })
                    .collect()
            }
            Dilation::PerSample(ds) => {
                if ds.len() != len {
                    return Err(shape(format!(
                        "{} dilations for {len} steps",
                        ds.len()
                    )));
                }
                if let Some(t) = ds.iter().position(|&d| d < 1) {
                    return Err(invalid(format!("dilation below 1 at step {t}")));
                }
                offsets
                    .iter()
                    .zip(ds)
                    .enumerate()
                    .map(|(t, (&o, &d))| {
                        let d = d as usize;
                        if o >= d {
                            (t - d) as u32
                        } else {
                            NO_SOURCE
                        }
                    })
                    .collect()
            }
        };
        Ok(Self { src })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn sources(&self) -> &[u32] {
        &self.src
    }
}

/// `out[:, t] = x[:, src(t)]`, zero where there is no source.
pub fn gather(x: &Tensor, index: &GatherIndex) -> Result<Tensor> {
    let (c, t) = (x.rows(), x.cols());
    if index.len() != t {
        return Err(shape(format!("gather index of {} for {t} steps", index.len())));
    }
    let mut out = Tensor::zeros(&[c, t]);
    let xd = x.data();
    for (row_out, row_in) in out.data_mut().chunks_exact_mut(t).zip(xd.chunks_exact(t)) {
        for (o, &s) in row_out.iter_mut().zip(index.sources()) {
            if s != NO_SOURCE {
                *o = row_in[s as usize];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`gather`]: `acc[:, src(t)] += g[:, t]`.
pub(crate) fn scatter_add(g: &[f64], index: &GatherIndex, rows: usize, acc: &mut [f64]) {
    let t = index.len();
    for r in 0..rows {
        let (gr, ar) = (&g[r * t..(r + 1) * t], &mut acc[r * t..(r + 1) * t]);
        for (&gv, &s) in gr.iter().zip(index.sources()) {
            if s != NO_SOURCE {
                ar[s as usize] += gv;
            }
        }
    }
}

fn check_weight(w: &Tensor, c_in: usize, what: &str) -> Result<usize> {
    if w.shape().len() != 2 || w.shape()[1] != c_in {
        return Err(shape(format!(
            "{what} weight {:?} does not accept {c_in} input channels",
            w.shape()
        )));
    }
    Ok(w.shape()[0])
}

/// `out[:, t] = w·x[:, t] + b`.
pub fn conv1x1(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (c_in, t) = (x.rows(), x.cols());
    let c_out = check_weight(w, c_in, "conv1x1")?;
    let mut out = Tensor::zeros(&[c_out, t]);
    if let Some(b) = b {
        if b.numel() != c_out {
            return Err(shape(format!("bias of {} for {c_out} outputs", b.numel())));
        }
        for (row, &bv) in out.data_mut().chunks_exact_mut(t.max(1)).zip(b.data()) {
            row.fill(bv);
        }
    }
    gemm(c_out, c_in, t, w.data(), false, x.data(), false, out.data_mut(), b.is_some());
    Ok(out)
}

/// Two-tap dilated convolution: `w_current·x[:, t] + w_previous·x[:, t-d(t)]`.
pub fn dilated_tap(x: &Tensor, dilation: &Dilation, w_current: &Tensor, w_previous: &Tensor) -> Result<Tensor> {
    let index = GatherIndex::new(x.cols(), dilation, &[])?;
    dilated_tap_indexed(x, &index, w_current, w_previous)
}

pub fn dilated_tap_indexed(
    x: &Tensor,
    index: &GatherIndex,
    w_current: &Tensor,
    w_previous: &Tensor,
) -> Result<Tensor> {
    let (c_in, t) = (x.rows(), x.cols());
    let c_out = check_weight(w_current, c_in, "current tap")?;
    if check_weight(w_previous, c_in, "previous tap")? != c_out {
        return Err(shape("tap weights disagree on output channels"));
    }
    let shifted = gather(x, index)?;
    let mut out = Tensor::zeros(&[c_out, t]);
    gemm(c_out, c_in, t, w_current.data(), false, x.data(), false, out.data_mut(), false);
    gemm(c_out, c_in, t, w_previous.data(), false, shifted.data(), false, out.data_mut(), true);
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `tanh` through one `expm1`, which is faster than libm's tanh and keeps
/// full relative precision near zero.
pub fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp_m1();
    (-e / (2.0 + e)).copysign(x)
}

/// Gated activation `tanh(xf + hf) ⊗ σ(xg + hg)`; also returns the tanh and
/// sigmoid factors for reuse in the backward pass.
pub(crate) fn gated_parts(xf: &Tensor, xg: &Tensor, hf: &Tensor, hg: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    xf.same_shape(xg, "gate inputs")?;
    xf.same_shape(hf, "filter conditioning")?;
    xf.same_shape(hg, "gate conditioning")?;
    let th: Vec<f64> = xf.data().iter().zip(hf.data()).map(|(a, b)| tanh(a + b)).collect();
    let sg: Vec<f64> = xg.data().iter().zip(hg.data()).map(|(a, b)| sigmoid(a + b)).collect();
    let z: Vec<f64> = th.iter().zip(&sg).map(|(a, s)| a * s).collect();
    let dims = xf.shape();
    Ok((
        Tensor::from_vec(dims, z)?,
        Tensor::from_vec(dims, th)?,
        Tensor::from_vec(dims, sg)?,
    ))
}

pub fn gated_unit(xf: &Tensor, xg: &Tensor, hf: &Tensor, hg: &Tensor) -> Result<Tensor> {
    gated_parts(xf, xg, hf, hg).map(|(z, _, _)| z)
}

/// Column-wise softmax of a `[classes, T]` tensor.
pub fn softmax_columns(logits: &Tensor) -> Tensor {
    let t = logits.cols();
    let mut probs = logits.clone();
    if t == 0 {
        return probs;
    }
    let d = probs.data_mut();
    let mut peak = vec![f64::NEG_INFINITY; t];
    for row in d.chunks_exact(t) {
        for (p, &v) in peak.iter_mut().zip(row) {
            *p = p.max(v);
        }
    }
    let mut total = vec![0.0; t];
    for row in d.chunks_exact_mut(t) {
        for ((v, &p), s) in row.iter_mut().zip(&peak).zip(&mut total) {
            *v = (*v - p).exp();
            *s += *v;
        }
    }
    total.iter_mut().for_each(|s| *s = 1.0 / *s);
    for row in d.chunks_exact_mut(t) {
        for (v, &inv) in row.iter_mut().zip(&total) {
            *v *= inv;
        }
    }
    probs
}

/// Mean categorical cross-entropy over columns and its gradient
/// `(softmax - onehot) / T`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[u8]) -> Result<(f64, Tensor)> {
    let (loss, probs) = softmax_ce_parts(logits, targets)?;
    let t = logits.cols();
    let mut grad = probs;
    let d = grad.data_mut();
    for (col, &y) in targets.iter().enumerate() {
        d[y as usize * t + col] -= 1.0;
    }
    let inv = 1.0 / t as f64;
    d.iter_mut().for_each(|v| *v *= inv);
    Ok((loss, grad))
}

pub(crate) fn softmax_ce_parts(logits: &Tensor, targets: &[u8]) -> Result<(f64, Tensor)> {
    let (k, t) = (logits.rows(), logits.cols());
    if targets.len() != t {
        return Err(shape(format!("{} targets for {t} columns", targets.len())));
    }
    if t == 0 {
        return Err(crate::Error::Empty("cross-entropy targets"));
    }
    if let Some(&bad) = targets.iter().find(|&&y| y as usize >= k) {
        return Err(invalid(format!("target {bad} outside {k} classes")));
    }
    let probs = softmax_columns(logits);
    let loss = targets
        .iter()
        .enumerate()
        .map(|(col, &y)| -probs.data()[y as usize * t + col].max(1e-300).ln())
        .sum::<f64>()
        / t as f64;
    Ok((loss, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::random(shape, 1.0, rng)
    }

    #[test]
    fn conv1x1_identity_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rnd(&[3, 7], &mut rng);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(conv1x1(&x, &eye, Some(&Tensor::zeros(&[3]))).unwrap(), x);

        let b = Tensor::from_vec(&[2], vec![0.5, -2.0]).unwrap();
        let y = conv1x1(&x, &Tensor::zeros(&[2, 3]), Some(&b)).unwrap();
        for t in 0..7 {
            assert_eq!((y.get(0, t), y.get(1, t)), (0.5, -2.0));
        }
        assert!(conv1x1(&x, &Tensor::zeros(&[2, 4]), None).is_err());
    }

    #[test]
    fn conv1x1_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rnd(&[2, 9], &mut rng);
        let w = rnd(&[3, 2], &mut rng);
        let b = rnd(&[3], &mut rng);
        let y = conv1x1(&x, &w, Some(&b)).unwrap();
        for o in 0..3 {
            for t in 0..9 {
                let mut acc = b.data()[o];
                for i in 0..2 {
                    acc += w.get(o, i) * x.get(i, t);
                }
                assert!((y.get(o, t) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tap_degenerates_and_impulse_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rnd(&[3, 12], &mut rng);
        let wc = rnd(&[4, 3], &mut rng);
        let zero = Tensor::zeros(&[4, 3]);
        let a = dilated_tap(&x, &Dilation::Constant(3), &wc, &zero).unwrap();
        let b = conv1x1(&x, &wc, None).unwrap();
        assert!(a.max_abs_diff(&b) == 0.0);

        let mut impulse = Tensor::zeros(&[3, 20]);
        impulse.data_mut()[20 + 5] = 1.0;
        let wp = rnd(&[4, 3], &mut rng);
        let y = dilated_tap(&impulse, &Dilation::Constant(4), &wc, &wp).unwrap();
        for t in 0..20 {
            let nonzero = (0..4).any(|o| y.get(o, t) != 0.0);
            assert_eq!(nonzero, t == 5 || t == 9, "t = {t}");
        }
    }

    #[test]
    fn varying_tap_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t_len = 15;
        let x = rnd(&[2, t_len], &mut rng);
        let wc = rnd(&[3, 2], &mut rng);
        let wp = rnd(&[3, 2], &mut rng);
        let ds: Vec<u32> = (1..=t_len as u32).collect();
        let y = dilated_tap(&x, &Dilation::PerSample(ds.clone()), &wc, &wp).unwrap();
        for o in 0..3 {
            for t in 0..t_len {
                let mut acc = 0.0;
                for i in 0..2 {
                    acc += wc.get(o, i) * x.get(i, t);
                    if t >= ds[t] as usize {
                        acc += wp.get(o, i) * x.get(i, t - ds[t] as usize);
                    }
                }
                assert!((y.get(o, t) - acc).abs() < 1e-12);
            }
        }
        let bad = Dilation::PerSample(vec![1, 0, 2]);
        assert!(dilated_tap(&rnd(&[2, 3], &mut rng), &bad, &wc, &wp).is_err());
        assert!(GatherIndex::new(4, &Dilation::Constant(0), &[]).is_err());
    }

    #[test]
    fn segments_block_cross_window_lookback() {
        let idx = GatherIndex::new(6, &Dilation::Constant(2), &[3, 3]).unwrap();
        assert_eq!(
            idx.sources(),
            &[NO_SOURCE, NO_SOURCE, 0, NO_SOURCE, NO_SOURCE, 3]
        );
        assert!(GatherIndex::new(6, &Dilation::Constant(1), &[3, 2]).is_err());
    }

    #[test]
    fn gated_unit_cases() {
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(gated_unit(&z, &z, &z, &z).unwrap(), z);

        let big = Tensor::from_vec(&[2, 3], vec![40.0; 6]).unwrap();
        let y = gated_unit(&big, &z, &z, &z).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.5).abs() < 1e-6));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b, c, d) = (
            rnd(&[3, 4], &mut rng),
            rnd(&[3, 4], &mut rng),
            rnd(&[3, 4], &mut rng),
            rnd(&[3, 4], &mut rng),
        );
        let y = gated_unit(&a, &b, &c, &d).unwrap();
        for i in 0..12 {
            let f = (a.data()[i] + c.data()[i]).tanh();
            assert!((tanh(a.data()[i] + c.data()[i]) - f).abs() < 1e-15);
            let g = 1.0 / (1.0 + (-(b.data()[i] + d.data()[i])).exp());
            assert!((y.data()[i] - f * g).abs() < 1e-12);
        }
        assert!(gated_unit(&a, &b, &c, &Tensor::zeros(&[3, 5])).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let (loss, _) = softmax_cross_entropy(&Tensor::zeros(&[256, 4]), &[0, 5, 255, 9]).unwrap();
        assert!((loss - 256f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::zeros(&[256, 1]);
        logits.data_mut()[17] = 60.0;
        let (loss, _) = softmax_cross_entropy(&logits, &[17]).unwrap();
        assert!(loss < 1e-20);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = Tensor::random(&[256, 5], 3.0, &mut rng);
        let targets: Vec<u8> = (0..5).map(|_| rng.gen()).collect();
        let (loss, grad) = softmax_cross_entropy(&logits, &targets).unwrap();
        let mut oracle = 0.0;
        for (col, &y) in targets.iter().enumerate() {
            let z: f64 = (0..256).map(|r| logits.get(r, col).exp()).sum();
            oracle += -(logits.get(y as usize, col).exp() / z).ln();
            let colsum: f64 = (0..256).map(|r| grad.get(r, col)).sum();
            assert!(colsum.abs() < 1e-12);
        }
        assert!((loss - oracle / 5.0).abs() < 1e-10);

        let probs = softmax_columns(&logits);
        for col in 0..5 {
            let s: f64 = (0..256).map(|r| probs.get(r, col)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(softmax_cross_entropy(&Tensor::zeros(&[4, 1]), &[7]).is_err());
    }
}
