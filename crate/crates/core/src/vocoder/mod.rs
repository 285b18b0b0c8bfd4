//! WN / QPNet waveform models: parameter assembly, teacher-forced training and
//! cached autoregressive generation.
//!
//! Network order: a kernel-2 causal entry layer over one-hot μ-law inputs,
//! gated residual blocks (fixed then pitch-adaptive by default), summed skip
//! outputs, then `relu → 1×1 → relu → 1×1 → softmax`.

mod generate;
mod infer;
mod train;

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{AuxMatrix, MULAW_LEVELS};
use crate::dilation::{build_plan, pitch_dilation_factors, ArchitectureSpec, DilationPlan, LayerKind};
use crate::error::{invalid, shape, Error, Result};
use crate::net::{Checkpoint, ParamId, ParamStore, Tensor};

pub use generate::{generate, GenerationState, Generated, Sampling};
pub use infer::{dependence_probe, EntryInput, Network};
pub use train::{train_step, Batch, TrainingSequence, WindowSampler};

/// Parameter handles of one residual block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIds {
    pub kind: LayerKind,
    pub tap_cur_f: ParamId,
    pub tap_prev_f: ParamId,
    pub tap_cur_g: ParamId,
    pub tap_prev_g: ParamId,
    pub aux_f: ParamId,
    pub aux_f_bias: ParamId,
    pub aux_g: ParamId,
    pub aux_g_bias: ParamId,
    pub res: ParamId,
    pub res_bias: ParamId,
    pub skip: ParamId,
    pub skip_bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EntryIds {
    pub cur: ParamId,
    pub prev: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadIds {
    pub hidden: ParamId,
    pub hidden_bias: ParamId,
    pub out: ParamId,
    pub out_bias: ParamId,
}

/// Prefix shared by the two post-skip 1×1 convolutions.
pub const HEAD_PREFIX: &str = "head.";

/// All tensors of a WN or QPNet vocoder plus its conditioning normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct VocoderParams {
    pub spec: ArchitectureSpec,
    pub aux_dim: usize,
    pub rate: u32,
    pub store: ParamStore,
    aux_mean: Vec<f64>,
    aux_scale: Vec<f64>,
}

fn block_prefix(kind: LayerKind) -> String {
    match kind {
        LayerKind::Fixed(k) => format!("fixed.{k:02}."),
        LayerKind::Adaptive(k) => format!("adaptive.{k:02}."),
    }
}

impl VocoderParams {
    /// Random initialisation: weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn build(spec: &ArchitectureSpec, aux_dim: usize, rate: u32, seed: u64) -> Result<Self> {
        spec.validate()?;
        if aux_dim < 1 {
            return Err(invalid("aux dimension must be positive"));
        }
        if rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, s, h, q) = (
            spec.residual_channels,
            spec.skip_channels,
            spec.head_channels,
            spec.quant_levels,
        );
        let mut store = ParamStore::new();
        // one-hot inputs: each column sees exactly two active weights
        store.add("entry.cur", Tensor::uniform_init(&[r, q], 2, &mut rng));
        store.add("entry.prev", Tensor::uniform_init(&[r, q], 2, &mut rng));
        store.add("entry.bias", Tensor::zeros(&[r]));
        for kind in spec.layers() {
            let p = block_prefix(kind);
            for gate in ["f", "g"] {
                store.add(format!("{p}tap.{gate}.cur"), Tensor::uniform_init(&[r, r], 2 * r, &mut rng));
                store.add(format!("{p}tap.{gate}.prev"), Tensor::uniform_init(&[r, r], 2 * r, &mut rng));
            }
            for gate in ["f", "g"] {
                store.add(format!("{p}aux.{gate}.weight"), Tensor::uniform_init(&[r, aux_dim], aux_dim, &mut rng));
                store.add(format!("{p}aux.{gate}.bias"), Tensor::zeros(&[r]));
            }
            store.add(format!("{p}res.weight"), Tensor::uniform_init(&[r, r], r, &mut rng));
            store.add(format!("{p}res.bias"), Tensor::zeros(&[r]));
            store.add(format!("{p}skip.weight"), Tensor::uniform_init(&[s, r], r, &mut rng));
            store.add(format!("{p}skip.bias"), Tensor::zeros(&[s]));
        }
        store.add("head.hidden.weight", Tensor::uniform_init(&[h, s], s, &mut rng));
        store.add("head.hidden.bias", Tensor::zeros(&[h]));
        store.add("head.out.weight", Tensor::uniform_init(&[q, h], h, &mut rng));
        store.add("head.out.bias", Tensor::zeros(&[q]));
        Ok(Self {
            spec: spec.clone(),
            aux_dim,
            rate,
            store,
            aux_mean: vec![0.0; aux_dim],
            aux_scale: vec![1.0; aux_dim],
        })
    }

    fn id(&self, name: &str) -> ParamId {
        self.store
            .find(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from a built vocoder"))
    }

    pub(crate) fn entry_ids(&self) -> EntryIds {
        EntryIds {
            cur: self.id("entry.cur"),
            prev: self.id("entry.prev"),
            bias: self.id("entry.bias"),
        }
    }

    pub(crate) fn block_ids(&self) -> Vec<BlockIds> {
        self.spec
            .layers()
            .into_iter()
            .map(|kind| {
                let p = block_prefix(kind);
                let id = |s: &str| self.id(&format!("{p}{s}"));
                BlockIds {
                    kind,
                    tap_cur_f: id("tap.f.cur"),
                    tap_prev_f: id("tap.f.prev"),
                    tap_cur_g: id("tap.g.cur"),
                    tap_prev_g: id("tap.g.prev"),
                    aux_f: id("aux.f.weight"),
                    aux_f_bias: id("aux.f.bias"),
                    aux_g: id("aux.g.weight"),
                    aux_g_bias: id("aux.g.bias"),
                    res: id("res.weight"),
                    res_bias: id("res.bias"),
                    skip: id("skip.weight"),
                    skip_bias: id("skip.bias"),
                }
            })
            .collect()
    }

    pub(crate) fn head_ids(&self) -> HeadIds {
        HeadIds {
            hidden: self.id("head.hidden.weight"),
            hidden_bias: self.id("head.hidden.bias"),
            out: self.id("head.out.weight"),
            out_bias: self.id("head.out.bias"),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.store.iter().map(|p| p.value.numel()).sum()
    }

    pub fn is_head(name: &str) -> bool {
        name.starts_with(HEAD_PREFIX)
    }

    pub fn aux_normalization(&self) -> (&[f64], &[f64]) {
        (&self.aux_mean, &self.aux_scale)
    }

    /// Fits per-column mean and scale of the transformed conditioning
    /// (log F0 in column 0) over all rows of `sets`.
    pub fn fit_aux_normalization<'a>(&mut self, sets: impl IntoIterator<Item = &'a AuxMatrix>) -> Result<()> {
        let a = self.aux_dim;
        let mut sum = vec![0.0; a];
        let mut sq = vec![0.0; a];
        let mut n = 0usize;
        for m in sets {
            self.check_aux(m)?;
            for t in 0..m.rows() {
                for (j, v) in transformed_row(m.row(t)).enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            n += m.rows();
        }
        if n == 0 {
            return Err(Error::Empty("conditioning rows"));
        }
        for j in 0..a {
            let mean = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - mean * mean).max(0.0);
            self.aux_mean[j] = mean;
            self.aux_scale[j] = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
        }
        Ok(())
    }

    fn check_aux(&self, aux: &AuxMatrix) -> Result<()> {
        if aux.cols() != self.aux_dim {
            return Err(shape(format!(
                "conditioning has {} columns, model expects {}",
                aux.cols(),
                self.aux_dim
            )));
        }
        Ok(())
    }

    /// Normalised conditioning laid out `[aux_dim, T]`.
    pub fn prepare_aux(&self, aux: &AuxMatrix) -> Result<Tensor> {
        self.check_aux(aux)?;
        let (a, t) = (self.aux_dim, aux.rows());
        let mut out = Tensor::zeros(&[a, t]);
        let d = out.data_mut();
        for s in 0..t {
            for (j, v) in transformed_row(aux.row(s)).enumerate() {
                d[j * t + s] = (v - self.aux_mean[j]) / self.aux_scale[j];
            }
        }
        Ok(out)
    }

    /// Dilation plan for conditioning `aux`; purely fixed networks get an
    /// empty adaptive section.
    pub fn plan_for(&self, aux: &AuxMatrix) -> Result<DilationPlan> {
        self.check_aux(aux)?;
        if !self.spec.is_adaptive() {
            return build_plan(&self.spec, &[]);
        }
        if aux.rows() == 0 {
            return Err(Error::Empty("conditioning rows"));
        }
        let factors = pitch_dilation_factors(&aux.f0_column(), self.rate, self.spec.period_divisor)?;
        build_plan(&self.spec, &factors)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        let s = &self.spec;
        ck.set("model", "vocoder");
        ck.set("fixed_layers", s.fixed_layers);
        ck.set("fixed_repeats", s.fixed_repeats);
        ck.set("adaptive_layers", s.adaptive_layers);
        ck.set("adaptive_repeats", s.adaptive_repeats);
        ck.set("residual_channels", s.residual_channels);
        ck.set("skip_channels", s.skip_channels);
        ck.set("head_channels", s.head_channels);
        ck.set("quant_levels", s.quant_levels);
        ck.set("period_divisor", s.period_divisor);
        ck.set("order", s.order);
        ck.set("aux_dim", self.aux_dim);
        ck.set("rate", self.rate);
        for p in self.store.iter() {
            ck.push(p.name.clone(), p.value.clone());
        }
        let vec_tensor = |v: &[f64]| Tensor::from_vec(&[v.len()], v.to_vec()).expect("vector shape");
        ck.push("norm.mean", vec_tensor(&self.aux_mean));
        ck.push("norm.scale", vec_tensor(&self.aux_scale));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.get("model") != Some("vocoder") {
            return Err(Error::Format {
                kind: "checkpoint",
                reason: "not a vocoder checkpoint".into(),
            });
        }
        let spec = ArchitectureSpec {
            fixed_layers: ck.parse("fixed_layers")?,
            fixed_repeats: ck.parse("fixed_repeats")?,
            adaptive_layers: ck.parse("adaptive_layers")?,
            adaptive_repeats: ck.parse("adaptive_repeats")?,
            residual_channels: ck.parse("residual_channels")?,
            skip_channels: ck.parse("skip_channels")?,
            head_channels: ck.parse("head_channels")?,
            quant_levels: ck.parse("quant_levels")?,
            period_divisor: ck.parse("period_divisor")?,
            order: ck.parse("order")?,
        };
        let mut params = Self::build(&spec, ck.parse("aux_dim")?, ck.parse("rate")?, 0)?;
        let (norm, weights): (Vec<_>, Vec<_>) = ck.tensors.iter().cloned().partition(|(n, _)| n.starts_with("norm."));
        params.store.load_values(&weights)?;
        let take = |name: &str| -> Result<Vec<f64>> {
            let t = norm
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| invalid(format!("checkpoint lacks {name}")))?;
            if t.numel() != params.aux_dim {
                return Err(shape(format!("{name} has {} entries", t.numel())));
            }
            Ok(t.data().to_vec())
        };
        params.aux_mean = take("norm.mean")?;
        params.aux_scale = take("norm.scale")?;
        if params.aux_scale.iter().any(|&s| !(s > 0.0)) {
            return Err(invalid("normalisation scale must be positive"));
        }
        Ok(params)
    }

    pub fn save(&self, w: impl Write) -> Result<()> {
        self.to_checkpoint().write_to(w)
    }

    pub fn load(r: impl Read) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read_from(r)?)
    }

    /// Single- or double-precision inference copy of the weights.
    pub fn network<T: crate::net::Real>(&self) -> Network<T> {
        Network::from_params(self)
    }

    /// Batch teacher-forced logits `[256, T]`: input `t` is the one-hot of
    /// `codes[t-1]`, position 0 sees no input.
    pub fn teacher_forced_forward<T: crate::net::Real>(
        &self,
        codes: &[u8],
        aux: &AuxMatrix,
        plan: &DilationPlan,
    ) -> Result<Tensor<T>> {
        if aux.rows() != codes.len() {
            return Err(shape(format!(
                "{} codes but {} conditioning rows",
                codes.len(),
                aux.rows()
            )));
        }
        let prepared = self.prepare_aux(aux)?.cast::<T>();
        self.network::<T>()
            .forward(EntryInput::Codes(codes), &prepared, plan)
    }
}

/// Row with continuous F0 replaced by its natural log.
fn transformed_row(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    row.iter()
        .enumerate()
        .map(|(j, &v)| if j == 0 { v.max(1e-6).ln() } else { v })
}

/// Levels of the output distribution.
pub const OUTPUT_LEVELS: usize = MULAW_LEVELS;

#[cfg(test)]
mod tests;
