//! Teacher-forced training on batches of contiguous sample windows.

use std::sync::Arc;

use rand::Rng;

use crate::codec::{mulaw_encode, upsample_features, AuxMatrix, FrameFeatures, WaveBuffer, DEFAULT_MU};
use crate::dilation::{build_plan, pitch_dilation_factors, LayerKind};
use crate::error::{invalid, shape, Error, Result};
use crate::net::{previous_tokens, Adam, Dilation, GatherIndex, Tape, Tensor, Var, NO_TOKEN};
use crate::vocoder::VocoderParams;

/// One utterance as codes plus per-sample conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub codes: Vec<u8>,
    pub aux: AuxMatrix,
}

impl TrainingSequence {
    pub fn new(codes: Vec<u8>, aux: AuxMatrix) -> Result<Self> {
        if codes.len() != aux.rows() {
            return Err(shape(format!("{} codes but {} conditioning rows", codes.len(), aux.rows())));
        }
        if codes.is_empty() {
            return Err(Error::Empty("training sequence"));
        }
        Ok(Self { codes, aux })
    }

    /// Pairs a waveform with its frame features; the waveform is cut to the
    /// whole frames the features cover.
    pub fn from_wave(wave: &WaveBuffer, features: &FrameFeatures) -> Result<Self> {
        let aux = upsample_features(features)?;
        if wave.len() < aux.rows() {
            return Err(shape(format!(
                "waveform of {} samples shorter than {} feature samples",
                wave.len(),
                aux.rows()
            )));
        }
        let codes = mulaw_encode(&wave.truncated(aux.rows()), DEFAULT_MU)?.codes;
        Self::new(codes, aux)
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn window(&self, start: usize, len: usize) -> Self {
        Self {
            codes: self.codes[start..start + len].to_vec(),
            aux: self.aux.slice_rows(start, len),
        }
    }
}

/// Windows concatenated along time; lookbacks never cross window boundaries.
#[derive(Debug, Clone)]
pub struct Batch {
    inputs: Arc<Vec<u16>>,
    inputs_before: Arc<Vec<u16>>,
    targets: Arc<Vec<u8>>,
    aux: Tensor,
    /// One gather index per residual block, in network order.
    indices: Vec<Arc<GatherIndex>>,
}

impl Batch {
    pub fn new(params: &VocoderParams, windows: &[TrainingSequence]) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let segments: Vec<usize> = windows.iter().map(TrainingSequence::len).collect();
        let total: usize = segments.iter().sum();
        let mut codes = Vec::with_capacity(total);
        let mut aux_data = Vec::with_capacity(total * params.aux_dim);
        for w in windows {
            if w.aux.cols() != params.aux_dim {
                return Err(shape(format!("window conditioning has {} columns", w.aux.cols())));
            }
            codes.extend_from_slice(&w.codes);
            aux_data.extend_from_slice(w.aux.data());
        }
        let aux = AuxMatrix::new(total, params.aux_dim, aux_data)?;
        let step = GatherIndex::new(total, &Dilation::Constant(1), &segments)?;
        let as_tokens: Vec<u16> = codes.iter().map(|&c| u16::from(c)).collect();
        let inputs = previous_tokens(&as_tokens, &step);
        let inputs_before = previous_tokens(&inputs, &step);
        debug_assert!(inputs.iter().all(|&k| k == NO_TOKEN || k < 256));

        let factors = if params.spec.is_adaptive() {
            pitch_dilation_factors(&aux.f0_column(), params.rate, params.spec.period_divisor)?
        } else {
            Vec::new()
        };
        let plan = build_plan(&params.spec, &factors)?;
        let indices = params
            .spec
            .layers()
            .into_iter()
            .map(|kind| {
                let d = match kind {
                    LayerKind::Fixed(k) => Dilation::Constant(plan.fixed_dilations()[k] as usize),
                    LayerKind::Adaptive(k) => Dilation::PerSample(plan.adaptive_layer(k).to_vec()),
                };
                GatherIndex::new(total, &d, &segments).map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs: Arc::new(inputs),
            inputs_before: Arc::new(inputs_before),
            targets: Arc::new(codes),
            aux: params.prepare_aux(&aux)?,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Records the forward pass and returns `(logits, mean CE loss)`.
    pub(crate) fn record(&self, params: &VocoderParams, tape: &mut Tape) -> Result<(Var, Var)> {
        if self.indices.len() != params.spec.layer_count() {
            return Err(invalid("batch was assembled for a different architecture"));
        }
        let store = &params.store;
        let e = params.entry_ids();
        let (ec, ep, eb) = (tape.param(store, e.cur), tape.param(store, e.prev), tape.param(store, e.bias));
        let mut x = tape.embed_pair(self.inputs.clone(), self.inputs_before.clone(), ec, ep, eb)?;
        let aux = tape.input(self.aux.clone());
        let mut skip_sum: Option<Var> = None;
        for (b, index) in params.block_ids().iter().zip(&self.indices) {
            let mut p = |id| tape.param(store, id);
            let (tcf, tpf, tcg, tpg) = (p(b.tap_cur_f), p(b.tap_prev_f), p(b.tap_cur_g), p(b.tap_prev_g));
            let (af, afb, ag, agb) = (p(b.aux_f), p(b.aux_f_bias), p(b.aux_g), p(b.aux_g_bias));
            let (rw, rb, sw, sb) = (p(b.res), p(b.res_bias), p(b.skip), p(b.skip_bias));
            let xf = tape.dilated_tap(x, index.clone(), tcf, tpf)?;
            let xg = tape.dilated_tap(x, index.clone(), tcg, tpg)?;
            let hf = tape.conv1x1(aux, af, Some(afb))?;
            let hg = tape.conv1x1(aux, ag, Some(agb))?;
            let z = tape.gated(xf, xg, hf, hg)?;
            let skip = tape.conv1x1(z, sw, Some(sb))?;
            skip_sum = Some(match skip_sum {
                Some(acc) => tape.add(acc, skip)?,
                None => skip,
            });
            let res = tape.conv1x1(z, rw, Some(rb))?;
            x = tape.add(x, res)?;
        }
        let h = params.head_ids();
        let skip_sum = skip_sum.ok_or_else(|| invalid("network has no residual blocks"))?;
        let (hw, hb, ow, ob) = (
            tape.param(store, h.hidden),
            tape.param(store, h.hidden_bias),
            tape.param(store, h.out),
            tape.param(store, h.out_bias),
        );
        let a = tape.relu(skip_sum);
        let a = tape.conv1x1(a, hw, Some(hb))?;
        let a = tape.relu(a);
        let logits = tape.conv1x1(a, ow, Some(ob))?;
        let loss = tape.softmax_ce(logits, self.targets.clone())?;
        Ok((logits, loss))
    }

    /// Mean cross-entropy without touching gradients or weights.
    pub fn loss(&self, params: &VocoderParams) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, loss) = self.record(params, &mut tape)?;
        Ok(tape.scalar(loss))
    }

    /// Training-path logits `[256, T]` in double precision.
    pub fn logits(&self, params: &VocoderParams) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (logits, _) = self.record(params, &mut tape)?;
        Ok(tape.value(logits).clone())
    }
}

/// One Adam step on the batch's mean cross-entropy; returns the loss measured
/// before the update.
pub fn train_step(params: &mut VocoderParams, batch: &Batch, optimizer: &mut Adam) -> Result<f64> {
    let mut tape = Tape::new();
    let (_, loss) = batch.record(params, &mut tape)?;
    params.store.zero_grad();
    tape.backward(loss, &mut params.store)?;
    optimizer.step(&mut params.store);
    Ok(tape.scalar(loss))
}

/// Draws batches of random contiguous windows from a set of utterances.
#[derive(Debug, Clone)]
pub struct WindowSampler {
    sequences: Vec<TrainingSequence>,
    pub window: usize,
    pub windows_per_batch: usize,
}

impl WindowSampler {
    pub fn new(sequences: Vec<TrainingSequence>, window: usize, windows_per_batch: usize) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Empty("training utterances"));
        }
        if window == 0 || windows_per_batch == 0 {
            return Err(invalid("window length and count must be positive"));
        }
        Ok(Self {
            sequences,
            window,
            windows_per_batch,
        })
    }

    pub fn sequences(&self) -> &[TrainingSequence] {
        &self.sequences
    }

    /// Windows for one batch; utterances are chosen in proportion to length.
    pub fn draw(&self, rng: &mut impl Rng) -> Vec<TrainingSequence> {
        let total: usize = self.sequences.iter().map(TrainingSequence::len).sum();
        (0..self.windows_per_batch)
            .map(|_| {
                let mut pick = rng.gen_range(0..total);
                let seq = self
                    .sequences
                    .iter()
                    .find(|s| {
                        if pick < s.len() {
                            true
                        } else {
                            pick -= s.len();
                            false
                        }
                    })
                    .expect("pick below total length");
                let len = self.window.min(seq.len());
                let start = rng.gen_range(0..=seq.len() - len);
                seq.window(start, len)
            })
            .collect()
    }

    pub fn batch(&self, params: &VocoderParams, rng: &mut impl Rng) -> Result<Batch> {
        Batch::new(params, &self.draw(rng))
    }
}
