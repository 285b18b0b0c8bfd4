//! Autoregressive sampling with per-layer ring-buffer caches.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{mulaw_decode, AuxMatrix, MuLawCode, WaveBuffer, DEFAULT_MU};
use crate::dilation::DilationPlan;
use crate::error::{invalid, shape, Result};
use crate::net::{Real, Tensor};
use crate::vocoder::infer::{Network, Scratch};
use crate::vocoder::VocoderParams;

/// History of one layer's inputs, sized to that layer's largest lookback.
#[derive(Debug, Clone)]
struct Ring<T: Real> {
    capacity: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Ring<T> {
    fn new(capacity: usize, width: usize) -> Self {
        Self {
            capacity,
            width,
            data: vec![T::zero(); capacity * width],
        }
    }

    fn slot(&self, t: usize) -> &[T] {
        let s = t % self.capacity;
        &self.data[s * self.width..(s + 1) * self.width]
    }

    fn store(&mut self, t: usize, col: &[T]) {
        let s = t % self.capacity;
        self.data[s * self.width..(s + 1) * self.width].copy_from_slice(col);
    }
}

/// Incremental forward state for one utterance.
#[derive(Debug, Clone)]
pub struct GenerationState<T: Real> {
    rings: Vec<Ring<T>>,
    cursor: usize,
    last: Option<u8>,
    before_last: Option<u8>,
    aux_key: Vec<T>,
    projections: Vec<(Vec<T>, Vec<T>)>,
    x: Vec<T>,
    skip_sum: Vec<T>,
    hidden: Vec<T>,
    logits: Vec<T>,
    prev: Vec<T>,
    scratch: Scratch<T>,
}

impl<T: Real> GenerationState<T> {
    /// Ring capacities come from the largest dilation each layer uses in `plan`.
    pub fn new(net: &Network<T>, plan: &DilationPlan) -> Self {
        let r = net.residual;
        let rings = net
            .blocks
            .iter()
            .map(|b| Ring::new(plan.max_dilation(b.kind) as usize, r))
            .collect();
        Self {
            rings,
            cursor: 0,
            last: None,
            before_last: None,
            aux_key: Vec::new(),
            projections: vec![(vec![T::zero(); r], vec![T::zero(); r]); net.blocks.len()],
            x: vec![T::zero(); r],
            skip_sum: vec![T::zero(); net.skip],
            hidden: Vec::new(),
            logits: vec![T::zero(); net.levels],
            prev: vec![T::zero(); r],
            scratch: Scratch::new(r, net.skip),
        }
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Per-layer history capacities.
    pub fn capacities(&self) -> Vec<usize> {
        self.rings.iter().map(|r| r.capacity).collect()
    }

    /// Logits for the current step given its normalised conditioning column.
    pub fn logits(&mut self, net: &Network<T>, plan: &DilationPlan, aux: &[T]) -> &[T] {
        let t = self.cursor;
        net.entry_from_codes(self.last, self.before_last, &mut self.x);
        let refresh = self.aux_key.as_slice() != aux;
        if refresh {
            self.aux_key.clear();
            self.aux_key.extend_from_slice(aux);
        }
        self.skip_sum.iter_mut().for_each(|v| *v = T::zero());
        for (i, block) in net.blocks.iter().enumerate() {
            let (hf, hg) = &mut self.projections[i];
            if refresh {
                block.project_aux(aux, hf, hg);
            }
            let d = Network::dilation(block, plan, t);
            let ring = &mut self.rings[i];
            // read the lookback before the current column may reuse its slot
            if t >= d {
                self.prev.copy_from_slice(ring.slot(t - d));
            } else {
                self.prev.iter_mut().for_each(|v| *v = T::zero());
            }
            ring.store(t, &self.x);
            block.step(&mut self.x, &self.prev, hf, hg, &mut self.skip_sum, &mut self.scratch);
        }
        net.head(&self.skip_sum, &mut self.hidden, &mut self.logits);
        &self.logits
    }

    /// Feeds the emitted code back and advances the cursor.
    pub fn push(&mut self, code: u8) {
        self.before_last = self.last;
        self.last = Some(code);
        self.cursor += 1;
    }
}

/// Rule for turning logits into the next code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    /// Draw from `softmax(logits / temperature)`.
    Temperature(f64),
    Argmax,
}

impl Sampling {
    /// Temperatures at or below zero select the argmax.
    pub fn from_temperature(temperature: f64) -> Self {
        if temperature > 0.0 {
            Self::Temperature(temperature)
        } else {
            Self::Argmax
        }
    }
}

fn choose<T: Real>(logits: &[T], sampling: Sampling, rng: &mut ChaCha8Rng) -> Result<u8> {
    let argmax = || {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if v.as_f64() > logits[best].as_f64() {
                best = i;
            }
        }
        best
    };
    let index = match sampling {
        Sampling::Argmax => argmax(),
        Sampling::Temperature(temp) => {
            let peak = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|v| ((v.as_f64() - peak) / temp).exp()).collect();
            WeightedIndex::new(&weights)
                .map_err(|e| invalid(format!("degenerate output distribution: {e}")))?
                .sample(rng)
        }
    };
    u8::try_from(index).map_err(|_| invalid("output level exceeds 8 bits"))
}

/// Generated codes, waveform and the per-step logits `[levels, T]` when traced.
#[derive(Debug, Clone)]
pub struct Generated<T: Real> {
    pub codes: MuLawCode,
    pub wave: WaveBuffer,
    pub logits: Option<Tensor<T>>,
}

/// Samples `aux.rows()` codes one at a time, feeding each back as input.
pub fn generate<T: Real>(
    params: &VocoderParams,
    aux: &AuxMatrix,
    plan: &DilationPlan,
    seed: u64,
    sampling: Sampling,
    trace: bool,
) -> Result<Generated<T>> {
    let n = aux.rows();
    plan.covers(n)?;
    if let Sampling::Temperature(t) = sampling {
        if !(t.is_finite() && t > 0.0) {
            return Err(invalid("temperature must be positive and finite"));
        }
    }
    let net = params.network::<T>();
    let prepared = params.prepare_aux(aux)?;
    let a = params.aux_dim;
    if prepared.rows() != a {
        return Err(shape("conditioning width changed during preparation"));
    }
    let mut state = GenerationState::new(&net, plan);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codes = Vec::with_capacity(n);
    let mut traced = trace.then(|| Tensor::<T>::zeros(&[net.levels(), n]));
    let mut column = vec![T::zero(); a];
    for t in 0..n {
        for (j, c) in column.iter_mut().enumerate() {
            *c = T::from_f64(prepared.get(j, t));
        }
        let logits = state.logits(&net, plan, &column);
        if let Some(tr) = traced.as_mut() {
            for (k, &v) in logits.iter().enumerate() {
                tr.data_mut()[k * n + t] = v;
            }
        }
        let code = choose(logits, sampling, &mut rng)?;
        codes.push(code);
        state.push(code);
    }
    let codes = MuLawCode { codes };
    let wave = mulaw_decode(&codes, DEFAULT_MU, params.rate)?;
    Ok(Generated {
        codes,
        wave,
        logits: traced,
    })
}
