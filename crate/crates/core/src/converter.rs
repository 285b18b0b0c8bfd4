//! Framewise DNN mapping of source mel-cepstra to target mel-cepstra,
//! trajectory generation over static+delta predictions, global-variance
//! postfiltering and log-domain F0 conversion.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::FrameFeatures;
use crate::error::{invalid, shape, Error, Result};
use crate::net::{Adam, AdamConfig, Checkpoint, ParamId, ParamStore, Tape, Tensor};

const SIGMA_FLOOR: f64 = 1e-6;
const FLAT_VARIANCE: f64 = 1e-20;

/// Appends `0.5·(c[n+1] − c[n−1])` to every frame, replicating the edge frames.
pub fn append_deltas(statics: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let t = statics.len();
    if t == 0 {
        return Err(Error::Empty("static feature sequence"));
    }
    let m = statics[0].len();
    if statics.iter().any(|f| f.len() != m) {
        return Err(shape("frames differ in dimension"));
    }
    Ok((0..t)
        .map(|n| {
            let (next, prev) = (&statics[(n + 1).min(t - 1)], &statics[n.saturating_sub(1)]);
            let mut row = statics[n].clone();
            row.extend(next.iter().zip(prev).map(|(a, b)| 0.5 * (a - b)));
            row
        })
        .collect())
}

/// Delta-window row `n` as `(column, coefficient)` pairs, edges replicated.
fn delta_row(n: usize, t: usize) -> [(usize, f64); 2] {
    [((n + 1).min(t - 1), 0.5), (n.saturating_sub(1), -0.5)]
}

/// Maximum-likelihood static trajectory from per-frame `[static | delta]`
/// means and the diagonal variances of those `2M` dimensions.
///
/// Solves `(Wᵀ Σ⁻¹ W) c = Wᵀ Σ⁻¹ μ` per dimension; the system is
/// pentadiagonal and is factored with a banded Cholesky.
pub fn mlpg(means: &[Vec<f64>], variances: &[f64]) -> Result<Vec<Vec<f64>>> {
    let t = means.len();
    if t == 0 {
        return Err(Error::Empty("mean sequence"));
    }
    let m2 = variances.len();
    if m2 == 0 || m2 % 2 != 0 {
        return Err(shape(format!("{m2} variances cannot split into static and delta halves")));
    }
    if means.iter().any(|f| f.len() != m2) {
        return Err(shape("mean frames must match the variance dimension"));
    }
    if variances.iter().any(|&v| !(v > 0.0)) {
        return Err(invalid("variances must be positive"));
    }
    let m = m2 / 2;
    let mut out = vec![vec![0.0; m]; t];
    let mut band = vec![[0.0f64; 3]; t];
    let mut rhs = vec![0.0; t];
    for d in 0..m {
        let (ws, wd) = (1.0 / variances[d], 1.0 / variances[m + d]);
        for n in 0..t {
            band[n] = [ws, 0.0, 0.0];
            rhs[n] = ws * means[n][d];
        }
        for n in 0..t {
            let row = delta_row(n, t);
            for &(i, ci) in &row {
                rhs[i] += wd * ci * means[n][m + d];
                for &(j, cj) in &row {
                    if j >= i {
                        band[i][j - i] += wd * ci * cj;
                    }
                }
            }
        }
        let c = solve_banded(&mut band, &mut rhs);
        for n in 0..t {
            out[n][d] = c[n];
        }
    }
    Ok(out)
}

/// In-place `L Lᵀ` factorisation of a symmetric positive-definite matrix
/// with two off-diagonals (`band[i][k] = A[i][i+k]`), then two triangular
/// solves.
fn solve_banded(band: &mut [[f64; 3]], rhs: &mut [f64]) -> Vec<f64> {
    let t = band.len();
    // After factoring, band[i][k] holds L[i+k][i].
    for i in 0..t {
        for k in 1..=2.min(i) {
            let j = i - k;
            // L[i][j] contributions to A[i][i..].
            for l in 0..=(2 - k) {
                band[i][l] -= band[j][k] * band[j][k + l];
            }
        }
        let diag = band[i][0];
        assert!(diag > 0.0, "trajectory system lost positive definiteness");
        let root = diag.sqrt();
        band[i][0] = root;
        for k in 1..=2 {
            band[i][k] /= root;
        }
    }
    let mut y = rhs.to_vec();
    for i in 0..t {
        for k in 1..=2.min(i) {
            y[i] -= band[i - k][k] * y[i - k];
        }
        y[i] /= band[i][0];
    }
    for i in (0..t).rev() {
        for k in 1..=2 {
            if i + k < t {
                y[i] -= band[i][k] * y[i + k];
            }
        }
        y[i] /= band[i][0];
    }
    y
}

fn mean_and_variance(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Rescales each dimension `d ≥ 1` around its mean so that its variance over
/// the utterance equals `gv_target[d]`. Dimension 0 and flat dimensions pass
/// through.
pub fn gv_postfilter(trajectory: &[Vec<f64>], gv_target: &[f64]) -> Result<Vec<Vec<f64>>> {
    if trajectory.len() < 2 {
        return Err(invalid("global variance needs at least two frames"));
    }
    let m = gv_target.len();
    if trajectory.iter().any(|f| f.len() != m) {
        return Err(shape("trajectory and variance target differ in dimension"));
    }
    if gv_target.iter().any(|&v| !(v > 0.0)) {
        return Err(invalid("variance targets must be positive"));
    }
    let mut out = trajectory.to_vec();
    for d in 1..m {
        let (mean, var) = mean_and_variance(trajectory.iter().map(|f| f[d]));
        if var <= FLAT_VARIANCE {
            continue;
        }
        let gain = (gv_target[d] / var).sqrt();
        for (o, f) in out.iter_mut().zip(trajectory) {
            o[d] = gain * (f[d] - mean) + mean;
        }
    }
    Ok(out)
}

/// Mean and standard deviation of voiced log F0 for both speakers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogF0Stats {
    pub source_mean: f64,
    pub source_std: f64,
    pub target_mean: f64,
    pub target_std: f64,
}

impl LogF0Stats {
    pub fn from_voiced(source_hz: &[f64], target_hz: &[f64]) -> Result<Self> {
        let moments = |hz: &[f64], who: &str| -> Result<(f64, f64)> {
            if hz.is_empty() {
                return Err(invalid(format!("{who} has no voiced frames")));
            }
            if hz.iter().any(|&f| !(f > 0.0)) {
                return Err(invalid(format!("{who} voiced F0 must be positive")));
            }
            let (mean, var) = mean_and_variance(hz.iter().map(|f| f.ln()));
            Ok((mean, var.sqrt()))
        };
        let (source_mean, source_std) = moments(source_hz, "source")?;
        let (target_mean, target_std) = moments(target_hz, "target")?;
        let stats = Self {
            source_mean,
            source_std,
            target_mean,
            target_std,
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.source_std > 0.0) {
            return Err(invalid("source log-F0 spread is zero"));
        }
        if !(self.target_std >= 0.0) || !self.source_mean.is_finite() || !self.target_mean.is_finite() {
            return Err(invalid("log-F0 statistics must be finite"));
        }
        Ok(())
    }
}

/// Linear map in the log domain; non-positive (unvoiced) values stay as they are.
pub fn transform_logf0(f0: &[f64], stats: &LogF0Stats) -> Result<Vec<f64>> {
    stats.validate()?;
    Ok(f0
        .iter()
        .map(|&f| {
            if f > 0.0 {
                ((f.ln() - stats.source_mean) / stats.source_std * stats.target_std + stats.target_mean).exp()
            } else {
                f
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConverterConfig {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ConverterConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 2,
            hidden_units: 64,
            epochs: 300,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Feedforward layer ids: tanh hidden layers then a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct ConverterNet {
    layers: Vec<(ParamId, ParamId)>,
}

/// Normalised inputs, targets and per-dimension weights `1/Σ` over all
/// training frames.
#[derive(Debug, Clone)]
pub struct TrainingFrames {
    inputs: Tensor,
    targets: Arc<Tensor>,
    weights: Arc<Vec<f64>>,
}

impl TrainingFrames {
    pub fn frames(&self) -> usize {
        self.inputs.cols()
    }
}

impl ConverterNet {
    fn build(store: &mut ParamStore, input: usize, output: usize, cfg: &ConverterConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(cfg.hidden_layers + 1);
        let mut width = input;
        for l in 0..=cfg.hidden_layers {
            let out = if l == cfg.hidden_layers { output } else { cfg.hidden_units };
            let w = store.add(format!("dnn.{l}.weight"), Tensor::uniform_init(&[out, width], width, rng));
            let b = store.add(format!("dnn.{l}.bias"), Tensor::zeros(&[out]));
            layers.push((w, b));
            width = out;
        }
        Self { layers }
    }

    fn output_bias(&self) -> ParamId {
        self.layers.last().expect("output layer").1
    }

    fn record(&self, store: &ParamStore, tape: &mut Tape, inputs: &Tensor) -> Result<crate::net::Var> {
        let mut h = tape.input(inputs.clone());
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            h = tape.conv1x1(h, w, Some(b))?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Mean over frames of the `1/Σ`-weighted squared error; accumulates
    /// parameter gradients when `backward` is set.
    pub fn objective(&self, store: &mut ParamStore, data: &TrainingFrames, backward: bool) -> Result<f64> {
        let mut tape = Tape::new();
        let pred = self.record(store, &mut tape, &data.inputs)?;
        let loss = tape.weighted_sse(pred, data.targets.clone(), data.weights.clone(), 1.0 / data.frames() as f64)?;
        if backward {
            tape.backward(loss, store)?;
        }
        Ok(tape.scalar(loss))
    }
}

/// Trained source-to-target mapping plus everything needed to post-process
/// its output.
#[derive(Debug, Clone)]
pub struct ConversionModel {
    pub store: ParamStore,
    net: ConverterNet,
    hidden_layers: usize,
    hidden_units: usize,
    input_mean: Vec<f64>,
    input_scale: Vec<f64>,
    /// Diagonal variance of the target `[static | delta]` vectors.
    pub sigma: Vec<f64>,
    pub gv_target: Vec<f64>,
    pub logf0: LogF0Stats,
}

/// Frame sequences as a `[dims, T]` tensor.
fn columns(frames: &[Vec<f64>]) -> Tensor {
    let (t, d) = (frames.len(), frames.first().map_or(0, Vec::len));
    let mut out = Tensor::zeros(&[d, t]);
    let od = out.data_mut();
    for (n, f) in frames.iter().enumerate() {
        for (k, &v) in f.iter().enumerate() {
            od[k * t + n] = v;
        }
    }
    out
}

fn rows(x: &Tensor) -> Vec<Vec<f64>> {
    let (d, t) = (x.rows(), x.cols());
    (0..t).map(|n| (0..d).map(|k| x.data()[k * t + n]).collect()).collect()
}

fn paired_frames(pairs: &[(&FrameFeatures, &FrameFeatures)]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if pairs.is_empty() {
        return Err(Error::Empty("parallel utterance list"));
    }
    let (mut src, mut tgt) = (Vec::new(), Vec::new());
    for (i, (s, t)) in pairs.iter().enumerate() {
        if s.frame_count() != t.frame_count() {
            return Err(shape(format!(
                "pair {i}: {} source frames vs {} target frames",
                s.frame_count(),
                t.frame_count()
            )));
        }
        if s.mcep_dim() != pairs[0].0.mcep_dim() || t.mcep_dim() != pairs[0].0.mcep_dim() {
            return Err(shape(format!("pair {i}: mel-cepstral order differs")));
        }
        src.extend(append_deltas(&s.mcep)?);
        tgt.extend(append_deltas(&t.mcep)?);
    }
    Ok((src, tgt))
}

fn column_moments(frames: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = frames[0].len();
    (0..d).map(|k| mean_and_variance(frames.iter().map(|f| f[k]))).unzip()
}

impl ConversionModel {
    fn untrained(
        pairs: &[(&FrameFeatures, &FrameFeatures)],
        cfg: &ConverterConfig,
    ) -> Result<(Self, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if cfg.hidden_units == 0 {
            return Err(invalid("hidden layers need at least one unit"));
        }
        let (src, tgt) = paired_frames(pairs)?;
        let (input_mean, input_var) = column_moments(&src);
        let input_scale = input_var.iter().map(|&v| if v > FLAT_VARIANCE { v.sqrt() } else { 1.0 }).collect();
        let (target_mean, target_var) = column_moments(&tgt);
        let sigma: Vec<f64> = target_var.iter().map(|&v| v.max(SIGMA_FLOOR)).collect();
        let m = sigma.len() / 2;
        let gv_target: Vec<f64> = {
            let per_utt: Vec<Vec<f64>> = pairs
                .iter()
                .map(|(_, t)| column_moments(&t.mcep).1)
                .collect();
            (0..m)
                .map(|d| (per_utt.iter().map(|v| v[d]).sum::<f64>() / per_utt.len() as f64).max(SIGMA_FLOOR))
                .collect()
        };
        let voiced = |f: &FrameFeatures| f.voiced_f0().into_iter().filter(|&v| v > 0.0).collect::<Vec<_>>();
        let source_f0: Vec<f64> = pairs.iter().flat_map(|(s, _)| voiced(s)).collect();
        let target_f0: Vec<f64> = pairs.iter().flat_map(|(_, t)| voiced(t)).collect();
        let logf0 = LogF0Stats::from_voiced(&source_f0, &target_f0)?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let net = ConverterNet::build(&mut store, 2 * m, 2 * m, cfg, &mut rng);
        store.get_mut(net.output_bias()).value.data_mut().copy_from_slice(&target_mean);
        let model = Self {
            store,
            net,
            hidden_layers: cfg.hidden_layers,
            hidden_units: cfg.hidden_units,
            input_mean,
            input_scale,
            sigma,
            gv_target,
            logf0,
        };
        Ok((model, src, tgt))
    }

    pub fn static_dim(&self) -> usize {
        self.sigma.len() / 2
    }

    fn normalised(&self, source_sd: &[Vec<f64>]) -> Result<Tensor> {
        let dim = self.input_mean.len();
        if let Some(bad) = source_sd.iter().find(|f| f.len() != dim) {
            return Err(shape(format!("frame of {} values, model expects {dim}", bad.len())));
        }
        let scaled: Vec<Vec<f64>> = source_sd
            .iter()
            .map(|f| {
                f.iter()
                    .zip(&self.input_mean)
                    .zip(&self.input_scale)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect()
            })
            .collect();
        Ok(columns(&scaled))
    }

    /// Stacks every aligned pair into one full-batch training set.
    pub fn training_frames(&self, pairs: &[(&FrameFeatures, &FrameFeatures)]) -> Result<TrainingFrames> {
        let (src, tgt) = paired_frames(pairs)?;
        if tgt[0].len() != self.sigma.len() {
            return Err(shape("target order does not match the model"));
        }
        Ok(TrainingFrames {
            inputs: self.normalised(&src)?,
            targets: Arc::new(columns(&tgt)),
            weights: Arc::new(self.sigma.iter().map(|s| 1.0 / s).collect()),
        })
    }

    /// The network and its parameters, borrowed separately.
    pub fn split_mut(&mut self) -> (&ConverterNet, &mut ParamStore) {
        (&self.net, &mut self.store)
    }

    /// Predicted target `[static | delta]` means for each source frame.
    pub fn predict(&self, source_sd: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if source_sd.is_empty() {
            return Err(Error::Empty("source frames"));
        }
        let mut tape = Tape::new();
        let out = self.net.record(&self.store, &mut tape, &self.normalised(source_sd)?)?;
        Ok(rows(tape.value(out)))
    }

    /// Converts mel-cepstra (network, trajectory generation, variance
    /// postfilter) and F0; aperiodicity and voicing pass through.
    pub fn convert_features(&self, source: &FrameFeatures) -> Result<FrameFeatures> {
        if source.mcep_dim() != self.static_dim() {
            return Err(shape(format!(
                "source order {} vs model order {}",
                source.mcep_dim(),
                self.static_dim()
            )));
        }
        let means = self.predict(&append_deltas(&source.mcep)?)?;
        let mut mcep = mlpg(&means, &self.sigma)?;
        if mcep.len() >= 2 {
            mcep = gv_postfilter(&mcep, &self.gv_target)?;
        }
        FrameFeatures::new(
            transform_logf0(&source.continuous_f0, &self.logf0)?,
            source.uv.clone(),
            mcep,
            source.coded_ap.clone(),
            source.hop,
        )
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set("model", "converter");
        ck.set("hidden_layers", self.hidden_layers);
        ck.set("hidden_units", self.hidden_units);
        ck.set("static_dim", self.static_dim());
        for p in self.store.iter() {
            ck.push(p.name.clone(), p.value.clone());
        }
        let vector = |v: &[f64]| Tensor::from_vec(&[v.len()], v.to_vec()).expect("vector shape");
        ck.push("stats.input_mean", vector(&self.input_mean));
        ck.push("stats.input_scale", vector(&self.input_scale));
        ck.push("stats.sigma", vector(&self.sigma));
        ck.push("stats.gv", vector(&self.gv_target));
        let l = &self.logf0;
        ck.push("stats.logf0", vector(&[l.source_mean, l.source_std, l.target_mean, l.target_std]));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.get("model") != Some("converter") {
            return Err(Error::Format {
                kind: "checkpoint",
                reason: "not a converter checkpoint".into(),
            });
        }
        let m: usize = ck.parse("static_dim")?;
        let cfg = ConverterConfig {
            hidden_layers: ck.parse("hidden_layers")?,
            hidden_units: ck.parse("hidden_units")?,
            ..ConverterConfig::default()
        };
        let mut store = ParamStore::new();
        let net = ConverterNet::build(&mut store, 2 * m, 2 * m, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let (stats, weights): (Vec<_>, Vec<_>) = ck.tensors.iter().cloned().partition(|(n, _)| n.starts_with("stats."));
        store.load_values(&weights)?;
        let take = |name: &str, len: usize| -> Result<Vec<f64>> {
            let t = stats
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| invalid(format!("checkpoint lacks {name}")))?;
            if t.numel() != len {
                return Err(shape(format!("{name} has {} entries, expected {len}", t.numel())));
            }
            Ok(t.data().to_vec())
        };
        let l = take("stats.logf0", 4)?;
        let model = Self {
            store,
            net,
            hidden_layers: cfg.hidden_layers,
            hidden_units: cfg.hidden_units,
            input_mean: take("stats.input_mean", 2 * m)?,
            input_scale: take("stats.input_scale", 2 * m)?,
            sigma: take("stats.sigma", 2 * m)?,
            gv_target: take("stats.gv", m)?,
            logf0: LogF0Stats {
                source_mean: l[0],
                source_std: l[1],
                target_mean: l[2],
                target_std: l[3],
            },
        };
        if model.sigma.iter().chain(&model.gv_target).chain(&model.input_scale).any(|&v| !(v > 0.0)) {
            return Err(invalid("stored variances must be positive"));
        }
        model.logf0.validate()?;
        Ok(model)
    }

    pub fn save(&self, w: impl Write) -> Result<()> {
        self.to_checkpoint().write_to(w)
    }

    pub fn load(r: impl Read) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read_from(r)?)
    }
}

/// Full-batch training on time-aligned `(source, target)` utterances.
/// Returns the model and the objective at the start of every epoch.
pub fn train_converter(
    pairs: &[(&FrameFeatures, &FrameFeatures)],
    cfg: &ConverterConfig,
) -> Result<(ConversionModel, Vec<f64>)> {
    let (mut model, _, _) = ConversionModel::untrained(pairs, cfg)?;
    let data = model.training_frames(pairs)?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let (net, store) = model.split_mut();
        store.zero_grad();
        history.push(net.objective(store, &data, true)?);
        adam.step(store);
    }
    Ok((model, history))
}

/// A model with initial weights, for inspection and gradient checks.
pub fn initial_converter(pairs: &[(&FrameFeatures, &FrameFeatures)], cfg: &ConverterConfig) -> Result<ConversionModel> {
    ConversionModel::untrained(pairs, cfg).map(|(m, _, _)| m)
}
