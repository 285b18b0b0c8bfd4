//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p qpnet-cli --test acceptance -- 1 4`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qpnet_cli::{run_all, RunConfig, StageOptions};
use qpnet_core::adaptation::{finetune, validation_loss, AdaptConfig, AdaptMode};
use qpnet_core::analysis::{estimate_f0_framed, extract_features, AnalysisConfig, F0Config, Framing};
use qpnet_core::codec::{mulaw_decode_sample, mulaw_encode_sample, upsample_features, AuxMatrix, FrameFeatures, DEFAULT_MU};
use qpnet_core::converter::{gv_postfilter, initial_converter, mlpg, ConverterConfig};
use qpnet_core::corpus::{contour_to_f0, render, script, synthesize, CorpusConfig, SpeakerProfile};
use qpnet_core::dilation::{build_plan, pitch_dilation_factors, receptive_field, ArchitectureSpec};
use qpnet_core::metrics::{logf0_rmse, mcd, F0Agreement, MCD_SCALE};
use qpnet_core::net::gradcheck::{check_gradients, GradCheckReport};
use qpnet_core::net::{Adam, AdamConfig, Dilation, GatherIndex, ParamId, ParamStore, Tape, Tensor};
use qpnet_core::vocoder::{dependence_probe, generate, train_step, Sampling, TrainingSequence, VocoderParams, WindowSampler};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn main() -> ExitCode {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| picked.is_empty() || picked.contains(&n);
    let criteria: [(usize, &str, fn() -> Verdict); 8] = [
        (1, "gradient correctness", gradients),
        (2, "cache equivalence", cache_equivalence),
        (3, "receptive-field fidelity", receptive_fields),
        (4, "codec exactness", codec),
        (5, "MLPG/GV/metric oracles", oracles),
        (6, "pitch controllability", pitch_controllability),
        (7, "adaptation contracts", adaptation),
        (8, "end-to-end determinism", determinism),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let v = run();
        failed += usize::from(!v.pass);
        println!(
            "{} criterion {n} ({name}): {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- criterion 1

const GRAD_TOLERANCE: f64 = 1e-4;

fn all_picks(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .flat_map(|id| (0..store.value(id).numel()).map(move |i| (id, i)))
        .collect()
}

fn tokens(t: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Arc<Vec<u8>> {
    Arc::new((0..t).map(|_| rng.gen_range(0..vocab as u8)).collect())
}

/// Scalar read-out `Σ proj ⊙ y` so every kernel is checked on its own.
fn readout(shape: &[usize], rng: &mut ChaCha8Rng) -> Arc<Tensor> {
    Arc::new(Tensor::random(shape, 1.0, rng))
}

fn check_conv1x1(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (cin, cout, t) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..12));
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::random(&[cout, cin], 1.0, rng));
    let b = store.add("b", Tensor::random(&[cout], 1.0, rng));
    let x = Tensor::random(&[cin, t], 1.0, rng);
    let proj = readout(&[cout, t], rng);
    let picks = all_picks(&store);
    check_gradients(&mut store, &picks, 1e-5, |s, back| {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.input(x.clone()), tape.param(s, w), tape.param(s, b));
        let y = tape.conv1x1(xv, wv, Some(bv))?;
        let loss = tape.dot(y, proj.clone())?;
        if back {
            tape.backward(loss, s)?;
        }
        Ok(tape.scalar(loss))
    })
    .unwrap()
}

fn check_dilated_tap(rng: &mut ChaCha8Rng, time_varying: bool) -> GradCheckReport {
    let (c, t) = (rng.gen_range(1..5), rng.gen_range(4..20));
    let cut = rng.gen_range(1..t);
    let segments = [cut, t - cut];
    let dilation = if time_varying {
        Dilation::PerSample((0..t).map(|_| rng.gen_range(1..5)).collect())
    } else {
        Dilation::Constant(rng.gen_range(1..5))
    };
    let index = Arc::new(GatherIndex::new(t, &dilation, &segments).unwrap());
    let mut store = ParamStore::new();
    let wc = store.add("wc", Tensor::random(&[c, c], 1.0, rng));
    let wp = store.add("wp", Tensor::random(&[c, c], 1.0, rng));
    let x = store.add("x", Tensor::random(&[c, t], 1.0, rng));
    let proj = readout(&[c, t], rng);
    let picks = all_picks(&store);
    check_gradients(&mut store, &picks, 1e-5, |s, back| {
        let mut tape = Tape::new();
        let (xv, wcv, wpv) = (tape.param(s, x), tape.param(s, wc), tape.param(s, wp));
        let y = tape.dilated_tap(xv, index.clone(), wcv, wpv)?;
        let loss = tape.dot(y, proj.clone())?;
        if back {
            tape.backward(loss, s)?;
        }
        Ok(tape.scalar(loss))
    })
    .unwrap()
}

fn check_gated(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (c, t) = (rng.gen_range(1..6), rng.gen_range(1..12));
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = ["xf", "xg", "hf", "hg"]
        .iter()
        .map(|&n| store.add(n, Tensor::random(&[c, t], 2.0, rng)))
        .collect();
    let proj = readout(&[c, t], rng);
    let picks = all_picks(&store);
    check_gradients(&mut store, &picks, 1e-5, |s, back| {
        let mut tape = Tape::new();
        let v: Vec<_> = ids.iter().map(|&id| tape.param(s, id)).collect();
        let y = tape.gated(v[0], v[1], v[2], v[3])?;
        let loss = tape.dot(y, proj.clone())?;
        if back {
            tape.backward(loss, s)?;
        }
        Ok(tape.scalar(loss))
    })
    .unwrap()
}

fn check_softmax_ce(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (k, t) = (rng.gen_range(2..12), rng.gen_range(1..12));
    let mut store = ParamStore::new();
    let logits = store.add("logits", Tensor::random(&[k, t], 3.0, rng));
    let targets = tokens(t, k, rng);
    let picks = all_picks(&store);
    check_gradients(&mut store, &picks, 1e-5, |s, back| {
        let mut tape = Tape::new();
        let l = tape.param(s, logits);
        let loss = tape.softmax_ce(l, targets.clone())?;
        if back {
            tape.backward(loss, s)?;
        }
        Ok(tape.scalar(loss))
    })
    .unwrap()
}

fn random_features(frames: usize, order: usize, rng: &mut ChaCha8Rng) -> FrameFeatures {
    let f0: Vec<f64> = (0..frames).map(|_| rng.gen_range(90.0..300.0)).collect();
    let uv: Vec<bool> = (0..frames).map(|_| rng.gen_bool(0.8)).collect();
    let mcep: Vec<Vec<f64>> = (0..frames).map(|_| (0..order).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let ap: Vec<[f64; 2]> = (0..frames).map(|_| [rng.gen_range(-30.0..-1.0), rng.gen_range(-30.0..-1.0)]).collect();
    FrameFeatures::new(f0, uv, mcep, ap, 80).unwrap()
}

fn check_converter(rng: &mut ChaCha8Rng) -> GradCheckReport {
    let (frames, order) = (rng.gen_range(4..14), rng.gen_range(2..5));
    let (src, tgt) = (random_features(frames, order, rng), random_features(frames, order, rng));
    let pairs = [(&src, &tgt)];
    let cfg = ConverterConfig {
        hidden_layers: rng.gen_range(1..3),
        hidden_units: rng.gen_range(2..6),
        seed: rng.gen(),
        ..ConverterConfig::default()
    };
    let mut model = initial_converter(&pairs, &cfg).unwrap();
    let data = model.training_frames(&pairs).unwrap();
    let (net, store) = model.split_mut();
    let net = net.clone();
    let picks = all_picks(store);
    check_gradients(store, &picks, 1e-6, |s, back| net.objective(s, &data, back)).unwrap()
}

fn gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut shapes = 0;
    for _ in 0..4 {
        let reports = [
            ("conv1x1", check_conv1x1(&mut rng)),
            ("dilated_tap/constant", check_dilated_tap(&mut rng, false)),
            ("dilated_tap/time-varying", check_dilated_tap(&mut rng, true)),
            ("gated_unit", check_gated(&mut rng)),
            ("softmax_ce", check_softmax_ce(&mut rng)),
            ("converter_dnn", check_converter(&mut rng)),
        ];
        for (name, r) in reports {
            shapes += 1;
            let e = worst.entry(name).or_insert(0.0);
            *e = e.max(r.max_relative_error);
        }
    }
    let max = worst.values().cloned().fold(0.0, f64::max);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    verdict(max < GRAD_TOLERANCE && shapes >= 20, format!("{shapes} shapes, max rel err {max:.2e} ({detail})"))
}

// ---------------------------------------------------------------- criterion 2

fn varying_conditioning(len: usize, aux_dim: usize, hop: usize, rng: &mut ChaCha8Rng) -> AuxMatrix {
    let mut data = Vec::with_capacity(len * aux_dim);
    let mut frame = Vec::new();
    for t in 0..len {
        if t % hop == 0 {
            frame = (0..aux_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            frame[0] = 120.0 + 120.0 * ((t / hop) as f64 * 0.3).sin().abs();
        }
        data.extend_from_slice(&frame);
    }
    AuxMatrix::new(len, aux_dim, data).unwrap()
}

fn cache_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let desk = ArchitectureSpec::desk();
    let wnc = ArchitectureSpec::wn_compact().with_channels(desk.residual_channels, desk.skip_channels, desk.head_channels);
    let mut worst = 0.0f64;
    let mut notes = Vec::new();
    for (name, spec) in [("WNc", wnc), ("QPNet", desk)] {
        let params = VocoderParams::build(&spec, 5, 8000, 3).unwrap();
        let aux = varying_conditioning(1200, 5, 40, &mut rng);
        let plan = params.plan_for(&aux).unwrap();
        let out = generate::<f32>(&params, &aux, &plan, 11, Sampling::Temperature(1.0), true).unwrap();
        let batch = params.teacher_forced_forward::<f32>(&out.codes.codes, &aux, &plan).unwrap();
        let d = out.logits.unwrap().max_abs_diff(&batch);
        worst = worst.max(d);
        notes.push(format!("{name} {} samples max |Δ| {d:.1e}", aux.rows()));
    }
    verdict(worst <= 1e-5, notes.join(", "))
}

// ---------------------------------------------------------------- criterion 3

/// Span seen by an impulse: the dependents of input `p` are exactly `[p, p + r]`.
fn probe_span(params: &VocoderParams, plan: &qpnet_core::dilation::DilationPlan, len: usize, p: usize) -> Option<usize> {
    let deps = dependence_probe(params, plan, len, p).unwrap();
    let (&first, &last) = (deps.first()?, deps.last()?);
    (first == p).then_some(last - p)
}

fn receptive_fields() -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;
    let small = |s: ArchitectureSpec| s.with_channels(4, 4, 4);
    for (name, spec) in [("WNf", small(ArchitectureSpec::wn_full())), ("WNc", small(ArchitectureSpec::wn_compact()))] {
        let r = receptive_field(&spec, None).unwrap();
        let params = VocoderParams::build(&spec, 3, 8000, 5).unwrap();
        let len = 2 * r + 20;
        let plan = build_plan(&spec, &vec![1.0; len]).unwrap();
        let got = probe_span(&params, &plan, len, 10);
        pass &= got == Some(r);
        notes.push(format!("{name} closed form {r} probe {got:?}"));
    }
    let spec = small(ArchitectureSpec::qpnet());
    let (rate, f0) = (8000, 160.0);
    let params = VocoderParams::build(&spec, 3, rate, 5).unwrap();
    let factor = pitch_dilation_factors(&[f0], rate, spec.period_divisor).unwrap()[0];
    let r = receptive_field(&spec, Some(factor)).unwrap();
    let len = 2 * r + 20;
    let plan = build_plan(&spec, &vec![factor; len]).unwrap();
    let got = probe_span(&params, &plan, len, r + 5);
    pass &= got == Some(r);
    notes.push(format!("QPNet @ {f0} Hz (E={factor:.2}) closed form {r} probe {got:?}"));
    verdict(pass, notes.join(", "))
}

// ---------------------------------------------------------------- criterion 4

fn codec() -> Verdict {
    let mu = DEFAULT_MU;
    let examples = [(0.0, 128u8), (1.0, 255), (0.5, 240)];
    let exact = examples.iter().all(|&(x, c)| mulaw_encode_sample(x, mu).unwrap() == c);
    let muf = f64::from(mu);
    let n = 100_000;
    let (mut violations, mut worst_ratio) = (0usize, 0.0f64);
    for i in 0..=n {
        let x = -1.0 + 2.0 * i as f64 / n as f64;
        let back = mulaw_decode_sample(mulaw_encode_sample(x, mu).unwrap(), mu);
        let bound = (1.0 + muf * x.abs()) * (1.0 + muf).ln() / (muf * 256.0);
        let ratio = (x - back).abs() / bound;
        worst_ratio = worst_ratio.max(ratio);
        violations += usize::from(ratio > 1.0);
    }
    verdict(
        exact && violations == 0,
        format!(
            "examples {}, bound violated at {violations}/{} grid points (worst error/bound {worst_ratio:.4})",
            if exact { "exact" } else { "WRONG" },
            n + 1
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn dense_mlpg(means: &[Vec<f64>], var: &[f64]) -> Vec<Vec<f64>> {
    let (t, m) = (means.len(), var.len() / 2);
    let mut out = vec![vec![0.0; m]; t];
    for d in 0..m {
        // Normal equations Wᵀ P W c = Wᵀ P μ with an explicit 2T×T window matrix.
        let mut w = vec![vec![0.0; t]; 2 * t];
        let (mut mu, mut prec) = (vec![0.0; 2 * t], vec![0.0; 2 * t]);
        for n in 0..t {
            w[n][n] = 1.0;
            mu[n] = means[n][d];
            prec[n] = 1.0 / var[d];
            let (hi, lo) = ((n + 1).min(t - 1), n.saturating_sub(1));
            w[t + n][hi] += 0.5;
            w[t + n][lo] -= 0.5;
            mu[t + n] = means[n][m + d];
            prec[t + n] = 1.0 / var[m + d];
        }
        let mut a = vec![vec![0.0; t + 1]; t];
        for i in 0..t {
            for j in 0..t {
                a[i][j] = (0..2 * t).map(|r| w[r][i] * prec[r] * w[r][j]).sum();
            }
            a[i][t] = (0..2 * t).map(|r| w[r][i] * prec[r] * mu[r]).sum();
        }
        for col in 0..t {
            let piv = (col..t).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..t {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..=t {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        for n in 0..t {
            out[n][d] = a[n][t] / a[n][n];
        }
    }
    out
}

fn loop_mcd(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for n in 0..a.len() {
        let mut s = 0.0;
        for d in 1..a[n].len() {
            s += (a[n][d] - b[n][d]).powi(2);
        }
        total += 10.0 / 10f64.ln() * (2.0 * s).sqrt();
    }
    total / a.len() as f64
}

fn loop_rmse(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut s = 0.0;
    let mut n = 0;
    for i in 0..a.len() {
        if a[i] > 0.0 && b[i] > 0.0 {
            s += (a[i].ln() - b[i].ln()).powi(2);
            n += 1;
        }
    }
    (n > 0).then(|| (s / n as f64).sqrt())
}

fn oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mlpg_err = 0.0f64;
    let mut cases = 0;
    for t in 1..=10 {
        for _ in 0..20 {
            let m = rng.gen_range(1..5);
            let means: Vec<Vec<f64>> = (0..t).map(|_| (0..2 * m).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let var: Vec<f64> = (0..2 * m).map(|_| rng.gen_range(0.05..3.0)).collect();
            let got = mlpg(&means, &var).unwrap();
            let want = dense_mlpg(&means, &var);
            for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
                mlpg_err = mlpg_err.max((g - w).abs());
            }
            cases += 1;
        }
    }
    let mut gv_err = 0.0f64;
    for _ in 0..50 {
        let (t, m) = (rng.gen_range(2..60), rng.gen_range(1..6));
        let traj: Vec<Vec<f64>> = (0..t).map(|_| (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let target: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..4.0)).collect();
        let out = gv_postfilter(&traj, &target).unwrap();
        // c0 carries energy and is left alone.
        for d in 1..m {
            let mean = out.iter().map(|f| f[d]).sum::<f64>() / t as f64;
            let var = out.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / t as f64;
            gv_err = gv_err.max((var - target[d]).abs());
        }
    }
    let mut metric_err = 0.0f64;
    for _ in 0..100 {
        let (t, m) = (rng.gen_range(1..40), rng.gen_range(1..16));
        let frames = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..t).map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect() };
        let (a, b) = (frames(&mut rng), frames(&mut rng));
        metric_err = metric_err.max((mcd(&a, &b).unwrap() - loop_mcd(&a, &b)).abs());
        let f0 = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..t).map(|_| if rng.gen_bool(0.7) { rng.gen_range(60.0..400.0) } else { 0.0 }).collect() };
        let (x, y) = (f0(&mut rng), f0(&mut rng));
        match (logf0_rmse(&x, &y).unwrap(), loop_rmse(&x, &y)) {
            (F0Agreement::Measured { rmse, .. }, Some(want)) => metric_err = metric_err.max((rmse - want).abs()),
            (F0Agreement::NoOverlap, None) => {}
            _ => metric_err = f64::INFINITY,
        }
    }
    let unit = mcd(&[vec![0.0, 0.0]], &[vec![0.0, 1.0]]).unwrap();
    let pass = mlpg_err < 1e-8 && gv_err < 1e-10 && metric_err < 1e-10 && (unit - 6.1418).abs() < 1e-3;
    verdict(
        pass,
        format!(
            "MLPG {cases} cases max |Δ| {mlpg_err:.1e}, GV max |Δvar| {gv_err:.1e}, metrics max |Δ| {metric_err:.1e}, unit MCD {unit:.4} dB (scale {MCD_SCALE:.4})"
        ),
    )
}

// ------------------------------------------------------- criteria 6 and 7

const PITCH_RATE: u32 = 8000;
const PITCH_HOP: usize = 40;
const PITCH_STEPS: usize = 3000;
const PITCH_WINDOWS: usize = 2;
const PITCH_TEMPERATURE: f64 = 1.0;
const PITCH_SEEDS: [u64; 3] = [1, 2, 3];
const PITCH_UTTERANCES: usize = 20;
const HELD_OUT: [usize; 2] = [100, 101];

/// Four speakers sharing the 120-240 Hz range, spread in formant scale and tilt.
fn pitch_speakers() -> Vec<SpeakerProfile> {
    (0..4)
        .map(|i| {
            let f = i as f64 / 3.0;
            SpeakerProfile::new(&format!("s{i}"), 120.0, 240.0, 0.9 + 0.3 * f, -6.0 + 3.0 * f)
        })
        .collect()
}

fn pitch_corpus(seed: u64) -> CorpusConfig {
    CorpusConfig {
        rate: PITCH_RATE,
        hop: PITCH_HOP,
        utterances: PITCH_UTTERANCES,
        seconds: 1.0,
        speakers: pitch_speakers(),
        seed,
        ..CorpusConfig::default()
    }
}

fn analysis() -> AnalysisConfig {
    AnalysisConfig {
        hop: PITCH_HOP,
        ..AnalysisConfig::default()
    }
}

fn sequences(cfg: &CorpusConfig) -> Vec<TrainingSequence> {
    synthesize(cfg)
        .unwrap()
        .iter()
        .map(|u| TrainingSequence::from_wave(&u.wave, &extract_features(&u.wave, &analysis()).unwrap()).unwrap())
        .collect()
}

/// Same depth and width as the desk QPNet with every layer fixed.
fn fixed_twin() -> ArchitectureSpec {
    let desk = ArchitectureSpec::desk();
    ArchitectureSpec {
        fixed_layers: desk.fixed_layers + desk.adaptive_layers,
        adaptive_layers: 0,
        adaptive_repeats: 0,
        ..desk
    }
}

fn train(spec: &ArchitectureSpec, data: &[TrainingSequence], steps: usize, seed: u64) -> (VocoderParams, f64) {
    let mut params = VocoderParams::build(spec, data[0].aux.cols(), PITCH_RATE, seed).unwrap();
    params.fit_aux_normalization(data.iter().map(|s| &s.aux)).unwrap();
    let sampler = WindowSampler::new(data.to_vec(), 1024, PITCH_WINDOWS).unwrap();
    let mut adam = Adam::new(AdamConfig {
        learning_rate: 1e-3,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut recent = Vec::new();
    for _ in 0..steps {
        let batch = sampler.batch(&params, &mut rng).unwrap();
        recent.push(train_step(&mut params, &batch, &mut adam).unwrap());
    }
    let tail = &recent[recent.len().saturating_sub(50)..];
    (params, tail.iter().sum::<f64>() / tail.len().max(1) as f64)
}

/// Squared log-F0 errors of generated audio against the conditioning contour,
/// over frames both sides call voiced, plus the number of frames compared.
fn pitch_errors(params: &VocoderParams, cfg: &CorpusConfig, scale: f64, seed: u64) -> (f64, usize, usize) {
    let speakers = pitch_speakers();
    let tracker = F0Config {
        fmin: 70.0,
        fmax: 450.0,
        ..F0Config::default()
    };
    let (mut se, mut n, mut frames) = (0.0, 0, 0);
    for (k, &idx) in HELD_OUT.iter().enumerate() {
        let spk = &speakers[k % speakers.len()];
        let track: Vec<f64> = script(cfg, idx).shape.iter().map(|&s| scale * contour_to_f0(s, spk)).collect();
        let u = render(cfg, spk, idx, Some(&track)).unwrap();
        let mut f = extract_features(&u.wave, &analysis()).unwrap();
        f.continuous_f0 = u.frame_f0.clone();
        f.uv = vec![true; f.uv.len()];
        let aux = upsample_features(&f).unwrap();
        let plan = params.plan_for(&aux).unwrap();
        let g = generate::<f32>(params, &aux, &plan, seed ^ idx as u64, Sampling::from_temperature(PITCH_TEMPERATURE), false).unwrap();
        let est = estimate_f0_framed(&g.wave, &tracker, PITCH_HOP, Framing::Centered).unwrap();
        for (e, r) in est.iter().zip(&u.frame_f0) {
            frames += 1;
            if *e > 0.0 && *r > 0.0 {
                se += (e.ln() - r.ln()).powi(2);
                n += 1;
            }
        }
    }
    (se, n, frames)
}

fn rmse((se, n, _): (f64, usize, usize)) -> f64 {
    if n == 0 {
        f64::INFINITY
    } else {
        (se / n as f64).sqrt()
    }
}

/// Seed-1 desk QPNet, shared with the adaptation check.
static SI_MODEL: std::sync::OnceLock<VocoderParams> = std::sync::OnceLock::new();

fn si_model() -> &'static VocoderParams {
    SI_MODEL.get_or_init(|| {
        let cfg = pitch_corpus(PITCH_SEEDS[0]);
        train(&ArchitectureSpec::desk(), &sequences(&cfg), PITCH_STEPS, PITCH_SEEDS[0]).0
    })
}

fn pitch_controllability() -> Verdict {
    let (mut in_se, mut in_n, mut in_frames) = (0.0, 0, 0);
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in PITCH_SEEDS {
        let cfg = pitch_corpus(seed);
        let data = sequences(&cfg);
        let qp = if seed == PITCH_SEEDS[0] {
            si_model().clone()
        } else {
            train(&ArchitectureSpec::desk(), &data, PITCH_STEPS, seed).0
        };
        let (wn, _) = train(&fixed_twin(), &data, PITCH_STEPS, seed);
        let inside = pitch_errors(&qp, &cfg, 1.0, seed);
        in_se += inside.0;
        in_n += inside.1;
        in_frames += inside.2;
        let (qp_out, wn_out) = (rmse(pitch_errors(&qp, &cfg, 1.2, seed)), rmse(pitch_errors(&wn, &cfg, 1.2, seed)));
        wins += usize::from(qp_out < wn_out);
        notes.push(format!("seed {seed}: in {:.3} ({}/{} voiced), x1.2 QPNet {qp_out:.3} vs WN {wn_out:.3}", rmse(inside), inside.1, inside.2));
    }
    let in_range = rmse((in_se, in_n, in_frames));
    let coverage = in_n as f64 / in_frames.max(1) as f64;
    verdict(
        in_range < 0.1 && coverage >= 0.5 && wins >= 2,
        format!("in-range RMSE {in_range:.4} (coverage {coverage:.2}), QPNet wins {wins}/3; {}", notes.join("; ")),
    )
}

fn adaptation() -> Verdict {
    let si = si_model();
    // Unseen voice and unseen sentences.
    let target = SpeakerProfile::new("target", 130.0, 230.0, 1.05, -4.5);
    let cfg = CorpusConfig {
        speakers: vec![target],
        utterances: 6,
        seed: 77,
        ..pitch_corpus(77)
    };
    let mut all = sequences(&cfg);
    let val = all.split_off(4);
    let sampler = WindowSampler::new(all, 1024, 4).unwrap();
    let si_val = validation_loss(si, &val).unwrap();

    let mut sdo = si.clone();
    let sdo_ledger = finetune(&mut sdo, &sampler, &val, &AdaptConfig { seed: 5, ..AdaptConfig::desk(AdaptMode::HeadOnly) }).unwrap();
    let frozen_ok = si
        .store
        .iter()
        .zip(sdo.store.iter())
        .filter(|(p, _)| !VocoderParams::is_head(&p.name))
        .all(|(a, b)| a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let head_moved = si
        .store
        .iter()
        .zip(sdo.store.iter())
        .any(|(a, b)| VocoderParams::is_head(&a.name) && a.value.data() != b.value.data());

    let mut sda = si.clone();
    let sda_ledger = finetune(&mut sda, &sampler, &val, &AdaptConfig { seed: 5, ..AdaptConfig::desk(AdaptMode::Full) }).unwrap();
    let sda_val = sda_ledger.rows.last().unwrap().val_ce;

    let drop = |l: &qpnet_core::adaptation::LossLedger| {
        let (first, last) = (l.rows.first().unwrap().train_ce, l.rows.last().unwrap().train_ce);
        (first - last) / first
    };
    let (sda_drop, sdo_drop) = (drop(&sda_ledger), drop(&sdo_ledger));
    // Near-flat SDo: under 2 % relative change; marked SDa fall: at least
    // twice SDo's and over 2 %.
    let pattern = sdo_drop.abs() < 0.02 && sda_drop > 0.02 && sda_drop > 2.0 * sdo_drop;
    verdict(
        frozen_ok && head_moved && sda_val < si_val && pattern,
        format!(
            "SDo non-head bitwise {}, head updated {head_moved}; val CE SI {si_val:.4} -> SDa {sda_val:.4}; train CE drop SDa {:.1}% over {} it, SDo {:.1}% over {} it",
            if frozen_ok { "unchanged" } else { "CHANGED" },
            100.0 * sda_drop,
            sda_ledger.rows.last().unwrap().iteration,
            100.0 * sdo_drop,
            sdo_ledger.rows.last().unwrap().iteration,
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let base = std::env::temp_dir().join(format!("qpnet-acceptance-{}", std::process::id()));
    let run = |name: &str| {
        let dir = base.join(name);
        let _ = std::fs::remove_dir_all(&dir);
        let overrides: Vec<String> = [
            format!("run_dir={}", dir.display()),
            "rate=8000".into(),
            "hop=40".into(),
            "utterances=4".into(),
            "test_utterances=1".into(),
            "seconds=0.5".into(),
            "residual_channels=16".into(),
            "skip_channels=16".into(),
            "head_channels=16".into(),
            "train_steps=20".into(),
            "window=512".into(),
            "windows_per_batch=2".into(),
            "adapt_iterations=10".into(),
            "report_every=5".into(),
            "converter_epochs=40".into(),
        ]
        .into();
        let cfg = RunConfig::load(None, &overrides).unwrap();
        run_all(&cfg, StageOptions { dump_plan: true }).unwrap();
        files_under(&dir)
    };
    let (a, b) = (run("first"), run("second"));
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let _ = std::fs::remove_dir_all(&base);
    verdict(
        differing.is_empty() && a.contains_key(Path::new("reports/evaluation.tsv")) && a.contains_key(Path::new("manifest.tsv")),
        format!("{} artifacts compared, {} differ {:?}", a.len(), differing.len(), differing),
    )
}
