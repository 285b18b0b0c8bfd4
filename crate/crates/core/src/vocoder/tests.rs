use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::codec::AuxMatrix;
use crate::dilation::ArchitectureSpec;
use crate::net::{Adam, AdamConfig};

const RATE: u32 = 8000;

fn tiny_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        fixed_layers: 2,
        fixed_repeats: 1,
        adaptive_layers: 2,
        adaptive_repeats: 1,
        ..ArchitectureSpec::desk()
    }
    .with_channels(6, 5, 7)
}

/// Conditioning with a smoothly varying F0 held over frames of `hop` samples.
fn conditioning(len: usize, aux_dim: usize, hop: usize, rng: &mut ChaCha8Rng) -> AuxMatrix {
    let mut data = Vec::with_capacity(len * aux_dim);
    let mut frame = Vec::new();
    for t in 0..len {
        if t % hop == 0 {
            frame = (0..aux_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            frame[0] = 150.0 + 100.0 * ((t / hop) as f64 * 0.7).sin().abs();
        }
        data.extend_from_slice(&frame);
    }
    AuxMatrix::new(len, aux_dim, data).unwrap()
}

fn random_codes(len: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..len).map(|_| rng.gen()).collect()
}

#[test]
fn table_architectures_have_expected_blocks() {
    let wnf = VocoderParams::build(&ArchitectureSpec::wn_full().with_channels(4, 4, 4), 3, RATE, 0).unwrap();
    assert_eq!(wnf.block_ids().len(), 30);
    assert!(wnf.block_ids().iter().all(|b| matches!(b.kind, LayerKind::Fixed(_))));
    let qp = VocoderParams::build(&ArchitectureSpec::qpnet().with_channels(4, 4, 4), 3, RATE, 0).unwrap();
    let kinds: Vec<_> = qp.block_ids().iter().map(|b| b.kind).collect();
    assert_eq!(kinds.iter().filter(|k| matches!(k, LayerKind::Fixed(_))).count(), 12);
    assert_eq!(kinds.iter().filter(|k| matches!(k, LayerKind::Adaptive(_))).count(), 4);
    assert_eq!(kinds[12], LayerKind::Adaptive(0));
    let head = qp.store.value(qp.head_ids().out);
    assert_eq!(head.rows(), 256);
}

#[test]
fn desk_parameter_count_closed_form() {
    let spec = ArchitectureSpec::desk();
    let aux = 38;
    let params = VocoderParams::build(&spec, aux, RATE, 1).unwrap();
    let (r, s, h, q) = (64, 64, 64, 256);
    let entry = 2 * r * q + r;
    let block = 4 * r * r + 2 * (r * aux + r) + (r * r + r) + (s * r + s);
    let head = (h * s + h) + (q * h + q);
    assert_eq!(params.parameter_count(), entry + 5 * block + head);
    // 32_832 entry + 5 × 29_696 blocks + 20_800 head
    assert_eq!(params.parameter_count(), 202_112);
}

#[test]
fn tape_and_inference_agree_in_double_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = VocoderParams::build(&tiny_spec(), 4, RATE, 3).unwrap();
    let len = 120;
    let codes = random_codes(len, &mut rng);
    let aux = conditioning(len, 4, 10, &mut rng);
    let seq = TrainingSequence::new(codes.clone(), aux.clone()).unwrap();
    let batch = Batch::new(&params, &[seq]).unwrap();
    let plan = params.plan_for(&aux).unwrap();
    let tape = batch.logits(&params).unwrap();
    let infer = params.teacher_forced_forward::<f64>(&codes, &aux, &plan).unwrap();
    assert!(tape.max_abs_diff(&infer) < 1e-10, "{}", tape.max_abs_diff(&infer));
}

#[test]
fn batched_windows_match_separate_forwards() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let params = VocoderParams::build(&tiny_spec(), 4, RATE, 4).unwrap();
    let a = TrainingSequence::new(random_codes(40, &mut rng), conditioning(40, 4, 8, &mut rng)).unwrap();
    let b = TrainingSequence::new(random_codes(55, &mut rng), conditioning(55, 4, 8, &mut rng)).unwrap();
    let joint = Batch::new(&params, &[a.clone(), b.clone()]).unwrap().logits(&params).unwrap();
    let la = Batch::new(&params, &[a]).unwrap().logits(&params).unwrap();
    let lb = Batch::new(&params, &[b]).unwrap().logits(&params).unwrap();
    for k in 0..256 {
        for t in 0..40 {
            assert!((joint.get(k, t) - la.get(k, t)).abs() < 1e-12);
        }
        for t in 0..55 {
            assert!((joint.get(k, 40 + t) - lb.get(k, t)).abs() < 1e-12);
        }
    }
}

#[test]
fn cached_generation_reproduces_batch_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for spec in [tiny_spec(), ArchitectureSpec::wn_compact().with_channels(6, 5, 7)] {
        let params = VocoderParams::build(&spec, 4, RATE, 5).unwrap();
        let aux = conditioning(300, 4, 16, &mut rng);
        let plan = params.plan_for(&aux).unwrap();
        let out = generate::<f32>(&params, &aux, &plan, 77, Sampling::Temperature(1.0), true).unwrap();
        let traced = out.logits.unwrap();
        let batch = params
            .teacher_forced_forward::<f32>(&out.codes.codes, &aux, &plan)
            .unwrap();
        assert_eq!(traced.max_abs_diff(&batch), 0.0);
    }
}

#[test]
fn ring_capacities_follow_plan() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params = VocoderParams::build(&tiny_spec(), 4, RATE, 5).unwrap();
    let aux = conditioning(64, 4, 16, &mut rng);
    let plan = params.plan_for(&aux).unwrap();
    let state = GenerationState::new(&params.network::<f32>(), &plan);
    let caps = state.capacities();
    assert_eq!(&caps[..2], &[1, 2]);
    for k in 0..2 {
        assert_eq!(caps[2 + k], *plan.adaptive_layer(k).iter().max().unwrap() as usize);
    }
}

#[test]
fn argmax_generation_ignores_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let params = VocoderParams::build(&tiny_spec(), 4, RATE, 6).unwrap();
    let aux = conditioning(200, 4, 10, &mut rng);
    let plan = params.plan_for(&aux).unwrap();
    let a = generate::<f32>(&params, &aux, &plan, 1, Sampling::Argmax, false).unwrap();
    let b = generate::<f32>(&params, &aux, &plan, 2, Sampling::Argmax, false).unwrap();
    assert_eq!(a.codes, b.codes);
    let c = generate::<f32>(&params, &aux, &plan, 1, Sampling::Temperature(1.0), false).unwrap();
    let d = generate::<f32>(&params, &aux, &plan, 1, Sampling::Temperature(1.0), false).unwrap();
    assert_eq!(c.codes, d.codes);
    assert_eq!(Sampling::from_temperature(0.0), Sampling::Argmax);
}

#[test]
fn zero_head_gives_uniform_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut params = VocoderParams::build(&tiny_spec(), 4, RATE, 7).unwrap();
    let h = params.head_ids();
    params.store.get_mut(h.out).value.fill(0.0);
    let aux = conditioning(50, 4, 10, &mut rng);
    let codes = random_codes(50, &mut rng);
    let plan = params.plan_for(&aux).unwrap();
    let logits = params.teacher_forced_forward::<f64>(&codes, &aux, &plan).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let batch = Batch::new(&params, &[TrainingSequence::new(codes, aux).unwrap()]).unwrap();
    assert!((batch.loss(&params).unwrap() - 256f64.ln()).abs() < 1e-12);
}

#[test]
fn logits_are_causal_in_codes() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let params = VocoderParams::build(&tiny_spec(), 4, RATE, 8).unwrap();
    let len = 160;
    let aux = conditioning(len, 4, 10, &mut rng);
    let plan = params.plan_for(&aux).unwrap();
    let codes = random_codes(len, &mut rng);
    let base = params.teacher_forced_forward::<f64>(&codes, &aux, &plan).unwrap();
    let t0 = 50;
    let mut bumped = codes.clone();
    bumped[t0] = bumped[t0].wrapping_add(97);
    let moved = params.teacher_forced_forward::<f64>(&bumped, &aux, &plan).unwrap();
    let changed: Vec<usize> = (0..len)
        .filter(|&t| (0..256).any(|k| base.get(k, t) != moved.get(k, t)))
        .collect();
    assert_eq!(changed.first(), Some(&(t0 + 1)));
    let reach = (0..len).map(|t| plan.span_at(t)).max().unwrap();
    assert!(*changed.last().unwrap() <= t0 + 1 + reach);
}

#[test]
fn zero_learning_rate_keeps_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut params = VocoderParams::build(&tiny_spec(), 4, RATE, 9).unwrap();
    let seq = TrainingSequence::new(random_codes(80, &mut rng), conditioning(80, 4, 10, &mut rng)).unwrap();
    let batch = Batch::new(&params, &[seq]).unwrap();
    let before = batch.loss(&params).unwrap();
    let mut adam = Adam::new(AdamConfig {
        learning_rate: 0.0,
        ..AdamConfig::default()
    });
    let reported = train_step(&mut params, &batch, &mut adam).unwrap();
    assert_eq!(reported, before);
    assert_eq!(batch.loss(&params).unwrap(), before);
}

#[test]
fn short_overfit_beats_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut params = VocoderParams::build(&tiny_spec(), 4, RATE, 10).unwrap();
    let codes: Vec<u8> = (0..200).map(|t| (128.0 + 60.0 * (t as f64 * 0.3).sin()) as u8).collect();
    let seq = TrainingSequence::new(codes, conditioning(200, 4, 20, &mut rng)).unwrap();
    let batch = Batch::new(&params, &[seq]).unwrap();
    let mut adam = Adam::new(AdamConfig {
        learning_rate: 1e-2,
        ..AdamConfig::default()
    });
    let mut last = f64::INFINITY;
    for _ in 0..50 {
        last = train_step(&mut params, &batch, &mut adam).unwrap();
    }
    assert!(last < 256f64.ln() - 1.0, "{last}");
}

#[test]
fn checkpoint_roundtrip_preserves_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut params = VocoderParams::build(&tiny_spec(), 4, RATE, 11).unwrap();
    let aux = conditioning(90, 4, 10, &mut rng);
    params.fit_aux_normalization([&aux]).unwrap();
    let mut buf = Vec::new();
    params.save(&mut buf).unwrap();
    let back = VocoderParams::load(buf.as_slice()).unwrap();
    assert_eq!(back, params);
    let mut again = Vec::new();
    back.save(&mut again).unwrap();
    assert_eq!(again, buf);
}

#[test]
fn mismatched_inputs_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let params = VocoderParams::build(&tiny_spec(), 4, RATE, 12).unwrap();
    let aux = conditioning(30, 4, 10, &mut rng);
    let plan = params.plan_for(&aux).unwrap();
    assert!(params.teacher_forced_forward::<f64>(&[0; 29], &aux, &plan).is_err());
    let short = plan.slice(0..20).unwrap();
    assert!(params.teacher_forced_forward::<f64>(&[0; 30], &aux, &short).is_err());
    let wide = conditioning(30, 5, 10, &mut rng);
    assert!(params.prepare_aux(&wide).is_err());
    assert!(TrainingSequence::new(vec![1; 3], aux.slice_rows(0, 4)).is_err());
}

#[test]
fn fixed_network_plan_has_no_adaptive_section() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = VocoderParams::build(&ArchitectureSpec::wn_compact().with_channels(4, 4, 4), 4, RATE, 0).unwrap();
    let plan = params.plan_for(&conditioning(20, 4, 10, &mut rng)).unwrap();
    assert_eq!(plan.adaptive_count(), 0);
    assert_eq!(plan.len(), None);
}
