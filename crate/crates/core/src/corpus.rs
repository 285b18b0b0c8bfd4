//! Synthetic multi-speaker corpus of quasi-periodic "speech".
//!
//! A speaker is a harmonic amplitude profile (formant-like peaks scaled by a
//! speaker factor) plus an F0 range. Utterance `i` of every speaker shares the
//! same F0 contour shape and formant trajectory, giving parallel data.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::WaveBuffer;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub name: String,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Multiplies every formant frequency.
    pub formant_scale: f64,
    /// Spectral slope in dB per kHz.
    pub tilt_db_per_khz: f64,
}

impl SpeakerProfile {
    pub fn new(name: &str, f0_min: f64, f0_max: f64, formant_scale: f64, tilt_db_per_khz: f64) -> Self {
        Self {
            name: name.to_string(),
            f0_min,
            f0_max,
            formant_scale,
            tilt_db_per_khz,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub rate: u32,
    pub hop: usize,
    pub speakers: Vec<SpeakerProfile>,
    pub utterances: usize,
    pub seconds: f64,
    /// Standard deviation of the additive white noise.
    pub noise_level: f64,
    /// Chance that an utterance carries one unvoiced (noise) gap.
    pub gap_probability: f64,
    pub peak: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            rate: crate::codec::DEFAULT_RATE,
            hop: crate::codec::DEFAULT_HOP,
            speakers: vec![
                SpeakerProfile::new("spk_low", 120.0, 240.0, 1.0, -6.0),
                SpeakerProfile::new("spk_high", 200.0, 360.0, 1.18, -4.0),
            ],
            utterances: 8,
            seconds: 1.0,
            noise_level: 0.002,
            gap_probability: 0.0,
            peak: 0.6,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rate < 4000 {
            return Err(invalid("corpus rate must be at least 4000 Hz"));
        }
        if self.hop == 0 || self.utterances == 0 || self.speakers.is_empty() {
            return Err(invalid("hop, utterance count and speaker list must be nonempty"));
        }
        if !(self.seconds > 0.0 && self.seconds.is_finite()) {
            return Err(invalid("utterance length must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gap_probability) || !(self.noise_level >= 0.0) {
            return Err(invalid("gap probability in [0, 1] and nonnegative noise required"));
        }
        if !(self.peak > 0.0 && self.peak < 1.0) {
            return Err(invalid("peak amplitude must lie in (0, 1)"));
        }
        let nyquist = f64::from(self.rate) / 2.0;
        for s in &self.speakers {
            if !(s.f0_min > 0.0 && s.f0_min < s.f0_max && s.f0_max < nyquist / 4.0) {
                return Err(invalid(format!("speaker {}: bad F0 range {}..{}", s.name, s.f0_min, s.f0_max)));
            }
            if !(s.formant_scale > 0.0) {
                return Err(invalid(format!("speaker {}: formant scale must be positive", s.name)));
            }
        }
        Ok(())
    }

    pub fn samples_per_utterance(&self) -> usize {
        (self.seconds * f64::from(self.rate)).round() as usize
    }
}

/// Shared, speaker-independent content of one utterance index.
#[derive(Debug, Clone)]
pub struct Script {
    /// Smooth contour in `[0, 1]` at every sample.
    pub shape: Vec<f64>,
    /// Formant trajectory (three frequencies in Hz) at every sample.
    pub formants: Vec<[f64; 3]>,
    /// Sample range of the unvoiced gap, if any.
    pub gap: Option<(usize, usize)>,
}

/// Smooth random walk: a few low-frequency sinusoids, rescaled to `[0, 1]`.
fn smooth_walk(len: usize, rate: f64, max_hz: f64, rng: &mut impl Rng) -> Vec<f64> {
    let parts: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.gen_range(0.2..max_hz), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.3..1.0)))
        .collect();
    let raw: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / rate;
            parts.iter().map(|(f, p, a)| a * (2.0 * PI * f * t + p).sin()).sum()
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    raw.iter().map(|v| (v - lo) / span).collect()
}

pub fn script(cfg: &CorpusConfig, index: usize) -> Script {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9 * (index as u64 + 1)));
    let len = cfg.samples_per_utterance();
    let rate = f64::from(cfg.rate);
    let shape = smooth_walk(len, rate, 1.0, &mut rng);
    let vowel = [smooth_walk(len, rate, 2.0, &mut rng), smooth_walk(len, rate, 2.0, &mut rng)];
    let formants = (0..len)
        .map(|n| {
            [
                350.0 + 450.0 * vowel[0][n],
                900.0 + 1300.0 * vowel[1][n],
                2500.0 + 300.0 * vowel[0][n],
            ]
        })
        .collect();
    let gap = (rng.gen::<f64>() < cfg.gap_probability).then(|| {
        let width = len / 8;
        let start = rng.gen_range(len / 4..len - len / 4 - width);
        (start, start + width)
    });
    Script { shape, formants, gap }
}

/// Linear amplitude of a harmonic at `freq` under `formants`.
pub fn envelope(freq: f64, formants: &[f64; 3], speaker: &SpeakerProfile) -> f64 {
    let peaks: f64 = formants
        .iter()
        .zip([1.0, 0.6, 0.3])
        .map(|(&f, gain)| {
            let centre = f * speaker.formant_scale;
            let bw = 80.0 + 0.1 * centre;
            gain * (-0.5 * ((freq - centre) / bw).powi(2)).exp()
        })
        .sum();
    let tilt = 10f64.powf(speaker.tilt_db_per_khz * freq / 1000.0 / 20.0);
    (peaks + 0.02) * tilt
}

/// Maps a `[0, 1]` contour into a speaker's range on a log scale.
pub fn contour_to_f0(shape: f64, speaker: &SpeakerProfile) -> f64 {
    (speaker.f0_min.ln() + shape * (speaker.f0_max.ln() - speaker.f0_min.ln())).exp()
}

/// One synthesised utterance with its ground-truth F0 per analysis frame
/// (0 on unvoiced frames), on the centred grid.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub speaker: String,
    pub index: usize,
    pub wave: WaveBuffer,
    pub frame_f0: Vec<f64>,
}

impl Utterance {
    pub fn id(&self) -> String {
        format!("{}_{:03}", self.speaker, self.index)
    }
}

/// Renders utterance `index` of `speaker`, optionally overriding the
/// per-sample F0 track.
pub fn render(cfg: &CorpusConfig, speaker: &SpeakerProfile, index: usize, f0_track: Option<&[f64]>) -> Result<Utterance> {
    cfg.validate()?;
    let sc = script(cfg, index);
    let len = sc.shape.len();
    let rate = f64::from(cfg.rate);
    let f0: Vec<f64> = match f0_track {
        Some(track) if track.len() == len => track.to_vec(),
        Some(track) => return Err(invalid(format!("F0 track has {} samples, expected {len}", track.len()))),
        None => sc.shape.iter().map(|&s| contour_to_f0(s, speaker)).collect(),
    };
    let speaker_seed = speaker.name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ speaker_seed.rotate_left(17) ^ index as u64);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let limit = 0.45 * rate;
    let mut phase = 0.0f64;
    let mut samples = Vec::with_capacity(len);
    for n in 0..len {
        phase = (phase + 2.0 * PI * f0[n] / rate) % (2.0 * PI);
        let in_gap = sc.gap.is_some_and(|(a, b)| n >= a && n < b);
        let voiced = if in_gap {
            0.0
        } else {
            let mut acc = 0.0;
            let mut h = 1;
            while (h as f64) * f0[n] < limit {
                let freq = h as f64 * f0[n];
                acc += envelope(freq, &sc.formants[n], speaker) * (h as f64 * phase).sin();
                h += 1;
            }
            acc
        };
        let breath = if in_gap { 0.05 * noise.sample(&mut rng) } else { 0.0 };
        samples.push(voiced + breath);
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let gain = cfg.peak / peak;
    for s in &mut samples {
        *s = (*s * gain + cfg.noise_level * noise.sample(&mut rng)).clamp(-1.0, 1.0);
    }
    let frames = len / cfg.hop;
    let frame_f0 = (0..frames)
        .map(|i| {
            let c = (i * cfg.hop + cfg.hop / 2).min(len - 1);
            match sc.gap {
                Some((a, b)) if c >= a && c < b => 0.0,
                _ => f0[c],
            }
        })
        .collect();
    Ok(Utterance {
        speaker: speaker.name.clone(),
        index,
        wave: WaveBuffer::new(samples, cfg.rate)?,
        frame_f0,
    })
}

/// Every utterance of every speaker, speaker-major.
pub fn synthesize(cfg: &CorpusConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.speakers.len() * cfg.utterances);
    for speaker in &cfg.speakers {
        for i in 0..cfg.utterances {
            out.push(render(cfg, speaker, i, None)?);
        }
    }
    Ok(out)
}

/// Sidecar text: one F0 value per frame.
pub fn f0_sidecar(frame_f0: &[f64]) -> String {
    frame_f0.iter().map(|f| format!("{f:.6}\n")).collect()
}

pub fn parse_f0_sidecar(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| invalid(format!("bad F0 sidecar line `{l}`")))
        })
        .collect()
}
