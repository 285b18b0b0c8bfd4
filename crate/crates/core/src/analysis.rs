//! Frame-level analysis: autocorrelation F0, log-mel cepstrum and two-band
//! aperiodicity.
//!
//! Every extractor walks the same frame grid. With [`Framing::Valid`] a frame
//! `i` covers samples `[i*hop, i*hop + window)` and there are
//! `floor((len - window)/hop) + 1` frames. [`Framing::Centered`] shifts the
//! grid so frame `i` is centred on the middle of the hold segment
//! `[i*hop, (i+1)*hop)` used by the vocoder, reading zeros outside the
//! signal, and yields `floor(len/hop)` frames regardless of window length.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::codec::{interpolate_continuous_f0, FrameFeatures, WaveBuffer};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framing {
    Valid,
    Centered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F0Config {
    pub fmin: f64,
    pub fmax: f64,
    pub voicing_threshold: f64,
    /// Window length in samples; `None` means `4 / fmin` seconds.
    pub window: Option<usize>,
}

impl Default for F0Config {
    fn default() -> Self {
        Self {
            fmin: 80.0,
            fmax: 400.0,
            voicing_threshold: 0.45,
            window: None,
        }
    }
}

impl F0Config {
    pub fn window_len(&self, rate: u32) -> usize {
        self.window
            .unwrap_or_else(|| (4.0 * f64::from(rate) / self.fmin).ceil() as usize)
    }

    fn validate(&self, rate: u32) -> Result<()> {
        let nyquist = f64::from(rate) / 2.0;
        if !(self.fmin > 0.0 && self.fmin < self.fmax && self.fmax < nyquist) {
            return Err(invalid(format!(
                "need 0 < fmin < fmax < rate/2, got {} / {} at {rate} Hz",
                self.fmin, self.fmax
            )));
        }
        let min_window = (2.0 * f64::from(rate) / self.fmin).ceil() as usize;
        if self.window_len(rate) < min_window {
            return Err(invalid("F0 window shorter than two periods of fmin"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelcepConfig {
    pub order: usize,
    pub window: usize,
    /// Mel filter count; `None` means `2 * order`.
    pub filters: Option<usize>,
}

impl Default for MelcepConfig {
    fn default() -> Self {
        Self {
            order: 34,
            window: 1024,
            filters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApConfig {
    pub window: usize,
    /// Lag search range for the long-term predictor, in Hz.
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self {
            window: 1024,
            fmin: 60.0,
            fmax: 500.0,
        }
    }
}

/// Settings for turning a waveform into vocoder conditioning features.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub hop: usize,
    pub f0: F0Config,
    pub melcep: MelcepConfig,
    pub ap: ApConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            hop: crate::codec::DEFAULT_HOP,
            f0: F0Config::default(),
            melcep: MelcepConfig::default(),
            ap: ApConfig::default(),
        }
    }
}

/// Start offsets (possibly negative) of every analysis frame.
pub fn frame_starts(len: usize, window: usize, hop: usize, framing: Framing) -> Result<Vec<isize>> {
    if hop == 0 || window == 0 {
        return Err(invalid("hop and window must be positive"));
    }
    match framing {
        Framing::Valid => {
            if window > len {
                return Err(invalid(format!(
                    "window of {window} samples exceeds signal of {len}"
                )));
            }
            let count = (len - window) / hop + 1;
            Ok((0..count).map(|i| (i * hop) as isize).collect())
        }
        Framing::Centered => {
            let count = len / hop;
            let offset = (window as isize - hop as isize) / 2;
            Ok((0..count).map(|i| (i * hop) as isize - offset).collect())
        }
    }
}

fn read_frame(samples: &[f64], start: isize, window: usize, out: &mut [f64]) {
    for (k, slot) in out.iter_mut().enumerate().take(window) {
        let idx = start + k as isize;
        *slot = if idx >= 0 && (idx as usize) < samples.len() {
            samples[idx as usize]
        } else {
            0.0
        };
    }
}

fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Per-frame F0 in Hz, 0 marking unvoiced frames.
pub fn estimate_f0(wave: &WaveBuffer, cfg: &F0Config, hop: usize) -> Result<Vec<f64>> {
    estimate_f0_framed(wave, cfg, hop, Framing::Valid)
}

pub fn estimate_f0_framed(
    wave: &WaveBuffer,
    cfg: &F0Config,
    hop: usize,
    framing: Framing,
) -> Result<Vec<f64>> {
    cfg.validate(wave.rate())?;
    let rate = f64::from(wave.rate());
    let window = cfg.window_len(wave.rate());
    let starts = frame_starts(wave.len(), window, hop, framing)?;
    let lag_min = ((rate / cfg.fmax).floor() as usize).max(2);
    let lag_max = (rate / cfg.fmin).ceil() as usize;
    if lag_max + 2 >= window {
        return Err(invalid("F0 window too short for the lag range"));
    }
    let mut frame = vec![0.0; window];
    let mut corr = vec![0.0; lag_max + 2];
    let mut out = Vec::with_capacity(starts.len());
    for &start in &starts {
        read_frame(wave.samples(), start, window, &mut frame);
        let mean = frame.iter().sum::<f64>() / window as f64;
        frame.iter_mut().for_each(|v| *v -= mean);
        for lag in lag_min - 1..=lag_max + 1 {
            corr[lag] = normalized_autocorrelation(&frame, lag);
        }
        out.push(pick_period(&corr, lag_min, lag_max, cfg.voicing_threshold).map_or(0.0, |p| rate / p));
    }
    Ok(out)
}

fn normalized_autocorrelation(x: &[f64], lag: usize) -> f64 {
    let n = x.len() - lag;
    let (a, b) = (&x[..n], &x[lag..]);
    let mut cross = 0.0;
    let mut ea = 0.0;
    let mut eb = 0.0;
    for (u, v) in a.iter().zip(b) {
        cross += u * v;
        ea += u * u;
        eb += v * v;
    }
    let denom = (ea * eb).sqrt();
    if denom <= 1e-300 {
        0.0
    } else {
        cross / denom
    }
}

/// Chooses the shortest local maximum within 90% of the global peak, then
/// refines it with a parabola through its neighbours.
fn pick_period(corr: &[f64], lag_min: usize, lag_max: usize, threshold: f64) -> Option<f64> {
    let best = (lag_min..=lag_max)
        .map(|l| corr[l])
        .fold(f64::NEG_INFINITY, f64::max);
    if !(best >= threshold) {
        return None;
    }
    let lag = (lag_min..=lag_max).find(|&l| {
        corr[l] >= 0.9 * best && corr[l] >= corr[l - 1] && corr[l] >= corr[l + 1]
    })?;
    let (left, mid, right) = (corr[lag - 1], corr[lag], corr[lag + 1]);
    let curvature = left - 2.0 * mid + right;
    let shift = if curvature.abs() > 1e-12 {
        (0.5 * (left - right) / curvature).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    Some(lag as f64 + shift)
}

fn mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Cached FFT plan, window and filterbank for one spectral configuration.
struct SpectralFrontEnd {
    fft: Arc<dyn Fft<f64>>,
    size: usize,
    window: Vec<f64>,
}

impl SpectralFrontEnd {
    fn new(window: usize) -> Self {
        let size = window.next_power_of_two();
        let fft = FftPlanner::new().plan_fft_forward(size);
        Self {
            fft,
            size,
            window: hann(window),
        }
    }

    /// Power spectrum `|X_k|^2` for `k in 0..=size/2` of the windowed frame.
    fn power(&self, frame: &[f64], buf: &mut Vec<Complex<f64>>) -> Vec<f64> {
        buf.clear();
        buf.extend(frame.iter().zip(&self.window).map(|(x, w)| Complex::new(x * w, 0.0)));
        buf.resize(self.size, Complex::new(0.0, 0.0));
        self.fft.process(buf);
        buf[..=self.size / 2].iter().map(|c| c.norm_sqr()).collect()
    }
}

fn mel_filterbank(count: usize, fft_size: usize, rate: f64) -> Vec<Vec<(usize, f64)>> {
    let top = mel(rate / 2.0);
    let edges: Vec<f64> = (0..count + 2)
        .map(|i| mel_to_hz(top * i as f64 / (count + 1) as f64))
        .collect();
    let bin_hz = rate / fft_size as f64;
    (0..count)
        .map(|m| {
            let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..=fft_size / 2)
                .filter_map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= centre {
                        (f - lo) / (centre - lo)
                    } else if f > centre && f < hi {
                        (hi - f) / (hi - centre)
                    } else {
                        0.0
                    };
                    (w > 0.0).then_some((k, w))
                })
                .collect()
        })
        .collect()
}

fn dct_matrix(rows: usize, n: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|k| {
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            (0..n)
                .map(|i| scale * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos())
                .collect()
        })
        .collect()
}

/// Log-mel cepstrum of every frame (coefficient 0 carries the energy).
pub fn melcep_extract(wave: &WaveBuffer, cfg: &MelcepConfig, hop: usize) -> Result<Vec<Vec<f64>>> {
    melcep_extract_framed(wave, cfg, hop, Framing::Valid)
}

pub fn melcep_extract_framed(
    wave: &WaveBuffer,
    cfg: &MelcepConfig,
    hop: usize,
    framing: Framing,
) -> Result<Vec<Vec<f64>>> {
    if cfg.order < 2 {
        return Err(invalid("mel-cepstral order must be at least 2"));
    }
    let filters = cfg.filters.unwrap_or(2 * cfg.order);
    if filters < 2 * cfg.order {
        return Err(invalid("filterbank needs at least 2*order filters"));
    }
    let starts = frame_starts(wave.len(), cfg.window, hop, framing)?;
    let front = SpectralFrontEnd::new(cfg.window);
    let bank = mel_filterbank(filters, front.size, f64::from(wave.rate()));
    if bank.iter().any(Vec::is_empty) {
        return Err(invalid("window too short to resolve every mel filter"));
    }
    let dct = dct_matrix(cfg.order, filters);
    let mut frame = vec![0.0; cfg.window];
    let mut buf = Vec::with_capacity(front.size);
    let mut out = Vec::with_capacity(starts.len());
    for &start in &starts {
        read_frame(wave.samples(), start, cfg.window, &mut frame);
        let power = front.power(&frame, &mut buf);
        let energies: Vec<f64> = bank
            .iter()
            .map(|taps| taps.iter().map(|&(k, w)| w * power[k]).sum())
            .collect();
        let peak = energies.iter().cloned().fold(0.0, f64::max);
        let floor = (1e-8 * peak).max(1e-30);
        let logs: Vec<f64> = energies.iter().map(|&e| 0.5 * e.max(floor).ln()).collect();
        out.push(
            dct.iter()
                .map(|row| row.iter().zip(&logs).map(|(c, l)| c * l).sum())
                .collect(),
        );
    }
    Ok(out)
}

const AP_FLOOR_DB: f64 = -60.0;

/// Two-band aperiodicity in `[-1, 0]`: the log ratio of long-term prediction
/// residual energy to total energy below and above `rate/4`, clamped to
/// `[-60, 0]` dB and divided by 60.
pub fn code_aperiodicity(wave: &WaveBuffer, cfg: &ApConfig, hop: usize) -> Result<Vec<[f64; 2]>> {
    code_aperiodicity_framed(wave, cfg, hop, Framing::Valid)
}

pub fn code_aperiodicity_framed(
    wave: &WaveBuffer,
    cfg: &ApConfig,
    hop: usize,
    framing: Framing,
) -> Result<Vec<[f64; 2]>> {
    let rate = f64::from(wave.rate());
    let lag_min = ((rate / cfg.fmax).floor() as usize).max(2);
    let lag_max = (rate / cfg.fmin).ceil() as usize;
    if !(cfg.fmin > 0.0 && cfg.fmin < cfg.fmax) || lag_max + 2 >= cfg.window {
        return Err(invalid("aperiodicity window too short for its lag range"));
    }
    let starts = frame_starts(wave.len(), cfg.window, hop, framing)?;
    let front = SpectralFrontEnd::new(cfg.window);
    let split = front.size / 4;
    let mut frame = vec![0.0; cfg.window];
    let mut buf = Vec::with_capacity(front.size);
    let mut out = Vec::with_capacity(starts.len());
    for &start in &starts {
        read_frame(wave.samples(), start, cfg.window, &mut frame);
        let (residual, reference) = ltp_residual(&frame, lag_min, lag_max);
        let res_power = front.power(&residual, &mut buf);
        let ref_power = front.power(&reference, &mut buf);
        let total: f64 = ref_power.iter().sum();
        let mut coded = [-1.0; 2];
        for (band, range) in [(0, 0..split), (1, split..ref_power.len())] {
            let e_ref: f64 = ref_power[range.clone()].iter().sum();
            let e_res: f64 = res_power[range].iter().sum();
            if e_ref > 1e-12 * total.max(1e-300) && e_ref > 1e-300 {
                let db = 10.0 * (e_res.max(1e-300) / e_ref).log10();
                coded[band] = db.clamp(AP_FLOOR_DB, 0.0) / -AP_FLOOR_DB;
            }
        }
        out.push(coded);
    }
    Ok(out)
}

/// Residual of the best three-tap long-term predictor, aligned with the
/// reference segment it predicts (both zero-padded to the frame length).
fn ltp_residual(frame: &[f64], lag_min: usize, lag_max: usize) -> (Vec<f64>, Vec<f64>) {
    let n = frame.len();
    let mut best_lag = lag_min;
    let mut best = f64::NEG_INFINITY;
    for lag in lag_min..=lag_max {
        let r = normalized_autocorrelation(frame, lag);
        if r > best {
            best = r;
            best_lag = lag;
        }
    }
    let lag = best_lag;
    let first = lag + 1;
    // Least-squares fit of x[t] from x[t-lag-1], x[t-lag], x[t-lag+1].
    let mut gram = [[0.0f64; 3]; 3];
    let mut rhs = [0.0f64; 3];
    for t in first..n {
        let taps = [frame[t - lag - 1], frame[t - lag], frame[t - lag + 1]];
        for i in 0..3 {
            rhs[i] += taps[i] * frame[t];
            for j in 0..3 {
                gram[i][j] += taps[i] * taps[j];
            }
        }
    }
    let trace = gram[0][0] + gram[1][1] + gram[2][2];
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += 1e-12 * trace + 1e-300;
    }
    let coef = solve3(gram, rhs).unwrap_or([0.0; 3]);
    let mut residual = vec![0.0; n];
    let mut reference = vec![0.0; n];
    for t in first..n {
        let pred = coef[0] * frame[t - lag - 1] + coef[1] * frame[t - lag] + coef[2] * frame[t - lag + 1];
        residual[t] = frame[t] - pred;
        reference[t] = frame[t];
    }
    (residual, reference)
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Extracts vocoder conditioning features on the centred grid: continuous F0
/// and voicing, log-mel cepstrum and coded aperiodicity.
pub fn extract_features(wave: &WaveBuffer, cfg: &AnalysisConfig) -> Result<FrameFeatures> {
    let f0 = estimate_f0_framed(wave, &cfg.f0, cfg.hop, Framing::Centered)?;
    let (continuous_f0, uv) = interpolate_continuous_f0(&f0)?;
    let mcep = melcep_extract_framed(wave, &cfg.melcep, cfg.hop, Framing::Centered)?;
    let coded_ap = code_aperiodicity_framed(wave, &cfg.ap, cfg.hop, Framing::Centered)?;
    FrameFeatures::new(continuous_f0, uv, mcep, coded_ap, cfg.hop)
}
