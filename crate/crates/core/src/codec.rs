//! Waveform buffers, μ-law companding, continuous F0 and auxiliary feature
//! upsampling, together with the on-disk WAV and feature formats.

use std::io::{Read, Write};

use crate::error::{invalid, shape, Error, Result};

pub const DEFAULT_RATE: u32 = 22050;
pub const DEFAULT_HOP: usize = 110;
pub const DEFAULT_MU: u32 = 255;
/// Number of quantization bins for 8-bit μ-law.
pub const MULAW_LEVELS: usize = 256;

const FEATURE_MAGIC: &[u8; 4] = b"QPF1";

/// A mono waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveBuffer {
    samples: Vec<f64>,
    rate: u32,
}

impl WaveBuffer {
    pub fn new(samples: Vec<f64>, rate: u32) -> Result<Self> {
        if rate == 0 {
            return Err(invalid("sampling rate must be positive"));
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !(-1.0..=1.0).contains(*v))
        {
            return Err(Error::InputRange { index, value });
        }
        Ok(Self { samples, rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn rate(&self) -> u32 {
        self.rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Multiplies every sample by `gain`, rejecting results outside `[-1, 1]`.
    pub fn scaled(&self, gain: f64) -> Result<Self> {
        Self::new(self.samples.iter().map(|x| x * gain).collect(), self.rate)
    }

    /// Keeps the first `len` samples.
    pub fn truncated(&self, len: usize) -> Self {
        Self {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            rate: self.rate,
        }
    }
}

/// 8-bit μ-law code sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MuLawCode {
    pub codes: Vec<u8>,
}

impl MuLawCode {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

fn compand(x: f64, mu: f64) -> f64 {
    x.signum() * (mu * x.abs()).ln_1p() / mu.ln_1p()
}

fn expand(y: f64, mu: f64) -> f64 {
    y.signum() * ((1.0 + mu).powf(y.abs()) - 1.0) / mu
}

/// Encodes one sample: `floor((F(x)+1)/2 * 256)` clamped to `[0, 255]`.
pub fn mulaw_encode_sample(x: f64, mu: u32) -> Result<u8> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::InputRange { index: 0, value: x });
    }
    if mu == 0 {
        return Err(invalid("mu must be positive"));
    }
    let y = compand(x, f64::from(mu));
    let bin = ((y + 1.0) / 2.0 * MULAW_LEVELS as f64).floor();
    Ok(bin.clamp(0.0, (MULAW_LEVELS - 1) as f64) as u8)
}

/// Decodes one code at the centre of its companded bin.
pub fn mulaw_decode_sample(code: u8, mu: u32) -> f64 {
    let y = (f64::from(code) + 0.5) / MULAW_LEVELS as f64 * 2.0 - 1.0;
    expand(y, f64::from(mu))
}

pub fn mulaw_encode_samples(samples: &[f64], mu: u32) -> Result<MuLawCode> {
    let codes = samples
        .iter()
        .enumerate()
        .map(|(index, &x)| {
            mulaw_encode_sample(x, mu).map_err(|e| match e {
                Error::InputRange { value, .. } => Error::InputRange { index, value },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MuLawCode { codes })
}

pub fn mulaw_encode(wave: &WaveBuffer, mu: u32) -> Result<MuLawCode> {
    mulaw_encode_samples(wave.samples(), mu)
}

pub fn mulaw_decode(codes: &MuLawCode, mu: u32, rate: u32) -> Result<WaveBuffer> {
    let samples = codes
        .codes
        .iter()
        .map(|&c| mulaw_decode_sample(c, mu).clamp(-1.0, 1.0))
        .collect();
    WaveBuffer::new(samples, rate)
}

/// Fills unvoiced gaps (`f0 <= 0`) by log-linear interpolation between the
/// flanking voiced frames; edges are held at the nearest voiced value.
///
/// Returns the continuous contour and the voiced flags.
pub fn interpolate_continuous_f0(f0: &[f64]) -> Result<(Vec<f64>, Vec<bool>)> {
    let uv: Vec<bool> = f0.iter().map(|&v| v > 0.0).collect();
    let voiced: Vec<usize> = (0..f0.len()).filter(|&i| uv[i]).collect();
    let (&first, &last) = match (voiced.first(), voiced.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::NoVoicedFrames),
    };
    let mut out = f0.to_vec();
    out[..first].fill(f0[first]);
    out[last + 1..].fill(f0[last]);
    for pair in voiced.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a < 2 {
            continue;
        }
        let (la, lb) = (f0[a].ln(), f0[b].ln());
        let span = (b - a) as f64;
        for (i, slot) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let w = (i - a) as f64 / span;
            *slot = (la + w * (lb - la)).exp();
        }
    }
    Ok((out, uv))
}

/// Per-frame conditioning features.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    pub continuous_f0: Vec<f64>,
    pub uv: Vec<bool>,
    pub mcep: Vec<Vec<f64>>,
    pub coded_ap: Vec<[f64; 2]>,
    pub hop: usize,
}

impl FrameFeatures {
    pub fn new(
        continuous_f0: Vec<f64>,
        uv: Vec<bool>,
        mcep: Vec<Vec<f64>>,
        coded_ap: Vec<[f64; 2]>,
        hop: usize,
    ) -> Result<Self> {
        let features = Self {
            continuous_f0,
            uv,
            mcep,
            coded_ap,
            hop,
        };
        features.validate()?;
        Ok(features)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.continuous_f0.len();
        if self.uv.len() != n || self.mcep.len() != n || self.coded_ap.len() != n {
            return Err(shape(format!(
                "feature streams disagree: f0 {}, uv {}, mcep {}, ap {}",
                n,
                self.uv.len(),
                self.mcep.len(),
                self.coded_ap.len()
            )));
        }
        if self.hop == 0 {
            return Err(invalid("hop must be positive"));
        }
        if let Some(i) = self.continuous_f0.iter().position(|&f| !(f > 0.0)) {
            return Err(invalid(format!("continuous F0 not positive at frame {i}")));
        }
        let dim = self.mcep_dim();
        if self.mcep.iter().any(|row| row.len() != dim) {
            return Err(shape("ragged mcep rows"));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.continuous_f0.len()
    }

    pub fn mcep_dim(&self) -> usize {
        self.mcep.first().map_or(0, Vec::len)
    }

    /// Width of one auxiliary row: `[f0, uv, mcep.., ap0, ap1]`.
    pub fn aux_dim(&self) -> usize {
        aux_dim_for(self.mcep_dim())
    }

    /// F0 stream with unvoiced frames zeroed.
    pub fn voiced_f0(&self) -> Vec<f64> {
        self.continuous_f0
            .iter()
            .zip(&self.uv)
            .map(|(&f, &v)| if v { f } else { 0.0 })
            .collect()
    }

    pub fn frame_row(&self, i: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.aux_dim());
        row.push(self.continuous_f0[i]);
        row.push(if self.uv[i] { 1.0 } else { 0.0 });
        row.extend_from_slice(&self.mcep[i]);
        row.extend_from_slice(&self.coded_ap[i]);
        row
    }

    /// Number of samples covered once upsampled.
    pub fn sample_count(&self) -> usize {
        self.frame_count() * self.hop
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        self.validate()?;
        let header = [self.frame_count(), self.hop, self.mcep_dim()];
        w.write_all(FEATURE_MAGIC)?;
        for v in header {
            let v = u32::try_from(v).map_err(|_| invalid("feature header overflows u32"))?;
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.frame_count() * self.aux_dim() * 8);
        for i in 0..self.frame_count() {
            for v in self.frame_row(i) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |reason: &str| Error::Format {
            kind: "feature",
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(bad("missing QPF1 magic"));
        }
        let mut field = [0u8; 4];
        let mut header = [0usize; 3];
        for h in header.iter_mut() {
            r.read_exact(&mut field)?;
            *h = u32::from_le_bytes(field) as usize;
        }
        let [frames, hop, dim] = header;
        let width = aux_dim_for(dim);
        let mut body = Vec::new();
        r.read_to_end(&mut body)?;
        if body.len() != frames * width * 8 {
            return Err(bad("body length disagrees with header"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut f0 = Vec::with_capacity(frames);
        let mut uv = Vec::with_capacity(frames);
        let mut mcep = Vec::with_capacity(frames);
        let mut ap = Vec::with_capacity(frames);
        for row in values.chunks_exact(width) {
            f0.push(row[0]);
            uv.push(row[1] > 0.5);
            mcep.push(row[2..2 + dim].to_vec());
            ap.push([row[2 + dim], row[3 + dim]]);
        }
        Self::new(f0, uv, mcep, ap, hop).map_err(|e| bad(&e.to_string()))
    }
}

pub fn aux_dim_for(mcep_dim: usize) -> usize {
    mcep_dim + 4
}

/// Per-sample auxiliary features, row-major `samples × aux_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl AuxMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "aux data length {} != {rows} x {cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Column 0 holds the continuous F0 of every sample.
    pub fn f0_column(&self) -> Vec<f64> {
        (0..self.rows).map(|t| self.data[t * self.cols]).collect()
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        Self {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }
}

/// Holds each frame for `hop` samples.
pub fn upsample_features(frames: &FrameFeatures) -> Result<AuxMatrix> {
    frames.validate()?;
    if frames.frame_count() == 0 {
        return Err(Error::Empty("frame sequence"));
    }
    let cols = frames.aux_dim();
    let mut data = Vec::with_capacity(frames.sample_count() * cols);
    for i in 0..frames.frame_count() {
        let row = frames.frame_row(i);
        for _ in 0..frames.hop {
            data.extend_from_slice(&row);
        }
    }
    AuxMatrix::new(frames.sample_count(), cols, data)
}

/// Writes a 16-bit PCM mono RIFF file.
pub fn write_wav(wave: &WaveBuffer, mut w: impl Write) -> Result<()> {
    let n = wave.len();
    let data_bytes = u32::try_from(n * 2).map_err(|_| invalid("waveform too long for RIFF"))?;
    let rate = wave.rate();
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_bytes.to_le_bytes());
    for &x in wave.samples() {
        let v = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&out)?;
    Ok(())
}

/// Reads a 16-bit PCM mono RIFF file, scaling by 1/32768.
pub fn read_wav(mut r: impl Read) -> Result<WaveBuffer> {
    let bad = |reason: &str| Error::Format {
        kind: "wav",
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(bad("not a RIFF/WAVE stream"));
    }
    let u16_at = |p: usize| u16::from_le_bytes([bytes[p], bytes[p + 1]]);
    let u32_at = |p: usize| u32::from_le_bytes([bytes[p], bytes[p + 1], bytes[p + 2], bytes[p + 3]]);
    let mut pos = 12;
    let mut rate = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(bad("truncated chunk"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(bad("short fmt chunk"));
                }
                if u16_at(body) != 1 || u16_at(body + 2) != 1 || u16_at(body + 14) != 16 {
                    return Err(bad("only 16-bit PCM mono is supported"));
                }
                rate = Some(u32_at(body + 4));
            }
            b"data" => {
                let rate = rate.ok_or_else(|| bad("data chunk before fmt chunk"))?;
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
                    .collect();
                return WaveBuffer::new(samples, rate);
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(bad("no data chunk"))
}
