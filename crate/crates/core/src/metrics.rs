//! Mel-cepstral distortion and log-F0 error between conditioning features
//! and features re-extracted from generated audio.

use std::fmt::Write as _;

use crate::analysis::{estimate_f0_framed, melcep_extract_framed, AnalysisConfig, Framing};
use crate::codec::{FrameFeatures, WaveBuffer};
use crate::error::{shape, Error, Result};

/// `10 / ln 10 · sqrt(2)`: distortion of a single unit coefficient error.
pub const MCD_SCALE: f64 = 10.0 / std::f64::consts::LN_10;

/// Mean over frames of `(10/ln 10)·sqrt(2·Σ_{d≥1} (c_d − ĉ_d)²)`, in dB.
/// The energy coefficient `c_0` is excluded.
pub fn mcd(reference: &[Vec<f64>], test: &[Vec<f64>]) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(shape(format!("{} reference frames vs {} test frames", reference.len(), test.len())));
    }
    if reference.is_empty() {
        return Err(Error::Empty("mel-cepstral frames"));
    }
    let mut total = 0.0;
    for (n, (r, t)) in reference.iter().zip(test).enumerate() {
        if r.len() != t.len() {
            return Err(shape(format!("frame {n}: order {} vs {}", r.len(), t.len())));
        }
        let sq: f64 = r.iter().zip(t).skip(1).map(|(a, b)| (a - b) * (a - b)).sum();
        total += MCD_SCALE * (2.0 * sq).sqrt();
    }
    Ok(total / reference.len() as f64)
}

/// Log-F0 agreement over frames voiced in both streams.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum F0Agreement {
    Measured {
        rmse: f64,
        /// Share of all frames voiced in both streams.
        overlap: f64,
    },
    /// No frame is voiced in both streams.
    NoOverlap,
}

impl F0Agreement {
    pub fn rmse(&self) -> Option<f64> {
        match self {
            Self::Measured { rmse, .. } => Some(*rmse),
            Self::NoOverlap => None,
        }
    }

    pub fn overlap(&self) -> f64 {
        match self {
            Self::Measured { overlap, .. } => *overlap,
            Self::NoOverlap => 0.0,
        }
    }
}

/// RMSE of natural-log F0; a frame is voiced when its value is positive.
pub fn logf0_rmse(reference: &[f64], test: &[f64]) -> Result<F0Agreement> {
    if reference.len() != test.len() {
        return Err(shape(format!("{} reference frames vs {} test frames", reference.len(), test.len())));
    }
    if reference.is_empty() {
        return Err(Error::Empty("F0 frames"));
    }
    let (mut sq, mut count) = (0.0, 0usize);
    for (&r, &t) in reference.iter().zip(test) {
        if r > 0.0 && t > 0.0 {
            let d = r.ln() - t.ln();
            sq += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(F0Agreement::NoOverlap);
    }
    Ok(F0Agreement::Measured {
        rmse: (sq / count as f64).sqrt(),
        overlap: count as f64 / reference.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtteranceScore {
    pub mcd_db: f64,
    pub f0: F0Agreement,
}

/// Re-analyses `wave` on the reference's frame grid and scores it against
/// the reference features.
pub fn score_utterance(wave: &WaveBuffer, reference: &FrameFeatures, cfg: &AnalysisConfig) -> Result<UtteranceScore> {
    if reference.hop != cfg.hop {
        return Err(shape(format!("reference hop {} vs analysis hop {}", reference.hop, cfg.hop)));
    }
    let needed = reference.sample_count();
    if wave.len() < needed {
        return Err(shape(format!(
            "{} samples cannot cover {} frames of {}",
            wave.len(),
            reference.frame_count(),
            reference.hop
        )));
    }
    let wave = wave.truncated(needed);
    let f0 = estimate_f0_framed(&wave, &cfg.f0, cfg.hop, Framing::Centered)?;
    let mcep = melcep_extract_framed(&wave, &cfg.melcep, cfg.hop, Framing::Centered)?;
    Ok(UtteranceScore {
        mcd_db: mcd(&reference.mcep, &mcep)?,
        f0: logf0_rmse(&reference.voiced_f0(), &f0)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub id: String,
    pub outcome: std::result::Result<UtteranceScore, String>,
}

/// Per-utterance scores of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl RunReport {
    pub fn push(&mut self, id: impl Into<String>, outcome: Result<UtteranceScore>) {
        self.rows.push(ReportRow {
            id: id.into(),
            outcome: outcome.map_err(|e| e.to_string()),
        });
    }

    fn scores(&self) -> impl Iterator<Item = &UtteranceScore> + Clone {
        self.rows.iter().filter_map(|r| r.outcome.as_ref().ok())
    }

    pub fn mean_mcd(&self) -> Option<f64> {
        mean(self.scores().map(|s| s.mcd_db))
    }

    /// Mean over utterances that have any both-voiced frame.
    pub fn mean_logf0_rmse(&self) -> Option<f64> {
        mean(self.scores().filter_map(|s| s.f0.rmse()))
    }

    pub fn mean_overlap(&self) -> Option<f64> {
        mean(self.scores().map(|s| s.f0.overlap()))
    }

    /// Tab-separated table: header, one row per utterance, then the mean row.
    pub fn to_tsv(&self) -> String {
        let num = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from("utterance\tmcd_db\tlogf0_rmse\tvoiced_overlap\tstatus\n");
        for row in &self.rows {
            match &row.outcome {
                Ok(s) => {
                    let status = if s.f0.rmse().is_some() { "ok" } else { "no-voiced-overlap" };
                    let _ = writeln!(
                        out,
                        "{}\t{}\t{}\t{}\t{status}",
                        row.id,
                        num(Some(s.mcd_db)),
                        num(s.f0.rmse()),
                        num(Some(s.f0.overlap()))
                    );
                }
                Err(e) => {
                    let _ = writeln!(out, "{}\tNA\tNA\tNA\terror: {}", row.id, e.replace(['\t', '\n'], " "));
                }
            }
        }
        let ok = self.scores().count();
        let _ = writeln!(
            out,
            "mean\t{}\t{}\t{}\t{ok}/{} scored",
            num(self.mean_mcd()),
            num(self.mean_logf0_rmse()),
            num(self.mean_overlap()),
            self.rows.len()
        );
        out
    }
}
