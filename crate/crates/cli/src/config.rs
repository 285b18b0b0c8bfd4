//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use qpnet_core::adaptation::AdaptMode;
use qpnet_core::corpus::{CorpusConfig, SpeakerProfile};
use qpnet_core::dilation::{ArchitectureSpec, CascadeOrder};

use crate::error::{CliError, CliResult};

/// Layer structure presets; channel widths may be overridden separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchPreset {
    /// 3×1 fixed + 2×1 adaptive at 64 channels.
    Desk,
    /// 5×1 fixed at 64 channels: the desk QPNet's size without adaptive layers.
    WnDesk,
    Qpnet,
    Wnf,
    Wnc,
}

impl ArchPreset {
    fn parse(s: &str) -> CliResult<Self> {
        Ok(match s {
            "desk" => Self::Desk,
            "wn-desk" => Self::WnDesk,
            "qpnet" => Self::Qpnet,
            "wnf" => Self::Wnf,
            "wnc" => Self::Wnc,
            other => return Err(CliError::Config(format!("unknown arch `{other}`"))),
        })
    }

    pub fn spec(self) -> ArchitectureSpec {
        match self {
            Self::Desk => ArchitectureSpec::desk(),
            Self::WnDesk => ArchitectureSpec {
                fixed_layers: 5,
                adaptive_layers: 0,
                adaptive_repeats: 0,
                ..ArchitectureSpec::desk()
            },
            Self::Qpnet => ArchitectureSpec::qpnet(),
            Self::Wnf => ArchitectureSpec::wn_full(),
            Self::Wnc => ArchitectureSpec::wn_compact(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub seed: u64,
    pub rate: u32,
    pub hop: usize,
    pub speakers: Vec<SpeakerProfile>,
    pub utterances: usize,
    pub test_utterances: usize,
    pub seconds: f64,
    pub noise_level: f64,
    pub gap_probability: f64,

    pub arch: ArchPreset,
    pub residual_channels: Option<usize>,
    pub skip_channels: Option<usize>,
    pub head_channels: Option<usize>,
    pub period_divisor: u32,
    pub cascade_order: CascadeOrder,

    /// Empty means every speaker.
    pub train_speakers: Vec<String>,
    pub train_steps: usize,
    pub window: usize,
    pub windows_per_batch: usize,
    pub learning_rate: f64,
    pub report_every: usize,

    pub adapt_speaker: String,
    pub adapt_mode: AdaptMode,
    pub adapt_iterations: Option<usize>,
    pub adapt_learning_rate: f64,

    pub source_speaker: String,
    pub target_speaker: String,
    pub converter_hidden_layers: usize,
    pub converter_hidden_units: usize,
    pub converter_epochs: usize,
    pub converter_learning_rate: f64,

    pub temperature: f64,
    /// Checkpoint used by `generate`, relative to the run directory.
    pub generate_checkpoint: PathBuf,
    /// Feature directory used by `generate` and `evaluate`, relative to the run directory.
    pub generate_features: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        Self {
            run_dir: PathBuf::from("run"),
            seed: 1,
            rate: corpus.rate,
            hop: corpus.hop,
            speakers: corpus.speakers,
            utterances: 8,
            test_utterances: 2,
            seconds: 1.0,
            noise_level: corpus.noise_level,
            gap_probability: 0.25,
            arch: ArchPreset::Desk,
            residual_channels: None,
            skip_channels: None,
            head_channels: None,
            period_divisor: 8,
            cascade_order: CascadeOrder::FixedFirst,
            train_speakers: Vec::new(),
            train_steps: 200,
            window: 1024,
            windows_per_batch: 4,
            learning_rate: 1e-3,
            report_every: 10,
            adapt_speaker: "spk_high".into(),
            adapt_mode: AdaptMode::Full,
            adapt_iterations: None,
            adapt_learning_rate: 1e-4,
            source_speaker: "spk_low".into(),
            target_speaker: "spk_high".into(),
            converter_hidden_layers: 2,
            converter_hidden_units: 64,
            converter_epochs: 300,
            converter_learning_rate: 1e-3,
            temperature: 1.0,
            generate_checkpoint: PathBuf::from("models/vocoder.ckpt"),
            generate_features: PathBuf::from("converted"),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("`{key}` cannot take the value `{value}`")))
}

fn speaker(entry: &str) -> CliResult<SpeakerProfile> {
    let parts: Vec<&str> = entry.split(':').map(str::trim).collect();
    if parts.len() != 5 || parts[0].is_empty() {
        return Err(CliError::Config(format!(
            "speaker `{entry}` must read name:f0_min:f0_max:formant_scale:tilt_db_per_khz"
        )));
    }
    Ok(SpeakerProfile::new(
        parts[0],
        num("speakers", parts[1])?,
        num("speakers", parts[2])?,
        num("speakers", parts[3])?,
        num("speakers", parts[4])?,
    ))
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl RunConfig {
    /// Every key accepted by [`RunConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "run_dir",
        "seed",
        "rate",
        "hop",
        "speakers",
        "utterances",
        "test_utterances",
        "seconds",
        "noise_level",
        "gap_probability",
        "arch",
        "residual_channels",
        "skip_channels",
        "head_channels",
        "period_divisor",
        "cascade_order",
        "train_speakers",
        "train_steps",
        "window",
        "windows_per_batch",
        "learning_rate",
        "report_every",
        "adapt_speaker",
        "adapt_mode",
        "adapt_iterations",
        "adapt_learning_rate",
        "source_speaker",
        "target_speaker",
        "converter_hidden_layers",
        "converter_hidden_units",
        "converter_epochs",
        "converter_learning_rate",
        "temperature",
        "generate_checkpoint",
        "generate_features",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let v = value.trim();
        match key.trim() {
            "run_dir" => self.run_dir = PathBuf::from(v),
            "seed" => self.seed = num(key, v)?,
            "rate" => self.rate = num(key, v)?,
            "hop" => self.hop = num(key, v)?,
            "speakers" => self.speakers = list(v).iter().map(|e| speaker(e)).collect::<CliResult<_>>()?,
            "utterances" => self.utterances = num(key, v)?,
            "test_utterances" => self.test_utterances = num(key, v)?,
            "seconds" => self.seconds = num(key, v)?,
            "noise_level" => self.noise_level = num(key, v)?,
            "gap_probability" => self.gap_probability = num(key, v)?,
            "arch" => self.arch = ArchPreset::parse(v)?,
            "residual_channels" => self.residual_channels = Some(num(key, v)?),
            "skip_channels" => self.skip_channels = Some(num(key, v)?),
            "head_channels" => self.head_channels = Some(num(key, v)?),
            "period_divisor" => self.period_divisor = num(key, v)?,
            "cascade_order" => self.cascade_order = v.parse().map_err(|e: qpnet_core::Error| CliError::Config(e.to_string()))?,
            "train_speakers" => self.train_speakers = list(v),
            "train_steps" => self.train_steps = num(key, v)?,
            "window" => self.window = num(key, v)?,
            "windows_per_batch" => self.windows_per_batch = num(key, v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "report_every" => self.report_every = num(key, v)?,
            "adapt_speaker" => self.adapt_speaker = v.to_string(),
            "adapt_mode" => self.adapt_mode = v.parse().map_err(|e: qpnet_core::Error| CliError::Config(e.to_string()))?,
            "adapt_iterations" => self.adapt_iterations = Some(num(key, v)?),
            "adapt_learning_rate" => self.adapt_learning_rate = num(key, v)?,
            "source_speaker" => self.source_speaker = v.to_string(),
            "target_speaker" => self.target_speaker = v.to_string(),
            "converter_hidden_layers" => self.converter_hidden_layers = num(key, v)?,
            "converter_hidden_units" => self.converter_hidden_units = num(key, v)?,
            "converter_epochs" => self.converter_epochs = num(key, v)?,
            "converter_learning_rate" => self.converter_learning_rate = num(key, v)?,
            "temperature" => self.temperature = num(key, v)?,
            "generate_checkpoint" => self.generate_checkpoint = PathBuf::from(v),
            "generate_features" => self.generate_features = PathBuf::from(v),
            other => return Err(CliError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(CliError::io(p))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.corpus().validate()?;
        if self.test_utterances == 0 || self.test_utterances >= self.utterances {
            return Err(CliError::Config(
                "test_utterances must be at least 1 and leave training utterances".into(),
            ));
        }
        let names: Vec<&str> = self.speakers.iter().map(|s| s.name.as_str()).collect();
        for (what, name) in [
            ("adapt_speaker", &self.adapt_speaker),
            ("source_speaker", &self.source_speaker),
            ("target_speaker", &self.target_speaker),
        ]
        .into_iter()
        .chain(self.train_speakers.iter().map(|s| ("train_speakers", s)))
        {
            if !names.contains(&name.as_str()) {
                return Err(CliError::Config(format!("{what}: no speaker named `{name}`")));
            }
        }
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(CliError::Config("speaker names must be unique".into()));
        }
        self.architecture().validate()?;
        if self.window == 0 || self.windows_per_batch == 0 || self.report_every == 0 {
            return Err(CliError::Config("window, windows_per_batch and report_every must be positive".into()));
        }
        Ok(())
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            rate: self.rate,
            hop: self.hop,
            speakers: self.speakers.clone(),
            utterances: self.utterances,
            seconds: self.seconds,
            noise_level: self.noise_level,
            gap_probability: self.gap_probability,
            seed: self.seed,
            ..CorpusConfig::default()
        }
    }

    pub fn architecture(&self) -> ArchitectureSpec {
        let mut spec = self.arch.spec();
        spec.residual_channels = self.residual_channels.unwrap_or(spec.residual_channels);
        spec.skip_channels = self.skip_channels.unwrap_or(spec.skip_channels);
        spec.head_channels = self.head_channels.unwrap_or(spec.head_channels);
        spec.period_divisor = self.period_divisor;
        spec.order = self.cascade_order;
        spec
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.utterances - self.test_utterances
    }

    pub fn test_indices(&self) -> std::ops::Range<usize> {
        self.utterances - self.test_utterances..self.utterances
    }

    pub fn training_speakers(&self) -> Vec<String> {
        if self.train_speakers.is_empty() {
            self.speakers.iter().map(|s| s.name.clone()).collect()
        } else {
            self.train_speakers.clone()
        }
    }
}
