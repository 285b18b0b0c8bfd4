//! Fine-tuning a speaker-independent vocoder on one target speaker.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::net::{Adam, AdamConfig};
use crate::vocoder::{train_step, Batch, TrainingSequence, VocoderParams, WindowSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptMode {
    /// Only the two post-skip 1×1 convolutions move.
    HeadOnly,
    /// Every parameter moves.
    Full,
}

impl AdaptMode {
    /// Iteration budget used at desk scale.
    pub fn desk_iterations(self) -> usize {
        match self {
            Self::HeadOnly => 500,
            Self::Full => 50,
        }
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sdo" => Ok(Self::HeadOnly),
            "sda" => Ok(Self::Full),
            other => Err(invalid(format!("unknown adaptation mode `{other}` (expected sdo or sda)"))),
        }
    }
}

impl fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::HeadOnly => "sdo",
            Self::Full => "sda",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub iterations: usize,
    /// Ledger row every this many iterations.
    pub report_every: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl AdaptConfig {
    pub fn desk(mode: AdaptMode) -> Self {
        Self {
            mode,
            iterations: mode.desk_iterations(),
            report_every: 10,
            learning_rate: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerRow {
    pub iteration: usize,
    /// Mean training loss over the iterations since the previous row.
    pub train_ce: f64,
    pub val_ce: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossLedger {
    pub rows: Vec<LedgerRow>,
}

impl LossLedger {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("iter\ttrain_ce\tval_ce\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{:.6}\t{:.6}\n", r.iteration, r.train_ce, r.val_ce));
        }
        out
    }
}

/// Mean teacher-forced cross-entropy over whole validation utterances.
pub fn validation_loss(params: &VocoderParams, val: &[TrainingSequence]) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Empty("validation utterances"));
    }
    Batch::new(params, val)?.loss(params)
}

/// Fine-tunes `params` in place and returns the loss ledger. Every parameter
/// is trainable again on return.
pub fn finetune(
    params: &mut VocoderParams,
    data: &WindowSampler,
    val: &[TrainingSequence],
    cfg: &AdaptConfig,
) -> Result<LossLedger> {
    if cfg.report_every == 0 {
        return Err(invalid("report interval must be positive"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation utterances"));
    }
    let mode = cfg.mode;
    params.store.set_trainable(|name| match mode {
        AdaptMode::HeadOnly => VocoderParams::is_head(name),
        AdaptMode::Full => true,
    });
    let result = run(params, data, val, cfg);
    params.store.set_trainable(|_| true);
    result
}

fn run(params: &mut VocoderParams, data: &WindowSampler, val: &[TrainingSequence], cfg: &AdaptConfig) -> Result<LossLedger> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let val_batch = Batch::new(params, val)?;
    let mut ledger = LossLedger::default();
    let (mut acc, mut since) = (0.0, 0usize);
    for it in 1..=cfg.iterations {
        let batch = data.batch(params, &mut rng)?;
        acc += train_step(params, &batch, &mut adam)?;
        since += 1;
        if it % cfg.report_every == 0 || it == cfg.iterations {
            ledger.rows.push(LedgerRow {
                iteration: it,
                train_ce: acc / since as f64,
                val_ce: val_batch.loss(params)?,
            });
            (acc, since) = (0.0, 0);
        }
    }
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::AuxMatrix;
    use crate::dilation::ArchitectureSpec;
    use rand::Rng;

    fn tiny() -> VocoderParams {
        let spec = ArchitectureSpec::desk().with_channels(8, 8, 8);
        VocoderParams::build(&spec, 5, 16000, 3).unwrap()
    }

    fn sequences(n: usize, len: usize, seed: u64) -> Vec<TrainingSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let codes = (0..len).map(|t| (128.0 + 60.0 * (t as f64 * 0.3).sin()) as u8 ^ (rng.gen::<u8>() & 1)).collect();
                let mut aux = Vec::with_capacity(len * 5);
                for _ in 0..len {
                    aux.extend_from_slice(&[200.0, 1.0, 0.1, -0.2, 0.0]);
                }
                TrainingSequence::new(codes, AuxMatrix::new(len, 5, aux).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("SDo".parse::<AdaptMode>().unwrap(), AdaptMode::HeadOnly);
        assert_eq!("sda".parse::<AdaptMode>().unwrap(), AdaptMode::Full);
        assert!("sdx".parse::<AdaptMode>().is_err());
        assert_eq!(AdaptMode::HeadOnly.to_string(), "sdo");
        assert_eq!((AdaptConfig::desk(AdaptMode::Full).iterations, AdaptConfig::desk(AdaptMode::HeadOnly).iterations), (50, 500));
    }

    #[test]
    fn head_only_freezes_everything_else_bitwise() {
        let mut params = tiny();
        let before = params.store.clone();
        let sampler = WindowSampler::new(sequences(2, 300, 1), 100, 2).unwrap();
        let cfg = AdaptConfig {
            iterations: 5,
            report_every: 2,
            learning_rate: 1e-2,
            ..AdaptConfig::desk(AdaptMode::HeadOnly)
        };
        let ledger = finetune(&mut params, &sampler, &sequences(1, 200, 2), &cfg).unwrap();
        assert_eq!(ledger.rows.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![2, 4, 5]);
        let mut head_moved = false;
        for (a, b) in before.iter().zip(params.store.iter()) {
            if VocoderParams::is_head(&a.name) {
                head_moved |= a.value != b.value;
            } else {
                assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{}", a.name);
            }
        }
        assert!(head_moved);
        assert!(params.store.iter().all(|p| p.trainable));
    }

    #[test]
    fn zero_iterations_change_nothing() {
        let mut params = tiny();
        let before = params.store.clone();
        let sampler = WindowSampler::new(sequences(1, 200, 1), 100, 1).unwrap();
        let cfg = AdaptConfig {
            iterations: 0,
            ..AdaptConfig::desk(AdaptMode::Full)
        };
        let ledger = finetune(&mut params, &sampler, &sequences(1, 100, 2), &cfg).unwrap();
        assert!(ledger.rows.is_empty());
        assert_eq!(ledger.to_tsv(), "iter\ttrain_ce\tval_ce\n");
        for (a, b) in before.iter().zip(params.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn validation_loss_is_pure_and_definitional() {
        let params = tiny();
        let val = sequences(2, 150, 4);
        let a = validation_loss(&params, &val).unwrap();
        assert_eq!(a, validation_loss(&params, &val).unwrap());
        let mut copy = params.clone();
        let batch = Batch::new(&copy, &val).unwrap();
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        });
        assert_eq!(train_step(&mut copy, &batch, &mut adam).unwrap(), a);
        assert!(validation_loss(&params, &[]).is_err());

        let mut uniform = tiny();
        for p in uniform.store.iter_mut() {
            if VocoderParams::is_head(&p.name) {
                p.value.fill(0.0);
            }
        }
        assert!((validation_loss(&uniform, &val).unwrap() - 256f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn full_adaptation_lowers_validation_loss() {
        let mut params = tiny();
        let val = sequences(1, 300, 9);
        let before = validation_loss(&params, &val).unwrap();
        let sampler = WindowSampler::new(sequences(3, 400, 8), 200, 2).unwrap();
        let cfg = AdaptConfig {
            learning_rate: 3e-3,
            ..AdaptConfig::desk(AdaptMode::Full)
        };
        let ledger = finetune(&mut params, &sampler, &val, &cfg).unwrap();
        assert!(ledger.rows.last().unwrap().val_ce < before);
        assert!(ledger.rows.last().unwrap().train_ce < ledger.rows[0].train_ce);
    }
}
