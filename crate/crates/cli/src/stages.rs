//! Pipeline stages. Every stage reads and writes under the run directory and
//! records its outputs in the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qpnet_core::adaptation::{finetune, AdaptConfig};
use qpnet_core::analysis::{extract_features, AnalysisConfig};
use qpnet_core::codec::{read_wav, write_wav, FrameFeatures, WaveBuffer};
use qpnet_core::converter::{train_converter, ConversionModel, ConverterConfig};
use qpnet_core::corpus::{f0_sidecar, synthesize};
use qpnet_core::metrics::{score_utterance, RunReport};
use qpnet_core::net::{Adam, AdamConfig};
use qpnet_core::vocoder::{generate, train_step, Sampling, TrainingSequence, VocoderParams, WindowSampler};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest;

pub const CORPUS_DIR: &str = "corpus";
pub const FEATURE_DIR: &str = "features";
pub const MODEL_DIR: &str = "models";
pub const LEDGER_DIR: &str = "ledgers";
pub const CONVERTED_DIR: &str = "converted";
pub const GENERATED_DIR: &str = "generated";
pub const REPORT_DIR: &str = "reports";

pub const VOCODER_CHECKPOINT: &str = "models/vocoder.ckpt";
pub const CONVERTER_CHECKPOINT: &str = "models/converter.ckpt";
pub const EVALUATION_REPORT: &str = "reports/evaluation.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SynthCorpus,
    Extract,
    TrainVocoder,
    Adapt,
    TrainConverter,
    Convert,
    Generate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::SynthCorpus,
        Stage::Extract,
        Stage::TrainVocoder,
        Stage::Adapt,
        Stage::TrainConverter,
        Stage::Convert,
        Stage::Generate,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthCorpus => "synth-corpus",
            Stage::Extract => "extract",
            Stage::TrainVocoder => "train-vocoder",
            Stage::Adapt => "adapt",
            Stage::TrainConverter => "train-converter",
            Stage::Convert => "convert",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageOptions {
    /// Also write the per-utterance dilation plan report during `generate`.
    pub dump_plan: bool,
}

/// Runs one stage and returns the artifacts it wrote, relative to the run
/// directory.
pub fn run_stage(stage: Stage, cfg: &RunConfig, opts: StageOptions) -> CliResult<Vec<String>> {
    let ctx = Ctx { cfg, stage: stage.name() };
    fs::create_dir_all(&cfg.run_dir).map_err(CliError::io(&cfg.run_dir))?;
    let (inputs, artifacts) = match stage {
        Stage::SynthCorpus => ctx.synth_corpus()?,
        Stage::Extract => ctx.extract()?,
        Stage::TrainVocoder => ctx.train_vocoder()?,
        Stage::Adapt => ctx.adapt()?,
        Stage::TrainConverter => ctx.train_converter()?,
        Stage::Convert => ctx.convert()?,
        Stage::Generate => ctx.generate(opts)?,
        Stage::Evaluate => ctx.evaluate()?,
    };
    manifest::record(&cfg.run_dir, stage.name(), &inputs, cfg.seed, &artifacts)?;
    Ok(artifacts)
}

/// Runs every stage in order.
pub fn run_all(cfg: &RunConfig, opts: StageOptions) -> CliResult<Vec<String>> {
    let mut out = Vec::new();
    for stage in Stage::ALL {
        out.extend(run_stage(stage, cfg, opts)?);
    }
    Ok(out)
}

fn utterance_id(speaker: &str, index: usize) -> String {
    format!("{speaker}_{index:03}")
}

/// Stable per-name seed offset (FNV-1a).
fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

type StageOutput = (Vec<String>, Vec<String>);

struct Ctx<'a> {
    cfg: &'a RunConfig,
    stage: &'static str,
}

impl Ctx<'_> {
    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.cfg.run_dir.join(rel)
    }

    fn dir(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p).map_err(CliError::io(&p))?;
        Ok(p)
    }

    fn require(&self, rel: impl AsRef<Path>) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingInput { stage: self.stage, path: p })
        }
    }

    fn read(&self, rel: impl AsRef<Path>) -> CliResult<Vec<u8>> {
        let p = self.require(rel)?;
        fs::read(&p).map_err(CliError::io(&p))
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> CliResult<String> {
        let p = self.path(rel);
        fs::write(&p, bytes).map_err(CliError::io(&p))?;
        Ok(rel.to_string())
    }

    fn features(&self, rel: &str) -> CliResult<FrameFeatures> {
        let f = FrameFeatures::read_from(self.read(rel)?.as_slice())?;
        if f.hop != self.cfg.hop {
            return Err(CliError::mismatch(self.stage, format!("{rel} uses hop {} but the run uses {}", f.hop, self.cfg.hop)));
        }
        Ok(f)
    }

    fn wave(&self, rel: &str) -> CliResult<WaveBuffer> {
        let w = read_wav(self.read(rel)?.as_slice())?;
        if w.rate() != self.cfg.rate {
            return Err(CliError::mismatch(self.stage, format!("{rel} is {} Hz but the run uses {}", w.rate(), self.cfg.rate)));
        }
        Ok(w)
    }

    fn vocoder(&self, rel: &Path) -> CliResult<VocoderParams> {
        let params = VocoderParams::load(self.read(rel)?.as_slice())?;
        if params.rate != self.cfg.rate {
            return Err(CliError::mismatch(
                self.stage,
                format!("{} was trained at {} Hz, the run uses {}", rel.display(), params.rate, self.cfg.rate),
            ));
        }
        Ok(params)
    }

    fn analysis(&self) -> AnalysisConfig {
        AnalysisConfig {
            hop: self.cfg.hop,
            ..AnalysisConfig::default()
        }
    }

    fn sequences(&self, speakers: &[String], indices: std::ops::Range<usize>) -> CliResult<(Vec<String>, Vec<TrainingSequence>)> {
        let mut inputs = Vec::new();
        let mut seqs = Vec::new();
        for spk in speakers {
            for i in indices.clone() {
                let id = utterance_id(spk, i);
                let (wav, feat) = (format!("{CORPUS_DIR}/{id}.wav"), format!("{FEATURE_DIR}/{id}.feat"));
                let seq = TrainingSequence::from_wave(&self.wave(&wav)?, &self.features(&feat)?)?;
                seqs.push(seq);
                inputs.push(wav);
                inputs.push(feat);
            }
        }
        Ok((inputs, seqs))
    }

    fn synth_corpus(&self) -> CliResult<StageOutput> {
        self.dir(CORPUS_DIR)?;
        let mut artifacts = Vec::new();
        for u in synthesize(&self.cfg.corpus())? {
            let mut wav = Vec::new();
            write_wav(&u.wave, &mut wav)?;
            artifacts.push(self.write(&format!("{CORPUS_DIR}/{}.wav", u.id()), &wav)?);
            artifacts.push(self.write(&format!("{CORPUS_DIR}/{}.f0", u.id()), f0_sidecar(&u.frame_f0).as_bytes())?);
        }
        Ok((Vec::new(), artifacts))
    }

    fn extract(&self) -> CliResult<StageOutput> {
        self.dir(FEATURE_DIR)?;
        let (mut inputs, mut artifacts) = (Vec::new(), Vec::new());
        for spk in &self.cfg.speakers {
            for i in 0..self.cfg.utterances {
                let id = utterance_id(&spk.name, i);
                let wav = format!("{CORPUS_DIR}/{id}.wav");
                let features = extract_features(&self.wave(&wav)?, &self.analysis())?;
                let mut buf = Vec::new();
                features.write_to(&mut buf)?;
                artifacts.push(self.write(&format!("{FEATURE_DIR}/{id}.feat"), &buf)?);
                inputs.push(wav);
            }
        }
        Ok((inputs, artifacts))
    }

    fn train_vocoder(&self) -> CliResult<StageOutput> {
        let cfg = self.cfg;
        let (inputs, seqs) = self.sequences(&cfg.training_speakers(), cfg.train_indices())?;
        let mut params = VocoderParams::build(&cfg.architecture(), seqs[0].aux.cols(), cfg.rate, cfg.seed)?;
        params.fit_aux_normalization(seqs.iter().map(|s| &s.aux))?;
        let sampler = WindowSampler::new(seqs, cfg.window, cfg.windows_per_batch)?;
        let mut adam = Adam::new(AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let mut ledger = String::from("step\ttrain_ce\n");
        let (mut acc, mut since) = (0.0, 0usize);
        for step in 1..=cfg.train_steps {
            let batch = sampler.batch(&params, &mut rng)?;
            acc += train_step(&mut params, &batch, &mut adam)?;
            since += 1;
            if step % cfg.report_every == 0 || step == cfg.train_steps {
                ledger.push_str(&format!("{step}\t{:.6}\n", acc / since as f64));
                (acc, since) = (0.0, 0);
            }
        }
        self.dir(MODEL_DIR)?;
        self.dir(LEDGER_DIR)?;
        let mut ck = Vec::new();
        params.save(&mut ck)?;
        let artifacts = vec![
            self.write(VOCODER_CHECKPOINT, &ck)?,
            self.write(&format!("{LEDGER_DIR}/train_vocoder.tsv"), ledger.as_bytes())?,
        ];
        Ok((inputs, artifacts))
    }

    fn adapt(&self) -> CliResult<StageOutput> {
        let cfg = self.cfg;
        let mut params = self.vocoder(Path::new(VOCODER_CHECKPOINT))?;
        let speaker = std::slice::from_ref(&cfg.adapt_speaker);
        let (mut inputs, train) = self.sequences(speaker, cfg.train_indices())?;
        let (val_inputs, val) = self.sequences(speaker, cfg.test_indices())?;
        inputs.insert(0, VOCODER_CHECKPOINT.to_string());
        inputs.extend(val_inputs);
        if train[0].aux.cols() != params.aux_dim {
            return Err(CliError::mismatch(self.stage, "feature order differs from the checkpoint's"));
        }
        let sampler = WindowSampler::new(train, cfg.window, cfg.windows_per_batch)?;
        let mode = cfg.adapt_mode;
        let acfg = AdaptConfig {
            mode,
            iterations: cfg.adapt_iterations.unwrap_or(mode.desk_iterations()),
            report_every: cfg.report_every,
            learning_rate: cfg.adapt_learning_rate,
            seed: cfg.seed.wrapping_add(2),
        };
        let ledger = finetune(&mut params, &sampler, &val, &acfg)?;
        self.dir(MODEL_DIR)?;
        self.dir(LEDGER_DIR)?;
        let mut ck = Vec::new();
        params.save(&mut ck)?;
        let artifacts = vec![
            self.write(&format!("{MODEL_DIR}/vocoder_{mode}.ckpt"), &ck)?,
            self.write(&format!("{LEDGER_DIR}/adapt_{mode}.tsv"), ledger.to_tsv().as_bytes())?,
        ];
        Ok((inputs, artifacts))
    }

    fn train_converter(&self) -> CliResult<StageOutput> {
        let cfg = self.cfg;
        let mut inputs = Vec::new();
        let mut pairs = Vec::new();
        for i in cfg.train_indices() {
            let (s, t) = (
                format!("{FEATURE_DIR}/{}.feat", utterance_id(&cfg.source_speaker, i)),
                format!("{FEATURE_DIR}/{}.feat", utterance_id(&cfg.target_speaker, i)),
            );
            pairs.push((self.features(&s)?, self.features(&t)?));
            inputs.push(s);
            inputs.push(t);
        }
        let refs: Vec<_> = pairs.iter().map(|(s, t)| (s, t)).collect();
        let ccfg = ConverterConfig {
            hidden_layers: cfg.converter_hidden_layers,
            hidden_units: cfg.converter_hidden_units,
            epochs: cfg.converter_epochs,
            learning_rate: cfg.converter_learning_rate,
            seed: cfg.seed.wrapping_add(3),
        };
        let (model, history) = train_converter(&refs, &ccfg)?;
        self.dir(MODEL_DIR)?;
        self.dir(LEDGER_DIR)?;
        let mut ck = Vec::new();
        model.save(&mut ck)?;
        let ledger: String = std::iter::once("epoch\tweighted_error\n".to_string())
            .chain(history.iter().enumerate().map(|(e, l)| format!("{e}\t{l:.6}\n")))
            .collect();
        let artifacts = vec![
            self.write(CONVERTER_CHECKPOINT, &ck)?,
            self.write(&format!("{LEDGER_DIR}/train_converter.tsv"), ledger.as_bytes())?,
        ];
        Ok((inputs, artifacts))
    }

    fn convert(&self) -> CliResult<StageOutput> {
        let cfg = self.cfg;
        let model = ConversionModel::load(self.read(CONVERTER_CHECKPOINT)?.as_slice())?;
        self.dir(CONVERTED_DIR)?;
        let mut inputs = vec![CONVERTER_CHECKPOINT.to_string()];
        let mut artifacts = Vec::new();
        for i in cfg.test_indices() {
            let src = format!("{FEATURE_DIR}/{}.feat", utterance_id(&cfg.source_speaker, i));
            let features = self.features(&src)?;
            if features.mcep_dim() != model.static_dim() {
                return Err(CliError::mismatch(self.stage, format!("{src} has order {}, the model {}", features.mcep_dim(), model.static_dim())));
            }
            let converted = model.convert_features(&features)?;
            let mut buf = Vec::new();
            converted.write_to(&mut buf)?;
            let name = format!("{}_to_{}_{i:03}", cfg.source_speaker, cfg.target_speaker);
            artifacts.push(self.write(&format!("{CONVERTED_DIR}/{name}.feat"), &buf)?);
            inputs.push(src);
        }
        Ok((inputs, artifacts))
    }

    /// Sorted stems of `*.ext` files in `dir` (relative to the run directory).
    fn stems(&self, dir: &Path, ext: &str) -> CliResult<Vec<String>> {
        let full = self.require(dir)?;
        let mut stems: Vec<String> = fs::read_dir(&full)
            .map_err(CliError::io(&full))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == ext))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        stems.sort();
        if stems.is_empty() {
            return Err(CliError::MissingInput {
                stage: self.stage,
                path: full.join(format!("*.{ext}")),
            });
        }
        Ok(stems)
    }

    fn generate(&self, opts: StageOptions) -> CliResult<StageOutput> {
        let cfg = self.cfg;
        let params = self.vocoder(&cfg.generate_checkpoint)?;
        let feature_dir = cfg.generate_features.clone();
        let stems = self.stems(&feature_dir, "feat")?;
        self.dir(GENERATED_DIR)?;
        let mut inputs = vec![cfg.generate_checkpoint.display().to_string()];
        let mut artifacts = Vec::new();
        for stem in stems {
            let rel = format!("{}/{stem}.feat", feature_dir.display());
            let features = self.features(&rel)?;
            if features.aux_dim() != params.aux_dim {
                return Err(CliError::mismatch(
                    self.stage,
                    format!("{rel} carries {} conditioning values, the checkpoint expects {}", features.aux_dim(), params.aux_dim),
                ));
            }
            if params.spec.is_adaptive() && features.continuous_f0.iter().any(|&f| !(f > 0.0)) {
                return Err(CliError::mismatch(self.stage, format!("{rel} lacks the F0 stream the pitch-adaptive checkpoint needs")));
            }
            let aux = qpnet_core::codec::upsample_features(&features)?;
            let plan = params.plan_for(&aux)?;
            let seed = cfg.seed ^ name_hash(&stem);
            let out = generate::<f32>(&params, &aux, &plan, seed, Sampling::from_temperature(cfg.temperature), false)?;
            let mut wav = Vec::new();
            write_wav(&out.wave, &mut wav)?;
            artifacts.push(self.write(&format!("{GENERATED_DIR}/{stem}.wav"), &wav)?);
            artifacts.push(self.write(&format!("{GENERATED_DIR}/{stem}.codes"), &out.codes.codes)?);
            if opts.dump_plan {
                artifacts.push(self.write(&format!("{GENERATED_DIR}/{stem}.plan.tsv"), plan.report(&params.spec).as_bytes())?);
            }
            inputs.push(rel);
        }
        Ok((inputs, artifacts))
    }

    fn evaluate(&self) -> CliResult<StageOutput> {
        let cfg = self.cfg;
        let stems = self.stems(Path::new(GENERATED_DIR), "wav")?;
        let mut report = RunReport::default();
        let mut inputs = Vec::new();
        for stem in stems {
            let wav = format!("{GENERATED_DIR}/{stem}.wav");
            let reference = format!("{}/{stem}.feat", cfg.generate_features.display());
            let outcome = self
                .wave(&wav)
                .and_then(|w| Ok((w, self.features(&reference)?)))
                .and_then(|(w, f)| Ok(score_utterance(&w, &f, &self.analysis())?));
            match outcome {
                Ok(score) => report.push(stem, Ok(score)),
                Err(CliError::Core(e)) => report.push(stem, Err(e)),
                Err(other) => report.rows.push(qpnet_core::metrics::ReportRow {
                    id: stem,
                    outcome: Err(other.to_string()),
                }),
            }
            inputs.push(wav);
            inputs.push(reference);
        }
        self.dir(REPORT_DIR)?;
        let artifacts = vec![self.write(EVALUATION_REPORT, report.to_tsv().as_bytes())?];
        Ok((inputs, artifacts))
    }
}
