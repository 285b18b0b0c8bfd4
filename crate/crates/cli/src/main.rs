use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qpnet_cli::{run_all, run_stage, RunConfig, Stage, StageOptions};

#[derive(Parser)]
#[command(name = "qpnet", version, about = "QPNet vocoder and voice-conversion pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus (WAV + F0 sidecars).
    SynthCorpus(Common),
    /// Analyse every corpus WAV into a feature file.
    Extract(Common),
    /// Train the speaker-independent vocoder.
    TrainVocoder(Common),
    /// Fine-tune the vocoder on one speaker (sdo or sda).
    Adapt(Common),
    /// Train the source-to-target spectral converter.
    TrainConverter(Common),
    /// Convert the source speaker's held-out features.
    Convert(Common),
    /// Synthesize WAVs from a checkpoint and a feature directory.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Also write each utterance's dilation plan report.
        #[arg(long)]
        dump_plan: bool,
    },
    /// Score generated audio against its conditioning features.
    Evaluate(Common),
    /// Run every stage in order.
    All(Common),
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> qpnet_cli::CliResult<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(d) = &self.run_dir {
            overrides.push(format!("run_dir={}", d.display()));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, common, opts) = match &cli.command {
        Command::SynthCorpus(c) => (Some(Stage::SynthCorpus), c, StageOptions::default()),
        Command::Extract(c) => (Some(Stage::Extract), c, StageOptions::default()),
        Command::TrainVocoder(c) => (Some(Stage::TrainVocoder), c, StageOptions::default()),
        Command::Adapt(c) => (Some(Stage::Adapt), c, StageOptions::default()),
        Command::TrainConverter(c) => (Some(Stage::TrainConverter), c, StageOptions::default()),
        Command::Convert(c) => (Some(Stage::Convert), c, StageOptions::default()),
        Command::Generate { common, dump_plan } => (Some(Stage::Generate), common, StageOptions { dump_plan: *dump_plan }),
        Command::Evaluate(c) => (Some(Stage::Evaluate), c, StageOptions::default()),
        Command::All(c) => (None, c, StageOptions::default()),
    };
    let result = common.load().and_then(|cfg| match stage {
        Some(s) => run_stage(s, &cfg, opts),
        None => run_all(&cfg, opts),
    });
    match result {
        Ok(artifacts) => {
            for a in artifacts {
                println!("{a}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("qpnet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
