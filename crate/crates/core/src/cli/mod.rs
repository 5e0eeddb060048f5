//! The `percevox` command line.

mod commands;
mod outputs;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::{env_var_name, RunConfig, KEYS};
use crate::error::{Error, Result};

pub use outputs::Outputs;

#[derive(Parser, Debug)]
#[command(name = "percevox", version, about = "Voice conversion with perception-informed losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArg {
    /// Run configuration file (`section.key = value` lines); defaults when absent
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the vowel corpus (formant regressor) and the speaker corpus (VQ-VAE)
    SynthCorpus {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Items in the vowel corpus (overrides data.formant_items)
        #[arg(long)]
        n: Option<usize>,
        /// Synthesis seed (overrides data.seed)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the formant regressor on a synthesized vowel corpus
    TrainFormant {
        #[command(flatten)]
        config: ConfigArg,
        /// Corpus directory from synth-corpus, or its formant_corpus.pvcx
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the quality proxy on synthetically degraded speech
    PretrainQuality {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the VQ-VAE with every configured loss term
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory holding manifest.tsv, or a manifest file
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained formant regressor; the formant term is skipped without it
        #[arg(long)]
        formant: Option<PathBuf>,
        /// Pretrained quality proxy; the quality term is skipped without it
        #[arg(long)]
        quality: Option<PathBuf>,
        /// Resume from a training checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Convert one utterance to a target speaker and vocode it
    Convert {
        #[command(flatten)]
        config: ConfigArg,
        /// Trained model (model.pvcx from train)
        #[arg(long)]
        model: PathBuf,
        /// Input WAV
        #[arg(long = "in", value_name = "WAV")]
        input: PathBuf,
        /// Target speaker id
        #[arg(long)]
        target: String,
        /// Output WAV
        #[arg(long, value_name = "WAV")]
        out: PathBuf,
    },
    /// Score conversions for intelligibility and anonymization
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Conversion manifest
        #[arg(long)]
        manifest: PathBuf,
        /// Model used to produce conversions missing on disk
        #[arg(long)]
        model: Option<PathBuf>,
        /// Enrollment manifest; defaults to the conversions' source utterances
        #[arg(long)]
        enrollment: Option<PathBuf>,
        /// Report directory
        #[arg(long, alias = "report")]
        out: PathBuf,
        /// Worker threads (overrides eval.jobs; 0 uses every core)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train one model per loss-term variant and tabulate the metrics
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Trained formant regressor; trained from the config when absent
        #[arg(long)]
        formant: Option<PathBuf>,
        /// Pretrained quality proxy; pretrained from the config when absent
        #[arg(long)]
        quality: Option<PathBuf>,
    },
    /// Finite-difference check of every operation and loss
    GradCheck {
        /// Optional directory for grad_check.json
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Help epilogue listing every configuration key and its default.
pub fn config_help() -> String {
    let defaults = RunConfig::default().entries();
    let mut s = String::from("Configuration keys (file `section.key = value`, or environment PERCEVOX_<SECTION>_<KEY>):\n");
    for ((key, doc), (_, value)) in KEYS.iter().zip(defaults) {
        s.push_str(&format!("  {key} = {value}\n      {doc} [{}]\n", env_var_name(key)));
    }
    s.push_str("\nExit status: 0 success, 2 config error, 3 data error, 4 numeric failure, 5 adapter failure.\n");
    s
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    RunConfig::load(arg.config.as_deref())
}

fn dispatch(cmd: Command) -> Result<()> {
    use commands as c;
    match cmd {
        Command::SynthCorpus { config, out, n, seed } => c::synth_corpus(load_config(&config)?, &out, n, seed),
        Command::TrainFormant { config, corpus, out } => c::train_formant(load_config(&config)?, &corpus, &out),
        Command::PretrainQuality { config, out } => c::pretrain_quality(load_config(&config)?, &out),
        Command::Train { config, data, out, formant, quality, resume } => c::train(
            load_config(&config)?,
            &data,
            &out,
            formant.as_deref(),
            quality.as_deref(),
            resume.as_deref(),
        ),
        Command::Convert { config, model, input, target, out } => {
            c::convert(config.config.is_some().then(|| load_config(&config)).transpose()?, &model, &input, &target, &out)
        }
        Command::Eval { config, manifest, model, enrollment, out, jobs } => c::eval(
            load_config(&config)?,
            &manifest,
            model.as_deref(),
            enrollment.as_deref(),
            &out,
            jobs,
        ),
        Command::Ablate { config, out, formant, quality } => {
            c::ablate(load_config(&config)?, &out, formant.as_deref(), quality.as_deref())
        }
        Command::GradCheck { out } => c::grad_check(out.as_deref()),
    }
}

/// One-line JSON error for stderr.
pub fn error_line(e: &Error) -> String {
    serde_json::json!({
        "status": "error",
        "kind": e.kind(),
        "exit_code": e.exit_code(),
        "message": e.to_string(),
    })
    .to_string()
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cmd = Cli::command().after_help(config_help());
    let matches = match cmd.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            // clap spreads the message over several lines; keep the substance on one.
            let msg = e.to_string();
            let text: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .filter(|l| !l.is_empty())
                .collect();
            let text = text.join(" ");
            eprintln!("{}", error_line(&Error::Config(text.trim_start_matches("error: ").to_string())));
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}", error_line(&Error::Config(e.to_string())));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

pub fn main() -> ExitCode {
    run(std::env::args_os())
}
