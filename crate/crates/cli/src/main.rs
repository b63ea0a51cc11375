//! `semitts` command line: corpus generation, VAE and LM training, synthesis,
//! evaluation, ablation sweeps and hidden-state export.
//!
//! Every failure ends with one JSON object on stderr,
//! `{"error": <kind>, "message": <text>}`, and a nonzero exit code.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use semitts::corpus::LatentPattern;
use semitts::parallel::Exec;

pub const HOME_ENV: &str = "SEMITTS_HOME";

#[derive(Parser, Debug)]
#[command(
    name = "semitts",
    version,
    about = "Hierarchical semi-discrete TTS on continuous latents"
)]
pub struct Cli {
    /// Root for default checkpoint and output directories.
    #[arg(long, global = true, env = HOME_ENV, default_value = "runs")]
    pub home: PathBuf,

    /// Run data-parallel work on the calling thread only.
    #[arg(long, global = true)]
    pub sequential: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic text/latent corpus (and optionally test waveforms).
    GenCorpus(GenCorpusArgs),
    /// Train the LM stack on a latent manifest.
    Train(TrainArgs),
    /// Train the audio VAE on a WAV manifest.
    TrainVae(TrainVaeArgs),
    /// Mean-encode a WAV manifest into latent cache files.
    EncodeLatents(EncodeLatentsArgs),
    /// Encode and decode one WAV file through the VAE.
    VaeRoundtrip(VaeRoundtripArgs),
    /// Generate speech for a text.
    Synth(SynthArgs),
    /// Teacher-forced and free-running metrics on a latent manifest.
    Eval(EvalArgs),
    /// Train and evaluate a list of ablation variants.
    Ablate(AblateArgs),
    /// Export per-slot skeleton and residual hiddens.
    DumpHiddens(DumpArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PatternArg {
    SinusoidBank,
    RandomAnchorWalk,
}

impl From<PatternArg> for LatentPattern {
    fn from(p: PatternArg) -> Self {
        match p {
            PatternArg::SinusoidBank => LatentPattern::SinusoidBank,
            PatternArg::RandomAnchorWalk => LatentPattern::RandomAnchorWalk,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub num: usize,
    #[arg(long, default_value_t = 4)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    #[arg(long, default_value_t = 7)]
    pub mapping_seed: u64,
    #[arg(long, default_value_t = 7)]
    pub text_seed: u64,
    #[arg(long, value_enum, default_value = "sinusoid-bank")]
    pub pattern: PatternArg,
    #[arg(long, default_value_t = 16)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub frames_per_token: usize,
    /// Also write this many long held-out utterances under OUT/heldout.
    #[arg(long, default_value_t = 0)]
    pub heldout: usize,
    /// Also write this many synthetic WAV clips under OUT/wavs.
    #[arg(long, default_value_t = 0)]
    pub waveforms: usize,
    #[arg(long, default_value_t = 1.0)]
    pub waveform_seconds: f64,
    #[arg(long, default_value_t = 0)]
    pub waveform_seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Config file; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory; `HOME/lm` by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `ablation_variant`.
    #[arg(long)]
    pub variant: Option<String>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from this checkpoint; its config must match.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps.
    #[arg(long)]
    pub until: Option<u64>,
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
}

#[derive(Args, Debug)]
pub struct TrainVaeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest whose rows carry `wav_path`.
    #[arg(long)]
    pub wavs: PathBuf,
    /// Output directory; `HOME/vae` by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `vae_steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
}

#[derive(Args, Debug)]
pub struct EncodeLatentsArgs {
    /// VAE checkpoint; `HOME/vae` by default.
    #[arg(long)]
    pub vae: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct VaeRoundtripArgs {
    #[arg(long)]
    pub vae: Option<PathBuf>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stream in chunks of this many frames instead of one pass.
    #[arg(long)]
    pub chunk_frames: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// LM checkpoint; `HOME/lm` by default.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// VAE checkpoint; `HOME/vae` by default.
    #[arg(long)]
    pub vae: Option<PathBuf>,
    #[arg(long)]
    pub text: String,
    #[arg(long, requires = "prompt_text")]
    pub prompt_audio: Option<PathBuf>,
    #[arg(long, requires = "prompt_audio")]
    pub prompt_text: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub cfg: f32,
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub max_patches: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Write `eval.json` and `eval.txt` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub cfg: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Noise draws per patch for the teacher-forced loss.
    #[arg(long, default_value_t = 16)]
    pub draws: usize,
    /// Skip free-running generation.
    #[arg(long)]
    pub no_generate: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Long held-out utterances for generation MSE.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// Comma-separated, e.g. `none,d4,d16,d32,no_fsq,no_ralm`.
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<String>,
    /// Output directory; `HOME/ablate` by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn error_record(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_record("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if cli.sequential {
        Exec::set_default(Exec::Sequential);
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
