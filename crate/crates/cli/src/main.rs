//! `textguard`: protect documents before publishing, train the tokenizer and
//! proxy scorer they need, run evaluation experiments and strip protection.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 I/O failure,
//! 4 planning or rendering failure.

mod commands;
mod failure;
mod protect;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use textguard::harness::{CorpusSource, ExperimentConfig, SynthSpec};
use textguard::perturb::{InvisibleMode, Strategy};

use failure::Outcome;
use settings::{load_file, FormatChoice, ProtectSettings};

#[derive(Parser)]
#[command(name = "textguard", version, about = "Invisible perturbations against memorization of published text")]
struct Cli {
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Protect text or HTML files.
    Protect(ProtectArgs),
    /// Train a subword vocabulary.
    TrainTokenizer {
        /// JSONL corpora or plain-text files.
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        merges: usize,
        /// Do not add printable ASCII and line breaks to the base alphabet.
        #[arg(long)]
        corpus_alphabet_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train an n-gram scorer.
    TrainScorer {
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = textguard::scorer::DEFAULT_ORDER)]
        order: usize,
        #[arg(long, default_value_t = textguard::scorer::DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a protection experiment and write report.json.
    Evaluate(EvaluateArgs),
    /// Remove invisible characters and hidden elements.
    Strip {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatChoice::Auto)]
        format: FormatChoice,
    },
    /// Write a synthetic JSONL corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        docs: Option<usize>,
        #[arg(long)]
        users: Option<usize>,
    },
}

#[derive(Args)]
struct ProtectArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// TOML or JSON settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Fraction of tokens to perturb; 0 copies inputs unchanged.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    mode: Option<InvisibleMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, conflicts_with = "remote_endpoint")]
    proxy_model: Option<PathBuf>,
    #[arg(long)]
    remote_endpoint: Option<String>,
    #[arg(long, value_enum)]
    format: Option<FormatChoice>,
    #[arg(long)]
    min_tokens: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

impl ProtectArgs {
    fn settings(&self) -> Outcome<ProtectSettings> {
        let mut s: ProtectSettings = match &self.config {
            Some(p) => load_file(p)?,
            None => ProtectSettings::default(),
        };
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    s.$field = v.clone();
                }
            )*};
        }
        apply!(strategy, budget, mode, seed, format, min_tokens);
        if self.vocab.is_some() {
            s.vocab = self.vocab.clone();
        }
        if self.proxy_model.is_some() {
            s.proxy_model = self.proxy_model.clone();
            s.remote_endpoint = None;
        }
        if self.remote_endpoint.is_some() {
            s.remote_endpoint = self.remote_endpoint.clone();
            s.proxy_model = None;
        }
        Ok(s)
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// TOML or JSON experiment config; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use a JSONL corpus instead of the configured source.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    mode: Option<InvisibleMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Warm the target on D_aux first.
    #[arg(long)]
    backdoor: bool,
    /// Evaluation points of continual training (>= 2 enables the study).
    #[arg(long)]
    continual_stages: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

impl EvaluateArgs {
    fn config(&self) -> Outcome<ExperimentConfig> {
        let mut c: ExperimentConfig = match &self.config {
            Some(p) => load_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.corpus {
            c.corpus = CorpusSource::Jsonl { path: p.clone() };
        }
        if let Some(s) = self.strategy {
            c.guard.strategy = s;
        }
        if let Some(b) = self.budget {
            c.guard.budget = b;
        }
        if let Some(m) = self.mode {
            c.guard.invisible_mode = m;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.backdoor |= self.backdoor;
        if let Some(n) = self.continual_stages {
            c.continual.stages = n;
        }
        Ok(c)
    }
}

fn run(cli: Cli) -> Outcome<()> {
    let exec = commands::execution(cli.jobs)?;
    match cli.command {
        Command::Protect(args) => {
            let settings = args.settings()?;
            protect::run(&args.inputs, &settings, &args.out, exec)
        }
        Command::TrainTokenizer { corpus, merges, corpus_alphabet_only, out } => {
            commands::train_tokenizer(&corpus, merges, !corpus_alphabet_only, &out)
        }
        Command::TrainScorer { corpus, vocab, order, alpha, out } => {
            commands::train_scorer(&corpus, &vocab, order, alpha, &out)
        }
        Command::Evaluate(args) => {
            let mut config = args.config()?;
            config.execution = exec;
            config.guard.execution = exec;
            commands::evaluate(&config, &args.out).map(drop)
        }
        Command::Strip { input, out, format } => commands::strip(&input, &out, format),
        Command::Synth { out, seed, docs, users } => {
            let d = SynthSpec::default();
            let spec = SynthSpec {
                seed: seed.unwrap_or(d.seed),
                n_docs: docs.unwrap_or(d.n_docs),
                users: users.unwrap_or(d.users),
                ..d
            };
            commands::synth(&spec, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
