//! `rwtag`: annotate, apply, train, predict, evaluate and describe
//! utterance-rewriting corpora.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 scorer unreachable.

use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::info;

use rewrite_tagging::model::TrainConfig;
use rewrite_tagging::pipeline::{self, PipelineError, RlOptions, ScorerOptions, TrainOptions};
use rewrite_tagging::rl::scorer::{serve, StubScorer};
use rewrite_tagging::synth::SynthConfig;
use rewrite_tagging::{RLConfig, RewardKind, TokenizationMode, Vocab};

#[derive(Parser, Debug)]
#[command(name = "rwtag", version, about = "Dialogue utterance rewriting as span tagging")]
struct Cli {
    /// Tokenization: one token per character, or whitespace-separated words.
    #[arg(long, global = true, env = "RWTAG_MODE", default_value = "char")]
    mode: TokenizationMode,

    #[arg(long, global = true, env = "RWTAG_SEED", default_value_t = 0)]
    seed: u64,

    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compile gold tag programs; uncovered instances go to a sidecar file.
    Annotate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Execute tag programs against their corpus instances.
    Apply {
        #[arg(long)]
        tags: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a tagger and write a checkpoint.
    Train(TrainArgs),
    /// Decode tag programs and rewrites with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score predictions against corpus references.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Corpus statistics.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a synthetic corpus whose references are all reachable.
    Generate {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Serve the uniform stub language model over the scorer protocol.
    ServeStubScorer {
        /// Corpus whose utterance and context tokens form the vocabulary.
        #[arg(long)]
        vocab_from: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7071")]
        listen: String,
        #[arg(long, default_value_t = StubScorer::DEFAULT_OOV_PROB)]
        oov_prob: f64,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = "RWTAG_EPOCHS", default_value_t = 30)]
    epochs: usize,
    #[arg(long, env = "RWTAG_DIM", default_value_t = 64)]
    dim: usize,
    #[arg(long, env = "RWTAG_LAYERS", default_value_t = 2)]
    layers: usize,
    #[arg(long, env = "RWTAG_BATCH", default_value_t = 16)]
    batch: usize,
    #[arg(long, env = "RWTAG_LR", default_value_t = 1e-3)]
    lr: f64,
    /// Epochs of the reinforcement stage; 0 skips it.
    #[arg(long, env = "RWTAG_RL_EPOCHS", default_value_t = 0)]
    rl_epochs: usize,
    #[arg(long, env = "RWTAG_RL_LR", default_value_t = 1e-4)]
    rl_lr: f64,
    /// Weight of the policy-gradient term in the reinforcement stage.
    #[arg(long, env = "RWTAG_LAMBDA", default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, env = "RWTAG_REWARD", default_value = "bleu")]
    reward: RewardKind,
    /// host:port of a language-model scorer (required for --reward lm).
    #[arg(long, env = "RWTAG_LM_ENDPOINT")]
    lm_endpoint: Option<String>,
    #[arg(long, env = "RWTAG_LM_TIMEOUT_MS", default_value_t = 10_000)]
    lm_timeout_ms: u64,
    #[arg(long, env = "RWTAG_LM_RETRIES", default_value_t = 2)]
    lm_retries: u32,
}

impl TrainArgs {
    fn options(&self, mode: TokenizationMode, seed: u64) -> Result<TrainOptions, PipelineError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(PipelineError::Usage(format!("--lambda {} must lie in [0, 1]", self.lambda)));
        }
        if self.reward == RewardKind::Lm && self.rl_epochs > 0 && self.lm_endpoint.is_none() {
            return Err(PipelineError::Usage("--reward lm requires --lm-endpoint".into()));
        }
        let train = TrainConfig { epochs: self.epochs, batch: self.batch, lr: self.lr, seed, dim: self.dim, layers: self.layers };
        let rl = (self.rl_epochs > 0).then(|| RlOptions {
            config: RLConfig { lambda: self.lambda, reward_kind: self.reward, seed },
            epochs: self.rl_epochs,
            lr: self.rl_lr,
            scorer: self.lm_endpoint.clone().map(|endpoint| ScorerOptions {
                endpoint,
                timeout: Duration::from_millis(self.lm_timeout_ms),
                retries: self.lm_retries,
            }),
        });
        Ok(TrainOptions { mode, train, rl })
    }
}

fn exit_code(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Usage(_) => 1,
        PipelineError::Scorer(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mode = cli.mode;
    match cli.command {
        Command::Annotate { input, output } => {
            let s = pipeline::annotate(&input, &output, mode)?;
            println!("covered\t{}\nuncovered\t{}\npct_uncovered\t{:.2}", s.covered, s.uncovered, s.pct_uncovered);
        }
        Command::Apply { tags, input, output } => {
            let n = pipeline::apply(&tags, &input, &output, mode)?;
            info!("wrote {n} rewrites to {}", output.display());
        }
        Command::Train(args) => {
            let opts = args.options(mode, cli.seed)?;
            let summary = pipeline::train_cmd(&args.input, &args.checkpoint, &opts)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Command::Predict { checkpoint, input, output } => {
            let n = pipeline::predict(&checkpoint, &input, &output)?;
            info!("wrote {n} predictions to {}", output.display());
        }
        Command::Eval { predictions, input, json } => {
            let report = pipeline::eval(&predictions, &input, mode)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            } else {
                println!("{}", pipeline::format_eval(&report));
            }
        }
        Command::Stats { input, json } => {
            let s = pipeline::stats(&input, mode)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&s).expect("stats serialize"));
            } else {
                println!("{}", pipeline::format_stats(&s));
            }
        }
        Command::Generate { output, count } => {
            pipeline::generate(&output, count, cli.seed, &SynthConfig::default())?;
        }
        Command::ServeStubScorer { vocab_from, listen, oov_prob } => {
            if !(oov_prob > 0.0 && oov_prob < 1.0) {
                return Err(PipelineError::Usage(format!("--oov-prob {oov_prob} must lie in (0, 1)")));
            }
            let corpus = pipeline::read_corpus(&vocab_from, mode)?;
            let vocab = Vocab::build(corpus.iter().map(|e| &e.instance));
            let scorer = StubScorer::new(vocab.tokens()[3..].iter().cloned(), mode).with_oov_prob(oov_prob);
            let io = |source| PipelineError::Io { path: PathBuf::from(&listen), source };
            let listener = TcpListener::bind(&listen).map_err(io)?;
            println!("listening on {}", listener.local_addr().map_err(io)?);
            serve(listener, Arc::new(scorer)).map_err(io)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rwtag: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
