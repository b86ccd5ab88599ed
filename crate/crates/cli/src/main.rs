use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod card;
mod config;
mod decode;
mod tools;
mod train;

/// Bad invocation or configuration; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(
    name = "natctc",
    version,
    about = "Non-autoregressive CTC translation on toy corpora"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus.
    GenData(tools::GenDataArgs),
    /// Masked-LM pretraining of the encoder.
    Pretrain(train::PretrainArgs),
    /// CTC (+ embedding distillation) training.
    Train(Box<train::TrainArgs>),
    /// Translate source lines with a trained model.
    Decode(decode::DecodeArgs),
    /// Score hypotheses against references.
    Eval(decode::EvalArgs),
    /// Train an n-gram LM and write it as ARPA.
    LmTrain(tools::LmTrainArgs),
    /// Drop vocabulary entries unused by a corpus.
    PruneVocab(tools::PruneArgs),
    /// Per-sentence decoding latency.
    Bench(decode::BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Args, Clone, Debug)]
pub struct BeamArgs {
    /// LM weight.
    #[arg(long, default_value_t = natctc::beam::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Per-token length bonus.
    #[arg(long, default_value_t = natctc::beam::DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = natctc::beam::DEFAULT_BEAM_SIZE)]
    pub beam_size: usize,
    /// ARPA language model for shallow fusion.
    #[arg(long)]
    pub lm: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use natctc::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::InvalidArgument(_) | E::Budget(_) => 2,
                E::NonFinite(_) | E::ZeroNorm(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => tools::gen_data(a),
        Command::Pretrain(a) => train::pretrain(a),
        Command::Train(a) => train::train(*a),
        Command::Decode(a) => decode::decode(a),
        Command::Eval(a) => decode::eval(a),
        Command::LmTrain(a) => tools::lm_train(a),
        Command::PruneVocab(a) => tools::prune(a),
        Command::Bench(a) => decode::bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
