use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use natctc::corpus::{gen_synthetic, load_lines, load_parallel, prune_vocab, Task, Vocab};
use natctc::ngram::train_ngram;

use crate::card::{load_model, save_model};
use crate::Usage;

#[derive(Args)]
pub struct GenDataArgs {
    /// copy, reverse or toy_grammar.
    #[arg(long)]
    task: Task,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    len_min: usize,
    #[arg(long, default_value_t = 10)]
    len_max: usize,
    /// Vocabulary size including the six special tokens.
    #[arg(long, default_value_t = 26)]
    vocab: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Extra held-out pairs from the same generator, written to
    /// `<out-dir>/valid/`.
    #[arg(long, default_value_t = 0)]
    valid: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.len_min > a.len_max {
        return Err(Usage(format!(
            "--len-min {} exceeds --len-max {}",
            a.len_min, a.len_max
        ))
        .into());
    }
    let (vocab, corpus) = gen_synthetic(
        a.task,
        a.n + a.valid,
        (a.len_min, a.len_max),
        a.vocab,
        a.seed,
    )?;
    let (train, valid) = corpus.split_tail(a.valid);
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    train.write(&vocab, a.out_dir.join("src.txt"), a.out_dir.join("tgt.txt"))?;
    vocab.write(a.out_dir.join("vocab.txt"))?;
    println!("pairs {}", train.len());
    if a.valid > 0 {
        let dir = a.out_dir.join("valid");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        valid.write(&vocab, dir.join("src.txt"), dir.join("tgt.txt"))?;
        println!("valid_pairs {}", valid.len());
    }
    Ok(())
}

#[derive(Args)]
pub struct LmTrainArgs {
    /// Target-side training text, one sentence per line.
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 4)]
    order: usize,
    #[arg(long, default_value_t = 0.75)]
    discount: f64,
    #[arg(long)]
    out_arpa: PathBuf,
}

pub fn lm_train(a: LmTrainArgs) -> Result<()> {
    let vocab = Vocab::read(&a.vocab)?;
    let lines = load_lines(&a.tgt, &vocab)?;
    let lm = train_ngram(&lines, &vocab, a.order, a.discount)?;
    lm.write_arpa(&a.out_arpa)?;
    let counts: Vec<String> = lm.counts().iter().map(usize::to_string).collect();
    println!("order {} ngrams {}", lm.order(), counts.join(" "));
    Ok(())
}

#[derive(Args)]
pub struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory holding src.txt and tgt.txt.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for the pruned model.
    #[arg(long)]
    out: PathBuf,
}

pub fn prune(a: PruneArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let corpus = load_parallel(
        a.corpus.join("src.txt"),
        a.corpus.join("tgt.txt"),
        &model.vocab,
    )?;
    let (vocab, remap) = prune_vocab(&model.vocab, &corpus);
    let params = model.params.remap_vocab(&remap, vocab.len())?;
    save_model(&a.out, &params, &vocab, &model.card.upsample)?;
    let (before, after) = (model.params.num_params(), params.num_params());
    println!("vocab_old {}", model.vocab.len());
    println!("vocab_new {}", vocab.len());
    println!("params_old {before}");
    println!("params_new {after}");
    println!("params_delta {}", after as i64 - before as i64);
    Ok(())
}
