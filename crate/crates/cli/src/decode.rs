use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};

use natctc::beam::{ctc_beam_search, BeamConfig};
use natctc::corpus::Vocab;
use natctc::ctc::greedy_decode;
use natctc::metrics::{corpus_bleu, sequence_accuracy};
use natctc::model::{forward, lattice_from_logits};
use natctc::ngram::NgramModel;
use natctc::upsample::upsample_tokens;

use crate::card::{load_model, LoadedModel};
use crate::{BeamArgs, DecodeMode, Usage};

#[derive(Args)]
pub struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Source sentences, one per line.
    #[arg(long)]
    input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DecodeMode::Greedy)]
    mode: DecodeMode,
    #[command(flatten)]
    beam: BeamArgs,
}

fn read_lm(path: Option<&Path>, vocab: &Vocab) -> Result<Option<NgramModel>> {
    path.map(|p| NgramModel::read_arpa(p, vocab).map_err(Into::into))
        .transpose()
}

fn beam_config<'a>(b: &BeamArgs, lm: Option<&'a NgramModel>) -> Result<BeamConfig<'a>> {
    if b.alpha > 0.0 && lm.is_none() {
        return Err(Usage(format!("--alpha {} needs a language model (--lm)", b.alpha)).into());
    }
    BeamConfig::new(b.alpha, b.beta, b.beam_size, lm).map_err(|e| Usage(e.to_string()).into())
}

/// Decodes one tokenized source sentence.
pub fn translate(
    model: &LoadedModel,
    source: &[u32],
    mode: DecodeMode,
    beam: &BeamConfig<'_>,
) -> Result<Vec<u32>> {
    if source.is_empty() {
        return Ok(Vec::new());
    }
    let up = upsample_tokens(source, &model.upsample, Vocab::MASK_ID)?;
    let out = forward(&model.params, &up.tokens, false, 0)?;
    let lattice = lattice_from_logits(&out.logits, up.len(), model.params.config.vocab_size)?;
    Ok(match mode {
        DecodeMode::Greedy => greedy_decode(&lattice, Vocab::BLANK_ID),
        DecodeMode::Beam => ctc_beam_search(&lattice, beam, Vocab::BLANK_ID)
            .into_iter()
            .next()
            .map(|s| s.tokens)
            .unwrap_or_default(),
    })
}

fn read_sources(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(|l| vocab.encode(l)).collect())
}

pub fn decode(a: DecodeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let lm = read_lm(a.beam.lm.as_deref(), &model.vocab)?;
    let cfg = match a.mode {
        DecodeMode::Beam => beam_config(&a.beam, lm.as_ref())?,
        DecodeMode::Greedy => BeamConfig::default(),
    };
    let sources = read_sources(&a.input, &model.vocab)?;
    let mut out = String::new();
    for src in &sources {
        let hyp = translate(&model, src, a.mode, &cfg)?;
        out.push_str(&model.vocab.decode(&hyp)?);
        out.push('\n');
    }
    match &a.output {
        Some(p) => fs::write(p, out).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(out.as_bytes())?,
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
}

fn read_tokenized(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let hyps = read_tokenized(&a.hyp)?;
    let refs = read_tokenized(&a.reference)?;
    if hyps.len() != refs.len() {
        return Err(natctc::Error::Data {
            path: a.hyp.clone(),
            line: hyps.len().min(refs.len()) + 1,
            msg: format!("{} hypotheses for {} references", hyps.len(), refs.len()),
        }
        .into());
    }
    let report = corpus_bleu(&hyps, &refs, 4)?;
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|p| format!("{p:.6}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("bleu {:.4}", report.bleu);
    println!("precisions {}", fmt(&report.precisions));
    println!("brevity_penalty {:.6}", report.brevity_penalty);
    println!("hyp_len {}", report.hyp_len);
    println!("ref_len {}", report.ref_len);
    println!("sequence_accuracy {:.6}", sequence_accuracy(&hyps, &refs)?);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    Greedy,
    Beam,
    Both,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = BenchMode::Both)]
    mode: BenchMode,
    /// Timed runs per sentence.
    #[arg(long, default_value_t = 10)]
    repeat: usize,
    /// LM weight; 0 unless an LM is given.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = natctc::beam::DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = natctc::beam::DEFAULT_BEAM_SIZE)]
    beam_size: usize,
    #[arg(long)]
    lm: Option<PathBuf>,
}

struct Timing {
    mean_us: f64,
    median_us: f64,
}

fn time_mode(
    model: &LoadedModel,
    sources: &[Vec<u32>],
    mode: DecodeMode,
    cfg: &BeamConfig<'_>,
    repeat: usize,
) -> Result<Timing> {
    let mut samples = Vec::with_capacity(sources.len());
    for src in sources {
        let start = Instant::now();
        for _ in 0..repeat {
            std::hint::black_box(translate(model, src, mode, cfg)?);
        }
        samples.push(start.elapsed().as_secs_f64() * 1e6 / repeat as f64);
    }
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median_us = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    Ok(Timing {
        mean_us: samples.iter().sum::<f64>() / n as f64,
        median_us,
    })
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let sources: Vec<Vec<u32>> = read_sources(&a.input, &model.vocab)?
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect();
    if sources.is_empty() {
        return Err(Usage(format!("{} has no sentences", a.input.display())).into());
    }
    let repeat = a.repeat.max(1);
    let lm = read_lm(a.lm.as_deref(), &model.vocab)?;
    let alpha = a.alpha.unwrap_or(if lm.is_some() {
        natctc::beam::DEFAULT_ALPHA
    } else {
        0.0
    });
    let args = BeamArgs {
        alpha,
        beta: a.beta,
        beam_size: a.beam_size,
        lm: a.lm.clone(),
    };
    let cfg = beam_config(&args, lm.as_ref())?;
    let modes: &[DecodeMode] = match a.mode {
        BenchMode::Greedy => &[DecodeMode::Greedy],
        BenchMode::Beam => &[DecodeMode::Beam],
        BenchMode::Both => &[DecodeMode::Greedy, DecodeMode::Beam],
    };
    let mut medians = Vec::new();
    for &mode in modes {
        let t = time_mode(&model, &sources, mode, &cfg, repeat)?;
        let name = if mode == DecodeMode::Greedy {
            "greedy"
        } else {
            "beam"
        };
        println!(
            "mode={name} sentences={} repeat={repeat} mean_us={:.3} median_us={:.3}",
            sources.len(),
            t.mean_us,
            t.median_us
        );
        medians.push(t.median_us);
    }
    if let [greedy, beam] = medians[..] {
        println!("ratio beam_over_greedy={:.4}", beam / greedy);
    }
    Ok(())
}
