//! Masked-LM pretraining, CTC + embedding-distillation fine-tuning, batch
//! assembly and evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encoder::{backward, forward};
use super::kernels::Scalar;
use super::{Gradients, ParamStore};
use crate::corpus::{SentencePair, Vocab, NUM_SPECIALS};
use crate::ctc::{ctc_loss, greedy_decode, log_softmax_lattice, log_sum_exp, LogProbLattice};
use crate::distill::{align_targets, build_q_matrix, ed_loss, lambda_schedule, EdConfig};
use crate::error::{Error, Result};
use crate::upsample::{upsample_tokens, UpsampleConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Upper bound on source + target tokens per batch.
    pub batch_tokens: usize,
    pub steps: u64,
    pub upsample: UpsampleConfig,
    pub ed: EdConfig,
    /// When false the distillation weight stays 0 for every step.
    pub use_ed: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub const DEFAULT_LR: f64 = 1e-4;

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.batch_tokens == 0 {
            return Err(Error::invalid("batch size in tokens must be positive"));
        }
        Ok(())
    }

    pub fn lambda(&self, step: u64) -> u8 {
        if self.use_ed {
            lambda_schedule(step, self.ed.start_step)
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NatExample {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

/// Per-frame log-probabilities from encoder logits.
pub fn lattice_from_logits<F: Scalar>(
    logits: &[F],
    frames: usize,
    vocab: usize,
) -> Result<LogProbLattice> {
    let wide: Vec<f64> = logits.iter().map(|x| x.wide()).collect();
    log_softmax_lattice(frames, vocab, &wide)
}

/// SplitMix64 finalizer, used to derive independent per-example seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, step: u64, index: usize) -> u64 {
    mix(mix(mix(seed) ^ step) ^ index as u64)
}

fn to_f64<F: Scalar>(x: &[F]) -> Vec<f64> {
    x.iter().map(|v| v.wide()).collect()
}

fn from_f64<F: Scalar>(x: &[f64]) -> Vec<F> {
    x.iter().map(|&v| F::of(v)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NatStep {
    /// Mean CTC loss over the pairs that were used.
    pub l_ctc: f64,
    /// Mean distillation loss; `None` when λ = 0.
    pub l_ed: Option<f64>,
    pub lambda: u8,
    pub used: usize,
    /// Pairs whose upsampled source was too short for a CTC alignment.
    pub skipped: usize,
    /// Longest sequence fed to the student.
    pub max_frames: usize,
}

/// Batch-mean gradient of `L_ctc + λ·L_ed` without touching the parameters.
pub fn nat_gradients<F: Scalar>(
    student: &ParamStore<F>,
    teacher: Option<&ParamStore<F>>,
    batch: &[NatExample],
    step: u64,
    cfg: &TrainConfig,
) -> Result<(Gradients<F>, NatStep)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let lambda = cfg.lambda(step);
    let teacher = match (lambda, teacher) {
        (1, None) => {
            return Err(Error::invalid(
                "distillation is active but no teacher was supplied",
            ))
        }
        (1, Some(t)) => {
            if t.config.d_model != student.config.d_model
                || t.config.vocab_size != student.config.vocab_size
            {
                return Err(Error::Shape("teacher and student configs differ".into()));
            }
            Some(t)
        }
        _ => None,
    };
    let v = student.config.vocab_size;
    let d = student.config.d_model;
    let mut total = Gradients::zeros_like(student);
    let (mut sum_ctc, mut sum_ed, mut used, mut skipped, mut max_frames) =
        (0.0, 0.0, 0usize, 0usize, 0usize);
    for (i, ex) in batch.iter().enumerate() {
        let up = upsample_tokens(&ex.source, &cfg.upsample, Vocab::MASK_ID)?;
        let frames = up.len();
        max_frames = max_frames.max(frames);
        let out = forward(student, &up.tokens, true, derive_seed(cfg.seed, step, i))?;
        let lattice = lattice_from_logits(&out.logits, frames, v)?;
        let ctc = ctc_loss(&lattice, &ex.target, Vocab::BLANK_ID)?;
        if !ctc.is_feasible() {
            skipped += 1;
            continue;
        }
        used += 1;
        sum_ctc += ctc.loss;
        let d_hidden = match teacher {
            Some(t) => {
                let t_out = forward(t, &ex.target, false, 0)?;
                let layer = cfg.ed.layer_index(t_out.hidden.len())?;
                let q = build_q_matrix(&lattice, &ex.target)?;
                let matching = align_targets(&q, ex.target.len(), frames)?;
                let ed = ed_loss(
                    &to_f64(out.last_hidden()),
                    &to_f64(&t_out.hidden[layer]),
                    d,
                    &matching,
                )?;
                sum_ed += ed.loss;
                Some(from_f64::<F>(&ed.grad))
            }
            None => None,
        };
        let g = backward(
            student,
            &out.cache,
            &from_f64::<F>(&ctc.grad),
            d_hidden.as_deref(),
        )?;
        total.add(&g);
    }
    if used > 0 {
        total.scale(F::of(1.0 / used as f64));
    }
    let mean = |s: f64| if used > 0 { s / used as f64 } else { f64::NAN };
    let stats = NatStep {
        l_ctc: mean(sum_ctc),
        l_ed: teacher.map(|_| mean(sum_ed)),
        lambda,
        used,
        skipped,
        max_frames,
    };
    Ok((total, stats))
}

/// One optimizer step of NAT fine-tuning. A batch in which every pair is
/// infeasible leaves the parameters and step counter unchanged.
pub fn nat_train_step<F: Scalar>(
    student: &mut ParamStore<F>,
    teacher: Option<&ParamStore<F>>,
    batch: &[NatExample],
    step: u64,
    cfg: &TrainConfig,
) -> Result<NatStep> {
    let (grads, stats) = nat_gradients(student, teacher, batch, step, cfg)?;
    if stats.used > 0 {
        student.adam_update(&grads, cfg.lr)?;
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskingOutcome {
    pub inputs: Vec<u32>,
    /// Positions whose original token must be predicted.
    pub positions: Vec<usize>,
}

/// Selects 15% of positions; of those 80% become the mask token, 10% a
/// random content token and 10% stay unchanged.
pub fn mask_sentence(sentence: &[u32], vocab_size: usize, rng: &mut impl Rng) -> MaskingOutcome {
    let mut inputs = sentence.to_vec();
    let mut positions = Vec::new();
    for (i, tok) in inputs.iter_mut().enumerate() {
        if rng.gen::<f64>() >= 0.15 {
            continue;
        }
        positions.push(i);
        let r: f64 = rng.gen();
        if r < 0.8 {
            *tok = Vocab::MASK_ID;
        } else if r < 0.9 && vocab_size > NUM_SPECIALS {
            *tok = rng.gen_range(NUM_SPECIALS as u32..vocab_size as u32);
        }
    }
    MaskingOutcome { inputs, positions }
}

/// Masked-LM training sequences: each pair joined as `source </s> target`,
/// so pretraining sees both languages side by side.
pub fn pretraining_sequences(pairs: &[SentencePair]) -> Vec<Vec<u32>> {
    pairs
        .iter()
        .map(|p| {
            let mut seq = Vec::with_capacity(p.source.len() + p.target.len() + 1);
            seq.extend_from_slice(&p.source);
            seq.push(Vocab::EOS_ID);
            seq.extend_from_slice(&p.target);
            seq
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub enum MlmStep {
    /// Mean cross-entropy over masked positions.
    Trained { loss: f64, masked: usize },
    /// No position was selected for masking; parameters untouched.
    NothingMasked,
}

/// The blank never occurs in text, so it is excluded from the masked-LM
/// softmax; otherwise pretraining drives its logit down and the CTC stage
/// starts from a model that cannot emit blanks.
const BLANK: usize = Vocab::BLANK_ID as usize;

/// Masked-LM gradients for a batch; `None` when nothing was masked.
pub fn mlm_gradients<F: Scalar>(
    params: &ParamStore<F>,
    batch: &[Vec<u32>],
    step: u64,
    seed: u64,
) -> Result<Option<(Gradients<F>, f64, usize)>> {
    let v = params.config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step, usize::MAX));
    let masked: Vec<MaskingOutcome> = batch
        .iter()
        .map(|s| mask_sentence(s, v, &mut rng))
        .collect();
    let n_masked: usize = masked.iter().map(|m| m.positions.len()).sum();
    if n_masked == 0 {
        return Ok(None);
    }
    let scale = 1.0 / n_masked as f64;
    let mut total = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for (i, (sentence, m)) in batch.iter().zip(&masked).enumerate() {
        if m.positions.is_empty() {
            continue;
        }
        let out = forward(params, &m.inputs, true, derive_seed(seed, step, i))?;
        let mut d_logits = vec![F::zero(); out.logits.len()];
        for &p in &m.positions {
            let row = &out.logits[p * v..(p + 1) * v];
            let candidates: Vec<f64> = row
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != BLANK)
                .map(|(_, x)| x.wide())
                .collect();
            let logz = log_sum_exp(&candidates);
            let target = sentence[p] as usize;
            loss -= row[target].wide() - logz;
            for k in (0..v).filter(|&k| k != BLANK) {
                let onehot = if k == target { 1.0 } else { 0.0 };
                d_logits[p * v + k] = F::of(((row[k].wide() - logz).exp() - onehot) * scale);
            }
        }
        total.add(&backward(params, &out.cache, &d_logits, None)?);
    }
    Ok(Some((total, loss * scale, n_masked)))
}

pub fn mlm_pretrain_step<F: Scalar>(
    params: &mut ParamStore<F>,
    batch: &[Vec<u32>],
    step: u64,
    seed: u64,
    lr: f64,
) -> Result<MlmStep> {
    match mlm_gradients(params, batch, step, seed)? {
        None => Ok(MlmStep::NothingMasked),
        Some((g, loss, masked)) => {
            params.adam_update(&g, lr)?;
            Ok(MlmStep::Trained { loss, masked })
        }
    }
}

/// Groups item indices into batches whose summed `lengths` stay within
/// `max_tokens`, packing greedily in length order. An item longer than the
/// budget gets a batch of its own.
pub fn assemble_batches(lengths: &[usize], max_tokens: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0;
    for i in order {
        if !current.is_empty() && tokens + lengths[i] > max_tokens {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        tokens += lengths[i];
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

pub fn greedy_decode_batch<F: Scalar>(
    params: &ParamStore<F>,
    sources: &[Vec<u32>],
    upsample: &UpsampleConfig,
) -> Result<Vec<Vec<u32>>> {
    sources
        .iter()
        .map(|x| {
            let up = upsample_tokens(x, upsample, Vocab::MASK_ID)?;
            let out = forward(params, &up.tokens, false, 0)?;
            let lattice = lattice_from_logits(&out.logits, up.len(), params.config.vocab_size)?;
            Ok(greedy_decode(&lattice, Vocab::BLANK_ID))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean CTC loss over feasible pairs.
    pub ctc_loss: f64,
    /// Mean distillation loss, when a teacher was supplied.
    pub ed_loss: Option<f64>,
    pub sequence_accuracy: f64,
    pub infeasible: usize,
    pub hypotheses: Vec<Vec<u32>>,
}

/// Eval-mode losses and greedy decodes on held-out pairs.
pub fn evaluate<F: Scalar>(
    params: &ParamStore<F>,
    teacher: Option<(&ParamStore<F>, &EdConfig)>,
    examples: &[NatExample],
    upsample: &UpsampleConfig,
) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let v = params.config.vocab_size;
    let d = params.config.d_model;
    let (mut ctc_sum, mut ed_sum, mut feasible, mut correct) = (0.0, 0.0, 0usize, 0usize);
    let mut hypotheses = Vec::with_capacity(examples.len());
    for ex in examples {
        let up = upsample_tokens(&ex.source, upsample, Vocab::MASK_ID)?;
        let out = forward(params, &up.tokens, false, 0)?;
        let lattice = lattice_from_logits(&out.logits, up.len(), v)?;
        let hyp = greedy_decode(&lattice, Vocab::BLANK_ID);
        correct += usize::from(hyp == ex.target);
        hypotheses.push(hyp);
        let ctc = ctc_loss(&lattice, &ex.target, Vocab::BLANK_ID)?;
        if !ctc.is_feasible() {
            continue;
        }
        feasible += 1;
        ctc_sum += ctc.loss;
        if let Some((t, ed_cfg)) = teacher {
            let t_out = forward(t, &ex.target, false, 0)?;
            let layer = ed_cfg.layer_index(t_out.hidden.len())?;
            let q = build_q_matrix(&lattice, &ex.target)?;
            let matching = align_targets(&q, ex.target.len(), up.len())?;
            ed_sum += ed_loss(
                &to_f64(out.last_hidden()),
                &to_f64(&t_out.hidden[layer]),
                d,
                &matching,
            )?
            .loss;
        }
    }
    let mean = |s: f64| {
        if feasible > 0 {
            s / feasible as f64
        } else {
            f64::INFINITY
        }
    };
    Ok(Evaluation {
        ctc_loss: mean(ctc_sum),
        ed_loss: teacher.map(|_| mean(ed_sum)),
        sequence_accuracy: correct as f64 / examples.len() as f64,
        infeasible: examples.len() - feasible,
        hypotheses,
    })
}
