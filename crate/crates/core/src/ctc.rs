//! Connectionist temporal classification: loss, gradient, collapse and
//! best-path decoding. All accumulation is in natural-log space.

use crate::error::{Error, Result};

/// `log(exp(a) + exp(b))`, with `-inf` absorbing.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-normalized `T × V` matrix of log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbLattice {
    frames: usize,
    vocab: usize,
    values: Vec<f64>,
}

impl LogProbLattice {
    /// Wraps already-normalized log-probabilities, checking each row.
    pub fn new(frames: usize, vocab: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || vocab == 0 {
            return Err(Error::Shape(format!(
                "lattice must be non-empty, got {frames}x{vocab}"
            )));
        }
        if values.len() != frames * vocab {
            return Err(Error::Shape(format!(
                "{} values for a {frames}x{vocab} lattice",
                values.len()
            )));
        }
        for (t, row) in values.chunks(vocab).enumerate() {
            if row.iter().any(|v| v.is_nan() || *v > 1e-9) {
                return Err(Error::invalid(format!(
                    "row {t} has entries that are not log-probabilities"
                )));
            }
            let z = log_sum_exp(row);
            if z.abs() > 1e-6 {
                return Err(Error::invalid(format!("row {t} log-sum-exps to {z}")));
            }
        }
        Ok(LogProbLattice {
            frames,
            vocab,
            values,
        })
    }

    /// Builds a lattice from probabilities (rows must sum to one).
    pub fn from_probs(frames: usize, vocab: usize, probs: &[f64]) -> Result<Self> {
        Self::new(frames, vocab, probs.iter().map(|p| p.ln()).collect())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn get(&self, t: usize, k: u32) -> f64 {
        self.values[t * self.vocab + k as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Numerically stable log-softmax of each row of `logits` (`T × V`,
/// row-major).
pub fn log_softmax_lattice(frames: usize, vocab: usize, logits: &[f64]) -> Result<LogProbLattice> {
    if frames == 0 || vocab == 0 || logits.len() != frames * vocab {
        return Err(Error::Shape(format!(
            "{} logits for a {frames}x{vocab} lattice",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut values = Vec::with_capacity(logits.len());
    for row in logits.chunks(vocab) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        values.extend(row.iter().map(|x| x - max - z));
    }
    Ok(LogProbLattice {
        frames,
        vocab,
        values,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtcStatus {
    Ok,
    /// The lattice has fewer frames than the shortest alignment of the target.
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct CtcLoss {
    pub status: CtcStatus,
    /// Negative log-likelihood; `+inf` when infeasible.
    pub loss: f64,
    /// Gradient of `loss` with respect to the pre-softmax logits, `T × V`.
    pub grad: Vec<f64>,
}

impl CtcLoss {
    pub fn is_feasible(&self) -> bool {
        self.status == CtcStatus::Ok
    }
}

/// Frames needed by the shortest alignment: one per label plus a blank
/// between each pair of equal neighbours.
pub fn min_frames(y: &[u32]) -> usize {
    y.len() + y.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(y: &[u32], blank_id: u32, vocab: usize) -> Result<()> {
    if y.is_empty() {
        return Err(Error::invalid("empty CTC target"));
    }
    for &k in y {
        if k == blank_id {
            return Err(Error::invalid("CTC target contains the blank label"));
        }
        if k as usize >= vocab {
            return Err(Error::TokenOutOfRange { id: k, size: vocab });
        }
    }
    Ok(())
}

/// Negative log of the total probability of every alignment of `y`, and its
/// gradient with respect to the logits that produced `lattice`.
pub fn ctc_loss(lattice: &LogProbLattice, y: &[u32], blank_id: u32) -> Result<CtcLoss> {
    let (frames, vocab) = (lattice.frames, lattice.vocab);
    check_target(y, blank_id, vocab)?;
    if blank_id as usize >= vocab {
        return Err(Error::TokenOutOfRange {
            id: blank_id,
            size: vocab,
        });
    }
    if min_frames(y) > frames {
        return Ok(CtcLoss {
            status: CtcStatus::Infeasible,
            loss: f64::INFINITY,
            grad: vec![0.0; frames * vocab],
        });
    }

    // extended labels: blank, y0, blank, y1, ..., blank
    let s_len = 2 * y.len() + 1;
    let label = |s: usize| if s % 2 == 0 { blank_id } else { y[s / 2] };
    let can_skip = |s: usize| s % 2 == 1 && s >= 3 && y[s / 2] != y[s / 2 - 1];
    let ninf = f64::NEG_INFINITY;

    // alpha[t][s]: prefix mass ending in s at t, emission at t included
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lattice.get(0, blank_id);
    alpha[1] = lattice.get(0, y[0]);
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add_exp(a, prev[s - 1]);
            }
            if can_skip(s) {
                a = log_add_exp(a, prev[s - 2]);
            }
            cur[s] = if a == ninf {
                ninf
            } else {
                a + lattice.get(t, label(s))
            };
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let log_p = log_add_exp(last[s_len - 1], last[s_len - 2]);

    // beta[t][s]: suffix mass after t given s at t, emission at t excluded
    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = 0.0;
    beta[(frames - 1) * s_len + s_len - 2] = 0.0;
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        let emit = |s: usize| next[s] + lattice.get(t + 1, label(s));
        for s in 0..s_len {
            let mut b = emit(s);
            if s + 1 < s_len {
                b = log_add_exp(b, emit(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                b = log_add_exp(b, emit(s + 2));
            }
            cur[s] = b;
        }
    }

    let mut grad = vec![0.0; frames * vocab];
    let mut occ = vec![ninf; vocab];
    for t in 0..frames {
        occ.iter_mut().for_each(|o| *o = ninf);
        for s in 0..s_len {
            let k = label(s) as usize;
            occ[k] = log_add_exp(occ[k], alpha[t * s_len + s] + beta[t * s_len + s]);
        }
        let row = lattice.row(t);
        for k in 0..vocab {
            grad[t * vocab + k] = row[k].exp() - (occ[k] - log_p).exp();
        }
    }
    Ok(CtcLoss {
        status: CtcStatus::Ok,
        loss: -log_p,
        grad,
    })
}

/// Merges runs of equal labels, then drops blanks.
pub fn collapse(a: &[u32], blank_id: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in a {
        if prev != Some(k) && k != blank_id {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Every length-`frames` label sequence over `0..vocab` that collapses to
/// `y`, in lexicographic order. Exhaustive, so only tiny sizes are allowed.
pub fn enumerate_alignments(
    y: &[u32],
    frames: usize,
    blank_id: u32,
    vocab: usize,
) -> Result<Vec<Vec<u32>>> {
    if frames > 8 || vocab > 4 {
        return Err(Error::Budget(format!(
            "alignment enumeration limited to T<=8, V<=4 (got T={frames}, V={vocab})"
        )));
    }
    let mut out = Vec::new();
    let mut a = vec![0u32; frames];
    let total = (vocab as u64).pow(frames as u32);
    for mut code in 0..total {
        for slot in a.iter_mut().rev() {
            *slot = (code % vocab as u64) as u32;
            code /= vocab as u64;
        }
        if collapse(&a, blank_id) == y {
            out.push(a.clone());
        }
    }
    Ok(out)
}

/// Per-frame argmax (ties to the smallest id), collapsed.
pub fn best_path(lattice: &LogProbLattice) -> Vec<u32> {
    (0..lattice.frames)
        .map(|t| {
            let row = lattice.row(t);
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect()
}

pub fn greedy_decode(lattice: &LogProbLattice, blank_id: u32) -> Vec<u32> {
    collapse(&best_path(lattice), blank_id)
}
