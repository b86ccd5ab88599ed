//! Back-off n-gram language model over target tokens.
//!
//! Training uses interpolated absolute discounting with a single discount.
//! The interpolated estimate is stored in back-off form (explicit
//! probabilities for observed n-grams plus a back-off weight per observed
//! context), which is exactly what an ARPA file holds, so ARPA export and
//! import reproduce every score. Values are stored in log10 and exposed in
//! natural log.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::corpus::Vocab;
use crate::error::{Error, Result};

const LN_10: f64 = std::f64::consts::LN_10;
/// Conventional log10 probability written for `<s>`, which is never predicted.
const BOS_LOGPROB: f64 = -99.0;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Entry {
    log10_prob: f64,
    log10_backoff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NgramModel {
    order: usize,
    vocab: Vocab,
    /// `tables[n - 1]` holds the n-grams.
    tables: Vec<HashMap<Vec<u32>, Entry>>,
}

/// Scoring history: the last `min(order − 1, len)` tokens, starting from `<s>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LmState(Vec<u32>);

impl LmState {
    pub fn tokens(&self) -> &[u32] {
        &self.0
    }
}

/// Tokens the model can predict: content tokens, `<unk>` and `</s>`.
fn predictable(vocab: &Vocab) -> Vec<u32> {
    let mut w = vec![vocab.unk_id(), vocab.eos_id()];
    w.extend(vocab.content_ids());
    w
}

pub fn train_ngram<S: AsRef<[u32]>>(
    targets: &[S],
    vocab: &Vocab,
    order: usize,
    discount: f64,
) -> Result<NgramModel> {
    if targets.is_empty() {
        return Err(Error::invalid(
            "cannot train a language model on an empty corpus",
        ));
    }
    if order == 0 {
        return Err(Error::invalid("n-gram order must be at least 1"));
    }
    if !(discount > 0.0 && discount < 1.0) {
        return Err(Error::invalid(format!(
            "discount {discount} must lie in (0, 1)"
        )));
    }
    let words = predictable(vocab);
    let is_word = {
        let mut v = vec![false; vocab.len()];
        words.iter().for_each(|&w| v[w as usize] = true);
        v
    };

    // counts[n-1][(ctx, w)] for n-grams ending in a predicted token
    let mut counts: Vec<HashMap<Vec<u32>, u64>> = vec![HashMap::new(); order];
    for sent in targets {
        let mut padded = vec![vocab.bos_id()];
        for &t in sent.as_ref() {
            if t as usize >= vocab.len() {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    size: vocab.len(),
                });
            }
            padded.push(if is_word[t as usize] {
                t
            } else {
                vocab.unk_id()
            });
        }
        padded.push(vocab.eos_id());
        for t in 1..padded.len() {
            for n in 1..=order.min(t + 1) {
                *counts[n - 1]
                    .entry(padded[t + 1 - n..=t].to_vec())
                    .or_default() += 1;
            }
        }
    }

    // per-context totals and distinct continuations
    let mut ctx_stats: Vec<HashMap<Vec<u32>, (u64, u64)>> = vec![HashMap::new(); order];
    for (n, table) in counts.iter().enumerate() {
        for (gram, &c) in table {
            let s = ctx_stats[n]
                .entry(gram[..gram.len() - 1].to_vec())
                .or_default();
            s.0 += c;
            s.1 += 1;
        }
    }

    let mut model = NgramModel {
        order,
        vocab: vocab.clone(),
        tables: vec![HashMap::new(); order],
    };

    // unigrams: interpolate with uniform over the predictable set
    let (total, distinct) = ctx_stats[0][&Vec::new()];
    let uniform = 1.0 / words.len() as f64;
    let mut uni = HashMap::new();
    for &w in &words {
        let c = counts[0].get(&vec![w]).copied().unwrap_or(0) as f64;
        let p = (c - discount).max(0.0) / total as f64
            + discount * distinct as f64 / total as f64 * uniform;
        uni.insert(
            vec![w],
            Entry {
                log10_prob: p.log10(),
                log10_backoff: None,
            },
        );
    }
    uni.insert(
        vec![vocab.bos_id()],
        Entry {
            log10_prob: BOS_LOGPROB,
            log10_backoff: None,
        },
    );
    model.tables[0] = uni;

    for n in 1..=order {
        if n > 1 {
            let mut entries = HashMap::new();
            for (gram, &c) in &counts[n - 1] {
                let ctx = &gram[..n - 1];
                let (ctx_total, ctx_distinct) = ctx_stats[n - 1][ctx];
                let lower = 10f64.powf(model.log10_score(&gram[1..n - 1], gram[n - 1]));
                let p = (c as f64 - discount) / ctx_total as f64
                    + discount * ctx_distinct as f64 / ctx_total as f64 * lower;
                entries.insert(
                    gram.clone(),
                    Entry {
                        log10_prob: p.log10(),
                        log10_backoff: None,
                    },
                );
            }
            model.tables[n - 1] = entries;
        }
        // back-off weights for the length-n contexts, needed by order n + 1
        if n < order {
            for (ctx, &(ctx_total, ctx_distinct)) in &ctx_stats[n] {
                let bow = (discount * ctx_distinct as f64 / ctx_total as f64).log10();
                let e = model.tables[n - 1]
                    .get_mut(ctx)
                    .expect("every history is a stored n-gram");
                e.log10_backoff = Some(bow);
            }
        }
    }
    Ok(model)
}

impl NgramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Number of stored n-grams per order.
    pub fn counts(&self) -> Vec<usize> {
        self.tables.iter().map(HashMap::len).collect()
    }

    fn map_token(&self, t: u32) -> u32 {
        let v = &self.vocab;
        if t as usize >= v.len() || (v.is_special(t) && t != v.eos_id() && t != v.unk_id()) {
            v.unk_id()
        } else {
            t
        }
    }

    /// log10 p(w | ctx) by the back-off recursion.
    fn log10_score(&self, ctx: &[u32], w: u32) -> f64 {
        let mut gram = Vec::with_capacity(ctx.len() + 1);
        let mut backoff = 0.0;
        for start in 0..=ctx.len() {
            gram.clear();
            gram.extend_from_slice(&ctx[start..]);
            gram.push(w);
            if let Some(e) = self.tables[gram.len() - 1].get(&gram) {
                return backoff + e.log10_prob;
            }
            if start < ctx.len() {
                if let Some(e) = self.tables[ctx.len() - start - 1].get(&ctx[start..]) {
                    backoff += e.log10_backoff.unwrap_or(0.0);
                }
            }
        }
        unreachable!("every predictable token has a unigram")
    }

    /// Natural-log p(w | ctx) for an arbitrary context (truncated to the
    /// model order).
    pub fn conditional_logprob(&self, ctx: &[u32], w: u32) -> f64 {
        let keep = ctx.len().min(self.order - 1);
        let ctx: Vec<u32> = ctx[ctx.len() - keep..]
            .iter()
            .map(|&t| {
                if t == self.vocab.bos_id() {
                    t
                } else {
                    self.map_token(t)
                }
            })
            .collect();
        self.log10_score(&ctx, self.map_token(w)) * LN_10
    }

    pub fn begin_state(&self) -> LmState {
        if self.order == 1 {
            LmState(Vec::new())
        } else {
            LmState(vec![self.vocab.bos_id()])
        }
    }

    /// Scores `token` after `state` and returns the advanced state.
    pub fn score_incremental(&self, state: &LmState, token: u32) -> Result<(LmState, f64)> {
        if state.0.len() > self.order - 1 || state.0.iter().any(|&t| t as usize >= self.vocab.len())
        {
            return Err(Error::invalid(
                "language model state does not belong to this model",
            ));
        }
        let w = self.map_token(token);
        let lp = self.log10_score(&state.0, w) * LN_10;
        let mut next = state.0.clone();
        next.push(w);
        if next.len() > self.order - 1 {
            next.drain(..next.len() - (self.order - 1));
        }
        Ok((LmState(next), lp))
    }

    /// Natural-log `p(</s> | state)`.
    pub fn score_end(&self, state: &LmState) -> Result<f64> {
        Ok(self.score_incremental(state, self.vocab.eos_id())?.1)
    }

    /// Natural-log probability of `y` followed by `</s>`.
    pub fn sentence_logprob(&self, y: &[u32]) -> f64 {
        let mut state = self.begin_state();
        let mut total = 0.0;
        for &t in y {
            let (s, lp) = self.score_incremental(&state, t).expect("own state");
            total += lp;
            state = s;
        }
        total + self.score_end(&state).expect("own state")
    }

    pub fn to_arpa(&self) -> String {
        let mut out = String::from("\\data\\\n");
        for (n, t) in self.tables.iter().enumerate() {
            let _ = writeln!(out, "ngram {}={}", n + 1, t.len());
        }
        for (n, table) in self.tables.iter().enumerate() {
            let _ = write!(out, "\n\\{}-grams:\n", n + 1);
            let mut grams: Vec<_> = table.iter().collect();
            grams.sort_by(|a, b| a.0.cmp(b.0));
            for (gram, e) in grams {
                let words: Vec<&str> = gram.iter().map(|&t| self.vocab.token(t).unwrap()).collect();
                let _ = write!(out, "{}\t{}", e.log10_prob, words.join(" "));
                if let Some(b) = e.log10_backoff {
                    let _ = write!(out, "\t{b}");
                }
                out.push('\n');
            }
        }
        out.push_str("\n\\end\\\n");
        out
    }

    pub fn write_arpa(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_arpa()).map_err(|e| Error::io(path, e))
    }

    pub fn read_arpa(path: impl AsRef<Path>, vocab: &Vocab) -> Result<NgramModel> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_arpa(&text, vocab)
    }

    /// Parses ARPA text; every word must exist in `vocab`.
    pub fn parse_arpa(text: &str, vocab: &Vocab) -> Result<NgramModel> {
        let err = |line: usize, msg: String| Error::Arpa { line, msg };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());

        match lines.next() {
            Some((_, "\\data\\")) => {}
            Some((n, l)) => return Err(err(n, format!("expected \\data\\, found {l:?}"))),
            None => return Err(err(0, "empty file".into())),
        }
        let mut declared = Vec::new();
        let mut pending = None;
        for (n, l) in lines.by_ref() {
            if let Some(rest) = l.strip_prefix("ngram ") {
                let (k, c) = rest
                    .split_once('=')
                    .ok_or_else(|| err(n, format!("malformed count line {l:?}")))?;
                let k: usize = k
                    .trim()
                    .parse()
                    .map_err(|_| err(n, format!("non-numeric order in {l:?}")))?;
                let c: usize = c
                    .trim()
                    .parse()
                    .map_err(|_| err(n, format!("non-numeric count in {l:?}")))?;
                if k != declared.len() + 1 {
                    return Err(err(
                        n,
                        format!(
                            "expected ngram {} count, found order {k}",
                            declared.len() + 1
                        ),
                    ));
                }
                declared.push(c);
            } else {
                pending = Some((n, l));
                break;
            }
        }
        if declared.is_empty() {
            return Err(err(0, "no ngram counts in \\data\\ section".into()));
        }
        let order = declared.len();
        let mut tables = vec![HashMap::new(); order];
        let mut current: Option<usize> = None;
        let mut ended = false;

        let mut handle = |n: usize, l: &str| -> Result<()> {
            if ended {
                return Err(err(n, "content after \\end\\".into()));
            }
            if l == "\\end\\" {
                ended = true;
                return Ok(());
            }
            if let Some(k) = l.strip_prefix('\\').and_then(|s| s.strip_suffix("-grams:")) {
                let k: usize = k
                    .parse()
                    .map_err(|_| err(n, format!("malformed section header {l:?}")))?;
                let expected = current.map_or(1, |c| c + 2);
                if k != expected || k > order {
                    return Err(err(n, format!("unexpected section header {l:?}")));
                }
                current = Some(k - 1);
                return Ok(());
            }
            if l.starts_with('\\') {
                return Err(err(n, format!("malformed section header {l:?}")));
            }
            let k = current.ok_or_else(|| err(n, "n-gram line outside a section".into()))?;
            let fields: Vec<&str> = l.split_whitespace().collect();
            let width = k + 1;
            if fields.len() != width + 1 && fields.len() != width + 2 {
                return Err(err(
                    n,
                    format!(
                        "expected {} or {} fields, found {}",
                        width + 1,
                        width + 2,
                        fields.len()
                    ),
                ));
            }
            let log10_prob: f64 = fields[0]
                .parse()
                .map_err(|_| err(n, format!("non-numeric probability {:?}", fields[0])))?;
            let gram = fields[1..=width]
                .iter()
                .map(|w| {
                    vocab
                        .id(w)
                        .ok_or_else(|| err(n, format!("word {w:?} not in vocabulary")))
                })
                .collect::<Result<Vec<u32>>>()?;
            let log10_backoff = match fields.get(width + 1) {
                Some(b) => Some(
                    b.parse()
                        .map_err(|_| err(n, format!("non-numeric back-off {b:?}")))?,
                ),
                None => None,
            };
            if tables[k]
                .insert(
                    gram,
                    Entry {
                        log10_prob,
                        log10_backoff,
                    },
                )
                .is_some()
            {
                return Err(err(n, "duplicate n-gram".into()));
            }
            Ok(())
        };
        if let Some((n, l)) = pending {
            handle(n, l)?;
        }
        for (n, l) in lines {
            handle(n, l)?;
        }
        if !ended {
            return Err(err(text.lines().count(), "missing \\end\\ marker".into()));
        }
        for (k, (t, &c)) in tables.iter().zip(&declared).enumerate() {
            if t.len() != c {
                return Err(err(
                    0,
                    format!("{}-grams: declared {c}, found {}", k + 1, t.len()),
                ));
            }
        }
        let model = NgramModel {
            order,
            vocab: vocab.clone(),
            tables,
        };
        for w in predictable(vocab) {
            if !model.tables[0].contains_key(&vec![w]) {
                return Err(err(
                    0,
                    format!("unigram {:?} missing", vocab.token(w).unwrap()),
                ));
            }
        }
        Ok(model)
    }
}
