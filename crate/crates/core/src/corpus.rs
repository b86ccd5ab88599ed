//! Vocabulary, parallel corpora, synthetic tasks and vocabulary pruning.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BLANK: &str = "<blank>";
pub const MASK: &str = "<mask>";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";

/// Reserved surface forms, in id order.
pub const SPECIALS: [&str; 6] = [BLANK, MASK, PAD, UNK, BOS, EOS];
pub const NUM_SPECIALS: usize = SPECIALS.len();

/// Dense bidirectional token/id map. Ids `0..6` are the reserved specials.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const BLANK_ID: u32 = 0;
    pub const MASK_ID: u32 = 1;
    pub const PAD_ID: u32 = 2;
    pub const UNK_ID: u32 = 3;
    pub const BOS_ID: u32 = 4;
    pub const EOS_ID: u32 = 5;

    /// Builds a vocabulary from content tokens, which follow the specials.
    /// Duplicates and reserved forms among `content` are an error.
    pub fn from_content<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string())?;
        }
        for tok in content {
            v.push(tok.into())?;
        }
        Ok(v)
    }

    fn push(&mut self, tok: String) -> Result<()> {
        if tok.is_empty() || tok.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("invalid token {tok:?}")));
        }
        if self.index.contains_key(&tok) {
            return Err(Error::invalid(format!("duplicate token {tok:?}")));
        }
        self.index.insert(tok.clone(), self.tokens.len() as u32);
        self.tokens.push(tok);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn blank_id(&self) -> u32 {
        Self::BLANK_ID
    }
    pub fn mask_id(&self) -> u32 {
        Self::MASK_ID
    }
    pub fn pad_id(&self) -> u32 {
        Self::PAD_ID
    }
    pub fn unk_id(&self) -> u32 {
        Self::UNK_ID
    }
    pub fn bos_id(&self) -> u32 {
        Self::BOS_ID
    }
    pub fn eos_id(&self) -> u32 {
        Self::EOS_ID
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of all non-special tokens.
    pub fn content_ids(&self) -> std::ops::Range<u32> {
        NUM_SPECIALS as u32..self.tokens.len() as u32
    }

    /// Whitespace tokenization; unseen surface forms map to `<unk>`.
    pub fn encode(&self, line: &str) -> Vec<u32> {
        line.split_whitespace()
            .map(|t| self.id(t).unwrap_or(Self::UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            out.push(self.token(id).ok_or(Error::TokenOutOfRange {
                id,
                size: self.len(),
            })?);
        }
        Ok(out.join(" "))
    }

    /// One token per line; line number is the id.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if lines.get(i) != Some(s) {
                return Err(Error::Data {
                    path: path.into(),
                    line: i + 1,
                    msg: format!("expected reserved token {s:?}"),
                });
            }
        }
        Vocab::from_content(lines[NUM_SPECIALS..].iter().copied()).map_err(|e| Error::Data {
            path: path.into(),
            line: 0,
            msg: e.to_string(),
        })
    }
}

/// Counts whitespace tokens and keeps those with count ≥ `min_freq`,
/// ordered by descending count then lexicographically.
pub fn build_vocab<S: AsRef<str>>(lines: &[S], min_freq: usize) -> Result<Vocab> {
    if min_freq == 0 {
        return Err(Error::invalid("min_freq must be positive"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in lines {
        for tok in line.as_ref().split_whitespace() {
            if SPECIALS.contains(&tok) {
                continue;
            }
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
    if kept.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocab::from_content(kept.into_iter().map(|(t, _)| t))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Copy,
    Reverse,
    ToyGrammar,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::ToyGrammar => "toy_grammar",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "toy_grammar" | "toy-grammar" => Ok(Task::ToyGrammar),
            other => Err(Error::invalid(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub task: String,
    pub seed: u64,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>, task: impl Into<String>, seed: u64) -> Self {
        ParallelCorpus {
            pairs,
            task: task.into(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks the corpus invariants against a vocabulary size.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (n, p) in self.pairs.iter().enumerate() {
            if p.source.is_empty() || p.target.is_empty() {
                return Err(Error::invalid(format!("pair {n} has an empty side")));
            }
            for &id in p.source.iter().chain(&p.target) {
                if id as usize >= vocab_size {
                    return Err(Error::TokenOutOfRange {
                        id,
                        size: vocab_size,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn targets(&self) -> impl Iterator<Item = &[u32]> {
        self.pairs.iter().map(|p| p.target.as_slice())
    }

    /// Splits off the last `n` pairs.
    pub fn split_tail(mut self, n: usize) -> (ParallelCorpus, ParallelCorpus) {
        let at = self.pairs.len().saturating_sub(n);
        let tail = self.pairs.split_off(at);
        let rest = ParallelCorpus::new(tail, self.task.clone(), self.seed);
        (self, rest)
    }

    /// Writes `src` and `tgt` as line-aligned text files.
    pub fn write(&self, vocab: &Vocab, src: impl AsRef<Path>, tgt: impl AsRef<Path>) -> Result<()> {
        let mut s = String::new();
        let mut t = String::new();
        for p in &self.pairs {
            s.push_str(&vocab.decode(&p.source)?);
            s.push('\n');
            t.push_str(&vocab.decode(&p.target)?);
            t.push('\n');
        }
        fs::write(src.as_ref(), s).map_err(|e| Error::io(src.as_ref(), e))?;
        fs::write(tgt.as_ref(), t).map_err(|e| Error::io(tgt.as_ref(), e))
    }

    /// Re-encodes every id through `remap` (old id → new id).
    pub fn remapped(&self, remap: &[u32]) -> ParallelCorpus {
        let map = |s: &[u32]| s.iter().map(|&id| remap[id as usize]).collect();
        ParallelCorpus {
            pairs: self
                .pairs
                .iter()
                .map(|p| SentencePair {
                    source: map(&p.source),
                    target: map(&p.target),
                })
                .collect(),
            task: self.task.clone(),
            seed: self.seed,
        }
    }
}

/// Target side of the toy grammar: map each token through `partner`
/// (indexed by id), then swap adjacent pairs at even offsets.
pub fn toy_grammar_target(source: &[u32], partner: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = source.iter().map(|&t| partner[t as usize]).collect();
    for pair in out.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
    out
}

/// Generates a synthetic parallel corpus. `vocab_size` counts the six
/// specials, so content tokens are `w0 .. w{vocab_size-7}`.
pub fn gen_synthetic(
    task: Task,
    n_pairs: usize,
    len_range: (usize, usize),
    vocab_size: usize,
    seed: u64,
) -> Result<(Vocab, ParallelCorpus)> {
    let (lo, hi) = len_range;
    if lo < 1 || hi > 64 || lo > hi {
        return Err(Error::invalid(format!(
            "length range {lo}..={hi} must lie within [1, 64]"
        )));
    }
    if vocab_size < 8 {
        return Err(Error::invalid(format!("vocab_size {vocab_size} < 8")));
    }
    let vocab = Vocab::from_content((0..vocab_size - NUM_SPECIALS).map(|i| format!("w{i}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content: Vec<u32> = vocab.content_ids().collect();

    let mut partner: Vec<u32> = (0..vocab_size as u32).collect();
    if task == Task::ToyGrammar {
        let mut shuffled = content.clone();
        shuffled.shuffle(&mut rng);
        for (&from, &to) in content.iter().zip(&shuffled) {
            partner[from as usize] = to;
        }
    }

    let pairs = (0..n_pairs)
        .map(|_| {
            let len = rng.gen_range(lo..=hi);
            let source: Vec<u32> = (0..len)
                .map(|_| *content.choose(&mut rng).unwrap())
                .collect();
            let target = match task {
                Task::Copy => source.clone(),
                Task::Reverse => source.iter().rev().copied().collect(),
                Task::ToyGrammar => toy_grammar_target(&source, &partner),
            };
            SentencePair { source, target }
        })
        .collect();
    Ok((vocab, ParallelCorpus::new(pairs, task.to_string(), seed)))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Reads a line-aligned pair of corpus files.
pub fn load_parallel(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
    vocab: &Vocab,
) -> Result<ParallelCorpus> {
    let (src_path, tgt_path) = (src_path.as_ref(), tgt_path.as_ref());
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Data {
            path: tgt_path.into(),
            line: src.len().min(tgt.len()) + 1,
            msg: format!(
                "line count mismatch: {} source vs {} target lines",
                src.len(),
                tgt.len()
            ),
        });
    }
    let mut pairs = Vec::with_capacity(src.len());
    for (n, (s, t)) in src.iter().zip(&tgt).enumerate() {
        for (line, path) in [(s, src_path), (t, tgt_path)] {
            if line.trim().is_empty() {
                return Err(Error::Data {
                    path: path.into(),
                    line: n + 1,
                    msg: "blank line".into(),
                });
            }
        }
        pairs.push(SentencePair {
            source: vocab.encode(s),
            target: vocab.encode(t),
        });
    }
    Ok(ParallelCorpus::new(pairs, "file", 0))
}

/// Reads one side of a corpus (e.g. decoder input) as id sequences.
pub fn load_lines(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<Vec<u32>>> {
    Ok(read_lines(path.as_ref())?
        .iter()
        .map(|l| vocab.encode(l))
        .collect())
}

/// Keeps the specials plus every token seen in `corpus`, in original id
/// order. Returns the pruned vocabulary and the old→new id table; tokens
/// that do not survive map to `<unk>`.
pub fn prune_vocab(vocab: &Vocab, corpus: &ParallelCorpus) -> (Vocab, Vec<u32>) {
    let mut used = vec![false; vocab.len()];
    for p in &corpus.pairs {
        for &id in p.source.iter().chain(&p.target) {
            if let Some(u) = used.get_mut(id as usize) {
                *u = true;
            }
        }
    }
    let mut remap = vec![Vocab::UNK_ID; vocab.len()];
    let mut kept = Vec::new();
    for (id, slot) in remap.iter_mut().enumerate() {
        if id < NUM_SPECIALS {
            *slot = id as u32;
        } else if used[id] {
            *slot = (NUM_SPECIALS + kept.len()) as u32;
            kept.push(vocab.tokens[id].clone());
        }
    }
    let pruned = Vocab::from_content(kept).expect("tokens come from a valid vocabulary");
    (pruned, remap)
}
