//! CTC prefix beam search with shallow n-gram fusion.
//!
//! A hypothesis is scored as
//! `log p_ctc(y | x) + α·log p_lm(y) + β·|y|`, where the CTC term is the
//! alignment mass the beam has collected for the prefix and the length
//! term is a bonus of `β` per emitted token. LM and length terms are added
//! when a prefix grows, so they take part in pruning; the LM end-of-sentence
//! term is added only to the final ranking.

use std::cmp::Ordering;
use std::collections::HashMap;

use crate::ctc::{ctc_loss, log_add_exp, LogProbLattice};
use crate::error::{Error, Result};
use crate::ngram::{LmState, NgramModel};

pub const DEFAULT_ALPHA: f64 = 0.3;
pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_BEAM_SIZE: usize = 20;

#[derive(Clone, Copy, Debug)]
pub struct BeamConfig<'a> {
    /// LM weight.
    pub alpha: f64,
    /// Per-token length bonus.
    pub beta: f64,
    pub beam_size: usize,
    pub lm: Option<&'a NgramModel>,
}

impl Default for BeamConfig<'_> {
    fn default() -> Self {
        BeamConfig {
            alpha: 0.0,
            beta: DEFAULT_BETA,
            beam_size: DEFAULT_BEAM_SIZE,
            lm: None,
        }
    }
}

impl<'a> BeamConfig<'a> {
    pub fn new(
        alpha: f64,
        beta: f64,
        beam_size: usize,
        lm: Option<&'a NgramModel>,
    ) -> Result<Self> {
        if beam_size == 0 {
            return Err(Error::invalid("beam size must be at least 1"));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::invalid(format!(
                "invalid fusion weights alpha={alpha} beta={beta}"
            )));
        }
        if lm.is_none() && alpha != 0.0 {
            return Err(Error::invalid("alpha > 0 requires a language model"));
        }
        Ok(BeamConfig {
            alpha,
            beta,
            beam_size,
            lm,
        })
    }

    fn lm(&self) -> Option<&'a NgramModel> {
        self.lm.filter(|_| self.alpha != 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Log mass of alignments ending in blank.
    pub p_blank: f64,
    /// Log mass of alignments ending in the last token.
    pub p_nonblank: f64,
    pub lm_state: Option<LmState>,
    /// Accumulated `α·log p_lm + β·|y|` for the prefix.
    pub fusion: f64,
}

impl Hypothesis {
    pub fn ctc_mass(&self) -> f64 {
        log_add_exp(self.p_blank, self.p_nonblank)
    }

    pub fn score(&self) -> f64 {
        self.ctc_mass() + self.fusion
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub tokens: Vec<u32>,
    pub score: f64,
}

/// Higher score first; ties go to the shorter, then lexicographically
/// smaller sequence.
fn rank(a_score: f64, a: &[u32], b_score: f64, b: &[u32]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.len().cmp(&b.len()))
        .then_with(|| a.cmp(b))
}

pub fn ctc_beam_search(
    lattice: &LogProbLattice,
    cfg: &BeamConfig<'_>,
    blank_id: u32,
) -> Vec<Scored> {
    let ninf = f64::NEG_INFINITY;
    let lm = cfg.lm();
    let vocab = lattice.vocab_size() as u32;

    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        p_blank: 0.0,
        p_nonblank: ninf,
        lm_state: lm.map(NgramModel::begin_state),
        fusion: 0.0,
    }];

    for t in 0..lattice.frames() {
        let row = lattice.row(t);
        let mut next: HashMap<Vec<u32>, Hypothesis> =
            HashMap::with_capacity(beam.len() * vocab as usize);
        for hyp in &beam {
            let total = hyp.ctc_mass();
            let entry = next
                .entry(hyp.tokens.clone())
                .or_insert_with(|| Hypothesis {
                    p_blank: ninf,
                    p_nonblank: ninf,
                    ..hyp.clone()
                });
            entry.p_blank = log_add_exp(entry.p_blank, total + row[blank_id as usize]);
            if let Some(&last) = hyp.tokens.last() {
                entry.p_nonblank =
                    log_add_exp(entry.p_nonblank, hyp.p_nonblank + row[last as usize]);
            }

            for c in 0..vocab {
                if c == blank_id {
                    continue;
                }
                // a repeated label only extends through a separating blank
                let from = if hyp.tokens.last() == Some(&c) {
                    hyp.p_blank
                } else {
                    total
                };
                let mass = from + row[c as usize];
                let mut tokens = hyp.tokens.clone();
                tokens.push(c);
                let ext = next.entry(tokens).or_insert_with_key(|tokens| {
                    let (lm_state, lm_lp) = match (lm, &hyp.lm_state) {
                        (Some(m), Some(s)) => {
                            let (s, lp) = m
                                .score_incremental(s, c)
                                .expect("state comes from the same model");
                            (Some(s), lp)
                        }
                        _ => (None, 0.0),
                    };
                    Hypothesis {
                        tokens: tokens.clone(),
                        p_blank: ninf,
                        p_nonblank: ninf,
                        lm_state,
                        fusion: hyp.fusion + cfg.alpha * lm_lp + cfg.beta,
                    }
                });
                ext.p_nonblank = log_add_exp(ext.p_nonblank, mass);
            }
        }
        let mut pool: Vec<Hypothesis> =
            next.into_values().filter(|h| h.ctc_mass() > ninf).collect();
        pool.sort_by(|a, b| rank(a.score(), &a.tokens, b.score(), &b.tokens));
        pool.truncate(cfg.beam_size);
        beam = pool;
    }

    let mut out: Vec<Scored> = beam
        .into_iter()
        .map(|h| {
            let end = match (lm, &h.lm_state) {
                (Some(m), Some(s)) => cfg.alpha * m.score_end(s).expect("own state"),
                _ => 0.0,
            };
            Scored {
                score: h.score() + end,
                tokens: h.tokens,
            }
        })
        .collect();
    out.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
    out
}

/// Exact objective for a given output: full CTC marginal plus fusion terms.
/// `-inf` when the lattice cannot produce `y`.
pub fn rescore(
    y: &[u32],
    lattice: &LogProbLattice,
    cfg: &BeamConfig<'_>,
    blank_id: u32,
) -> Result<f64> {
    let ctc = if y.is_empty() {
        (0..lattice.frames())
            .map(|t| lattice.get(t, blank_id))
            .sum()
    } else {
        let r = ctc_loss(lattice, y, blank_id)?;
        if !r.is_feasible() {
            return Ok(f64::NEG_INFINITY);
        }
        -r.loss
    };
    let lm = cfg.lm().map_or(0.0, |m| cfg.alpha * m.sentence_logprob(y));
    Ok(ctc + lm + cfg.beta * y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocab;
    use crate::ctc::{enumerate_alignments, log_softmax_lattice};
    use crate::ngram::train_ngram;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const BLANK: u32 = 0;

    fn plain(beam_size: usize) -> BeamConfig<'static> {
        BeamConfig::new(0.0, 0.0, beam_size, None).unwrap()
    }

    fn random_lattice(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> LogProbLattice {
        let logits: Vec<f64> = (0..frames * vocab)
            .map(|_| rng.gen_range(-3.0..3.0))
            .collect();
        log_softmax_lattice(frames, vocab, &logits).unwrap()
    }

    /// Exact argmax over every label sequence, by summing path probabilities.
    fn exhaustive_best(lat: &LogProbLattice) -> (Vec<u32>, f64) {
        let (frames, vocab) = (lat.frames(), lat.vocab_size());
        let mut mass: HashMap<Vec<u32>, f64> = HashMap::new();
        let all = (vocab as u64).pow(frames as u32);
        for mut code in 0..all {
            let mut a = vec![0u32; frames];
            for slot in a.iter_mut().rev() {
                *slot = (code % vocab as u64) as u32;
                code /= vocab as u64;
            }
            let p: f64 = a
                .iter()
                .enumerate()
                .map(|(t, &k)| lat.get(t, k).exp())
                .product();
            *mass.entry(crate::ctc::collapse(&a, BLANK)).or_default() += p;
        }
        let mut best: Vec<(Vec<u32>, f64)> = mass.into_iter().collect();
        best.sort_by(|a, b| rank(a.1, &a.0, b.1, &b.0));
        best.swap_remove(0)
    }

    #[test]
    fn deterministic_path() {
        let p = [0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let lat = LogProbLattice::from_probs(3, 3, &p).unwrap();
        for cfg in [
            plain(1),
            plain(5),
            BeamConfig::new(0.0, 2.0, 3, None).unwrap(),
        ] {
            assert_eq!(ctc_beam_search(&lat, &cfg, BLANK)[0].tokens, [1, 2]);
        }
    }

    #[test]
    fn exhaustively_optimal_without_fusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let frames = rng.gen_range(1..=5);
            let vocab = rng.gen_range(2..=3);
            let lat = random_lattice(&mut rng, frames, vocab);
            let (best, mass) = exhaustive_best(&lat);
            let top = &ctc_beam_search(&lat, &plain(200), BLANK)[0];
            assert_eq!(top.tokens, best);
            assert!((top.score - mass.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn enumeration_oracle_on_four_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let lat = random_lattice(&mut rng, 4, 3);
        let mut best = (Vec::new(), (0..4).map(|t| lat.get(t, BLANK)).sum::<f64>());
        for len in 1..=4usize {
            for code in 0..2u32.pow(len as u32) {
                let y: Vec<u32> = (0..len).map(|i| 1 + ((code >> i) & 1)).collect();
                let set = enumerate_alignments(&y, 4, BLANK, 3).unwrap();
                if set.is_empty() {
                    continue;
                }
                let r = ctc_loss(&lat, &y, BLANK).unwrap();
                if -r.loss > best.1 {
                    best = (y, -r.loss);
                }
            }
        }
        assert_eq!(ctc_beam_search(&lat, &plain(81), BLANK)[0].tokens, best.0);
    }

    #[test]
    fn lm_breaks_symmetric_ties() {
        let v = Vocab::from_content(["a", "b"]).unwrap();
        let (a, b) = (6u32, 7u32);
        let lm = train_ngram(&vec![vec![a, b]; 50], &v, 2, 0.5).unwrap();
        // two frames, each split evenly between a and b
        let vocab = v.len();
        let mut probs = vec![0.0; 2 * vocab];
        for t in 0..2 {
            probs[t * vocab + a as usize] = 0.5;
            probs[t * vocab + b as usize] = 0.5;
        }
        let lat = LogProbLattice::from_probs(2, vocab, &probs).unwrap();
        let cfg = BeamConfig::new(5.0, 0.0, 10, Some(&lm)).unwrap();
        let out = ctc_beam_search(&lat, &cfg, BLANK);
        let pos = |y: &[u32]| out.iter().position(|h| h.tokens == y).unwrap();
        assert!(pos(&[a, b]) < pos(&[b, a]));
        assert_eq!(out[0].tokens, [a, b]);
        assert!(
            rescore(&[a, b], &lat, &cfg, BLANK).unwrap()
                > rescore(&[b, a], &lat, &cfg, BLANK).unwrap()
        );
        for h in &out {
            assert!((h.score - rescore(&h.tokens, &lat, &cfg, BLANK).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn reported_scores_match_rescore() {
        let v = Vocab::from_content(["a", "b"]).unwrap();
        let lm = train_ngram(&[vec![6u32, 7, 6], vec![7u32, 7], vec![6u32]], &v, 3, 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let frames = rng.gen_range(1..=5);
            let lat = random_lattice(&mut rng, frames, v.len());
            for cfg in [
                plain(10_000),
                BeamConfig::new(0.3, 0.9, 10_000, Some(&lm)).unwrap(),
            ] {
                let out = ctc_beam_search(&lat, &cfg, BLANK);
                for h in &out {
                    let exact = rescore(&h.tokens, &lat, &cfg, BLANK).unwrap();
                    assert!((h.score - exact).abs() < 1e-6);
                }
            }
            // narrow beam can only undercount mass
            let cfg = BeamConfig::new(0.3, 0.9, 2, Some(&lm)).unwrap();
            for h in ctc_beam_search(&lat, &cfg, BLANK) {
                assert!(h.score <= rescore(&h.tokens, &lat, &cfg, BLANK).unwrap() + 1e-6);
            }
        }
    }

    #[test]
    fn output_is_sorted_and_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let lat = random_lattice(&mut rng, 6, 4);
            let out = ctc_beam_search(&lat, &plain(8), BLANK);
            assert!(out.len() <= 8);
            assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
            let mut seqs: Vec<_> = out.iter().map(|h| h.tokens.clone()).collect();
            seqs.sort();
            seqs.dedup();
            assert_eq!(seqs.len(), out.len());
        }
    }

    #[test]
    fn empty_prefix_tracks_blank_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let lat = random_lattice(&mut rng, 5, 3);
        for t in 1..=5 {
            let sub = LogProbLattice::new(t, 3, lat.values()[..t * 3].to_vec()).unwrap();
            let out = ctc_beam_search(&sub, &plain(1000), BLANK);
            let empty = out.iter().find(|h| h.tokens.is_empty()).unwrap();
            let expected: f64 = (0..t).map(|k| lat.get(k, BLANK)).sum();
            assert!((empty.score - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn rescore_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let lat = random_lattice(&mut rng, 4, 3);
        let y = [1u32, 2];
        let ctc = ctc_loss(&lat, &y, BLANK).unwrap().loss;
        assert!((rescore(&y, &lat, &plain(1), BLANK).unwrap() + ctc).abs() < 1e-15);
        let with_bonus = BeamConfig::new(0.0, 0.5, 1, None).unwrap();
        assert!((rescore(&y, &lat, &with_bonus, BLANK).unwrap() - (-ctc + 1.0)).abs() < 1e-12);
        assert_eq!(
            rescore(
                &[1, 1, 1],
                &LogProbLattice::from_probs(2, 2, &[0.5; 4]).unwrap(),
                &plain(1),
                BLANK
            )
            .unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn config_validation() {
        assert!(BeamConfig::new(0.3, 0.9, 0, None).is_err());
        assert!(BeamConfig::new(0.3, 0.9, 20, None).is_err());
        assert!(BeamConfig::new(-1.0, 0.9, 20, None).is_err());
        assert!(BeamConfig::new(0.0, 0.9, 20, None).is_ok());
    }
}
