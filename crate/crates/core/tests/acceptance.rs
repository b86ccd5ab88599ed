//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use natctc::assignment::{brute_force_assignment, hungarian, CostMatrix};
use natctc::beam::{ctc_beam_search, BeamConfig};
use natctc::corpus::{gen_synthetic, prune_vocab, ParallelCorpus, SentencePair, Task, Vocab};
use natctc::ctc::{collapse, ctc_loss, enumerate_alignments, log_softmax_lattice, LogProbLattice};
use natctc::distill::EdConfig;
use natctc::metrics::corpus_bleu;
use natctc::model::{
    assemble_batches, average_checkpoints, evaluate, greedy_decode_batch, load_checkpoint,
    mlm_pretrain_step, nat_gradients, nat_train_step, pretraining_sequences, save_checkpoint,
    EncoderConfig, Evaluation, NatExample, ParamStore, TrainConfig,
};
use natctc::ngram::{train_ngram, NgramModel};
use natctc::upsample::{upsample_tokens, RatioMode, Scheme, UpsampleConfig, UpsampleRatio};

const BLANK: u32 = 0;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// |a − b| / max(|a|, |b|, floor)
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_lattice(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> LogProbLattice {
    let logits: Vec<f64> = (0..frames * vocab)
        .map(|_| rng.gen_range(-3.0..3.0))
        .collect();
    log_softmax_lattice(frames, vocab, &logits).unwrap()
}

/// Every label sequence of length `frames` over `0..vocab`, with its
/// probability under `lattice`.
fn all_paths(lattice: &LogProbLattice) -> Vec<(Vec<u32>, f64)> {
    let (t, v) = (lattice.frames(), lattice.vocab_size());
    let mut out = Vec::new();
    for mut code in 0..(v as u64).pow(t as u32) {
        let mut a = vec![0u32; t];
        for slot in a.iter_mut().rev() {
            *slot = (code % v as u64) as u32;
            code /= v as u64;
        }
        let lp: f64 = a.iter().enumerate().map(|(i, &k)| lattice.get(i, k)).sum();
        out.push((a, lp.exp()));
    }
    out
}

fn random_target(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(1..vocab as u32)).collect()
}

fn c1_ctc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let (mut worst, mut infeasible) = (0.0f64, 0);
    for _ in 0..100 {
        let v = rng.gen_range(2..=3);
        let t = rng.gen_range(1..=6);
        let len = rng.gen_range(1..=3);
        let y = random_target(&mut rng, len, v);
        let lattice = random_lattice(&mut rng, t, v);
        let brute: f64 = all_paths(&lattice)
            .into_iter()
            .filter(|(a, _)| collapse(a, BLANK) == y)
            .map(|(_, p)| p)
            .sum();
        let r = ctc_loss(&lattice, &y, BLANK).map_err(|e| e.to_string())?;
        if brute == 0.0 {
            infeasible += 1;
            ensure(!r.is_feasible() && r.loss == f64::INFINITY, || {
                format!("y={y:?} T={t}: no alignment exists but loss is {}", r.loss)
            })?;
            continue;
        }
        let err = ((-r.loss).exp() - brute).abs() / brute;
        worst = worst.max(err);
        ensure(err <= 1e-9, || {
            format!("y={y:?} T={t}: relative error {err:e}")
        })?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "max rel err {worst:.1e} over 100 instances ({infeasible} infeasible), {secs:.2}s"
    ))
}

fn c2_ctc_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 20 {
        let v = rng.gen_range(2..=5);
        let t = rng.gen_range(2..=8);
        let len = rng.gen_range(1..=3);
        let y = random_target(&mut rng, len, v);
        let logits: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let loss_at = |z: &[f64]| {
            let lat = log_softmax_lattice(t, v, z).unwrap();
            ctc_loss(&lat, &y, BLANK).unwrap()
        };
        let base = loss_at(&logits);
        if !base.is_feasible() {
            continue;
        }
        done += 1;
        for i in 0..logits.len() {
            let mut z = logits.clone();
            z[i] += h;
            let up = loss_at(&z).loss;
            z[i] -= 2.0 * h;
            let down = loss_at(&z).loss;
            let fd = (up - down) / (2.0 * h);
            let err = rel_err(fd, base.grad[i], 1e-3);
            worst = worst.max(err);
            ensure(err <= 1e-4, || {
                format!("y={y:?} T={t} V={v} logit {i}: fd {fd} vs {}", base.grad[i])
            })?;
        }
    }
    Ok(format!("max rel err {worst:.1e} over 20 instances"))
}

fn c3_model_gradient() -> Outcome {
    let enc = EncoderConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_positions: 32,
        vocab_size: 10,
        dropout: 0.1,
    };
    let student = ParamStore::<f64>::init(enc, 31).map_err(|e| e.to_string())?;
    let teacher = ParamStore::<f64>::init(enc, 32).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let batch: Vec<NatExample> = (0..2)
        .map(|_| {
            let n = rng.gen_range(3..=5);
            let source: Vec<u32> = (0..n).map(|_| rng.gen_range(6..10)).collect();
            NatExample {
                target: source.clone(),
                source,
            }
        })
        .collect();
    let cfg = TrainConfig {
        lr: 1e-4,
        batch_tokens: 100,
        steps: 1,
        upsample: UpsampleConfig::new(
            Scheme::InsertMasks,
            UpsampleRatio::integer(2).unwrap(),
            RatioMode::Dynamic,
            32,
        )
        .unwrap(),
        ed: EdConfig {
            teacher_layer: -1,
            start_step: 0,
        },
        use_ed: true,
        seed: 7,
    };
    let objective = |p: &ParamStore<f64>| {
        let (_, s) = nat_gradients(p, Some(&teacher), &batch, 0, &cfg).unwrap();
        s.l_ctc + s.l_ed.unwrap()
    };
    let (grads, stats) =
        nat_gradients(&student, Some(&teacher), &batch, 0, &cfg).map_err(|e| e.to_string())?;
    ensure(stats.lambda == 1 && stats.used == 2, || {
        format!("{stats:?}")
    })?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (ti, tensor) in student.tensors.iter().enumerate() {
        for _ in 0..5 {
            let i = rng.gen_range(0..tensor.data.len());
            let mut p = student.clone();
            p.tensors[ti].data[i] += h;
            let up = objective(&p);
            p.tensors[ti].data[i] -= 2.0 * h;
            let down = objective(&p);
            let fd = (up - down) / (2.0 * h);
            let an = grads.0[ti][i];
            let err = rel_err(fd, an, 1e-3);
            worst = worst.max(err);
            checked += 1;
            ensure(err <= 1e-5, || {
                format!("{}[{i}]: fd {fd:e} vs analytic {an:e}", tensor.name)
            })?;
        }
    }
    Ok(format!(
        "L_ctc + L_ed, {checked} coordinates over {} tensors, max rel err {worst:.1e}",
        student.tensors.len()
    ))
}

fn c4_hungarian() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for k in 0..200 {
        let cols = rng.gen_range(1..=7);
        let rows = rng.gen_range(1..=cols);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.gen_range(-20..=20) as f64)
            .collect();
        let c = CostMatrix::new(rows, cols, data).map_err(|e| e.to_string())?;
        let fast = hungarian(&c);
        let slow = brute_force_assignment(&c).map_err(|e| e.to_string())?;
        let mut seen = BTreeSet::new();
        ensure(
            fast.cols.iter().all(|&j| j < cols && seen.insert(j)),
            || format!("matrix {k}: assignment {:?} is not injective", fast.cols),
        )?;
        ensure(
            fast.cost == slow.cost && c.cost_of(&fast.cols) == fast.cost,
            || format!("matrix {k} ({rows}x{cols}): {} vs {}", fast.cost, slow.cost),
        )?;
    }
    Ok("200 integer matrices up to 7x7 match brute force exactly".into())
}

fn c5_beam_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let cfg = BeamConfig::new(0.0, 0.0, 256, None).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for k in 0..50 {
        let v = rng.gen_range(2..=3);
        let t = rng.gen_range(1..=5);
        let lattice = random_lattice(&mut rng, t, v);
        let mut marginal: HashMap<Vec<u32>, f64> = HashMap::new();
        for (a, p) in all_paths(&lattice) {
            *marginal.entry(collapse(&a, BLANK)).or_default() += p;
        }
        let (best, p_best) = marginal
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(y, p)| (y.clone(), *p))
            .unwrap();
        let top = ctc_beam_search(&lattice, &cfg, BLANK)
            .into_iter()
            .next()
            .ok_or("empty beam")?;
        ensure(top.tokens == best, || {
            format!("lattice {k}: beam {:?} vs exhaustive {best:?}", top.tokens)
        })?;
        let err = (top.score - p_best.ln()).abs();
        worst = worst.max(err);
        ensure(err <= 1e-9, || format!("lattice {k}: score off by {err:e}"))?;
    }
    Ok(format!(
        "50 lattices, beam 256: top = exhaustive argmax, score err {worst:.1e}"
    ))
}

fn c6_upsampling() -> Outcome {
    let (a, b, c, d, m) = (10, 11, 12, 13, Vocab::MASK_ID);
    let x = [a, b, c, d];
    let two = UpsampleRatio::integer(2).unwrap();
    let run = |scheme| {
        let cfg = UpsampleConfig::new(scheme, two, RatioMode::Fixed, 64).unwrap();
        upsample_tokens(&x, &cfg, m).unwrap().tokens
    };
    let it = run(Scheme::InsertTokens);
    let im = run(Scheme::InsertMasks);
    ensure(it == [a, a, b, b, c, c, d, d], || format!("IT gave {it:?}"))?;
    ensure(im == [a, m, b, m, c, m, d, m], || format!("IM gave {im:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut capped = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=100);
        let ratio = UpsampleRatio::new(rng.gen_range(1..=12), rng.gen_range(1..=3)).unwrap();
        let l_pos = rng.gen_range(8..=128);
        let scheme = if rng.gen() {
            Scheme::InsertMasks
        } else {
            Scheme::InsertTokens
        };
        let cfg = UpsampleConfig::new(scheme, ratio, RatioMode::Dynamic, l_pos).unwrap();
        let src: Vec<u32> = (0..n).map(|_| rng.gen_range(6..30)).collect();
        let Ok(out) = upsample_tokens(&src, &cfg, m) else {
            // s·|x| < 1: nothing to emit
            ensure(ratio.scaled_floor(n) == 0, || {
                format!("n={n} s={ratio} failed")
            })?;
            continue;
        };
        ensure(out.len() <= l_pos, || {
            format!("n={n} s={ratio} l_pos={l_pos}: {} positions", out.len())
        })?;
        if ratio.scaled_floor(n) > l_pos {
            capped += 1;
        } else {
            ensure(out.len() == ratio.scaled_floor(n), || {
                format!("n={n} s={ratio}: uncapped length {}", out.len())
            })?;
        }
    }
    Ok(format!(
        "IT/IM worked example exact; DR bound held on 1000 draws ({capped} capped)"
    ))
}

/// Γ(y, T) built from the blank-interleaved label graph, independently of
/// the library's collapse-based enumeration.
fn gamma(y: &[u32], frames: usize) -> BTreeSet<Vec<u32>> {
    let mut ext = vec![BLANK];
    for &k in y {
        ext.extend([k, BLANK]);
    }
    let n = ext.len();
    let mut out = BTreeSet::new();
    fn walk(
        ext: &[u32],
        s: usize,
        path: &mut Vec<u32>,
        frames: usize,
        out: &mut BTreeSet<Vec<u32>>,
    ) {
        path.push(ext[s]);
        if path.len() == frames {
            if s + 2 >= ext.len() {
                out.insert(path.clone());
            }
        } else {
            let mut next = vec![s];
            if s + 1 < ext.len() {
                next.push(s + 1);
            }
            if s + 2 < ext.len() && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                next.push(s + 2);
            }
            for s2 in next {
                walk(ext, s2, path, frames, out);
            }
        }
        path.pop();
    }
    let mut path = Vec::new();
    for s in 0..n.min(2) {
        walk(&ext, s, &mut path, frames, &mut out);
    }
    out
}

fn c7_collapse_gamma() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for _ in 0..1000 {
        let t = rng.gen_range(1..=8);
        let a: Vec<u32> = (0..t).map(|_| rng.gen_range(0..4)).collect();
        let y = collapse(&a, BLANK);
        ensure(gamma(&y, t).contains(&a), || {
            format!("{a:?} not in Γ({y:?}, {t})")
        })?;
        let listed = enumerate_alignments(&y, t, BLANK, 4).map_err(|e| e.to_string())?;
        ensure(listed.contains(&a), || format!("{a:?} not enumerated"))?;
    }
    let mut instances = 0;
    for t in 1..=6 {
        for v in 2..=4 {
            for len in 0..=t.min(4) {
                for _ in 0..3 {
                    let y = random_target(&mut rng, len, v);
                    let listed: BTreeSet<Vec<u32>> = enumerate_alignments(&y, t, BLANK, v)
                        .map_err(|e| e.to_string())?
                        .into_iter()
                        .collect();
                    let expected = gamma(&y, t);
                    ensure(listed == expected, || {
                        format!(
                            "y={y:?} T={t} V={v}: {} vs {}",
                            listed.len(),
                            expected.len()
                        )
                    })?;
                    instances += 1;
                }
            }
        }
    }
    Ok(format!(
        "1000 alignments round-trip; Γ equals the preimage set on {instances} instances"
    ))
}

fn examples(corpus: &ParallelCorpus) -> Vec<NatExample> {
    corpus
        .pairs
        .iter()
        .map(|p| NatExample {
            source: p.source.clone(),
            target: p.target.clone(),
        })
        .collect()
}

fn upsample(scheme: Scheme, s: u64) -> UpsampleConfig {
    UpsampleConfig::new(
        scheme,
        UpsampleRatio::integer(s).unwrap(),
        RatioMode::Dynamic,
        64,
    )
    .unwrap()
}

/// Fine-tunes `params` for `cfg.steps` steps over shuffled length-bucketed
/// batches; `on_step(step, params)` runs before each update.
fn fine_tune(
    params: &mut ParamStore<f32>,
    teacher: Option<&ParamStore<f32>>,
    train: &[NatExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(u64, &ParamStore<f32>) -> bool,
) {
    let lengths: Vec<usize> = train
        .iter()
        .map(|e| e.source.len() + e.target.len())
        .collect();
    let mut batches = assemble_batches(&lengths, cfg.batch_tokens);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 100);
    let mut step = 0;
    while step < cfg.steps {
        batches.shuffle(&mut rng);
        for b in &batches {
            if step >= cfg.steps || !on_step(step, params) {
                return;
            }
            let batch: Vec<NatExample> = b.iter().map(|&i| train[i].clone()).collect();
            nat_train_step(params, teacher, &batch, step, cfg).unwrap();
            step += 1;
        }
    }
}

fn c8_copy_task() -> Outcome {
    let start = Instant::now();
    let (vocab, corpus) = gen_synthetic(Task::Copy, 10_500, (3, 10), 26, 1).unwrap();
    let content = vocab.len() - natctc::corpus::NUM_SPECIALS;
    let (train, valid) = corpus.split_tail(500);
    let (train, valid) = (examples(&train), examples(&valid));
    let enc = EncoderConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 256,
        max_positions: 64,
        vocab_size: vocab.len(),
        dropout: 0.1,
    };
    let mut params = ParamStore::<f32>::init(enc, 1).unwrap();
    params.set_freeze(true, false);
    let up = upsample(Scheme::InsertMasks, 3);
    let cfg = TrainConfig {
        lr: 1e-4,
        batch_tokens: 400,
        steps: 3000,
        upsample: up,
        ed: EdConfig::default(),
        use_ed: false,
        seed: 1,
    };
    let mut reached: Option<(u64, f64)> = None;
    let mut last = 0.0;
    fine_tune(&mut params, None, &train, &cfg, |step, p| {
        if step == 0 || step % 250 != 0 {
            return true;
        }
        last = evaluate(p, None, &valid, &up).unwrap().sequence_accuracy;
        if last >= 0.95 {
            reached = Some((step, last));
        }
        reached.is_none()
    });
    if reached.is_none() {
        last = evaluate(&params, None, &valid, &up)
            .unwrap()
            .sequence_accuracy;
        if last >= 0.95 {
            reached = Some((cfg.steps, last));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let (step, acc) =
        reached.ok_or_else(|| format!("accuracy {last:.3} < 0.95 after {} steps", cfg.steps))?;
    ensure(secs <= 900.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "{content} content tokens: accuracy {acc:.3} on 500 held-out pairs at step {step}, {secs:.0}s"
    ))
}

struct ToySeed {
    seed: u64,
    train: Vec<NatExample>,
    valid: Vec<NatExample>,
    init: ParamStore<f32>,
    pretrained: ParamStore<f32>,
}

fn toy_setup(seed: u64) -> ToySeed {
    let (vocab, corpus) = gen_synthetic(Task::ToyGrammar, 5_500, (3, 10), 26, seed).unwrap();
    let (train, valid) = corpus.split_tail(500);
    let enc = EncoderConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 128,
        max_positions: 64,
        vocab_size: vocab.len(),
        dropout: 0.1,
    };
    let init = ParamStore::<f32>::init(enc, seed).unwrap();
    let mut pretrained = init.clone();
    let sequences = pretraining_sequences(&train.pairs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for step in 0..3000 {
        let batch: Vec<Vec<u32>> = (0..32)
            .map(|_| sequences.choose(&mut rng).unwrap().clone())
            .collect();
        mlm_pretrain_step(&mut pretrained, &batch, step, seed, 1e-3).unwrap();
    }
    pretrained.reset_optimizer();
    ToySeed {
        seed,
        train: examples(&train),
        valid: examples(&valid),
        init,
        pretrained,
    }
}

fn toy_config(seed: u64, lr: f64, steps: u64, use_ed: bool) -> TrainConfig {
    TrainConfig {
        lr,
        batch_tokens: 400,
        steps,
        upsample: upsample(Scheme::InsertMasks, 3),
        ed: EdConfig {
            teacher_layer: -1,
            start_step: 200,
        },
        use_ed,
        seed,
    }
}

fn c9_pretraining(seeds: &[ToySeed]) -> Outcome {
    let mut init_loss = Vec::new();
    let mut pre_loss = Vec::new();
    for s in seeds {
        let cfg = toy_config(s.seed, 1e-4, 600, false);
        for (start, out) in [(&s.init, &mut init_loss), (&s.pretrained, &mut pre_loss)] {
            let mut p = start.clone();
            p.set_freeze(true, false);
            fine_tune(&mut p, None, &s.train, &cfg, |_, _| true);
            out.push(
                evaluate(&p, None, &s.valid, &cfg.upsample)
                    .unwrap()
                    .ctc_loss,
            );
        }
    }
    let (a, b) = (median(init_loss.clone()), median(pre_loss.clone()));
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.2}"))
            .collect::<Vec<_>>()
            .join("/")
    };
    let detail = format!(
        "median valid CTC after 600 steps: random {a:.3} ({}) vs MLM-pretrained {b:.3} ({})",
        fmt(&init_loss),
        fmt(&pre_loss)
    );
    ensure(b < a, || detail.clone())?;
    Ok(detail)
}

fn c10_distillation(seeds: &[ToySeed]) -> Outcome {
    let (mut at_start, mut at_end, mut acc_ed, mut acc_plain) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in seeds {
        let teacher = &s.pretrained;
        for use_ed in [false, true] {
            let cfg = toy_config(s.seed, 1e-3, 800, use_ed);
            let mut p = s.pretrained.clone();
            p.set_freeze(true, false);
            let mut activation: Option<Evaluation> = None;
            fine_tune(&mut p, Some(teacher), &s.train, &cfg, |step, p| {
                if use_ed && step == cfg.ed.start_step {
                    activation = Some(
                        evaluate(p, Some((teacher, &cfg.ed)), &s.valid, &cfg.upsample).unwrap(),
                    );
                }
                true
            });
            let end = evaluate(&p, Some((teacher, &cfg.ed)), &s.valid, &cfg.upsample).unwrap();
            if use_ed {
                at_start.push(activation.unwrap().ed_loss.unwrap());
                at_end.push(end.ed_loss.unwrap());
                acc_ed.push(end.sequence_accuracy);
            } else {
                acc_plain.push(end.sequence_accuracy);
            }
        }
    }
    let (e0, e1) = (median(at_start), median(at_end));
    let (a_ed, a_plain) = (median(acc_ed), median(acc_plain));
    let detail = format!(
        "median ED loss {e0:.4} at activation -> {e1:.4} final; accuracy {a_ed:.3} with ED vs {a_plain:.3} without"
    );
    ensure(e1 < e0 && a_ed >= a_plain - 0.01, || detail.clone())?;
    Ok(detail)
}

fn c11_ngram() -> Outcome {
    let (vocab, corpus) = gen_synthetic(Task::ToyGrammar, 1000, (3, 12), 26, 11).unwrap();
    let targets: Vec<Vec<u32>> = corpus.targets().map(<[u32]>::to_vec).collect();
    let lm = train_ngram(&targets, &vocab, 4, 0.75).map_err(|e| e.to_string())?;
    let mut words = vec![Vocab::UNK_ID, Vocab::EOS_ID];
    words.extend(vocab.content_ids());

    let mut contexts = BTreeSet::new();
    for y in &targets {
        let mut padded = vec![Vocab::BOS_ID];
        padded.extend(y);
        for end in 1..=padded.len() {
            for k in 0..=3.min(end) {
                contexts.insert(padded[end - k..end].to_vec());
            }
        }
    }
    let mut worst = 0.0f64;
    for ctx in &contexts {
        let total: f64 = words
            .iter()
            .map(|&w| lm.conditional_logprob(ctx, w).exp())
            .sum();
        worst = worst.max((total - 1.0).abs());
        ensure((total - 1.0).abs() <= 1e-9, || {
            format!("context {ctx:?} sums to {total}")
        })?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("lm.arpa");
    lm.write_arpa(&path).map_err(|e| e.to_string())?;
    let back = NgramModel::read_arpa(&path, &vocab).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let mut drift = 0.0f64;
    for _ in 0..100 {
        let y: Vec<u32> = (0..rng.gen_range(0..15))
            .map(|_| rng.gen_range(6..vocab.len() as u32))
            .collect();
        let d = (lm.sentence_logprob(&y) - back.sentence_logprob(&y)).abs();
        drift = drift.max(d);
        ensure(d <= 1e-6, || format!("{y:?}: ARPA score drift {d:e}"))?;
    }
    Ok(format!(
        "{} observed contexts normalized (max dev {worst:.1e}); ARPA drift {drift:.1e} on 100 sentences",
        contexts.len()
    ))
}

fn c12_bleu() -> Outcome {
    let toks = |s: &str| -> Vec<String> { s.split(' ').map(str::to_string).collect() };
    let (_, corpus) = gen_synthetic(Task::ToyGrammar, 50, (3, 10), 26, 12).unwrap();
    let lines: Vec<Vec<u32>> = corpus.targets().map(<[u32]>::to_vec).collect();
    let same = corpus_bleu(&lines, &lines, 4).map_err(|e| e.to_string())?;
    ensure(same.bleu == 100.0, || {
        format!("identical corpora gave {}", same.bleu)
    })?;

    // 1..4-gram matches 6/7, 4/6, 2/5, 1/4 with equal lengths
    let frozen = 48.892_302_243_490_1;
    let r = corpus_bleu(
        &[toks("the cat sat on the mat .")],
        &[toks("the cat sat on a mat .")],
        4,
    )
    .map_err(|e| e.to_string())?;
    ensure((r.bleu - frozen).abs() <= 1e-6, || {
        format!("worked example gave {}", r.bleu)
    })?;

    let rep = corpus_bleu(
        &[toks("the the the the the the the")],
        &[toks("the cat sat on the mat .")],
        4,
    )
    .map_err(|e| e.to_string())?;
    ensure(rep.matches[0] == 2 && rep.totals[0] == 7, || {
        format!(
            "repetition: {}/{} unigram matches",
            rep.matches[0], rep.totals[0]
        )
    })?;
    ensure(rep.precisions[0] == 2.0 / 7.0, || {
        format!("clipped precision {}", rep.precisions[0])
    })?;
    Ok(format!(
        "identical = 100.0; worked example {:.6}; repeated word clipped to 2/7",
        r.bleu
    ))
}

fn c13_checkpoints() -> Outcome {
    let (vocab, corpus) = gen_synthetic(Task::Copy, 2_000, (3, 8), 26, 13).unwrap();
    let train = examples(&corpus);
    let enc = EncoderConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        max_positions: 64,
        vocab_size: vocab.len(),
        dropout: 0.1,
    };
    let mut params = ParamStore::<f32>::init(enc, 13).unwrap();
    params.set_freeze(true, false);
    let up = upsample(Scheme::InsertMasks, 3);
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_tokens: 400,
        steps: 150,
        upsample: up,
        ed: EdConfig::default(),
        use_ed: false,
        seed: 13,
    };
    fine_tune(&mut params, None, &train, &cfg, |_, _| true);

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (p1, p2) = (dir.path().join("a.natc"), dir.path().join("b.natc"));
    save_checkpoint(&params, &p1).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&p1).map_err(|e| e.to_string())?;
    save_checkpoint(&back, &p2).map_err(|e| e.to_string())?;
    ensure(back == params, || "loaded store differs".into())?;
    let same_bits = params.tensors.iter().zip(&back.tensors).all(|(a, b)| {
        a.data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits())
    });
    ensure(same_bits, || "parameter bits differ".into())?;
    ensure(
        std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap(),
        || "re-saved file differs".into(),
    )?;

    let mut negated = params.clone();
    for t in &mut negated.tensors {
        t.data.iter_mut().for_each(|x| *x = -*x);
    }
    let avg = average_checkpoints(&[params.clone(), negated]).map_err(|e| e.to_string())?;
    ensure(
        avg.tensors.iter().all(|t| t.data.iter().all(|&x| x == 0.0)),
        || "average of θ and −θ is not zero".into(),
    )?;

    // Sources restricted to eight content types; the model's own decodes
    // join the corpus so every token it emits survives pruning.
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    let sources: Vec<Vec<u32>> = (0..200)
        .map(|_| {
            (0..rng.gen_range(3..=8))
                .map(|_| rng.gen_range(6..14))
                .collect()
        })
        .collect();
    let before = greedy_decode_batch(&params, &sources, &up).map_err(|e| e.to_string())?;
    let surviving = ParallelCorpus::new(
        sources
            .iter()
            .zip(&before)
            .map(|(s, h)| SentencePair {
                source: s.clone(),
                target: h.clone(),
            })
            .collect(),
        "decodes",
        13,
    );
    let (pruned_vocab, remap) = prune_vocab(&vocab, &surviving);
    let pruned = params
        .remap_vocab(&remap, pruned_vocab.len())
        .map_err(|e| e.to_string())?;
    let mapped: Vec<Vec<u32>> = sources
        .iter()
        .map(|s| s.iter().map(|&t| remap[t as usize]).collect())
        .collect();
    let after = greedy_decode_batch(&pruned, &mapped, &up).map_err(|e| e.to_string())?;
    let nonempty = before.iter().filter(|h| !h.is_empty()).count();
    ensure(nonempty > 100, || {
        format!("only {nonempty} non-empty decodes")
    })?;
    for (i, (b, a)) in before.iter().zip(&after).enumerate() {
        let expected: Vec<u32> = b.iter().map(|&t| remap[t as usize]).collect();
        ensure(*a == expected, || {
            format!("sentence {i}: {a:?} vs {expected:?}")
        })?;
    }
    Ok(format!(
        "round trip bit-identical; avg(θ, −θ) = 0; vocab {} -> {} with 200 decodes unchanged",
        vocab.len(),
        pruned_vocab.len()
    ))
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let tag = if outcome.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &outcome {
            Ok(d) | Err(d) => d,
        };
        println!(
            "acceptance {id:>2} {tag} {name} [{:.1}s]: {detail}",
            start.elapsed().as_secs_f64()
        );
        results.push((id, name, outcome));
    };

    run(1, "ctc oracle", &c1_ctc_oracle);
    run(2, "ctc gradient", &c2_ctc_gradient);
    run(3, "full-model gradient", &c3_model_gradient);
    run(4, "hungarian exactness", &c4_hungarian);
    run(5, "beam optimality", &c5_beam_optimality);
    run(6, "upsampling", &c6_upsampling);
    run(7, "collapse and alignment set", &c7_collapse_gamma);
    run(8, "copy task end to end", &c8_copy_task);
    let seeds: Vec<ToySeed> = (1..=3).map(toy_setup).collect();
    run(9, "pretrained init beats random init", &|| {
        c9_pretraining(&seeds)
    });
    run(10, "embedding distillation", &|| c10_distillation(&seeds));
    run(11, "n-gram lm", &c11_ngram);
    run(12, "bleu", &c12_bleu);
    run(13, "checkpoints and pruning", &c13_checkpoints);

    let failed: Vec<_> = results.iter().filter(|r| r.2.is_err()).collect();
    println!(
        "acceptance summary: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
