use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use natctc::corpus::{load_parallel, ParallelCorpus, Vocab};
use natctc::model::{
    assemble_batches, average_checkpoints, evaluate, load_checkpoint, mlm_pretrain_step,
    nat_train_step, pretraining_sequences, save_checkpoint, MlmStep, NatExample, ParamStore,
    TrainConfig,
};

use crate::card::{load_model, save_model, save_model_as};
use crate::config::RunConfig;
use crate::Usage;

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

/// Index order for the given epoch; a pure function of `(seed, epoch)` so a
/// resumed run replays exactly the same batches.
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.pretrain.steps = a.steps.unwrap_or(cfg.pretrain.steps);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.data.check_exist()?;
    if cfg.pretrain.steps == 0 || cfg.pretrain.batch_sentences == 0 || !(cfg.pretrain.lr > 0.0) {
        return Err(Usage("pretrain steps, batch_sentences and lr must be positive".into()).into());
    }
    let vocab = Vocab::read(&cfg.data.vocab)?;
    let corpus = load_parallel(&cfg.data.train_src, &cfg.data.train_tgt, &vocab)?;
    let enc = cfg.encoder.to_config(vocab.len());
    let mut params = ParamStore::<f32>::init(enc, cfg.seed)?;
    let sequences: Vec<Vec<u32>> = pretraining_sequences(&corpus.pairs)
        .into_iter()
        .filter(|s| s.len() <= enc.max_positions)
        .collect();
    if sequences.is_empty() {
        return Err(Usage(format!(
            "no training pair fits into {} positions",
            enc.max_positions
        ))
        .into());
    }

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    let log = a.out.join("pretrain.log");
    fs::write(&log, "")?;
    let per_epoch = sequences.len().div_ceil(cfg.pretrain.batch_sentences) as u64;
    for step in 0..cfg.pretrain.steps {
        let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
        let order = epoch_order(sequences.len(), cfg.seed, epoch);
        let b = cfg.pretrain.batch_sentences;
        let batch: Vec<Vec<u32>> = order[k * b..((k + 1) * b).min(order.len())]
            .iter()
            .map(|&i| sequences[i].clone())
            .collect();
        let record = match mlm_pretrain_step(&mut params, &batch, step, cfg.seed, cfg.pretrain.lr)?
        {
            MlmStep::Trained { loss, masked } => format!("{step} {loss:.6} {masked}"),
            MlmStep::NothingMasked => format!("{step} - 0"),
        };
        append_line(&log, &record)?;
        if (step + 1) % cfg.pretrain.log_every.max(1) == 0 {
            println!("pretrain {record}");
        }
    }
    params.reset_optimizer();
    let model = save_model(&a.out, &params, &vocab, &cfg.upsample)?;
    println!("saved {}", model.display());
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Pretrained model to fine-tune.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Distillation teacher (defaults to the pretrained model).
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue an interrupted run in `--out`.
    #[arg(long)]
    resume: bool,
    /// Random initialization instead of a pretrained model.
    #[arg(long)]
    no_pretrain: bool,
    /// Upsampling scheme: it (duplicate tokens) or im (insert masks).
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    ratio: Option<String>,
    /// fr (fixed, truncate) or dr (dynamic, capped by positions).
    #[arg(long)]
    ratio_mode: Option<String>,
    #[arg(long, overrides_with = "no_ed")]
    ed: bool,
    #[arg(long, overrides_with = "ed")]
    no_ed: bool,
    #[arg(long)]
    freeze_embedding: Option<bool>,
    #[arg(long)]
    freeze_projection: Option<bool>,
    /// Replace the training targets, e.g. with distilled outputs.
    #[arg(long)]
    train_tgt: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(p) = &self.init_from {
            t.init_from = Some(p.clone());
        }
        if let Some(p) = &self.teacher {
            t.teacher = Some(p.clone());
        }
        t.random_init |= self.no_pretrain;
        if let Some(v) = self.freeze_embedding {
            t.freeze_embedding = v;
        }
        if let Some(v) = self.freeze_projection {
            t.freeze_projection = v;
        }
        t.steps = self.steps.unwrap_or(t.steps);
        t.lr = self.lr.unwrap_or(t.lr);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
        let u = &mut cfg.upsample;
        u.scheme = self.scheme.clone().unwrap_or(u.scheme.clone());
        u.ratio = self.ratio.clone().unwrap_or(u.ratio.clone());
        u.mode = self.ratio_mode.clone().unwrap_or(u.mode.clone());
        if self.ed {
            cfg.ed.enabled = true;
        }
        if self.no_ed {
            cfg.ed.enabled = false;
        }
        if let Some(p) = &self.train_tgt {
            cfg.data.train_tgt = p.clone();
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
struct BestEntry {
    step: u64,
    loss: f64,
}

/// Progress persisted at every validation so `--resume` can continue.
#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
struct RunState {
    step: u64,
    best: Vec<BestEntry>,
}

fn ckpt_name(step: u64) -> String {
    format!("ckpt-{step}.natc")
}

/// Keeps the lines of `path` whose leading step number is below `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let kept: String = text
        .lines()
        .filter(|l| {
            l.split(' ')
                .next()
                .and_then(|s| s.parse::<u64>().ok())
                .is_some_and(|s| s < step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept)?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    a.apply(&mut cfg);
    cfg.data.check_exist()?;
    let vocab = Vocab::read(&cfg.data.vocab)?;
    let enc = cfg.encoder.to_config(vocab.len());
    enc.validate().map_err(|e| Usage(format!("encoder: {e}")))?;
    let upsample = cfg.upsample.to_config(enc.max_positions)?;
    let tc = TrainConfig {
        lr: cfg.train.lr,
        batch_tokens: cfg.train.batch_tokens,
        steps: cfg.train.steps,
        upsample,
        ed: cfg.ed.to_config(),
        use_ed: cfg.ed.enabled,
        seed: cfg.seed,
    };
    tc.validate().map_err(|e| Usage(e.to_string()))?;
    let train_set = examples(&load_parallel(
        &cfg.data.train_src,
        &cfg.data.train_tgt,
        &vocab,
    )?);
    let valid_set = examples(&load_parallel(
        &cfg.data.valid_src,
        &cfg.data.valid_tgt,
        &vocab,
    )?);

    let init_path = if cfg.train.random_init {
        None
    } else {
        cfg.train.init_from.clone()
    };
    if !cfg.train.random_init && init_path.is_none() {
        return Err(Usage("no pretrained model: pass --init-from or --no-pretrain".into()).into());
    }
    let teacher_path = cfg.train.teacher.clone().or_else(|| init_path.clone());
    let teacher = match (&teacher_path, cfg.ed.enabled) {
        (Some(p), true) => {
            let t = load_model(p)?;
            t.params.expect_config(&enc)?;
            Some(t.params)
        }
        (None, true) => {
            return Err(
                Usage("distillation needs a teacher: pass --teacher or --no-ed".into()).into(),
            )
        }
        (_, false) => None,
    };

    let out = &a.out;
    let state_path = out.join("state.toml");
    let log_path = out.join("train.log");
    let valid_path = out.join("valid.log");
    let effective = cfg.to_toml();
    let (mut params, mut state) = if a.resume {
        let echoed = fs::read_to_string(out.join("config.toml"))
            .with_context(|| format!("no run to resume in {}", out.display()))?;
        // Only the step budget may grow between runs.
        let mut previous = RunConfig::parse(&echoed).map_err(|e| Usage(e.to_string()))?;
        previous.train.steps = cfg.train.steps;
        if previous.to_toml() != effective {
            return Err(Usage(format!(
                "resume mismatch: effective config differs from {}",
                out.join("config.toml").display()
            ))
            .into());
        }
        let state: RunState =
            toml::from_str(&fs::read_to_string(&state_path)?).context("reading run state")?;
        let params = load_checkpoint(out.join("last.natc"))?;
        params.expect_config(&enc)?;
        truncate_log(&log_path, state.step)?;
        truncate_log(&valid_path, state.step + 1)?;
        fs::write(out.join("config.toml"), &effective)?;
        (params, state)
    } else {
        let mut params = match &init_path {
            Some(p) => {
                let m = load_model(p)?;
                m.params.expect_config(&enc)?;
                m.params
            }
            None => ParamStore::<f32>::init(enc, cfg.seed)?,
        };
        params.config.dropout = enc.dropout;
        params.reset_optimizer();
        params.set_freeze(cfg.train.freeze_embedding, cfg.train.freeze_projection);
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        fs::write(out.join("config.toml"), &effective)?;
        fs::write(&log_path, "")?;
        fs::write(&valid_path, "")?;
        (params, RunState::default())
    };

    let lengths: Vec<usize> = train_set
        .iter()
        .map(|e| e.source.len() + e.target.len())
        .collect();
    let batches = assemble_batches(&lengths, tc.batch_tokens);
    let n_batches = batches.len() as u64;
    let ed_cfg = tc.ed;
    let save_state = |params: &ParamStore<f32>, state: &RunState| -> Result<()> {
        save_checkpoint(params, out.join("last.natc"))?;
        fs::write(&state_path, toml::to_string(state)?)?;
        Ok(())
    };

    while state.step < tc.steps {
        let step = state.step;
        let order = epoch_order(batches.len(), tc.seed, step / n_batches);
        let batch: Vec<NatExample> = batches[order[(step % n_batches) as usize]]
            .iter()
            .map(|&i| train_set[i].clone())
            .collect();
        let s = nat_train_step(&mut params, teacher.as_ref(), &batch, step, &tc)?;
        if s.max_frames > enc.max_positions {
            anyhow::bail!(
                "step {step} fed {} frames > {} positions",
                s.max_frames,
                enc.max_positions
            );
        }
        let l_ed = s.l_ed.map_or("-".to_string(), |v| format!("{v:.6}"));
        append_line(
            &log_path,
            &format!(
                "{step} {:.6} {l_ed} {} {} {}",
                s.l_ctc, s.lambda, s.skipped, s.max_frames
            ),
        )?;
        state.step += 1;

        if state.step % cfg.train.valid_every.max(1) == 0 || state.step == tc.steps {
            let ev = evaluate(
                &params,
                teacher
                    .as_ref()
                    .filter(|_| tc.lambda(step) == 1)
                    .map(|t| (t, &ed_cfg)),
                &valid_set,
                &tc.upsample,
            )?;
            let ed = ev.ed_loss.map_or("-".to_string(), |v| format!("{v:.6}"));
            let record = format!(
                "{} {:.6} {ed} {:.6}",
                state.step, ev.ctc_loss, ev.sequence_accuracy
            );
            append_line(&valid_path, &record)?;
            println!("valid {record}");
            let keep = cfg.train.keep_best.max(1);
            state.best.push(BestEntry {
                step: state.step,
                loss: ev.ctc_loss,
            });
            state
                .best
                .sort_by(|x, y| x.loss.total_cmp(&y.loss).then(x.step.cmp(&y.step)));
            if state
                .best
                .iter()
                .position(|b| b.step == state.step)
                .is_some_and(|i| i < keep)
            {
                save_checkpoint(&params, out.join(ckpt_name(state.step)))?;
            }
            for evicted in state.best.drain(keep.min(state.best.len())..) {
                let _ = fs::remove_file(out.join(ckpt_name(evicted.step)));
            }
            save_state(&params, &state)?;
        }
    }

    let stores = state
        .best
        .iter()
        .map(|b| load_checkpoint(out.join(ckpt_name(b.step))))
        .collect::<natctc::Result<Vec<_>>>()?;
    let averaged = average_checkpoints(&stores)?;
    let model = save_model(out, &averaged, &vocab, &cfg.upsample)?;
    let ev = evaluate(&averaged, None, &valid_set, &tc.upsample)?;
    println!(
        "averaged {} checkpoints: valid_ctc {:.6} accuracy {:.6} -> {}",
        stores.len(),
        ev.ctc_loss,
        ev.sequence_accuracy,
        model.display()
    );
    // Averaging far-apart checkpoints of a short run can hurt; keep the
    // single best one alongside.
    let best = save_model_as(out, "best", &stores[0], &vocab, &cfg.upsample)?;
    let ev = evaluate(&stores[0], None, &valid_set, &tc.upsample)?;
    println!(
        "best checkpoint step {}: valid_ctc {:.6} accuracy {:.6} -> {}",
        state.best[0].step,
        ev.ctc_loss,
        ev.sequence_accuracy,
        best.display()
    );
    Ok(())
}
