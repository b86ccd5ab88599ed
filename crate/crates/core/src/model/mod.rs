//! Toy transformer encoder with hand-written backpropagation, its
//! parameter store and optimizer, checkpointing, and the training steps
//! (masked-LM pretraining and CTC + embedding-distillation fine-tuning).

mod checkpoint;
mod encoder;
pub mod kernels;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{backward, forward, ForwardCache, ForwardOutput};
pub use kernels::Scalar;
pub use train::{
    assemble_batches, evaluate, greedy_decode_batch, lattice_from_logits, mask_sentence,
    mlm_gradients, mlm_pretrain_step, nat_gradients, nat_train_step, pretraining_sequences,
    Evaluation, MaskingOutcome, MlmStep, NatExample, NatStep, TrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Maximum number of positions (size of the position table).
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad(format!("degenerate encoder config {self:?}"));
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            ));
        }
        if self.max_positions == 0 || self.vocab_size == 0 {
            return bad("empty position table or vocabulary".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Role of each tensor; the order is the storage order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    TokenEmbedding,
    PositionEmbedding,
    Ln1Gain(usize),
    Ln1Bias(usize),
    Wq(usize),
    Bq(usize),
    Wk(usize),
    Bk(usize),
    Wv(usize),
    Bv(usize),
    Wo(usize),
    Bo(usize),
    Ln2Gain(usize),
    Ln2Bias(usize),
    W1(usize),
    B1(usize),
    W2(usize),
    B2(usize),
    FinalLnGain,
    FinalLnBias,
    Projection,
    ProjectionBias,
}

const PER_LAYER: usize = 16;

impl Slot {
    pub fn index(self, n_layers: usize) -> usize {
        use Slot::*;
        let layer = |l: usize, k: usize| 2 + l * PER_LAYER + k;
        match self {
            TokenEmbedding => 0,
            PositionEmbedding => 1,
            Ln1Gain(l) => layer(l, 0),
            Ln1Bias(l) => layer(l, 1),
            Wq(l) => layer(l, 2),
            Bq(l) => layer(l, 3),
            Wk(l) => layer(l, 4),
            Bk(l) => layer(l, 5),
            Wv(l) => layer(l, 6),
            Bv(l) => layer(l, 7),
            Wo(l) => layer(l, 8),
            Bo(l) => layer(l, 9),
            Ln2Gain(l) => layer(l, 10),
            Ln2Bias(l) => layer(l, 11),
            W1(l) => layer(l, 12),
            B1(l) => layer(l, 13),
            W2(l) => layer(l, 14),
            B2(l) => layer(l, 15),
            FinalLnGain => 2 + n_layers * PER_LAYER,
            FinalLnBias => 3 + n_layers * PER_LAYER,
            Projection => 4 + n_layers * PER_LAYER,
            ProjectionBias => 5 + n_layers * PER_LAYER,
        }
    }
}

fn tensor_specs(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut specs = vec![
        ("embed.token".to_string(), vec![v, d]),
        ("embed.position".to_string(), vec![cfg.max_positions, d]),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        specs.extend([
            (p("ln1.gain"), vec![d]),
            (p("ln1.bias"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("ln2.gain"), vec![d]),
            (p("ln2.bias"), vec![d]),
            (p("ffn.w1"), vec![d, ff]),
            (p("ffn.b1"), vec![ff]),
            (p("ffn.w2"), vec![ff, d]),
            (p("ffn.b2"), vec![d]),
        ]);
    }
    specs.extend([
        ("final_ln.gain".to_string(), vec![d]),
        ("final_ln.bias".to_string(), vec![d]),
        ("proj.weight".to_string(), vec![v, d]),
        ("proj.bias".to_string(), vec![v]),
    ]);
    specs
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub frozen: bool,
}

/// Encoder parameters, freeze flags and Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    pub config: EncoderConfig,
    pub tensors: Vec<Tensor<F>>,
    pub adam_m: Vec<Vec<F>>,
    pub adam_v: Vec<Vec<F>>,
    pub step: u64,
}

/// One gradient buffer per tensor, in storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<F>(pub Vec<Vec<F>>);

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(p: &ParamStore<F>) -> Self {
        Gradients(
            p.tensors
                .iter()
                .map(|t| vec![F::zero(); t.data.len()])
                .collect(),
        )
    }

    pub fn add(&mut self, other: &Gradients<F>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            kernels::add_assign(a, b);
        }
    }

    pub fn scale(&mut self, s: F) {
        self.0.iter_mut().flatten().for_each(|g| *g = *g * s);
    }
}

impl<F: Scalar> ParamStore<F> {
    /// Deterministic initialization: uniform `±1/sqrt(fan_in)` for matrices,
    /// `N`-free small uniform for embeddings, zeros for biases, unit layer-norm
    /// gains.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors: Vec<Tensor<F>> = tensor_specs(&config)
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".gain") {
                    vec![F::one(); n]
                } else if shape.len() == 1 {
                    vec![F::zero(); n]
                } else {
                    let bound = if name.starts_with("embed.") {
                        0.5
                    } else {
                        1.0 / (shape[1] as f64).sqrt()
                    };
                    let bound = if name.starts_with("layers.") {
                        1.0 / (shape[0] as f64).sqrt()
                    } else {
                        bound
                    };
                    (0..n)
                        .map(|_| F::of(rng.gen_range(-bound..bound)))
                        .collect()
                };
                Tensor {
                    name,
                    shape,
                    data,
                    frozen: false,
                }
            })
            .collect();
        Ok(Self::with_fresh_optimizer(config, tensors))
    }

    fn with_fresh_optimizer(config: EncoderConfig, tensors: Vec<Tensor<F>>) -> Self {
        let zeros: Vec<Vec<F>> = tensors
            .iter()
            .map(|t| vec![F::zero(); t.data.len()])
            .collect();
        ParamStore {
            config,
            adam_m: zeros.clone(),
            adam_v: zeros,
            tensors,
            step: 0,
        }
    }

    pub fn get(&self, slot: Slot) -> &[F] {
        &self.tensors[slot.index(self.config.n_layers)].data
    }

    pub fn tensor(&self, slot: Slot) -> &Tensor<F> {
        &self.tensors[slot.index(self.config.n_layers)]
    }

    pub fn tensor_mut(&mut self, slot: Slot) -> &mut Tensor<F> {
        let n = self.config.n_layers;
        &mut self.tensors[slot.index(n)]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn set_freeze(&mut self, embedding: bool, projection: bool) {
        self.tensor_mut(Slot::TokenEmbedding).frozen = embedding;
        self.tensor_mut(Slot::Projection).frozen = projection;
        self.tensor_mut(Slot::ProjectionBias).frozen = projection;
    }

    /// Converts the element type (e.g. to `f64` for gradient checks).
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let conv = |v: &Vec<F>| v.iter().map(|x| G::of(x.wide())).collect::<Vec<G>>();
        ParamStore {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: conv(&t.data),
                    frozen: t.frozen,
                })
                .collect(),
            adam_m: self.adam_m.iter().map(conv).collect(),
            adam_v: self.adam_v.iter().map(conv).collect(),
            step: self.step,
        }
    }

    pub fn reset_optimizer(&mut self) {
        self.adam_m
            .iter_mut()
            .chain(self.adam_v.iter_mut())
            .flatten()
            .for_each(|x| *x = F::zero());
        self.step = 0;
    }

    fn check_shapes(&self, other: &ParamStore<F>) -> Result<()> {
        if self.config != other.config || self.tensors.len() != other.tensors.len() {
            return Err(Error::Shape(
                "parameter stores have different configurations".into(),
            ));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} vs {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Gathers token-embedding and projection rows through `remap`
    /// (old id → new id) for a vocabulary of `new_size` tokens.
    pub fn remap_vocab(&self, remap: &[u32], new_size: usize) -> Result<ParamStore<F>> {
        if remap.len() != self.config.vocab_size {
            return Err(Error::Shape(format!(
                "remap has {} entries for vocabulary {}",
                remap.len(),
                self.config.vocab_size
            )));
        }
        if let Some(&bad) = remap.iter().find(|&&r| r as usize >= new_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: new_size,
            });
        }
        // the first old id mapping to each new id is its preimage
        let mut preimage = vec![None; new_size];
        for (old, &new) in remap.iter().enumerate() {
            preimage[new as usize].get_or_insert(old);
        }
        let preimage: Vec<usize> = preimage
            .into_iter()
            .enumerate()
            .map(|(new, p)| {
                p.ok_or_else(|| Error::invalid(format!("new id {new} has no preimage")))
            })
            .collect::<Result<_>>()?;

        let mut config = self.config;
        config.vocab_size = new_size;
        let d = config.d_model;
        let mut tensors = self.tensors.clone();
        for slot in [Slot::TokenEmbedding, Slot::Projection, Slot::ProjectionBias] {
            let t = &mut tensors[slot.index(config.n_layers)];
            let width = if slot == Slot::ProjectionBias { 1 } else { d };
            t.data = preimage
                .iter()
                .flat_map(|&o| t.data[o * width..(o + 1) * width].to_vec())
                .collect();
            t.shape[0] = new_size;
        }
        let mut out = Self::with_fresh_optimizer(config, tensors);
        out.step = self.step;
        Ok(out)
    }

    /// One bias-corrected Adam step. Frozen tensors are left untouched.
    pub fn adam_update(&mut self, grads: &Gradients<F>, lr: f64) -> Result<()> {
        self.adam_update_with(grads, lr, 0.9, 0.999, 1e-8)
    }

    pub fn adam_update_with(
        &mut self,
        grads: &Gradients<F>,
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        if grads.0.len() != self.tensors.len() {
            return Err(Error::Shape("gradient count does not match tensors".into()));
        }
        for (t, g) in self.tensors.iter().zip(&grads.0) {
            if g.len() != t.data.len() {
                return Err(Error::Shape(format!(
                    "gradient for {} has {} entries",
                    t.name,
                    g.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", t.name)));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (F::of(beta1), F::of(beta2));
        let (one_b1, one_b2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
        let step_size = F::of(lr / bc1);
        let inv_bc2_sqrt = F::of(1.0 / bc2.sqrt());
        let eps = F::of(eps);
        for (((t, g), m), v) in self
            .tensors
            .iter_mut()
            .zip(&grads.0)
            .zip(&mut self.adam_m)
            .zip(&mut self.adam_v)
        {
            if t.frozen {
                continue;
            }
            for (((p, &g), m), v) in t.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p = *p - step_size * *m / ((*v).sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Element-wise mean of parameter stores; optimizer state is reset.
pub fn average_checkpoints<F: Scalar>(stores: &[ParamStore<F>]) -> Result<ParamStore<F>> {
    let first = stores
        .first()
        .ok_or_else(|| Error::invalid("no checkpoints to average"))?;
    for s in &stores[1..] {
        first.check_shapes(s)?;
    }
    let k = stores.len() as f64;
    let mut out = first.clone();
    for (i, t) in out.tensors.iter_mut().enumerate() {
        for (j, x) in t.data.iter_mut().enumerate() {
            let sum: f64 = stores.iter().map(|s| s.tensors[i].data[j].wide()).sum();
            *x = F::of(sum / k);
        }
    }
    out.reset_optimizer();
    Ok(out)
}
