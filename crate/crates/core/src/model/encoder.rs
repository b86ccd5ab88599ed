//! Pre-norm bidirectional encoder: forward pass with cached activations and
//! the matching reverse-mode pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::*;
use super::{Gradients, ParamStore, Slot};
use crate::error::{Error, Result};

struct LayerCache<F> {
    input: Vec<F>,
    ln1_xhat: Vec<F>,
    ln1_rstd: Vec<F>,
    ln1_out: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// Attention probabilities, `heads × T × T`.
    probs: Vec<F>,
    context: Vec<F>,
    attn_drop: Option<Vec<F>>,
    ln2_xhat: Vec<F>,
    ln2_rstd: Vec<F>,
    ln2_out: Vec<F>,
    ffn_pre: Vec<F>,
    ffn_act: Vec<F>,
    ffn_drop: Option<Vec<F>>,
}

/// Activations retained for [`backward`].
pub struct ForwardCache<F> {
    tokens: Vec<u32>,
    embed_drop: Option<Vec<F>>,
    layers: Vec<LayerCache<F>>,
    final_input: Vec<F>,
    final_xhat: Vec<F>,
    final_rstd: Vec<F>,
    final_out: Vec<F>,
}

pub struct ForwardOutput<F> {
    /// One `T × d` state per layer; the last entry is the layer-normalized
    /// output that feeds the projection.
    pub hidden: Vec<Vec<F>>,
    /// `T × V` unnormalized scores.
    pub logits: Vec<F>,
    pub cache: ForwardCache<F>,
}

impl<F> ForwardOutput<F> {
    pub fn last_hidden(&self) -> &[F] {
        self.hidden.last().expect("encoder has at least one layer")
    }

    pub fn frames(&self) -> usize {
        self.cache.tokens.len()
    }
}

fn dropout_mask<F: Scalar>(rng: &mut Option<ChaCha8Rng>, p: f64, n: usize) -> Option<Vec<F>> {
    let rng = rng.as_mut()?;
    let keep = F::of(1.0 / (1.0 - p));
    Some(
        (0..n)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect(),
    )
}

fn apply_mask<F: Scalar>(x: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(a, &b)| *a = *a * b);
    }
}

pub fn forward<F: Scalar>(
    params: &ParamStore<F>,
    tokens: &[u32],
    train_mode: bool,
    dropout_seed: u64,
) -> Result<ForwardOutput<F>> {
    let cfg = &params.config;
    let t_len = tokens.len();
    let (d, ff, v_size, heads) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
    if t_len == 0 {
        return Err(Error::invalid("empty input sequence"));
    }
    if t_len > cfg.max_positions {
        return Err(Error::invalid(format!(
            "sequence length {t_len} exceeds {} positions",
            cfg.max_positions
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v_size) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            size: v_size,
        });
    }
    let mut rng =
        (train_mode && cfg.dropout > 0.0).then(|| ChaCha8Rng::seed_from_u64(dropout_seed));
    let p = cfg.dropout;

    let emb = params.get(Slot::TokenEmbedding);
    let pos = params.get(Slot::PositionEmbedding);
    let mut x = vec![F::zero(); t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let tok = tok as usize;
        for j in 0..d {
            x[t * d + j] = emb[tok * d + j] + pos[t * d + j];
        }
    }
    let embed_drop = dropout_mask(&mut rng, p, x.len());
    apply_mask(&mut x, &embed_drop);

    let dh = cfg.head_dim();
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut hidden = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let (ln1_out, ln1_xhat, ln1_rstd) = layer_norm(
            &x,
            params.get(Slot::Ln1Gain(l)),
            params.get(Slot::Ln1Bias(l)),
            d,
        );
        let q = matmul(
            &ln1_out,
            params.get(Slot::Wq(l)),
            Some(params.get(Slot::Bq(l))),
            t_len,
            d,
            d,
        );
        let k = matmul(
            &ln1_out,
            params.get(Slot::Wk(l)),
            Some(params.get(Slot::Bk(l))),
            t_len,
            d,
            d,
        );
        let v = matmul(
            &ln1_out,
            params.get(Slot::Wv(l)),
            Some(params.get(Slot::Bv(l))),
            t_len,
            d,
            d,
        );

        let mut probs = vec![F::zero(); heads * t_len * t_len];
        let mut context = vec![F::zero(); t_len * d];
        for h in 0..heads {
            let off = h * dh;
            let ph = &mut probs[h * t_len * t_len..(h + 1) * t_len * t_len];
            for i in 0..t_len {
                let qi = &q[i * d + off..i * d + off + dh];
                for j in 0..t_len {
                    ph[i * t_len + j] = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                }
            }
            softmax_rows(ph, t_len);
            for i in 0..t_len {
                for j in 0..t_len {
                    let w = ph[i * t_len + j];
                    for c in 0..dh {
                        context[i * d + off + c] =
                            context[i * d + off + c] + w * v[j * d + off + c];
                    }
                }
            }
        }
        let mut attn = matmul(
            &context,
            params.get(Slot::Wo(l)),
            Some(params.get(Slot::Bo(l))),
            t_len,
            d,
            d,
        );
        let attn_drop = dropout_mask(&mut rng, p, attn.len());
        apply_mask(&mut attn, &attn_drop);
        let mut mid = x.clone();
        add_assign(&mut mid, &attn);

        let (ln2_out, ln2_xhat, ln2_rstd) = layer_norm(
            &mid,
            params.get(Slot::Ln2Gain(l)),
            params.get(Slot::Ln2Bias(l)),
            d,
        );
        let ffn_pre = matmul(
            &ln2_out,
            params.get(Slot::W1(l)),
            Some(params.get(Slot::B1(l))),
            t_len,
            d,
            ff,
        );
        let ffn_act: Vec<F> = ffn_pre.iter().map(|&u| gelu(u)).collect();
        let mut ffn_out = matmul(
            &ffn_act,
            params.get(Slot::W2(l)),
            Some(params.get(Slot::B2(l))),
            t_len,
            ff,
            d,
        );
        let ffn_drop = dropout_mask(&mut rng, p, ffn_out.len());
        apply_mask(&mut ffn_out, &ffn_drop);
        let mut out = mid.clone();
        add_assign(&mut out, &ffn_out);

        layers.push(LayerCache {
            input: x,
            ln1_xhat,
            ln1_rstd,
            ln1_out,
            q,
            k,
            v,
            probs,
            context,
            attn_drop,
            ln2_xhat,
            ln2_rstd,
            ln2_out,
            ffn_pre,
            ffn_act,
            ffn_drop,
        });
        if l + 1 < cfg.n_layers {
            hidden.push(out.clone());
        }
        x = out;
    }

    let (final_out, final_xhat, final_rstd) = layer_norm(
        &x,
        params.get(Slot::FinalLnGain),
        params.get(Slot::FinalLnBias),
        d,
    );
    let mut logits = matmul_bt(&final_out, params.get(Slot::Projection), t_len, d, v_size);
    let bias = params.get(Slot::ProjectionBias);
    for row in logits.chunks_mut(v_size) {
        add_assign(row, bias);
    }
    hidden.push(final_out.clone());

    Ok(ForwardOutput {
        hidden,
        logits,
        cache: ForwardCache {
            tokens: tokens.to_vec(),
            embed_drop,
            layers,
            final_input: x,
            final_xhat,
            final_rstd,
            final_out,
        },
    })
}

/// Gradients of `Σ d_logits ⊙ logits + Σ d_hidden ⊙ last_hidden` with
/// respect to every tensor (frozen ones included).
pub fn backward<F: Scalar>(
    params: &ParamStore<F>,
    cache: &ForwardCache<F>,
    d_logits: &[F],
    d_hidden: Option<&[F]>,
) -> Result<Gradients<F>> {
    let cfg = &params.config;
    let t_len = cache.tokens.len();
    let (d, ff, v_size, heads) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_heads);
    if cache.layers.len() != cfg.n_layers || cache.final_out.len() != t_len * d {
        return Err(Error::Shape(
            "forward cache does not match encoder config".into(),
        ));
    }
    if d_logits.len() != t_len * v_size {
        return Err(Error::Shape(format!(
            "d_logits has {} entries, expected {}",
            d_logits.len(),
            t_len * v_size
        )));
    }
    if let Some(dh) = d_hidden {
        if dh.len() != t_len * d {
            return Err(Error::Shape(format!(
                "d_hidden has {} entries, expected {}",
                dh.len(),
                t_len * d
            )));
        }
    }
    let n = cfg.n_layers;
    let mut g = Gradients::zeros_like(params);
    let idx = |s: Slot| s.index(n);

    add_matmul_at(
        &mut g.0[idx(Slot::Projection)],
        d_logits,
        &cache.final_out,
        t_len,
        v_size,
        d,
    );
    add_column_sums(&mut g.0[idx(Slot::ProjectionBias)], d_logits, v_size);
    let mut dz = matmul(
        d_logits,
        params.get(Slot::Projection),
        None,
        t_len,
        v_size,
        d,
    );
    if let Some(dh) = d_hidden {
        add_assign(&mut dz, dh);
    }
    let mut dx = {
        let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
        let dx = layer_norm_backward(
            &dz,
            &cache.final_xhat,
            &cache.final_rstd,
            params.get(Slot::FinalLnGain),
            &mut dg,
            &mut db,
            d,
        );
        add_assign(&mut g.0[idx(Slot::FinalLnGain)], &dg);
        add_assign(&mut g.0[idx(Slot::FinalLnBias)], &db);
        dx
    };
    debug_assert_eq!(cache.final_input.len(), dx.len());

    let dh = cfg.head_dim();
    let scale = F::of(1.0 / (dh as f64).sqrt());
    for l in (0..n).rev() {
        let c = &cache.layers[l];
        // FFN branch: out = mid + drop(W2·gelu(W1·ln2(mid)))
        let mut d_ffn_out = dx.clone();
        apply_mask(&mut d_ffn_out, &c.ffn_drop);
        add_matmul_at(
            &mut g.0[idx(Slot::W2(l))],
            &c.ffn_act,
            &d_ffn_out,
            t_len,
            ff,
            d,
        );
        add_column_sums(&mut g.0[idx(Slot::B2(l))], &d_ffn_out, d);
        let mut d_act = matmul_bt(&d_ffn_out, params.get(Slot::W2(l)), t_len, d, ff);
        d_act
            .iter_mut()
            .zip(&c.ffn_pre)
            .for_each(|(da, &u)| *da = *da * gelu_grad(u));
        add_matmul_at(&mut g.0[idx(Slot::W1(l))], &c.ln2_out, &d_act, t_len, d, ff);
        add_column_sums(&mut g.0[idx(Slot::B1(l))], &d_act, ff);
        let d_ln2 = matmul_bt(&d_act, params.get(Slot::W1(l)), t_len, ff, d);
        let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
        let d_mid_ln = layer_norm_backward(
            &d_ln2,
            &c.ln2_xhat,
            &c.ln2_rstd,
            params.get(Slot::Ln2Gain(l)),
            &mut dg,
            &mut db,
            d,
        );
        add_assign(&mut g.0[idx(Slot::Ln2Gain(l))], &dg);
        add_assign(&mut g.0[idx(Slot::Ln2Bias(l))], &db);
        let mut d_mid = dx;
        add_assign(&mut d_mid, &d_mid_ln);

        // attention branch: mid = input + drop(Wo·attn(ln1(input)))
        let mut d_attn = d_mid.clone();
        apply_mask(&mut d_attn, &c.attn_drop);
        add_matmul_at(&mut g.0[idx(Slot::Wo(l))], &c.context, &d_attn, t_len, d, d);
        add_column_sums(&mut g.0[idx(Slot::Bo(l))], &d_attn, d);
        let d_ctx = matmul_bt(&d_attn, params.get(Slot::Wo(l)), t_len, d, d);

        let mut dq = vec![F::zero(); t_len * d];
        let mut dk = vec![F::zero(); t_len * d];
        let mut dv = vec![F::zero(); t_len * d];
        let mut dp = vec![F::zero(); t_len];
        for h in 0..heads {
            let off = h * dh;
            let ph = &c.probs[h * t_len * t_len..(h + 1) * t_len * t_len];
            for i in 0..t_len {
                let dci = &d_ctx[i * d + off..i * d + off + dh];
                let prow = &ph[i * t_len..(i + 1) * t_len];
                for j in 0..t_len {
                    dp[j] = dot(dci, &c.v[j * d + off..j * d + off + dh]);
                    for cc in 0..dh {
                        dv[j * d + off + cc] = dv[j * d + off + cc] + prow[j] * dci[cc];
                    }
                }
                let inner: F = prow.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                for j in 0..t_len {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    if ds == F::zero() {
                        continue;
                    }
                    for cc in 0..dh {
                        dq[i * d + off + cc] = dq[i * d + off + cc] + ds * c.k[j * d + off + cc];
                        dk[j * d + off + cc] = dk[j * d + off + cc] + ds * c.q[i * d + off + cc];
                    }
                }
            }
        }
        let mut d_ln1 = vec![F::zero(); t_len * d];
        for (dproj, w, b) in [
            (&dq, Slot::Wq(l), Slot::Bq(l)),
            (&dk, Slot::Wk(l), Slot::Bk(l)),
            (&dv, Slot::Wv(l), Slot::Bv(l)),
        ] {
            add_matmul_at(&mut g.0[idx(w)], &c.ln1_out, dproj, t_len, d, d);
            add_column_sums(&mut g.0[idx(b)], dproj, d);
            add_assign(&mut d_ln1, &matmul_bt(dproj, params.get(w), t_len, d, d));
        }
        let (mut dg, mut db) = (vec![F::zero(); d], vec![F::zero(); d]);
        let d_in_ln = layer_norm_backward(
            &d_ln1,
            &c.ln1_xhat,
            &c.ln1_rstd,
            params.get(Slot::Ln1Gain(l)),
            &mut dg,
            &mut db,
            d,
        );
        add_assign(&mut g.0[idx(Slot::Ln1Gain(l))], &dg);
        add_assign(&mut g.0[idx(Slot::Ln1Bias(l))], &db);
        dx = d_mid;
        add_assign(&mut dx, &d_in_ln);
        debug_assert_eq!(c.input.len(), dx.len());
    }

    apply_mask(&mut dx, &cache.embed_drop);
    let (te, pe) = (idx(Slot::TokenEmbedding), idx(Slot::PositionEmbedding));
    for (t, &tok) in cache.tokens.iter().enumerate() {
        let row = &dx[t * d..(t + 1) * d];
        add_assign(&mut g.0[te][tok as usize * d..(tok as usize + 1) * d], row);
        add_assign(&mut g.0[pe][t * d..(t + 1) * d], row);
    }
    Ok(g)
}
