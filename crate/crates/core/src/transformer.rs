//! Multi-head self-attention and the post-norm transformer layer stack.

use crate::error::{Error, Result};
use crate::numerics::ops::dropout_mask;
use crate::numerics::{lit, Mode, Prng, Scalar, Tape, Var};
use crate::params::{Init, LayerNorm, Linear, ParamStore};

/// Query, key, value and output projections; heads are contiguous column
/// blocks of width `hidden / heads`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, hidden: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(Error::invalid(format!("hidden size {hidden} is not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(store, init, &format!("{name}.query"), hidden, hidden),
            k: Linear::new(store, init, &format!("{name}.key"), hidden, hidden),
            v: Linear::new(store, init, &format!("{name}.value"), hidden, hidden),
            o: Linear::new(store, init, &format!("{name}.output"), hidden, hidden),
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.q.d_out / self.heads
    }
}

/// Self-attention over `h[S, H]`; `mask[j] == false` hides key `j` from
/// every query. Returns the projected output and each head's `[S, S]`
/// attention probabilities.
pub fn attention_with_probs<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    attn: &Attention,
    h: Var,
    mask: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let s = tape.value(h).rows();
    if mask.len() != s {
        return Err(Error::shape("attention mask", &[s], &[mask.len()]));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("attention mask hides every slot"));
    }
    let dk = attn.head_dim();
    let scale = lit::<T>(1.0 / (dk as f64).sqrt());
    let q = attn.q.forward(tape, store, h)?;
    let k = attn.k.forward(tape, store, h)?;
    let v = attn.v.forward(tape, store, h)?;
    let mut heads = Vec::with_capacity(attn.heads);
    let mut probs = Vec::with_capacity(attn.heads);
    for i in 0..attn.heads {
        let qi = tape.slice_cols(q, i * dk, dk)?;
        let ki = tape.slice_cols(k, i * dk, dk)?;
        let vi = tape.slice_cols(v, i * dk, dk)?;
        let scores = tape.matmul_nt(qi, ki)?;
        let scores = tape.scale(scores, scale)?;
        let p = tape.softmax(scores, Some(mask))?;
        heads.push(tape.matmul(p, vi)?);
        probs.push(p);
    }
    let joined = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    Ok((attn.o.forward(tape, store, joined)?, probs))
}

pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    attn: &Attention,
    h: Var,
    mask: &[bool],
) -> Result<Var> {
    attention_with_probs(tape, store, attn, h, mask).map(|(out, _)| out)
}

/// Inverted dropout on the tape; the identity outside training.
pub fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, p: f64, mode: Mode, rng: &mut Prng) -> Result<Var> {
    match dropout_mask::<T>(tape.value(x).numel(), p, mode, rng)? {
        Some(mask) => tape.mul_const(x, mask),
        None => Ok(x),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub attn: Attention,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        hidden: usize,
        heads: usize,
        ffn_mult: usize,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            attn: Attention::new(store, init, &format!("{name}.attn"), hidden, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), hidden),
            ffn_in: Linear::new(store, init, &format!("{name}.ffn_in"), hidden, ffn_mult * hidden),
            ffn_out: Linear::new(store, init, &format!("{name}.ffn_out"), ffn_mult * hidden, hidden),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), hidden),
        })
    }

    pub fn numel(&self) -> usize {
        let a = &self.attn;
        let h = a.q.d_out;
        a.q.numel() + a.k.numel() + a.v.numel() + a.o.numel() + self.ffn_in.numel() + self.ffn_out.numel() + 4 * h
    }

    /// `u = norm1(h + drop(attn(h)))`, `out = norm2(u + drop(ffn_out(gelu(ffn_in(u)))))`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        mask: &[bool],
        stochastic: &mut Stochastic<'_>,
    ) -> Result<Var> {
        let a = multi_head_attention(tape, store, &self.attn, h, mask)?;
        let a = stochastic.dropout(tape, a)?;
        let r = tape.add(h, a)?;
        let u = self.norm1.forward(tape, store, r)?;
        let f = self.ffn_in.forward(tape, store, u)?;
        let f = tape.gelu(f)?;
        let f = self.ffn_out.forward(tape, store, f)?;
        let f = stochastic.dropout(tape, f)?;
        let r = tape.add(u, f)?;
        self.norm2.forward(tape, store, r)
    }
}

/// Dropout rate, mode and random stream threaded through a forward pass.
#[derive(Debug)]
pub struct Stochastic<'a> {
    pub p: f64,
    pub mode: Mode,
    pub rng: &'a mut Prng,
}

impl Stochastic<'_> {
    pub fn dropout<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        dropout(tape, x, self.p, self.mode, self.rng)
    }
}

pub fn run_layers<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layers: &[TransformerLayer],
    mut h: Var,
    mask: &[bool],
    stochastic: &mut Stochastic<'_>,
) -> Result<Var> {
    for layer in layers {
        h = layer.forward(tape, store, h, mask, stochastic)?;
    }
    Ok(h)
}

/// Early fusion: the sequence `[text; target; contexts]` through every layer.
/// Text occupies slots `0..T`, the target slot `T`, contexts `T+1..`.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    text: Var,
    image: Var,
    layers: &[TransformerLayer],
    mask: &[bool],
    stochastic: &mut Stochastic<'_>,
) -> Result<Var> {
    let h = tape.concat_rows(&[text, image])?;
    run_layers(tape, store, layers, h, mask, stochastic)
}

/// Late fusion: stack A encodes `[text; contexts]` and is mean-pooled over
/// attendable slots; stack B processes the lone target embedding. Returns
/// the two `[1, H]` summaries.
#[allow(clippy::too_many_arguments)]
pub fn late_fusion_encode<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    text: Var,
    contexts: Var,
    target: Var,
    layers_a: &[TransformerLayer],
    layers_b: &[TransformerLayer],
    mask_a: &[bool],
    stochastic: &mut Stochastic<'_>,
) -> Result<(Var, Var)> {
    let h = tape.concat_rows(&[text, contexts])?;
    let a = run_layers(tape, store, layers_a, h, mask_a, stochastic)?;
    let live: Vec<usize> = (0..mask_a.len()).filter(|&i| mask_a[i]).collect();
    let pooled_a = tape.mean_rows(a, &live)?;
    let pooled_b = run_layers(tape, store, layers_b, target, &[true], stochastic)?;
    Ok((pooled_a, pooled_b))
}
