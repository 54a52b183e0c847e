//! Single-layer, single-head causal softmax attention LM. It exists only as
//! the quadratic-cost contrast in the scaling benchmark: the full `n×n`
//! score and weight matrices are materialised on purpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::VOCAB;
use crate::error::{Error, Result};
use crate::numerics::ops::{gemm, softmax_in_place};
use crate::numerics::Tensor;

/// Largest sequence length the baseline will allocate scores for.
pub const MAX_ATTENTION_LEN: usize = 16384;

#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams {
    pub embed: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_lm: Tensor,
}

impl AttnParams {
    pub fn init(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / (d as f64).sqrt();
        AttnParams {
            embed: Tensor::randn([VOCAB, d], 1.0, &mut rng),
            w_q: Tensor::randn([d, d], s, &mut rng),
            w_k: Tensor::randn([d, d], s, &mut rng),
            w_v: Tensor::randn([d, d], s, &mut rng),
            w_lm: Tensor::randn([d, VOCAB], s, &mut rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.embed.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        let d = self.d_model();
        let ok = self.embed.shape() == [VOCAB, d]
            && [&self.w_q, &self.w_k, &self.w_v].iter().all(|w| w.shape() == [d, d])
            && self.w_lm.shape() == [d, VOCAB];
        if ok {
            Ok(())
        } else {
            Err(Error::shape("attn_forward", "inconsistent parameter shapes"))
        }
    }
}

fn project(x: &Tensor, w: &Tensor, n: usize, d: usize) -> Tensor {
    let mut out = Tensor::zeros([n, w.shape()[1]]);
    gemm(n, d, w.shape()[1], x.data(), false, w.data(), false, out.data_mut(), 0.0);
    out
}

/// Causal attention weights `[n×n]` for one sequence given queries and keys.
fn attention_weights(q: &Tensor, k: &Tensor, n: usize, d: usize) -> Tensor {
    let mut scores = Tensor::zeros([n, n]);
    gemm(n, d, n, q.data(), false, k.data(), true, scores.data_mut(), 0.0);
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = Tensor::zeros([n, n]);
    {
        let s = scores.data();
        let w = weights.data_mut();
        for t in 0..n {
            let row = &mut w[t * n..t * n + t + 1];
            for (o, &v) in row.iter_mut().zip(&s[t * n..t * n + t + 1]) {
                *o = v * scale;
            }
            softmax_in_place(row);
        }
    }
    weights
}

/// Logits `[B×n×V]` for `tokens` laid out row-major `[B×n]`.
pub fn attn_forward(tokens: &[usize], batch: usize, p: &AttnParams) -> Result<Tensor> {
    p.validate()?;
    if batch == 0 || tokens.len() % batch != 0 {
        return Err(Error::shape("attn_forward", format!("{} tokens for batch {batch}", tokens.len())));
    }
    let n = tokens.len() / batch;
    if n > MAX_ATTENTION_LEN {
        return Err(Error::Guard {
            n,
            guard: MAX_ATTENTION_LEN,
            floats: n * n,
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= VOCAB) {
        return Err(Error::shape("attn_forward", format!("token id {t} outside vocabulary")));
    }
    let d = p.d_model();
    let mut logits = Tensor::zeros([batch, n, VOCAB]);
    for b in 0..batch {
        let row = &tokens[b * n..(b + 1) * n];
        let ed = p.embed.data();
        let x = Tensor::from_fn([n, d], |i| ed[row[i / d] * d + i % d]);
        let v = project(&x, &p.w_v, n, d);
        let weights = {
            let q = project(&x, &p.w_q, n, d);
            let k = project(&x, &p.w_k, n, d);
            drop(x);
            attention_weights(&q, &k, n, d)
        };
        let mut ctx = Tensor::zeros([n, d]);
        gemm(n, n, d, weights.data(), false, v.data(), false, ctx.data_mut(), 0.0);
        drop(weights);
        let out = &mut logits.data_mut()[b * n * VOCAB..(b + 1) * n * VOCAB];
        gemm(n, d, VOCAB, ctx.data(), false, p.w_lm.data(), false, out, 0.0);
    }
    logits.check_finite("attn_forward")?;
    Ok(logits)
}
