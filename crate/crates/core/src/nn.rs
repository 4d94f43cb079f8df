//! Parameterized building blocks shared by the fusion front-ends, the
//! backbone and the head.
//!
//! Modules only hold parameter names; values live in a [`ParamStore`] and are
//! bound to the tape on demand through a [`Ctx`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Ctx, ParamStore, Real, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Registers freshly initialized parameters.
pub struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn add(&mut self, name: &str, t: Tensor<f32>) -> Result<String> {
        self.store.insert(name, t)?;
        Ok(name.to_string())
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<String> {
        let t = Tensor::uniform(shape.to_vec(), bound, self.rng);
        self.add(name, t)
    }

    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64) -> Result<String> {
        let t = Tensor::randn(shape.to_vec(), std, self.rng);
        self.add(name, t)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::uniform([in_dim, out_dim], bound, init.rng);
        let weight = init.add(&join(prefix, "weight"), w)?;
        let bias = if bias {
            Some(init.add(&join(prefix, "bias"), Tensor::zeros([out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(&self.weight)?;
        let mut y = cx.g.matmul(x, w)?;
        if let Some(b) = &self.bias {
            let b = cx.param(b)?;
            y = cx.g.add(y, b)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.add(&join(prefix, "gamma"), Tensor::full([dim], 1.0))?,
            beta: init.add(&join(prefix, "beta"), Tensor::zeros([dim]))?,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = cx.param(&self.gamma)?;
        let b = cx.param(&self.beta)?;
        cx.g.layer_norm(x, g, b, T::c(LN_EPS))
    }
}

/// `softmax(q k^T / sqrt(d_h) + mask) v` for `q: [B, h, n, d_h]`,
/// `k, v: [B, h, m, d_h]`. Returns the output and the attention weights
/// `[B, h, n, m]`.
pub fn scaled_dot_attention<T: Real>(
    cx: &mut Ctx<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<(Var, Var)> {
    let dh = *cx.g.shape(q).last().unwrap_or(&1);
    let kt = cx.g.transpose(k)?;
    let logits = cx.g.matmul(q, kt)?;
    let mut logits = cx.g.scale(logits, T::c(1.0 / (dh as f64).sqrt()));
    if let Some(m) = mask {
        logits = cx.g.add(logits, m)?;
    }
    let axis = cx.g.shape(logits).len() - 1;
    let weights = cx.g.softmax(logits, axis)?;
    let out = cx.g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention with separate query and key/value inputs.
/// Self-attention is the case `x_q == x_kv`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        prefix: &str,
        dim: usize,
        heads: usize,
        bias: bool,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(init, &join(prefix, "q"), dim, dim, bias)?,
            // A key bias shifts every score of a query row equally.
            k: Linear::new(init, &join(prefix, "k"), dim, dim, false)?,
            v: Linear::new(init, &join(prefix, "v"), dim, dim, bias)?,
            o: Linear::new(init, &join(prefix, "o"), dim, dim, bias)?,
            heads,
            dim,
        })
    }

    fn split_heads<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let s = cx.g.shape(x).to_vec();
        let (b, n) = (s[0], s[1]);
        let x =
            cx.g.reshape(x, &[b, n, self.heads, self.dim / self.heads])?;
        cx.g.permute(x, &[0, 2, 1, 3])
    }

    /// `x_q: [B, n, d]`, `x_kv: [B, m, d]`, optional additive mask
    /// broadcastable to `[B, h, n, m]`. Returns `([B, n, d], weights)`.
    pub fn forward<T: Real>(
        &self,
        cx: &mut Ctx<'_, T>,
        x_q: Var,
        x_kv: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Var)> {
        let sq = cx.g.shape(x_q).to_vec();
        let skv = cx.g.shape(x_kv).to_vec();
        if sq.len() != 3
            || skv.len() != 3
            || sq[0] != skv[0]
            || sq[2] != self.dim
            || skv[2] != self.dim
        {
            return Err(Error::dim("attention", &sq, &skv));
        }
        let q = self.q.forward(cx, x_q)?;
        let k = self.k.forward(cx, x_kv)?;
        let v = self.v.forward(cx, x_kv)?;
        let (q, k, v) = (
            self.split_heads(cx, q)?,
            self.split_heads(cx, k)?,
            self.split_heads(cx, v)?,
        );
        let (out, weights) = scaled_dot_attention(cx, q, k, v, mask)?;
        let out = cx.g.permute(out, &[0, 2, 1, 3])?;
        let out = cx.g.reshape(out, &[sq[0], sq[1], self.dim])?;
        let out = self.o.forward(cx, out)?;
        Ok((out, weights))
    }
}
