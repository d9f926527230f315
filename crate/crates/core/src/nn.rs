//! Layer building blocks shared by the expert, the assistant and the
//! injection transforms.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.matrix(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.ones(format!("{name}.gain"), &[dim]),
            bias: store.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let n = tape.layernorm(x, LN_EPS)?;
        let g = tape.mul(n, p.var(self.gain))?;
        tape.add(g, p.var(self.bias))
    }
}

/// Single-head scaled dot-product attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub width: usize,
}

impl Attention {
    /// Queries from `q_dim` inputs, keys/values from `kv_dim` inputs, an
    /// internal width of `width`, output of `out_dim`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        width: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), q_dim, width, rng),
            key: Linear::new(store, &format!("{name}.key"), kv_dim, width, rng),
            value: Linear::new(store, &format!("{name}.value"), kv_dim, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, out_dim, rng),
            width,
        }
    }

    /// Attention within `groups` independent segments: query rows and
    /// context rows are each split into `groups` equal consecutive blocks
    /// and block `g` of the queries attends only to block `g` of the
    /// context. Returns the output and the row-stacked probabilities.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, queries: Var, context: Var, groups: usize) -> Result<(Var, Var)> {
        let q = self.query.forward(tape, p, queries)?;
        let k = self.key.forward(tape, p, context)?;
        let v = self.value.forward(tape, p, context)?;
        let (nq, nk) = (tape.value(q).shape()[0], tape.value(k).shape()[0]);
        if groups == 0 || nq % groups != 0 || nk % groups != 0 {
            return Err(Error::shape("attention", &[nq, nk], &[groups]));
        }
        let (tq, tk) = (nq / groups, nk / groups);
        let scale = 1.0 / libm::sqrt(self.width as f64);
        let mut mixed = Vec::with_capacity(groups);
        let mut probs = Vec::with_capacity(groups);
        for g in 0..groups {
            let (qg, kg, vg) = if groups == 1 {
                (q, k, v)
            } else {
                (tape.rows(q, g * tq, tq)?, tape.rows(k, g * tk, tk)?, tape.rows(v, g * tk, tk)?)
            };
            let kt = tape.transpose(kg)?;
            let scores = tape.matmul(qg, kt)?;
            let scores = tape.scale(scores, scale);
            let pr = tape.softmax(scores)?;
            mixed.push(tape.matmul(pr, vg)?);
            probs.push(pr);
        }
        let (mixed, probs) = if groups == 1 {
            (mixed[0], probs[0])
        } else {
            (tape.concat(&mixed, 0)?, tape.concat(&probs, 0)?)
        };
        Ok((self.out.forward(tape, p, mixed)?, probs))
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_mlp: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, mlp_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, dim, dim, dim, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), dim),
            mlp_in: Linear::new(store, &format!("{name}.mlp_in"), dim, mlp_dim, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp_out"), mlp_dim, dim, rng),
        }
    }

    /// `x` holds `groups` equal-length token sequences stacked by rows.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, groups: usize) -> Result<(Var, Var)> {
        let n = self.ln_attn.forward(tape, p, x)?;
        let (a, probs) = self.attn.forward(tape, p, n, n, groups)?;
        let x = tape.add(x, a)?;
        let n = self.ln_mlp.forward(tape, p, x)?;
        let h = self.mlp_in.forward(tape, p, n)?;
        let h = tape.gelu(h);
        let h = self.mlp_out.forward(tape, p, h)?;
        Ok((tape.add(x, h)?, probs))
    }
}

/// Repeats each row of `x[b×c]` `n` times, giving `[b·n × c]`.
pub fn repeat_rows(tape: &mut Tape, x: Var, n: usize) -> Result<Var> {
    let (b, _) = tape.value(x).dims2("repeat_rows")?;
    if n == 1 {
        return Ok(x);
    }
    let mut e = Tensor::zeros(&[b * n, b]);
    for r in 0..b * n {
        e.data_mut()[r * b + r / n] = 1.0;
    }
    let e = tape.constant(e);
    tape.matmul(e, x)
}

/// Sinusoidal embedding of a (diffusion) timestep: entries `2i`, `2i+1`
/// are `sin`, `cos` of `t / 10000^(2i/dim)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim {
        let i = (j / 2) as f64;
        let freq = libm::pow(10_000.0, -2.0 * i / dim as f64);
        let angle = t as f64 * freq;
        out.push(if j % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) });
    }
    Tensor::vector(out)
}
