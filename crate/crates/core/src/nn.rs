//! Pre-LN transformer pieces shared by the backbone and the branch.
//!
//! Parameter naming under a block prefix:
//! `ln1.{gamma,beta}`, `attn.{wq,bq,wk,bk,wv,bv,wo,bo}`, `ln2.{gamma,beta}`,
//! `mlp.{w1,b1,w2,b2}`. Weights are `[in, out]` and applied as `x · W + b`.

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::params::{normal_tensor, Binder, Group, ParamStore};
use crate::tensor::{Tensor, Var};

pub const ATTN_WEIGHTS: [(&str, &str); 4] = [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")];

pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub std: f64,
    pub group: Group,
    pub trainable: bool,
}

impl Init<'_> {
    pub fn normal(&mut self, name: &str, shape: &[usize]) {
        let t = normal_tensor(self.rng, shape, self.std);
        self.store.insert(name, t, self.group, self.trainable);
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) {
        self.store
            .insert(name, Tensor::full(shape, value), self.group, self.trainable);
    }

    pub fn linear(&mut self, prefix: &str, w: &str, b: &str, inp: usize, out: usize) {
        self.normal(&format!("{prefix}.{w}"), &[inp, out]);
        self.constant(&format!("{prefix}.{b}"), &[out], 0.0);
    }

    pub fn layer_norm(&mut self, prefix: &str, d: usize) {
        self.constant(&format!("{prefix}.gamma"), &[d], 1.0);
        self.constant(&format!("{prefix}.beta"), &[d], 0.0);
    }

    pub fn attention(&mut self, prefix: &str, d: usize) {
        for (w, b) in ATTN_WEIGHTS {
            self.linear(prefix, w, b, d, d);
        }
    }

    pub fn block(&mut self, prefix: &str, cfg: &ModelConfig) {
        let d = cfg.width;
        self.layer_norm(&format!("{prefix}.ln1"), d);
        self.attention(&format!("{prefix}.attn"), d);
        self.layer_norm(&format!("{prefix}.ln2"), d);
        self.linear(&format!("{prefix}.mlp"), "w1", "b1", d, cfg.mlp_hidden());
        self.linear(&format!("{prefix}.mlp"), "w2", "b2", cfg.mlp_hidden(), d);
    }
}

/// Suffixes of every parameter in a transformer block.
pub fn block_param_suffixes() -> Vec<String> {
    let mut out = vec![
        "ln1.gamma".to_string(),
        "ln1.beta".into(),
        "ln2.gamma".into(),
        "ln2.beta".into(),
        "mlp.w1".into(),
        "mlp.b1".into(),
        "mlp.w2".into(),
        "mlp.b2".into(),
    ];
    for (w, b) in ATTN_WEIGHTS {
        out.push(format!("attn.{w}"));
        out.push(format!("attn.{b}"));
    }
    out
}

pub fn linear(b: &Binder, x: Var, w: &str, bias: Option<&str>) -> Result<Var> {
    let tape = b.tape();
    let y = tape.matmul(x, b.get(w)?)?;
    match bias {
        Some(name) => Ok(tape.add(y, b.get(name)?)?),
        None => Ok(y),
    }
}

pub fn layer_norm(b: &Binder, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let gamma = b.get(&format!("{prefix}.gamma"))?;
    let beta = b.get(&format!("{prefix}.beta"))?;
    Ok(b.tape().layer_norm(x, gamma, beta, eps)?)
}

/// Multi-head self-attention over `x: [n, S, D]`; returns the output and
/// the attention probabilities `[n·H, S, S]`.
pub fn attention_with_probs(
    b: &Binder,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<(Var, Var)> {
    let tape = b.tape();
    let shape = tape.shape(x);
    let (n, s, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let split = |name: &str, bias: &str| -> Result<Var> {
        let y = linear(b, x, &format!("{prefix}.{name}"), Some(&format!("{prefix}.{bias}")))?;
        let y = tape.reshape(y, &[n, s, heads, dh])?;
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        Ok(tape.reshape(y, &[n * heads, s, dh])?)
    };
    let q = split("wq", "bq")?;
    let k = split("wk", "bk")?;
    let v = split("wv", "bv")?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let probs = if causal {
        tape.softmax_causal(scores)?
    } else {
        tape.softmax(scores, 2)?
    };
    let o = tape.matmul(probs, v)?;
    let o = tape.reshape(o, &[n, heads, s, dh])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    let o = tape.reshape(o, &[n, s, d])?;
    let out = linear(b, o, &format!("{prefix}.wo"), Some(&format!("{prefix}.bo")))?;
    Ok((out, probs))
}

pub fn attention(b: &Binder, prefix: &str, x: Var, heads: usize, causal: bool) -> Result<Var> {
    Ok(attention_with_probs(b, prefix, x, heads, causal)?.0)
}

pub fn mlp(b: &Binder, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(b, x, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")))?;
    let h = b.tape().gelu(h);
    linear(b, h, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")))
}

/// `x' = attn(LN(x)) + x; out = FFN(LN(x')) + x'` over sequences `[n, S, D]`.
pub fn transformer_block(
    b: &Binder,
    prefix: &str,
    x: Var,
    heads: usize,
    eps: f64,
    causal: bool,
) -> Result<Var> {
    let tape = b.tape();
    let h = layer_norm(b, x, &format!("{prefix}.ln1"), eps)?;
    let a = attention(b, &format!("{prefix}.attn"), h, heads, causal)?;
    let x1 = tape.add(a, x)?;
    let h = layer_norm(b, x1, &format!("{prefix}.ln2"), eps)?;
    let f = mlp(b, &format!("{prefix}.mlp"), h)?;
    Ok(tape.add(f, x1)?)
}
