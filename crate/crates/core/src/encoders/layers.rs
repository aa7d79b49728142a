use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::param_tree;
use crate::tensor::Tensor;

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: T,
}
param_tree!(Linear { leaves: [weight, bias], children: [], lists: [] });

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}
param_tree!(LayerNormParams { leaves: [gamma, beta], children: [], lists: [] });

impl LayerNormParams<Tensor> {
    pub fn new(width: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
        }
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = Tensor> {
    pub ln1: LayerNormParams<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub ln2: LayerNormParams<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}
param_tree!(Block { leaves: [], children: [ln1, q, k, v, out, ln2, fc1, fc2], lists: [] });

pub(crate) fn linear(g: &mut Graph, x: Var, p: &Linear<Var>) -> Result<Var> {
    let y = g.matmul(x, p.weight)?;
    g.add_row(y, p.bias)
}

pub(crate) fn layer_norm(g: &mut Graph, x: Var, p: &LayerNormParams<Var>, eps: f64) -> Result<Var> {
    g.layer_norm(x, p.gamma, p.beta, eps)
}

/// Multi-head self-attention over `n_seq` stacked sequences of `seq_len`
/// rows each; attention never crosses sequence boundaries.
fn attention(g: &mut Graph, x: Var, b: &Block<Var>, n_seq: usize, seq_len: usize, heads: usize) -> Result<Var> {
    let q = linear(g, x, &b.q)?;
    let k = linear(g, x, &b.k)?;
    let v = linear(g, x, &b.v)?;
    let width = g.shape(x).1;
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut per_seq = Vec::with_capacity(n_seq);
    for s in 0..n_seq {
        let rows = s * seq_len..(s + 1) * seq_len;
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = g.slice(q, rows.clone(), cols.clone())?;
            let kh = g.slice(k, rows.clone(), cols.clone())?;
            let vh = g.slice(v, rows.clone(), cols)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax_rows(scores)?;
            per_head.push(g.matmul(attn, vh)?);
        }
        per_seq.push(if heads == 1 { per_head[0] } else { g.concat_cols(&per_head)? });
    }
    let merged = if n_seq == 1 { per_seq[0] } else { g.concat_rows(&per_seq)? };
    linear(g, merged, &b.out)
}

pub(crate) fn block_forward(
    g: &mut Graph,
    x: Var,
    b: &Block<Var>,
    n_seq: usize,
    seq_len: usize,
    heads: usize,
    eps: f64,
) -> Result<Var> {
    let h = layer_norm(g, x, &b.ln1, eps)?;
    let a = attention(g, h, b, n_seq, seq_len, heads)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, x, &b.ln2, eps)?;
    let h = linear(g, h, &b.fc1)?;
    let h = g.gelu(h)?;
    let h = linear(g, h, &b.fc2)?;
    g.add(x, h)
}
