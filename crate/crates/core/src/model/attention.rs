//! Multi-head attention with optional prefix key/value rows.

use rand::Rng;

use super::init::{normal_matrix, xavier_std};
use super::tape::{Mask, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Projection weights of one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_model: usize, rng: &mut R) -> Self {
        let std = xavier_std(d_model, d_model);
        let mut w = |suffix: &str, rng: &mut R| {
            store.add(
                format!("{name}.{suffix}"),
                normal_matrix(d_model, d_model, std, rng),
                true,
            )
        };
        let wq = w("wq", rng);
        let wk = w("wk", rng);
        let wv = w("wv", rng);
        let wo = w("wo", rng);
        let zeros = || ndarray::Array2::zeros((1, d_model));
        AttentionParams {
            wq,
            wk,
            wv,
            wo,
            bq: store.add(format!("{name}.bq"), zeros(), false),
            bk: store.add(format!("{name}.bk"), zeros(), false),
            bv: store.add(format!("{name}.bv"), zeros(), false),
            bo: store.add(format!("{name}.bo"), zeros(), false),
        }
    }
}

/// Attention weights recorded during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadTrace {
    pub layer: usize,
    pub head: usize,
    pub weights: Var,
}

/// Scaled dot-product attention over `[p; K]` and `[p; V]` per head,
/// followed by the output projection.
///
/// `q` is `n × d_model`, `k`/`v` are `m × d_model` (already projected),
/// and `prefix` is `P × d_model`, split into heads column-wise like the
/// keys. Prefix rows are visible to every query, including under a causal
/// mask. `layer` is only used for error reporting.
#[allow(clippy::too_many_arguments)]
pub fn prefix_attention(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    prefix: Option<Var>,
    n_heads: usize,
    mask: Mask,
    out_proj: (Var, Var),
    layer: usize,
    trace: &mut Vec<HeadTrace>,
) -> Result<Var> {
    let d_model = tape.shape(q).1;
    if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(Error::Dimension(format!(
            "d_model {d_model} not divisible by {n_heads} heads"
        )));
    }
    if tape.shape(k) != tape.shape(v) || tape.shape(k).1 != d_model {
        return Err(Error::Dimension(
            "keys and values must share shape with d_model columns".into(),
        ));
    }
    let (keys, values, prefix_len) = match prefix {
        Some(p) if tape.shape(p).0 > 0 => {
            if tape.shape(p).1 != d_model {
                return Err(Error::Dimension("prefix width must equal d_model".into()));
            }
            let plen = tape.shape(p).0;
            (tape.concat_rows(&[p, k]), tape.concat_rows(&[p, v]), plen)
        }
        _ => (k, v, 0),
    };
    let mask = match mask {
        Mask::Causal { offset } => Mask::Causal {
            offset: offset + prefix_len,
        },
        Mask::None => Mask::None,
    };
    let d_head = d_model / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.col_slice(q, h * d_head, d_head);
        let kh = tape.col_slice(keys, h * d_head, d_head);
        let vh = tape.col_slice(values, h * d_head, d_head);
        let raw = tape.matmul_nt(qh, kh);
        let scores = tape.scale(raw, scale);
        if tape.value(scores).iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical { layer, head: h });
        }
        let weights = tape.softmax(scores, mask);
        trace.push(HeadTrace {
            layer,
            head: h,
            weights,
        });
        heads.push(tape.matmul(weights, vh));
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    };
    let proj = tape.matmul(cat, out_proj.0);
    Ok(tape.add_row(proj, out_proj.1))
}

fn linear(tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId) -> Var {
    let w = tape.param(w);
    let b = tape.param(b);
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Projects queries from `x_q` and keys/values from `x_kv`, then runs
/// [`prefix_attention`].
#[allow(clippy::too_many_arguments)]
pub fn multi_head(
    tape: &mut Tape<'_>,
    params: &AttentionParams,
    x_q: Var,
    x_kv: Var,
    prefix: Option<Var>,
    n_heads: usize,
    mask: Mask,
    layer: usize,
    trace: &mut Vec<HeadTrace>,
) -> Result<Var> {
    let q = linear(tape, x_q, params.wq, params.bq);
    let k = linear(tape, x_kv, params.wk, params.bk);
    let v = linear(tape, x_kv, params.wv, params.bv);
    let wo = tape.param(params.wo);
    let bo = tape.param(params.bo);
    prefix_attention(tape, q, k, v, prefix, n_heads, mask, (wo, bo), layer, trace)
}
