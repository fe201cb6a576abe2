use super::{AttentionWeights, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

pub struct AttentionOutput {
    pub output: Var,
    /// One `T×T` softmax matrix per head.
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention with queries from `query_src`
/// and keys/values from `kv_src`. Self-attention passes the same var twice.
pub fn attention_block(
    g: &mut Graph,
    w: &AttentionWeights<Var>,
    query_src: Var,
    kv_src: Var,
    use_layer_norm: bool,
) -> Result<AttentionOutput> {
    let width = g.value(query_src).cols();
    if g.value(kv_src).cols() != width || g.value(w.output).cols() != width {
        return Err(Error::Shape {
            op: "attention",
            lhs: g.shape(query_src).to_vec(),
            rhs: g.shape(kv_src).to_vec(),
        });
    }
    let mut heads = Vec::with_capacity(w.query.len());
    let mut weights = Vec::with_capacity(w.query.len());
    for h in 0..w.query.len() {
        let q = g.matmul(query_src, w.query[h])?;
        let k = g.matmul(kv_src, w.key[h])?;
        let v = g.matmul(kv_src, w.value[h])?;
        let head_dim = g.value(q).cols() as f64;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / head_dim.sqrt());
        let a = g.softmax_rows(scores)?;
        heads.push(g.matmul(a, v)?);
        weights.push(a);
    }
    let cat = g.concat_cols(&heads)?;
    let mut output = g.matmul(cat, w.output)?;
    if use_layer_norm {
        let residual = g.add(output, query_src)?;
        output = g.layer_norm_rows(residual, w.norm_gain, w.norm_bias, LAYER_NORM_EPS)?;
    }
    Ok(AttentionOutput { output, weights })
}
