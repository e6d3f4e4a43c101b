//! Vertical attention pooling over the per-layer CLS stack, and the softmax
//! classification head.
//!
//! Vertical attention is a single scaled dot-product step addressing depth:
//! the query comes from the top CLS vector, keys from learned per-level
//! embeddings, values from per-level projections of each CLS vector.

use crate::encoder::{ForwardSession, Param, Result};
use crate::eval::ProbDist;
use crate::numerics::{Scalar, TensorRef};

/// Vertical-attention parameters: one level embedding and one value
/// projection per layer, with a shared query and key projection.
#[derive(Debug, Clone)]
pub struct VAttParams<S> {
    /// `k_n`, level embeddings, `[1, d]` each.
    pub level_embeddings: Vec<Param<S>>,
    pub wq: Param<S>,
    pub wk: Param<S>,
    /// `V_n`, one `[d, d]` value projection per level.
    pub wv: Vec<Param<S>>,
}

/// The softmax classification head.
#[derive(Debug, Clone)]
pub struct ClassifierParams<S> {
    /// `[d, C]`.
    pub w: Param<S>,
    /// `[C]`.
    pub b: Param<S>,
}

/// Pool the per-layer CLS vectors `z_1..z_L` by content-to-level attention:
///
/// ```text
/// q      = z_L Wq
/// key_n  = k_n Wk
/// alpha  = softmax_n(q . key_n / sqrt(d))
/// pooled = sum_n alpha_n (z_n Wv_n)
/// ```
///
/// Returns `(pooled [1, d], alpha [1, L])`.
pub fn vertical_attention<S: Scalar>(
    sess: &mut ForwardSession<'_, S>,
    params: &VAttParams<S>,
    z: &[TensorRef],
) -> Result<(TensorRef, TensorRef)> {
    let levels = params.level_embeddings.len();
    assert_eq!(z.len(), levels, "one CLS vector per level embedding");
    assert_eq!(params.wv.len(), levels, "one value projection per level");

    let wq = sess.lease(&params.wq)?;
    let wk = sess.lease(&params.wk)?;
    let z_last = *z.last().expect("at least one level");
    let d = sess.tape.shape(z_last)[1];
    let inv_sqrt_d = S::from_f64(1.0 / (d as f64).sqrt());

    let q = sess.tape.matmul(z_last, wq)?;
    let mut scores = Vec::with_capacity(levels);
    for k_n in &params.level_embeddings {
        let k_n = sess.lease(k_n)?;
        let key = sess.tape.matmul(k_n, wk)?;
        let key_t = sess.tape.transpose(key)?;
        let score = sess.tape.matmul(q, key_t)?;
        scores.push(sess.tape.scale(score, inv_sqrt_d)?);
    }
    let score_row = sess.tape.concat(&scores, 1)?;
    let alpha = sess.tape.softmax(score_row)?;

    let mut values = Vec::with_capacity(levels);
    for (z_n, wv_n) in z.iter().zip(&params.wv) {
        let wv_n = sess.lease(wv_n)?;
        values.push(sess.tape.matmul(*z_n, wv_n)?);
    }
    let value_stack = sess.tape.concat(&values, 0)?;
    let pooled = sess.tape.matmul(alpha, value_stack)?;
    Ok((pooled, alpha))
}

/// Logits for one pooled vector: dropout (train phase only), then `x W + b`.
pub fn classify<S: Scalar>(
    sess: &mut ForwardSession<'_, S>,
    params: &ClassifierParams<S>,
    x: TensorRef,
    dropout_cls: f64,
) -> Result<TensorRef> {
    let w = sess.lease(&params.w)?;
    let b = sess.lease(&params.b)?;
    let x = sess.dropout(x, dropout_cls)?;
    let logits = sess.tape.matmul(x, w)?;
    Ok(sess.tape.bias_add(logits, b)?)
}

/// Argmax decision rule; ties break to the lowest index.
pub fn predict(dist: &ProbDist) -> usize {
    dist.argmax()
}
