//! Similarity-weighted fusion and the classification head: score each pixel
//! of R against every position of a context tensor, retrieve attention
//! blends, reduce the channel-concatenated augmentation back to C and
//! classify to full-resolution logits.

use crate::blocks::{Conv1x1Block, HeadMain, ParamStore, Session};
use crate::error::{IsnetError, Result};
use crate::tape::Var;
use crate::tensor::Scalar;
use rand_chacha::ChaCha8Rng;

/// Similarity matrices are dense N x N; refuse to build one past this many
/// positions rather than exhaust memory.
pub const DEFAULT_ATTENTION_CAP: usize = 16_384;

/// The augmentation transform A plus the main head H. `parts` is the number
/// of [C,h,w] streams A consumes (3 for the full model, 2 when only one
/// context module is active).
pub struct FusionState {
    pub transform_a: Conv1x1Block,
    pub head_main: HeadMain,
    pub c: usize,
    pub parts: usize,
}

impl FusionState {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        k: usize,
        parts: usize,
        dropout: f64,
    ) -> Self {
        FusionState {
            transform_a: Conv1x1Block::new(store, rng, &format!("{name}.transform_a"), parts * c, c),
            head_main: HeadMain::new(store, rng, &format!("{name}.head_main"), c, k, dropout),
            c,
            parts,
        }
    }

    /// Test hook: A without normalization/nonlinearity.
    pub fn plain<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        k: usize,
        parts: usize,
    ) -> Self {
        FusionState {
            transform_a: Conv1x1Block::plain(store, rng, &format!("{name}.transform_a"), parts * c, c),
            head_main: HeadMain::new(store, rng, &format!("{name}.head_main"), c, k, 0.0),
            c,
            parts,
        }
    }

    /// R_aug = A(parts[0] (+) parts[1] (+) ...); callers pass the context
    /// blends first and R last.
    pub fn augment<F: Scalar>(&self, sess: &mut Session<F>, parts: &[Var]) -> Result<Var> {
        if parts.len() != self.parts {
            return Err(IsnetError::dim(format!(
                "augment expects {} streams, got {}",
                self.parts,
                parts.len()
            )));
        }
        let first = sess.tape.value(parts[0]).shape().to_vec();
        for &p in parts {
            if sess.tape.value(p).shape() != first.as_slice() {
                return Err(IsnetError::dim(format!(
                    "augment stream shape {:?} differs from {:?}",
                    sess.tape.value(p).shape(),
                    first
                )));
            }
        }
        let cat = sess.tape.concat_channels(parts)?;
        self.transform_a.forward(sess, cat)
    }

    /// O = upsample8x(H(R_aug)); raw logits, softmax lives in the loss.
    pub fn classify<F: Scalar>(
        &self,
        sess: &mut Session<F>,
        r_aug: Var,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let logits = self.head_main.forward(sess, r_aug, dropout_rng)?;
        sess.tape.upsample8x(logits)
    }
}

/// S = softmax_last((r_flat[N,C] x ctx_flat[C,N]) / sqrt(C)). No learned
/// projections; R and the context tensor enter directly. Rows sum to 1.
pub fn similarity<F: Scalar>(
    sess: &mut Session<F>,
    r: Var,
    ctx: Var,
    cap: usize,
) -> Result<Var> {
    let shape = sess.tape.value(r).shape().to_vec();
    if shape.len() != 3 {
        return Err(IsnetError::dim(format!("similarity expects [C,h,w], got {shape:?}")));
    }
    if sess.tape.value(ctx).shape() != shape.as_slice() {
        return Err(IsnetError::dim(format!(
            "similarity shape mismatch: {:?} vs {:?}",
            shape,
            sess.tape.value(ctx).shape()
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    if n > cap {
        return Err(IsnetError::usage(format!(
            "similarity would build a {n}x{n} matrix; {n} positions exceeds the cap of {cap} \
             (reduce the input size or raise the cap)"
        )));
    }
    let r_flat = sess.tape.reshape(r, &[c, n])?;
    let r_nc = sess.tape.permute(r_flat, &[1, 0])?;
    let ctx_flat = sess.tape.reshape(ctx, &[c, n])?;
    let scores = sess.tape.matmul(r_nc, ctx_flat)?;
    let scaled = sess.tape.scale(scores, F::from_f64(1.0 / (c as f64).sqrt()));
    Ok(sess.tape.softmax_last(scaled))
}

/// R' = reshape(S x ctx_flat[N,C]); each position is a convex combination of
/// context positions.
pub fn attend<F: Scalar>(sess: &mut Session<F>, s: Var, ctx: Var) -> Result<Var> {
    let cshape = sess.tape.value(ctx).shape().to_vec();
    if cshape.len() != 3 {
        return Err(IsnetError::dim(format!("attend expects ctx [C,h,w], got {cshape:?}")));
    }
    let (c, h, w) = (cshape[0], cshape[1], cshape[2]);
    let n = h * w;
    if sess.tape.value(s).shape() != [n, n] {
        return Err(IsnetError::dim(format!(
            "attend expects similarity [{n},{n}], got {:?}",
            sess.tape.value(s).shape()
        )));
    }
    let ctx_flat = sess.tape.reshape(ctx, &[c, n])?;
    let ctx_nc = sess.tape.permute(ctx_flat, &[1, 0])?;
    let out_nc = sess.tape.matmul(s, ctx_nc)?;
    let out_cn = sess.tape.permute(out_nc, &[1, 0])?;
    sess.tape.reshape(out_cn, &[c, h, w])
}
