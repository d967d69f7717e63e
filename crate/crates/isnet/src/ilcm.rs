//! Image-level context module: whole-image context per pixel via channel-wise
//! global pooling fused back through a 1x1 convolution.

use crate::blocks::{Conv1x1Block, ParamStore, Session};
use crate::error::{IsnetError, Result};
use crate::tape::Var;
use crate::tensor::Scalar;
use rand_chacha::ChaCha8Rng;

/// The module M_il: fuse maps the 2C-channel concatenation of the repeated
/// global context and the pixel representations back down to C channels.
pub struct IlcmState {
    pub fuse: Conv1x1Block,
    pub c: usize,
}

impl IlcmState {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
    ) -> Self {
        IlcmState {
            fuse: Conv1x1Block::new(store, rng, &format!("{name}.fuse"), 2 * c, c),
            c,
        }
    }

    /// Test hook: fuse without normalization/nonlinearity.
    pub fn plain<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
    ) -> Self {
        IlcmState {
            fuse: Conv1x1Block::plain(store, rng, &format!("{name}.fuse"), 2 * c, c),
            c,
        }
    }

    /// G: per-channel spatial mean, `[C,h,w] -> [C,1,1]`.
    pub fn global_context<F: Scalar>(sess: &mut Session<F>, r: Var) -> Result<Var> {
        sess.tape.mean_spatial(r)
    }

    /// R_il = F(repeat(G) (+) R); output shape equals input shape.
    pub fn forward<F: Scalar>(&self, sess: &mut Session<F>, r: Var) -> Result<Var> {
        let shape = sess.tape.value(r).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.c {
            return Err(IsnetError::dim(format!(
                "ilcm expects [{},h,w], got {:?}",
                self.c, shape
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let g = Self::global_context(sess, r)?;
        let repeated = sess.tape.broadcast_spatial(g, h, w)?;
        let cat = sess.tape.concat_channels(&[repeated, r])?;
        self.fuse.forward(sess, cat)
    }
}
