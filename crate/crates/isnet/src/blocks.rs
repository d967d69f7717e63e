//! Parameterized layers: 1x1 convolutions, classification heads, the toy
//! stride-8 backbone, and the parameter store the trainer updates.

use crate::error::{IsnetError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub(crate) struct ParamEntry<F: Scalar> {
    pub name: String,
    pub value: Tensor<F>,
    /// Weight decay applies only to connection weights, not biases or
    /// normalization scale/shift.
    pub decay: bool,
}

/// Ordered, named collection of trainable tensors. Construction order is the
/// checkpoint order.
pub struct ParamStore<F: Scalar> {
    pub(crate) entries: Vec<ParamEntry<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>, decay: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> u64 {
        self.entries.iter().map(|e| e.value.len() as u64).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    decay: e.decay,
                })
                .collect(),
        }
    }
}

/// One forward/backward pass: a tape plus memoized bindings of store
/// parameters to tape leaves, so each parameter is leafed once per step.
pub struct Session<'a, F: Scalar> {
    pub tape: Tape<F>,
    store: &'a ParamStore<F>,
    bound: Vec<Option<Var>>,
}

impl<'a, F: Scalar> Session<'a, F> {
    pub fn new(store: &'a ParamStore<F>) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    /// Run `f` with a session wrapped around an existing tape (used by the
    /// gradient checker, which owns tape construction).
    pub fn on_tape<R>(
        store: &'a ParamStore<F>,
        tape: &mut Tape<F>,
        f: impl FnOnce(&mut Session<F>) -> Result<R>,
    ) -> Result<R> {
        let mut sess = Session {
            tape: std::mem::take(tape),
            store,
            bound: vec![None; store.len()],
        };
        let out = f(&mut sess);
        *tape = std::mem::take(&mut sess.tape);
        out
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.value(id).clone(), true);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradient of a parameter after `tape.backward`, zeros if the parameter
    /// was never touched by this pass.
    pub fn grad_of(&self, id: ParamId) -> Tensor<F> {
        match self.bound[id.0] {
            Some(v) => self
                .tape
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.store.value(id).shape())),
            None => Tensor::zeros(self.store.value(id).shape()),
        }
    }

    pub fn was_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }
}

/// Fan-in-scaled uniform init: U(-b, b) with b = sqrt(6 / fan_in).
pub fn init_uniform<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let count: usize = shape.iter().product();
    let data: Vec<F> = (0..count)
        .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape/data consistent by construction")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

/// Per-position affine map `[C_in,h,w] -> [C_out,h,w]`.
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1x1 {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_uniform(rng, &[c_out, c_in], c_in),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), false);
        Conv1x1 {
            weight,
            bias,
            c_in,
            c_out,
        }
    }

    pub fn forward<F: Scalar>(&self, sess: &mut Session<F>, x: Var) -> Result<Var> {
        let shape = sess.tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.c_in {
            return Err(IsnetError::dim(format!(
                "conv1x1 expects [{},h,w], got {:?}",
                self.c_in, shape
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        let weight = sess.param(self.weight);
        let bias = sess.param(self.bias);
        let flat = sess.tape.reshape(x, &[self.c_in, h * w])?;
        let prod = sess.tape.matmul(weight, flat)?;
        let biased = sess.tape.add_row_bias(prod, bias)?;
        sess.tape.reshape(biased, &[self.c_out, h, w])
    }
}

/// Per-channel normalization parameters.
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::filled(&[channels], F::one()),
            false,
        );
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), false);
        Norm { gamma, beta }
    }

    pub fn forward<F: Scalar>(&self, sess: &mut Session<F>, x: Var) -> Result<Var> {
        let gamma = sess.param(self.gamma);
        let beta = sess.param(self.beta);
        sess.tape.spatial_norm(x, gamma, beta)
    }
}

/// 1x1 convolution followed by optional normalization and nonlinearity. The
/// transform functions F and A are instances of this block.
pub struct Conv1x1Block {
    pub conv: Conv1x1,
    pub norm: Option<Norm>,
    pub act: Activation,
}

impl Conv1x1Block {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let conv = Conv1x1::new(store, rng, name, c_in, c_out);
        let norm = Some(Norm::new(store, &format!("{name}.norm"), c_out));
        Conv1x1Block {
            conv,
            norm,
            act: Activation::Relu,
        }
    }

    /// Bare affine variant, used by tests that need selector weights.
    pub fn plain<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        Conv1x1Block {
            conv: Conv1x1::new(store, rng, name, c_in, c_out),
            norm: None,
            act: Activation::Identity,
        }
    }

    pub fn forward<F: Scalar>(&self, sess: &mut Session<F>, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(sess, x)?;
        if let Some(norm) = &self.norm {
            y = norm.forward(sess, y)?;
        }
        if self.act == Activation::Relu {
            y = sess.tape.relu(y);
        }
        Ok(y)
    }
}

/// Auxiliary classification head H': two stacked 1x1 convolutions with a
/// relu between; output channel count is K.
pub struct HeadAux {
    pub conv1: Conv1x1,
    pub conv2: Conv1x1,
}

impl HeadAux {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        hidden: usize,
        k: usize,
    ) -> Self {
        HeadAux {
            conv1: Conv1x1::new(store, rng, &format!("{name}.conv1"), c_in, hidden),
            conv2: Conv1x1::new(store, rng, &format!("{name}.conv2"), hidden, k),
        }
    }

    pub fn k(&self) -> usize {
        self.conv2.c_out
    }

    pub fn forward<F: Scalar>(&self, sess: &mut Session<F>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(sess, x)?;
        let h = sess.tape.relu(h);
        self.conv2.forward(sess, h)
    }
}

/// Main classification head H: optional dropout, then one 1x1 convolution to
/// K channels.
pub struct HeadMain {
    pub conv: Conv1x1,
    pub dropout: f64,
}

impl HeadMain {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        k: usize,
        dropout: f64,
    ) -> Self {
        HeadMain {
            conv: Conv1x1::new(store, rng, name, c_in, k),
            dropout,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        sess: &mut Session<F>,
        x: Var,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut x = x;
        if let Some(rng) = dropout_rng {
            if self.dropout > 0.0 {
                let shape = sess.tape.value(x).shape().to_vec();
                let keep = 1.0 - self.dropout;
                let count: usize = shape.iter().product();
                let mask: Vec<F> = (0..count)
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            F::from_f64(1.0 / keep)
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                let mask = Tensor::from_vec(shape, mask)?;
                x = sess.tape.mul_const(x, mask)?;
            }
        }
        self.conv.forward(sess, x)
    }
}

struct BackboneBlock {
    weight: ParamId,
    bias: ParamId,
    norm: Norm,
}

/// Toy stride-8 backbone: three stride-2 3x3 convolution blocks, each
/// followed by normalization and relu, mapping 3 -> C channels.
pub struct ToyBackbone {
    blocks: Vec<BackboneBlock>,
    pub c_out: usize,
}

impl ToyBackbone {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
    ) -> Self {
        let widths = [3, (c / 4).max(1), (c / 2).max(1), c];
        let mut blocks = Vec::new();
        for i in 0..3 {
            let (c_in, c_out) = (widths[i], widths[i + 1]);
            let fan_in = c_in * 9;
            let weight = store.add(
                format!("{name}.block{i}.weight"),
                init_uniform(rng, &[c_out, c_in, 3, 3], fan_in),
                true,
            );
            let bias = store.add(format!("{name}.block{i}.bias"), Tensor::zeros(&[c_out]), false);
            let norm = Norm::new(store, &format!("{name}.block{i}.norm"), c_out);
            blocks.push(BackboneBlock { weight, bias, norm });
        }
        ToyBackbone { blocks, c_out: c }
    }

    /// `[3,H,W] -> [C,H/8,W/8]`; H and W must be multiples of 8.
    pub fn forward<F: Scalar>(&self, sess: &mut Session<F>, img: Var) -> Result<Var> {
        let shape = sess.tape.value(img).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(IsnetError::dim(format!(
                "backbone expects [3,H,W], got {:?}",
                shape
            )));
        }
        if shape[1] % 8 != 0 || shape[2] % 8 != 0 {
            return Err(IsnetError::usage(format!(
                "backbone input extents must be multiples of 8 (got {}x{}); pad or crop the image",
                shape[1], shape[2]
            )));
        }
        let mut x = img;
        for block in &self.blocks {
            let weight = sess.param(block.weight);
            let bias = sess.param(block.bias);
            x = sess.tape.conv3x3_s2(x, weight, bias)?;
            x = block.norm.forward(sess, x)?;
            x = sess.tape.relu(x);
        }
        Ok(x)
    }
}
