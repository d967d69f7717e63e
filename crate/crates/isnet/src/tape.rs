//! Define-by-run reverse-mode differentiation tape.
//!
//! Every differentiable operation appends a node holding its result value and
//! enough saved state to push gradients back to its operands. The tape is
//! rebuilt per forward pass and confined to one training step; `backward`
//! replays it in exact reverse execution order.

use crate::error::{IsnetError, Result};
use crate::tensor::{
    inverse_perm, log_softmax_last, matmul, matmul_nt, matmul_tn, permute, softmax_last, Scalar,
    Tensor,
};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

const NORM_EPS: f64 = 1e-5;

enum Op<F: Scalar> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    /// Elementwise product with an untracked constant (dropout masks).
    MulConst(usize, Tensor<F>),
    Scale(usize, F),
    Matmul(usize, usize),
    /// `[r,c] + bias[r]` broadcast across columns.
    AddRowBias(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    SoftmaxLast(usize),
    LogSoftmaxLast(usize),
    Relu(usize),
    /// `[C,h,w] -> [C,1,1]` arithmetic mean over positions.
    MeanSpatial(usize),
    /// `[C,1,1] -> [C,h,w]`; gradient is the spatial sum.
    BroadcastSpatial(usize),
    ConcatChannels(Vec<usize>),
    /// 3x3 stride-2 pad-1 convolution via im2col; saves the patch matrix.
    Conv3x3S2 {
        x: usize,
        weight: usize,
        bias: usize,
        patches: Tensor<F>,
    },
    /// Per-channel normalization over spatial positions with learnable
    /// scale/shift.
    SpatialNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<F>,
        inv_std: Vec<F>,
    },
    /// Bilinear x8 upsampling, align-corners disabled.
    Upsample8x(usize),
    /// Pick flat elements; result is rank-1.
    GatherElems { x: usize, idx: Vec<usize> },
    /// Pick columns of a `[C,N]` matrix.
    GatherColumns { x: usize, cols: Vec<usize> },
    /// Place per-part `[C,1]` column vectors into the named columns of a
    /// `[C,N]` output. Column sets must partition `0..N`.
    ScatterColumns {
        parts: Vec<usize>,
        cols: Vec<Vec<usize>>,
    },
    Sum(usize),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    requires_grad: bool,
    op: Op<F>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an input tensor. Tracked leaves receive gradients in `backward`.
    pub fn leaf(&mut self, value: Tensor<F>, tracked: bool) -> Var {
        self.push(value, tracked, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient populated by `backward`, if this node was tracked.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    // ---- elementary ops ------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Add(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Mul(a.0, b.0)))
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor<F>) -> Result<Var> {
        let v = self.value(a).zip_map(&c, |x, y| x * y)?;
        Ok(self.push(v, self.rg(a), Op::MulConst(a.0, c)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, self.rg(a), Op::Scale(a.0, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, self.rg(a) || self.rg(b), Op::Matmul(a.0, b.0)))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if xv.rank() != 2 || bv.rank() != 1 || xv.shape()[0] != bv.shape()[0] {
            return Err(IsnetError::dim(format!(
                "row bias: {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut data = xv.data().to_vec();
        for i in 0..r {
            let b = bv.data()[i];
            for d in data[i * c..(i + 1) * c].iter_mut() {
                *d = *d + b;
            }
        }
        let v = Tensor::from_vec(vec![r, c], data)?;
        Ok(self.push(v, self.rg(x) || self.rg(bias), Op::AddRowBias(x.0, bias.0)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, self.rg(x), Op::Reshape(x.0)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let v = permute(self.value(x), perm)?;
        Ok(self.push(v, self.rg(x), Op::Permute(x.0, perm.to_vec())))
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let v = softmax_last(self.value(x));
        self.push(v, self.rg(x), Op::SoftmaxLast(x.0))
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        let v = log_softmax_last(self.value(x));
        self.push(v, self.rg(x), Op::LogSoftmaxLast(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > F::zero() { a } else { F::zero() });
        self.push(v, self.rg(x), Op::Relu(x.0))
    }

    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(IsnetError::dim(format!(
                "mean_spatial expects [C,h,w], got {:?}",
                xv.shape()
            )));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let hw = h * w;
        let inv = F::from_f64(1.0 / hw as f64);
        let mut out = vec![F::zero(); c];
        for ch in 0..c {
            let mut s = F::zero();
            for &v in &xv.data()[ch * hw..(ch + 1) * hw] {
                s = s + v;
            }
            out[ch] = s * inv;
        }
        let v = Tensor::from_vec(vec![c, 1, 1], out)?;
        Ok(self.push(v, self.rg(x), Op::MeanSpatial(x.0)))
    }

    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.shape()[1] != 1 || xv.shape()[2] != 1 {
            return Err(IsnetError::dim(format!(
                "broadcast_spatial expects [C,1,1], got {:?}",
                xv.shape()
            )));
        }
        let c = xv.shape()[0];
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            out.extend(std::iter::repeat(xv.data()[ch]).take(h * w));
        }
        let v = Tensor::from_vec(vec![c, h, w], out)?;
        Ok(self.push(v, self.rg(x), Op::BroadcastSpatial(x.0)))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(IsnetError::usage("concat_channels needs at least one operand"));
        }
        let (h, w) = {
            let s = self.value(parts[0]).shape();
            if s.len() != 3 {
                return Err(IsnetError::dim(format!("concat expects [C,h,w], got {:?}", s)));
            }
            (s[1], s[2])
        };
        let mut data = Vec::new();
        let mut c_total = 0;
        let mut rg = false;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 3 || v.shape()[1] != h || v.shape()[2] != w {
                return Err(IsnetError::dim(format!(
                    "concat spatial mismatch: {:?} vs [{},{}]",
                    v.shape(),
                    h,
                    w
                )));
            }
            c_total += v.shape()[0];
            data.extend_from_slice(v.data());
            rg |= self.rg(p);
        }
        let v = Tensor::from_vec(vec![c_total, h, w], data)?;
        Ok(self.push(v, rg, Op::ConcatChannels(parts.iter().map(|p| p.0).collect())))
    }

    pub fn conv3x3_s2(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(weight);
        let bv = self.value(bias);
        if xv.rank() != 3 || wv.rank() != 4 || wv.shape()[2] != 3 || wv.shape()[3] != 3 {
            return Err(IsnetError::dim(format!(
                "conv3x3: input {:?}, weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (c_in, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let c_out = wv.shape()[0];
        if wv.shape()[1] != c_in || bv.shape() != [c_out] {
            return Err(IsnetError::dim(format!(
                "conv3x3 channel mismatch: input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        // stride 2, pad 1
        let ho = h.div_ceil(2);
        let wo = w.div_ceil(2);
        let n = ho * wo;
        let mut patches = vec![F::zero(); c_in * 9 * n];
        for ci in 0..c_in {
            let plane = &xv.data()[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let row = &mut patches[(ci * 9 + ky * 3 + kx) * n..(ci * 9 + ky * 3 + kx + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            row[oy * wo + ox] = plane[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
        let patches = Tensor::from_vec(vec![c_in * 9, n], patches)?;
        let w_flat = wv.reshaped(&[c_out, c_in * 9])?;
        let mut out = matmul(&w_flat, &patches)?;
        for co in 0..c_out {
            let b = bv.data()[co];
            for v in out.data_mut()[co * n..(co + 1) * n].iter_mut() {
                *v = *v + b;
            }
        }
        let v = out.reshaped(&[c_out, ho, wo])?;
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            v,
            rg,
            Op::Conv3x3S2 {
                x: x.0,
                weight: weight.0,
                bias: bias.0,
                patches,
            },
        ))
    }

    pub fn spatial_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(IsnetError::dim(format!(
                "spatial_norm expects [C,h,w], got {:?}",
                xv.shape()
            )));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(IsnetError::dim(format!(
                "spatial_norm scale/shift must be [{}], got {:?}/{:?}",
                c,
                gv.shape(),
                bv.shape()
            )));
        }
        let hw = h * w;
        let inv_n = F::from_f64(1.0 / hw as f64);
        let eps = F::from_f64(NORM_EPS);
        let mut xhat = vec![F::zero(); c * hw];
        let mut inv_std = vec![F::zero(); c];
        let mut out = vec![F::zero(); c * hw];
        for ch in 0..c {
            let plane = &xv.data()[ch * hw..(ch + 1) * hw];
            let mut mean = F::zero();
            for &v in plane {
                mean = mean + v;
            }
            mean = mean * inv_n;
            let mut var = F::zero();
            for &v in plane {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_n;
            let istd = (var + eps).sqrt().recip();
            inv_std[ch] = istd;
            let (g, b) = (gv.data()[ch], bv.data()[ch]);
            for (i, &v) in plane.iter().enumerate() {
                let xh = (v - mean) * istd;
                xhat[ch * hw + i] = xh;
                out[ch * hw + i] = g * xh + b;
            }
        }
        let xhat = Tensor::from_vec(vec![c, h, w], xhat)?;
        let v = Tensor::from_vec(vec![c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            v,
            rg,
            Op::SpatialNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn upsample8x(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(IsnetError::dim(format!(
                "upsample8x expects [C,h,w], got {:?}",
                xv.shape()
            )));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (ho, wo) = (h * 8, w * 8);
        let ys = axis_lerp_table(h, ho);
        let xs = axis_lerp_table(w, wo);
        let mut out = vec![F::zero(); c * ho * wo];
        for ch in 0..c {
            let plane = &xv.data()[ch * h * w..(ch + 1) * h * w];
            for (oy, &(y0, y1, dy)) in ys.iter().enumerate() {
                let row0 = &plane[y0 * w..(y0 + 1) * w];
                let row1 = &plane[y1 * w..(y1 + 1) * w];
                let dy = F::from_f64(dy);
                let orow = &mut out[ch * ho * wo + oy * wo..ch * ho * wo + (oy + 1) * wo];
                for (ox, &(x0, x1, dx)) in xs.iter().enumerate() {
                    let dx = F::from_f64(dx);
                    // lerp form keeps constant fields exactly constant
                    let a = row0[x0] + dx * (row0[x1] - row0[x0]);
                    let b = row1[x0] + dx * (row1[x1] - row1[x0]);
                    orow[ox] = a + dy * (b - a);
                }
            }
        }
        let v = Tensor::from_vec(vec![c, ho, wo], out)?;
        Ok(self.push(v, self.rg(x), Op::Upsample8x(x.0)))
    }

    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if idx.is_empty() {
            return Err(IsnetError::usage("gather_elems needs at least one index"));
        }
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            let v = *xv.data().get(i).ok_or_else(|| {
                IsnetError::dim(format!("gather index {} out of bounds for {} elements", i, xv.len()))
            })?;
            out.push(v);
        }
        let v = Tensor::from_vec(vec![idx.len()], out)?;
        Ok(self.push(
            v,
            self.rg(x),
            Op::GatherElems {
                x: x.0,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn gather_columns(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(IsnetError::dim(format!(
                "gather_columns expects rank-2, got {:?}",
                xv.shape()
            )));
        }
        let (c, n) = (xv.shape()[0], xv.shape()[1]);
        if cols.is_empty() {
            return Err(IsnetError::usage("gather_columns needs at least one column"));
        }
        let mut out = Vec::with_capacity(c * cols.len());
        for row in 0..c {
            for &j in cols {
                if j >= n {
                    return Err(IsnetError::dim(format!("column {} out of bounds (N={})", j, n)));
                }
                out.push(xv.data()[row * n + j]);
            }
        }
        let v = Tensor::from_vec(vec![c, cols.len()], out)?;
        Ok(self.push(
            v,
            self.rg(x),
            Op::GatherColumns {
                x: x.0,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Build a `[C,N]` matrix by copying each part's column vector into its
    /// member columns. Every column must be claimed by exactly one part.
    pub fn scatter_columns(&mut self, parts: &[(Var, Vec<usize>)], n: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(IsnetError::usage("scatter_columns needs at least one part"));
        }
        let c = self.value(parts[0].0).shape()[0];
        let mut claimed = vec![false; n];
        let mut out = vec![F::zero(); c * n];
        let mut rg = false;
        for (v, cols) in parts {
            let pv = self.value(*v);
            if pv.shape() != [c, 1] {
                return Err(IsnetError::dim(format!(
                    "scatter part must be [{},1], got {:?}",
                    c,
                    pv.shape()
                )));
            }
            for &j in cols {
                if j >= n || claimed[j] {
                    return Err(IsnetError::Internal(format!(
                        "scatter column {} invalid or claimed twice (N={})",
                        j, n
                    )));
                }
                claimed[j] = true;
                for row in 0..c {
                    out[row * n + j] = pv.data()[row];
                }
            }
            rg |= self.rg(*v);
        }
        if claimed.iter().any(|&x| !x) {
            return Err(IsnetError::Internal(
                "scatter_columns left columns unassigned".into(),
            ));
        }
        let v = Tensor::from_vec(vec![c, n], out)?;
        Ok(self.push(
            v,
            rg,
            Op::ScatterColumns {
                parts: parts.iter().map(|(v, _)| v.0).collect(),
                cols: parts.iter().map(|(_, c)| c.clone()).collect(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = F::zero();
        for &v in self.value(x).data() {
            s = s + v;
        }
        self.push(Tensor::scalar(s), self.rg(x), Op::Sum(x.0))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a scalar loss; populates gradients of every tracked
    /// node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(IsnetError::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Tensor<F>>> = (0..n_nodes).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), F::one()));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Tensor<F>>], parent: usize, contrib: Tensor<F>) -> Result<()> {
        match &mut grads[parent] {
            Some(existing) => existing.add_assign(&contrib),
            slot => {
                *slot = Some(contrib);
                Ok(())
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let acc = Self::accumulate;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.nodes[*a].requires_grad {
                    acc(grads, *a, g.clone())?;
                }
                if self.nodes[*b].requires_grad {
                    acc(grads, *b, g.clone())?;
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].requires_grad {
                    acc(grads, *a, g.zip_map(&self.nodes[*b].value, |x, y| x * y)?)?;
                }
                if self.nodes[*b].requires_grad {
                    acc(grads, *b, g.zip_map(&self.nodes[*a].value, |x, y| x * y)?)?;
                }
            }
            Op::MulConst(a, c) => {
                if self.nodes[*a].requires_grad {
                    acc(grads, *a, g.zip_map(c, |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[*a].requires_grad {
                    let c = *c;
                    acc(grads, *a, g.map(|x| x * c))?;
                }
            }
            Op::Matmul(a, b) => {
                if self.nodes[*a].requires_grad {
                    acc(grads, *a, matmul_nt(g, &self.nodes[*b].value)?)?;
                }
                if self.nodes[*b].requires_grad {
                    acc(grads, *b, matmul_tn(&self.nodes[*a].value, g)?)?;
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.nodes[*x].requires_grad {
                    acc(grads, *x, g.clone())?;
                }
                if self.nodes[*bias].requires_grad {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    let mut db = vec![F::zero(); r];
                    for (row, d) in db.iter_mut().enumerate() {
                        for &v in &g.data()[row * c..(row + 1) * c] {
                            *d = *d + v;
                        }
                    }
                    acc(grads, *bias, Tensor::from_vec(vec![r], db)?)?;
                }
            }
            Op::Reshape(x) => {
                if self.nodes[*x].requires_grad {
                    acc(grads, *x, g.reshaped(self.nodes[*x].value.shape())?)?;
                }
            }
            Op::Permute(x, perm) => {
                if self.nodes[*x].requires_grad {
                    acc(grads, *x, permute(g, &inverse_perm(perm))?)?;
                }
            }
            Op::SoftmaxLast(x) => {
                if self.nodes[*x].requires_grad {
                    let y = &self.nodes[i].value;
                    let n = *y.shape().last().unwrap();
                    let rows = y.len() / n;
                    let mut dx = vec![F::zero(); y.len()];
                    for r in 0..rows {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let mut dot = F::zero();
                        for (&yv, &gv) in yr.iter().zip(gr.iter()) {
                            dot = dot + yv * gv;
                        }
                        for (k, d) in dx[r * n..(r + 1) * n].iter_mut().enumerate() {
                            *d = yr[k] * (gr[k] - dot);
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(y.shape().to_vec(), dx)?)?;
                }
            }
            Op::LogSoftmaxLast(x) => {
                if self.nodes[*x].requires_grad {
                    let y = &self.nodes[i].value;
                    let n = *y.shape().last().unwrap();
                    let rows = y.len() / n;
                    let mut dx = vec![F::zero(); y.len()];
                    for r in 0..rows {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let mut gsum = F::zero();
                        for &gv in gr {
                            gsum = gsum + gv;
                        }
                        for (k, d) in dx[r * n..(r + 1) * n].iter_mut().enumerate() {
                            *d = gr[k] - yr[k].exp() * gsum;
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(y.shape().to_vec(), dx)?)?;
                }
            }
            Op::Relu(x) => {
                if self.nodes[*x].requires_grad {
                    let xv = &self.nodes[*x].value;
                    acc(
                        grads,
                        *x,
                        g.zip_map(xv, |gv, v| if v > F::zero() { gv } else { F::zero() })?,
                    )?;
                }
            }
            Op::MeanSpatial(x) => {
                if self.nodes[*x].requires_grad {
                    let xs = self.nodes[*x].value.shape();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let inv = F::from_f64(1.0 / (h * w) as f64);
                    let mut dx = Vec::with_capacity(c * h * w);
                    for ch in 0..c {
                        let v = g.data()[ch] * inv;
                        dx.extend(std::iter::repeat(v).take(h * w));
                    }
                    acc(grads, *x, Tensor::from_vec(vec![c, h, w], dx)?)?;
                }
            }
            Op::BroadcastSpatial(x) => {
                if self.nodes[*x].requires_grad {
                    let c = self.nodes[*x].value.shape()[0];
                    let hw = g.len() / c;
                    let mut dx = vec![F::zero(); c];
                    for (ch, d) in dx.iter_mut().enumerate() {
                        for &v in &g.data()[ch * hw..(ch + 1) * hw] {
                            *d = *d + v;
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(vec![c, 1, 1], dx)?)?;
                }
            }
            Op::ConcatChannels(parts) => {
                let (h, w) = (g.shape()[1], g.shape()[2]);
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].value.shape()[0];
                    if self.nodes[p].requires_grad {
                        let slice = g.data()[offset * h * w..(offset + pc) * h * w].to_vec();
                        acc(grads, p, Tensor::from_vec(vec![pc, h, w], slice)?)?;
                    }
                    offset += pc;
                }
            }
            Op::Conv3x3S2 {
                x,
                weight,
                bias,
                patches,
            } => {
                let c_out = g.shape()[0];
                let n = g.shape()[1] * g.shape()[2];
                let g_flat = g.reshaped(&[c_out, n])?;
                if self.nodes[*weight].requires_grad {
                    let dw = matmul_nt(&g_flat, patches)?;
                    acc(grads, *weight, dw.reshaped(self.nodes[*weight].value.shape())?)?;
                }
                if self.nodes[*bias].requires_grad {
                    let mut db = vec![F::zero(); c_out];
                    for (co, d) in db.iter_mut().enumerate() {
                        for &v in &g_flat.data()[co * n..(co + 1) * n] {
                            *d = *d + v;
                        }
                    }
                    acc(grads, *bias, Tensor::from_vec(vec![c_out], db)?)?;
                }
                if self.nodes[*x].requires_grad {
                    let w_flat = self.nodes[*weight]
                        .value
                        .reshaped(&[c_out, patches.shape()[0]])?;
                    let dp = matmul_tn(&w_flat, &g_flat)?; // [Cin*9, N]
                    let xs = self.nodes[*x].value.shape();
                    let (c_in, h, w) = (xs[0], xs[1], xs[2]);
                    let ho = h.div_ceil(2);
                    let wo = w.div_ceil(2);
                    let mut dx = vec![F::zero(); c_in * h * w];
                    for ci in 0..c_in {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let row = &dp.data()[(ci * 9 + ky * 3 + kx) * n..(ci * 9 + ky * 3 + kx + 1) * n];
                                for oy in 0..ho {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..wo {
                                        let ix = (ox * 2 + kx) as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let d = &mut dx[ci * h * w + iy as usize * w + ix as usize];
                                        *d = *d + row[oy * wo + ox];
                                    }
                                }
                            }
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(vec![c_in, h, w], dx)?)?;
                }
            }
            Op::SpatialNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = xhat.shape()[0];
                let hw = xhat.len() / c;
                let inv_n = F::from_f64(1.0 / hw as f64);
                if self.nodes[*gamma].requires_grad {
                    let mut dg = vec![F::zero(); c];
                    for (ch, d) in dg.iter_mut().enumerate() {
                        for k in 0..hw {
                            *d = *d + g.data()[ch * hw + k] * xhat.data()[ch * hw + k];
                        }
                    }
                    acc(grads, *gamma, Tensor::from_vec(vec![c], dg)?)?;
                }
                if self.nodes[*beta].requires_grad {
                    let mut db = vec![F::zero(); c];
                    for (ch, d) in db.iter_mut().enumerate() {
                        for &v in &g.data()[ch * hw..(ch + 1) * hw] {
                            *d = *d + v;
                        }
                    }
                    acc(grads, *beta, Tensor::from_vec(vec![c], db)?)?;
                }
                if self.nodes[*x].requires_grad {
                    let gv = &self.nodes[*gamma].value;
                    let mut dx = vec![F::zero(); c * hw];
                    for ch in 0..c {
                        let gamma_c = gv.data()[ch];
                        let istd = inv_std[ch];
                        let gr = &g.data()[ch * hw..(ch + 1) * hw];
                        let xh = &xhat.data()[ch * hw..(ch + 1) * hw];
                        let mut mean_dy = F::zero();
                        let mut mean_dy_xh = F::zero();
                        for k in 0..hw {
                            let dy = gr[k] * gamma_c;
                            mean_dy = mean_dy + dy;
                            mean_dy_xh = mean_dy_xh + dy * xh[k];
                        }
                        mean_dy = mean_dy * inv_n;
                        mean_dy_xh = mean_dy_xh * inv_n;
                        for k in 0..hw {
                            let dy = gr[k] * gamma_c;
                            dx[ch * hw + k] = istd * (dy - mean_dy - xh[k] * mean_dy_xh);
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(xhat.shape().to_vec(), dx)?)?;
                }
            }
            Op::Upsample8x(x) => {
                if self.nodes[*x].requires_grad {
                    let xs = self.nodes[*x].value.shape();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let (ho, wo) = (h * 8, w * 8);
                    let ys = axis_lerp_table(h, ho);
                    let xs_tab = axis_lerp_table(w, wo);
                    let mut dx = vec![F::zero(); c * h * w];
                    for ch in 0..c {
                        let gplane = &g.data()[ch * ho * wo..(ch + 1) * ho * wo];
                        let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
                        for (oy, &(y0, y1, dy)) in ys.iter().enumerate() {
                            let wy1 = F::from_f64(dy);
                            let wy0 = F::one() - wy1;
                            for (ox, &(x0, x1, dxf)) in xs_tab.iter().enumerate() {
                                let wx1 = F::from_f64(dxf);
                                let wx0 = F::one() - wx1;
                                let gv = gplane[oy * wo + ox];
                                dplane[y0 * w + x0] = dplane[y0 * w + x0] + gv * wy0 * wx0;
                                dplane[y0 * w + x1] = dplane[y0 * w + x1] + gv * wy0 * wx1;
                                dplane[y1 * w + x0] = dplane[y1 * w + x0] + gv * wy1 * wx0;
                                dplane[y1 * w + x1] = dplane[y1 * w + x1] + gv * wy1 * wx1;
                            }
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(vec![c, h, w], dx)?)?;
                }
            }
            Op::GatherElems { x, idx } => {
                if self.nodes[*x].requires_grad {
                    let xv = &self.nodes[*x].value;
                    let mut dx = vec![F::zero(); xv.len()];
                    for (k, &i2) in idx.iter().enumerate() {
                        dx[i2] = dx[i2] + g.data()[k];
                    }
                    acc(grads, *x, Tensor::from_vec(xv.shape().to_vec(), dx)?)?;
                }
            }
            Op::GatherColumns { x, cols } => {
                if self.nodes[*x].requires_grad {
                    let xv = &self.nodes[*x].value;
                    let (c, n) = (xv.shape()[0], xv.shape()[1]);
                    let m = cols.len();
                    let mut dx = vec![F::zero(); c * n];
                    for row in 0..c {
                        for (k, &j) in cols.iter().enumerate() {
                            dx[row * n + j] = dx[row * n + j] + g.data()[row * m + k];
                        }
                    }
                    acc(grads, *x, Tensor::from_vec(vec![c, n], dx)?)?;
                }
            }
            Op::ScatterColumns { parts, cols } => {
                let (c, n) = (g.shape()[0], g.shape()[1]);
                for (p, pcols) in parts.iter().zip(cols.iter()) {
                    if self.nodes[*p].requires_grad {
                        let mut dp = vec![F::zero(); c];
                        for row in 0..c {
                            for &j in pcols {
                                dp[row] = dp[row] + g.data()[row * n + j];
                            }
                        }
                        acc(grads, *p, Tensor::from_vec(vec![c, 1], dp)?)?;
                    }
                }
            }
            Op::Sum(x) => {
                if self.nodes[*x].requires_grad {
                    let gv = g.data()[0];
                    acc(grads, *x, Tensor::filled(self.nodes[*x].value.shape(), gv))?;
                }
            }
        }
        Ok(())
    }

    /// Minimum |pre-activation| over every relu recorded so far. Used to pick
    /// finite-difference probe points away from the kink.
    pub fn min_relu_margin(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in self.nodes[x].value.data() {
                    let a = v.to_f64().abs();
                    if min.map_or(true, |m| a < m) {
                        min = Some(a);
                    }
                }
            }
        }
        min
    }
}

/// Per-output-index source pair and interpolation fraction for bilinear
/// resize with align-corners disabled.
pub(crate) fn axis_lerp_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let floor = src.floor();
            let mut i0 = floor as isize;
            let mut frac = src - floor;
            let mut i1 = i0 + 1;
            if i0 < 0 {
                i0 = 0;
                i1 = 0;
                frac = 0.0;
            }
            if i1 >= n_in as isize {
                i1 = n_in as isize - 1;
                if i0 > i1 {
                    i0 = i1;
                }
            }
            (i0 as usize, i1 as usize, frac)
        })
        .collect()
}
