//! Semantic-level context module: predict per-pixel class logits, group
//! pixels into argmax category regions, pool each region with logit-softmax
//! weights and scatter the region vectors back per pixel.
//!
//! The distribution D carries raw logits; softmax is applied downstream (in
//! the loss over all classes, and member-wise over a region's own logits when
//! pooling). The argmax grouping is a hard selection and contributes no
//! gradient; gradients flow through the pooling weights and the member
//! representations.

use crate::blocks::{HeadAux, Session};
use crate::error::{IsnetError, Result};
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

/// Per-pixel argmax class labels, row-major over positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionAssignment {
    pub labels: Vec<usize>,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl RegionAssignment {
    /// Member pixel indices (flattened position order) of class `ck`.
    pub fn members(&self, ck: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == ck)
            .map(|(i, _)| i)
            .collect()
    }

    /// Classes with at least one member, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut present = vec![false; self.k];
        for &l in &self.labels {
            present[l] = true;
        }
        (0..self.k).filter(|&c| present[c]).collect()
    }

    /// Smallest gap between the winning logit and the runner-up over all
    /// pixels; finite-difference probes need this above ~10 eps.
    pub fn min_margin<F: Scalar>(d: &Tensor<F>) -> f64 {
        let k = d.shape()[0];
        let n = d.len() / k;
        let mut min = f64::INFINITY;
        for p in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for c in 0..k {
                let v = d.data()[c * n + p].to_f64();
                if v > best {
                    second = best;
                    best = v;
                } else if v > second {
                    second = v;
                }
            }
            if best - second < min {
                min = best - second;
            }
        }
        min
    }
}

/// Raw class logits from the auxiliary head; `[C,h,w] -> [K,h,w]`.
pub fn predict_distribution<F: Scalar>(
    head: &HeadAux,
    sess: &mut Session<F>,
    r: Var,
) -> Result<Var> {
    head.forward(sess, r)
}

/// Per-pixel argmax with smallest-index tie-breaking.
pub fn group_regions<F: Scalar>(d: &Tensor<F>) -> Result<RegionAssignment> {
    if d.rank() != 3 {
        return Err(IsnetError::dim(format!(
            "group_regions expects [K,h,w], got {:?}",
            d.shape()
        )));
    }
    let (k, h, w) = (d.shape()[0], d.shape()[1], d.shape()[2]);
    let n = h * w;
    let mut labels = vec![0usize; n];
    for (p, label) in labels.iter_mut().enumerate() {
        let mut best = d.data()[p];
        for c in 1..k {
            let v = d.data()[c * n + p];
            // strict inequality keeps the smallest index on ties
            if v > best {
                best = v;
                *label = c;
            }
        }
    }
    Ok(RegionAssignment { labels, h, w, k })
}

/// R'_ck: softmax-weighted combination of class `ck`'s member representation
/// vectors, weights from the members' class-`ck` logits. Returns `[C,1]`.
///
/// `r_flat` is the `[C,N]` flattened representation, `d` the `[K,h,w]` logit
/// var on the same tape.
pub fn region_representation<F: Scalar>(
    sess: &mut Session<F>,
    r_flat: Var,
    d: Var,
    assignment: &RegionAssignment,
    ck: usize,
) -> Result<Var> {
    let members = assignment.members(ck);
    if members.is_empty() {
        return Err(IsnetError::Internal(format!("region {ck} is empty")));
    }
    let n = assignment.h * assignment.w;
    // class-ck logit of each member pixel, flattened [K,h,w] indexing
    let logit_idx: Vec<usize> = members.iter().map(|&p| ck * n + p).collect();
    let member_logits = sess.tape.gather_elems(d, &logit_idx)?;
    let weights = sess.tape.softmax_last(member_logits);
    let weights_col = sess.tape.reshape(weights, &[members.len(), 1])?;
    let member_reprs = sess.tape.gather_columns(r_flat, &members)?;
    sess.tape.matmul(member_reprs, weights_col)
}

/// R_sl: every pixel's column is its class's region representation.
pub fn scatter_regions<F: Scalar>(
    sess: &mut Session<F>,
    assignment: &RegionAssignment,
    reprs: &[(usize, Var)],
) -> Result<Var> {
    for &c in &assignment.present_classes() {
        if !reprs.iter().any(|&(ck, _)| ck == c) {
            return Err(IsnetError::Internal(format!(
                "no region representation for present class {c}"
            )));
        }
    }
    let n = assignment.h * assignment.w;
    let parts: Vec<(Var, Vec<usize>)> = reprs
        .iter()
        .map(|&(ck, v)| (v, assignment.members(ck)))
        .collect();
    let c = sess.tape.value(reprs[0].1).shape()[0];
    let flat = sess.tape.scatter_columns(&parts, n)?;
    sess.tape.reshape(flat, &[c, assignment.h, assignment.w])
}

/// Full module: predict D, group, pool per present class, scatter. Returns
/// `(R_sl, D)`; D is also consumed by the auxiliary loss.
pub fn slcm_forward<F: Scalar>(
    head: &HeadAux,
    sess: &mut Session<F>,
    r: Var,
) -> Result<(Var, Var)> {
    let shape = sess.tape.value(r).shape().to_vec();
    if shape.len() != 3 {
        return Err(IsnetError::dim(format!("slcm expects [C,h,w], got {:?}", shape)));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let d = predict_distribution(head, sess, r)?;
    let assignment = group_regions(sess.tape.value(d))?;
    let r_flat = sess.tape.reshape(r, &[c, h * w])?;
    let mut reprs = Vec::new();
    for ck in assignment.present_classes() {
        let v = region_representation(sess, r_flat, d, &assignment, ck)?;
        reprs.push((ck, v));
    }
    let r_sl = scatter_regions(sess, &assignment, &reprs)?;
    Ok((r_sl, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ParamStore;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let count: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..count).map(|_| r.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn argmax_basic_and_tie_break() {
        let d = Tensor::from_vec(vec![2, 1, 2], vec![1.0, 0.5, 0.0, 0.5]).unwrap();
        let a = group_regions(&d).unwrap();
        // pixel 0: logits (1,0) -> class 0; pixel 1: tied (0.5,0.5) -> class 0
        assert_eq!(a.labels, vec![0, 0]);
    }

    #[test]
    fn argmax_matches_exhaustive_scan() {
        let mut r = rng(0);
        let d = rand_tensor(&mut r, &[3, 4, 4]);
        let a = group_regions(&d).unwrap();
        for p in 0..16 {
            let mut want = 0;
            for c in 1..3 {
                if d.data()[c * 16 + p] > d.data()[want * 16 + p] {
                    want = c;
                }
            }
            assert_eq!(a.labels[p], want);
        }
    }

    #[test]
    fn single_member_region_is_identity() {
        let mut r = rng(1);
        let rep = rand_tensor(&mut r, &[4, 2, 2]);
        // class 1 wins only at pixel 3
        let d = Tensor::from_vec(
            vec![2, 2, 2],
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let store: ParamStore<f64> = ParamStore::new();
        let mut sess = Session::new(&store);
        let rv = sess.tape.leaf(rep.clone(), false);
        let dv = sess.tape.leaf(d.clone(), false);
        let a = group_regions(&d).unwrap();
        let r_flat = sess.tape.reshape(rv, &[4, 4]).unwrap();
        let pooled = region_representation(&mut sess, r_flat, dv, &a, 1).unwrap();
        let pv = sess.tape.value(pooled);
        for c in 0..4 {
            assert_eq!(pv.data()[c], rep.data()[c * 4 + 3]);
        }
    }

    #[test]
    fn equal_logits_give_arithmetic_mean() {
        let rep = Tensor::from_vec(vec![2, 1, 2], vec![1.0, 3.0, -2.0, 4.0]).unwrap();
        let d = Tensor::from_vec(vec![1, 1, 2], vec![0.7, 0.7]).unwrap();
        let store: ParamStore<f64> = ParamStore::new();
        let mut sess = Session::new(&store);
        let rv = sess.tape.leaf(rep, false);
        let dv = sess.tape.leaf(d.clone(), false);
        let a = group_regions(&d).unwrap();
        let r_flat = sess.tape.reshape(rv, &[2, 2]).unwrap();
        let pooled = region_representation(&mut sess, r_flat, dv, &a, 0).unwrap();
        let pv = sess.tape.value(pooled);
        assert!((pv.data()[0] - 2.0).abs() <= 1e-12);
        assert!((pv.data()[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn three_member_weights_match_scalar_oracle() {
        // logits (0, ln2, ln4) -> weights (1/7, 2/7, 4/7)
        let mut r = rng(2);
        let rep = rand_tensor(&mut r, &[3, 1, 3]);
        let d = Tensor::from_vec(vec![1, 1, 3], vec![0.0, 2f64.ln(), 4f64.ln()]).unwrap();
        let store: ParamStore<f64> = ParamStore::new();
        let mut sess = Session::new(&store);
        let rv = sess.tape.leaf(rep.clone(), false);
        let dv = sess.tape.leaf(d.clone(), false);
        let a = group_regions(&d).unwrap();
        let r_flat = sess.tape.reshape(rv, &[3, 3]).unwrap();
        let pooled = region_representation(&mut sess, r_flat, dv, &a, 0).unwrap();
        let pv = sess.tape.value(pooled);
        let weights = [1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0];
        for c in 0..3 {
            let want: f64 = (0..3).map(|n| weights[n] * rep.data()[c * 3 + n]).sum();
            assert!((pv.data()[c] - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn scatter_all_one_class_is_constant() {
        let mut r = rng(3);
        let rep = rand_tensor(&mut r, &[4, 2, 2]);
        let d = Tensor::from_vec(vec![2, 2, 2], vec![1.0; 4].into_iter().chain(vec![0.0; 4]).collect())
            .unwrap();
        let store: ParamStore<f64> = ParamStore::new();
        let mut sess = Session::new(&store);
        let rv = sess.tape.leaf(rep, false);
        let dv = sess.tape.leaf(d.clone(), false);
        let a = group_regions(&d).unwrap();
        let r_flat = sess.tape.reshape(rv, &[4, 4]).unwrap();
        let pooled = region_representation(&mut sess, r_flat, dv, &a, 0).unwrap();
        let r_sl = scatter_regions(&mut sess, &a, &[(0, pooled)]).unwrap();
        let sv = sess.tape.value(r_sl);
        let pv = sess.tape.value(pooled).clone();
        for c in 0..4 {
            for p in 0..4 {
                assert_eq!(sv.data()[c * 4 + p], pv.data()[c]);
            }
        }
    }

    #[test]
    fn checkerboard_scatter_alternates_two_vectors() {
        let mut r = rng(4);
        let rep = rand_tensor(&mut r, &[3, 2, 2]);
        // checkerboard classes: positions 0,3 class 0; 1,2 class 1
        let d = Tensor::from_vec(
            vec![2, 2, 2],
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0],
        )
        .unwrap();
        let store: ParamStore<f64> = ParamStore::new();
        let mut sess = Session::new(&store);
        let rv = sess.tape.leaf(rep, false);
        let dv = sess.tape.leaf(d.clone(), false);
        let a = group_regions(&d).unwrap();
        assert_eq!(a.labels, vec![0, 1, 1, 0]);
        let r_flat = sess.tape.reshape(rv, &[3, 4]).unwrap();
        let p0 = region_representation(&mut sess, r_flat, dv, &a, 0).unwrap();
        let p1 = region_representation(&mut sess, r_flat, dv, &a, 1).unwrap();
        let r_sl = scatter_regions(&mut sess, &a, &[(0, p0), (1, p1)]).unwrap();
        let sv = sess.tape.value(r_sl).clone();
        let v0 = sess.tape.value(p0);
        let v1 = sess.tape.value(p1);
        for c in 0..3 {
            assert_eq!(sv.data()[c * 4], v0.data()[c]);
            assert_eq!(sv.data()[c * 4 + 3], v0.data()[c]);
            assert_eq!(sv.data()[c * 4 + 1], v1.data()[c]);
            assert_eq!(sv.data()[c * 4 + 2], v1.data()[c]);
        }
    }

    #[test]
    fn uniform_logits_collapse_to_spatial_mean() {
        // zero-weight head with zero bias: every position gets identical
        // logits, the tie rule makes one region of class 0, and pooling with
        // equal weights is the spatial mean of R
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng(5);
        let head = HeadAux::new(&mut store, &mut r, "aux", 4, 4, 3);
        *store.value_mut(head.conv1.weight) = Tensor::zeros(&[4, 4]);
        *store.value_mut(head.conv2.weight) = Tensor::zeros(&[3, 4]);
        let rep = rand_tensor(&mut r, &[4, 2, 2]);
        let mut sess = Session::new(&store);
        let rv = sess.tape.leaf(rep.clone(), false);
        let (r_sl, d) = slcm_forward(&head, &mut sess, rv).unwrap();
        assert_eq!(sess.tape.value(d).shape(), &[3, 2, 2]);
        let sv = sess.tape.value(r_sl);
        for c in 0..4 {
            let mean: f64 = rep.data()[c * 4..(c + 1) * 4].iter().sum::<f64>() / 4.0;
            for &v in &sv.data()[c * 4..(c + 1) * 4] {
                assert!((v - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_shape_contract_and_same_class_identity() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng(6);
        let head = HeadAux::new(&mut store, &mut r, "aux", 6, 6, 4);
        let rep = rand_tensor(&mut r, &[6, 3, 3]);
        let mut sess = Session::new(&store);
        let rv = sess.tape.leaf(rep, false);
        let (r_sl, d) = slcm_forward(&head, &mut sess, rv).unwrap();
        assert_eq!(sess.tape.value(r_sl).shape(), &[6, 3, 3]);
        let a = group_regions(sess.tape.value(d)).unwrap();
        let sv = sess.tape.value(r_sl);
        for p in 0..9 {
            for q in 0..9 {
                if a.labels[p] == a.labels[q] {
                    for c in 0..6 {
                        // bit identical, not just close
                        assert_eq!(sv.data()[c * 9 + p].to_bits(), sv.data()[c * 9 + q].to_bits());
                    }
                }
            }
        }
    }

    /// Naive scalar re-implementation of the whole module, given fixed head
    /// outputs; used as the vectorized path's oracle.
    pub(crate) fn slcm_oracle(rep: &Tensor<f64>, d: &Tensor<f64>) -> Tensor<f64> {
        let (c, h, w) = (rep.shape()[0], rep.shape()[1], rep.shape()[2]);
        let k = d.shape()[0];
        let n = h * w;
        let mut labels = vec![0usize; n];
        for (p, label) in labels.iter_mut().enumerate() {
            for cls in 1..k {
                if d.data()[cls * n + p] > d.data()[*label * n + p] {
                    *label = cls;
                }
            }
        }
        let mut out = Tensor::zeros(&[c, h, w]);
        for ck in 0..k {
            let members: Vec<usize> = (0..n).filter(|&p| labels[p] == ck).collect();
            if members.is_empty() {
                continue;
            }
            let logits: Vec<f64> = members.iter().map(|&p| d.data()[ck * n + p]).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut pooled = vec![0.0; c];
            for (i, &p) in members.iter().enumerate() {
                for (ch, pc) in pooled.iter_mut().enumerate() {
                    *pc += exps[i] / z * rep.data()[ch * n + p];
                }
            }
            for &p in &members {
                for ch in 0..c {
                    out.data_mut()[ch * n + p] = pooled[ch];
                }
            }
        }
        out
    }

    #[test]
    fn vectorized_matches_scalar_oracle() {
        let mut r = rng(7);
        for trial in 0..25 {
            let (c, h, w, k) = (
                r.gen_range(1..=6),
                r.gen_range(1..=8),
                r.gen_range(1..=8),
                r.gen_range(2..=5),
            );
            let rep = rand_tensor(&mut r, &[c, h, w]);
            let d = rand_tensor(&mut r, &[k, h, w]);
            let store: ParamStore<f64> = ParamStore::new();
            let mut sess = Session::new(&store);
            let rv = sess.tape.leaf(rep.clone(), false);
            let dv = sess.tape.leaf(d.clone(), false);
            let a = group_regions(&d).unwrap();
            let r_flat = sess.tape.reshape(rv, &[c, h * w]).unwrap();
            let mut reprs = Vec::new();
            for ck in a.present_classes() {
                let v = region_representation(&mut sess, r_flat, dv, &a, ck).unwrap();
                reprs.push((ck, v));
            }
            let r_sl = scatter_regions(&mut sess, &a, &reprs).unwrap();
            let want = slcm_oracle(&rep, &d);
            for (got, want) in sess.tape.value(r_sl).data().iter().zip(want.data()) {
                assert!((got - want).abs() <= 1e-10, "trial {trial}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn gradcheck_through_slcm() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut r = rng(8);
        let head = HeadAux::new(&mut store, &mut r, "aux", 4, 4, 3);
        // pick a probe whose argmax margins dwarf the perturbation
        let rep = loop {
            let rep = rand_tensor(&mut r, &[4, 3, 3]);
            let mut sess = Session::new(&store);
            let rv = sess.tape.leaf(rep.clone(), false);
            let (_, d) = slcm_forward(&head, &mut sess, rv).unwrap();
            if RegionAssignment::min_margin(sess.tape.value(d)) > 1e-3 {
                break rep;
            }
        };
        let report = grad_check(
            |tape, vars| {
                Session::on_tape(&store, tape, |sess| {
                    let (r_sl, _) = slcm_forward(&head, sess, vars[0])?;
                    let sq = sess.tape.mul(r_sl, r_sl)?;
                    Ok(sess.tape.sum(sq))
                })
            },
            &[rep],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-5, "{}", report.max_rel_err);
    }
}
