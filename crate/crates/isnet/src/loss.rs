//! Multi-task objective (auxiliary distribution loss, main loss, weighted
//! combination) and mean intersection-over-union evaluation.

use crate::blocks::Session;
use crate::error::{IsnetError, Result};
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Dense class labels; entries in [0,K) or IGNORE.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub labels: Vec<u8>,
    pub h: usize,
    pub w: usize,
}

impl LabelMap {
    pub fn new(labels: Vec<u8>, h: usize, w: usize) -> Result<Self> {
        if labels.len() != h * w {
            return Err(IsnetError::dim(format!(
                "label map holds {} entries for {h}x{w}",
                labels.len()
            )));
        }
        Ok(LabelMap { labels, h, w })
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        for (p, &l) in self.labels.iter().enumerate() {
            if l != IGNORE && l as usize >= k {
                return Err(IsnetError::data(format!(
                    "label {l} at pixel {p} out of range for {k} classes"
                )));
            }
        }
        Ok(())
    }
}

/// -log softmax(logits)[target]; None for the ignore value.
pub fn cross_entropy_pixel<F: Scalar>(logits: &[F], target: u8) -> Result<Option<F>> {
    if target == IGNORE {
        return Ok(None);
    }
    let k = logits.len();
    if target as usize >= k {
        return Err(IsnetError::data(format!(
            "target {target} out of range for {k} classes"
        )));
    }
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for &l in logits {
        z = z + (l - max).exp();
    }
    Ok(Some(z.ln() - (logits[target as usize] - max)))
}

/// Mean per-pixel cross entropy of raw logits `[K,H,W]` against `gt`;
/// ignored pixels are excluded from the denominator and an all-ignored map
/// yields the constant 0.
pub fn loss_o<F: Scalar>(sess: &mut Session<F>, o: Var, gt: &LabelMap) -> Result<Var> {
    let shape = sess.tape.value(o).shape().to_vec();
    if shape.len() != 3 {
        return Err(IsnetError::dim(format!("loss expects [K,H,W], got {shape:?}")));
    }
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    if gt.h != h || gt.w != w {
        return Err(IsnetError::dim(format!(
            "label extents {}x{} do not match logits {h}x{w}",
            gt.h, gt.w
        )));
    }
    gt.validate(k)?;
    let n = h * w;
    // [p, target[p]] entries of the per-pixel log-softmax
    let idx: Vec<usize> = gt
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != IGNORE)
        .map(|(p, &l)| p * k + l as usize)
        .collect();
    if idx.is_empty() {
        return Ok(sess.tape.constant(Tensor::scalar(F::zero())));
    }
    let flat = sess.tape.reshape(o, &[k, n])?;
    let nk = sess.tape.permute(flat, &[1, 0])?;
    let ls = sess.tape.log_softmax_last(nk);
    let picked = sess.tape.gather_elems(ls, &idx)?;
    let total = sess.tape.sum(picked);
    Ok(sess.tape.scale(total, F::from_f64(-1.0 / idx.len() as f64)))
}

/// Auxiliary loss: upsample the stride-8 logits to full resolution first,
/// then average the per-pixel cross entropy.
pub fn loss_d<F: Scalar>(sess: &mut Session<F>, d: Var, gt: &LabelMap) -> Result<Var> {
    let shape = sess.tape.value(d).shape().to_vec();
    if shape.len() != 3 || shape[1] * 8 != gt.h || shape[2] * 8 != gt.w {
        return Err(IsnetError::dim(format!(
            "auxiliary logits {shape:?} do not upsample to label extents {}x{}",
            gt.h, gt.w
        )));
    }
    let up = sess.tape.upsample8x(d)?;
    loss_o(sess, up, gt)
}

/// L = alpha * L_D + L_O.
pub fn total_loss<F: Scalar>(
    sess: &mut Session<F>,
    l_d: Option<Var>,
    l_o: Var,
    alpha: f64,
) -> Result<Var> {
    if alpha < 0.0 {
        return Err(IsnetError::usage(format!("alpha must be nonnegative, got {alpha}")));
    }
    match l_d {
        None => Ok(l_o),
        Some(l_d) => {
            let scaled = sess.tape.scale(l_d, F::from_f64(alpha));
            sess.tape.add(scaled, l_o)
        }
    }
}

/// Per-pixel argmax over the channel axis of `[K,H,W]` logits, smallest
/// index winning ties.
pub fn argmax_channel<F: Scalar>(o: &Tensor<F>) -> Vec<u8> {
    let k = o.shape()[0];
    let n = o.len() / k;
    let mut out = vec![0u8; n];
    for (p, slot) in out.iter_mut().enumerate() {
        let mut best = o.data()[p];
        for c in 1..k {
            let v = o.data()[c * n + p];
            if v > best {
                best = v;
                *slot = c as u8;
            }
        }
    }
    out
}

/// Row = ground truth, column = prediction; merges by addition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn accumulate(&mut self, pred: &[u8], gt: &LabelMap) -> Result<()> {
        if pred.len() != gt.labels.len() {
            return Err(IsnetError::dim(format!(
                "prediction holds {} entries, labels {}",
                pred.len(),
                gt.labels.len()
            )));
        }
        gt.validate(self.k)?;
        for (&p, &g) in pred.iter().zip(&gt.labels) {
            if g == IGNORE {
                continue;
            }
            if p as usize >= self.k {
                return Err(IsnetError::data(format!(
                    "prediction {p} out of range for {} classes",
                    self.k
                )));
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.k != other.k {
            return Err(IsnetError::dim(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU (None for classes absent from both prediction and
    /// ground truth) and the mean over present classes.
    pub fn miou(&self) -> Result<(Vec<Option<f64>>, f64)> {
        let mut per_class = vec![None; self.k];
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..self.k {
            let tp = self.counts[c * self.k + c];
            let fp: u64 = (0..self.k).filter(|&g| g != c).map(|g| self.counts[g * self.k + c]).sum();
            let fn_: u64 = (0..self.k).filter(|&p| p != c).map(|p| self.counts[c * self.k + p]).sum();
            let denom = tp + fp + fn_;
            if denom > 0 {
                let iou = tp as f64 / denom as f64;
                per_class[c] = Some(iou);
                sum += iou;
                present += 1;
            }
        }
        if present == 0 {
            return Err(IsnetError::UndefinedMetric(
                "every class is absent from both prediction and ground truth".into(),
            ));
        }
        Ok((per_class, sum / present as f64))
    }

    /// Tab-separated report: one `class_id<TAB>iou` row per present class,
    /// then `mIoU<TAB>value`.
    pub fn report(&self) -> Result<String> {
        let (per_class, mean) = self.miou()?;
        let mut out = String::new();
        for (c, iou) in per_class.iter().enumerate() {
            if let Some(iou) = iou {
                out.push_str(&format!("{c}\t{iou:.6}\n"));
            }
        }
        out.push_str(&format!("mIoU\t{mean:.6}\n"));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ParamStore;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let count: usize = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..count).map(|_| r.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn pixel_ce_uniform_and_saturated() {
        let got = cross_entropy_pixel(&[0.3f64; 4], 2).unwrap().unwrap();
        assert!((got - 4.0f64.ln()).abs() <= 1e-12);
        let mut hot = [0.0f64; 4];
        hot[1] = 1000.0;
        assert!(cross_entropy_pixel(&hot, 1).unwrap().unwrap() <= 1e-6);
        assert!(cross_entropy_pixel(&hot, IGNORE).unwrap().is_none());
        assert!(cross_entropy_pixel(&hot, 4).is_err());
    }

    #[test]
    fn pixel_ce_matches_extended_precision_oracle() {
        // -ln(e^1 / (e^1 + e^2 + e^3)) evaluated independently
        let want = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 1.0;
        let got = cross_entropy_pixel(&[1.0f64, 2.0, 3.0], 0).unwrap().unwrap();
        assert!((got - want).abs() <= 1e-12);
    }

    fn gt(labels: Vec<u8>, h: usize, w: usize) -> LabelMap {
        LabelMap::new(labels, h, w).unwrap()
    }

    #[test]
    fn loss_o_uniform_logits_give_ln_k() {
        for k in [2usize, 4, 10] {
            let store: ParamStore<f64> = ParamStore::new();
            let mut sess = Session::new(&store);
            let o = sess.tape.leaf(Tensor::filled(&[k, 2, 2], 0.7), false);
            let l = loss_o(&mut sess, o, &gt(vec![0, 1, 0, 1], 2, 2)).unwrap();
            let got = sess.tape.value(l).scalar_value().unwrap();
            assert!((got - (k as f64).ln()).abs() <= 1e-9, "K={k}");
        }
    }

    #[test]
    fn loss_o_all_ignored_is_zero_with_zero_grad() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut sess = Session::new(&store);
        let o = sess.tape.leaf(rand_tensor(0, &[3, 2, 2]), true);
        let l = loss_o(&mut sess, o, &gt(vec![IGNORE; 4], 2, 2)).unwrap();
        assert_eq!(sess.tape.value(l).scalar_value().unwrap(), 0.0);
        sess.tape.backward(l).unwrap();
        assert!(sess.tape.grad(o).is_none());
    }

    #[test]
    fn loss_o_matches_scalar_loop_oracle() {
        let o = rand_tensor(1, &[4, 3, 3]);
        let labels: Vec<u8> = vec![0, 1, 2, 3, IGNORE, 0, 2, 1, 3];
        let store: ParamStore<f64> = ParamStore::new();
        let mut sess = Session::new(&store);
        let ov = sess.tape.leaf(o.clone(), false);
        let l = loss_o(&mut sess, ov, &gt(labels.clone(), 3, 3)).unwrap();
        let got = sess.tape.value(l).scalar_value().unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for p in 0..9 {
            let logits: Vec<f64> = (0..4).map(|c| o.data()[c * 9 + p]).collect();
            if let Some(ce) = cross_entropy_pixel(&logits, labels[p]).unwrap() {
                sum += ce;
                count += 1;
            }
        }
        assert!((got - sum / count as f64).abs() <= 1e-8);
    }

    #[test]
    fn loss_d_constant_uniform_gives_ln_k() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut sess = Session::new(&store);
        let d = sess.tape.leaf(Tensor::filled(&[4, 2, 2], -0.3), false);
        let l = loss_d(&mut sess, d, &gt(vec![1; 256], 16, 16)).unwrap();
        let got = sess.tape.value(l).scalar_value().unwrap();
        assert!((got - 4.0f64.ln()).abs() <= 1e-9);
    }

    #[test]
    fn loss_d_matches_scalar_loop_oracle() {
        let d = rand_tensor(2, &[3, 2, 2]);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<u8> = (0..256).map(|_| r.gen_range(0..3) as u8).collect();
        let store: ParamStore<f64> = ParamStore::new();
        let mut sess = Session::new(&store);
        let dv = sess.tape.leaf(d.clone(), false);
        let l = loss_d(&mut sess, dv, &gt(labels.clone(), 16, 16)).unwrap();
        let got = sess.tape.value(l).scalar_value().unwrap();
        // oracle reuses the upsample kernel but loops the loss per pixel
        let mut sess2 = Session::new(&store);
        let dv2 = sess2.tape.leaf(d, false);
        let up = sess2.tape.upsample8x(dv2).unwrap();
        let uv = sess2.tape.value(up);
        let mut sum = 0.0;
        for p in 0..256 {
            let logits: Vec<f64> = (0..3).map(|c| uv.data()[c * 256 + p]).collect();
            sum += cross_entropy_pixel(&logits, labels[p]).unwrap().unwrap();
        }
        assert!((got - sum / 256.0).abs() <= 1e-8);
    }

    #[test]
    fn total_loss_arithmetic() {
        let store: ParamStore<f64> = ParamStore::new();
        let mut sess = Session::new(&store);
        let l_d = sess.tape.leaf(Tensor::scalar(1.0), false);
        let l_o = sess.tape.leaf(Tensor::scalar(2.0), false);
        let t = total_loss(&mut sess, Some(l_d), l_o, 0.4).unwrap();
        assert!((sess.tape.value(t).scalar_value().unwrap() - 2.4).abs() <= 1e-12);
        let t0 = total_loss(&mut sess, Some(l_d), l_o, 0.0).unwrap();
        assert!((sess.tape.value(t0).scalar_value().unwrap() - 2.0).abs() <= 1e-12);
        assert!(total_loss(&mut sess, None, l_o, -0.1).is_err());
    }

    #[test]
    fn combined_uniform_logit_anchor() {
        // uniform logits on ignore-free data: L = (1 + alpha) ln K
        for k in [2usize, 4, 10] {
            let store: ParamStore<f64> = ParamStore::new();
            let mut sess = Session::new(&store);
            let labels = gt(vec![0; 256], 16, 16);
            let o = sess.tape.leaf(Tensor::filled(&[k, 16, 16], 0.1), false);
            let d = sess.tape.leaf(Tensor::filled(&[k, 2, 2], 0.9), false);
            let l_o = loss_o(&mut sess, o, &labels).unwrap();
            let l_d = loss_d(&mut sess, d, &labels).unwrap();
            let t = total_loss(&mut sess, Some(l_d), l_o, 0.4).unwrap();
            let got = sess.tape.value(t).scalar_value().unwrap();
            assert!((got - 1.4 * (k as f64).ln()).abs() <= 1e-6, "K={k}");
        }
    }

    #[test]
    fn gradcheck_combined_loss() {
        let o = rand_tensor(4, &[3, 16, 16]);
        let d = rand_tensor(5, &[3, 2, 2]);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let labels: Vec<u8> = (0..256).map(|_| r.gen_range(0..3) as u8).collect();
        let labels = gt(labels, 16, 16);
        let store: ParamStore<f64> = ParamStore::new();
        let report = grad_check(
            |tape, vars| {
                Session::on_tape(&store, tape, |sess| {
                    let l_o = loss_o(sess, vars[0], &labels)?;
                    let l_d = loss_d(sess, vars[1], &labels)?;
                    total_loss(sess, Some(l_d), l_o, 0.4)
                })
            },
            &[o, d],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn argmax_channel_matches_scan() {
        let o = rand_tensor(7, &[4, 3, 3]);
        let got = argmax_channel(&o);
        for p in 0..9 {
            let mut want = 0usize;
            for c in 1..4 {
                if o.data()[c * 9 + p] > o.data()[want * 9 + p] {
                    want = c;
                }
            }
            assert_eq!(got[p] as usize, want);
        }
    }

    #[test]
    fn miou_perfect_disjoint_and_hand_case() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0, 1, 1], &gt(vec![0, 0, 1, 1], 2, 2)).unwrap();
        let (per, mean) = cm.miou().unwrap();
        assert_eq!(per, vec![Some(1.0), Some(1.0)]);
        assert_eq!(mean, 1.0);

        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1, 1, 0, 0], &gt(vec![0, 0, 1, 1], 2, 2)).unwrap();
        let (per, mean) = cm.miou().unwrap();
        assert_eq!(per, vec![Some(0.0), Some(0.0)]);
        assert_eq!(mean, 0.0);

        let cm = ConfusionMatrix { k: 2, counts: vec![3, 1, 1, 3] };
        let (per, mean) = cm.miou().unwrap();
        assert!((per[0].unwrap() - 0.6).abs() <= 1e-12);
        assert!((per[1].unwrap() - 0.6).abs() <= 1e-12);
        assert!((mean - 0.6).abs() <= 1e-12);
    }

    #[test]
    fn miou_absent_class_excluded_and_all_absent_rejected() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 0, 1, 1], &gt(vec![0, 0, 1, 1], 2, 2)).unwrap();
        let (per, mean) = cm.miou().unwrap();
        assert_eq!(per[2], None);
        assert_eq!(mean, 1.0);

        let empty = ConfusionMatrix::new(3);
        assert!(matches!(empty.miou(), Err(IsnetError::UndefinedMetric(_))));
    }

    #[test]
    fn confusion_accumulation_is_order_independent() {
        let a = (vec![0u8, 1, 2, 1], gt(vec![0, 1, 1, 2], 2, 2));
        let b = (vec![2u8, 2, 0, 0], gt(vec![2, 1, 0, IGNORE], 2, 2));
        let mut fwd = ConfusionMatrix::new(3);
        fwd.accumulate(&a.0, &a.1).unwrap();
        fwd.accumulate(&b.0, &b.1).unwrap();
        let mut rev = ConfusionMatrix::new(3);
        rev.accumulate(&b.0, &b.1).unwrap();
        rev.accumulate(&a.0, &a.1).unwrap();
        assert_eq!(fwd, rev);
        assert_eq!(fwd.total(), 7);

        // single pixel gt=1 pred=0
        let mut one = ConfusionMatrix::new(2);
        one.accumulate(&[0], &gt(vec![1], 1, 1)).unwrap();
        assert_eq!(one.counts, vec![0, 0, 1, 0]);
    }

    #[test]
    fn report_format() {
        let cm = ConfusionMatrix { k: 3, counts: vec![3, 1, 0, 1, 3, 0, 0, 0, 0] };
        let report = cm.report().unwrap();
        let lines: Vec<&str> = report.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("0\t"));
        assert!(lines[1].starts_with("1\t"));
        assert!(lines[2].starts_with("mIoU\t"));
    }
}
