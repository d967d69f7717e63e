//! Canned finite-difference probes behind the `gradcheck` CLI command.
//!
//! Probes run in float64 with randomly initialized modules and inputs chosen
//! so that hard selections cannot flip under the perturbation: semantic
//! probe points are resampled until every pixel's argmax margin clears 1e-3,
//! three orders above the step size.

use crate::blocks::{HeadAux, ParamStore, Session};
use crate::error::{IsnetError, Result};
use crate::fusion::{attend, similarity, FusionState, DEFAULT_ATTENTION_CAP};
use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_EPS};
use crate::ilcm::IlcmState;
use crate::loss::{loss_d, loss_o, total_loss, LabelMap};
use crate::model::{IsNetModel, ModelConfig, Variant};
use crate::slcm::{slcm_forward, RegionAssignment};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum distance between a winning logit and the runner-up at a probe
/// point; ten times the step would suffice, a wider berth costs nothing.
const ARGMAX_MARGIN: f64 = 1e-3;
pub const PASS_THRESHOLD: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeModule {
    All,
    Ilcm,
    Slcm,
    Fusion,
    Loss,
}

impl ProbeModule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(ProbeModule::All),
            "ilcm" => Ok(ProbeModule::Ilcm),
            "slcm" => Ok(ProbeModule::Slcm),
            "fusion" => Ok(ProbeModule::Fusion),
            "loss" => Ok(ProbeModule::Loss),
            other => Err(IsnetError::usage(format!(
                "unknown module '{other}' (expected all|ilcm|slcm|fusion|loss)"
            ))),
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let count: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap()
}

/// A weighted sum makes a well conditioned scalar functional; plain
/// sum-of-squares is nearly flat after normalization layers.
fn linear_functional(
    sess: &mut Session<f64>,
    out: crate::tape::Var,
) -> Result<crate::tape::Var> {
    let shape = sess.tape.value(out).shape().to_vec();
    let count: usize = shape.iter().product();
    let weights = Tensor::from_vec(
        shape,
        (0..count).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect(),
    )?;
    let weighted = sess.tape.mul_const(out, weights)?;
    Ok(sess.tape.sum(weighted))
}

fn probe_ilcm() -> Result<(String, GradCheckReport)> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let ilcm = IlcmState::new(&mut store, &mut rng, "ilcm", 8);
    let x = rand_tensor(&mut rng, &[8, 8, 8]);
    let report = grad_check(
        |tape, vars| {
            Session::on_tape(&store, tape, |sess| {
                let out = ilcm.forward(sess, vars[0])?;
                linear_functional(sess, out)
            })
        },
        &[x],
        DEFAULT_EPS,
    )?;
    Ok(("ilcm".into(), report))
}

fn probe_slcm() -> Result<(String, GradCheckReport)> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let head = HeadAux::new(&mut store, &mut rng, "head_aux", 8, 8, 3);
    let x = sample_with_margin(&mut rng, &[8, 8, 8], |x| {
        let mut sess = Session::new(&store);
        let xv = sess.tape.leaf(x.clone(), false);
        let (_, d) = slcm_forward(&head, &mut sess, xv)?;
        Ok(RegionAssignment::min_margin(sess.tape.value(d)))
    })?;
    let report = grad_check(
        |tape, vars| {
            Session::on_tape(&store, tape, |sess| {
                let (r_sl, d) = slcm_forward(&head, sess, vars[0])?;
                // touch both outputs so D's path is verified too
                let a = linear_functional(sess, r_sl)?;
                let b = linear_functional(sess, d)?;
                sess.tape.add(a, b)
            })
        },
        &[x],
        DEFAULT_EPS,
    )?;
    Ok(("slcm".into(), report))
}

fn probe_fusion() -> Result<(String, GradCheckReport)> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let fusion = FusionState::new(&mut store, &mut rng, "fusion", 8, 3, 3, 0.0);
    let r = rand_tensor(&mut rng, &[8, 4, 4]);
    let ctx_a = rand_tensor(&mut rng, &[8, 4, 4]);
    let ctx_b = rand_tensor(&mut rng, &[8, 4, 4]);
    let report = grad_check(
        |tape, vars| {
            Session::on_tape(&store, tape, |sess| {
                let s_a = similarity(sess, vars[0], vars[1], DEFAULT_ATTENTION_CAP)?;
                let s_b = similarity(sess, vars[0], vars[2], DEFAULT_ATTENTION_CAP)?;
                let att_a = attend(sess, s_a, vars[1])?;
                let att_b = attend(sess, s_b, vars[2])?;
                let aug = fusion.augment(sess, &[att_a, att_b, vars[0]])?;
                let out = fusion.classify(sess, aug, None)?;
                linear_functional(sess, out)
            })
        },
        &[r, ctx_a, ctx_b],
        DEFAULT_EPS,
    )?;
    Ok(("fusion".into(), report))
}

fn probe_losses() -> Result<(String, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let o = rand_tensor(&mut rng, &[3, 16, 16]);
    let d = rand_tensor(&mut rng, &[3, 2, 2]);
    let labels: Vec<u8> = (0..256).map(|_| rng.gen_range(0..3) as u8).collect();
    let gt = LabelMap::new(labels, 16, 16)?;
    let store: ParamStore<f64> = ParamStore::new();
    let report = grad_check(
        |tape, vars| {
            Session::on_tape(&store, tape, |sess| {
                let l_o = loss_o(sess, vars[0], &gt)?;
                let l_d = loss_d(sess, vars[1], &gt)?;
                total_loss(sess, Some(l_d), l_o, 0.4)
            })
        },
        &[o, d],
        DEFAULT_EPS,
    )?;
    Ok(("loss".into(), report))
}

/// End-to-end: image through the full variant, multi-task loss on top.
fn probe_pipeline() -> Result<(String, GradCheckReport)> {
    let mut store: ParamStore<f64> = ParamStore::new();
    let config = ModelConfig {
        c: 8,
        k: 3,
        alpha: 0.4,
        dropout: 0.0,
        aux_hidden: 8,
        attention_cap: DEFAULT_ATTENTION_CAP,
        variant: Variant::Isnet,
        seed: 505,
    };
    let model = IsNetModel::new(&mut store, config);
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let gt = LabelMap::new(
        (0..256).map(|_| rng.gen_range(0..3) as u8).collect(),
        16,
        16,
    )?;
    let img = sample_with_margin(&mut rng, &[3, 16, 16], |img| {
        let mut sess = Session::new(&store);
        let iv = sess.tape.leaf(img.clone(), false);
        let (_, d) = model.forward(&mut sess, iv, None)?;
        let argmax = RegionAssignment::min_margin(sess.tape.value(d.unwrap()));
        // relu kinks flip under perturbation just like argmax ties do
        let relu = sess.tape.min_relu_margin().unwrap_or(f64::INFINITY);
        Ok(argmax.min(relu))
    })?;
    let report = grad_check(
        |tape, vars| {
            Session::on_tape(&store, tape, |sess| {
                let (o, d) = model.forward(sess, vars[0], None)?;
                let l_o = loss_o(sess, o, &gt)?;
                let l_d = loss_d(sess, d.unwrap(), &gt)?;
                total_loss(sess, Some(l_d), l_o, 0.4)
            })
        },
        &[img],
        DEFAULT_EPS,
    )?;
    Ok(("pipeline".into(), report))
}

/// Resamples until the candidate's argmax margin clears [`ARGMAX_MARGIN`].
fn sample_with_margin(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    margin_of: impl Fn(&Tensor<f64>) -> Result<f64>,
) -> Result<Tensor<f64>> {
    for _ in 0..64 {
        let x = rand_tensor(rng, shape);
        if margin_of(&x)? > ARGMAX_MARGIN {
            return Ok(x);
        }
    }
    Err(IsnetError::Internal(
        "could not find a probe point with safe argmax margins".into(),
    ))
}

pub fn run_probes(which: ProbeModule) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    if matches!(which, ProbeModule::All | ProbeModule::Ilcm) {
        out.push(probe_ilcm()?);
    }
    if matches!(which, ProbeModule::All | ProbeModule::Slcm) {
        out.push(probe_slcm()?);
    }
    if matches!(which, ProbeModule::All | ProbeModule::Fusion) {
        out.push(probe_fusion()?);
        out.push(probe_pipeline()?);
    }
    if matches!(which, ProbeModule::All | ProbeModule::Loss) {
        out.push(probe_losses()?);
    }
    Ok(out)
}
