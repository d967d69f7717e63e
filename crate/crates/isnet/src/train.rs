//! SGD training loop with the poly schedule, evaluation and the four-row
//! ablation harness.

use crate::blocks::{ParamStore, Session};
use crate::checkpoint::Checkpoint;
use crate::data::{augment_train, load_split, Sample};
use crate::error::{IsnetError, Result};
use crate::loss::{argmax_channel, loss_d, loss_o, total_loss, ConfusionMatrix};
use crate::model::{IsNetModel, ModelConfig, Variant};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

/// base * (1 - iter/total)^0.9.
pub fn poly_lr(base: f64, iter: u64, total: u64) -> Result<f64> {
    if iter > total {
        return Err(IsnetError::usage(format!(
            "iteration {iter} past the schedule total {total}"
        )));
    }
    Ok(base * (1.0 - iter as f64 / total as f64).powf(0.9))
}

/// One SGD update: v <- momentum*v + grad + wd*param; param <- param - lr*v.
/// Weight decay skips parameters whose store entry opted out (biases and
/// normalization scale/shift).
pub fn sgd_step<F: Scalar>(
    store: &mut ParamStore<F>,
    grads: &[Tensor<F>],
    velocity: &mut [Tensor<F>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != store.len() || velocity.len() != store.len() {
        return Err(IsnetError::dim(format!(
            "optimizer state for {} parameters, store holds {}",
            grads.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let decay = store.decays(id);
        let param = store.value_mut(id);
        if grads[i].shape() != param.shape() || velocity[i].shape() != param.shape() {
            return Err(IsnetError::dim(format!(
                "gradient shape {:?} does not match parameter {:?}",
                grads[i].shape(),
                param.shape()
            )));
        }
        let m = F::from_f64(momentum);
        let wd = if decay { F::from_f64(weight_decay) } else { F::zero() };
        let step = F::from_f64(lr);
        for ((p, v), &g) in param
            .data_mut()
            .iter_mut()
            .zip(velocity[i].data_mut())
            .zip(grads[i].data())
        {
            *v = m * *v + g + wd * *p;
            *p = *p - step * *v;
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub total_iters: u64,
    pub crop: usize,
    pub eval_interval: u64,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn desk(variant: Variant, data_root: PathBuf, out_dir: PathBuf) -> Self {
        TrainConfig {
            model: ModelConfig::desk(variant),
            lr: 0.01,
            weight_decay: 0.0005,
            momentum: 0.9,
            batch_size: 8,
            total_iters: 2000,
            crop: 64,
            eval_interval: 0,
            data_root,
            out_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(IsnetError::usage("total iterations must be at least 1"));
        }
        if self.crop % 8 != 0 || self.crop == 0 {
            return Err(IsnetError::usage(format!(
                "crop size must be a positive multiple of 8, got {}",
                self.crop
            )));
        }
        if self.batch_size == 0 {
            return Err(IsnetError::usage("batch size must be at least 1"));
        }
        Ok(())
    }
}

pub struct TrainOutcome {
    pub log: Vec<String>,
    pub checkpoint: Checkpoint,
    pub final_miou: Option<f64>,
}

fn store_to_checkpoint(
    store: &ParamStore<f32>,
    velocity: &[Tensor<f32>],
    model: &ModelConfig,
    iteration: u64,
    rng: &ChaCha8Rng,
) -> Checkpoint {
    let params: Vec<(String, Tensor<f32>)> =
        store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let momentum = store
        .iter()
        .zip(velocity)
        .map(|((n, _), v)| (n.to_string(), v.clone()))
        .collect();
    Checkpoint {
        iteration,
        model: model.clone(),
        params,
        momentum,
        rng_word_pos: rng.get_word_pos(),
    }
}

fn load_into_store(store: &mut ParamStore<f32>, named: &[(String, Tensor<f32>)]) -> Result<()> {
    for (name, tensor) in named {
        let id = store
            .find(name)
            .ok_or_else(|| IsnetError::data(format!("checkpoint parameter {name} has no slot")))?;
        if store.value(id).shape() != tensor.shape() {
            return Err(IsnetError::data(format!(
                "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                tensor.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = tensor.clone();
    }
    Ok(())
}

/// Forward a batch and return the mean multi-task loss on the session tape.
fn batch_loss(
    model: &IsNetModel,
    sess: &mut Session<f32>,
    samples: &[Sample],
    alpha: f64,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<crate::tape::Var> {
    let mut acc: Option<crate::tape::Var> = None;
    let mut dropout_rng = dropout_rng;
    for sample in samples {
        let img = sess.tape.leaf(sample.image.clone(), false);
        let (o, d) = model.forward(sess, img, dropout_rng.as_deref_mut())?;
        let l_o = loss_o(sess, o, &sample.label)?;
        let l_d = match d {
            Some(d) => Some(loss_d(sess, d, &sample.label)?),
            None => None,
        };
        let l = total_loss(sess, l_d, l_o, alpha)?;
        acc = Some(match acc {
            None => l,
            Some(a) => sess.tape.add(a, l)?,
        });
    }
    let acc = acc.ok_or_else(|| IsnetError::usage("empty batch"))?;
    Ok(sess.tape.scale(acc, 1.0 / samples.len() as f32))
}

/// Confusion over a sample list with frozen parameters, native sizes, no
/// dropout.
pub fn evaluate_samples(
    model: &IsNetModel,
    store: &ParamStore<f32>,
    samples: &[Sample],
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.k);
    for sample in samples {
        let mut sess = Session::new(store);
        let img = sess.tape.leaf(sample.image.clone(), false);
        let (o, _) = model.forward(&mut sess, img, None)?;
        let pred = argmax_channel(sess.tape.value(o));
        cm.accumulate(&pred, &sample.label)?;
    }
    Ok(cm)
}

/// Rebuild the model a checkpoint describes and evaluate one split.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    data_root: &std::path::Path,
    split: &str,
) -> Result<ConfusionMatrix> {
    let samples = load_split(data_root, split)?;
    for s in &samples {
        if s.k as usize != ckpt.model.k {
            return Err(IsnetError::usage(format!(
                "checkpoint trained for {} classes, dataset holds {}",
                ckpt.model.k, s.k
            )));
        }
    }
    let mut store: ParamStore<f32> = ParamStore::new();
    let model = IsNetModel::new(&mut store, ckpt.model.clone());
    load_into_store(&mut store, &ckpt.params)?;
    evaluate_samples(&model, &store, &samples)
}

/// The training loop. `resume` restarts from a checkpoint's parameters,
/// momentum and RNG position; the config must match the one that produced
/// it. Returns the metric log (`iter<TAB>loss<TAB>lr[<TAB>miou]` lines) and
/// the final checkpoint.
pub fn train(config: &TrainConfig, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    train_until(config, resume, config.total_iters)
}

/// As `train`, but halts after `stop` iterations while keeping the full
/// schedule; resuming from the returned checkpoint continues the same run.
pub fn train_until(
    config: &TrainConfig,
    resume: Option<&Checkpoint>,
    stop: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_set = load_split(&config.data_root, "train")?;
    let val_set = if config.eval_interval > 0 {
        Some(load_split(&config.data_root, "val")?)
    } else {
        None
    };

    let mut store: ParamStore<f32> = ParamStore::new();
    let model = IsNetModel::new(&mut store, config.model.clone());
    let mut velocity: Vec<Tensor<f32>> = store
        .ids()
        .map(|id| Tensor::zeros(store.value(id).shape()))
        .collect();
    // one stream drives batch sampling, augmentation and dropout so a resume
    // can restore everything from a single position
    let mut rng = ChaCha8Rng::seed_from_u64(config.model.seed);
    let mut start = 0u64;
    if let Some(ckpt) = resume {
        if ckpt.model != config.model {
            return Err(IsnetError::usage(
                "checkpoint model configuration does not match the training config",
            ));
        }
        load_into_store(&mut store, &ckpt.params)?;
        let ids: Vec<_> = store.ids().collect();
        for (name, tensor) in &ckpt.momentum {
            let at = ids
                .iter()
                .position(|&id| store.name(id) == name)
                .ok_or_else(|| IsnetError::data(format!("momentum buffer {name} has no slot")))?;
            velocity[at] = tensor.clone();
        }
        rng.set_word_pos(ckpt.rng_word_pos);
        start = ckpt.iteration;
    }

    let stop = stop.min(config.total_iters);
    let mut log = Vec::new();
    let mut final_miou = None;
    for iter in start..stop {
        let lr = poly_lr(config.lr, iter, config.total_iters)?;
        let mut samples = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let pick = rng.gen_range(0..train_set.len());
            samples.push(augment_train(&train_set[pick], config.crop, &mut rng)?);
        }
        let mut sess = Session::new(&store);
        let loss = batch_loss(&model, &mut sess, &samples, config.model.alpha, Some(&mut rng))?;
        let loss_value = sess.tape.value(loss).scalar_value()?;
        if !loss_value.is_finite() {
            return Err(IsnetError::Internal(format!(
                "non-finite loss at iteration {iter}; aborting"
            )));
        }
        sess.tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = store.ids().map(|id| sess.grad_of(id)).collect();
        drop(sess);
        sgd_step(&mut store, &grads, &mut velocity, lr, config.momentum, config.weight_decay)?;

        let mut line = format!("{iter}\t{loss_value}\t{lr}");
        if let Some(val) = &val_set {
            if (iter + 1) % config.eval_interval == 0 || iter + 1 == config.total_iters {
                let cm = evaluate_samples(&model, &store, val)?;
                let (_, miou) = cm.miou()?;
                line.push_str(&format!("\t{miou}"));
                final_miou = Some(miou);
            }
        }
        log.push(line);
    }

    let checkpoint = store_to_checkpoint(&store, &velocity, &config.model, stop, &rng);
    if !config.out_dir.as_os_str().is_empty() {
        std::fs::create_dir_all(&config.out_dir)?;
        std::fs::write(config.out_dir.join("train.log"), log.join("\n") + "\n")?;
        checkpoint.save(&config.out_dir.join("checkpoint.isnc"))?;
    }
    Ok(TrainOutcome { log, checkpoint, final_miou })
}

/// Trains all four variants with a shared seed and dataset; returns
/// (variant, held-out mIoU) rows in table order.
pub fn ablation(base: &TrainConfig) -> Result<Vec<(Variant, f64)>> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut config = base.clone();
        config.model.variant = variant;
        config.out_dir = if base.out_dir.as_os_str().is_empty() {
            PathBuf::new()
        } else {
            base.out_dir.join(variant.name())
        };
        let outcome = train(&config, None)?;
        let cm = evaluate_checkpoint(&outcome.checkpoint, &config.data_root, "val")?;
        let (_, miou) = cm.miou()?;
        rows.push((variant, miou));
    }
    Ok(rows)
}
