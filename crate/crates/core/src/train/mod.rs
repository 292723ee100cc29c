//! Training loop for partial fine-tuning with vanilla or filtered BP.

pub mod loss;
pub mod model;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use loss::{argmax, cross_entropy};
pub use model::{ConvMode, ConvProbe, Layer, Model, ParamGrad, Tape};
pub use optim::{clip_grad_l2, cosine_lr, sgd_step, SgdCfg, SgdState};

use crate::cost;
use crate::data::Dataset;
use crate::error::{config_err, shape_err, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainCfg {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 clip; `0` disables clipping.
    pub clip: f64,
    pub warmup_epochs: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip: 2.0,
            warmup_epochs: 1,
            seed: 0,
        }
    }
}

impl TrainCfg {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config_err("batch_size must be >= 1");
        }
        for (name, v) in [
            ("lr", self.base_lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("clip", self.clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return config_err(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub initial_val_acc: f64,
    /// Best of the initial and every end-of-epoch validation accuracy.
    pub best_val_acc: f64,
    pub steps: u64,
    /// Analytic conv back-propagation FLOPs: per-image layer cost from the
    /// cost model, summed over active conv layers, times the step count.
    pub bp_flops: u64,
    /// Largest number of activation elements held for conv kernel gradients
    /// during any step.
    pub peak_stored_elements: usize,
}

/// Fraction of correctly classified samples.
pub fn evaluate(model: &Model, ds: &Dataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return shape_err("cannot evaluate on an empty dataset");
    }
    let batch_size = batch_size.max(1);
    let classes = model.output_dims().0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size) {
        let (x, labels) = ds.gather(chunk);
        let out = model.forward(&x)?;
        for (row, &label) in out.data().chunks(classes).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Analytic per-step back-propagation cost of the model's active conv layers.
pub fn step_bp_flops(model: &Model) -> u64 {
    model
        .conv_indices()
        .into_iter()
        .filter_map(|i| {
            let Layer::Conv(cl) = &model.layers()[i] else { return None };
            let cfg = model.layer_cost_cfg(i)?;
            match cl.mode {
                ConvMode::Frozen => None,
                ConvMode::Vanilla => Some(cost::vanilla_bp_flops(&cfg)),
                ConvMode::Filtered(f) => Some(cost::filtered_bp_flops(&cfg, f.r as u64).flops),
            }
        })
        .sum()
}

fn check_dataset(model: &Model, ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return shape_err(format!("{what} set is empty"));
    }
    if ds.sample_dims() != model.input_dims() {
        return shape_err(format!(
            "{what} samples are {:?}, model expects {:?}",
            ds.sample_dims(),
            model.input_dims()
        ));
    }
    if ds.classes != model.output_dims().0 {
        return shape_err(format!(
            "{what} set has {} classes, model outputs {}",
            ds.classes,
            model.output_dims().0
        ));
    }
    Ok(())
}

/// One optimisation step on a batch. Returns the batch loss, the number of
/// correct predictions and the activation elements held on the tape.
pub fn train_step(
    model: &mut Model,
    x: &Tensor4,
    labels: &[usize],
    lr: f64,
    cfg: &TrainCfg,
    state: &mut SgdState,
) -> Result<(f64, usize, usize)> {
    let classes = model.output_dims().0;
    let (out, tape) = model.forward_train(x)?;
    let (loss, g) = cross_entropy(out.data(), labels, classes)?;
    let correct = out
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let stored = tape.conv_stored_elements().iter().map(|(_, n)| n).sum();
    let mut grads = model.backward(&tape, &Tensor4::new(out.dims(), g)?)?;
    drop(tape);

    let mut blocks: Vec<&mut [f64]> = grads
        .iter_mut()
        .flat_map(|pg| [pg.weights.as_mut_slice(), pg.bias.as_mut_slice()])
        .collect();
    clip_grad_l2(&mut blocks, cfg.clip);
    let grad_blocks: Vec<&[f64]> = blocks.iter().map(|b| &**b).collect();
    let mut params: Vec<&mut [f64]> = model
        .trainable_params_mut()
        .into_iter()
        .flat_map(|(_, w, b)| [w, b])
        .collect();
    let sgd = SgdCfg {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    sgd_step(&mut params, &grad_blocks, lr, sgd, state);
    Ok((loss, correct, stored))
}

pub fn train(model: &mut Model, train_set: &Dataset, val_set: &Dataset, cfg: &TrainCfg) -> Result<TrainMetrics> {
    cfg.validate()?;
    check_dataset(model, train_set, "training")?;
    check_dataset(model, val_set, "validation")?;

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let per_step_flops = step_bp_flops(model);

    let initial_val_acc = evaluate(model, val_set, cfg.batch_size)?;
    let mut metrics = TrainMetrics {
        epochs: Vec::with_capacity(cfg.epochs),
        initial_val_acc,
        best_val_acc: initial_val_acc,
        steps: 0,
        bp_flops: 0,
        peak_stored_elements: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SgdState::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut lr) = (0.0, 0usize, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total, cfg.base_lr, warmup);
            let (x, labels) = train_set.gather(chunk);
            let (loss, ok, stored) = train_step(model, &x, &labels, lr, cfg, &mut state)?;
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
            metrics.peak_stored_elements = metrics.peak_stored_elements.max(stored);
            step += 1;
        }
        let val_acc = evaluate(model, val_set, cfg.batch_size)?;
        metrics.best_val_acc = metrics.best_val_acc.max(val_acc);
        metrics.epochs.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val_acc,
            lr,
        });
    }
    metrics.steps = step as u64;
    metrics.bp_flops = per_step_flops * metrics.steps;
    Ok(metrics)
}
