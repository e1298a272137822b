//! The training loop: loss, optimizer steps, EMA weight tracking, and
//! per-epoch evaluation with both raw and averaged weights.

use crate::autodiff::{softmax_xent_forward, Tape};
use crate::data::{augment, batches, AugmentConfig, Dataset, SplitMode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{lr_at, Optimizer, OptimizerConfig};
use crate::rng::{SeededRng, Stream};
use crate::tensor::{Scalar, Tensor};
use std::time::Instant;

pub const EMA_DECAY: f64 = 0.999;

/// Shadow copy of every trainable parameter, advanced after each optimizer
/// step as `shadow <- decay*shadow + (1-decay)*param`.
#[derive(Debug, Clone)]
pub struct EmaState<T> {
    pub shadow: Vec<Tensor<T>>,
    pub decay: f64,
}

impl<T: Scalar> EmaState<T> {
    pub fn new(params: &[Tensor<T>], decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::config(format!("EMA decay {decay} outside (0,1)")));
        }
        Ok(EmaState {
            shadow: params.to_vec(),
            decay,
        })
    }

    pub fn update(&mut self, params: &[Tensor<T>]) {
        let d = T::from_f64(self.decay);
        let one_d = T::one() - d;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + one_d * pv;
            }
        }
    }
}

/// Softmax cross-entropy against a label-smoothed target, averaged over the
/// batch: the true class gets `1-s+s/y`, every class gets `s/y`.
pub fn loss_xent<T: Scalar>(scores: &Tensor<T>, labels: &[usize], smoothing: f64) -> Result<T> {
    if scores.rank() != 2 {
        return Err(Error::shape(format!(
            "loss_xent wants [N,y] scores, got {:?}",
            scores.shape()
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::config(format!(
            "label smoothing {smoothing} outside [0,1)"
        )));
    }
    scores.ensure_finite("loss_xent scores")?;
    let (loss, _) = softmax_xent_forward(scores, labels, T::from_f64(smoothing));
    loss.item()
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc_ema: f64,
    pub test_acc_raw: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimingMode {
    /// Measure real wall time per epoch.
    Wall,
    /// Emit 0.0 so metrics are byte-reproducible.
    Fixed,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub label_smoothing: f64,
    pub augment: AugmentConfig,
    pub timing: TimingMode,
    pub ema_decay: f64,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 1,
            batch_size: 32,
            seed: 0,
            label_smoothing: 0.0,
            augment: AugmentConfig::default(),
            timing: TimingMode::Wall,
            ema_decay: EMA_DECAY,
            verbose: false,
        }
    }
}

pub struct TrainOutcome<T: Scalar> {
    pub metrics: Vec<MetricsRow>,
    pub ema: EmaState<T>,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct<T: Scalar>(scores: &Tensor<T>, labels: &[usize]) -> usize {
    let y = scores.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|(r, &l)| argmax(&scores.data()[r * y..(r + 1) * y]) == l)
        .count()
}

/// Accuracy over every sample of `dataset` exactly once (eval-mode batch
/// norm, short final batch kept).
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    for batch in batches(dataset, batch_size.max(1), 0, 0, SplitMode::Eval)? {
        let images = batch.images.cast::<T>();
        let scores = model.forward_scores_eval(&images)?;
        correct += count_correct(&scores, &batch.labels);
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Accuracy of the EMA weights: evaluates a copy of the model whose
/// parameters are replaced by the shadow values. Training weights and
/// running statistics are left untouched.
pub fn evaluate_ema<T: Scalar>(
    model: &Model<T>,
    ema: &EmaState<T>,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    let mut shadow_model = model.clone();
    shadow_model.params = ema.shadow.clone();
    evaluate(&shadow_model, dataset, batch_size)
}

/// Train `model` on `train_ds`, evaluating on `test_ds` after each epoch.
///
/// Per epoch: iterate the seeded batch plan, forward in train mode, check
/// the loss is finite, backpropagate, take one optimizer step at the
/// scheduled learning rate, and advance the EMA shadow. Divergence aborts
/// with the failing epoch and batch.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    cfg: &OptimizerConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome<T>> {
    if train_ds.classes != model.spec.classes {
        return Err(Error::config(format!(
            "dataset has {} classes but model expects {}",
            train_ds.classes, model.spec.classes
        )));
    }
    let mut optimizer = Optimizer::<T>::new(*cfg, &model.param_shapes());
    let mut ema = EmaState::new(&model.params, opts.ema_decay)?;
    let mut metrics = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let started = Instant::now();
        let eta = lr_at(epoch, &cfg.schedule, cfg.eta0);
        let plan = batches(train_ds, opts.batch_size, opts.seed, epoch, SplitMode::Train)?;
        let mut aug_rng = SeededRng::stream(opts.seed, Stream::Augment(epoch as u64));
        let mut loss_sum = 0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (bi, batch) in plan.iter().enumerate() {
            let batch = augment(batch, &opts.augment, &mut aug_rng)?;
            let images = batch.images.cast::<T>();
            let mut tape = Tape::new();
            let fwd = model
                .forward_train(&mut tape, &images, &batch.labels, opts.label_smoothing)
                .map_err(|e| diverged(e, epoch, bi))?;
            let loss = tape.value(fwd.loss).item()?.to_f64();
            if !loss.is_finite() {
                return Err(diverged(
                    Error::divergence(format!("loss = {loss}")),
                    epoch,
                    bi,
                ));
            }
            loss_sum += loss;
            correct += count_correct(&fwd.scores, &batch.labels);
            seen += batch.labels.len();

            let grads_map = tape.backward(fwd.loss)?;
            let grads: Vec<Tensor<T>> = fwd
                .param_nodes
                .iter()
                .map(|&id| grads_map.get(id).expect("param gradient").clone())
                .collect();
            optimizer
                .step(&mut model.params, &grads, eta)
                .map_err(|e| diverged(e, epoch, bi))?;
            ema.update(&model.params);
        }

        let steps = plan.len().max(1);
        let test_acc_raw = evaluate(model, test_ds, opts.batch_size)?;
        let test_acc_ema = evaluate_ema(model, &ema, test_ds, opts.batch_size)?;
        let wall_seconds = match opts.timing {
            TimingMode::Wall => started.elapsed().as_secs_f64(),
            TimingMode::Fixed => 0.0,
        };
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / steps as f64,
            train_acc: if seen > 0 {
                correct as f64 / seen as f64
            } else {
                0.0
            },
            test_acc_ema,
            test_acc_raw,
            lr: eta,
            wall_seconds,
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  loss {:.4}  train_acc {:.4}  test_acc(ema) {:.4}  test_acc(raw) {:.4}  lr {:.6}",
                row.epoch, row.train_loss, row.train_acc, row.test_acc_ema, row.test_acc_raw, row.lr
            );
        }
        metrics.push(row);
    }
    Ok(TrainOutcome { metrics, ema })
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Divergence(msg) => {
            Error::divergence(format!("epoch {epoch}, batch {batch}: {msg}"))
        }
        other => other,
    }
}
