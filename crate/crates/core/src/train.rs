//! Training loop: decoupled-weight-decay Adam, early stopping on validation
//! loss with best-checkpoint restore, and deterministic per-epoch shuffling.

use serde::{Deserialize, Serialize};

use crate::data::Segment;
use crate::error::Error;
use crate::kernels;
use crate::metrics;
use crate::model::Model;
use crate::nn::{ParamStore, RunCtx};
use crate::rng::{stream, DOMAIN_SHUFFLE};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// A validation loss must beat the best by more than this to count as
    /// an improvement.
    pub min_improvement: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            min_improvement: 1e-6,
        }
    }
}

/// Adam with decoupled weight decay: the decay term subtracts
/// `lr * wd * theta` directly and never enters the moment estimates.
pub struct AdamW<E> {
    cfg: OptimConfig,
    step: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new(store: &ParamStore<E>, cfg: OptimConfig) -> Self {
        let m = store
            .entries()
            .iter()
            .map(|e| vec![E::zero(); if e.trainable { e.tensor.numel() } else { 0 }])
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW { cfg, step: 0, m, v }
    }

    /// Applies one update from the gradients accumulated on `tape`.
    /// Trainable parameters without a gradient on this tape are left alone.
    pub fn apply(&mut self, store: &mut ParamStore<E>, tape: &Tape<E>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let lr = E::from_f64(self.cfg.lr);
        let wd = E::from_f64(self.cfg.weight_decay);
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let eps = E::from_f64(self.cfg.eps);
        let bc1 = E::one() - b1.powi(t);
        let bc2 = E::one() - b2.powi(t);
        for pid in 0..store.len() {
            if !store.get(pid).trainable {
                continue;
            }
            let Some(grad) = tape.grad(pid) else { continue };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGrad {
                    name: store.get(pid).name.clone(),
                });
            }
            let m = &mut self.m[pid];
            let v = &mut self.v[pid];
            let theta = store.get_mut(pid).tensor.data_mut();
            for ((w, &g), (mi, vi)) in theta
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (E::one() - b1) * g;
                *vi = b2 * *vi + (E::one() - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let pre = *w;
                *w = pre - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * pre;
            }
        }
        Ok(())
    }
}

/// Stops after `patience` epochs without a val-loss improvement beyond
/// `min_improvement`. Epochs are 1-indexed in the record it keeps.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    min_improvement: f64,
    pub best_loss: f64,
    pub best_epoch: u64,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_improvement: f64) -> Self {
        EarlyStopper {
            patience,
            min_improvement,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Feeds one epoch's validation loss; returns whether this epoch
    /// improved on the best and whether to stop now.
    pub fn observe(&mut self, epoch: u64, val_loss: f64) -> (bool, StopDecision) {
        let improved = val_loss < self.best_loss - self.min_improvement;
        if improved {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        let decision = if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        };
        (improved, decision)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
    Diverged,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auroc: Option<f64>,
    pub improved: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub epochs_run: u64,
    pub best_epoch: u64,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
    /// Present when training stopped on a numerical failure.
    pub note: Option<String>,
    pub history: Vec<EpochStats>,
}

/// Mean cross entropy of raw class scores against labels, without a tape.
pub fn cross_entropy_scalar<E: Element>(scores: &[E], labels: &[u8]) -> f64 {
    assert_eq!(
        scores.len(),
        2 * labels.len(),
        "cross_entropy_scalar: shape"
    );
    let targets: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    let (loss, _) = kernels::cross_entropy_fwd(2, scores, &targets);
    loss.into_f64()
}

/// Batch index ranges for one epoch: a shuffled permutation cut into
/// `batch_size` chunks, with a trailing single-element chunk merged into its
/// predecessor so batch-normalized layers always see at least two rows.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 2, "batch_size must be at least 2");
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut stream(seed, &[DOMAIN_SHUFFLE, epoch]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

fn batch_tensor<E: Element>(segments: &[Segment], idx: &[usize]) -> (Tensor<E>, Vec<u8>) {
    let l = segments[idx[0]].values.len();
    let mut data = Vec::with_capacity(idx.len() * l);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend(segments[i].values.iter().map(|&v| E::from_f64(v as f64)));
        labels.push(segments[i].label);
    }
    (Tensor::new(vec![idx.len(), 1, l], data), labels)
}

/// Forward-only pass over `segments` in deterministic order that re-estimates
/// every batch-norm layer's running statistics under the current weights
/// (dropout off, nothing trained). During an epoch the running estimates
/// trail the weight updates they were recorded under; re-estimating before
/// each validation pass keeps eval-mode behavior in step with the weights.
pub fn refresh_stats<E: Element>(
    model: &mut Model<E>,
    segments: &[Segment],
    batch_size: usize,
) -> Result<()> {
    let mut batches: Vec<Vec<usize>> = (0..segments.len())
        .collect::<Vec<_>>()
        .chunks(batch_size.max(2))
        .map(<[_]>::to_vec)
        .collect();
    // batch statistics need at least two rows
    if batches.len() >= 2 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    for batch in &batches {
        let (x, _) = batch_tensor::<E>(segments, batch);
        let mut tape = model.store.tape(false);
        let xid = tape.constant(x);
        let mut ctx = RunCtx::refresh();
        model.forward_scores(&mut tape, xid, &mut ctx)?;
    }
    Ok(())
}

/// Eval-mode scores for `segments` in deterministic order; returns the event
/// class probability per segment and the mean cross entropy.
pub fn evaluate<E: Element>(
    model: &mut Model<E>,
    segments: &[Segment],
    batch_size: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut probs = Vec::with_capacity(segments.len());
    let mut loss_sum = 0.0;
    for chunk in (0..segments.len())
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
    {
        let (x, labels) = batch_tensor::<E>(segments, chunk);
        let mut tape = model.store.tape(false);
        let xid = tape.constant(x);
        let mut ctx = RunCtx::eval();
        let scores = model.forward_scores(&mut tape, xid, &mut ctx)?;
        let sm = tape.softmax_rows(scores);
        let p = tape.value(sm).data();
        for row in p.chunks(2) {
            probs.push(row[1].into_f64());
        }
        loss_sum += cross_entropy_scalar(tape.value(scores).data(), &labels) * labels.len() as f64;
    }
    Ok((probs, loss_sum / segments.len() as f64))
}

/// Trains in place. The model ends at the best-validation-loss parameters
/// (also after divergence); `on_epoch` fires after every completed epoch.
/// Batch-norm running statistics are re-estimated on the train set before
/// each validation pass, so checkpoints carry statistics that match their
/// weights.
pub fn train<E: Element>(
    model: &mut Model<E>,
    train_segs: &[Segment],
    val_segs: &[Segment],
    optim: &OptimConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    if train_segs.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 segments, got {}",
            train_segs.len()
        )));
    }
    if val_segs.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut opt = AdamW::new(&model.store, optim.clone());
    let mut stopper = EarlyStopper::new(optim.patience, optim.min_improvement);
    let mut best_store: Option<ParamStore<E>> = None;
    let mut history = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut note = None;
    let mut epochs_run = 0;

    'epochs: for epoch in 1..=optim.max_epochs as u64 {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, batch) in epoch_batches(train_segs.len(), optim.batch_size, seed, epoch)
            .iter()
            .enumerate()
        {
            let (x, labels) = batch_tensor::<E>(train_segs, batch);
            let targets: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
            let mut tape = model.store.tape(true);
            let xid = tape.constant(x);
            let mut ctx = RunCtx::train(seed, epoch, bi as u64);
            let scores = model.forward_scores(&mut tape, xid, &mut ctx)?;
            let loss = tape.cross_entropy(scores, &targets);
            let loss_val = tape.value(loss).data()[0].into_f64();
            if !loss_val.is_finite() {
                stop_reason = StopReason::Diverged;
                note = Some(format!("train loss {loss_val} at epoch {epoch} batch {bi}"));
                epochs_run = epoch;
                break 'epochs;
            }
            tape.backward(loss)?;
            if let Err(Error::NonFiniteGrad { name }) = opt.apply(&mut model.store, &tape) {
                stop_reason = StopReason::Diverged;
                note = Some(format!(
                    "non-finite gradient in '{name}' at epoch {epoch} batch {bi}"
                ));
                epochs_run = epoch;
                break 'epochs;
            }
            loss_sum += loss_val * batch.len() as f64;
            seen += batch.len();
        }
        epochs_run = epoch;
        let train_loss = loss_sum / seen as f64;
        refresh_stats(model, train_segs, optim.batch_size)?;
        let (probs, val_loss) = evaluate(model, val_segs, optim.batch_size)?;
        if !val_loss.is_finite() {
            stop_reason = StopReason::Diverged;
            note = Some(format!("val loss {val_loss} at epoch {epoch}"));
            break 'epochs;
        }
        let val_labels: Vec<u8> = val_segs.iter().map(|s| s.label).collect();
        let val_auroc = metrics::auroc(&probs, &val_labels);
        let (improved, decision) = stopper.observe(epoch, val_loss);
        if improved {
            best_store = Some(model.store.clone());
        }
        let stats = EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_auroc,
            improved,
        };
        on_epoch(&stats);
        history.push(stats);
        if decision == StopDecision::Stop {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
    }

    if let Some(best) = best_store {
        model.store = best;
    }
    Ok(TrainOutcome {
        epochs_run,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best_loss,
        stop_reason,
        note,
        history,
    })
}
