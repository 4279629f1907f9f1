//! Meta-training loop.
//!
//! Every step samples a batch of continual-learning sequences, records the
//! objective of each on its own tape, averages the gradients in batch order
//! and takes one Adam step. The order in which domains appear inside a
//! sequence rotates from one batch to the next.

use std::path::Path;
use std::sync::Arc;

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::curves::{TermRow, TERM_LOG_HEADER};
use crate::eval::sequence_accuracy;
use crate::exec::{stream_rng, Executor};
use crate::model::Model;
use crate::objective::{loss_and_grads, LossBreakdown};
use crate::optim::{clip_global_norm, global_norm, lr_schedule, Adam};
use crate::tasks::{sample_cl_sequence, ClSequence, TaskSource};
use crate::tensor::{Real, Tensor};

pub const TRAIN_LOG_HEADER: &str = "step,lr,loss,grad_norm,val_acc";

/// Opened training and validation sources, one pair per domain.
#[derive(Clone)]
pub struct Sources {
    pub train: Vec<Arc<dyn TaskSource>>,
    pub valid: Vec<Arc<dyn TaskSource>>,
}

impl Sources {
    pub fn open(cfg: &TrainConfig, data_root: Option<&Path>) -> Result<Self> {
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for d in &cfg.domains {
            let t = d.train.open(data_root)?;
            valid.push(match &d.valid {
                Some(v) => v.open(data_root)?,
                None => t.clone(),
            });
            train.push(t);
        }
        for s in train.iter().chain(&valid) {
            if s.input_dim() != cfg.model.input_dim {
                return Err(Error::config(format!(
                    "source {} has {} features but model.input_dim is {}",
                    s.name(),
                    s.input_dim(),
                    cfg.model.input_dim
                )));
            }
        }
        Ok(Self { train, valid })
    }
}

/// Domain presented at each position of a sequence, rotating with `round`.
pub fn domain_order(n_domains: usize, n_tasks: usize, round: u64) -> Vec<usize> {
    let r = (round % n_domains as u64) as usize;
    (0..n_tasks).map(|m| (m + r) % n_domains).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: Real,
    pub loss: Real,
    /// Global gradient norm before clipping.
    pub grad_norm: Real,
    pub val_acc: Option<Real>,
}

impl StepLog {
    pub fn to_csv(&self) -> String {
        let val = self.val_acc.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.step, self.lr, self.loss, self.grad_norm, val)
    }
}

pub struct TrainOutcome {
    /// Highest validation accuracy (the final model when validation is off).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<StepLog>,
    pub terms: Vec<TermRow>,
    /// Step and reason when training stopped on a non-finite or exploding
    /// loss. `last` then holds the parameters from before that step.
    pub diverged: Option<(u64, String)>,
}

impl TrainOutcome {
    /// `train_log.csv`, `terms.csv`, `best.ckpt` and `last.ckpt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut log = String::from(TRAIN_LOG_HEADER);
        log.push('\n');
        for l in &self.log {
            log.push_str(&l.to_csv());
            log.push('\n');
        }
        let mut terms = String::from(TERM_LOG_HEADER);
        terms.push('\n');
        for t in &self.terms {
            terms.push_str(&t.to_csv());
            terms.push('\n');
        }
        for (name, text) in [("train_log.csv", log), ("terms.csv", terms)] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        self.best.save(dir.join("best.ckpt"))?;
        self.last.save(dir.join("last.ckpt"))
    }
}

fn sample_batch(cfg: &TrainConfig, sources: &[Arc<dyn TaskSource>], seed: u64, stream: u64, order: &[usize]) -> Result<ClSequence> {
    let picked: Vec<&dyn TaskSource> = order.iter().map(|&d| sources[d].as_ref()).collect();
    let e = &cfg.episodes;
    let mut rng = stream_rng(seed, stream);
    sample_cl_sequence(&picked, e.n_way, e.k_shot, e.queries_per_class, e.mode, &mut rng)
}

/// Validation sequences: fixed for the whole run, rotating domain order.
pub fn validation_set(cfg: &TrainConfig, sources: &Sources) -> Result<Vec<ClSequence>> {
    let v = &cfg.validation;
    (0..v.sequences)
        .map(|i| {
            let order = domain_order(sources.valid.len(), cfg.episodes.n_tasks, i as u64);
            sample_batch(cfg, &sources.valid, v.seed, i as u64, &order)
        })
        .collect()
}

/// Trains from `init` (or a fresh model) for `cfg.steps` steps in total.
/// `on_step` sees every log row as it is produced.
pub fn meta_train(
    cfg: &TrainConfig,
    sources: &Sources,
    init: Option<Checkpoint>,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let exec = Executor::new(cfg.threads)?;
    let (mut model, mut adam, start, mut best_val, mut best_step) = match init {
        Some(ck) => {
            if ck.config != cfg.model {
                return Err(Error::config("resume checkpoint was written for a different model config"));
            }
            let model = ck.to_model()?;
            let adam = ck.optimizer.clone().unwrap_or_else(|| Adam::new(model.params().tensors()));
            (model, adam, ck.meta.step, ck.meta.val_acc, ck.meta.best_step)
        }
        None => {
            let model = Model::new(cfg.model.clone())?;
            let adam = Adam::new(model.params().tensors());
            (model, adam, 0, None, None)
        }
    };
    let meta = |step, val_acc, best_step| CheckpointMeta { step, train_seed: cfg.seed, val_acc, best_step };
    let mut best = Checkpoint::from_model(&model, Some(&adam), meta(start, best_val, best_step));
    let valid = if cfg.validation.every > 0 { validation_set(cfg, sources)? } else { Vec::new() };

    let mut log = Vec::new();
    let mut terms = Vec::new();
    let mut diverged = None;
    let b = cfg.batch_size;
    for step in start + 1..=cfg.steps {
        let order = domain_order(sources.train.len(), cfg.episodes.n_tasks, step - 1);
        let model_ref = &model;
        let results = exec.map_range(b, |i| -> Result<(LossBreakdown, Vec<Tensor>)> {
            let seq = sample_batch(cfg, &sources.train, cfg.seed, (step - 1) * b as u64 + i as u64, &order)?;
            loss_and_grads(model_ref, &seq, &cfg.objective)
        });

        let mut breakdowns = Vec::with_capacity(b);
        let mut grads: Option<Vec<Tensor>> = None;
        let mut failure = None;
        for r in results {
            match r {
                Ok((bd, g)) => {
                    match &mut grads {
                        None => grads = Some(g),
                        Some(acc) => {
                            for (a, x) in acc.iter_mut().zip(&g) {
                                a.data_mut().iter_mut().zip(x.data()).for_each(|(p, q)| *p += q);
                            }
                        }
                    }
                    breakdowns.push(bd);
                }
                Err(Error::Tensor(e)) if failure.is_none() => failure = Some(e.to_string()),
                Err(Error::Tensor(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let mean = LossBreakdown::mean(&breakdowns);
        let loss = mean.as_ref().map_or(Real::NAN, |m| m.total);
        if failure.is_none() && (!loss.is_finite() || cfg.max_loss.is_some_and(|cap| loss > cap)) {
            failure = Some(format!("loss {loss}"));
        }
        let mut grads = grads.unwrap_or_default();
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v /= b as Real);
        }
        let grad_norm = global_norm(&grads);
        if failure.is_none() && !grad_norm.is_finite() {
            failure = Some(format!("gradient norm {grad_norm}"));
        }
        if let Some(f) = failure {
            diverged = Some((step, f));
            break;
        }
        if let Some(c) = cfg.optimizer.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        let lr = lr_schedule(step, cfg.model.d_model, cfg.optimizer.warmup_steps, cfg.optimizer.lr_scale)?;
        adam.update(model.params_mut().tensors_mut(), &grads, lr, &cfg.optimizer)?;

        let mean = mean.expect("finite loss implies a breakdown");
        terms.extend(mean.all_entries().map(|e| TermRow {
            step,
            boundary: e.boundary,
            task: e.task,
            domain: e.domain.clone(),
            kind: e.kind,
            value: e.value,
        }));
        let mut val_acc = None;
        let every = cfg.validation.every;
        if every > 0 && (step % every == 0 || step == cfg.steps) {
            let acc = validation_accuracy(&model, &valid, &exec)?;
            val_acc = Some(acc);
            if best_val.is_none_or(|b| acc > b) {
                best_val = Some(acc);
                best_step = Some(step);
                best = Checkpoint::from_model(&model, Some(&adam), meta(step, Some(acc), Some(step)));
            }
        }
        let row = StepLog { step, lr, loss, grad_norm, val_acc };
        on_step(&row);
        log.push(row);
    }

    let done = log.last().map_or(start, |l| l.step);
    let last = Checkpoint::from_model(&model, Some(&adam), meta(done, best_val, best_step));
    if cfg.validation.every == 0 {
        best = last.clone();
    }
    Ok(TrainOutcome { best, last, log, terms, diverged })
}

/// Mean query accuracy over every `(boundary, task)` pair of `seqs`.
pub fn validation_accuracy(model: &Model, seqs: &[ClSequence], exec: &Executor) -> Result<Real> {
    let counts = exec.map(seqs, |s| sequence_accuracy(model, s));
    let (mut c, mut t) = (0u64, 0u64);
    for r in counts {
        let (a, b) = r?;
        c += a;
        t += b;
    }
    Ok(if t == 0 { 0.0 } else { c as Real / t as Real })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_order_alternates() {
        assert_eq!(domain_order(2, 2, 0), vec![0, 1]);
        assert_eq!(domain_order(2, 2, 1), vec![1, 0]);
        assert_eq!(domain_order(2, 2, 2), vec![0, 1]);
        assert_eq!(domain_order(1, 3, 5), vec![0, 0, 0]);
        assert_eq!(domain_order(3, 2, 1), vec![1, 2]);
    }
}
