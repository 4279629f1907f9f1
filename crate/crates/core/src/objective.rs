//! The continual-learning meta-objective.
//!
//! After the demonstrations of task `m`, the fast weights are snapshotted and
//! one query of every task `j ≤ m` is scored with cross-entropy. Terms with
//! `j < m` are backward-transfer terms; switching them off leaves the
//! ordinary "learn the newest task" objective. They are still evaluated as
//! monitors so their curves can be logged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Label, Model, TapeState};
use crate::tape::{Tape, Var};
use crate::tasks::ClSequence;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default = "yes")]
    pub backward_terms: bool,
    #[serde(default)]
    pub aux_one_shot: bool,
    /// Queries scored per (boundary, task) term; their losses are averaged.
    #[serde(default = "one")]
    pub queries_per_task: usize,
    /// Optional weight per scheduled term, in `term_schedule` order.
    #[serde(default)]
    pub term_weights: Option<Vec<Real>>,
    #[serde(default = "unit")]
    pub aux_weight: Real,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}
fn unit() -> Real {
    1.0
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { backward_terms: true, aux_one_shot: false, queries_per_task: 1, term_weights: None, aux_weight: 1.0 }
    }
}

/// A `(boundary, task)` pair, both 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Term {
    pub boundary: usize,
    pub task: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    /// `task == boundary`: learning the newest task.
    Learn,
    /// `task < boundary`: remembering an earlier task.
    Backward,
    /// Query of a task after only one demonstration per class.
    AuxOneShot,
}

impl TermKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TermKind::Learn => "learn",
            TermKind::Backward => "backward",
            TermKind::AuxOneShot => "aux_one_shot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "learn" => Some(TermKind::Learn),
            "backward" => Some(TermKind::Backward),
            "aux_one_shot" => Some(TermKind::AuxOneShot),
            _ => None,
        }
    }
}

/// Objective terms in lexicographic `(boundary, task)` order:
/// `M(M+1)/2` of them with backward terms, `M` without.
pub fn term_schedule(n_tasks: usize, backward_terms: bool) -> Vec<Term> {
    (1..=n_tasks)
        .flat_map(|m| {
            let first = if backward_terms { 1 } else { m };
            (first..=m).map(move |j| Term { boundary: m, task: j })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub boundary: usize,
    pub task: usize,
    pub kind: TermKind,
    /// Name of the source the task was sampled from.
    pub domain: String,
    pub value: Real,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Terms of the objective, in schedule order.
    pub terms: Vec<LossEntry>,
    /// Auxiliary one-shot terms (part of the objective when enabled).
    pub aux: Vec<LossEntry>,
    /// Backward terms evaluated for logging only (when they are switched off).
    pub monitors: Vec<LossEntry>,
    pub total: Real,
}

impl LossBreakdown {
    /// All entries in logging order: terms, monitors, aux.
    pub fn all_entries(&self) -> impl Iterator<Item = &LossEntry> {
        self.terms.iter().chain(&self.monitors).chain(&self.aux)
    }

    /// Element-wise mean of structurally identical breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as Real;
        let avg = |sel: fn(&LossBreakdown) -> &Vec<LossEntry>| -> Vec<LossEntry> {
            sel(first)
                .iter()
                .enumerate()
                .map(|(i, e)| LossEntry {
                    value: items.iter().map(|b| sel(b)[i].value).sum::<Real>() / n,
                    ..e.clone()
                })
                .collect()
        };
        Some(LossBreakdown {
            terms: avg(|b| &b.terms),
            aux: avg(|b| &b.aux),
            monitors: avg(|b| &b.monitors),
            total: items.iter().map(|b| b.total).sum::<Real>() / n,
        })
    }
}

/// Result of recording the objective on a tape.
pub struct AclLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Fast weights after the demos of each task.
    pub boundary_states: Vec<TapeState>,
}

fn check_labels(model: &Model, seq: &ClSequence, cfg: &ObjectiveConfig) -> Result<()> {
    let width = model.config().n_outputs;
    for (m, ep) in seq.episodes.iter().enumerate() {
        if ep.demos.iter().chain(&ep.queries).any(|e| e.label >= width) {
            return Err(Error::config(format!(
                "task {} uses labels up to {} but the model has {width} outputs",
                m + 1,
                ep.label_range().1
            )));
        }
        if ep.queries.len() < cfg.queries_per_task {
            return Err(Error::config(format!(
                "task {} has {} queries, objective needs {}",
                m + 1,
                ep.queries.len(),
                cfg.queries_per_task
            )));
        }
        if ep.input_dim_mismatch(model.config().input_dim) {
            return Err(Error::config(format!("task {} inputs do not match model.input_dim", m + 1)));
        }
    }
    Ok(())
}

/// Mean query cross-entropy of task `j` (0-based) from `state`.
fn query_loss(model: &Model, tape: &mut Tape, bound: &crate::model::Bound, state: &TapeState, seq: &ClSequence, j: usize, n: usize) -> Result<Var> {
    let mut losses = Vec::with_capacity(n);
    for q in &seq.episodes[j].queries[..n] {
        let (logits, _) = model.step(tape, bound, state, &q.x, Label::Unknown)?;
        losses.push((tape.cross_entropy(logits, q.label)?, 1.0 / n as Real));
    }
    Ok(tape.weighted_sum(&losses)?)
}

/// Records the objective for one sequence on `tape`.
pub fn acl_loss(model: &Model, tape: &mut Tape, bound: &crate::model::Bound, seq: &ClSequence, cfg: &ObjectiveConfig) -> Result<AclLoss> {
    check_labels(model, seq, cfg)?;
    let m_tasks = seq.n_tasks();
    let schedule = term_schedule(m_tasks, cfg.backward_terms);
    if let Some(w) = &cfg.term_weights {
        if w.len() != schedule.len() {
            return Err(Error::config(format!("{} term weights for {} terms", w.len(), schedule.len())));
        }
    }
    let nq = cfg.queries_per_task;

    let mut state = model.initial_state(bound);
    let mut boundary_states = Vec::with_capacity(m_tasks);
    let mut weighted: Vec<(Var, Real)> = Vec::new();
    let mut breakdown = LossBreakdown::default();
    let entry = |m: usize, j: usize, kind, value| LossEntry {
        boundary: m,
        task: j,
        kind,
        domain: seq.episodes[j - 1].task.clone(),
        value,
    };

    for (mi, ep) in seq.episodes.iter().enumerate() {
        let task_start = state.clone();
        for d in &ep.demos {
            state = model.step(tape, bound, &state, &d.x, Label::Known(d.label))?.1;
        }
        boundary_states.push(state.clone());
        let m = mi + 1;

        for j in 1..=m {
            let kind = if j == m { TermKind::Learn } else { TermKind::Backward };
            let l = query_loss(model, tape, bound, &state, seq, j - 1, nq)?;
            let value = tape.scalar(l);
            let term = Term { boundary: m, task: j };
            match schedule.iter().position(|t| *t == term) {
                Some(pos) => {
                    let w = cfg.term_weights.as_ref().map_or(1.0, |w| w[pos]);
                    weighted.push((l, w));
                    breakdown.terms.push(entry(m, j, kind, value));
                }
                None => breakdown.monitors.push(entry(m, j, kind, value)),
            }
        }

        if cfg.aux_one_shot {
            let mut s = task_start;
            for i in ep.first_shot_indices() {
                let d = &ep.demos[i];
                s = model.step(tape, bound, &s, &d.x, Label::Known(d.label))?.1;
            }
            let l = query_loss(model, tape, bound, &s, seq, mi, nq)?;
            breakdown.aux.push(entry(m, m, TermKind::AuxOneShot, tape.scalar(l)));
            weighted.push((l, cfg.aux_weight));
        }
    }

    let total = tape.weighted_sum(&weighted)?;
    breakdown.total = tape.scalar(total);
    Ok(AclLoss { total, breakdown, boundary_states })
}

/// Objective value and parameter gradients for one sequence.
pub fn loss_and_grads(model: &Model, seq: &ClSequence, cfg: &ObjectiveConfig) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let loss = acl_loss(model, &mut tape, &bound, seq, cfg)?;
    if !loss.breakdown.total.is_finite() {
        return Err(Error::Tensor(crate::error::TensorError::NonFinite { op: "acl_loss" }));
    }
    let grads = tape.backward(loss.total)?;
    let g = bound.vars.iter().map(|&v| grads.get(v)).collect::<Result<Vec<_>, _>>()?;
    Ok((loss.breakdown, g))
}
