//! Meta-testing: accuracy matrices over continual-learning sequences,
//! transfer metrics, loss-curve extraction and fast-weight snapshots.

pub mod curves;
pub mod metrics;
pub mod snapshots;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{stream_rng, Executor};
use crate::model::{argmax, Model, Session};
use crate::tasks::{sample_cl_sequence, ClMode, ClSequence, DatasetView, Example, OutputSpace, TaskSource};
use crate::tensor::Real;

pub use curves::{curve_extract, divergence_signature, read_term_log, CurvePoint, TermRow};
pub use metrics::{backward_transfer, forward_transfer, Summary};
pub use snapshots::{dump_weight_snapshots, SnapshotSelection};

/// Anything that learns from labelled demonstrations in context.
pub trait InContextLearner: Sync {
    type State<'a>
    where
        Self: 'a;

    fn n_outputs(&self) -> usize;
    fn fresh(&self) -> Self::State<'_>;
    fn observe(&self, state: &mut Self::State<'_>, x: &[Real], y: usize) -> Result<()>;
    /// Class scores for `x`; must leave the state unchanged.
    fn predict(&self, state: &mut Self::State<'_>, x: &[Real]) -> Result<Vec<Real>>;
}

impl InContextLearner for Model {
    type State<'a> = Session<'a>;

    fn n_outputs(&self) -> usize {
        self.config().n_outputs
    }

    fn fresh(&self) -> Session<'_> {
        Session::new(self)
    }

    fn observe(&self, state: &mut Session<'_>, x: &[Real], y: usize) -> Result<()> {
        state.observe(x, y)
    }

    fn predict(&self, state: &mut Session<'_>, x: &[Real]) -> Result<Vec<Real>> {
        state.predict(x)
    }
}

/// Stores every demonstration and answers with the label of the nearest
/// one (squared Euclidean distance, earliest wins ties).
#[derive(Clone, Debug)]
pub struct NearestNeighbour {
    pub n_outputs: usize,
}

impl InContextLearner for NearestNeighbour {
    type State<'a> = Vec<(Vec<Real>, usize)>;

    fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    fn fresh(&self) -> Self::State<'_> {
        Vec::new()
    }

    fn observe(&self, state: &mut Self::State<'_>, x: &[Real], y: usize) -> Result<()> {
        state.push((x.to_vec(), y));
        Ok(())
    }

    fn predict(&self, state: &mut Self::State<'_>, x: &[Real]) -> Result<Vec<Real>> {
        let mut scores = vec![0.0; self.n_outputs];
        let dist = |a: &[Real]| a.iter().zip(x).map(|(p, q)| (p - q) * (p - q)).sum::<Real>();
        let mut best: Option<(Real, usize)> = None;
        for (v, y) in state.iter() {
            let d = dist(v);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, *y));
            }
        }
        if let Some((_, y)) = best {
            scores[y] = 1.0;
        }
        Ok(scores)
    }
}

/// One task of a meta-test sequence.
#[derive(Clone)]
pub struct EvalTask {
    pub demos: Arc<dyn TaskSource>,
    /// Fixed query pool (e.g. a whole test split). When absent, queries are
    /// sampled with the episode.
    pub pool: Option<DatasetView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub n_way: usize,
    pub k_shot: usize,
    #[serde(default)]
    pub mode: ClMode,
    /// Sampled queries per class, for tasks without a fixed pool.
    #[serde(default = "Protocol::queries")]
    pub queries_per_class: usize,
    #[serde(default = "Protocol::runs")]
    pub runs: usize,
    #[serde(default = "Protocol::episodes")]
    pub episodes_per_run: usize,
    #[serde(default)]
    pub seed: u64,
    /// Also evaluate each task from a fresh state, for forward transfer.
    #[serde(default = "Protocol::baselines")]
    pub baselines: bool,
}

impl Protocol {
    fn queries() -> usize {
        5
    }
    fn runs() -> usize {
        5
    }
    fn episodes() -> usize {
        2000
    }
    fn baselines() -> bool {
        true
    }

    pub fn new(n_way: usize, k_shot: usize) -> Self {
        Self {
            n_way,
            k_shot,
            mode: ClMode::Dil,
            queries_per_class: Self::queries(),
            runs: Self::runs(),
            episodes_per_run: Self::episodes(),
            seed: 0,
            baselines: true,
        }
    }
}

/// Correct/total counts per `(boundary, task)` plus fresh-state baselines.
#[derive(Clone, Debug, Default, PartialEq)]
struct Counts {
    correct: Vec<Vec<u64>>,
    total: Vec<Vec<u64>>,
    base_correct: Vec<u64>,
    base_total: Vec<u64>,
}

impl Counts {
    fn new(m: usize) -> Self {
        Self {
            correct: (0..m).map(|i| vec![0; i + 1]).collect(),
            total: (0..m).map(|i| vec![0; i + 1]).collect(),
            base_correct: vec![0; m],
            base_total: vec![0; m],
        }
    }

    fn add(&mut self, o: &Counts) {
        for (a, b) in self.correct.iter_mut().flatten().zip(o.correct.iter().flatten()) {
            *a += b;
        }
        for (a, b) in self.total.iter_mut().flatten().zip(o.total.iter().flatten()) {
            *a += b;
        }
        for (a, b) in self.base_correct.iter_mut().zip(&o.base_correct) {
            *a += b;
        }
        for (a, b) in self.base_total.iter_mut().zip(&o.base_total) {
            *a += b;
        }
    }
}

fn score<L: InContextLearner>(learner: &L, state: &mut L::State<'_>, queries: &[Example]) -> Result<u64> {
    let mut correct = 0;
    for q in queries {
        if argmax(&learner.predict(state, &q.x)?) == q.label {
            correct += 1;
        }
    }
    Ok(correct)
}

/// Accuracy counts of one sequence: after the demos of task `m`, every query
/// of every task `j ≤ m` is classified.
fn run_sequence<L: InContextLearner>(learner: &L, seq: &ClSequence, baselines: bool) -> Result<Counts> {
    let m_tasks = seq.n_tasks();
    let mut c = Counts::new(m_tasks);
    let mut state = learner.fresh();
    for (m, ep) in seq.episodes.iter().enumerate() {
        for d in &ep.demos {
            learner.observe(&mut state, &d.x, d.label)?;
        }
        for j in 0..=m {
            let qs = &seq.episodes[j].queries;
            c.correct[m][j] += score(learner, &mut state, qs)?;
            c.total[m][j] += qs.len() as u64;
        }
    }
    for (m, ep) in seq.episodes.iter().enumerate() {
        if m == 0 {
            c.base_correct[0] = c.correct[0][0];
            c.base_total[0] = c.total[0][0];
        } else if baselines {
            let mut fresh = learner.fresh();
            for d in &ep.demos {
                learner.observe(&mut fresh, &d.x, d.label)?;
            }
            c.base_correct[m] = score(learner, &mut fresh, &ep.queries)?;
            c.base_total[m] = ep.queries.len() as u64;
        }
    }
    Ok(c)
}

/// Correct and total query counts over every `(boundary, task)` pair of
/// one sequence.
pub fn sequence_accuracy<L: InContextLearner>(learner: &L, seq: &ClSequence) -> Result<(u64, u64)> {
    let c = run_sequence(learner, seq, false)?;
    Ok((c.correct.iter().flatten().sum(), c.total.iter().flatten().sum()))
}

/// `acc[m][j]` of a single sequence (0-based, `j ≤ m`).
pub fn accuracy_matrix<L: InContextLearner>(learner: &L, seq: &ClSequence) -> Result<Vec<Vec<Real>>> {
    let c = run_sequence(learner, seq, false)?;
    Ok(c.correct.iter().zip(&c.total).map(|(cr, tr)| cr.iter().zip(tr).map(|(&a, &b)| ratio(a, b)).collect()).collect())
}

/// Accuracy matrix of one run: `acc[m][j]` for `j ≤ m`, both 0-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub acc: Vec<Vec<Real>>,
    /// Accuracy of each task learned from a fresh state (empty when
    /// baselines are off).
    pub baseline: Vec<Real>,
    pub avg_acc: Real,
    pub backward_transfer: Option<Real>,
    pub forward_transfer: Option<Real>,
    pub queries: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<String>,
    pub protocol: Protocol,
    pub runs: Vec<RunReport>,
    /// Element-wise mean of the per-run matrices.
    pub acc_mean: Vec<Vec<Real>>,
    pub avg_acc: Summary,
    pub backward_transfer: Option<Summary>,
    pub forward_transfer: Option<Summary>,
}

fn ratio(c: u64, t: u64) -> Real {
    if t == 0 {
        0.0
    } else {
        c as Real / t as Real
    }
}

fn run_report(run: usize, c: &Counts, baselines: bool) -> RunReport {
    let acc: Vec<Vec<Real>> =
        c.correct.iter().zip(&c.total).map(|(cr, tr)| cr.iter().zip(tr).map(|(&a, &b)| ratio(a, b)).collect()).collect();
    let baseline: Vec<Real> = if baselines {
        c.base_correct.iter().zip(&c.base_total).map(|(&a, &b)| ratio(a, b)).collect()
    } else {
        Vec::new()
    };
    let last = acc.last().expect("at least one task");
    RunReport {
        run,
        avg_acc: last.iter().sum::<Real>() / last.len() as Real,
        backward_transfer: backward_transfer(&acc),
        forward_transfer: if baselines { forward_transfer(&acc, &baseline) } else { None },
        queries: c.total.iter().flatten().sum(),
        acc,
        baseline,
    }
}

/// Runs `protocol.runs` independent runs of `protocol.episodes_per_run`
/// sequences each over `tasks` (presented in order).
pub fn meta_test<L: InContextLearner>(learner: &L, tasks: &[EvalTask], protocol: &Protocol, exec: &Executor) -> Result<EvalReport> {
    let p = protocol;
    if tasks.is_empty() || p.runs == 0 || p.episodes_per_run == 0 || p.n_way == 0 || p.k_shot == 0 {
        return Err(Error::config("meta-test needs tasks, runs, episodes, n_way and k_shot ≥ 1"));
    }
    let space = OutputSpace { mode: p.mode, n_way: p.n_way, n_tasks: tasks.len() };
    if learner.n_outputs() != space.width() {
        return Err(Error::config(format!(
            "model has {} outputs but the {:?} protocol with {} tasks of {}-way needs {}",
            learner.n_outputs(),
            p.mode,
            tasks.len(),
            p.n_way,
            space.width()
        )));
    }
    let sources: Vec<&dyn TaskSource> = tasks.iter().map(|t| t.demos.as_ref()).collect();
    let per_run = p.episodes_per_run;
    let jobs = p.runs * per_run;
    let results = exec.map_range(jobs, |i| -> Result<Counts> {
        let mut rng = stream_rng(p.seed, i as u64);
        let sampled_q = if tasks.iter().all(|t| t.pool.is_some()) { 0 } else { p.queries_per_class };
        let mut seq = sample_cl_sequence(&sources, p.n_way, p.k_shot, sampled_q, p.mode, &mut rng)?;
        for (t, ep) in tasks.iter().zip(seq.episodes.iter_mut()) {
            if let Some(pool) = &t.pool {
                ep.queries = pool_queries(pool, &ep.label_map);
            }
        }
        run_sequence(learner, &seq, p.baselines)
    });

    let mut runs = Vec::with_capacity(p.runs);
    let mut results = results.into_iter();
    for r in 0..p.runs {
        let mut total = Counts::new(tasks.len());
        for c in results.by_ref().take(per_run) {
            total.add(&c?);
        }
        runs.push(run_report(r, &total, p.baselines));
    }
    Ok(summarize(tasks.iter().map(|t| t.demos.name().to_string()).collect(), p.clone(), runs))
}

fn pool_queries(pool: &DatasetView, label_map: &std::collections::BTreeMap<u32, usize>) -> Vec<Example> {
    let ds = pool.dataset();
    pool.items()
        .into_iter()
        .filter_map(|i| {
            let class = ds.label(i);
            label_map.get(&class).map(|&label| Example { x: ds.item(i).to_vec(), label, class, item: i as u64 })
        })
        .collect()
}

fn summarize(tasks: Vec<String>, protocol: Protocol, runs: Vec<RunReport>) -> EvalReport {
    let m = tasks.len();
    let n = runs.len() as Real;
    let acc_mean = (0..m).map(|i| (0..=i).map(|j| runs.iter().map(|r| r.acc[i][j]).sum::<Real>() / n).collect()).collect();
    let opt = |f: fn(&RunReport) -> Option<Real>| -> Option<Summary> {
        runs.iter().map(f).collect::<Option<Vec<_>>>().map(|v| Summary::of(&v))
    };
    EvalReport {
        avg_acc: Summary::of(&runs.iter().map(|r| r.avg_acc).collect::<Vec<_>>()),
        backward_transfer: opt(|r| r.backward_transfer),
        forward_transfer: opt(|r| r.forward_transfer),
        acc_mean,
        tasks,
        protocol,
        runs,
    }
}

impl EvalReport {
    /// `summary.json` plus one `run_NN.csv` per run with columns
    /// `boundary,task,accuracy,baseline` (1-based indices).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let summary = dir.join("summary.json");
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&summary, json + "\n").map_err(|e| Error::io(&summary, e))?;
        for r in &self.runs {
            let mut csv = String::from("boundary,task,accuracy,baseline\n");
            for (m, row) in r.acc.iter().enumerate() {
                for (j, a) in row.iter().enumerate() {
                    let base = if m == j { r.baseline.get(j).map(|b| b.to_string()).unwrap_or_default() } else { String::new() };
                    csv.push_str(&format!("{},{},{},{}\n", m + 1, j + 1, a, base));
                }
            }
            let path = dir.join(format!("run_{:02}.csv", r.run));
            std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{synth_family, SynthSpec, TransformSpec};

    fn family(name: &str, noise: Real) -> Arc<dyn TaskSource> {
        Arc::new(
            synth_family(SynthSpec {
                name: name.into(),
                dim: 6,
                classes: 8,
                noise,
                prototype_scale: 1.0,
                transform: TransformSpec::Identity,
                offset: vec![],
                seed: 3,
            })
            .unwrap(),
        )
    }

    #[test]
    fn single_task_has_no_backward_transfer() {
        let tasks = vec![EvalTask { demos: family("a", 0.1), pool: None }];
        let mut p = Protocol::new(5, 1);
        p.runs = 2;
        p.episodes_per_run = 3;
        let nn = NearestNeighbour { n_outputs: 5 };
        let r = meta_test(&nn, &tasks, &p, &Executor::sequential()).unwrap();
        assert_eq!(r.acc_mean.len(), 1);
        assert!(r.backward_transfer.is_none());
        assert!(r.forward_transfer.is_none());
        assert_eq!(r.runs.len(), 2);
        assert_eq!(r.runs[0].queries, 3 * 25);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let tasks = vec![EvalTask { demos: family("a", 0.1), pool: None }, EvalTask { demos: family("b", 0.1), pool: None }];
        let mut p = Protocol::new(5, 1);
        p.mode = ClMode::Cil;
        let nn = NearestNeighbour { n_outputs: 5 };
        assert!(matches!(meta_test(&nn, &tasks, &p, &Executor::sequential()), Err(Error::Config(_))));
    }
}
