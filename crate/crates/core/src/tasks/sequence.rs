use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tasks::episode::{sample_episode, Episode, Restricted, TaskSource};
use crate::tasks::split::{ClMode, OutputSpace};

/// `M` episodes presented back to back, with the evaluation schedule of the
/// continual-learning objective: after the demos of task `m`, queries of
/// every task `1..=m` are scored.
#[derive(Clone, Debug)]
pub struct ClSequence {
    pub episodes: Vec<Episode>,
    pub mode: ClMode,
    /// Demo index one past the end of each task, in the concatenated stream.
    pub boundaries: Vec<usize>,
    /// Tasks (1-based) evaluated at each boundary (1-based order).
    pub eval_points: Vec<Vec<usize>>,
}

impl ClSequence {
    pub fn n_tasks(&self) -> usize {
        self.episodes.len()
    }

    pub fn total_demos(&self) -> usize {
        self.boundaries.last().copied().unwrap_or(0)
    }

    pub fn total_terms(&self) -> usize {
        self.eval_points.iter().map(Vec::len).sum()
    }

    /// Demo index where task `m` (0-based) starts.
    pub fn task_start(&self, m: usize) -> usize {
        if m == 0 {
            0
        } else {
            self.boundaries[m - 1]
        }
    }
}

pub fn build_cl_sequence(episodes: Vec<Episode>, mode: ClMode) -> Result<ClSequence> {
    if episodes.is_empty() {
        return Err(Error::config("a CL sequence needs at least one episode"));
    }
    if mode == ClMode::Cil {
        let mut ranges: Vec<(usize, usize, usize)> =
            episodes.iter().enumerate().map(|(i, e)| (e.label_range().0, e.label_range().1, i)).collect();
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 <= w[0].1 {
                return Err(Error::config(format!(
                    "class-incremental label ranges of tasks {} and {} overlap",
                    w[0].2 + 1,
                    w[1].2 + 1
                )));
            }
        }
    }
    let mut boundaries = Vec::with_capacity(episodes.len());
    let mut end = 0;
    for e in &episodes {
        end += e.demos.len();
        boundaries.push(end);
    }
    let eval_points = (1..=episodes.len()).map(|m| (1..=m).collect()).collect();
    Ok(ClSequence { episodes, mode, boundaries, eval_points })
}

/// Samples one episode per source, in order. Tasks drawn from the same
/// source (by name) never share classes. Class-incremental labels are
/// shifted into each task's own range.
pub fn sample_cl_sequence(
    sources: &[&dyn TaskSource],
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    mode: ClMode,
    rng: &mut ChaCha8Rng,
) -> Result<ClSequence> {
    let space = OutputSpace { mode, n_way, n_tasks: sources.len() };
    let mut episodes: Vec<Episode> = Vec::with_capacity(sources.len());
    for (m, src) in sources.iter().enumerate() {
        let used: Vec<u32> = episodes
            .iter()
            .filter(|e| e.task == src.name())
            .flat_map(|e| e.label_map.keys().copied())
            .collect();
        let ep = if used.is_empty() {
            sample_episode(*src, n_way, k_shot, queries_per_class, rng)?
        } else {
            sample_episode(&Restricted::excluding(*src, &used), n_way, k_shot, queries_per_class, rng)?
        };
        episodes.push(ep.offset_labels(space.label_offset(m)));
    }
    build_cl_sequence(episodes, mode)
}
