use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tasks::dataset::Dataset;
use crate::tensor::Real;

/// One item drawn from a source: an identifier unique within its class for
/// the draw, and its features.
#[derive(Clone, Debug)]
pub struct Draw {
    pub item: u64,
    pub x: Vec<Real>,
}

/// Anything episodes can be sampled from.
pub trait TaskSource: Send + Sync {
    fn name(&self) -> &str;
    fn classes(&self) -> &[u32];
    fn input_dim(&self) -> usize;
    /// `count` distinct items of `class`.
    fn draw(&self, class: u32, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Draw>>;
}

/// A subset of a dataset's classes.
#[derive(Clone, Debug)]
pub struct DatasetView {
    name: String,
    dataset: Arc<Dataset>,
    classes: Vec<u32>,
}

impl DatasetView {
    pub fn new(name: impl Into<String>, dataset: Arc<Dataset>, classes: Vec<u32>) -> Result<Self> {
        for &c in &classes {
            if dataset.class_items(c).is_empty() {
                return Err(Error::config(format!("class {c} has no items in dataset {}", dataset.name())));
            }
        }
        Ok(Self { name: name.into(), dataset, classes })
    }

    pub fn whole(dataset: Arc<Dataset>) -> Self {
        let classes = dataset.classes();
        Self { name: dataset.name().to_string(), dataset, classes }
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    /// Every item of the view's classes, in dataset order.
    pub fn items(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.classes.iter().flat_map(|&c| self.dataset.class_items(c).iter().copied()).collect();
        all.sort_unstable();
        all
    }
}

impl TaskSource for DatasetView {
    fn name(&self) -> &str {
        &self.name
    }

    fn classes(&self) -> &[u32] {
        &self.classes
    }

    fn input_dim(&self) -> usize {
        self.dataset.dim()
    }

    fn draw(&self, class: u32, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Draw>> {
        let pool = self.dataset.class_items(class);
        if pool.len() < count {
            return Err(Error::Sampling(format!(
                "class {class} of {} has {} items, {count} needed",
                self.name,
                pool.len()
            )));
        }
        Ok(pool
            .choose_multiple(rng, count)
            .map(|&i| Draw { item: i as u64, x: self.dataset.item(i).to_vec() })
            .collect())
    }
}

/// A source with some of its classes hidden, so that several tasks of one
/// sequence can be drawn from the same source without sharing classes.
pub struct Restricted<'a> {
    inner: &'a dyn TaskSource,
    classes: Vec<u32>,
}

impl<'a> Restricted<'a> {
    pub fn excluding(inner: &'a dyn TaskSource, used: &[u32]) -> Self {
        let classes = inner.classes().iter().copied().filter(|c| !used.contains(c)).collect();
        Self { inner, classes }
    }
}

impl TaskSource for Restricted<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn classes(&self) -> &[u32] {
        &self.classes
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn draw(&self, class: u32, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Draw>> {
        self.inner.draw(class, count, rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: Vec<Real>,
    pub label: usize,
    /// Original class and item id, for provenance checks.
    pub class: u32,
    pub item: u64,
}

/// An N-way K-shot problem: shuffled demonstrations, held-out queries and the
/// episode-local label assignment.
#[derive(Clone, Debug)]
pub struct Episode {
    pub task: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub demos: Vec<Example>,
    pub queries: Vec<Example>,
    /// Original class → episode label.
    pub label_map: BTreeMap<u32, usize>,
}

impl Episode {
    /// Shifts every label by `offset` (class-incremental output spaces).
    pub fn offset_labels(mut self, offset: usize) -> Self {
        for e in self.demos.iter_mut().chain(self.queries.iter_mut()) {
            e.label += offset;
        }
        for v in self.label_map.values_mut() {
            *v += offset;
        }
        self
    }

    pub fn label_range(&self) -> (usize, usize) {
        let min = self.label_map.values().copied().min().unwrap_or(0);
        let max = self.label_map.values().copied().max().unwrap_or(0);
        (min, max)
    }

    pub fn input_dim_mismatch(&self, dim: usize) -> bool {
        self.demos.iter().chain(&self.queries).any(|e| e.x.len() != dim)
    }

    /// Position in `demos` of the first demonstration of each label, in
    /// order of appearance.
    pub fn first_shot_indices(&self) -> Vec<usize> {
        let mut seen = std::collections::BTreeSet::new();
        self.demos.iter().enumerate().filter(|(_, d)| seen.insert(d.label)).map(|(i, _)| i).collect()
    }
}

/// Samples `n_way` distinct classes, relabels them with a fresh uniform
/// bijection onto `0..n_way`, draws `k_shot` demonstrations and
/// `queries_per_class` disjoint queries per class, and shuffles both lists.
pub fn sample_episode(
    source: &dyn TaskSource,
    n_way: usize,
    k_shot: usize,
    queries_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Sampling("n_way and k_shot must be positive".into()));
    }
    let classes = source.classes();
    if classes.len() < n_way {
        return Err(Error::Sampling(format!(
            "{} has {} classes, {n_way} needed",
            source.name(),
            classes.len()
        )));
    }
    let chosen: Vec<u32> = classes.choose_multiple(rng, n_way).copied().collect();
    let mut labels: Vec<usize> = (0..n_way).collect();
    labels.shuffle(rng);

    let mut demos = Vec::with_capacity(n_way * k_shot);
    let mut queries = Vec::with_capacity(n_way * queries_per_class);
    let mut label_map = BTreeMap::new();
    for (&class, &label) in chosen.iter().zip(&labels) {
        label_map.insert(class, label);
        let draws = source.draw(class, k_shot + queries_per_class, rng)?;
        for (i, d) in draws.into_iter().enumerate() {
            let ex = Example { x: d.x, label, class, item: d.item };
            if i < k_shot {
                demos.push(ex);
            } else {
                queries.push(ex);
            }
        }
    }
    demos.shuffle(rng);
    queries.shuffle(rng);
    Ok(Episode { task: source.name().to_string(), n_way, k_shot, demos, queries, label_map })
}
