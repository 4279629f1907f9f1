use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::dataset::Dataset;
use crate::tasks::episode::DatasetView;

/// Continual-learning output convention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClMode {
    /// Domain-incremental: every task reuses labels `0..n_way`.
    #[default]
    Dil,
    /// Class-incremental: task `m` owns labels `m·n_way..(m+1)·n_way`.
    Cil,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputSpace {
    pub mode: ClMode,
    pub n_way: usize,
    pub n_tasks: usize,
}

impl OutputSpace {
    pub fn width(&self) -> usize {
        match self.mode {
            ClMode::Dil => self.n_way,
            ClMode::Cil => self.n_way * self.n_tasks,
        }
    }

    /// First label of task `m` (0-based).
    pub fn label_offset(&self, m: usize) -> usize {
        match self.mode {
            ClMode::Dil => 0,
            ClMode::Cil => m * self.n_way,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub tasks: Vec<DatasetView>,
    pub output: OutputSpace,
}

/// Partitions the sorted class list into consecutive groups of `n_way`.
/// No randomness: MNIST with `n_way = 2` always yields 0/1, 2/3, 4/5, 6/7, 8/9.
pub fn split_dataset(dataset: Arc<Dataset>, n_way: usize, mode: ClMode) -> Result<Split> {
    let classes = dataset.classes();
    if n_way == 0 || classes.len() % n_way != 0 {
        return Err(Error::config(format!(
            "{} classes cannot be split into groups of {n_way}",
            classes.len()
        )));
    }
    let tasks = classes
        .chunks(n_way)
        .map(|group| {
            let name = format!("{}-{}{}", dataset.name(), group[0], group[group.len() - 1]);
            DatasetView::new(name, dataset.clone(), group.to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let output = OutputSpace { mode, n_way, n_tasks: tasks.len() };
    Ok(Split { tasks, output })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::episode::TaskSource;
    use crate::tensor::Real;

    fn digits() -> Arc<Dataset> {
        let items: Vec<Vec<Real>> = (0..40).map(|i| vec![i as Real, 1.0]).collect();
        let labels: Vec<u32> = (0..40).map(|i| i % 10).collect();
        Arc::new(Dataset::new("MNIST", items, labels).unwrap())
    }

    #[test]
    fn five_way_split_gives_04_and_59() {
        let s = split_dataset(digits(), 5, ClMode::Dil).unwrap();
        assert_eq!(s.tasks.len(), 2);
        assert_eq!(s.tasks[0].classes(), &[0, 1, 2, 3, 4]);
        assert_eq!(s.tasks[1].classes(), &[5, 6, 7, 8, 9]);
        assert_eq!(s.tasks[0].name(), "MNIST-04");
        assert_eq!(s.tasks[1].name(), "MNIST-59");
        assert_eq!(s.output.width(), 5);
    }

    #[test]
    fn two_way_cil_has_ten_outputs() {
        let s = split_dataset(digits(), 2, ClMode::Cil).unwrap();
        let groups: Vec<Vec<u32>> = s.tasks.iter().map(|t| t.classes().to_vec()).collect();
        assert_eq!(groups, vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7], vec![8, 9]]);
        assert_eq!(s.output.width(), 10);
        assert_eq!(s.output.label_offset(3), 6);
    }

    #[test]
    fn whole_dataset_split_and_errors() {
        let s = split_dataset(digits(), 10, ClMode::Dil).unwrap();
        assert_eq!(s.tasks.len(), 1);
        assert_eq!(s.tasks[0].classes().len(), 10);
        assert_eq!(s.tasks[0].items().len(), 40);
        assert!(matches!(split_dataset(digits(), 3, ClMode::Dil), Err(Error::Config(_))));
    }
}
