use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Real;

/// How loaders standardise features with the dataset's own statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// One mean/std over every value of every item (the usual MNIST-style
    /// normalisation).
    #[default]
    Global,
    /// Separate mean/std per feature dimension.
    PerDimension,
}

/// Per-dimension statistics used to standardise a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
}

const STD_FLOOR: Real = 1e-6;

impl FeatureStats {
    pub fn compute(items: &[Vec<Real>], mode: Normalization) -> Option<Self> {
        let dim = items.first()?.len();
        let n = items.len() as Real;
        match mode {
            Normalization::None => None,
            Normalization::Global => {
                let total = n * dim as Real;
                let mean = items.iter().flatten().sum::<Real>() / total;
                let var = items.iter().flatten().map(|&x| (x - mean) * (x - mean)).sum::<Real>() / total;
                let std = var.sqrt().max(STD_FLOOR);
                Some(Self { mean: vec![mean; dim], std: vec![std; dim] })
            }
            Normalization::PerDimension => {
                let mut mean = vec![0.0; dim];
                for x in items {
                    mean.iter_mut().zip(x).for_each(|(m, &v)| *m += v / n);
                }
                let mut var = vec![0.0; dim];
                for x in items {
                    var.iter_mut().zip(x).zip(&mean).for_each(|((s, &v), &m)| *s += (v - m) * (v - m) / n);
                }
                let std = var.into_iter().map(|v| v.sqrt().max(STD_FLOOR)).collect();
                Some(Self { mean, std })
            }
        }
    }

    pub fn apply(&self, x: &mut [Real]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }
}

/// Labelled feature vectors grouped by original class id.
#[derive(Clone, Debug)]
pub struct Dataset {
    name: String,
    items: Vec<Vec<Real>>,
    labels: Vec<u32>,
    class_index: BTreeMap<u32, Vec<usize>>,
    stats: Option<FeatureStats>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, items: Vec<Vec<Real>>, labels: Vec<u32>) -> Result<Self> {
        let name = name.into();
        if items.len() != labels.len() {
            return Err(Error::config(format!(
                "dataset {name}: {} items but {} labels",
                items.len(),
                labels.len()
            )));
        }
        if items.is_empty() {
            return Err(Error::config(format!("dataset {name} is empty")));
        }
        let dim = items[0].len();
        if dim == 0 || items.iter().any(|x| x.len() != dim) {
            return Err(Error::config(format!("dataset {name}: items have inconsistent or zero dimension")));
        }
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &c) in labels.iter().enumerate() {
            class_index.entry(c).or_default().push(i);
        }
        Ok(Self { name, items, labels, class_index, stats: None })
    }

    /// Standardises every item with statistics of this dataset.
    pub fn normalized(self, mode: Normalization) -> Self {
        match FeatureStats::compute(&self.items, mode) {
            Some(stats) => self.normalized_with(stats),
            None => self,
        }
    }

    /// Standardises every item with externally supplied statistics, e.g. those
    /// of the matching training split.
    pub fn normalized_with(mut self, stats: FeatureStats) -> Self {
        for x in &mut self.items {
            stats.apply(x);
        }
        self.stats = Some(stats);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.items[0].len()
    }

    pub fn item(&self, i: usize) -> &[Real] {
        &self.items[i]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn classes(&self) -> Vec<u32> {
        self.class_index.keys().copied().collect()
    }

    pub fn class_items(&self, class: u32) -> &[usize] {
        self.class_index.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn stats(&self) -> Option<&FeatureStats> {
        self.stats.as_ref()
    }

    /// Class id → item count.
    pub fn histogram(&self) -> BTreeMap<u32, usize> {
        self.class_index.iter().map(|(&c, v)| (c, v.len())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_index_and_histogram() {
        let d = Dataset::new("t", vec![vec![1.0], vec![2.0], vec![3.0]], vec![4, 1, 4]).unwrap();
        assert_eq!(d.classes(), vec![1, 4]);
        assert_eq!(d.class_items(4), &[0, 2]);
        assert_eq!(d.histogram()[&4], 2);
        assert!(Dataset::new("t", vec![vec![1.0]], vec![]).is_err());
        assert!(Dataset::new("t", vec![vec![1.0], vec![1.0, 2.0]], vec![0, 0]).is_err());
    }

    #[test]
    fn normalisation_standardises() {
        let items = vec![vec![0.0, 10.0], vec![2.0, 30.0], vec![4.0, 50.0]];
        let d = Dataset::new("t", items.clone(), vec![0, 0, 1]).unwrap().normalized(Normalization::PerDimension);
        for j in 0..2 {
            let col: Vec<Real> = (0..3).map(|i| d.item(i)[j]).collect();
            let m = col.iter().sum::<Real>() / 3.0;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<Real>() / 3.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-9);
        }
        let g = Dataset::new("t", items, vec![0, 0, 1]).unwrap().normalized(Normalization::Global);
        let all: Vec<Real> = (0..3).flat_map(|i| g.item(i).to_vec()).collect();
        assert!((all.iter().sum::<Real>() / 6.0).abs() < 1e-12);
    }
}
