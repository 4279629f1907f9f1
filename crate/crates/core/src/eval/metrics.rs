use serde::{Deserialize, Serialize};

use crate::tensor::Real;

/// Mean and sample standard deviation across runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Real,
    pub std: Real,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[Real]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: 0.0, n };
        }
        let mean = values.iter().sum::<Real>() / n as Real;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / (n - 1) as Real).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

/// Mean change in accuracy on earlier tasks between when they were learned
/// and the end of the sequence. `None` with fewer than two tasks.
pub fn backward_transfer(acc: &[Vec<Real>]) -> Option<Real> {
    let m = acc.len();
    if m < 2 {
        return None;
    }
    let last = &acc[m - 1];
    Some((0..m - 1).map(|j| last[j] - acc[j][j]).sum::<Real>() / (m - 1) as Real)
}

/// Mean gain on each new task (from the second on) over learning it from a
/// fresh state. `None` with fewer than two tasks or missing baselines.
pub fn forward_transfer(acc: &[Vec<Real>], baseline: &[Real]) -> Option<Real> {
    let m = acc.len();
    if m < 2 || baseline.len() < m {
        return None;
    }
    Some((1..m).map(|i| acc[i][i] - baseline[i]).sum::<Real>() / (m - 1) as Real)
}
