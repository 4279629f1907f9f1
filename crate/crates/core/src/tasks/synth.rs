//! Synthetic task families: Gaussian class prototypes observed through a
//! domain-specific linear map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::episode::{Draw, TaskSource};
use crate::tensor::Real;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    #[default]
    Identity,
    /// Uniformly random orthogonal matrix.
    Rotation { seed: u64 },
    /// Diagonal scaling.
    Scaling { factors: Vec<Real> },
    /// Random orthogonal matrix times a diagonal of scales drawn uniformly
    /// from `[min_scale, max_scale]`.
    RotationScaling { seed: u64, min_scale: Real, max_scale: Real },
    /// Explicit row-major `dim × dim` matrix.
    Matrix { rows: Vec<Vec<Real>> },
}

/// JSON description of a synthetic family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub name: String,
    pub dim: usize,
    pub classes: usize,
    pub noise: Real,
    /// Standard deviation of the prototype draw.
    #[serde(default = "default_prototype_scale")]
    pub prototype_scale: Real,
    #[serde(default)]
    pub transform: TransformSpec,
    /// Added after the transform; empty means no shift.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offset: Vec<Real>,
    pub seed: u64,
}

fn default_prototype_scale() -> Real {
    1.0
}

#[derive(Clone, Debug)]
pub struct SynthFamily {
    spec: SynthSpec,
    classes: Vec<u32>,
    prototypes: Vec<Vec<Real>>,
    transform: Vec<Real>,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> Real {
    let z: f64 = StandardNormal.sample(rng);
    z as Real
}

fn random_orthogonal(dim: usize, seed: u64) -> Vec<Real> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<Real>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<Real> = (0..dim).map(|_| gaussian(&mut rng)).collect();
        for r in &rows {
            let p: Real = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<Real>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            rows.push(v);
        }
    }
    rows.concat()
}

fn build_transform(dim: usize, spec: &TransformSpec) -> Result<Vec<Real>> {
    let mut m = vec![0.0; dim * dim];
    match spec {
        TransformSpec::Identity => (0..dim).for_each(|i| m[i * dim + i] = 1.0),
        TransformSpec::Rotation { seed } => m = random_orthogonal(dim, *seed),
        TransformSpec::Scaling { factors } => {
            if factors.len() != dim {
                return Err(Error::config(format!("scaling has {} factors for dimension {dim}", factors.len())));
            }
            factors.iter().enumerate().for_each(|(i, &f)| m[i * dim + i] = f);
        }
        TransformSpec::RotationScaling { seed, min_scale, max_scale } => {
            if !(min_scale <= max_scale) {
                return Err(Error::config("rotation_scaling needs min_scale <= max_scale"));
            }
            let r = random_orthogonal(dim, *seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9));
            let scales: Vec<Real> = (0..dim).map(|_| rng.random_range(*min_scale..=*max_scale)).collect();
            for i in 0..dim {
                for j in 0..dim {
                    m[i * dim + j] = r[i * dim + j] * scales[j];
                }
            }
        }
        TransformSpec::Matrix { rows } => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::config(format!("transform matrix must be {dim}×{dim}")));
            }
            m = rows.concat();
        }
    }
    Ok(m)
}

/// Builds a family from its spec. Prototypes depend only on `seed`, so two
/// families that differ only in their transform share pre-transform samples.
pub fn synth_family(spec: SynthSpec) -> Result<SynthFamily> {
    if spec.dim < 2 {
        return Err(Error::config(format!("synthetic family {} needs dim >= 2", spec.name)));
    }
    if spec.classes == 0 {
        return Err(Error::config(format!("synthetic family {} has no classes", spec.name)));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::config("noise must be non-negative"));
    }
    if !spec.offset.is_empty() && spec.offset.len() != spec.dim {
        return Err(Error::config(format!("offset has {} entries for dimension {}", spec.offset.len(), spec.dim)));
    }
    let transform = build_transform(spec.dim, &spec.transform)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes = (0..spec.classes)
        .map(|_| (0..spec.dim).map(|_| gaussian(&mut rng) * spec.prototype_scale).collect())
        .collect();
    let classes = (0..spec.classes as u32).collect();
    Ok(SynthFamily { spec, classes, prototypes, transform })
}

impl SynthFamily {
    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    pub fn prototype(&self, class: u32) -> &[Real] {
        &self.prototypes[class as usize]
    }

    /// Transform followed by the offset.
    pub fn apply_transform(&self, z: &[Real]) -> Vec<Real> {
        let d = self.spec.dim;
        let mut x: Vec<Real> =
            self.transform.chunks_exact(d).map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum()).collect();
        x.iter_mut().zip(&self.spec.offset).for_each(|(a, o)| *a += o);
        x
    }

    /// Prototype plus isotropic noise, before the domain transform.
    pub fn sample_raw<R: Rng + ?Sized>(&self, class: u32, rng: &mut R) -> Vec<Real> {
        self.prototype(class).iter().map(|&p| p + self.spec.noise * gaussian(rng)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, class: u32, rng: &mut R) -> Vec<Real> {
        self.apply_transform(&self.sample_raw(class, rng))
    }
}

impl TaskSource for SynthFamily {
    fn name(&self) -> &str {
        &self.spec.name
    }

    fn classes(&self) -> &[u32] {
        &self.classes
    }

    fn input_dim(&self) -> usize {
        self.spec.dim
    }

    fn draw(&self, class: u32, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Draw>> {
        if class as usize >= self.spec.classes {
            return Err(Error::Sampling(format!("class {class} not in family {}", self.spec.name)));
        }
        Ok((0..count).map(|i| Draw { item: i as u64, x: self.sample(class, rng) }).collect())
    }
}
