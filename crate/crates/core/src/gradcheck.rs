//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Bound, Label, Model, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Perturbation used by the central differences.
pub const FD_EPS: Real = 1e-5;

/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding are compared absolutely.
pub const REL_FLOOR: Real = 1e-5;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: Real,
    pub max_abs_grad: Real,
    /// Flat index, analytic and numeric value of the worst element.
    pub worst: (usize, Real, Real),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> Real {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, Real::max)
    }

    pub fn passes(&self, tol: Real) -> bool {
        self.tensors.iter().all(|t| t.max_rel_err < tol)
    }
}

pub fn rel_err(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of `f` against central differences for every
/// element of every tensor in `params`.
///
/// `f` records a scalar loss on the tape given the bound parameter vars.
pub fn check<F>(names: &[String], params: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect::<Result<_, _>>()?;

    let eval = |ps: &[Tensor]| -> Result<Real> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.scalar(l))
    };

    let mut work = params.to_vec();
    let mut tensors = Vec::with_capacity(params.len());
    for (pi, g) in analytic.iter().enumerate() {
        let mut max_rel_err: Real = 0.0;
        let mut worst = (0, 0.0, 0.0);
        for e in 0..g.len() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + FD_EPS;
            let plus = eval(&work)?;
            work[pi].data_mut()[e] = orig - FD_EPS;
            let minus = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            let err = rel_err(g.data()[e], numeric);
            if err > max_rel_err {
                max_rel_err = err;
                worst = (e, g.data()[e], numeric);
            }
        }
        tensors.push(TensorCheck {
            name: names.get(pi).cloned().unwrap_or_else(|| format!("param{pi}")),
            max_rel_err,
            worst,
            max_abs_grad: g.data().iter().fold(0.0, |a: Real, b| a.max(b.abs())),
        });
    }
    Ok(GradCheckReport { tensors })
}

/// Scale of the whole-model check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCheckConfig {
    #[serde(default = "ModelCheckConfig::model")]
    pub model: ModelConfig,
    #[serde(default = "ModelCheckConfig::seq_len")]
    pub seq_len: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "ModelCheckConfig::tolerance")]
    pub tolerance: Real,
}

impl ModelCheckConfig {
    /// 16-wide, 2 layers, 2 heads.
    pub fn model() -> ModelConfig {
        let mut m = ModelConfig::new(4, 3);
        m.d_model = 16;
        m.n_heads = 2;
        m.n_layers = 2;
        m.init_seed = 1;
        m
    }
    fn seq_len() -> usize {
        10
    }
    fn tolerance() -> Real {
        1e-4
    }
}

impl Default for ModelCheckConfig {
    fn default() -> Self {
        Self { model: Self::model(), seq_len: Self::seq_len(), seed: 0, tolerance: Self::tolerance() }
    }
}

/// Checks every trainable tensor of a model on a random sequence whose last
/// two inputs are unlabelled queries. The loss sums the cross-entropy of
/// every step against random targets.
pub fn check_model(cfg: &ModelCheckConfig) -> Result<GradCheckReport> {
    if cfg.seq_len == 0 {
        return Err(crate::error::Error::config("gradcheck seq_len must be positive"));
    }
    let model = Model::new(cfg.model.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_out = cfg.model.n_outputs;
    let steps: Vec<(Vec<Real>, Label, usize)> = (0..cfg.seq_len)
        .map(|t| {
            let x = Tensor::randn(&[cfg.model.input_dim], 1.0, &mut rng).into_data();
            let y = if t + 2 < cfg.seq_len { Label::Known(rng.random_range(0..n_out)) } else { Label::Unknown };
            (x, y, rng.random_range(0..n_out))
        })
        .collect();
    check(model.params().names(), model.params().tensors(), |tape, vars| {
        let bound = Bound { vars: vars.to_vec() };
        let mut state = model.initial_state(&bound);
        let mut losses = Vec::with_capacity(steps.len());
        for (x, y, target) in &steps {
            let (logits, next) = model.step(tape, &bound, &state, x, *y)?;
            losses.push((tape.cross_entropy(logits, *target)?, 1.0));
            state = next;
        }
        Ok(tape.weighted_sum(&losses)?)
    })
}
