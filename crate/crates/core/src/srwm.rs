//! Self-referential weight matrix layer.
//!
//! Each head owns a matrix `W` with rows split into four blocks `[o | k | q | β]`
//! of heights `d_out, d_in, d_in, 4`. For an input `u`:
//!
//! ```text
//! [o, k, q, β] = W u
//! Δ            = W (softmax(q) − softmax(k))          (= v − v̄)
//! W'           = W + (r ⊙ Δ) ⊗ softmax(k)
//! ```
//!
//! where `r` repeats `sigmoid(β_s)` over the rows of block `s`, giving each
//! block its own self-generated learning rate. The output `o` is read from
//! the pre-update matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Number of self-generated learning rates (one per row block).
pub const N_RATES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    O,
    K,
    Q,
    Beta,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::O, Block::K, Block::Q, Block::Beta];

    pub fn name(self) -> &'static str {
        match self {
            Block::O => "o",
            Block::K => "k",
            Block::Q => "q",
            Block::Beta => "beta",
        }
    }
}

/// Per-head dimensions of an SRWM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SrwmDims {
    pub d_in: usize,
    pub d_out: usize,
}

impl SrwmDims {
    pub fn new(d_in: usize, d_out: usize) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::config(format!("SRWM dimensions must be positive (d_in={d_in}, d_out={d_out})")));
        }
        Ok(Self { d_in, d_out })
    }

    pub fn rows(&self) -> usize {
        self.d_out + 2 * self.d_in + N_RATES
    }

    pub fn block_range(&self, block: Block) -> std::ops::Range<usize> {
        let (o, k) = (self.d_out, self.d_in);
        match block {
            Block::O => 0..o,
            Block::K => o..o + k,
            Block::Q => o + k..o + 2 * k,
            Block::Beta => o + 2 * k..self.rows(),
        }
    }

    fn block_heights(&self) -> [usize; 4] {
        [self.d_out, self.d_in, self.d_in, N_RATES]
    }
}

/// Trainable initial matrices `W0`, one per head.
#[derive(Clone, Debug, PartialEq)]
pub struct SrwmSeed {
    pub dims: SrwmDims,
    pub heads: Vec<Tensor>,
}

impl SrwmSeed {
    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Gaussian initialisation: the query block uses std `0.01/√d_in`, all
    /// other blocks `1/√d_in`.
    pub fn init_with_rng<R: rand::Rng + ?Sized>(dims: SrwmDims, n_heads: usize, rng: &mut R) -> Result<Self> {
        if n_heads == 0 {
            return Err(Error::config("SRWM needs at least one head"));
        }
        let base = 1.0 / (dims.d_in as Real).sqrt();
        let heads = (0..n_heads)
            .map(|_| {
                let mut w = Tensor::randn(&[dims.rows(), dims.d_in], base, rng);
                let q = dims.block_range(Block::Q);
                let cols = dims.d_in;
                for x in &mut w.data_mut()[q.start * cols..q.end * cols] {
                    *x *= 0.01;
                }
                w
            })
            .collect();
        Ok(Self { dims, heads })
    }
}

pub fn srwm_init(d_in: usize, d_out: usize, n_heads: usize, seed: u64) -> Result<SrwmSeed> {
    let dims = SrwmDims::new(d_in, d_out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SrwmSeed::init_with_rng(dims, n_heads, &mut rng)
}

/// Fast-weight state of one sequence: the current matrix of every head.
#[derive(Clone, Debug, PartialEq)]
pub struct SrwmState {
    pub w: Vec<Tensor>,
    pub step: usize,
}

impl SrwmState {
    pub fn fresh(seed: &SrwmSeed) -> Self {
        Self { w: seed.heads.clone(), step: 0 }
    }
}

/// Intermediate quantities of one head step, as tape vars.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub o: Var,
    pub k: Var,
    pub q: Var,
    pub beta: Var,
    pub rates: Var,
    pub phi_k: Var,
    pub phi_q: Var,
    pub w_next: Var,
}

/// One head step recorded on `tape`.
pub fn head_step(tape: &mut Tape, dims: SrwmDims, w: Var, u: Var) -> Result<StepVars, TensorError> {
    if tape.shape(w) != [dims.rows(), dims.d_in] {
        return Err(TensorError::dimension(
            "srwm_step",
            format!("W has shape {:?}, expected [{}, {}]", tape.shape(w), dims.rows(), dims.d_in),
        ));
    }
    if tape.shape(u) != [dims.d_in] {
        return Err(TensorError::dimension(
            "srwm_step",
            format!("input has shape {:?}, expected [{}]", tape.shape(u), dims.d_in),
        ));
    }
    let y = tape.matvec(w, u)?;
    let r = |b| dims.block_range(b);
    let o = tape.slice(y, r(Block::O).start, dims.d_out)?;
    let k = tape.slice(y, r(Block::K).start, dims.d_in)?;
    let q = tape.slice(y, r(Block::Q).start, dims.d_in)?;
    let beta = tape.slice(y, r(Block::Beta).start, N_RATES)?;
    let phi_k = tape.softmax(k)?;
    let phi_q = tape.softmax(q)?;
    let key_diff = tape.sub(phi_q, phi_k)?;
    let delta = tape.matvec(w, key_diff)?;
    let rates = tape.sigmoid(beta)?;
    let row_rates = tape.repeat(rates, &dims.block_heights())?;
    let scaled = tape.mul(row_rates, delta)?;
    let w_next = tape.add_outer(w, scaled, phi_k)?;
    Ok(StepVars { o, k, q, beta, rates, phi_k, phi_q, w_next })
}

/// All heads of one layer for one timestep. `u` has `n_heads · d_in` entries;
/// head `h` reads slice `h` and the outputs are concatenated.
pub fn multi_head_step(tape: &mut Tape, dims: SrwmDims, ws: &[Var], u: Var) -> Result<(Var, Vec<Var>), TensorError> {
    let n_heads = ws.len();
    if tape.shape(u) != [n_heads * dims.d_in] {
        return Err(TensorError::dimension(
            "srwm_forward",
            format!("input has shape {:?}, expected [{}]", tape.shape(u), n_heads * dims.d_in),
        ));
    }
    let mut outs = Vec::with_capacity(n_heads);
    let mut next = Vec::with_capacity(n_heads);
    for (h, &w) in ws.iter().enumerate() {
        let uh = if n_heads == 1 { u } else { tape.slice(u, h * dims.d_in, dims.d_in)? };
        let s = head_step(tape, dims, w, uh)?;
        outs.push(s.o);
        next.push(s.w_next);
    }
    let out = if n_heads == 1 { outs[0] } else { tape.concat(&outs)? };
    Ok((out, next))
}

/// Values produced by [`srwm_step`].
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub o: Tensor,
    pub k: Tensor,
    pub q: Tensor,
    pub beta: Tensor,
    pub w_next: Tensor,
}

/// Single-head step on plain tensors.
pub fn srwm_step(dims: SrwmDims, w: &Tensor, u: &Tensor) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let wv = tape.constant(w.clone());
    let uv = tape.constant(u.clone());
    let s = head_step(&mut tape, dims, wv, uv)?;
    Ok(StepOutput {
        o: tape.tensor(s.o),
        k: tape.tensor(s.k),
        q: tape.tensor(s.q),
        beta: tape.tensor(s.beta),
        w_next: tape.tensor(s.w_next),
    })
}

/// Runs a whole input sequence through a multi-head SRWM from a fresh state.
pub fn srwm_forward(seed: &SrwmSeed, inputs: &[Tensor]) -> Result<(Vec<Tensor>, SrwmState)> {
    let d_model = seed.n_heads() * seed.dims.d_in;
    let mut tape = Tape::new();
    let mut ws: Vec<Var> = seed.heads.iter().map(|w| tape.constant(w.clone())).collect();
    let mut outs = Vec::with_capacity(inputs.len());
    for x in inputs {
        if x.shape() != [d_model] {
            return Err(Error::config(format!(
                "input of shape {:?} does not split into {} heads of width {}",
                x.shape(),
                seed.n_heads(),
                seed.dims.d_in
            )));
        }
        let u = tape.constant(x.clone());
        let (o, next) = multi_head_step(&mut tape, seed.dims, &ws, u)?;
        outs.push(tape.tensor(o));
        ws = next;
    }
    let state = SrwmState { w: ws.iter().map(|&w| tape.tensor(w)).collect(), step: inputs.len() };
    Ok((outs, state))
}
