use acl_core::exec::{stream_rng, Executor};
use acl_core::gradcheck::check;
use acl_core::model::{LabeledInput, Model, ModelConfig, Session};
use acl_core::objective::{loss_and_grads, ObjectiveConfig};
use acl_core::srwm::{srwm_step, SrwmDims};
use acl_core::tape::softmax_values;
use acl_core::tasks::{sample_cl_sequence, synth_family, ClMode, SynthSpec, TaskSource, TransformSpec};
use acl_core::{Real, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut stream_rng(seed, 0))
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("p{i}")).collect()
}

/// `Σ c_i · y_i` with fixed random weights so every output element matters.
fn weighted(tape: &mut Tape, y: Var, seed: u64) -> acl_core::Result<Var> {
    let c = randn(tape.shape(y), seed ^ 0xabc);
    let cv = tape.constant(c);
    let p = tape.mul(y, cv)?;
    Ok(tape.sum(p)?)
}

fn assert_fd(params: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> acl_core::Result<Var>) {
    let r = check(&names(params.len()), params, f).unwrap();
    assert!(r.passes(1e-5), "finite differences disagree: {:?}", r.tensors);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_ops_match_finite_differences(n in 1usize..7, seed in any::<u64>()) {
        let x = randn(&[n], seed);
        assert_fd(&[x.clone()], |t, v| { let y = t.softmax(v[0])?; weighted(t, y, seed) });
        assert_fd(&[x.clone()], |t, v| { let y = t.sigmoid(v[0])?; weighted(t, y, seed) });
        assert_fd(&[x.clone()], |t, v| { let y = t.gelu(v[0])?; weighted(t, y, seed) });
        if n > 1 {
            assert_fd(&[x.clone()], |t, v| { let y = t.standardize(v[0], 1e-5)?; weighted(t, y, seed) });
            assert_fd(&[x.clone()], |t, v| Ok(t.variance(v[0])?));
        }
        assert_fd(&[x], |t, v| Ok(t.cross_entropy(v[0], n - 1)?));
    }

    #[test]
    fn matrix_ops_match_finite_differences(r in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let w = randn(&[r, c], seed);
        let x = randn(&[c], seed + 1);
        let u = randn(&[r], seed + 2);
        let m = randn(&[c, 3], seed + 3);
        assert_fd(&[w.clone(), x.clone()], |t, v| { let y = t.matvec(v[0], v[1])?; weighted(t, y, seed) });
        assert_fd(&[w.clone(), m], |t, v| { let y = t.matmul(v[0], v[1])?; weighted(t, y, seed) });
        assert_fd(&[u.clone(), x.clone()], |t, v| { let y = t.outer(v[0], v[1])?; weighted(t, y, seed) });
        assert_fd(&[w, u, x], |t, v| { let y = t.add_outer(v[0], v[1], v[2])?; weighted(t, y, seed) });
    }

    #[test]
    fn softmax_ignores_constant_shift(v in prop::collection::vec(-20.0..20.0f64, 1..12), c in -50.0..50.0f64) {
        let v: Vec<Real> = v.into_iter().map(|x| x as Real).collect();
        let shifted: Vec<Real> = v.iter().map(|x| x + c as Real).collect();
        let (a, b) = (softmax_values(&v), softmax_values(&shifted));
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-12);
        }
        prop_assert!((a.iter().sum::<Real>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_is_linear_in_the_loss(n in 1usize..6, a in -3.0..3.0f64, b in -3.0..3.0f64, seed in any::<u64>()) {
        let x = randn(&[n], seed);
        let grad_of = |wa: Real, wb: Real| {
            let mut t = Tape::new();
            let v = t.param(&x);
            let s = t.softmax(v).unwrap();
            let l1 = weighted(&mut t, s, seed).unwrap();
            let g = t.gelu(v).unwrap();
            let l2 = t.sum(g).unwrap();
            let l = t.weighted_sum(&[(l1, wa), (l2, wb)]).unwrap();
            t.backward(l).unwrap().get(v).unwrap()
        };
        let (g1, g2, g) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(a as Real, b as Real));
        for i in 0..n {
            let want = a as Real * g1.data()[i] + b as Real * g2.data()[i];
            prop_assert!((g.data()[i] - want).abs() < 1e-12);
        }
    }
}

/// Reference SRWM update written out elementwise.
fn srwm_by_hand(dims: SrwmDims, w: &Tensor, u: &Tensor) -> (Vec<Real>, Tensor) {
    let rows = dims.rows();
    let d = dims.d_in;
    let y: Vec<Real> = (0..rows).map(|r| (0..d).map(|c| w.at(r, c) * u.data()[c]).sum()).collect();
    let k = &y[dims.d_out..dims.d_out + d];
    let q = &y[dims.d_out + d..dims.d_out + 2 * d];
    let beta = &y[dims.d_out + 2 * d..];
    let (pk, pq) = (softmax_values(k), softmax_values(q));
    let rate_of_row = |r: usize| {
        let s = if r < dims.d_out {
            0
        } else if r < dims.d_out + d {
            1
        } else if r < dims.d_out + 2 * d {
            2
        } else {
            3
        };
        1.0 / (1.0 + (-beta[s]).exp())
    };
    let mut next = w.clone();
    for r in 0..rows {
        let v: Real = (0..d).map(|c| w.at(r, c) * pq[c]).sum();
        let vbar: Real = (0..d).map(|c| w.at(r, c) * pk[c]).sum();
        for c in 0..d {
            next.data_mut()[r * d + c] += rate_of_row(r) * (v - vbar) * pk[c];
        }
    }
    (y[..dims.d_out].to_vec(), next)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn srwm_update_matches_elementwise_reference(d_in in 1usize..6, d_out in 1usize..6, seed in any::<u64>()) {
        let dims = SrwmDims::new(d_in, d_out).unwrap();
        let w = randn(&[dims.rows(), d_in], seed);
        let u = randn(&[d_in], seed.wrapping_add(7));
        let out = srwm_step(dims, &w, &u).unwrap();
        let (o, next) = srwm_by_hand(dims, &w, &u);
        for (a, b) in out.o.data().iter().zip(&o) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(out.w_next.max_abs_diff(&next) < 1e-12);
    }
}

fn small_model(seed: u64) -> Model {
    let mut cfg = ModelConfig::new(3, 4);
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.init_seed = seed;
    Model::new(cfg).unwrap()
}

fn random_stream(len: usize, seed: u64) -> Vec<LabeledInput> {
    let mut rng = stream_rng(seed, 1);
    (0..len)
        .map(|_| {
            let x: Vec<Real> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            if rng.random_bool(0.3) {
                LabeledInput::query(x)
            } else {
                LabeledInput::demo(x, rng.random_range(0..4))
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn resuming_from_a_prefix_state_replays_the_suffix(len in 2usize..12, cut in 1usize..11, seed in any::<u64>()) {
        let cut = cut.min(len - 1);
        let model = small_model(seed % 1000);
        let seq = random_stream(len, seed);
        let (full, _) = model.forward(&seq).unwrap();
        let (_, prefix_state) = model.forward(&seq[..cut]).unwrap();
        let mut s = Session::from_state(&model, &prefix_state);
        for (t, item) in seq.iter().enumerate().skip(cut) {
            let logits = s.observe_logits(&item.x, item.y).unwrap();
            prop_assert_eq!(&logits[..], &full.data()[t * 4..(t + 1) * 4]);
        }
    }
}

fn family(name: &str, seed: u64) -> SynthSpec {
    SynthSpec {
        name: name.into(),
        dim: 3,
        classes: 4,
        noise: 0.3,
        prototype_scale: 1.0,
        transform: TransformSpec::Rotation { seed },
        offset: vec![],
        seed,
    }
}

#[test]
fn parallel_batch_gradients_equal_sequential() {
    let model = small_model(5);
    let a = synth_family(family("a", 1)).unwrap();
    let b = synth_family(family("b", 2)).unwrap();
    let sources: Vec<&dyn TaskSource> = vec![&a, &b];
    let cfg = ObjectiveConfig::default();
    let job = |i: usize| {
        let seq = sample_cl_sequence(&sources, 2, 2, 1, ClMode::Dil, &mut stream_rng(9, i as u64)).unwrap();
        loss_and_grads(&model, &seq, &cfg).unwrap()
    };
    let seq_out = Executor::sequential().map_range(6, job);
    let par_out = Executor::new(3).unwrap().map_range(6, job);
    for ((b1, g1), (b2, g2)) in seq_out.iter().zip(&par_out) {
        assert_eq!(b1.total.to_bits(), b2.total.to_bits());
        for (x, y) in g1.iter().zip(g2) {
            assert_eq!(x.data(), y.data());
        }
    }
}
