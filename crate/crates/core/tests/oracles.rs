//! Hand-computed values and statistical sanity checks.

use std::collections::BTreeMap;
use std::sync::Arc;

use acl_core::eval::{meta_test, EvalTask, NearestNeighbour, Protocol};
use acl_core::exec::{stream_rng, Executor};
use acl_core::model::{EncoderConfig, Label, Model, ModelConfig};
use acl_core::objective::{loss_and_grads, LossBreakdown, ObjectiveConfig};
use acl_core::optim::{lr_schedule, Adam, OptimizerConfig};
use acl_core::srwm::{multi_head_step, srwm_step, SrwmDims};
use acl_core::tasks::idx::write_idx_pair;
use acl_core::tasks::{
    load_mnist_idx, sample_cl_sequence, sample_episode, synth_family, ClMode, SynthSpec, TaskSource, TransformSpec,
};
use acl_core::{Real, Tape, Tensor};
use rand::Rng;

#[test]
fn srwm_step_by_hand() {
    // d_in 2, d_out 1: rows are [o | k k | q q | β β β β].
    let ln3 = (3.0 as Real).ln();
    let col0 = [1.0, 0.0, 0.0, ln3, 0.0, 0.0, 0.0, 0.0, 0.0];
    let col1 = [2.0, 1.0, -1.0, 0.0, 3.0, 0.5, -0.5, 1.0, 2.0];
    let w = Tensor::matrix(9, 2, col0.iter().zip(&col1).flat_map(|(&a, &b)| [a, b]).collect()).unwrap();
    let u = Tensor::vector(vec![1.0, 0.0]);
    let out = srwm_step(SrwmDims::new(2, 1).unwrap(), &w, &u).unwrap();

    // k = 0 gives softmax(k) = (½, ½); q = (ln 3, 0) gives (¾, ¼); β = 0
    // gives every rate ½. Each row moves by ½ · ¼(w₀ − w₁) · ½ = (w₀ − w₁)/16.
    assert_eq!(out.o.data(), &[1.0]);
    for r in 0..9 {
        let shift = (col0[r] - col1[r]) / 16.0;
        assert!((out.w_next.at(r, 0) - (col0[r] + shift)).abs() < 1e-15);
        assert!((out.w_next.at(r, 1) - (col1[r] + shift)).abs() < 1e-15);
    }
}

#[test]
fn heads_see_disjoint_input_slices() {
    let dims = SrwmDims::new(3, 3).unwrap();
    let mut rng = stream_rng(4, 0);
    let heads: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[dims.rows(), 3], 0.5, &mut rng)).collect();
    let u = Tensor::randn(&[6], 1.0, &mut rng);

    let mut tape = Tape::new();
    let ws: Vec<_> = heads.iter().map(|w| tape.constant(w.clone())).collect();
    let uv = tape.constant(u.clone());
    let (out, next) = multi_head_step(&mut tape, dims, &ws, uv).unwrap();
    let out = tape.tensor(out);

    for h in 0..2 {
        let slice = Tensor::vector(u.data()[h * 3..(h + 1) * 3].to_vec());
        let single = srwm_step(dims, &heads[h], &slice).unwrap();
        assert_eq!(&out.data()[h * 3..(h + 1) * 3], single.o.data());
        assert_eq!(tape.tensor(next[h]).data(), single.w_next.data());
    }
}

fn gelu(x: Real) -> Real {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI as Real).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

fn standardize(v: &[Real]) -> Vec<Real> {
    let n = v.len() as Real;
    let mean = v.iter().sum::<Real>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<Real>() / n;
    v.iter().map(|x| (x - mean) / (var + 1e-5).sqrt()).collect()
}

fn affine(w: &Tensor, b: &Tensor, x: &[Real]) -> Vec<Real> {
    (0..w.rows()).map(|r| b.data()[r] + (0..w.cols()).map(|c| w.at(r, c) * x[c]).sum::<Real>()).collect()
}

#[test]
fn mlp_encoder_by_hand() {
    let mut cfg = ModelConfig::new(4, 3);
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.encoder = EncoderConfig::Mlp { hidden: 5, features: 3 };
    cfg.init_seed = 2;
    let mut model = Model::new(cfg).unwrap();
    // Non-zero biases so they are exercised too.
    let mut rng = stream_rng(8, 0);
    for t in model.params_mut().tensors_mut() {
        if t.shape().len() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let p: BTreeMap<&str, &Tensor> = model.params().iter().collect();
    let x = [0.3, -1.2, 0.8, 2.0];

    let h: Vec<Real> = affine(p["encoder.fc1.weight"], p["encoder.fc1.bias"], &x).into_iter().map(gelu).collect();
    let f = standardize(&affine(p["encoder.fc2.weight"], p["encoder.fc2.bias"], &h));
    let mut joined = f.clone();
    joined.extend([0.0, 1.0, 0.0, 0.0]);
    let want = affine(p["input_proj.weight"], p["input_proj.bias"], &joined);

    let got = model.encode_input(&x, Label::Known(1)).unwrap();
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn synth(name: &str, classes: usize, noise: Real, seed: u64) -> SynthSpec {
    SynthSpec {
        name: name.into(),
        dim: 8,
        classes,
        noise,
        prototype_scale: 1.0,
        transform: TransformSpec::Rotation { seed },
        offset: vec![],
        seed,
    }
}

#[test]
fn nearest_neighbour_separates_well_spread_prototypes() {
    let fam: Arc<dyn TaskSource> = Arc::new(synth_family(synth("clean", 10, 0.05, 3)).unwrap());
    let tasks = vec![EvalTask { demos: fam, pool: None }];
    let mut protocol = Protocol::new(5, 1);
    protocol.runs = 2;
    protocol.episodes_per_run = 200;
    let report = meta_test(&NearestNeighbour { n_outputs: 5 }, &tasks, &protocol, &Executor::sequential()).unwrap();
    assert!(report.avg_acc.mean > 0.99, "{}", report.avg_acc.mean);
}

#[test]
fn episode_labels_are_uniform_over_classes() {
    let fam = synth_family(synth("f", 5, 0.3, 1)).unwrap();
    let episodes = 5000;
    let mut counts = [[0usize; 5]; 5];
    let mut rng = stream_rng(12, 0);
    for _ in 0..episodes {
        let ep = sample_episode(&fam, 5, 1, 0, &mut rng).unwrap();
        for (&class, &label) in &ep.label_map {
            counts[class as usize][label] += 1;
        }
    }
    // Each cell is Binomial(5000, 1/5): mean 1000, sd ≈ 28.
    for row in counts {
        for c in row {
            assert!((850..=1150).contains(&c), "{counts:?}");
        }
    }
}

#[test]
fn idx_round_trip_keeps_class_histogram() {
    let hist = [980usize, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009];
    let mut rng = stream_rng(1, 0);
    let mut labels = Vec::new();
    for (c, &n) in hist.iter().enumerate() {
        labels.extend(std::iter::repeat_n(c as u8, n));
    }
    let pixels: Vec<Vec<u8>> = labels.iter().map(|_| (0..16).map(|_| rng.random()).collect()).collect();
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("t10k-images-idx3-ubyte"), dir.path().join("t10k-labels-idx1-ubyte"));
    write_idx_pair(&img, &lab, 4, 4, &pixels, &labels).unwrap();

    let ds = load_mnist_idx(&img, &lab).unwrap();
    assert_eq!(ds.len(), 10_000);
    assert_eq!(ds.dim(), 16);
    let got: Vec<usize> = ds.histogram().values().copied().collect();
    assert_eq!(got, hist);
}

#[test]
fn warmup_peak_and_inverse_sqrt_decay() {
    for w in [1u64, 10, 400, 4000] {
        let peak = lr_schedule(w, 64, w, 1.0).unwrap();
        let later = lr_schedule(4 * w, 64, w, 1.0).unwrap();
        assert!((later - peak / 2.0).abs() < 1e-15);
        assert!(lr_schedule(w.div_ceil(2), 64, w, 1.0).unwrap() <= peak);
    }
}

#[test]
fn three_adam_steps_by_hand() {
    let cfg = OptimizerConfig::default();
    let mut p = vec![Tensor::vector(vec![1.0])];
    let mut adam = Adam::new(&p);
    let want = [0.99000000002, 0.9865318604098756, 0.9827085191907268];
    for (g, w) in [0.5, -0.2, 0.1].into_iter().zip(want) {
        adam.update(&mut p, &[Tensor::vector(vec![g])], 0.01, &cfg).unwrap();
        assert!((p[0].data()[0] - w).abs() < 1e-12, "{} vs {w}", p[0].data()[0]);
    }
    assert_eq!(adam.step, 3);
}

fn untrained(n_out: usize, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(8, n_out);
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.init_seed = seed;
    Model::new(cfg).unwrap()
}

#[test]
fn untrained_loss_sits_at_chance() {
    let model = untrained(5, 7);
    let fam = synth_family(synth("f", 10, 0.3, 4)).unwrap();
    let sources: Vec<&dyn TaskSource> = vec![&fam];
    let cfg = ObjectiveConfig { queries_per_task: 5, ..ObjectiveConfig::default() };
    let bds: Vec<LossBreakdown> = (0..40)
        .map(|i| {
            let seq = sample_cl_sequence(&sources, 5, 1, 1, ClMode::Dil, &mut stream_rng(3, i)).unwrap();
            loss_and_grads(&model, &seq, &cfg).unwrap().0
        })
        .collect();
    let mean = LossBreakdown::mean(&bds).unwrap().total;
    let chance = (5.0 as Real).ln();
    assert!((mean - chance).abs() < 0.3, "mean loss {mean}, chance {chance}");
}
