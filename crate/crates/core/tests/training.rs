use std::sync::Arc;

use acl_core::checkpoint::Checkpoint;
use acl_core::config::TrainConfig;
use acl_core::eval::{meta_test, EvalTask, NearestNeighbour, Protocol};
use acl_core::exec::Executor;
use acl_core::tasks::{synth_family, ClMode, SynthSpec, TaskSource, TransformSpec};
use acl_core::trainer::{meta_train, Sources, StepLog};
use acl_core::{Error, Real};

fn config(extra: &str) -> TrainConfig {
    let text = format!(
        r#"{{
            "model": {{ "input_dim": 6, "n_outputs": 3, "d_model": 32, "n_heads": 4, "n_layers": 2, "init_seed": 3 }},
            "domains": [
                {{ "train": {{ "kind": "synthetic", "name": "a", "dim": 6, "classes": 6, "noise": 0.2, "seed": 1,
                              "transform": {{ "kind": "rotation", "seed": 1 }} }} }}
            ],
            "episodes": {{ "n_way": 3, "k_shot": 3, "n_tasks": 1 }},
            "objective": {{ "queries_per_task": 1 }},
            "optimizer": {{ "warmup_steps": 100, "lr_scale": 0.2 }},
            "batch_size": 8,
            "seed": 11
            {extra}
        }}"#
    );
    TrainConfig::from_json(&text).unwrap()
}

fn train(cfg: &TrainConfig) -> (Vec<StepLog>, Vec<u8>) {
    let sources = Sources::open(cfg, None).unwrap();
    let out = meta_train(cfg, &sources, None, &mut |_| {}).unwrap();
    assert!(out.diverged.is_none(), "{:?}", out.diverged);
    (out.log, out.last.to_bytes().unwrap())
}

fn window_mean(log: &[StepLog]) -> Real {
    log.iter().map(|l| l.loss).sum::<Real>() / log.len() as Real
}

#[test]
fn single_task_loss_falls_below_a_third() {
    let cfg = config(r#", "steps": 500"#);
    let (log, _) = train(&cfg);
    let first = window_mean(&log[..20]);
    let last = window_mean(&log[log.len() - 20..]);
    assert!(last < 0.3 * first, "loss {first:.4} -> {last:.4}");
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let one = config(r#", "steps": 4, "threads": 1"#);
    let three = config(r#", "steps": 4, "threads": 3"#);
    let (log_a, bytes_a) = train(&one);
    let (log_b, bytes_b) = train(&one);
    let (log_c, bytes_c) = train(&three);
    assert_eq!(log_a, log_b);
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(log_a, log_c);
    assert_eq!(bytes_a, bytes_c);
}

#[test]
fn resuming_continues_the_same_trajectory() {
    let full = config(r#", "steps": 6"#);
    let half = config(r#", "steps": 3"#);
    let (log_full, bytes_full) = train(&full);

    let sources = Sources::open(&half, None).unwrap();
    let first = meta_train(&half, &sources, None, &mut |_| {}).unwrap();
    let resumed = meta_train(&full, &sources, Some(first.last), &mut |_| {}).unwrap();
    assert_eq!(resumed.log, log_full[3..]);
    assert_eq!(resumed.last.to_bytes().unwrap(), bytes_full);
}

#[test]
fn checkpoint_for_another_architecture_is_rejected() {
    let cfg = config(r#", "steps": 1"#);
    let sources = Sources::open(&cfg, None).unwrap();
    let out = meta_train(&cfg, &sources, None, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.last.save(&path).unwrap();

    let mut same = cfg.model.clone();
    same.init_seed = 99;
    assert!(Checkpoint::load_for(&path, &same).is_ok());
    let mut wider = cfg.model.clone();
    wider.d_model = 64;
    assert!(matches!(Checkpoint::load_for(&path, &wider), Err(Error::Config(_))));
}

fn clean(name: &str, seed: u64) -> Arc<dyn TaskSource> {
    Arc::new(
        synth_family(SynthSpec {
            name: name.into(),
            dim: 8,
            classes: 6,
            noise: 0.05,
            prototype_scale: 1.0,
            transform: TransformSpec::Rotation { seed },
            offset: vec![],
            seed,
        })
        .unwrap(),
    )
}

#[test]
fn nearest_neighbour_never_forgets_class_incremental_tasks() {
    let tasks: Vec<EvalTask> =
        [clean("a", 1), clean("b", 2)].into_iter().map(|demos| EvalTask { demos, pool: None }).collect();
    let mut protocol = Protocol::new(3, 2);
    protocol.mode = ClMode::Cil;
    protocol.runs = 3;
    protocol.episodes_per_run = 50;
    let report = meta_test(&NearestNeighbour { n_outputs: 6 }, &tasks, &protocol, &Executor::sequential()).unwrap();

    assert_eq!(report.runs.len(), 3);
    for run in &report.runs {
        assert_eq!(run.acc.len(), 2);
        assert!(run.acc.iter().flatten().all(|&a| a > 0.98), "{:?}", run.acc);
        assert!(run.backward_transfer.unwrap().abs() < 0.02);
    }
    let mean = report.runs.iter().map(|r| r.avg_acc).sum::<Real>() / 3.0;
    assert!((report.avg_acc.mean - mean).abs() < 1e-12);
}
