//! The shipped configs under `configs/` must stay loadable.

use std::path::PathBuf;

use acl_core::config::{read_json, EvalConfig, SnapshotConfig, TrainConfig};

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn training_configs_validate() {
    for name in ["forgetting_acl_off.json", "forgetting_acl_on.json", "split_mnist_meta_train.json"] {
        TrainConfig::load(&config(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn forgetting_pair_differs_only_in_backward_terms() {
    let off = TrainConfig::load(&config("forgetting_acl_off.json")).unwrap();
    let mut on = TrainConfig::load(&config("forgetting_acl_on.json")).unwrap();
    assert!(!off.objective.backward_terms);
    assert!(on.objective.backward_terms);
    on.objective.backward_terms = false;
    assert_eq!(off, on);
}

#[test]
fn evaluation_and_snapshot_configs_parse() {
    for name in ["forgetting_meta_test.json", "split_mnist_meta_test.json"] {
        read_json::<EvalConfig>(&config(name), "meta-test").unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    read_json::<SnapshotConfig>(&config("snapshots.json"), "snapshots").unwrap();
}
