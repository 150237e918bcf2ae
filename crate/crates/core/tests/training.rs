//! End-to-end training runs on a tiny advection environment.

use dynamo_core::env::EnvConfig;
use dynamo_core::mesh::RefinementMode;
use dynamo_core::policies::read_checkpoint;
use dynamo_core::problems::Family;
use dynamo_core::trainer::{train, TrainConfig};

fn tiny_env() -> EnvConfig {
    let mut env = EnvConfig::for_family(Family::AdvRing, RefinementMode::P);
    env.agents = [6, 6];
    env.window = [1, 1];
    env.rl_steps = 2;
    env.remesh_time = 0.1;
    env
}

fn tiny_train(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        fragment_length: 4,
        train_batch_size: 100,
        minibatch_size: 25,
        hidden: vec![16, 16],
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn zero_iterations_writes_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let s = train(&tiny_env(), &tiny_train(0), dir.path(), false).unwrap();
    assert!(s.history.is_empty());
    assert!(s.latest.exists());
    assert!(!s.best.exists());
    let (w, extra) = read_checkpoint(&s.latest).unwrap();
    assert!(w.is_finite());
    assert_eq!(extra["iteration"], 0);
    let rows = std::fs::read_to_string(&s.metrics).unwrap().lines().count();
    assert!(rows <= 1);
}

#[test]
fn fixed_seed_reproduces_metrics() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train(&tiny_env(), &tiny_train(3), a.path(), false).unwrap();
    train(&tiny_env(), &tiny_train(3), b.path(), false).unwrap();
    let ma = std::fs::read(a.path().join("metrics.csv")).unwrap();
    let mb = std::fs::read(b.path().join("metrics.csv")).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(std::fs::read(a.path().join("latest.ckpt")).unwrap(), std::fs::read(b.path().join("latest.ckpt")).unwrap());
}

#[test]
fn resume_continues_iteration_count() {
    let dir = tempfile::tempdir().unwrap();
    train(&tiny_env(), &tiny_train(2), dir.path(), false).unwrap();
    let s = train(&tiny_env(), &tiny_train(2), dir.path(), true).unwrap();
    assert_eq!(s.history.first().unwrap().iteration, 3);
    let text = std::fs::read_to_string(&s.metrics).unwrap();
    assert_eq!(text.lines().count(), 5);
    let (_, extra) = read_checkpoint(&s.latest).unwrap();
    assert_eq!(extra["iteration"], 4);
}
