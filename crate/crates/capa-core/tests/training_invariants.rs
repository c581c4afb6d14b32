//! Training-loop invariants that need full runs: the oracle-mode learning
//! curve (exact differentiable Gram algebra in place of the approximator
//! networks) and checkpoint bookkeeping.

use capa_core::physics::{Scenario, Vec3};
use capa_core::quadrature::gauss_legendre_grid;
use capa_core::training::{
    evaluate_policy, generate_scenarios, CheckpointRule, PreparedSet, RegionBounds, SplitTag,
    TrainConfig, TrainDriver,
};

/// With perfect oracles substituted for the approximator networks, policy
/// training strictly increases exact SE over the first 50 epochs on a
/// fixed 100-scene set.
#[test]
fn oracle_mode_policy_training_increases_exact_se() {
    let base = Scenario::with_users(vec![Vec3::new(0.0, 0.0, 30.0)]);
    let grid = gauss_legendre_grid(&base.aperture, 32, 32).unwrap();
    let scenes = PreparedSet::prepare(
        generate_scenarios(100, RegionBounds::default_region(), 4, &base, SplitTag::Train, 77)
            .unwrap(),
        &grid,
    )
    .unwrap();

    let mut cfg = TrainConfig::desk_default(78);
    cfg.oracle_mode = true;
    cfg.n_epochs = 50;
    cfg.batch_size = 100;
    cfg.val_every = 0; // measured manually below
    cfg.checkpoint_rule = CheckpointRule::TrainLoss;

    let mut driver = TrainDriver::new(cfg, &scenes, &scenes);
    let mut se_curve = Vec::new();
    let se_of = |driver: &TrainDriver| {
        evaluate_policy(&driver.trainer.policy, &driver.trainer.proj, &scenes)
            .unwrap()
            .mean_se_exact
    };
    se_curve.push(se_of(&driver));
    for _ in 0..5 {
        driver.run_policy_only(10).unwrap();
        se_curve.push(se_of(&driver));
    }
    println!("oracle-mode SE curve (every 10 epochs): {se_curve:?}");
    for w in se_curve.windows(2) {
        assert!(
            w[1] > w[0],
            "exact SE did not strictly increase: {se_curve:?}"
        );
    }
}

/// The best-checkpoint score is nondecreasing in the number of recorded
/// checkpoints within one run (running maximum of validation SE).
#[test]
fn best_checkpoint_se_is_nondecreasing() {
    let base = Scenario::with_users(vec![Vec3::new(0.0, 0.0, 30.0)]);
    let grid = gauss_legendre_grid(&base.aperture, 16, 16).unwrap();
    let train = PreparedSet::prepare(
        generate_scenarios(60, RegionBounds::default_region(), 3, &base, SplitTag::Train, 79)
            .unwrap(),
        &grid,
    )
    .unwrap();
    let val = PreparedSet::prepare(
        generate_scenarios(20, RegionBounds::default_region(), 3, &base, SplitTag::Val, 80)
            .unwrap(),
        &grid,
    )
    .unwrap();
    let mut cfg = TrainConfig::desk_default(81);
    cfg.n_epochs = 10;
    cfg.pretrain_epochs = 5;
    cfg.pretrain_epochs_proj = 10;
    cfg.pretrain_samples = 60;
    cfg.batch_size = 30;
    cfg.val_every = 2;
    let trained = capa_core::training::train_phased_plus_alternative(cfg, &train, &val).unwrap();
    let vals: Vec<f64> = trained.metrics.iter().filter_map(|m| m.val_se).collect();
    assert!(!vals.is_empty());
    let mut best = f64::NEG_INFINITY;
    let mut bests = Vec::new();
    for v in vals {
        best = best.max(v);
        bests.push(best);
    }
    for w in bests.windows(2) {
        assert!(w[1] >= w[0]);
    }
}
