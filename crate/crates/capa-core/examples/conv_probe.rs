use capa_core::baselines::*;
use capa_core::beamfield::boundary_se;
use capa_core::physics::{Scenario, Vec3};
use capa_core::quadrature::gauss_legendre_grid;
use capa_core::training::*;
fn main() {
    let base = Scenario::with_users(vec![Vec3::new(0.0, 0.0, 30.0)]);
    let grid = gauss_legendre_grid(&base.aperture, 32, 32).unwrap();
    let (ts, vs, xs) = split_seeds(11);
    let train_set = PreparedSet::prepare(generate_scenarios(5000, RegionBounds::default_region(), 4, &base, SplitTag::Train, ts).unwrap(), &grid).unwrap();
    let val = PreparedSet::prepare(generate_scenarios(200, RegionBounds::default_region(), 4, &base, SplitTag::Val, vs).unwrap(), &grid).unwrap();
    let test = PreparedSet::prepare(generate_scenarios(200, RegionBounds::default_region(), 4, &base, SplitTag::Test, xs).unwrap(), &grid).unwrap();
    let mut se_mf = 0.0; let mut se_mf_eq = 0.0; let mut se_spd36 = 0.0; let mut se_gram = 0.0;
    for i in 0..test.len() {
        let q = &test.grams[i];
        let scene = test.data.scene(i);
        let p = wmmse_power_allocation(q, scene.zeta, scene.p_max, 100).unwrap();
        se_mf += boundary_se(q, &mf_coefficients(q, &p).unwrap(), scene.zeta, scene.p_max).unwrap();
        let eqp = vec![scene.p_max / 4.0; 4];
        se_mf_eq += boundary_se(q, &mf_coefficients(q, &eqp).unwrap(), scene.zeta, scene.p_max).unwrap();
        let (b36, _) = spd_wmmse(&scene, 6, scene.zeta, scene.p_max, 1e-6, 300).unwrap();
        se_spd36 += boundary_se(q, &b36, scene.zeta, scene.p_max).unwrap();
        let (bg, _) = gram_wmmse(q, scene.zeta, scene.p_max, 1e-6, 500).unwrap();
        se_gram += boundary_se(q, &bg, scene.zeta, scene.p_max).unwrap();
    }
    let n = test.len() as f64;
    println!("baselines(200): mf+wmmse={:.4} mf_eq={:.4} spd36={:.4} gram={:.4}", se_mf/n, se_mf_eq/n, se_spd36/n, se_gram/n);

    let mut cfg = TrainConfig::desk_default(11);
    cfg.pretrain_samples = 5000;
    cfg.pretrain_epochs = 150;
    cfg.pretrain_epochs_proj = 300;
    cfg.n_epochs = 100;
    cfg.batch_size = 128;
    cfg.val_every = 5;
    let t0 = std::time::Instant::now();
    let trained = train_phased_plus_alternative(cfg, &train_set, &val).unwrap();
    println!("training took {:.1}s, best epoch {}", t0.elapsed().as_secs_f64(), trained.best_epoch);
    for m in &trained.metrics {
        if let Some(se) = m.val_se { println!("ep {:>3}: loss={:.4} value={:.3e} val_se={:.4}", m.epoch, m.policy_loss, m.value_mse, se); }
    }
    let summary = evaluate_policy(&trained.policy, &trained.proj, &test).unwrap();
    println!("GNN test SE: exact={:.4} deployed={:.4}", summary.mean_se_exact, summary.mean_se_deployed);
}
