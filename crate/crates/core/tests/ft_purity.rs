//! Deterministic-mode purity: a baseline training run must never construct
//! per-token Gaussian statistics. Lives in its own test binary so the
//! process-wide instrumentation counter cannot race with other tests.

use adavib_core::data_io::{build_world, generate, SynthConfig};
use adavib_core::projector::gaussian_stats_construction_count;
use adavib_core::trainer::{train, TrainConfig, TrainMode};

#[test]
fn deterministic_mode_never_builds_gaussian_stats() {
    let cfg = SynthConfig {
        train_size: 64,
        eval_size: 8,
        seed: 17,
        ..SynthConfig::default()
    };
    let world = build_world(&cfg).unwrap();
    let ds = generate(&cfg).unwrap();
    let train_cfg = TrainConfig {
        micro_batch: 2,
        grad_accum: 2,
        ..TrainConfig::toy_experiment(TrainMode::Ft, 17)
    };
    let before = gaussian_stats_construction_count();
    let outcome = train(&train_cfg, &ds.train, &world.decoder, None).unwrap();
    let after = gaussian_stats_construction_count();
    assert_eq!(
        after - before,
        0,
        "deterministic training touched the stochastic machinery"
    );
    assert!(!outcome.log.records.is_empty());

    // The stochastic path does construct them, so the counter is live.
    let vib_cfg = TrainConfig {
        micro_batch: 2,
        grad_accum: 2,
        ..TrainConfig::toy_experiment(TrainMode::AdaVib, 17)
    };
    let _ = train(&vib_cfg, &ds.train, &world.decoder, None).unwrap();
    assert!(gaussian_stats_construction_count() > after);
}
