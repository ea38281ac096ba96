use onebit_lab::config::ScheduleConfig;
use onebit_lab::{OptimizerKind, RunConfig};
use proptest::prelude::*;

fn optimizer() -> impl Strategy<Value = OptimizerKind> {
    prop_oneof![
        Just(OptimizerKind::Adam),
        Just(OptimizerKind::OnebitAdam),
        Just(OptimizerKind::NaiveCompressedAdam),
        Just(OptimizerKind::MomentumSgd),
        Just(OptimizerKind::OnebitAdamIdentityCompressor),
    ]
}

prop_compose! {
    fn config()(
        optimizer in optimizer(),
        workers in 1usize..64,
        seed in any::<u64>(),
        steps in 1u64..1_000_000,
        warmup in proptest::option::of(0u64..1000),
        lr in 1e-6f64..1.0,
        beta1 in 0.0f64..1.0,
        sigma in 0.0f64..10.0,
        decay in proptest::option::of((1u64..100, 1u64..1000, 0.01f64..1.0)),
    ) -> RunConfig {
        let mut cfg = RunConfig { optimizer, workers, seed, steps, warmup_steps: warmup, ..RunConfig::default() };
        cfg.hyper.lr = lr;
        cfg.hyper.beta1 = beta1;
        cfg.problem.sigma = sigma;
        if let Some((ramp_steps, interval, factor)) = decay {
            cfg.hyper.schedule = ScheduleConfig::WarmupDecay { ramp_steps, interval, factor };
        }
        cfg
    }
}

proptest! {
    #[test]
    fn toml_and_json_echo_are_lossless(cfg in config()) {
        match cfg.to_toml() {
            Ok(text) => prop_assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg.clone()),
            Err(_) => prop_assert!(cfg.seed > i64::MAX as u64 && cfg.validate().is_err()),
        }
        let back: RunConfig = serde_json::from_value(cfg.to_json()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn valid_configs_survive_the_worker_handoff(cfg in config()) {
        // anything that validates can be handed to worker processes
        if cfg.validate().is_ok() {
            let text = cfg.to_toml().unwrap();
            prop_assert!(RunConfig::from_toml(&text).unwrap().validate().is_ok());
        }
    }
}
