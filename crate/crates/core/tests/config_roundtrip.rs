use std::path::PathBuf;

use guided_rl::env::Dynamics;
use guided_rl::guidance::{GuideRelabel, Variant};
use guided_rl::harness::ExperimentConfig;
use proptest::prelude::*;

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        (0..Dynamics::ALL.len(), 0..Variant::ALL.len(), 1u64..1_000_000, 1u64..50_000, 1u64..5_000),
        (1usize..512, prop::collection::vec(1usize..256, 1..4), 0.5f64..0.999, 1e-5f64..1e-2),
        (0.0f64..1.0, 0.0f64..0.5, any::<bool>(), 0usize..8, 0.0f64..5.0, any::<bool>()),
        (prop::collection::btree_set(0..=i64::MAX as u64, 1..6), 1usize..300, 0..=i64::MAX as u64),
    )
        .prop_map(|(run, nets, noise, seeds)| {
            let (env, variant, total, eval, train) = run;
            let mut cfg = ExperimentConfig::new(Dynamics::ALL[env], Variant::ALL[variant]);
            cfg.total_steps = total;
            cfg.eval_every = eval;
            cfg.train_every = train;
            (cfg.batch_size, cfg.hidden, cfg.gamma, cfg.actor_lr) = nets;
            let (sigma, target_noise, smoothing, her_k, bc_weight, reuse) = noise;
            cfg.exploration_sigma = sigma;
            cfg.target_noise = target_noise;
            cfg.target_smoothing = smoothing;
            cfg.her_k = her_k;
            cfg.bc_weight = bc_weight;
            if reuse {
                cfg.guide_relabel = GuideRelabel::Reuse;
            }
            (cfg.seeds, cfg.test_set_size, cfg.test_set_seed) = (seeds.0.into_iter().collect(), seeds.1, seeds.2);
            if cfg.needs_guide_q() {
                cfg.guide_q_path = Some(PathBuf::from("guide/q.grl"));
            }
            cfg.out_dir = PathBuf::from("out/runs");
            cfg
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn config_survives_text_round_trip(cfg in arb_config()) {
        prop_assert!(cfg.validate().is_ok());
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn file_round_trip_matches(cfg in arb_config()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        cfg.save(&path).unwrap();
        prop_assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    }
}

#[test]
fn minimal_file_takes_env_defaults() {
    let cfg = ExperimentConfig::from_toml_str("env = \"planar_slide\"\nvariant = \"linear\"\n").unwrap();
    assert_eq!(cfg, ExperimentConfig::new(Dynamics::PlanarSlide, Variant::Linear));
}

#[test]
fn seed_beyond_toml_integer_range_is_rejected() {
    let mut cfg = ExperimentConfig::new(Dynamics::PointReach, Variant::None);
    cfg.seeds = vec![u64::MAX];
    assert!(cfg.validate().is_err());
    assert!(cfg.to_toml_string().is_err());
}

#[test]
fn typo_in_key_is_rejected() {
    let text = "env = \"point_reach\"\nvariant = \"none\"\nbatchsize = 10\n";
    let err = ExperimentConfig::from_toml_str(text).unwrap_err();
    assert!(err.to_string().contains("batchsize"), "{err}");
}
