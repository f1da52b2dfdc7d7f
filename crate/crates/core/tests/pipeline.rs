use proptest::prelude::*;

use infofocus::eval::ApMode;
use infofocus::pipeline::model::CHECKPOINT_FILE;
use infofocus::pipeline::{
    evaluate_detections, infer_clouds, infer_dir, load_clouds, train_dir, AblationSwitches, InferMode, Model,
    PipelineConfig, RroiMode,
};
use infofocus::synth::{generate_dataset, Region, SceneSpec};

fn small_region() -> Region {
    Region {
        x_min: 0.0,
        x_max: 16.0,
        y_min: -8.0,
        y_max: 8.0,
    }
}

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.grid.x_max = 16.0;
    cfg.grid.y_min = -8.0;
    cfg.grid.y_max = 8.0;
    cfg.model.backbone_channels = vec![8, 8];
    cfg.model.pfn_channels = 8;
    cfg.model.fc_width = 16;
    cfg.proposals.pre_nms = 100;
    cfg.proposals.post_nms = 20;
    cfg.train.epochs = 2;
    cfg
}

#[test]
fn trained_checkpoint_reloads_and_scores_its_own_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SceneSpec {
        region: small_region(),
        num_objects_min: 1,
        num_objects_max: 3,
        ..SceneSpec::default()
    };
    let (train, val) = (dir.path().join("data/train"), dir.path().join("data/val"));
    std::fs::create_dir_all(&train).unwrap();
    std::fs::create_dir_all(&val).unwrap();
    generate_dataset(&spec, 5, 10, &train).unwrap();
    generate_dataset(&spec, 3, 90, &val).unwrap();

    let out = dir.path().join("run");
    let outcome = train_dir(&small_config(), &dir.path().join("data"), &out).unwrap();
    assert_eq!(outcome.epochs.len(), 2);
    assert!(outcome.epochs.iter().all(|e| e.val_map.is_some()));

    let reloaded = Model::load(&out.join(CHECKPOINT_FILE)).unwrap();
    let clouds = load_clouds(&val).unwrap();
    assert_eq!(clouds.len(), 3);
    for mode in [InferMode::Full, InferMode::Baseline] {
        let a = infer_clouds(&outcome.model, &clouds, mode).unwrap();
        let b = infer_dir(&out.join(CHECKPOINT_FILE), &val, mode).unwrap();
        assert_eq!(a, b);
        let report = evaluate_detections(&b, &val, ApMode::BothAxes).unwrap();
        assert!((0.0..=1.0).contains(&report.map));
    }
    assert_eq!(reloaded.cfg, outcome.model.cfg);
}

fn any_switches() -> impl Strategy<Value = AblationSwitches> {
    (any::<[bool; 4]>(), 0..3usize).prop_map(|(b, r)| AblationSwitches {
        poi_pool: b[0],
        visibility: b[1],
        adaptive: b[2],
        second_stage: b[3],
        rroi: [RroiMode::Off, RroiMode::R4x4, RroiMode::R8x4][r],
    })
}

proptest! {
    #[test]
    fn switch_validity_matches_invariants(sw in any_switches()) {
        let pooling = sw.poi_pool || sw.rroi != RroiMode::Off;
        let valid = (sw.poi_pool || !(sw.visibility || sw.adaptive))
            && !(sw.poi_pool && sw.rroi != RroiMode::Off)
            && sw.second_stage == pooling;
        prop_assert_eq!(sw.validate().is_ok(), valid);
    }

    #[test]
    fn valid_configs_survive_toml(
        sw in prop::sample::select(AblationSwitches::table_rows()),
        epochs in 0usize..30,
        n in 0usize..6,
    ) {
        let mut cfg = PipelineConfig {
            switches: sw,
            ..PipelineConfig::default()
        };
        cfg.train.epochs = epochs;
        cfg.model.n_keypoints = n;
        let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
