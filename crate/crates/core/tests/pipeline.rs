use fsosr_core::checkpoint::Checkpoint;
use fsosr_core::classifier::EncoderSpec;
use fsosr_core::detector::DetectorKind;
use fsosr_core::episodes::{
    generate_synthetic_dataset, load_feature_file, write_feature_file, EpisodeShape, FeatureSource, SyntheticSpec,
};
use fsosr_core::evaluation::{evaluate, EvalConfig, EvalSources};
use fsosr_core::numerics::RngState;
use fsosr_core::training::{train, TrainConfig, ValidationConfig};
use fsosr_core::transforms::{HeadKind, TransformHead};

fn spec(classes: usize, dim: usize) -> SyntheticSpec {
    SyntheticSpec {
        classes,
        dim,
        scale: 2.0,
        sigma: 1.0,
        per_class: 25,
    }
}

#[test]
fn train_save_load_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic_dataset(&mut RngState::new(1), &spec(24, 12)).unwrap();
    let path = dir.path().join("features.txt");
    write_feature_file(&path, &data).unwrap();
    let reloaded = load_feature_file(&path).unwrap();
    assert_eq!(reloaded, data);

    let (train_set, eval_set) = reloaded.split_classes(12).unwrap();
    let train_src = FeatureSource::in_memory(train_set);
    let val_src = FeatureSource::in_memory(eval_set.clone());
    let mut rng = RngState::new(2);
    let head = TransformHead::init(HeadKind::Ltn, 12, &mut rng).unwrap();
    let cfg = TrainConfig {
        episodes: 40,
        seed: 3,
        validation: ValidationConfig {
            every: 20,
            episodes: 10,
            shape: EpisodeShape::default(),
        },
        ..TrainConfig::default()
    };
    let out = train(&train_src, Some(&val_src), head, EncoderSpec::Identity, &cfg).unwrap();
    assert_eq!(out.trace.len(), 40);
    assert_eq!(out.validation.iter().map(|v| v.step).collect::<Vec<_>>(), vec![20, 40]);

    let ck = Checkpoint {
        head: out.head.clone(),
        encoder: out.encoder.clone(),
        step: out.selected_step as u64,
        seed: 3,
    };
    let ck_path = dir.path().join("ltn.ckpt");
    ck.save(&ck_path).unwrap();
    let loaded = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(loaded, ck);
    loaded.ensure_input_dim(12).unwrap();

    let eval_cfg = EvalConfig {
        episodes: 30,
        seed: 4,
        ..EvalConfig::default()
    };
    let a = evaluate(EvalSources::Single(&val_src), &out.encoder, &out.head, &eval_cfg).unwrap();
    let b = evaluate(EvalSources::Single(&val_src), &loaded.encoder, &loaded.head, &eval_cfg).unwrap();
    assert_eq!(a.per_episode, b.per_episode);
    let snatcher = a.auroc(DetectorKind::Snatcher).unwrap();
    assert!(snatcher.mean > 0.5, "auroc {}", snatcher.mean);
}

#[test]
fn cross_domain_evaluation_draws_unknowns_from_second_source() {
    let known = FeatureSource::synthetic(&mut RngState::new(5), spec(10, 8)).unwrap();
    let unknown = FeatureSource::synthetic(&mut RngState::new(6), spec(10, 8)).unwrap();
    let head = TransformHead::init(HeadKind::LayerNorm, 8, &mut RngState::new(0)).unwrap();
    let cfg = EvalConfig {
        episodes: 12,
        seed: 7,
        keep_scores: true,
        ..EvalConfig::default()
    };
    let sources = EvalSources::CrossDomain {
        known: &known,
        unknown: &unknown,
    };
    let s = evaluate(sources, &EncoderSpec::Identity, &head, &cfg).unwrap();
    assert_eq!(s.episodes, 12);
    // 75 known + 75 unknown queries per episode for each of three detectors.
    assert_eq!(s.scores.len(), 12 * 150 * 3);

    let narrow = FeatureSource::synthetic(&mut RngState::new(8), spec(10, 6)).unwrap();
    let bad = EvalSources::CrossDomain {
        known: &known,
        unknown: &narrow,
    };
    assert!(evaluate(bad, &EncoderSpec::Identity, &head, &cfg).is_err());
}

#[test]
fn checkpoint_for_wrong_width_is_rejected() {
    let mut rng = RngState::new(9);
    let ck = Checkpoint {
        head: TransformHead::init(HeadKind::Attention, 8, &mut rng).unwrap(),
        encoder: EncoderSpec::mlp(&[16, 8], &mut rng).unwrap(),
        step: 0,
        seed: 9,
    };
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    assert!(back.ensure_input_dim(16).is_ok());
    assert!(back.ensure_input_dim(8).is_err());
}
