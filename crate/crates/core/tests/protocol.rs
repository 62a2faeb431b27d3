use fsdet::protocol::{
    detections_identical, empty_checkpoint, finetune_new, merge_checkpoints, pretrain_base, run_variant, seed_trunk,
    sweep, Checkpoint, ClassKind, ExperimentConfig, MergedModel, SeedWorld, Variant,
};
use fsdet::world::{generate_shots, generate_split, Split};
use fsdet::Error;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.world.base_scenes = 40;
    cfg.world.test_scenes = 20;
    cfg.eval.base_only_scenes = 6;
    cfg.train.pretrain_iters = 150;
    cfg.train.box_iters = 60;
    cfg.train.finetune_iters = Some(60);
    cfg.train.max_mask_examples = 200;
    cfg
}

#[test]
fn merged_sigmoid_family_keeps_base_detections() {
    let cfg = tiny();
    let metrics = sweep(&cfg, &Variant::ALL, &[2], &[3]).unwrap();
    assert_eq!(metrics.len(), 8);
    for m in &metrics {
        assert_eq!((m.k, m.seed), (2, 3));
        assert!(m.box_ap.new.is_some() && m.mask_ap.base.is_some());
        if m.variant != Variant::MaskRcnnSoftmax {
            assert!(m.non_forgetting, "{}", m.variant);
        }
    }
    let order: Vec<Variant> = metrics.iter().map(|m| m.variant).collect();
    let mut sorted = order.clone();
    sorted.sort();
    assert_eq!(order, sorted);
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let cfg = tiny();
    let world = SeedWorld::new(&cfg, 1).unwrap();
    let base = world.pretrain(&cfg, Variant::MaskSigUncert.pretrain_family()).unwrap();
    assert!(base.registry.iter().all(|e| e.kind == ClassKind::Base));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    base.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, base);
    assert_eq!(back.block_hashes(), base.block_hashes());

    let bytes = base.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut tampered = bytes.clone();
    tampered[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&tampered), Err(Error::Checkpoint(_))));
    assert!(matches!(Checkpoint::load(&dir.path().join("none")), Err(Error::MissingArtifact(_))));
}

#[test]
fn finetune_contract() {
    let cfg = tiny();
    let seed = 2;
    let trunk = seed_trunk(&cfg.world, seed);
    let base_set = generate_split(Split::Base, cfg.world.base_scenes, seed, &cfg.world).unwrap();
    let (base, log) = pretrain_base(&base_set, &trunk, &cfg, Variant::MaskProbit, seed).unwrap();
    assert_eq!(log.joint.len(), cfg.train.pretrain_iters);
    assert!(log.joint.iter().all(|l| l.is_finite()));

    let shots = generate_shots(1, seed, &cfg.world).unwrap();
    let (new, _) = finetune_new(&base, &shots, &cfg, Variant::MaskProbit, seed).unwrap();
    assert_eq!(new.class_ids(), cfg.world.new_classes().collect::<Vec<_>>());
    assert!(new.registry.iter().all(|e| e.kind == ClassKind::New));
    let again = finetune_new(&base, &shots, &cfg, Variant::MaskProbit, seed).unwrap().0;
    assert_eq!(again, new);

    assert!(finetune_new(&base, &base_set, &cfg, Variant::MaskProbit, seed).is_err());
    assert!(finetune_new(&base, &shots, &cfg, Variant::MaskRcnnSoftmax, seed).is_err());
    let mut empty = shots.clone();
    empty.scenes.clear();
    assert!(finetune_new(&base, &empty, &cfg, Variant::MaskProbit, seed).is_err());

    assert!(matches!(merge_checkpoints(&base, &base, 1), Err(Error::Merge(_))));
    let merged = merge_checkpoints(&base, &new, cfg.model.mc_samples).unwrap();
    assert_eq!(merged.classes(), cfg.world.n_classes());

    let world = SeedWorld::new(&cfg, seed).unwrap();
    let alone = world.detect_base_only(&MergedModel::from_base(&base).unwrap(), &cfg).unwrap();
    let identity = merge_checkpoints(&base, &empty_checkpoint(&base, Variant::MaskSigmoid), 1).unwrap();
    assert!(detections_identical(&alone, &world.detect_base_only(&identity, &cfg).unwrap()));
}

#[test]
fn runs_are_deterministic_and_names_are_checked() {
    let mut cfg = tiny();
    cfg.world.shots = 1;
    let a = run_variant("mask_sig_uncert", &cfg, 4).unwrap();
    let b = run_variant("mask_sig_uncert", &cfg, 4).unwrap();
    assert_eq!(a, b);
    assert!(matches!(run_variant("mask_yolo", &cfg, 4), Err(Error::UnknownVariant(_))));
    assert!(sweep(&cfg, &[], &[1], &[0]).is_err());
    assert!(sweep(&cfg, &[Variant::MaskSigmoid], &[0], &[0]).is_err());
}
