use fuseformer::image::{split_dataset, synth_pairs, ImagePair};
use fuseformer::model::{encode_weights, load_weights, ModelConfig, ModelWeights, Stage};
use fuseformer::train::{
    ae_loss, bias_experiment, fusion_loss, stage1_images, sweep, train_stage1, train_stage2, train_stage2_with,
    FusionObjective, LrSchedule, SweepAxis, TrainConfig, TrainError, TrainStage, LOG_HEADER, SWEEP_HEADER,
};

fn tiny() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 3,
        learning_rate: 3e-3,
        lr_schedule: LrSchedule::StepDecay { factor: 0.5, every: 2 },
        checkpoint_every: 2,
        model: ModelConfig {
            num_scales: 2,
            channels: vec![2, 4],
            heads: 2,
            layers: 1,
            height: 16,
            width: 16,
        },
        loss: fuseformer::losses::LossWeights {
            omega_m: vec![1.0, 1.0],
            ..Default::default()
        },
        ..TrainConfig::default()
    }
}

fn fusion_cfg() -> TrainConfig {
    TrainConfig {
        stage: TrainStage::Fusion,
        ..tiny()
    }
}

fn data(n: usize) -> Vec<ImagePair> {
    synth_pairs(n, 16, 5).unwrap()
}

fn stage1(pairs: &[ImagePair]) -> ModelWeights {
    train_stage1(&tiny(), &stage1_images(pairs), None).unwrap().weights
}

#[test]
fn stage1_is_deterministic() {
    let imgs = stage1_images(&data(4));
    let a = train_stage1(&tiny(), &imgs, None).unwrap();
    let b = train_stage1(&tiny(), &imgs, None).unwrap();
    assert_eq!(encode_weights(&a.weights).unwrap(), encode_weights(&b.weights).unwrap());
    assert_eq!(a.log.to_csv(), b.log.to_csv());

    let c = train_stage1(&TrainConfig { seed: 1, ..tiny() }, &imgs, None).unwrap();
    assert_ne!(a.log.to_csv(), c.log.to_csv());
}

#[test]
fn log_has_one_row_per_epoch() {
    let out = train_stage1(&tiny(), &stage1_images(&data(3)), None).unwrap();
    let csv = out.log.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], LOG_HEADER);
    assert_eq!(lines.len(), 1 + 4);
    assert_eq!(out.log.wall_seconds.len(), 4);
    let lrs: Vec<f64> = out.log.epochs.iter().map(|e| e.lr).collect();
    assert_eq!(lrs, vec![3e-3, 3e-3, 1.5e-3, 1.5e-3]);
    let checkpoints: Vec<bool> = out.log.epochs.iter().map(|e| e.checkpoint_loss.is_some()).collect();
    assert_eq!(checkpoints, vec![false, true, false, true]);
    assert!(out.log.epochs.iter().all(|e| e.mean.loss.is_finite()));
}

#[test]
fn final_epoch_is_always_checkpointed() {
    let cfg = TrainConfig {
        epochs: 3,
        checkpoint_every: 25,
        ..tiny()
    };
    let out = train_stage1(&cfg, &stage1_images(&data(2)), None).unwrap();
    assert!(out.log.epochs[..2].iter().all(|e| e.checkpoint_loss.is_none()));
    assert!(out.log.epochs[2].checkpoint_loss.is_some());
}

#[test]
fn checkpoint_loss_recomputes_from_saved_weights() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = data(4);
    let imgs = stage1_images(&pairs);
    let path = dir.path().join("ae.fw");
    let out = train_stage1(&tiny(), &imgs, Some(&path)).unwrap();
    let saved = load_weights(&path).unwrap();
    assert_eq!(encode_weights(&saved).unwrap(), encode_weights(&out.weights).unwrap());
    let recomputed = ae_loss(&tiny(), &saved, &imgs).unwrap().loss;
    let logged = out.log.final_loss().unwrap();
    assert!((recomputed - logged).abs() <= 1e-10, "{recomputed} vs {logged}");

    let path2 = dir.path().join("fuse.fw");
    let out2 = train_stage2(&fusion_cfg(), &pairs, &out.weights, Some(&path2)).unwrap();
    let saved2 = load_weights(&path2).unwrap();
    let recomputed = fusion_loss(&fusion_cfg(), &saved2, &pairs, FusionObjective::Fuse).unwrap().loss;
    let logged = out2.log.final_loss().unwrap();
    assert!((recomputed - logged).abs() <= 1e-10, "{recomputed} vs {logged}");
}

#[test]
fn stage2_freezes_encoder_and_decoder() {
    let pairs = data(4);
    let s1 = stage1(&pairs);
    let out = train_stage2(&fusion_cfg(), &pairs, &s1, None).unwrap();
    let mut fusion_changed = false;
    for (name, p) in &out.weights.params {
        let before = &s1.params[name];
        assert_eq!(p.stage, before.stage);
        match p.stage {
            Stage::Fusion => {
                let fresh = s1.with_fresh_fusion(&fusion_cfg().model, fusion_cfg().seed).unwrap();
                fusion_changed |= fresh.params[name].value != p.value;
            }
            _ => {
                let a: Vec<u64> = before.value.data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(a, b, "{name} moved");
            }
        }
    }
    assert!(fusion_changed);
}

#[test]
fn stage2_is_deterministic_and_reduces_loss() {
    let pairs = data(4);
    let s1 = stage1(&pairs);
    let a = train_stage2(&fusion_cfg(), &pairs, &s1, None).unwrap();
    let b = train_stage2(&fusion_cfg(), &pairs, &s1, None).unwrap();
    assert_eq!(encode_weights(&a.weights).unwrap(), encode_weights(&b.weights).unwrap());
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert!(a.log.to_csv().lines().nth(1).unwrap().starts_with("initial,"));
    assert!(a.log.final_loss().unwrap() < a.log.initial.unwrap().loss);
}

#[test]
fn vanishing_alpha_leaves_only_the_feature_loss() {
    let pairs = data(3);
    let s1 = stage1(&pairs);
    let mut cfg = fusion_cfg();
    // alpha must stay positive; at 1e-300 the structural term underflows
    cfg.loss.alpha = 1e-300;
    let out = train_stage2(&cfg, &pairs, &s1, None).unwrap();
    let init = out.log.initial.unwrap();
    assert_eq!(init.loss, init.primary);
    assert!(init.structural > 0.0);
    for e in &out.log.epochs {
        assert_eq!(e.mean.loss, e.mean.primary);
    }
}

#[test]
fn non_finite_update_aborts_with_last_good_weights() {
    let imgs = stage1_images(&data(2));
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..tiny()
    };
    match train_stage1(&cfg, &imgs, None) {
        Err(TrainError::NonFinite {
            epoch,
            last_good_epoch,
            last_good,
            ..
        }) => {
            assert_eq!(epoch, 1);
            assert_eq!(last_good_epoch, 0);
            let init = ModelWeights::init(&cfg.model, cfg.seed).unwrap();
            assert_eq!(encode_weights(&last_good).unwrap(), encode_weights(&init).unwrap());
        }
        other => panic!("expected non-finite abort, got {other:?}"),
    }
}

#[test]
fn input_errors() {
    let pairs = data(2);
    assert!(matches!(train_stage1(&tiny(), &[], None), Err(TrainError::EmptyDataset)));
    let s1 = ModelWeights::init(&tiny().model, 0).unwrap();
    assert!(matches!(train_stage2(&fusion_cfg(), &[], &s1, None), Err(TrainError::EmptyDataset)));

    let big = synth_pairs(1, 32, 0).unwrap();
    assert!(matches!(
        train_stage1(&tiny(), &stage1_images(&big), None),
        Err(TrainError::Config(_))
    ));

    let other = ModelWeights::init(
        &ModelConfig {
            channels: vec![4, 8],
            ..tiny().model
        },
        0,
    )
    .unwrap();
    assert!(train_stage2(&fusion_cfg(), &pairs, &other, None).is_err());

    assert!(matches!(
        train_stage1(&fusion_cfg(), &stage1_images(&pairs), None),
        Err(TrainError::Config(_))
    ));
    assert!(matches!(
        train_stage2(&tiny(), &pairs, &s1, None),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn bias_arms_share_initialization() {
    let pairs = data(10);
    let s1 = stage1(&pairs);
    let cfg = TrainConfig {
        epochs: 1,
        ..fusion_cfg()
    };
    let report = bias_experiment(&cfg, &pairs, &s1, &[3]).unwrap();
    let row = &report.rows[0];

    let ids: Vec<String> = pairs.iter().map(|p| p.id.clone()).collect();
    let split = split_dataset(&ids, 3).unwrap();
    let train: Vec<ImagePair> = split
        .train
        .iter()
        .map(|id| pairs.iter().find(|p| &p.id == id).unwrap().clone())
        .collect();
    let init = s1.with_fresh_fusion(&cfg.model, 3).unwrap();
    let a0 = fusion_loss(&cfg, &init, &train, FusionObjective::Fuse).unwrap();
    let b0 = fusion_loss(&cfg, &init, &train, FusionObjective::VisibleOnly).unwrap();
    assert_eq!(row.log_a.initial.unwrap(), a0);
    assert_eq!(row.log_b.initial.unwrap(), b0);

    let again = bias_experiment(&cfg, &pairs, &s1, &[3]).unwrap();
    assert_eq!(again.to_csv(), report.to_csv());
    assert_eq!(report.to_csv().lines().count(), 2);
    assert!(bias_experiment(&cfg, &pairs, &s1, &[]).is_err());
}

#[test]
fn visible_only_arm_matches_autoencoder_loss_form() {
    let pairs = data(2);
    let s1 = stage1(&pairs);
    let cfg = TrainConfig {
        epochs: 1,
        ..fusion_cfg()
    };
    let out = train_stage2_with(&cfg, &pairs, &s1, FusionObjective::VisibleOnly, None).unwrap();
    let init = out.log.initial.unwrap();
    assert!((init.loss - (init.primary + cfg.loss.alpha * init.structural)).abs() < 1e-9);
}

#[test]
fn sweep_rows() {
    let pairs = data(3);
    let s1 = stage1(&pairs);
    let cfg = TrainConfig {
        epochs: 1,
        ..fusion_cfg()
    };
    let single = sweep(&cfg, SweepAxis::Lr, &[1e-3], &pairs, &s1).unwrap();
    assert_eq!(single.rows.len(), 1);

    let table = sweep(&cfg, SweepAxis::Layers, &[3.0, 1.0, 2.0], &pairs, &s1).unwrap();
    let values: Vec<f64> = table.rows.iter().map(|r| r.value).collect();
    assert_eq!(values, vec![1.0, 2.0, 3.0]);
    assert!(!table.rows[0].flagged);
    for w in table.rows.windows(2) {
        assert_eq!(w[1].flagged, w[1].metrics.ssim < w[0].metrics.ssim);
    }
    let csv = table.to_csv();
    assert_eq!(csv.lines().next().unwrap(), SWEEP_HEADER);
    assert!(csv.lines().nth(1).unwrap().starts_with("layers,1,"));

    assert!(sweep(&cfg, SweepAxis::Batch, &[], &pairs, &s1).is_err());
    assert!(sweep(&cfg, SweepAxis::Batch, &[1.5], &pairs, &s1).is_err());
    assert!(sweep(&cfg, SweepAxis::Lr, &[-1.0], &pairs, &s1).is_err());
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "stage = fusion\nepochs = 4\nmanifest = pairs.txt\n").unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!(cfg.stage, TrainStage::Fusion);
    assert_eq!(cfg.manifest, Some(dir.path().join("pairs.txt")));
    assert!(matches!(
        TrainConfig::load(dir.path().join("missing.cfg")),
        Err(TrainError::Io { .. })
    ));
}
