use ewa_core::train::{
    convert_checkpoint, evaluate, finetune, finetune_init, prepare_data, train, Checkpoint, TrainConfig,
};
use ewa_core::{convert_model, Mode, Placement, ViTConfig};

fn tiny_cfg() -> TrainConfig {
    let mut cfg = TrainConfig::desk();
    cfg.epochs = 3;
    cfg.batch_size = 32;
    cfg.dataset = "synthetic:n=256,classes=4,size=8,channels=1,seed=3,noise=0.5".into();
    cfg.model = ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        d_model: 16,
        n_heads: 2,
        depth: 2,
        mlp_ratio: 2,
        n_classes: 4,
        dropout: 0.0,
        stochastic_depth: 0.0,
    };
    cfg.lr_schedule.warmup_epochs = 0.5;
    cfg
}

#[test]
fn train_save_load_convert() {
    let cfg = tiny_cfg();
    let (data, eval) = prepare_data(&cfg).unwrap();
    let out = train(&cfg, &data, Some(&eval)).unwrap();
    assert_eq!(out.epochs.len(), 3);
    assert_eq!(out.steps.len(), 3 * 256 / 32);
    assert!(out.final_accuracy() > 0.25, "accuracy {}", out.final_accuracy());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ewac");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), out.checkpoint.to_bytes().unwrap());
    assert_eq!(back.train.as_ref(), Some(&cfg));
    assert!(back.is_moe());

    let dense = convert_checkpoint(&back).unwrap();
    assert!(!dense.is_moe());
    assert_eq!(dense.param_count(), cfg.model.dense_param_count());
    assert_eq!(dense.provenance.len(), back.provenance.len() + 1);
    // converting the checkpoint and converting the model agree exactly
    let direct = convert_model(&back.to_model().unwrap()).unwrap();
    assert_eq!(dense.to_model().unwrap(), direct);
    // dense checkpoints pass through
    assert_eq!(convert_checkpoint(&dense).unwrap().to_bytes().unwrap(), dense.to_bytes().unwrap());
}

#[test]
fn finetune_warm_start_and_adaptation() {
    let mut cfg = tiny_cfg();
    cfg.moe.placement = Placement::None;
    let (data, eval) = prepare_data(&cfg).unwrap();
    let source = train(&cfg, &data, Some(&eval)).unwrap().checkpoint;
    assert!(!source.is_moe());

    let mut ft = TrainConfig::finetune();
    ft.model = cfg.model.clone();
    ft.batch_size = 32;
    ft.epochs = 25;
    ft.max_steps = Some(200);
    // same classes, perturbed prototypes
    ft.dataset = "synthetic:n=256,classes=4,size=8,channels=1,seed=3,noise=0.5,shift=1.5".into();
    let (shifted, shifted_eval) = prepare_data(&ft).unwrap();

    let init = finetune_init(&ft, &source).unwrap();
    let src_model = source.to_model().unwrap();
    let (imgs, _) = shifted.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    let a = convert_model(&init).unwrap().logits(&imgs, Mode::Eval, None).unwrap();
    let b = src_model.logits(&imgs, Mode::Eval, None).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-10);

    let before = evaluate(&src_model, &shifted_eval, 64).unwrap().loss;
    let out = finetune(&ft, &source, &shifted, Some(&shifted_eval)).unwrap();
    assert_eq!(out.steps.len(), 200);
    // per-step schedule: beta grows across steps, not epochs
    assert!(out.steps[199].beta > out.steps[1].beta && out.steps[1].beta > 0.0);
    let after = evaluate(&convert_model(&out.model).unwrap(), &shifted_eval, 64).unwrap().loss;
    assert!(after < before, "eval loss {before} -> {after}");
    assert!(out.checkpoint.provenance.iter().any(|p| p.contains("fine-tuned")));
}

#[test]
fn finetune_rejects_moe_source() {
    let cfg = tiny_cfg();
    let (data, _) = prepare_data(&cfg).unwrap();
    let mut short = cfg.clone();
    short.max_steps = Some(1);
    let moe = train(&short, &data, None).unwrap().checkpoint;
    let mut ft = TrainConfig::finetune();
    ft.model = cfg.model.clone();
    assert!(finetune_init(&ft, &moe).is_err());
    assert!(finetune_init(&ft, &convert_checkpoint(&moe).unwrap()).is_ok());
}

#[test]
fn corrupt_checkpoint_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ewac");
    std::fs::write(&path, b"EWAC\x01\x00\x00\x00garbage").unwrap();
    let err = Checkpoint::load(&path).unwrap_err().to_string();
    assert!(!err.is_empty());
    let missing = Checkpoint::load(&dir.path().join("missing.ewac"));
    assert!(missing.is_err());
}

#[test]
fn eval_every_skips_epochs_but_not_the_last() {
    let mut cfg = tiny_cfg();
    cfg.eval_every = 2;
    let (data, eval) = prepare_data(&cfg).unwrap();
    let out = train(&cfg, &data, Some(&eval)).unwrap();
    let evaluated: Vec<bool> = out.epochs.iter().map(|e| e.eval_accuracy.is_finite()).collect();
    assert_eq!(evaluated, [false, true, true]);
    cfg.eval_every = 0;
    assert!(cfg.validate().is_err());
}
