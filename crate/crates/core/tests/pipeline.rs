mod common;

use mlsc_core::checkpoint::{load_checkpoint, save_checkpoint};
use mlsc_core::codec::Model;
use mlsc_core::data::{ImageBatch, Split};
use mlsc_core::experiments::{EvalSet, LearnedSystem};
use mlsc_core::training::{batch_features, channel_draws, loss_csv, train, Trainer};
use mlsc_core::Error;

fn tiny_train(steps: usize) -> mlsc_core::training::TrainConfig {
    mlsc_core::training::TrainConfig {
        lr: 1e-3,
        batch_size: 2,
        steps,
        train_snr_db: 10.0,
        cfg: common::tiny_model(),
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn checkpoint_reload_reproduces_forward_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_dataset(dir.path(), 3, 16, 16, 0, Split::Train);
    let tcfg = tiny_train(3);
    let state = train::<f32>(&manifest, &tcfg, Some(dir.path())).unwrap();
    let ck = load_checkpoint(dir.path().join("checkpoint.mlsc")).unwrap();
    assert_eq!(ck.step, 3);
    assert_eq!(ck.model, tcfg.cfg);
    let set = EvalSet::<f32>::load(&manifest, 16, 16, 2).unwrap();
    let a = LearnedSystem::new(&tcfg.cfg, state.params.clone(), tcfg.extractor, 10.0).unwrap();
    let b = LearnedSystem::<f32>::from_checkpoint(&ck).unwrap();
    assert_eq!(a.reconstruct(&set, 7.0, 1).unwrap(), b.reconstruct(&set, 7.0, 1).unwrap());

    let again = dir.path().join("again.mlsc");
    save_checkpoint(&ck, &again).unwrap();
    assert_eq!(
        std::fs::read(&again).unwrap(),
        std::fs::read(dir.path().join("checkpoint.mlsc")).unwrap()
    );
}

#[test]
fn training_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_dataset(dir.path(), 4, 16, 16, 0, Split::Train);
    let a = train::<f32>(&manifest, &tiny_train(4), None).unwrap();
    let b = train::<f32>(&manifest, &tiny_train(4), None).unwrap();
    assert_eq!(a.params.digest(), b.params.digest());
    assert_eq!(loss_csv(&a.history), loss_csv(&b.history));
    let mut other = tiny_train(4);
    other.seed = 6;
    let c = train::<f32>(&manifest, &other, None).unwrap();
    assert_ne!(a.params.digest(), c.params.digest());
}

#[test]
fn zero_steps_returns_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_dataset(dir.path(), 2, 16, 16, 0, Split::Train);
    let tcfg = tiny_train(0);
    let state = train::<f32>(&manifest, &tcfg, None).unwrap();
    let init = Model::new(&tcfg.cfg).unwrap().init_params::<f32>();
    assert_eq!(state.params.digest(), init.digest());
    assert!(state.history.is_empty());
}

#[test]
fn extractor_is_frozen_during_training() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_dataset(dir.path(), 2, 16, 16, 0, Split::Train);
    let mut t = Trainer::<f32>::new(&manifest, &tiny_train(0)).unwrap();
    let before = t.extractor.digest();
    t.run(3).unwrap();
    assert_eq!(t.extractor.digest(), before);
    assert_eq!(t.state.history.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn every_parameter_receives_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = common::write_dataset(dir.path(), 2, 16, 16, 0, Split::Train);
    let cfg = common::tiny_model();
    let t = Trainer::<f64>::new(&manifest, &tiny_train(0)).unwrap();
    let set = EvalSet::<f64>::load(&manifest, 16, 16, 2).unwrap();
    let batch = &set.batches[0];
    let feats = batch_features(&t.model, &t.extractor, batch).unwrap();
    let draws = channel_draws::<f64>(&cfg, 2, 10.0, 0, 0);
    let (_, grads) = t.model.loss_and_grad(&t.state.params, &batch.images, &feats, &draws).unwrap();
    for (name, g) in grads.iter() {
        assert!(g.data().iter().any(|v| *v != 0.0), "{name} has an all-zero gradient");
    }
}

#[test]
fn wrong_sized_images_are_rejected() {
    let cfg = common::tiny_model();
    let model = Model::new(&cfg).unwrap();
    let params = model.init_params::<f32>();
    let img = common::synthetic_image(32, 32, 0);
    let images = ImageBatch::<f32>::from_images(&[img]).unwrap();
    let ex = mlsc_core::extractors::SemanticExtractor::<f32>::new(Default::default(), 16, 16, 4).unwrap();
    let small = common::synthetic_image(16, 16, 0);
    let batch = mlsc_core::data::Batch {
        images: ImageBatch::from_images(std::slice::from_ref(&small)).unwrap(),
        raw: vec![small],
        source_ids: vec!["x".into()],
        labels: None,
    };
    let feats = batch_features(&model, &ex, &batch).unwrap();
    assert!(matches!(model.encode(&params, &images, &feats), Err(Error::Shape(_))));
}
