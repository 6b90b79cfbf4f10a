use std::path::Path;

use promptpaint::checkpoint::{load_checkpoint, read_manifest};
use promptpaint::imageio::{decode_rgb, encode_png_rgb, quantize};
use promptpaint::maskgen::Mask;
use promptpaint::model::Model;
use promptpaint::sampler::{InpaintRequest, Mode, Pipeline};
use promptpaint::trainer::{batch_loss, prepare_batch, read_log, train, RunConfig, TrainState};
use promptpaint::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy(steps: u64) -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.train.steps = steps;
    cfg
}

fn scene_image(p: &Pipeline, seed: u64) -> Tensor<f32> {
    promptpaint::dataset::scene_from_seed(seed, &p.scene).unwrap().image
}

#[test]
fn checkpoint_round_trip_preserves_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::init(&toy(2)).unwrap();
    for step in 0..2 {
        let mut rng = state.step_rng(step);
        let batch = state.make_batch(step, &mut rng).unwrap();
        state.training_step(&batch, &mut rng).unwrap();
    }
    state.save(dir.path(), Default::default()).unwrap();
    let mut loaded = TrainState::from_checkpoint(load_checkpoint(dir.path()).unwrap()).unwrap();
    assert_eq!(loaded.step, 2);

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let batch = state.make_batch(99, &mut rng).unwrap();
    let prepared = prepare_batch(&state.model, &batch, &state.schedule, 0.0, &mut rng).unwrap();
    let a = batch_loss(&state.model, &state.params, &prepared, false).unwrap().loss;
    let b = batch_loss(&loaded.model, &loaded.params, &prepared, false).unwrap().loss;
    assert!((a - b).abs() <= 1e-6, "{a} vs {b}");

    // optimiser moments come back too, so the next update is identical
    let mut r1 = state.step_rng(2);
    let mut r2 = loaded.step_rng(2);
    let b1 = state.make_batch(2, &mut r1).unwrap();
    let b2 = loaded.make_batch(2, &mut r2).unwrap();
    state.training_step(&b1, &mut r1).unwrap();
    loaded.training_step(&b2, &mut r2).unwrap();
    for ((_, _, x), (_, _, y)) in state.params.iter().zip(loaded.params.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn zero_steps_saves_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy(0);
    let m = train(&cfg, dir.path(), false).unwrap();
    assert_eq!(m.step, 0);
    let ck = load_checkpoint(dir.path()).unwrap();
    let (_, init) = Model::init::<f32>(&cfg.model, cfg.train.seed).unwrap();
    for ((_, _, x), (_, _, y)) in ck.params.iter().zip(init.iter()) {
        assert_eq!(x, y);
    }
}

fn log_steps(dir: &Path) -> Vec<(u64, f64)> {
    read_log(&dir.join("train_log.jsonl")).unwrap().iter().map(|r| (r.step, r.loss)).collect()
}

#[test]
fn resumed_runs_account_steps_like_straight_runs() {
    let straight = tempfile::tempdir().unwrap();
    let resumed = tempfile::tempdir().unwrap();
    let full = train(&toy(5), straight.path(), false).unwrap();
    let half = train(&toy(2), resumed.path(), false).unwrap();
    assert_eq!(half.step, 2);
    let rest = train(&toy(5), resumed.path(), true).unwrap();
    assert_eq!(rest.step, 5);
    assert_eq!(full.step, 5);
    let (a, b) = (log_steps(straight.path()), log_steps(resumed.path()));
    assert_eq!(a.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    assert_eq!(a, b);
    assert_eq!(full.checkpoint_id, rest.checkpoint_id);
    assert_eq!(read_manifest(&resumed.path().join("checkpoints/step-0000005")).unwrap().step, 5);
    // resuming a finished run changes nothing
    let again = train(&toy(5), resumed.path(), true).unwrap();
    assert_eq!(again.checkpoint_id, rest.checkpoint_id);
    assert_eq!(log_steps(resumed.path()).len(), 5);
}

#[test]
fn resume_rejects_a_different_model() {
    let dir = tempfile::tempdir().unwrap();
    train(&toy(1), dir.path(), false).unwrap();
    let mut other = toy(2);
    other.train.seed += 1;
    assert!(train(&other, dir.path(), true).is_err());
}

#[test]
fn every_mode_inpaints_deterministically_and_keeps_known_pixels() {
    let dir = tempfile::tempdir().unwrap();
    train(&toy(2), dir.path(), false).unwrap();
    let p = Pipeline::load(dir.path()).unwrap();
    let image = scene_image(&p, 3);
    let mask = Mask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (1..5).contains(&x));
    for mode in [Mode::Context, Mode::Removal, Mode::Object, Mode::Shape] {
        let mut req = InpaintRequest::new(image.clone(), mask.clone(), mode);
        req.steps = Some(8);
        req.seed = 5;
        if mode.takes_caption() {
            req.caption = Some("a green triangle".into());
        }
        if mode.takes_alpha() {
            req.alpha = Some(0.4);
        }
        let a = p.inpaint(&req).unwrap();
        let b = p.inpaint(&req).unwrap();
        let (pa, pb) = (encode_png_rgb(&a.image).unwrap(), encode_png_rgb(&b.image).unwrap());
        assert_eq!(pa, pb, "{mode:?}");
        assert_eq!(a.metadata.checkpoint_id, p.checkpoint_id);
        assert_eq!(a.metadata.request.w, mode.default_w());
        let decoded = decode_rgb(&pa).unwrap();
        let q = quantize(&image);
        for (i, &on) in mask.bits().iter().enumerate() {
            if !on {
                assert_eq!(&a.image.data()[i * 3..i * 3 + 3], &image.data()[i * 3..i * 3 + 3]);
                assert_eq!(&decoded.data()[i * 3..i * 3 + 3], &q.data()[i * 3..i * 3 + 3]);
            }
        }
        req.seed = 6;
        assert_ne!(p.inpaint(&req).unwrap().image, a.image, "{mode:?}: seed ignored");
    }
}
