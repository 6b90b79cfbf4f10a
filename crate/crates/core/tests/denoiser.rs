use promptpaint::denoiser::{Denoiser, DenoiserConfig};
use promptpaint::maskgen::Mask;
use promptpaint::model::{Model, ModelConfig};
use promptpaint::textcond::{ComposeMode, TaskPromptName};
use promptpaint::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn param_hash(seed: u64) -> Vec<u8> {
    let (_, store) = Denoiser::init::<f32>(&DenoiserConfig::default(), seed).unwrap();
    let mut h = Sha256::new();
    for (_, name, t) in store.iter() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().to_vec()
}

#[test]
fn init_hashes_repeat_per_seed() {
    assert_eq!(param_hash(0), param_hash(0));
    assert_eq!(param_hash(41), param_hash(41));
    assert_ne!(param_hash(0), param_hash(1));
}

#[test]
fn default_config_takes_seven_channels_at_32() {
    let cfg = DenoiserConfig::default();
    assert_eq!(cfg.input_channels(), 7);
    assert!(cfg.validate().is_ok());
    let bad = DenoiserConfig {
        image_size: 30,
        ..cfg
    };
    assert!(bad.validate().is_err());
}

#[test]
fn different_masks_change_the_prediction_for_every_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = Tensor::<f32>::randn(&[8, 8, 3], 0.5, &mut rng);
    let noisy = Tensor::<f32>::randn(&[8, 8, 3], 1.0, &mut rng);
    let m1 = Mask::from_fn(8, 8, |y, _| y < 4);
    let m2 = Mask::from_fn(8, 8, |_, x| x >= 5);
    for seed in 0..10 {
        let (model, params) = Model::init::<f32>(&ModelConfig::toy(), seed).unwrap();
        let cond = model
            .embed(&params, &model.compose(None, TaskPromptName::Ctxt, ComposeMode::Alone).unwrap())
            .unwrap();
        let run = |m: &Mask| {
            let x = Denoiser::extended_input(&noisy, &img, &m.to_tensor()).unwrap();
            let out = model
                .predict_noise_batch(&params, &x.reshape(&[1, 8, 8, 7]).unwrap(), 500, &[&cond])
                .unwrap();
            assert_eq!(out.shape(), &[1, 8, 8, 3]);
            out
        };
        let (a, b) = (run(&m1), run(&m2));
        let d: f32 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(d > 0.0, "init {seed}");
    }
}
