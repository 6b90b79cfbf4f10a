//! Desk-scale evaluation: a small shapes classifier whose penultimate
//! features stand in for a pretrained feature network, the Fréchet distance
//! over those features, caption alignment and reconstruction error.
//!
//! Every number here is a proxy and is reported under a `proxy_` name.

use std::fs;
use std::path::Path;

use log::info;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use promptpaint_autograd::{softmax_rows, Adam, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_id, decode_params, encode_params};
use crate::dataset::{eval_seed, random_shape_mask, scene_from_seed, train_seed, ColorKind, Label, RoutingConfig, SceneSpec};
use crate::imageio::crop_resize;
use crate::maskgen::{bbox_mask, dilate, Mask};
use crate::nn::{Conv3x3, GroupNorm, Linear};
use crate::{Error, Result};

/// Result of a Fréchet distance computation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frechet {
    pub distance: f64,
    /// A covariance was singular or under-sampled and was regularised.
    pub regularized: bool,
    /// The matrix square root met negative eigenvalues beyond 1e-6.
    pub negative_eigenvalues: bool,
}

fn moments(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.len();
    let f = feats.first().map_or(0, |r| r.len());
    if n < 2 || f == 0 {
        return Err(Error::Metric(format!("need at least 2 non-empty feature rows, got {n}")));
    }
    if feats.iter().any(|r| r.len() != f || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Metric("feature rows must be finite and equally long".into()));
    }
    let x = DMatrix::from_fn(n, f, |i, j| feats[i][j]);
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Symmetric square root, clipping negative eigenvalues; the flag reports
/// clipped values larger than `1e-6` in magnitude.
fn sym_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let flagged = eig.eigenvalues.iter().any(|&l| l < -1e-6);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&roots) * v.transpose(), flagged)
}

fn min_eigen(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)`.
///
/// With fewer than `F + 1` rows on either side, or a numerically singular
/// covariance, both covariances get `1e-6·(tr Σ / F)` added to the diagonal
/// and the result is flagged.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Frechet> {
    let (mu_a, mut ca) = moments(a)?;
    let (mu_b, mut cb) = moments(b)?;
    let f = mu_a.len();
    if mu_b.len() != f {
        return Err(Error::Metric(format!("feature widths differ: {f} vs {}", mu_b.len())));
    }
    let scale = ((ca.trace() + cb.trace()) / (2.0 * f as f64)).max(1e-12);
    let under = a.len() < f + 1 || b.len() < f + 1;
    let singular = min_eigen(&ca) <= 1e-10 * scale || min_eigen(&cb) <= 1e-10 * scale;
    let regularized = under || singular;
    if regularized {
        let eps = 1e-6 * scale;
        for i in 0..f {
            ca[(i, i)] += eps;
            cb[(i, i)] += eps;
        }
    }
    let (ra, _) = sym_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let (root, negative_eigenvalues) = sym_sqrt(&inner);
    let diff = &mu_a - &mu_b;
    let d = diff.norm_squared() + ca.trace() + cb.trace() - 2.0 * root.trace();
    Ok(Frechet {
        distance: d.max(0.0),
        regularized,
        negative_eigenvalues,
    })
}

/// One feature or probability vector per crop.
pub type Rows = Vec<Vec<f64>>;

/// Padding added on every side of a crop, as a fraction of the box size.
pub const CROP_PAD: f64 = 0.1;

/// Crop window `(y0, x0, y1, x1)` of a mask: its tight box grown by
/// [`CROP_PAD`] per side and clipped to the frame.
pub fn crop_window(mask: &Mask) -> Result<(f64, f64, f64, f64)> {
    let b = mask.tight_bbox().ok_or_else(|| Error::Mask("cannot crop around an empty mask".into()))?;
    let (h, w) = (mask.height() as f64, mask.width() as f64);
    let py = CROP_PAD * b.height() as f64;
    let px = CROP_PAD * b.width() as f64;
    Ok((
        (b.y0 as f64 - py).max(0.0),
        (b.x0 as f64 - px).max(0.0),
        (b.y1 as f64 + py).min(h),
        (b.x1 as f64 + px).min(w),
    ))
}

/// The padded mask box, resampled to `size × size`.
pub fn local_crop(image: &Tensor<f32>, mask: &Mask, size: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != mask.height() || s[1] != mask.width() {
        return Err(Error::Shape(format!(
            "{}x{} mask over image {s:?}",
            mask.height(),
            mask.width()
        )));
    }
    crop_resize(image, crop_window(mask)?, size, size)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub input_size: usize,
    pub widths: Vec<usize>,
    pub groups: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub eval_crops: usize,
    /// Fraction of each batch made of uniform-noise images with random
    /// labels, which pushes off-distribution inputs towards a flat output.
    pub noise_fraction: f64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            widths: vec![16, 32, 64],
            groups: 8,
            steps: 3000,
            batch_size: 64,
            learning_rate: 2e-3,
            seed: 17,
            eval_crops: 2000,
            noise_fraction: 0.1,
        }
    }
}

/// Held-out accuracy of a trained extractor; embedded in every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRecord {
    pub accuracy: f64,
    pub evaluated: usize,
    pub seed: u64,
    pub steps: usize,
    pub checkpoint_id: String,
}

pub const ACCURACY_GATE: f64 = 0.95;

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv3x3,
    norm: GroupNorm,
    down: Option<Linear>,
}

/// Shapes classifier over `[n, s, s, 3]` crops with 13 outputs: twelve
/// (shape, colour) pairs and background.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub config: ExtractorConfig,
    stages: Vec<Stage>,
    head: Linear,
    pub params: ParamStore<f32>,
    pub record: Option<AccuracyRecord>,
}

impl FeatureExtractor {
    pub fn new(config: &ExtractorConfig) -> Result<Self> {
        if config.widths.is_empty() || config.widths.iter().any(|w| w % config.groups != 0) {
            return Err(Error::Config(format!(
                "extractor widths {:?} must be multiples of {} groups",
                config.widths, config.groups
            )));
        }
        if !config.input_size.is_multiple_of(1 << (config.widths.len() - 1)) {
            return Err(Error::Config("extractor input size not divisible by its downsampling".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            let conv = Conv3x3::new(&mut store, &format!("cls.stage{i}.conv"), c_in, w, &mut rng)?;
            let norm = GroupNorm::new(&mut store, &format!("cls.stage{i}.norm"), w, config.groups)?;
            let down = match config.widths.get(i + 1) {
                Some(&next) => Some(Linear::new(&mut store, &format!("cls.stage{i}.down"), 4 * w, next, true, &mut rng)?),
                None => None,
            };
            c_in = down.as_ref().map_or(w, |_| config.widths[i + 1]);
            stages.push(Stage { conv, norm, down });
        }
        let f = *config.widths.last().expect("non-empty");
        let head = Linear::new(&mut store, "cls.head", f, Label::COUNT, true, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            stages,
            head,
            params: store,
            record: None,
        })
    }

    pub fn feature_dim(&self) -> usize {
        *self.config.widths.last().expect("non-empty")
    }

    fn forward(&self, g: &mut Graph<'_, f32>, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for s in &self.stages {
            h = s.conv.forward(g, h)?;
            h = s.norm.forward(g, h)?;
            h = g.silu(h);
            if let Some(d) = &s.down {
                h = g.space_to_depth(h)?;
                h = d.forward(g, h)?;
            }
        }
        let feats = g.mean_middle(h)?;
        let logits = self.head.forward(g, feats)?;
        Ok((feats, logits))
    }

    fn check_batch(&self, crops: &Tensor<f32>) -> Result<()> {
        let s = self.config.input_size;
        if crops.shape().len() != 4 || crops.shape()[1..] != [s, s, 3] {
            return Err(Error::Shape(format!("extractor expects [n, {s}, {s}, 3], got {:?}", crops.shape())));
        }
        Ok(())
    }

    /// Penultimate features and class probabilities for a batch of crops.
    pub fn run(&self, crops: &Tensor<f32>) -> Result<(Rows, Rows)> {
        self.check_batch(crops)?;
        let mut feats = Vec::new();
        let mut probs = Vec::new();
        let n = crops.shape()[0];
        for start in (0..n).step_by(256) {
            let len = 256.min(n - start);
            let part = crops.slice_leading(start, len)?;
            let mut g = Graph::inference(&self.params);
            let x = g.input(part);
            let (f, l) = self.forward(&mut g, x)?;
            let fd = self.feature_dim();
            feats.extend(g.value(f).data().chunks(fd).map(|r| r.iter().map(|&v| v as f64).collect()));
            let p = softmax_rows(g.value(l));
            probs.extend(p.data().chunks(Label::COUNT).map(|r| r.iter().map(|&v| v as f64).collect()));
        }
        Ok((feats, probs))
    }

    pub fn features(&self, crops: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(crops)?.0)
    }

    pub fn probabilities(&self, crops: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(crops)?.1)
    }

    pub fn classify(&self, crops: &Tensor<f32>) -> Result<Vec<Label>> {
        Ok(self
            .probabilities(crops)?
            .iter()
            .map(|p| {
                let best = p
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(Label::COUNT - 1);
                Label::from_index(best).expect("index below COUNT")
            })
            .collect())
    }

    /// Errors unless a held-out accuracy at or above the gate is on record.
    pub fn require_gate(&self) -> Result<&AccuracyRecord> {
        match &self.record {
            Some(r) if r.accuracy >= ACCURACY_GATE => Ok(r),
            Some(r) => Err(Error::Metric(format!(
                "extractor accuracy {:.4} is below the {ACCURACY_GATE} gate",
                r.accuracy
            ))),
            None => Err(Error::Metric("extractor has no accuracy record".into())),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let bytes = encode_params(&self.params);
        #[derive(Serialize)]
        struct Meta<'a> {
            config: &'a ExtractorConfig,
            record: &'a Option<AccuracyRecord>,
            checkpoint_id: String,
        }
        let meta = Meta {
            config: &self.config,
            record: &self.record,
            checkpoint_id: checkpoint_id(&bytes),
        };
        let tmp = dir.join(".extractor.bin.tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, dir.join("extractor.bin"))?;
        fs::write(dir.join("extractor.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            config: ExtractorConfig,
            record: Option<AccuracyRecord>,
            checkpoint_id: String,
        }
        let meta: Meta = serde_json::from_slice(
            &fs::read(dir.join("extractor.json"))
                .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join("extractor.json").display())))?,
        )?;
        let bytes = fs::read(dir.join("extractor.bin"))?;
        if checkpoint_id(&bytes) != meta.checkpoint_id {
            return Err(Error::Checkpoint("extractor.bin does not match its checksum".into()));
        }
        let mut ex = Self::new(&meta.config)?;
        for (name, t) in decode_params(&bytes)? {
            let id = ex
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown extractor parameter {name}")))?;
            ex.params.set(id, t)?;
        }
        ex.record = meta.record;
        Ok(ex)
    }
}

/// One labelled crop for extractor training.
fn labelled_crop<R: Rng + ?Sized>(rng: &mut R, seed: u64, spec: &SceneSpec, size: usize) -> Result<(Tensor<f32>, Label)> {
    let scene = scene_from_seed(seed, spec)?;
    let idx = rng.random_range(0..scene.objects.len());
    let obj = &scene.objects[idx];
    let h = scene.size();
    // vary the crop scale the way evaluation masks do
    let mask = match rng.random_range(0..3) {
        0 => bbox_mask(obj.bbox, h, h)?,
        1 => random_shape_mask(&obj.segmentation, rng, &RoutingConfig::default())?.dilated,
        _ => dilate(&bbox_mask(obj.bbox, h, h)?, 3, rng.random_range(1..=2))?,
    };
    let (image, label) = if rng.random_bool(0.5) {
        (scene.without(idx), Label::Background)
    } else {
        (scene.image.clone(), obj.label())
    };
    let sigma = rng.random_range(0.0..0.15f32);
    let noise: Vec<f32> = (0..image.numel()).map(|_| sigma * rng.sample::<f32, _>(StandardNormal)).collect();
    let noisy = Tensor::new(image.shape(), image.data().iter().zip(&noise).map(|(a, b)| a + b).collect())?;
    Ok((local_crop(&noisy, &mask, size)?, label))
}

fn noise_image<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Tensor<f32> {
    let n = size * size * 3;
    Tensor::new(&[size, size, 3], (0..n).map(|_| rng.random_range(-1.0..1.0f32)).collect()).expect("noise image")
}

fn stack(crops: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let n = crops.len();
    let s = crops[0].shape().to_vec();
    let refs: Vec<&Tensor<f32>> = crops.iter().collect();
    let mut shape = vec![n];
    shape.extend(s);
    Ok(Tensor::concat_leading(&refs)?.reshape(&shape)?)
}

/// Held-out crops (scene seeds from the evaluation range) with labels.
pub fn held_out_crops(count: usize, seed: u64, spec: &SceneSpec, size: usize) -> Result<(Tensor<f32>, Vec<Label>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut crops = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let (c, l) = labelled_crop(&mut rng, eval_seed(i), spec, size)?;
        crops.push(c);
        labels.push(l);
    }
    Ok((stack(crops)?, labels))
}

pub fn accuracy(ex: &FeatureExtractor, crops: &Tensor<f32>, labels: &[Label]) -> Result<f64> {
    let pred = ex.classify(crops)?;
    Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
}

/// Trains the classifier on training-range scenes, then measures held-out
/// accuracy and stores it in the record.
pub fn train_extractor(config: &ExtractorConfig, spec: &SceneSpec) -> Result<FeatureExtractor> {
    let mut ex = FeatureExtractor::new(config)?;
    let mut opt = Adam::new(config.learning_rate).with_clip_norm(5.0);
    let size = config.input_size;
    for step in 0..config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step as u64 + 1);
        let mut crops = Vec::with_capacity(config.batch_size);
        let mut labels = Vec::with_capacity(config.batch_size);
        for slot in 0..config.batch_size {
            if rng.random_bool(config.noise_fraction) {
                crops.push(noise_image(&mut rng, size));
                labels.push(rng.random_range(0..Label::COUNT));
            } else {
                let (c, l) = labelled_crop(&mut rng, train_seed(config.seed, step as u64, slot), spec, size)?;
                crops.push(c);
                labels.push(l.index());
            }
        }
        // cosine decay to a tenth of the base rate
        let progress = step as f64 / config.steps.max(1) as f64;
        opt.learning_rate = config.learning_rate * (0.55 + 0.45 * (std::f64::consts::PI * progress).cos());
        let batch = stack(crops)?;
        let mut g = Graph::new(&ex.params);
        let x = g.input(batch);
        let (_, logits) = ex.forward(&mut g, x)?;
        let loss = g.cross_entropy(logits, &labels)?;
        let lv = g.value(loss).data()[0];
        let grads = g.backward(loss)?.params;
        drop(g);
        opt.step(&mut ex.params, grads)?;
        if step % 100 == 0 {
            info!("extractor step {step} loss {lv:.4}");
        }
    }
    let (crops, labels) = held_out_crops(config.eval_crops, config.seed ^ 0xE7A1, spec, size)?;
    let acc = accuracy(&ex, &crops, &labels)?;
    ex.record = Some(AccuracyRecord {
        accuracy: acc,
        evaluated: labels.len(),
        seed: config.seed,
        steps: config.steps,
        checkpoint_id: checkpoint_id(&encode_params(&ex.params)),
    });
    Ok(ex)
}

/// Probability the extractor assigns to the caption's (shape, colour) class
/// on the padded crop around `mask`.
pub fn alignment_score(image: &Tensor<f32>, mask: &Mask, caption: &str, ex: &FeatureExtractor) -> Result<f64> {
    let label = Label::from_caption(caption)?;
    let crop = local_crop(image, mask, ex.config.input_size)?;
    let shape = [1, crop.shape()[0], crop.shape()[1], 3];
    let p = ex.probabilities(&crop.reshape(&shape)?)?;
    Ok(p[0][label.index()])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub mse_inside: f64,
    pub feature_l2: f64,
}

/// Pixel MSE over the masked region and feature distance between the
/// padded crops of prediction and ground truth.
pub fn reconstruction_error(pred: &Tensor<f32>, gt: &Tensor<f32>, mask: &Mask, ex: &FeatureExtractor) -> Result<Reconstruction> {
    pred.expect_same_shape(gt)?;
    let c = pred.last_dim();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, &on) in mask.bits().iter().enumerate() {
        if on {
            for ch in 0..c {
                let d = (pred.data()[p * c + ch] - gt.data()[p * c + ch]) as f64;
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Mask("reconstruction error over an empty mask".into()));
    }
    let s = ex.config.input_size;
    let crops = stack(vec![local_crop(pred, mask, s)?, local_crop(gt, mask, s)?])?;
    let f = ex.features(&crops)?;
    let feature_l2 = f[0].iter().zip(&f[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(Reconstruction {
        mse_inside: sum / n as f64,
        feature_l2,
    })
}

/// Pixels inside `mask` whose colour lies within `0.6` (RGB distance in
/// `[-1, 1]` units) of `color`.
pub fn color_segmentation(image: &Tensor<f32>, mask: &Mask, color: ColorKind) -> Mask {
    let rgb = color.rgb();
    let d = image.data();
    Mask::from_fn(mask.height(), mask.width(), |y, x| {
        if !mask.get(y, x) {
            return false;
        }
        let p = (y * mask.width() + x) * 3;
        let dist: f32 = (0..3).map(|c| (d[p + c] - rgb[c]).powi(2)).sum();
        dist.sqrt() < 0.6
    })
}

/// Segmentation of the object generated inside `mask`: the extractor picks
/// the colour from the padded crop, then matching pixels are kept. An empty
/// mask is returned when the crop is classified as background.
pub fn generated_segmentation(image: &Tensor<f32>, mask: &Mask, ex: &FeatureExtractor) -> Result<(Mask, Label)> {
    let crop = local_crop(image, mask, ex.config.input_size)?;
    let shape = [1, crop.shape()[0], crop.shape()[1], 3];
    let label = ex.classify(&crop.reshape(&shape)?)?[0];
    let seg = match label {
        Label::Object(_, color) => color_segmentation(image, mask, color),
        Label::Background => Mask::empty(mask.height(), mask.width()),
    };
    Ok((seg, label))
}

/// Stacks crops into one extractor batch.
pub fn stack_crops(crops: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    stack(crops)
}
