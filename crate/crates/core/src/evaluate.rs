//! Behavioural suites for a trained checkpoint, scored with the shapes
//! classifier from [`crate::metrics`] on held-out scenes.

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{eval_seed, scene_from_seed, Label, Scene, SceneSpec};
use crate::maskgen::{bbox_mask, dilate, random_freeform_mask, BrushParams, Mask};
use crate::metrics::{
    alignment_score, frechet_distance, generated_segmentation, local_crop, stack_crops, AccuracyRecord, FeatureExtractor,
    Frechet,
};
use crate::sampler::{GuidanceSpec, Job, Mode, Pipeline, DEFAULT_W_OBJECT, DEFAULT_W_REMOVAL, DEFAULT_W_SHAPE};
use crate::textcond::{caption_grammar, ComposeMode, TaskPromptName};
use crate::{Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub object_trials: usize,
    pub removal_trials: usize,
    pub shape_trials: usize,
    pub fid_scenes: usize,
    pub alphas: Vec<f64>,
    pub steps: usize,
    pub chunk: usize,
    pub seed: u64,
    /// Per-side growth of the shape-mode masks around the object.
    pub shape_dilation: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            object_trials: 200,
            removal_trials: 200,
            shape_trials: 100,
            fid_scenes: 500,
            alphas: vec![0.1, 0.5, 0.95],
            steps: 50,
            chunk: 32,
            seed: 2024,
            shape_dilation: 3,
        }
    }
}

impl EvalConfig {
    /// Tiny sizes for smoke runs.
    pub fn smoke() -> Self {
        Self {
            object_trials: 2,
            removal_trials: 2,
            shape_trials: 2,
            fid_scenes: 3,
            steps: 2,
            chunk: 4,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSuite {
    pub trials: usize,
    pub agreement: f64,
    pub mean_caption_probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemovalSuite {
    pub trials: usize,
    pub background_rate: f64,
    pub ablation_background_rate: f64,
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSuite {
    pub trials: usize,
    pub alphas: Vec<f64>,
    pub mean_iou: Vec<f64>,
    pub monotone: bool,
    pub mean_spearman: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidSuite {
    pub scenes: usize,
    pub proxy_fid_context: Frechet,
    pub proxy_fid_object_random_caption: Frechet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub object_agreement: f64,
    pub removal_background: f64,
    pub removal_margin: f64,
    pub shape_spearman: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            object_agreement: 0.70,
            removal_background: 0.85,
            removal_margin: 0.25,
            shape_spearman: 0.8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub object: Option<bool>,
    pub removal: Option<bool>,
    pub shape: Option<bool>,
    pub context_fid: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Object,
    Removal,
    Shape,
    /// Context-mode proxy-FID against object mode with random captions.
    Context,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Object, Suite::Removal, Suite::Shape, Suite::Context];
}

/// Report of one evaluation run. Suites that were not run are absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub extractor: AccuracyRecord,
    pub config: EvalConfig,
    pub thresholds: Thresholds,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object: Option<ObjectSuite>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub removal: Option<RemovalSuite>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape: Option<ShapeSuite>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fid: Option<FidSuite>,
    pub verdicts: Verdicts,
}

impl EvalReport {
    /// True when every suite ran and passed.
    pub fn passed(&self) -> bool {
        let v = &self.verdicts;
        [v.object, v.removal, v.shape, v.context_fid].iter().all(|x| *x == Some(true))
    }
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn scenes(count: usize, spec: &SceneSpec) -> Result<Vec<Scene>> {
    (0..count).map(|i| scene_from_seed(eval_seed(i), spec)).collect()
}

fn captions() -> Vec<String> {
    caption_grammar().into_iter().filter(|c| !c.is_empty()).collect()
}

fn run_jobs(p: &Pipeline, jobs: Vec<Job>, cfg: &EvalConfig, what: &str) -> Result<Vec<Tensor<f32>>> {
    info!("{what}: sampling {} images", jobs.len());
    p.inpaint_jobs(&jobs, cfg.steps, cfg.chunk)
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Object mode on box masks with a random caption per trial.
pub fn object_suite(p: &Pipeline, ex: &FeatureExtractor, spec: &SceneSpec, cfg: &EvalConfig) -> Result<ObjectSuite> {
    let caps = captions();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let empty = p.embed_empty()?;
    let mut jobs = Vec::new();
    let mut trials = Vec::new();
    for (i, scene) in scenes(cfg.object_trials, spec)?.into_iter().enumerate() {
        let obj = &scene.objects[0];
        let mask = bbox_mask(obj.bbox, scene.size(), scene.size())?;
        let caption = caps[rng.random_range(0..caps.len())].clone();
        let pos = p.embed_task(Some(&caption), TaskPromptName::Obj, ComposeMode::Suffix)?;
        jobs.push(Job {
            image: scene.image.clone(),
            mask: mask.clone(),
            guidance: GuidanceSpec::new(pos, empty.clone(), DEFAULT_W_OBJECT)?,
            seed: cfg.seed ^ (i as u64 + 1),
        });
        trials.push((mask, caption));
    }
    let outs = run_jobs(p, jobs, cfg, "object")?;
    let mut hits = 0;
    let mut prob = 0.0;
    for (img, (mask, caption)) in outs.iter().zip(&trials) {
        let crop = local_crop(img, mask, ex.config.input_size)?;
        let label = ex.classify(&stack_crops(vec![crop])?)?[0];
        if label == Label::from_caption(caption)? {
            hits += 1;
        }
        prob += alignment_score(img, mask, caption, ex)?;
    }
    Ok(ObjectSuite {
        trials: trials.len(),
        agreement: fraction(hits, trials.len()),
        mean_caption_probability: prob / trials.len().max(1) as f64,
    })
}

fn background_rate(ex: &FeatureExtractor, outs: &[Tensor<f32>], masks: &[Mask]) -> Result<f64> {
    let crops = outs
        .iter()
        .zip(masks)
        .map(|(img, m)| local_crop(img, m, ex.config.input_size))
        .collect::<Result<Vec<_>>>()?;
    if crops.is_empty() {
        return Ok(0.0);
    }
    let labels = ex.classify(&stack_crops(crops)?)?;
    Ok(fraction(labels.iter().filter(|&&l| l == Label::Background).count(), labels.len()))
}

/// Removal (context positive, object-with-empty-caption negative) against
/// the ablation that conditions on the object prompt alone with `w = 1`.
pub fn removal_suite(p: &Pipeline, ex: &FeatureExtractor, spec: &SceneSpec, cfg: &EvalConfig) -> Result<RemovalSuite> {
    let ctxt = p.embed_task(None, TaskPromptName::Ctxt, ComposeMode::Alone)?;
    let obj = p.embed_task(None, TaskPromptName::Obj, ComposeMode::Suffix)?;
    let empty = p.embed_empty()?;
    let mut removal = Vec::new();
    let mut ablation = Vec::new();
    let mut masks = Vec::new();
    for (i, scene) in scenes(cfg.removal_trials, spec)?.into_iter().enumerate() {
        let obj_box = bbox_mask(scene.objects[0].bbox, scene.size(), scene.size())?;
        let mask = dilate(&obj_box, 3, 1)?;
        let seed = cfg.seed ^ 0x5EED_0000 ^ i as u64;
        removal.push(Job {
            image: scene.image.clone(),
            mask: mask.clone(),
            guidance: GuidanceSpec::new(ctxt.clone(), obj.clone(), DEFAULT_W_REMOVAL)?,
            seed,
        });
        ablation.push(Job {
            image: scene.image.clone(),
            mask: mask.clone(),
            guidance: GuidanceSpec::new(obj.clone(), empty.clone(), 1.0)?,
            seed,
        });
        masks.push(mask);
    }
    let rate = background_rate(ex, &run_jobs(p, removal, cfg, "removal")?, &masks)?;
    let base = background_rate(ex, &run_jobs(p, ablation, cfg, "removal ablation")?, &masks)?;
    Ok(RemovalSuite {
        trials: masks.len(),
        background_rate: rate,
        ablation_background_rate: base,
        margin: rate - base,
    })
}

/// Shape mode on loose masks around an object, sweeping `α`. The input
/// image has the object removed so that only the prompt shapes the fill.
pub fn shape_suite(p: &Pipeline, ex: &FeatureExtractor, spec: &SceneSpec, cfg: &EvalConfig) -> Result<ShapeSuite> {
    let empty = p.embed_empty()?;
    let mut jobs = Vec::new();
    let mut masks = Vec::new();
    for (i, scene) in scenes(cfg.shape_trials, spec)?.into_iter().enumerate() {
        let obj = &scene.objects[0];
        let mask = dilate(&obj.segmentation, 3, cfg.shape_dilation)?;
        let caption = obj.caption();
        let background = scene.without(0);
        for &alpha in &cfg.alphas {
            jobs.push(Job {
                image: background.clone(),
                mask: mask.clone(),
                guidance: GuidanceSpec::new(p.model.embed_shape(&p.params, &caption, alpha)?, empty.clone(), DEFAULT_W_SHAPE)?,
                seed: cfg.seed ^ 0x5A_0000 ^ i as u64,
            });
        }
        masks.push(mask);
    }
    let outs = run_jobs(p, jobs, cfg, "shape")?;
    let k = cfg.alphas.len();
    let mut sums = vec![0.0; k];
    let mut rho = 0.0;
    for (trial, mask) in masks.iter().enumerate() {
        let mut ious = Vec::with_capacity(k);
        for (a, img) in outs[trial * k..(trial + 1) * k].iter().enumerate() {
            let (seg, _) = generated_segmentation(img, mask, ex)?;
            let iou = seg.iou(mask)?;
            sums[a] += iou;
            ious.push(iou);
        }
        rho += spearman(&cfg.alphas, &ious);
    }
    let n = masks.len().max(1) as f64;
    let mean_iou: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let order: Vec<usize> = {
        let mut o: Vec<usize> = (0..k).collect();
        o.sort_by(|&a, &b| cfg.alphas[a].total_cmp(&cfg.alphas[b]));
        o
    };
    let monotone = order.windows(2).all(|w| mean_iou[w[1]] > mean_iou[w[0]]);
    Ok(ShapeSuite {
        trials: masks.len(),
        alphas: cfg.alphas.clone(),
        mean_iou,
        monotone,
        mean_spearman: rho / n,
    })
}

/// Proxy-FID of context fills and of random-caption object fills against
/// the ground truth, on padded crops around free-form masks.
pub fn fid_suite(p: &Pipeline, ex: &FeatureExtractor, spec: &SceneSpec, cfg: &EvalConfig) -> Result<FidSuite> {
    let caps = captions();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF1D);
    let ctxt = p.embed_task(None, TaskPromptName::Ctxt, ComposeMode::Alone)?;
    let empty = p.embed_empty()?;
    let brush = BrushParams::default();
    let mut context = Vec::new();
    let mut object = Vec::new();
    let mut masks = Vec::new();
    let mut reals = Vec::new();
    for (i, scene) in scenes(cfg.fid_scenes, spec)?.into_iter().enumerate() {
        let s = scene.size();
        let mask = random_freeform_mask(s, s, &mut rng, &brush)?;
        let caption = &caps[rng.random_range(0..caps.len())];
        let seed = cfg.seed ^ 0xF1D_0000 ^ i as u64;
        context.push(Job {
            image: scene.image.clone(),
            mask: mask.clone(),
            guidance: GuidanceSpec::new(ctxt.clone(), empty.clone(), Mode::Context.default_w())?,
            seed,
        });
        object.push(Job {
            image: scene.image.clone(),
            mask: mask.clone(),
            guidance: GuidanceSpec::new(
                p.embed_task(Some(caption), TaskPromptName::Obj, ComposeMode::Suffix)?,
                empty.clone(),
                DEFAULT_W_OBJECT,
            )?,
            seed,
        });
        reals.push(local_crop(&scene.image, &mask, ex.config.input_size)?);
        masks.push(mask);
    }
    let feats = |imgs: &[Tensor<f32>]| -> Result<Vec<Vec<f64>>> {
        let crops = imgs
            .iter()
            .zip(&masks)
            .map(|(img, m)| local_crop(img, m, ex.config.input_size))
            .collect::<Result<Vec<_>>>()?;
        ex.features(&stack_crops(crops)?)
    };
    let real = ex.features(&stack_crops(reals)?)?;
    let ctx_feats = feats(&run_jobs(p, context, cfg, "context fid")?)?;
    let obj_feats = feats(&run_jobs(p, object, cfg, "object fid")?)?;
    Ok(FidSuite {
        scenes: masks.len(),
        proxy_fid_context: frechet_distance(&ctx_feats, &real)?,
        proxy_fid_object_random_caption: frechet_distance(&obj_feats, &real)?,
    })
}

/// Runs the chosen suites. Refuses to run with an extractor below the
/// accuracy gate.
pub fn evaluate(p: &Pipeline, ex: &FeatureExtractor, cfg: &EvalConfig, suites: &[Suite]) -> Result<EvalReport> {
    let record = ex.require_gate()?.clone();
    let spec = &p.scene;
    let thresholds = Thresholds::default();
    let mut report = EvalReport {
        checkpoint_id: p.checkpoint_id.clone(),
        extractor: record,
        config: cfg.clone(),
        thresholds: thresholds.clone(),
        object: None,
        removal: None,
        shape: None,
        fid: None,
        verdicts: Verdicts::default(),
    };
    let v = &mut report.verdicts;
    for suite in suites {
        match suite {
            Suite::Object => {
                let r = object_suite(p, ex, spec, cfg)?;
                v.object = Some(r.agreement >= thresholds.object_agreement);
                report.object = Some(r);
            }
            Suite::Removal => {
                let r = removal_suite(p, ex, spec, cfg)?;
                v.removal =
                    Some(r.background_rate >= thresholds.removal_background && r.margin >= thresholds.removal_margin);
                report.removal = Some(r);
            }
            Suite::Shape => {
                let r = shape_suite(p, ex, spec, cfg)?;
                v.shape = Some(r.monotone && r.mean_spearman >= thresholds.shape_spearman);
                report.shape = Some(r);
            }
            Suite::Context => {
                let r = fid_suite(p, ex, spec, cfg)?;
                v.context_fid = Some(r.proxy_fid_context.distance < r.proxy_fid_object_random_caption.distance);
                report.fid = Some(r);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_of_monotone_maps_is_one() {
        let x = [0.1, 0.5, 0.95];
        assert_eq!(spearman(&x, &[0.0, 0.2, 0.9]), 1.0);
        assert_eq!(spearman(&x, &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(spearman(&x, &[0.4, 0.4, 0.4]), 0.0);
    }

    #[test]
    fn spearman_averages_tied_ranks() {
        // ranks y = [1.5, 1.5, 3]
        let r = spearman(&[1.0, 2.0, 3.0], &[0.0, 0.0, 1.0]);
        assert!((r - 0.75f64.sqrt()).abs() < 1e-12, "{r}");
    }
}
