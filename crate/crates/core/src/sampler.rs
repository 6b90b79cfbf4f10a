//! Reverse diffusion with guidance, known-region blending and the four
//! user-facing inpainting modes.
//!
//! Guidance follows the literal two-term form
//! `ε̃ = w·ε(positive) + (1 − w)·ε(negative)`, which equals the familiar
//! `ε(negative) + w·(ε(positive) − ε(negative))`.

use std::path::Path;

use promptpaint_autograd::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_checkpoint;
use crate::dataset::{Label, SceneSpec};
use crate::denoiser::Denoiser;
use crate::maskgen::Mask;
use crate::model::Model;
use crate::schedule::NoiseSchedule;
use crate::textcond::{ComposeMode, TaskPromptName, TextEmbedding};
use crate::{Error, Result};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_W_CONTEXT: f64 = 1.0;
pub const DEFAULT_W_REMOVAL: f64 = 5.0;
pub const DEFAULT_W_OBJECT: f64 = 7.5;
pub const DEFAULT_W_SHAPE: f64 = 7.5;

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSpec {
    pub positive: TextEmbedding,
    pub negative: TextEmbedding,
    pub w: f64,
}

impl GuidanceSpec {
    pub fn new(positive: TextEmbedding, negative: TextEmbedding, w: f64) -> Result<Self> {
        positive.values().expect_same_shape(negative.values())?;
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Request {
                field: "w".into(),
                message: format!("guidance scale must be finite and non-negative, got {w}"),
            });
        }
        Ok(Self { positive, negative, w })
    }
}

/// Anything that predicts noise for a batch of extended inputs at one
/// timestep, one conditioning sequence per row.
pub trait NoisePredictor {
    fn predict(&self, x_in: &Tensor<f32>, t: usize, cond: &[&TextEmbedding]) -> Result<Tensor<f32>>;
}

/// A frozen model snapshot.
pub struct Frozen<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore<f32>,
}

impl NoisePredictor for Frozen<'_> {
    fn predict(&self, x_in: &Tensor<f32>, t: usize, cond: &[&TextEmbedding]) -> Result<Tensor<f32>> {
        self.model.predict_noise_batch(self.params, x_in, t, cond)
    }
}

fn rows(t: &Tensor<f32>) -> usize {
    t.shape()[0]
}

/// Guided noise for a batch; row `i` uses `specs[i]`. Positive and negative
/// rows share one network call; a scale of exactly 1 or 0 skips the side
/// whose weight is zero.
pub fn guided_noise_batch<P: NoisePredictor + ?Sized>(
    net: &P,
    x_in: &Tensor<f32>,
    t: usize,
    specs: &[&GuidanceSpec],
) -> Result<Tensor<f32>> {
    let b = rows(x_in);
    if specs.len() != b {
        return Err(Error::Shape(format!("{} guidance specs for a batch of {b}", specs.len())));
    }
    let need_pos: Vec<bool> = specs.iter().map(|s| s.w != 0.0).collect();
    let need_neg: Vec<bool> = specs.iter().map(|s| s.w != 1.0).collect();
    let mut parts = Vec::new();
    let mut conds = Vec::new();
    for i in 0..b {
        let row = x_in.slice_leading(i, 1)?;
        if need_pos[i] {
            parts.push(row.clone());
            conds.push(&specs[i].positive);
        }
        if need_neg[i] {
            parts.push(row);
            conds.push(&specs[i].negative);
        }
    }
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    let mut shape = x_in.shape().to_vec();
    shape[0] = parts.len();
    let stacked = Tensor::concat_leading(&refs)?.reshape(&shape)?;
    let eps = net.predict(&stacked, t, &conds)?;
    let out_inner = eps.numel() / parts.len();
    let e = eps.data();
    let mut out = Vec::with_capacity(b * out_inner);
    let mut k = 0;
    for (i, spec) in specs.iter().enumerate() {
        let pos = if need_pos[i] {
            k += 1;
            Some(&e[(k - 1) * out_inner..k * out_inner])
        } else {
            None
        };
        let neg = if need_neg[i] {
            k += 1;
            Some(&e[(k - 1) * out_inner..k * out_inner])
        } else {
            None
        };
        match (pos, neg) {
            (Some(p), None) => out.extend_from_slice(p),
            (None, Some(n)) => out.extend_from_slice(n),
            (Some(p), Some(n)) => {
                let (w, v) = (spec.w as f32, (1.0 - spec.w) as f32);
                out.extend(p.iter().zip(n).map(|(a, b)| w * a + v * b));
            }
            (None, None) => unreachable!("a scale cannot be both 0 and 1"),
        }
    }
    let mut out_shape = eps.shape().to_vec();
    out_shape[0] = b;
    Ok(Tensor::new(&out_shape, out)?)
}

/// Single-image guided noise, `x_in: [h, w, 2c+1]` → `[h, w, c]`.
pub fn guided_noise<P: NoisePredictor + ?Sized>(net: &P, x_in: &Tensor<f32>, t: usize, g: &GuidanceSpec) -> Result<Tensor<f32>> {
    let mut shape = vec![1];
    shape.extend_from_slice(x_in.shape());
    let out = guided_noise_batch(net, &x_in.clone().reshape(&shape)?, t, &[g])?;
    let s = out.shape()[1..].to_vec();
    Ok(out.reshape(&s)?)
}

/// Descending timesteps `t_k = (k + 1)·T/steps − 1`, so the last one is
/// `T/steps − 1` and the first is `T − 1`.
pub fn strided_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Request {
            field: "steps".into(),
            message: format!("steps must lie in 1..={total}, got {steps}"),
        });
    }
    Ok((0..steps).rev().map(|k| (k + 1) * total / steps - 1).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Deterministic strided update.
    #[default]
    Ddim,
    /// Stochastic update with posterior-variance noise.
    Ancestral,
}

/// `x0 = (x_t − √(1 − ᾱ)·ε)/√ᾱ`.
pub fn predict_x0(x_t: &Tensor<f32>, eps: &Tensor<f32>, alpha_bar: f64) -> Result<Tensor<f32>> {
    let a = alpha_bar.sqrt() as f32;
    let s = (1.0 - alpha_bar).sqrt() as f32;
    Ok(x_t.zip_map(eps, |x, e| (x - s * e) / a)?)
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub x_prev: Tensor<f32>,
    pub x0_pred: Tensor<f32>,
}

/// One update from `ᾱ_t` to `ᾱ_prev` (use 1 for the final step) given the
/// predicted noise. The clean estimate is clamped to `[-1, 1]` and the noise
/// re-derived from it.
pub fn denoise_step<R: Rng + ?Sized>(
    x_t: &Tensor<f32>,
    eps: &Tensor<f32>,
    alpha_bar: f64,
    alpha_bar_prev: f64,
    kind: SamplerKind,
    rng: &mut R,
) -> Result<StepResult> {
    let x0 = predict_x0(x_t, eps, alpha_bar)?.map(|v| v.clamp(-1.0, 1.0));
    let (sa, sn) = (alpha_bar.sqrt() as f32, (1.0 - alpha_bar).sqrt() as f32);
    let eps = x_t.zip_map(&x0, |x, z| (x - sa * z) / sn)?;
    let sigma = match kind {
        SamplerKind::Ddim => 0.0,
        SamplerKind::Ancestral => {
            ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * (1.0 - alpha_bar / alpha_bar_prev)).max(0.0).sqrt()
        }
    };
    let c0 = alpha_bar_prev.sqrt() as f32;
    let ce = (1.0 - alpha_bar_prev - sigma * sigma).max(0.0).sqrt() as f32;
    let mut x_prev = x0.zip_map(&eps, |z, e| c0 * z + ce * e)?;
    if sigma > 0.0 {
        let s = sigma as f32;
        for v in x_prev.data_mut() {
            *v += s * rng.sample::<f32, _>(StandardNormal);
        }
    }
    Ok(StepResult { x_prev, x0_pred: x0 })
}

/// Outside the mask, replaces `x_t` by a fresh forward-noised copy of `x0`
/// at level `alpha_bar`; inside it leaves `x_t` alone. `x_t`, `x0` are
/// `[h, w, c]`.
pub fn blend_known<R: Rng + ?Sized>(
    x_t: &Tensor<f32>,
    x0: &Tensor<f32>,
    m: &Mask,
    alpha_bar: f64,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    x_t.expect_same_shape(x0)?;
    let c = x_t.last_dim();
    if m.height() * m.width() * c != x_t.numel() {
        return Err(Error::Shape(format!(
            "{}x{} mask over an image of shape {:?}",
            m.height(),
            m.width(),
            x_t.shape()
        )));
    }
    let (a, s) = (alpha_bar.sqrt() as f32, (1.0 - alpha_bar).sqrt() as f32);
    let mut out = x_t.data().to_vec();
    for (p, &fill) in m.bits().iter().enumerate() {
        if !fill {
            for ch in 0..c {
                let e: f32 = if s > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                out[p * c + ch] = a * x0.data()[p * c + ch] + s * e;
            }
        }
    }
    Ok(Tensor::new(x_t.shape(), out)?)
}

/// `result·m + x0·(1 − m)`.
pub fn composite(result: &Tensor<f32>, x0: &Tensor<f32>, m: &Mask) -> Result<Tensor<f32>> {
    result.expect_same_shape(x0)?;
    let c = result.last_dim();
    let mut out = x0.data().to_vec();
    for (p, &fill) in m.bits().iter().enumerate() {
        if fill {
            out[p * c..(p + 1) * c].copy_from_slice(&result.data()[p * c..(p + 1) * c]);
        }
    }
    Ok(Tensor::new(result.shape(), out)?)
}

/// One image to inpaint under a prepared guidance spec.
#[derive(Clone, Debug)]
pub struct Job {
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub guidance: GuidanceSpec,
    pub seed: u64,
}

/// Runs the reverse process for a batch of jobs in lock-step. Each job draws
/// from its own seeded generator. Outputs are clamped and hard-composited.
pub fn sample_batch<P: NoisePredictor + ?Sized>(
    net: &P,
    schedule: &NoiseSchedule,
    jobs: &[Job],
    steps: usize,
    kind: SamplerKind,
) -> Result<Vec<Tensor<f32>>> {
    let ts = strided_timesteps(schedule.len(), steps)?;
    let mut rngs: Vec<ChaCha8Rng> = jobs.iter().map(|j| ChaCha8Rng::seed_from_u64(j.seed)).collect();
    let mut xs = Vec::with_capacity(jobs.len());
    for (j, rng) in jobs.iter().zip(rngs.iter_mut()) {
        let s = j.image.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("expected an [h, w, c] image, got {s:?}")));
        }
        let n = j.image.numel();
        let noise = Tensor::new(s, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())?;
        xs.push(blend_known(&noise, &j.image, &j.mask, schedule.alpha_bar(ts[0]), rng)?);
    }
    let masks: Vec<Tensor<f32>> = jobs.iter().map(|j| j.mask.to_tensor()).collect();
    let specs: Vec<&GuidanceSpec> = jobs.iter().map(|j| &j.guidance).collect();
    for (i, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let ab_prev = ts.get(i + 1).map_or(1.0, |&tp| schedule.alpha_bar(tp));
        let mut inputs = Vec::with_capacity(jobs.len());
        for ((x, j), m) in xs.iter().zip(jobs).zip(&masks) {
            inputs.push(Denoiser::extended_input(x, &j.image, m)?);
        }
        let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
        let mut shape = vec![jobs.len()];
        shape.extend_from_slice(inputs[0].shape());
        let batch = Tensor::concat_leading(&refs)?.reshape(&shape)?;
        let eps = guided_noise_batch(net, &batch, t, &specs)?;
        for (k, ((x, j), rng)) in xs.iter_mut().zip(jobs).zip(rngs.iter_mut()).enumerate() {
            let e = eps.slice_leading(k, 1)?.reshape(x.shape())?;
            let step = denoise_step(x, &e, ab, ab_prev, kind, rng)?;
            *x = blend_known(&step.x_prev, &j.image, &j.mask, ab_prev, rng)?;
        }
    }
    xs.into_iter()
        .zip(jobs)
        .map(|(x, j)| composite(&x.map(|v| v.clamp(-1.0, 1.0)), &j.image, &j.mask))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Context,
    Removal,
    Object,
    Shape,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Context, Mode::Removal, Mode::Object, Mode::Shape];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Context => "context",
            Mode::Removal => "removal",
            Mode::Object => "object",
            Mode::Shape => "shape",
        }
    }

    pub fn default_w(self) -> f64 {
        match self {
            Mode::Context => DEFAULT_W_CONTEXT,
            Mode::Removal => DEFAULT_W_REMOVAL,
            Mode::Object => DEFAULT_W_OBJECT,
            Mode::Shape => DEFAULT_W_SHAPE,
        }
    }

    pub fn takes_caption(self) -> bool {
        matches!(self, Mode::Object | Mode::Shape)
    }

    pub fn takes_alpha(self) -> bool {
        self == Mode::Shape
    }
}

/// Negative prompt for object mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectNegative {
    #[default]
    Empty,
    PCtxt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InpaintRequest {
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub mode: Mode,
    pub caption: Option<String>,
    pub alpha: Option<f64>,
    pub w: Option<f64>,
    pub steps: Option<usize>,
    pub seed: u64,
    pub negative: Option<ObjectNegative>,
    pub sampler: Option<SamplerKind>,
}

impl InpaintRequest {
    pub fn new(image: Tensor<f32>, mask: Mask, mode: Mode) -> Self {
        Self {
            image,
            mask,
            mode,
            caption: None,
            alpha: None,
            w: None,
            steps: None,
            seed: 0,
            negative: None,
            sampler: None,
        }
    }
}

/// Every request parameter with defaults filled in; enough to replay the
/// result given the same checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestEcho {
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub w: f64,
    pub steps: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negative: Option<ObjectNegative>,
    pub sampler: SamplerKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintMetadata {
    pub request: RequestEcho,
    pub checkpoint_id: String,
}

#[derive(Clone, Debug)]
pub struct InpaintResult {
    pub image: Tensor<f32>,
    pub metadata: InpaintMetadata,
}

fn field_err(field: &str, message: impl Into<String>) -> Error {
    Error::Request {
        field: field.into(),
        message: message.into(),
    }
}

/// A loaded checkpoint ready for sampling.
pub struct Pipeline {
    pub model: Model,
    pub params: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    pub checkpoint_id: String,
    /// Scene distribution the checkpoint was trained on.
    pub scene: SceneSpec,
}

impl Pipeline {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        Ok(Self {
            schedule: ck.manifest.config.schedule.build()?,
            checkpoint_id: ck.manifest.checkpoint_id,
            scene: ck.manifest.config.scene,
            model: ck.model,
            params: ck.params,
        })
    }

    pub fn frozen(&self) -> Frozen<'_> {
        Frozen {
            model: &self.model,
            params: &self.params,
        }
    }

    pub fn image_size(&self) -> usize {
        self.model.config.denoiser.image_size
    }

    pub fn embed_empty(&self) -> Result<TextEmbedding> {
        self.model.embed(&self.params, &self.model.empty_prompt())
    }

    pub fn embed_task(&self, caption: Option<&str>, task: TaskPromptName, mode: ComposeMode) -> Result<TextEmbedding> {
        self.model.embed(&self.params, &self.model.compose(caption, task, mode)?)
    }

    /// Checks mode/field consistency and fills defaults.
    pub fn validate(&self, req: &InpaintRequest) -> Result<RequestEcho> {
        let size = self.image_size();
        let c = self.model.config.denoiser.image_channels;
        if req.image.shape() != [size, size, c] {
            return Err(field_err(
                "image",
                format!("expected {size}x{size} with {c} channels, got {:?}", req.image.shape()),
            ));
        }
        if req.mask.height() != size || req.mask.width() != size {
            return Err(field_err(
                "mask",
                format!("mask is {}x{}, image is {size}x{size}", req.mask.height(), req.mask.width()),
            ));
        }
        if req.mask.is_empty() {
            return Err(field_err("mask", "mask selects no pixels"));
        }
        if !req.image.all_finite() {
            return Err(field_err("image", "non-finite pixel values"));
        }
        match (req.mode.takes_caption(), &req.caption) {
            (false, Some(_)) => return Err(field_err("caption", format!("{} mode takes no caption", req.mode.as_str()))),
            (true, None) => return Err(field_err("caption", format!("{} mode needs a caption", req.mode.as_str()))),
            (true, Some(cap)) => {
                Label::from_caption(cap).map_err(|e| field_err("caption", e.to_string()))?;
            }
            (false, None) => {}
        }
        match (req.mode.takes_alpha(), req.alpha) {
            (false, Some(_)) => return Err(field_err("alpha", format!("{} mode takes no alpha", req.mode.as_str()))),
            (true, None) => return Err(field_err("alpha", "shape mode needs alpha")),
            (true, Some(a)) if !(0.0..=1.0).contains(&a) => {
                return Err(field_err("alpha", format!("alpha {a} outside [0, 1]")))
            }
            _ => {}
        }
        if req.negative.is_some() && req.mode != Mode::Object {
            return Err(field_err("negative", "only object mode takes a negative prompt choice"));
        }
        let w = req.w.unwrap_or(req.mode.default_w());
        if !w.is_finite() || w < 0.0 {
            return Err(field_err("w", format!("guidance scale must be finite and non-negative, got {w}")));
        }
        let steps = req.steps.unwrap_or(DEFAULT_STEPS);
        if steps == 0 || steps > self.schedule.len() {
            return Err(field_err("steps", format!("steps must lie in 1..={}", self.schedule.len())));
        }
        Ok(RequestEcho {
            mode: req.mode,
            caption: req.caption.clone(),
            alpha: req.alpha,
            w,
            steps,
            seed: req.seed,
            negative: if req.mode == Mode::Object {
                Some(req.negative.unwrap_or_default())
            } else {
                None
            },
            sampler: req.sampler.unwrap_or_default(),
        })
    }

    /// Positive/negative conditioning for a mode.
    pub fn guidance_for(&self, echo: &RequestEcho) -> Result<GuidanceSpec> {
        use TaskPromptName::*;
        let caption = echo.caption.as_deref();
        let (pos, neg) = match echo.mode {
            Mode::Context => (self.embed_task(None, Ctxt, ComposeMode::Alone)?, self.embed_empty()?),
            Mode::Removal => (
                self.embed_task(None, Ctxt, ComposeMode::Alone)?,
                self.embed_task(None, Obj, ComposeMode::Suffix)?,
            ),
            Mode::Object => {
                let neg = match echo.negative.unwrap_or_default() {
                    ObjectNegative::Empty => self.embed_empty()?,
                    ObjectNegative::PCtxt => self.embed_task(None, Ctxt, ComposeMode::Alone)?,
                };
                (self.embed_task(caption, Obj, ComposeMode::Suffix)?, neg)
            }
            Mode::Shape => (
                self.model.embed_shape(&self.params, caption.unwrap_or(""), echo.alpha.unwrap_or(1.0))?,
                self.embed_empty()?,
            ),
        };
        GuidanceSpec::new(pos, neg, echo.w)
    }

    pub fn inpaint(&self, req: &InpaintRequest) -> Result<InpaintResult> {
        let echo = self.validate(req)?;
        let guidance = self.guidance_for(&echo)?;
        let job = Job {
            image: req.image.clone(),
            mask: req.mask.clone(),
            guidance,
            seed: echo.seed,
        };
        let image = sample_batch(&self.frozen(), &self.schedule, &[job], echo.steps, echo.sampler)?
            .pop()
            .expect("one job in, one image out");
        Ok(InpaintResult {
            image,
            metadata: InpaintMetadata {
                request: echo,
                checkpoint_id: self.checkpoint_id.clone(),
            },
        })
    }

    /// Inpaints under an explicit guidance spec, bypassing mode defaults.
    pub fn inpaint_with_guidance(
        &self,
        image: &Tensor<f32>,
        mask: &Mask,
        guidance: GuidanceSpec,
        steps: usize,
        seed: u64,
    ) -> Result<Tensor<f32>> {
        let job = Job {
            image: image.clone(),
            mask: mask.clone(),
            guidance,
            seed,
        };
        Ok(sample_batch(&self.frozen(), &self.schedule, &[job], steps, SamplerKind::Ddim)?
            .pop()
            .expect("one job"))
    }

    /// Many jobs at once, `chunk` images per network batch.
    pub fn inpaint_jobs(&self, jobs: &[Job], steps: usize, chunk: usize) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(jobs.len());
        for part in jobs.chunks(chunk.max(1)) {
            out.extend(sample_batch(&self.frozen(), &self.schedule, part, steps, SamplerKind::Ddim)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{add_noise_at, build_schedule, ScheduleKind};

    /// Returns a fixed linear map of the conditioning so that guidance
    /// arithmetic can be checked exactly.
    struct Linear;

    impl NoisePredictor for Linear {
        fn predict(&self, x_in: &Tensor<f32>, _t: usize, cond: &[&TextEmbedding]) -> Result<Tensor<f32>> {
            let b = x_in.shape()[0];
            let (h, w) = (x_in.shape()[1], x_in.shape()[2]);
            let mut out = Vec::new();
            for (i, c) in cond.iter().enumerate().take(b) {
                let s: f32 = c.values().data().iter().sum();
                for p in 0..h * w {
                    for ch in 0..3 {
                        out.push(s * (1.0 + ch as f32) + x_in.data()[(i * h * w + p) * 7 + ch]);
                    }
                }
            }
            Ok(Tensor::new(&[b, h, w, 3], out)?)
        }
    }

    fn emb(v: f32) -> TextEmbedding {
        TextEmbedding::new(Tensor::full(&[2, 2], v)).unwrap()
    }

    fn x_in() -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Tensor::randn(&[2, 2, 7], 1.0, &mut rng)
    }

    #[test]
    fn guidance_endpoints_and_linearity() {
        let x = x_in();
        let run = |w: f64| guided_noise(&Linear, &x, 10, &GuidanceSpec::new(emb(0.3), emb(-0.2), w).unwrap()).unwrap();
        let pos = run(1.0);
        let neg = run(0.0);
        let single = |v: f32| {
            let x4 = x.clone().reshape(&[1, 2, 2, 7]).unwrap();
            Linear.predict(&x4, 10, &[&emb(v)]).unwrap().reshape(&[2, 2, 3]).unwrap()
        };
        assert_eq!(pos, single(0.3));
        assert_eq!(neg, single(-0.2));
        let two = run(2.0);
        for ((a, p), n) in two.data().iter().zip(pos.data()).zip(neg.data()) {
            assert!((a - (2.0 * p - n)).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_prompts_cancel_guidance() {
        let x = x_in();
        let base = guided_noise(&Linear, &x, 3, &GuidanceSpec::new(emb(0.1), emb(0.1), 1.0).unwrap()).unwrap();
        for w in [0.0, 0.5, 3.0, 7.5] {
            let g = guided_noise(&Linear, &x, 3, &GuidanceSpec::new(emb(0.1), emb(0.1), w).unwrap()).unwrap();
            for (a, b) in g.data().iter().zip(base.data()) {
                assert!((a - b).abs() < 1e-5, "w={w}");
            }
        }
    }

    #[test]
    fn mismatched_embeddings_are_rejected() {
        let bad = TextEmbedding::new(Tensor::zeros(&[3, 2])).unwrap();
        assert!(GuidanceSpec::new(emb(0.0), bad, 1.0).is_err());
        assert!(GuidanceSpec::new(emb(0.0), emb(0.0), f64::NAN).is_err());
    }

    #[test]
    fn strided_timesteps_cover_the_schedule() {
        let ts = strided_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 999);
        assert_eq!(*ts.last().unwrap(), 19);
        assert!(ts.windows(2).all(|w| w[0] - w[1] == 20));
        assert_eq!(strided_timesteps(1000, 1000).unwrap()[999], 0);
        assert!(strided_timesteps(1000, 0).is_err());
    }

    #[test]
    fn true_noise_recovers_x0() {
        let sched = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::<f32>::randn(&[4, 4, 3], 0.5, &mut rng).map(|v| v.clamp(-1.0, 1.0));
        let eps = Tensor::<f32>::randn(&[4, 4, 3], 1.0, &mut rng);
        for t in [0, 100, 500] {
            let ab = sched.alpha_bar(t);
            let xt = add_noise_at(&x0, &eps, ab).unwrap();
            let r = denoise_step(&xt, &eps, ab, 1.0, SamplerKind::Ddim, &mut rng).unwrap();
            for (a, b) in r.x0_pred.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-5 / ab.sqrt() as f32 * 4.0, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn deterministic_step_repeats_and_stays_finite() {
        let sched = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::randn(&[4, 4, 3], 1.0, &mut rng);
        let e = Tensor::<f32>::randn(&[4, 4, 3], 1.0, &mut rng);
        let a = denoise_step(&x, &e, sched.alpha_bar(0), 1.0, SamplerKind::Ddim, &mut rng).unwrap();
        let b = denoise_step(&x, &e, sched.alpha_bar(0), 1.0, SamplerKind::Ddim, &mut rng).unwrap();
        assert_eq!(a.x_prev, b.x_prev);
        assert!(a.x_prev.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        let c = denoise_step(&x, &e, sched.alpha_bar(400), sched.alpha_bar(380), SamplerKind::Ancestral, &mut rng).unwrap();
        assert!(c.x_prev.all_finite());
    }

    #[test]
    fn blending_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f32>::randn(&[3, 3, 3], 1.0, &mut rng);
        let x0 = Tensor::<f32>::randn(&[3, 3, 3], 0.5, &mut rng);
        assert_eq!(blend_known(&x, &x0, &Mask::full(3, 3), 0.3, &mut rng).unwrap(), x);
        assert_eq!(blend_known(&x, &x0, &Mask::empty(3, 3), 1.0, &mut rng).unwrap(), x0);
        let m = Mask::from_fn(3, 3, |y, _| y == 1);
        let out = composite(&x, &x0, &m).unwrap();
        for p in 0..9 {
            let src = if p / 3 == 1 { &x } else { &x0 };
            assert_eq!(&out.data()[p * 3..p * 3 + 3], &src.data()[p * 3..p * 3 + 3]);
        }
    }

    #[test]
    fn sampled_batch_keeps_known_pixels() {
        let sched = build_schedule(100, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = Tensor::<f32>::randn(&[4, 4, 3], 0.5, &mut rng).map(|v| v.clamp(-1.0, 1.0));
        let m = Mask::from_fn(4, 4, |y, x| y < 2 && x < 3);
        let job = Job {
            image: img.clone(),
            mask: m.clone(),
            guidance: GuidanceSpec::new(emb(0.01), emb(0.0), 2.0).unwrap(),
            seed: 1,
        };
        let a = sample_batch(&Linear, &sched, &[job.clone(), job.clone()], 10, SamplerKind::Ddim).unwrap();
        assert_eq!(a[0], a[1]);
        for p in 0..16 {
            if !m.bits()[p] {
                assert_eq!(&a[0].data()[p * 3..p * 3 + 3], &img.data()[p * 3..p * 3 + 3]);
            }
        }
    }
}
