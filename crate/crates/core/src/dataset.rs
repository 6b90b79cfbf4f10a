//! Synthetic shapes corpus and per-example task routing.
//!
//! Scenes hold one or two flat-coloured shapes over a neutral gray
//! background. Every training example is routed to one of four tasks; each
//! task fixes how its mask and prompt are built.

use std::fs;
use std::io::Write;
use std::path::Path;

use promptpaint_autograd::Tensor;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imageio;
use crate::maskgen::{bbox_mask, random_freeform_mask, BBox, BrushParams, Mask, MaskPair};
use crate::model::Conditioning;
use crate::textcond::{compose_prompt, tokenize, ComposeMode, PromptTokens, TaskPromptName, Vocabulary};
use crate::{Error, Result};

/// Seeds at or above this value are reserved for the held-out split.
pub const EVAL_SEED_BASE: u64 = 1 << 63;
pub const EVAL_SCENES: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [Self::Circle, Self::Square, Self::Triangle];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
        }
    }

    /// Whether the pixel centre offset `(dy, dx)` from the shape centre lies
    /// inside a shape of radius `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Self::Circle => dy * dy + dx * dx <= r * r,
            Self::Square => {
                let h = 0.8 * r;
                dy.abs() <= h && dx.abs() <= h
            }
            Self::Triangle => {
                // apex up, base at 0.8r below the centre
                let base = 0.8 * r;
                if dy < -r || dy > base {
                    return false;
                }
                let half_width = r * (dy + r) / (base + r);
                dx.abs() <= half_width
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorKind {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ColorKind {
    pub const ALL: [ColorKind; 4] = [Self::Red, Self::Green, Self::Blue, Self::Yellow];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
        }
    }

    /// Rendered colour in `[-1, 1]` RGB.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Self::Red => [0.85, -0.75, -0.75],
            Self::Green => [-0.75, 0.7, -0.75],
            Self::Blue => [-0.75, -0.6, 0.85],
            Self::Yellow => [0.85, 0.8, -0.8],
        }
    }
}

/// One of the twelve (shape, colour) pairs, or background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Object(ShapeKind, ColorKind),
    Background,
}

impl Label {
    pub const COUNT: usize = 13;

    pub fn index(self) -> usize {
        match self {
            Label::Object(s, c) => s as usize * 4 + c as usize,
            Label::Background => 12,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0..=11 => Some(Label::Object(ShapeKind::ALL[i / 4], ColorKind::ALL[i % 4])),
            12 => Some(Label::Background),
            _ => None,
        }
    }

    pub fn from_caption(caption: &str) -> Result<Label> {
        let words: Vec<&str> = caption.split_whitespace().collect();
        let bad = || Error::Prompt(format!("`{caption}` is not a caption of the form `a <color> <shape>`"));
        if words.len() != 3 || words[0] != "a" {
            return Err(bad());
        }
        let color = ColorKind::ALL.into_iter().find(|c| c.as_str() == words[1]).ok_or_else(bad)?;
        let shape = ShapeKind::ALL.into_iter().find(|s| s.as_str() == words[2]).ok_or_else(bad)?;
        Ok(Label::Object(shape, color))
    }

    pub fn caption(self) -> Option<String> {
        match self {
            Label::Object(s, c) => Some(format!("a {} {}", c.as_str(), s.as_str())),
            Label::Background => None,
        }
    }
}

/// Neutral gray tones a background may use.
pub const BACKGROUND_TONES: [f32; 4] = [-0.45, -0.15, 0.1, 0.35];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    Solid { tone: usize },
    VerticalGradient { top: usize, bottom: usize },
}

impl Background {
    fn value(&self, y: usize, h: usize) -> f32 {
        match *self {
            Background::Solid { tone } => BACKGROUND_TONES[tone],
            Background::VerticalGradient { top, bottom } => {
                let f = if h > 1 { y as f32 / (h - 1) as f32 } else { 0.0 };
                BACKGROUND_TONES[top] * (1.0 - f) + BACKGROUND_TONES[bottom] * f
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: ColorKind,
    pub segmentation: Mask,
    pub bbox: BBox,
}

impl SceneObject {
    pub fn label(&self) -> Label {
        Label::Object(self.shape, self.color)
    }

    pub fn caption(&self) -> String {
        format!("a {} {}", self.color.as_str(), self.shape.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub size: usize,
    pub radius_min: usize,
    pub radius_max: usize,
    pub two_object_prob: f64,
    pub gradient_prob: f64,
    /// Minimum empty gap between object boxes, in pixels.
    pub gap: usize,
    pub max_tries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 32,
            radius_min: 4,
            radius_max: 10,
            two_object_prob: 0.5,
            gradient_prob: 0.5,
            gap: 2,
            max_tries: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor<f32>,
    pub background: Background,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn size(&self) -> usize {
        self.image.shape()[0]
    }

    /// The scene re-rendered without object `index`.
    pub fn without(&self, index: usize) -> Tensor<f32> {
        let keep: Vec<&SceneObject> = self
            .objects
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != index)
            .map(|(_, o)| o)
            .collect();
        render(self.size(), &self.background, &keep)
    }

    /// The background alone.
    pub fn background_image(&self) -> Tensor<f32> {
        render(self.size(), &self.background, &[])
    }
}

fn render(size: usize, bg: &Background, objects: &[&SceneObject]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let v = bg.value(y, size);
        for _ in 0..size {
            data.extend_from_slice(&[v, v, v]);
        }
    }
    for o in objects {
        let rgb = o.color.rgb();
        for (p, &on) in o.segmentation.bits().iter().enumerate() {
            if on {
                data[p * 3..p * 3 + 3].copy_from_slice(&rgb);
            }
        }
    }
    Tensor::new(&[size, size, 3], data).expect("scene buffer")
}

fn place<R: Rng + ?Sized>(rng: &mut R, spec: &SceneSpec, shape: ShapeKind) -> (Mask, BBox) {
    let r = rng.random_range(spec.radius_min..=spec.radius_max);
    let lo = r;
    let hi = spec.size - r;
    let cy = rng.random_range(lo..=hi) as f64;
    let cx = rng.random_range(lo..=hi) as f64;
    let rf = r as f64;
    let m = Mask::from_fn(spec.size, spec.size, |y, x| {
        shape.contains(y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, rf)
    });
    let bbox = m.tight_bbox().expect("radius ≥ 1 covers a pixel centre");
    (m, bbox)
}

/// Draws a scene; identical rng states give identical scenes.
pub fn generate_scene<R: Rng + ?Sized>(rng: &mut R, spec: &SceneSpec) -> Result<Scene> {
    if spec.radius_min == 0 || spec.radius_min > spec.radius_max || 2 * spec.radius_max > spec.size {
        return Err(Error::Config(format!(
            "radius range {}..={} does not fit a {} frame",
            spec.radius_min, spec.radius_max, spec.size
        )));
    }
    let background = if rng.random_bool(spec.gradient_prob) {
        let top = rng.random_range(0..BACKGROUND_TONES.len());
        let mut bottom = rng.random_range(0..BACKGROUND_TONES.len() - 1);
        if bottom >= top {
            bottom += 1;
        }
        Background::VerticalGradient { top, bottom }
    } else {
        Background::Solid {
            tone: rng.random_range(0..BACKGROUND_TONES.len()),
        }
    };
    let count = if rng.random_bool(spec.two_object_prob) { 2 } else { 1 };
    let kinds: Vec<(ShapeKind, ColorKind)> = (0..count)
        .map(|_| {
            let shape = *ShapeKind::ALL.choose(rng).expect("non-empty");
            (shape, *ColorKind::ALL.choose(rng).expect("non-empty"))
        })
        .collect();
    // every attempt re-places all objects, so a large first object cannot
    // leave the second without room
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for _ in 0..spec.max_tries {
        objects.clear();
        for &(shape, color) in &kinds {
            let (segmentation, bbox) = place(rng, spec, shape);
            if !objects.iter().all(|o| o.bbox.separated_from(&bbox, spec.gap)) {
                break;
            }
            objects.push(SceneObject {
                shape,
                color,
                segmentation,
                bbox,
            });
        }
        if objects.len() == count {
            break;
        }
    }
    if objects.len() != count {
        return Err(Error::Placement(spec.max_tries));
    }
    let refs: Vec<&SceneObject> = objects.iter().collect();
    let image = render(spec.size, &background, &refs);
    Ok(Scene {
        image,
        background,
        objects,
    })
}

pub fn scene_from_seed(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    generate_scene(&mut ChaCha8Rng::seed_from_u64(seed), spec)
}

/// Seed of held-out scene `index`.
pub fn eval_seed(index: usize) -> u64 {
    EVAL_SEED_BASE + index as u64
}

/// Seed of training scene `slot` drawn at `step` of a run; always below
/// [`EVAL_SEED_BASE`].
pub fn train_seed(run_seed: u64, step: u64, slot: usize) -> u64 {
    let mut h = run_seed ^ 0x5851_F42D_4C95_7F2D;
    for v in [step, slot as u64] {
        h = (h ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h ^= h >> 31;
    }
    h & (EVAL_SEED_BASE - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Ctxt,
    Obj,
    Shape,
    T2i,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Ctxt, Task::Obj, Task::Shape, Task::T2i];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ctxt => "ctxt",
            Task::Obj => "obj",
            Task::Shape => "shape",
            Task::T2i => "t2i",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingConfig {
    pub t2i_prob: f64,
    /// Relative weights of ctxt, obj and shape within the remaining budget.
    pub main_weights: [f64; 3],
    pub kernel_sizes: Vec<usize>,
    pub max_iterations: usize,
    pub min_alpha: f64,
    pub brush: BrushParams,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            t2i_prob: 0.2,
            main_weights: [1.0, 1.0, 1.0],
            kernel_sizes: vec![3, 5],
            max_iterations: 6,
            min_alpha: 0.05,
            brush: BrushParams::default(),
        }
    }
}

pub fn route_task<R: Rng + ?Sized>(rng: &mut R, cfg: &RoutingConfig) -> Task {
    if rng.random_bool(cfg.t2i_prob) {
        return Task::T2i;
    }
    let total: f64 = cfg.main_weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in cfg.main_weights.iter().enumerate() {
        if u < *w {
            return [Task::Ctxt, Task::Obj, Task::Shape][i];
        }
        u -= w;
    }
    Task::Shape
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub image: Tensor<f32>,
    pub mask: Mask,
    pub task: Task,
    /// Primary prompt: P_ctxt alone, caption+P_obj, caption+P_shape or the
    /// plain caption.
    pub prompt_tokens: PromptTokens,
    /// For the shape task, caption+P_ctxt, blended with `prompt_tokens` at
    /// weight `alpha`.
    pub partner_tokens: Option<PromptTokens>,
    pub alpha: Option<f64>,
    pub caption: Option<String>,
    pub bbox: Option<BBox>,
    pub kernel_size: Option<usize>,
    pub iterations: Option<usize>,
}

impl TrainingExample {
    pub fn conditioning(&self) -> Conditioning {
        match (&self.partner_tokens, self.alpha) {
            (Some(ctxt), Some(alpha)) => Conditioning::Mix {
                first: ctxt.clone(),
                second: self.prompt_tokens.clone(),
                alpha,
            },
            _ => Conditioning::Tokens(self.prompt_tokens.clone()),
        }
    }
}

/// Dilates an object's segmentation with a random `(k, it)`, stepping `it`
/// down until the fitting ratio reaches `min_alpha`.
pub fn random_shape_mask<R: Rng + ?Sized>(segmentation: &Mask, rng: &mut R, cfg: &RoutingConfig) -> Result<MaskPair> {
    let k = *cfg
        .kernel_sizes
        .choose(rng)
        .ok_or_else(|| Error::Config("no dilation kernel sizes configured".into()))?;
    let mut it = rng.random_range(0..=cfg.max_iterations);
    loop {
        let pair = MaskPair::expand(segmentation.clone(), k, it)?;
        if pair.alpha >= cfg.min_alpha || it == 0 {
            return Ok(pair);
        }
        it -= 1;
    }
}

pub fn make_training_example<R: Rng + ?Sized>(
    scene: &Scene,
    rng: &mut R,
    vocab: &Vocabulary,
    cfg: &RoutingConfig,
) -> Result<TrainingExample> {
    let task = route_task(rng, cfg);
    let (h, w) = (scene.size(), scene.size());
    let obj = scene.objects.choose(rng).expect("scenes hold at least one object");
    let mut ex = TrainingExample {
        image: scene.image.clone(),
        mask: Mask::full(h, w),
        task,
        prompt_tokens: tokenize("", vocab)?,
        partner_tokens: None,
        alpha: None,
        caption: None,
        bbox: None,
        kernel_size: None,
        iterations: None,
    };
    match task {
        Task::Ctxt => {
            ex.mask = random_freeform_mask(h, w, rng, &cfg.brush)?;
            ex.prompt_tokens = compose_prompt(vocab, None, TaskPromptName::Ctxt, ComposeMode::Alone)?;
        }
        Task::Obj => {
            let caption = obj.caption();
            ex.mask = bbox_mask(obj.bbox, h, w)?;
            ex.prompt_tokens = compose_prompt(vocab, Some(&caption), TaskPromptName::Obj, ComposeMode::Suffix)?;
            ex.bbox = Some(obj.bbox);
            ex.caption = Some(caption);
        }
        Task::Shape => {
            let caption = obj.caption();
            let pair = random_shape_mask(&obj.segmentation, rng, cfg)?;
            ex.prompt_tokens = compose_prompt(vocab, Some(&caption), TaskPromptName::Shape, ComposeMode::Suffix)?;
            ex.partner_tokens = Some(compose_prompt(vocab, Some(&caption), TaskPromptName::Ctxt, ComposeMode::Suffix)?);
            ex.alpha = Some(pair.alpha);
            ex.kernel_size = Some(pair.kernel_size);
            ex.iterations = Some(pair.iterations);
            ex.mask = pair.dilated;
            ex.bbox = Some(obj.bbox);
            ex.caption = Some(caption);
        }
        Task::T2i => {
            let caption = obj.caption();
            ex.prompt_tokens = tokenize(&caption, vocab)?;
            ex.caption = Some(caption);
        }
    }
    Ok(ex)
}

/// One line of an exported corpus manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub caption: Option<String>,
    pub task: Task,
    pub bbox: Option<BBox>,
    pub k: Option<usize>,
    pub it: Option<usize>,
    pub alpha: Option<f64>,
    pub seed: u64,
}

/// Writes `count` routed examples as PNG files plus `manifest.jsonl`.
/// Example `i` uses scene seed `train_seed(seed, 0, i)`.
pub fn export_corpus(
    dir: &Path,
    count: usize,
    seed: u64,
    spec: &SceneSpec,
    routing: &RoutingConfig,
    vocab: &Vocabulary,
) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = fs::File::create(dir.join("manifest.jsonl"))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let scene_seed = train_seed(seed, 0, i);
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
        let scene = generate_scene(&mut rng, spec)?;
        let ex = make_training_example(&scene, &mut rng, vocab, routing)?;
        let id = format!("{i:06}");
        let image_path = format!("images/{id}.png");
        let mask_path = format!("masks/{id}.png");
        imageio::save_rgb(&dir.join(&image_path), &ex.image)?;
        imageio::save_mask(&dir.join(&mask_path), &ex.mask)?;
        let entry = ManifestEntry {
            id,
            image_path,
            mask_path,
            caption: ex.caption.clone(),
            task: ex.task,
            bbox: ex.bbox,
            k: ex.kernel_size,
            it: ex.iterations,
            alpha: ex.alpha,
            seed: scene_seed,
        };
        serde_json::to_writer(&mut manifest, &entry)?;
        manifest.write_all(b"\n")?;
        entries.push(entry);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcond::TaskPromptRegistry;

    fn vocab() -> Vocabulary {
        let mut reg = TaskPromptRegistry::new(4);
        for (i, n) in TaskPromptName::ALL.iter().enumerate() {
            reg.register(*n, 10, i as u64).unwrap();
        }
        Vocabulary::new(&reg, 24).unwrap()
    }

    #[test]
    fn seeded_scenes_repeat() {
        let spec = SceneSpec::default();
        assert_eq!(scene_from_seed(7, &spec).unwrap(), scene_from_seed(7, &spec).unwrap());
        assert_ne!(scene_from_seed(7, &spec).unwrap(), scene_from_seed(8, &spec).unwrap());
    }

    #[test]
    fn two_object_scenes_are_disjoint() {
        let spec = SceneSpec {
            two_object_prob: 1.0,
            ..SceneSpec::default()
        };
        for s in 0..300 {
            let sc = scene_from_seed(s, &spec).unwrap();
            assert_eq!(sc.objects.len(), 2);
            let i = sc.objects[0].segmentation.intersection(&sc.objects[1].segmentation).unwrap();
            assert!(i.is_empty());
        }
    }

    #[test]
    fn labels_round_trip() {
        for i in 0..Label::COUNT {
            let l = Label::from_index(i).unwrap();
            assert_eq!(l.index(), i);
            if let Some(c) = l.caption() {
                assert_eq!(Label::from_caption(&c).unwrap(), l);
            }
        }
        assert!(Label::from_caption("a mauve circle").is_err());
    }

    #[test]
    fn removal_render_keeps_other_object() {
        let spec = SceneSpec {
            two_object_prob: 1.0,
            ..SceneSpec::default()
        };
        let sc = scene_from_seed(3, &spec).unwrap();
        let without = sc.without(0);
        let other = &sc.objects[1];
        for p in 0..32 * 32 {
            let on0 = sc.objects[0].segmentation.bits()[p];
            let same = (0..3).all(|c| without.data()[p * 3 + c] == sc.image.data()[p * 3 + c]);
            assert_eq!(same, !on0, "pixel {p}");
            if other.segmentation.bits()[p] {
                assert_eq!(without.data()[p * 3], other.color.rgb()[0]);
            }
        }
    }

    #[test]
    fn shape_without_expansion_is_exact() {
        let v = vocab();
        let cfg = RoutingConfig {
            max_iterations: 0,
            t2i_prob: 0.0,
            main_weights: [0.0, 0.0, 1.0],
            ..RoutingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in 0..20 {
            let sc = scene_from_seed(s, &SceneSpec::default()).unwrap();
            let ex = make_training_example(&sc, &mut rng, &v, &cfg).unwrap();
            assert_eq!(ex.task, Task::Shape);
            assert_eq!(ex.alpha, Some(1.0));
            assert!(sc.objects.iter().any(|o| o.segmentation == ex.mask));
        }
    }

    #[test]
    fn ctxt_prompts_hold_no_caption_words() {
        let v = vocab();
        let cfg = RoutingConfig {
            t2i_prob: 0.0,
            main_weights: [1.0, 0.0, 0.0],
            ..RoutingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sc = scene_from_seed(0, &SceneSpec::default()).unwrap();
        for _ in 0..20 {
            let ex = make_training_example(&sc, &mut rng, &v, &cfg).unwrap();
            assert_eq!(ex.task, Task::Ctxt);
            let words = ex.prompt_tokens.render(&v).unwrap();
            for w in &words {
                assert!(w.starts_with('<'), "caption token {w} in a context prompt");
            }
        }
    }

    #[test]
    fn train_and_eval_seeds_are_disjoint() {
        for step in 0..100 {
            for slot in 0..64 {
                assert!(train_seed(9, step, slot) < EVAL_SEED_BASE);
            }
        }
        assert!(eval_seed(0) >= EVAL_SEED_BASE);
    }

    #[test]
    fn export_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let v = vocab();
        let entries = export_corpus(dir.path(), 6, 1, &SceneSpec::default(), &RoutingConfig::default(), &v).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 6);
        let first: ManifestEntry = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first, entries[0]);
        let m = imageio::load_mask(&dir.path().join(&first.mask_path)).unwrap();
        assert!(!m.is_empty());
    }
}
