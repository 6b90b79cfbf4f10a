//! Inpainting masks: free-form strokes, boxes, dilation and the fitting ratio.

use promptpaint_autograd::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Binary grid, `true` marks a pixel to inpaint.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Mask {}x{} area {}", self.h, self.w, self.area())?;
        for y in 0..self.h {
            let row: String = (0..self.w).map(|x| if self.get(y, x) { '#' } else { '.' }).collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

/// Axis-aligned box with exclusive upper bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    /// True if the boxes share no pixel and are separated by at least `gap`.
    pub fn separated_from(&self, other: &BBox, gap: usize) -> bool {
        self.x1 + gap <= other.x0
            || other.x1 + gap <= self.x0
            || self.y1 + gap <= other.y0
            || other.y1 + gap <= self.y0
    }
}

impl Mask {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![true; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                bits.push(f(y, x));
            }
        }
        Self { h, w, bits }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::Shape(format!("{} bits for a {h}x{w} mask", bits.len())));
        }
        Ok(Self { h, w, bits })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn coverage(&self) -> f64 {
        self.area() as f64 / (self.h * self.w) as f64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn same_grid(&self, other: &Mask) -> Result<()> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::Shape(format!(
                "mask grids differ: {}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.h == other.h && self.w == other.w && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.same_grid(other)?;
        Ok(Mask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask> {
        self.same_grid(other)?;
        Ok(Mask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        })
    }

    /// Intersection over union; two empty masks count as a perfect match.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        self.same_grid(other)?;
        let (mut inter, mut uni) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            uni += (a || b) as usize;
        }
        Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
    }

    pub fn inverted(&self) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// Tight box around the set pixels, `None` for an empty mask.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let mut bb: Option<BBox> = None;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    let b = bb.get_or_insert(BBox {
                        x0: x,
                        y0: y,
                        x1: x + 1,
                        y1: y + 1,
                    });
                    b.x0 = b.x0.min(x);
                    b.y0 = b.y0.min(y);
                    b.x1 = b.x1.max(x + 1);
                    b.y1 = b.y1.max(y + 1);
                }
            }
        }
        bb
    }

    /// Shifted copy; pixels pushed off the grid are dropped.
    pub fn translated(&self, dy: isize, dx: isize) -> Mask {
        let mut out = Mask::empty(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.get(y, x) {
                    continue;
                }
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < self.h && (nx as usize) < self.w {
                    out.set(ny as usize, nx as usize, true);
                }
            }
        }
        out
    }

    /// `[h, w, 1]` tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            &[self.h, self.w, 1],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dimensions")
    }
}

pub fn bbox_mask(bbox: BBox, h: usize, w: usize) -> Result<Mask> {
    if bbox.x0 >= bbox.x1 || bbox.y0 >= bbox.y1 || bbox.x1 > w || bbox.y1 > h {
        return Err(Error::Mask(format!("box {bbox:?} is degenerate or outside {h}x{w}")));
    }
    Ok(Mask::from_fn(h, w, |y, x| {
        y >= bbox.y0 && y < bbox.y1 && x >= bbox.x0 && x < bbox.x1
    }))
}

/// `it` rounds of dilation with a `k × k` all-ones structuring element,
/// computed as a box convolution thresholded at zero. Pixels beyond the
/// border are treated as unset.
pub fn dilate(m: &Mask, k: usize, it: usize) -> Result<Mask> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Mask(format!("dilation kernel must be odd and positive, got {k}")));
    }
    let r = k / 2;
    let (h, w) = (m.h, m.w);
    let mut cur = m.clone();
    let mut rows = vec![0u32; h * w];
    for _ in 0..it {
        if r == 0 {
            break;
        }
        // horizontal box count
        for y in 0..h {
            let mut prefix = vec![0u32; w + 1];
            for x in 0..w {
                prefix[x + 1] = prefix[x] + cur.get(y, x) as u32;
            }
            for x in 0..w {
                let lo = x.saturating_sub(r);
                let hi = (x + r + 1).min(w);
                rows[y * w + x] = prefix[hi] - prefix[lo];
            }
        }
        // vertical box count over the horizontal counts
        let mut next = Mask::empty(h, w);
        for x in 0..w {
            let mut prefix = vec![0u32; h + 1];
            for y in 0..h {
                prefix[y + 1] = prefix[y] + rows[y * w + x];
            }
            for y in 0..h {
                let lo = y.saturating_sub(r);
                let hi = (y + r + 1).min(h);
                next.set(y, x, prefix[hi] - prefix[lo] > 0);
            }
        }
        cur = next;
    }
    Ok(cur)
}

/// Area of the exact segmentation over the area of its expanded mask.
/// Equals 1 exactly when the two masks coincide.
pub fn fitting_ratio(original: &Mask, dilated: &Mask) -> Result<f64> {
    original.same_grid(dilated)?;
    let area = dilated.area();
    if area == 0 {
        return Err(Error::Mask("fitting ratio of an empty dilated mask".into()));
    }
    if !original.is_subset_of(dilated) {
        return Err(Error::Mask("original mask is not contained in the dilated mask".into()));
    }
    Ok(original.area() as f64 / area as f64)
}

/// An object segmentation together with its randomly expanded mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub original: Mask,
    pub dilated: Mask,
    pub kernel_size: usize,
    pub iterations: usize,
    pub alpha: f64,
}

impl MaskPair {
    pub fn expand(original: Mask, kernel_size: usize, iterations: usize) -> Result<Self> {
        let dilated = dilate(&original, kernel_size, iterations)?;
        let alpha = fitting_ratio(&original, &dilated)?;
        Ok(Self {
            original,
            dilated,
            kernel_size,
            iterations,
            alpha,
        })
    }
}

/// Bounds for the random brush-stroke generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrushParams {
    pub strokes: (usize, usize),
    pub width: (f64, f64),
    pub walk_length: (usize, usize),
    pub step_length: (f64, f64),
    pub rect_prob: f64,
    pub coverage: (f64, f64),
    pub max_tries: usize,
}

impl Default for BrushParams {
    fn default() -> Self {
        Self {
            strokes: (1, 4),
            width: (2.0, 8.0),
            walk_length: (4, 20),
            step_length: (1.0, 3.0),
            rect_prob: 0.3,
            coverage: (0.05, 0.50),
            max_tries: 100,
        }
    }
}

/// Random multi-stroke brush mask, optionally with one rectangle, whose
/// coverage lies inside `params.coverage`.
pub fn random_freeform_mask<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R, params: &BrushParams) -> Result<Mask> {
    for _ in 0..params.max_tries {
        let m = draw_strokes(h, w, rng, params);
        let cov = m.coverage();
        if cov >= params.coverage.0 && cov <= params.coverage.1 {
            return Ok(m);
        }
    }
    Err(Error::Mask(format!(
        "no brush mask within coverage {:?} after {} tries",
        params.coverage, params.max_tries
    )))
}

fn draw_strokes<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R, p: &BrushParams) -> Mask {
    let mut m = Mask::empty(h, w);
    let strokes = rng.random_range(p.strokes.0..=p.strokes.1);
    for _ in 0..strokes {
        let radius = rng.random_range(p.width.0..=p.width.1) / 2.0;
        let mut py = rng.random_range(0.0..h as f64);
        let mut px = rng.random_range(0.0..w as f64);
        let mut angle = rng.random_range(0.0..std::f64::consts::TAU);
        stamp_disk(&mut m, py, px, radius);
        let steps = rng.random_range(p.walk_length.0..=p.walk_length.1);
        for _ in 0..steps {
            angle += rng.random_range(-0.9..0.9);
            let len = rng.random_range(p.step_length.0..=p.step_length.1);
            let (ny, nx) = (
                (py + len * angle.sin()).clamp(0.0, h as f64 - 1.0),
                (px + len * angle.cos()).clamp(0.0, w as f64 - 1.0),
            );
            let n = (len * 2.0).ceil().max(1.0) as usize;
            for i in 1..=n {
                let f = i as f64 / n as f64;
                stamp_disk(&mut m, py + (ny - py) * f, px + (nx - px) * f, radius);
            }
            py = ny;
            px = nx;
        }
    }
    if rng.random_bool(p.rect_prob) {
        let rh = rng.random_range(2..=(h / 2).max(2));
        let rw = rng.random_range(2..=(w / 2).max(2));
        let y0 = rng.random_range(0..=h.saturating_sub(rh));
        let x0 = rng.random_range(0..=w.saturating_sub(rw));
        for y in y0..(y0 + rh).min(h) {
            for x in x0..(x0 + rw).min(w) {
                m.set(y, x, true);
            }
        }
    }
    m
}

fn stamp_disk(m: &mut Mask, cy: f64, cx: f64, radius: f64) {
    let r2 = radius * radius;
    let y_lo = (cy - radius).floor().max(0.0) as usize;
    let y_hi = ((cy + radius).ceil() as usize).min(m.h - 1);
    let x_lo = (cx - radius).floor().max(0.0) as usize;
    let x_hi = ((cx + radius).ceil() as usize).min(m.w - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            if dy * dy + dx * dx <= r2 {
                m.set(y, x, true);
            }
        }
    }
}
