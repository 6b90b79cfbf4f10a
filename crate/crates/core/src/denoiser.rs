//! Noise-prediction network.
//!
//! A small U-Net on channels-last tensors. The input stacks the noisy image,
//! the masked image `x0·(1 − m)` and the mask itself, so it carries
//! `2·image_channels + 1` channels. A stride-`patch` stem folds pixels into
//! channels; each further level halves the resolution the same way.

use promptpaint_autograd::{Float, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{timestep_features, Attention, Conv3x3, GroupNorm, LayerNorm, Linear};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub base_width: usize,
    /// Width multiplier per level, finest first.
    pub channel_mult: Vec<usize>,
    /// Feature-map sizes that get cross-attention over the caption tokens.
    pub attention_resolutions: Vec<usize>,
    /// Feature-map sizes that additionally get self-attention.
    pub self_attention_resolutions: Vec<usize>,
    pub cond_dim: usize,
    pub time_embed_dim: usize,
    pub heads: usize,
    pub groups: usize,
    pub patch: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            image_channels: 3,
            base_width: 48,
            channel_mult: vec![1, 2],
            attention_resolutions: vec![16, 8],
            self_attention_resolutions: vec![8],
            cond_dim: 64,
            time_embed_dim: 128,
            heads: 4,
            groups: 8,
            patch: 2,
        }
    }
}

impl DenoiserConfig {
    /// Tiny configuration used by gradient checks.
    pub fn toy() -> Self {
        Self {
            image_size: 8,
            image_channels: 3,
            base_width: 8,
            channel_mult: vec![1, 2],
            attention_resolutions: vec![4, 2],
            self_attention_resolutions: vec![2],
            cond_dim: 8,
            time_embed_dim: 8,
            heads: 2,
            groups: 2,
            patch: 2,
        }
    }

    pub fn input_channels(&self) -> usize {
        2 * self.image_channels + 1
    }

    /// Total downsampling between the input and the coarsest level.
    pub fn downsample_factor(&self) -> usize {
        self.patch * (1usize << self.channel_mult.len().saturating_sub(1))
    }

    fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_mult[level]
    }

    fn resolution(&self, level: usize) -> usize {
        (self.image_size / self.patch) >> level
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_channels == 0 || self.base_width == 0 || self.cond_dim == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return bad(format!("bad channel multipliers {:?}", self.channel_mult));
        }
        if self.patch < 2 {
            return bad(format!("patch size {} must be at least 2", self.patch));
        }
        let f = self.downsample_factor();
        if self.image_size == 0 || !self.image_size.is_multiple_of(f) {
            return bad(format!(
                "image size {} is not divisible by the downsampling factor {f}",
                self.image_size
            ));
        }
        for l in 0..self.channel_mult.len() {
            let c = self.width(l);
            if !c.is_multiple_of(self.groups) {
                return bad(format!("width {c} not divisible into {} groups", self.groups));
            }
            if !c.is_multiple_of(self.heads) {
                return bad(format!("width {c} not divisible into {} heads", self.heads));
            }
        }
        if self.time_embed_dim < 2 {
            return bad("time embedding needs at least 2 features".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv3x3,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv3x3,
    skip: Option<Linear>,
}

impl ResBlock {
    fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &DenoiserConfig,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let in_groups = if c_in.is_multiple_of(cfg.groups) { cfg.groups } else { 1 };
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c_in, in_groups)?,
            conv1: Conv3x3::new(store, &format!("{name}.conv1"), c_in, c_out, rng)?,
            time: Linear::new(store, &format!("{name}.time"), cfg.time_embed_dim, c_out, true, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c_out, cfg.groups)?,
            conv2: Conv3x3::new(store, &format!("{name}.conv2"), c_out, c_out, rng)?,
            skip: if c_in != c_out {
                Some(Linear::new(store, &format!("{name}.skip"), c_in, c_out, false, rng)?)
            } else {
                None
            },
        })
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, h)?;
        let tb = self.time.forward(g, temb)?;
        let h = g.add_per_batch(h, tb)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, h)?;
        let s = match &self.skip {
            Some(l) => l.forward(g, x)?,
            None => x,
        };
        Ok(g.add(h, s)?)
    }
}

#[derive(Clone, Debug)]
struct AttnBlock {
    self_attn: Option<(LayerNorm, Attention)>,
    norm: LayerNorm,
    cross: Attention,
}

impl AttnBlock {
    fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &DenoiserConfig,
        c: usize,
        with_self: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let self_attn = if with_self {
            Some((
                LayerNorm::new(store, &format!("{name}.self_norm"), c)?,
                Attention::new(store, &format!("{name}.self"), c, c, cfg.heads, rng)?,
            ))
        } else {
            None
        };
        Ok(Self {
            self_attn,
            norm: LayerNorm::new(store, &format!("{name}.cross_norm"), c)?,
            cross: Attention::new(store, &format!("{name}.cross"), c, cfg.cond_dim, cfg.heads, rng)?,
        })
    }

    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, cond: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let mut s = g.reshape(x, &[b, h * w, c])?;
        if let Some((norm, attn)) = &self.self_attn {
            let n = norm.forward(g, s)?;
            let a = attn.forward(g, n, n)?;
            s = g.add(s, a)?;
        }
        let n = self.norm.forward(g, s)?;
        let a = self.cross.forward(g, n, cond)?;
        s = g.add(s, a)?;
        Ok(g.reshape(s, &[b, h, w, c])?)
    }
}

#[derive(Clone, Debug)]
struct Level {
    res: ResBlock,
    attn: Option<AttnBlock>,
}

impl Level {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, temb: Var, cond: Var) -> Result<Var> {
        let x = self.res.forward(g, x, temb)?;
        match &self.attn {
            Some(a) => a.forward(g, x, cond),
            None => Ok(x),
        }
    }
}

/// Parameter layout of the noise predictor; values live in a `ParamStore`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    stem: Linear,
    time1: Linear,
    time2: Linear,
    down: Vec<Level>,
    downsample: Vec<Linear>,
    mid: Level,
    up: Vec<Level>,
    upsample: Vec<Linear>,
    out_norm: GroupNorm,
    out: Linear,
}

impl Denoiser {
    /// Registers every parameter under the `unet.` prefix.
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch;
        let levels = cfg.channel_mult.len();
        let level = |store: &mut ParamStore<T>, rng: &mut R, name: String, l: usize, c_in: usize| -> Result<Level> {
            let c = cfg.width(l);
            let res = cfg.resolution(l);
            let attn = if cfg.attention_resolutions.contains(&res) {
                let with_self = cfg.self_attention_resolutions.contains(&res);
                Some(AttnBlock::new(store, &format!("{name}.attn"), cfg, c, with_self, rng)?)
            } else {
                None
            };
            Ok(Level {
                res: ResBlock::new(store, &format!("{name}.res"), cfg, c_in, c, rng)?,
                attn,
            })
        };

        let c0 = cfg.width(0);
        let stem = Linear::new(store, "unet.stem", p * p * cfg.input_channels(), c0, true, rng)?;
        let time1 = Linear::new(store, "unet.time1", cfg.time_embed_dim, cfg.time_embed_dim, true, rng)?;
        let time2 = Linear::new(store, "unet.time2", cfg.time_embed_dim, cfg.time_embed_dim, true, rng)?;

        let mut down = Vec::new();
        let mut downsample = Vec::new();
        for l in 0..levels {
            let c_in = if l == 0 { c0 } else { cfg.width(l) };
            down.push(level(store, rng, format!("unet.down{l}"), l, c_in)?);
            if l + 1 < levels {
                downsample.push(Linear::new(
                    store,
                    &format!("unet.downsample{l}"),
                    4 * cfg.width(l),
                    cfg.width(l + 1),
                    true,
                    rng,
                )?);
            }
        }

        let deepest = levels - 1;
        let cd = cfg.width(deepest);
        let mid_attn = AttnBlock::new(store, "unet.mid.attn", cfg, cd, true, rng)?;
        let mid = Level {
            res: ResBlock::new(store, "unet.mid.res", cfg, cd, cd, rng)?,
            attn: Some(mid_attn),
        };

        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for l in (0..levels).rev() {
            up.push(level(store, rng, format!("unet.up{l}"), l, 2 * cfg.width(l))?);
            if l > 0 {
                upsample.push(Linear::new(
                    store,
                    &format!("unet.upsample{l}"),
                    cfg.width(l),
                    4 * cfg.width(l - 1),
                    true,
                    rng,
                )?);
            }
        }

        let out_norm = GroupNorm::new(store, "unet.out_norm", c0, cfg.groups)?;
        let out = Linear::new(store, "unet.out", c0, p * p * cfg.image_channels, true, rng)?;
        Ok(Self {
            config: cfg.clone(),
            stem,
            time1,
            time2,
            down,
            downsample,
            mid,
            up,
            upsample,
            out_norm,
            out,
        })
    }

    /// Standalone initialisation: equal `(cfg, seed)` give identical stores.
    pub fn init<T: Float>(cfg: &DenoiserConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Self::new(&mut store, cfg, &mut rng)?;
        Ok((d, store))
    }

    /// Builds the network input `[noisy, x0·(1 − m), m]` along channels.
    pub fn extended_input<T: Float>(noisy: &Tensor<T>, x0: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
        noisy.expect_same_shape(x0)?;
        let s = noisy.shape();
        let c = *s.last().unwrap_or(&0);
        let pixels = noisy.numel() / c.max(1);
        if mask.numel() != pixels {
            return Err(Error::Shape(format!("mask of {} values for {pixels} pixels", mask.numel())));
        }
        let mut out = Vec::with_capacity(pixels * (2 * c + 1));
        let (n, x, m) = (noisy.data(), x0.data(), mask.data());
        for p in 0..pixels {
            out.extend_from_slice(&n[p * c..(p + 1) * c]);
            let keep = T::one() - m[p];
            out.extend(x[p * c..(p + 1) * c].iter().map(|&v| v * keep));
            out.push(m[p]);
        }
        let mut shape = s.to_vec();
        *shape.last_mut().expect("non-empty shape") = 2 * c + 1;
        Ok(Tensor::new(&shape, out)?)
    }

    /// `x_in: [b, s, s, 2c+1]`, `cond: [b, L, cond_dim]` → noise `[b, s, s, c]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x_in: Var, timesteps: &[usize], cond: Var) -> Result<Var> {
        let cfg = &self.config;
        let s = g.shape(x_in).to_vec();
        if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != cfg.input_channels() {
            return Err(Error::Shape(format!(
                "denoiser expects [b, {0}, {0}, {1}], got {s:?}",
                cfg.image_size,
                cfg.input_channels()
            )));
        }
        let cs = g.shape(cond).to_vec();
        if cs.len() != 3 || cs[0] != s[0] || cs[2] != cfg.cond_dim {
            return Err(Error::Shape(format!(
                "conditioning must be [{}, L, {}], got {cs:?}",
                s[0], cfg.cond_dim
            )));
        }
        if timesteps.len() != s[0] {
            return Err(Error::Shape(format!("{} timesteps for a batch of {}", timesteps.len(), s[0])));
        }

        let tf = g.input(timestep_features::<T>(timesteps, cfg.time_embed_dim));
        let temb = self.time1.forward(g, tf)?;
        let temb = g.silu(temb);
        let temb = self.time2.forward(g, temb)?;
        let temb = g.silu(temb);

        let mut h = fold(g, x_in, cfg.patch)?;
        h = self.stem.forward(g, h)?;
        let mut skips = Vec::new();
        for (l, lvl) in self.down.iter().enumerate() {
            h = lvl.forward(g, h, temb, cond)?;
            skips.push(h);
            if let Some(ds) = self.downsample.get(l) {
                h = g.space_to_depth(h)?;
                h = ds.forward(g, h)?;
            }
        }
        h = self.mid.forward(g, h, temb, cond)?;
        for (i, lvl) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_last(h, skip)?;
            h = lvl.forward(g, h, temb, cond)?;
            if let Some(us) = self.upsample.get(i) {
                h = us.forward(g, h)?;
                h = g.depth_to_space(h)?;
            }
        }
        h = self.out_norm.forward(g, h)?;
        h = g.silu(h);
        h = self.out.forward(g, h)?;
        unfold(g, h, cfg.patch)
    }
}

fn fold<T: Float>(g: &mut Graph<'_, T>, x: Var, patch: usize) -> Result<Var> {
    let mut h = x;
    let mut p = patch;
    while p > 1 {
        if !p.is_multiple_of(2) {
            return Err(Error::Config(format!("patch size {patch} must be a power of two")));
        }
        h = g.space_to_depth(h)?;
        p /= 2;
    }
    Ok(h)
}

fn unfold<T: Float>(g: &mut Graph<'_, T>, x: Var, patch: usize) -> Result<Var> {
    let mut h = x;
    let mut p = patch;
    while p > 1 {
        h = g.depth_to_space(h)?;
        p /= 2;
    }
    Ok(h)
}
