//! Parameterised layers shared by the denoiser, the caption encoder and the
//! evaluation classifier. Each layer only records parameter ids; values live
//! in a [`ParamStore`].

use promptpaint_autograd::{Float, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::Result;

fn init<T: Float, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::<f64>::randn(shape, std, rng).cast()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = store.insert(format!("{name}.weight"), init(&[fan_in, fan_out], std, rng))?;
        let b = if bias {
            Some(store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        Ok(g.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv3x3 {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / ((9 * c_in) as f64).sqrt();
        let w = store.insert(format!("{name}.weight"), init(&[9 * c_in, c_out], std, rng))?;
        let b = store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self { w, b })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.conv3x3(x, w, Some(b))?)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full(&[channels], T::one()))?;
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        Ok(Self { gamma, beta, groups })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        Ok(g.group_norm(x, self.groups, gm, bt)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        let gamma = store.insert(format!("{name}.gamma"), Tensor::full(&[width], T::one()))?;
        let beta = store.insert(format!("{name}.beta"), Tensor::zeros(&[width]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        Ok(g.layer_norm(x, gm, bt)?)
    }
}

/// Multi-head attention with learned projections. Keys and values come from
/// `context` (cross-attention) or from the queries' own input (self-attention).
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        context_width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), context_width, width, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), context_width, width, false, rng)?,
            out: Linear::new(store, &format!("{name}.out"), width, width, true, rng)?,
            heads,
        })
    }

    /// `x: [b, s, width]`, `context: [b, l, context_width]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let a = g.attention(q, k, v, self.heads)?;
        self.out.forward(g, a)
    }
}

/// Sinusoidal features of integer timesteps, `[len(t), dim]`.
pub fn timestep_features<T: Float>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::from_f64_lossy((t as f64 * freq).cos()));
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::from_f64_lossy((t as f64 * freq).sin()));
        }
        for _ in 2 * half..dim {
            data.push(T::zero());
        }
    }
    Tensor::new(&[timesteps.len(), dim], data).expect("timestep feature shape")
}
