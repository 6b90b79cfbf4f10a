//! The jointly trained pieces: caption encoder, task prompts and denoiser,
//! sharing one parameter store.

use promptpaint_autograd::{Float, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::textcond::{
    compose_prompt, interpolate_embeddings, tokenize, ComposeMode, PromptTokens, TaskPromptName,
    TaskPromptRegistry, TextEmbedding, TextEncoder, TextEncoderConfig, Vocabulary,
};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub text: TextEncoderConfig,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            denoiser: DenoiserConfig::toy(),
            text: TextEncoderConfig {
                embed_dim: 8,
                layers: 1,
                heads: 2,
                mlp_ratio: 2,
                ..TextEncoderConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.denoiser.cond_dim != self.text.embed_dim {
            return Err(Error::Config(format!(
                "denoiser attends over {}-wide tokens, encoder emits {}",
                self.denoiser.cond_dim, self.text.embed_dim
            )));
        }
        self.denoiser.validate()
    }
}

/// Coarse parameter groups used for gradient-norm reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    #[serde(rename = "denoiser")]
    Denoiser,
    #[serde(rename = "text_encoder")]
    TextEncoder,
    #[serde(rename = "P_ctxt")]
    Ctxt,
    #[serde(rename = "P_obj")]
    Obj,
    #[serde(rename = "P_shape")]
    Shape,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Denoiser => "denoiser",
            Self::TextEncoder => "text_encoder",
            Self::Ctxt => "P_ctxt",
            Self::Obj => "P_obj",
            Self::Shape => "P_shape",
        }
    }

    pub fn of_task(name: TaskPromptName) -> Self {
        match name {
            TaskPromptName::Ctxt => Self::Ctxt,
            TaskPromptName::Obj => Self::Obj,
            TaskPromptName::Shape => Self::Shape,
        }
    }
}

/// Conditioning recipe for one batch row.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditioning {
    Tokens(PromptTokens),
    /// `(1 − alpha)·encode(first) + alpha·encode(second)`.
    Mix {
        first: PromptTokens,
        second: PromptTokens,
        alpha: f64,
    },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub encoder: TextEncoder,
    pub denoiser: Denoiser,
}

fn prompt_seed(seed: u64, name: TaskPromptName) -> u64 {
    let k = match name {
        TaskPromptName::Ctxt => 1,
        TaskPromptName::Obj => 2,
        TaskPromptName::Shape => 3,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

impl Model {
    /// Deterministic initialisation of every parameter from `seed`.
    pub fn init<T: Float>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut registry = TaskPromptRegistry::new(config.text.embed_dim);
        for name in TaskPromptName::ALL {
            registry.register(name, config.text.task_tokens, prompt_seed(seed, name))?;
        }
        let vocab = Vocabulary::new(&registry, config.text.seq_len)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = TextEncoder::new(&mut store, &config.text, &vocab, &registry, &mut rng)?;
        let denoiser = Denoiser::new(&mut store, &config.denoiser, &mut rng)?;
        Ok((
            Self {
                config: config.clone(),
                vocab,
                encoder,
                denoiser,
            },
            store,
        ))
    }

    pub fn group_of<T: Float>(&self, store: &ParamStore<T>, id: ParamId) -> ParamGroup {
        if let Some((name, _)) = self.encoder.task_params().iter().find(|(_, p)| *p == id) {
            return ParamGroup::of_task(*name);
        }
        if store.name(id).starts_with("text.") {
            ParamGroup::TextEncoder
        } else {
            ParamGroup::Denoiser
        }
    }

    pub fn empty_prompt(&self) -> PromptTokens {
        tokenize("", &self.vocab).expect("empty caption always tokenizes")
    }

    pub fn compose(&self, caption: Option<&str>, task: TaskPromptName, mode: ComposeMode) -> Result<PromptTokens> {
        compose_prompt(&self.vocab, caption, task, mode)
    }

    pub fn encode<T: Float>(&self, g: &mut Graph<'_, T>, batch: &[PromptTokens]) -> Result<Var> {
        self.encoder.encode(g, &self.vocab, batch)
    }

    /// Encodes mixed conditioning rows. Plain rows and both halves of every
    /// mix go through one encoder pass; mixes are blended per row.
    pub fn encode_conditioning<T: Float>(&self, g: &mut Graph<'_, T>, rows: &[Conditioning]) -> Result<Var> {
        let mut first = Vec::with_capacity(rows.len());
        let mut second = Vec::new();
        let mut w_first = Vec::with_capacity(rows.len());
        let mut w_second = Vec::new();
        let any_mix = rows.iter().any(|r| matches!(r, Conditioning::Mix { .. }));
        for r in rows {
            match r {
                Conditioning::Tokens(t) => {
                    first.push(t.clone());
                    w_first.push(T::one());
                    if any_mix {
                        second.push(t.clone());
                        w_second.push(T::zero());
                    }
                }
                Conditioning::Mix { first: a, second: b, alpha } => {
                    if !(0.0..=1.0).contains(alpha) {
                        return Err(Error::Prompt(format!("interpolation weight {alpha} outside [0, 1]")));
                    }
                    first.push(a.clone());
                    second.push(b.clone());
                    w_first.push(T::from_f64_lossy(1.0 - alpha));
                    w_second.push(T::from_f64_lossy(*alpha));
                }
            }
        }
        if !any_mix {
            return self.encode(g, &first);
        }
        let n = rows.len();
        let mut all = first;
        all.extend(second);
        let enc = self.encode(g, &all)?;
        let (l, d) = (self.config.text.seq_len, self.config.text.embed_dim);
        let flat = g.reshape(enc, &[2 * n, l * d])?;
        // split by gathering rows back out of the stacked encoding
        let idx_a: Vec<(usize, usize)> = (0..n).map(|i| (0, i)).collect();
        let idx_b: Vec<(usize, usize)> = (0..n).map(|i| (0, n + i)).collect();
        let a = g.gather_rows(&[flat], &idx_a, &[n, l, d])?;
        let b = g.gather_rows(&[flat], &idx_b, &[n, l, d])?;
        let a = g.scale_batch(a, &w_first)?;
        let b = g.scale_batch(b, &w_second)?;
        Ok(g.add(a, b)?)
    }

    /// Forward-only encoding of one prompt.
    pub fn embed(&self, store: &ParamStore<f32>, tokens: &PromptTokens) -> Result<TextEmbedding> {
        self.encoder.embed(store, &self.vocab, tokens)
    }

    /// Forward-only shape conditioning through embedding interpolation.
    pub fn embed_shape(&self, store: &ParamStore<f32>, caption: &str, alpha: f64) -> Result<TextEmbedding> {
        let c = self.embed(store, &self.compose(Some(caption), TaskPromptName::Ctxt, ComposeMode::Suffix)?)?;
        let s = self.embed(store, &self.compose(Some(caption), TaskPromptName::Shape, ComposeMode::Suffix)?)?;
        interpolate_embeddings(&c, &s, alpha)
    }

    pub fn predict_noise<T: Float>(&self, g: &mut Graph<'_, T>, x_in: Var, timesteps: &[usize], cond: Var) -> Result<Var> {
        self.denoiser.forward(g, x_in, timesteps, cond)
    }

    /// Forward-only noise prediction for a batch sharing one timestep.
    /// `cond` rows pair with `x_in` rows.
    pub fn predict_noise_batch(
        &self,
        store: &ParamStore<f32>,
        x_in: &Tensor<f32>,
        t: usize,
        cond: &[&TextEmbedding],
    ) -> Result<Tensor<f32>> {
        let b = x_in.shape()[0];
        if cond.len() != b {
            return Err(Error::Shape(format!("{} embeddings for a batch of {b}", cond.len())));
        }
        let parts: Vec<&Tensor<f32>> = cond.iter().map(|e| e.values()).collect();
        let c = Tensor::concat_leading(&parts)?;
        let (l, d) = (c.shape()[0] / b, c.shape()[1]);
        let c = c.reshape(&[b, l, d])?;
        let mut g = Graph::inference(store);
        let xv = g.input(x_in.clone());
        let cv = g.input(c);
        let out = self.predict_noise(&mut g, xv, &vec![t; b], cv)?;
        Ok(g.value(out).clone())
    }
}
