//! Caption tokenisation, learnable task prompts and the caption encoder.
//!
//! A task prompt is a block of pseudo-tokens whose embeddings are trained
//! like any other weight. Prompts enter the encoder either on their own
//! (`ComposeMode::Alone`) or appended to a caption before the end marker
//! (`ComposeMode::Suffix`).

use std::collections::HashMap;
use std::fmt;

use promptpaint_autograd::{Float, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Attention, LayerNorm, Linear};
use crate::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Longest caption the grammar may produce, in words.
pub const CAPTION_MAX_TOKENS: usize = 8;
pub const DEFAULT_TASK_TOKENS: usize = 10;
pub const DEFAULT_SEQ_LEN: usize = 24;
pub const TOKEN_INIT_STD: f64 = 0.02;

pub const COLOR_WORDS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPE_WORDS: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskPromptName {
    #[serde(rename = "P_ctxt")]
    Ctxt,
    #[serde(rename = "P_obj")]
    Obj,
    #[serde(rename = "P_shape")]
    Shape,
}

impl TaskPromptName {
    pub const ALL: [TaskPromptName; 3] = [Self::Ctxt, Self::Obj, Self::Shape];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ctxt => "P_ctxt",
            Self::Obj => "P_obj",
            Self::Shape => "P_shape",
        }
    }

    fn token_stem(self) -> &'static str {
        match self {
            Self::Ctxt => "p_ctxt",
            Self::Obj => "p_obj",
            Self::Shape => "p_shape",
        }
    }
}

impl fmt::Display for TaskPromptName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A trainable block of pseudo-token embeddings, `[token_count, embed_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPrompt {
    pub name: TaskPromptName,
    pub token_count: usize,
    pub embeddings: Tensor<f32>,
}

/// Task prompts in registration order.
#[derive(Clone, Debug)]
pub struct TaskPromptRegistry {
    embed_dim: usize,
    prompts: Vec<TaskPrompt>,
}

impl TaskPromptRegistry {
    pub fn new(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            prompts: Vec::new(),
        }
    }

    /// Registers a prompt with Gaussian embeddings at the scale of ordinary
    /// token embeddings.
    pub fn register(&mut self, name: TaskPromptName, token_count: usize, seed: u64) -> Result<&TaskPrompt> {
        if self.get(name).is_some() {
            return Err(Error::Prompt(format!("task prompt {name} is already registered")));
        }
        if token_count == 0 {
            return Err(Error::Prompt("task prompt needs at least one token".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embeddings = Tensor::<f64>::randn(&[token_count, self.embed_dim], TOKEN_INIT_STD, &mut rng).cast();
        self.prompts.push(TaskPrompt {
            name,
            token_count,
            embeddings,
        });
        Ok(self.prompts.last().expect("just pushed"))
    }

    pub fn get(&self, name: TaskPromptName) -> Option<&TaskPrompt> {
        self.prompts.iter().find(|p| p.name == name)
    }

    pub fn prompts(&self) -> &[TaskPrompt] {
        &self.prompts
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }
}

/// Where a token id's embedding comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenSource {
    Word(usize),
    Task(TaskPromptName, usize),
}

/// Dense token ids: ordinary words first, then each task prompt's block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    task_blocks: Vec<(TaskPromptName, usize)>,
    seq_len: usize,
    #[serde(skip)]
    word_ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Special markers plus the closed caption grammar, with pseudo-token
    /// blocks for every prompt in `registry`.
    pub fn new(registry: &TaskPromptRegistry, seq_len: usize) -> Result<Self> {
        let mut words: Vec<String> = [PAD, BOS, EOS, "a"].iter().map(|s| s.to_string()).collect();
        words.extend(COLOR_WORDS.iter().map(|s| s.to_string()));
        words.extend(SHAPE_WORDS.iter().map(|s| s.to_string()));
        let task_blocks: Vec<(TaskPromptName, usize)> =
            registry.prompts().iter().map(|p| (p.name, p.token_count)).collect();
        let longest = task_blocks.iter().map(|b| b.1).max().unwrap_or(0);
        if seq_len < CAPTION_MAX_TOKENS + longest + 2 {
            return Err(Error::Prompt(format!(
                "sequence length {seq_len} cannot hold a {CAPTION_MAX_TOKENS}-word caption, \
                 {longest} task tokens and both markers"
            )));
        }
        let mut v = Self {
            words,
            task_blocks,
            seq_len,
            word_ids: HashMap::new(),
        };
        v.rebuild_index();
        Ok(v)
    }

    fn rebuild_index(&mut self) {
        self.word_ids = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    /// Restores lookup tables after deserialisation.
    pub fn from_json(s: &str) -> Result<Self> {
        let mut v: Vocabulary = serde_json::from_str(s)?;
        v.rebuild_index();
        Ok(v)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    pub fn len(&self) -> usize {
        self.words.len() + self.task_blocks.iter().map(|b| b.1).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn task_blocks(&self) -> &[(TaskPromptName, usize)] {
        &self.task_blocks
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.word_ids.get(word).copied()
    }

    fn special(&self, word: &str) -> u32 {
        self.word_ids[word]
    }

    pub fn pad_id(&self) -> u32 {
        self.special(PAD)
    }

    pub fn bos_id(&self) -> u32 {
        self.special(BOS)
    }

    pub fn eos_id(&self) -> u32 {
        self.special(EOS)
    }

    /// Ids of a task prompt's pseudo-tokens, in order.
    pub fn task_token_ids(&self, name: TaskPromptName) -> Result<Vec<u32>> {
        let mut base = self.words.len();
        for &(n, count) in &self.task_blocks {
            if n == name {
                return Ok((base..base + count).map(|i| i as u32).collect());
            }
            base += count;
        }
        Err(Error::Prompt(format!("task prompt {name} is not registered")))
    }

    pub fn resolve(&self, id: u32) -> Result<TokenSource> {
        let id = id as usize;
        if id < self.words.len() {
            return Ok(TokenSource::Word(id));
        }
        let mut base = self.words.len();
        for &(n, count) in &self.task_blocks {
            if id < base + count {
                return Ok(TokenSource::Task(n, id - base));
            }
            base += count;
        }
        Err(Error::Prompt(format!("token id {id} outside vocabulary of {}", self.len())))
    }

    /// Human-readable form of a token id.
    pub fn token_str(&self, id: u32) -> Result<String> {
        Ok(match self.resolve(id)? {
            TokenSource::Word(i) => self.words[i].clone(),
            TokenSource::Task(n, j) => format!("<{}_{}>", n.token_stem(), j + 1),
        })
    }

    fn caption_ids(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .filter(|&id| id > self.eos_id())
                    .ok_or_else(|| Error::Prompt(format!("word `{w}` is not in the vocabulary")))
            })
            .collect()
    }

    fn finish(&self, mut body: Vec<u32>) -> PromptTokens {
        let mut ids = vec![self.bos_id()];
        body.truncate(self.seq_len - 2);
        ids.append(&mut body);
        ids.push(self.eos_id());
        ids.resize(self.seq_len, self.pad_id());
        PromptTokens { ids }
    }
}

/// Fixed-length token id sequence `[BOS, ..., EOS, PAD, ...]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptTokens {
    pub ids: Vec<u32>,
}

impl PromptTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn render(&self, vocab: &Vocabulary) -> Result<Vec<String>> {
        self.ids.iter().map(|&id| vocab.token_str(id)).collect()
    }
}

/// Plain caption tokens, with no task prompt.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<PromptTokens> {
    Ok(vocab.finish(vocab.caption_ids(text)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComposeMode {
    Suffix,
    Alone,
}

/// Caption followed by a task prompt's pseudo-tokens, or the prompt alone.
/// A missing caption in suffix mode means the empty caption.
pub fn compose_prompt(
    vocab: &Vocabulary,
    caption: Option<&str>,
    task: TaskPromptName,
    mode: ComposeMode,
) -> Result<PromptTokens> {
    let task_ids = vocab.task_token_ids(task)?;
    let body = match (mode, caption) {
        (ComposeMode::Alone, Some(c)) => {
            return Err(Error::Prompt(format!(
                "{task} in alone mode takes no caption, got `{c}`"
            )))
        }
        (ComposeMode::Alone, None) => task_ids,
        (ComposeMode::Suffix, c) => {
            let mut ids = vocab.caption_ids(c.unwrap_or(""))?;
            ids.extend(task_ids);
            ids
        }
    };
    if body.len() + 2 > vocab.seq_len {
        return Err(Error::Prompt(format!(
            "composed prompt needs {} tokens, sequence holds {}",
            body.len() + 2,
            vocab.seq_len
        )));
    }
    Ok(vocab.finish(body))
}

/// Per-token conditioning sequence `[seq_len, embed_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    values: Tensor<f32>,
}

impl TextEmbedding {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::Shape(format!("text embedding must be 2-d, got {:?}", values.shape())));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<f32> {
        self.values
    }

    pub fn l2_distance(&self, other: &TextEmbedding) -> Result<f64> {
        let d = self.values.zip_map(&other.values, |a, b| a - b)?;
        Ok((d.sq_norm() as f64).sqrt())
    }
}

/// `(1 − alpha)·e_ctxt + alpha·e_shape`; the endpoints return the inputs
/// unchanged.
pub fn interpolate_embeddings(e_ctxt: &TextEmbedding, e_shape: &TextEmbedding, alpha: f64) -> Result<TextEmbedding> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Prompt(format!("interpolation weight {alpha} outside [0, 1]")));
    }
    e_ctxt.values.expect_same_shape(&e_shape.values)?;
    if alpha == 0.0 {
        return Ok(e_ctxt.clone());
    }
    if alpha == 1.0 {
        return Ok(e_shape.clone());
    }
    let (wa, wb) = ((1.0 - alpha) as f32, alpha as f32);
    Ok(TextEmbedding {
        values: e_ctxt.values.zip_map(&e_shape.values, |a, b| wa * a + wb * b)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub seq_len: usize,
    pub task_tokens: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            seq_len: DEFAULT_SEQ_LEN,
            task_tokens: DEFAULT_TASK_TOKENS,
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Token/pseudo-token embedding lookup, learned positions and a small
/// pre-norm transformer.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    token_table: ParamId,
    positions: ParamId,
    task_tables: Vec<(TaskPromptName, ParamId)>,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
}

impl TextEncoder {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &TextEncoderConfig,
        vocab: &Vocabulary,
        registry: &TaskPromptRegistry,
        rng: &mut R,
    ) -> Result<Self> {
        let d = config.embed_dim;
        if registry.embed_dim() != d {
            return Err(Error::Config(format!(
                "task prompts have width {}, encoder {d}",
                registry.embed_dim()
            )));
        }
        if !d.is_multiple_of(config.heads) {
            return Err(Error::Config(format!("{d} wide encoder with {} heads", config.heads)));
        }
        let token_table = store.insert(
            "text.tokens",
            Tensor::<f64>::randn(&[vocab.word_count(), d], TOKEN_INIT_STD, rng).cast(),
        )?;
        let positions = store.insert(
            "text.positions",
            Tensor::<f64>::randn(&[config.seq_len, d], TOKEN_INIT_STD, rng).cast(),
        )?;
        let mut task_tables = Vec::new();
        for p in registry.prompts() {
            let id = store.insert(format!("text.task.{}", p.name), p.embeddings.cast())?;
            task_tables.push((p.name, id));
        }
        let mut blocks = Vec::new();
        for i in 0..config.layers {
            let name = format!("text.block{i}");
            blocks.push(EncoderBlock {
                norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
                attn: Attention::new(store, &format!("{name}.attn"), d, d, config.heads, rng)?,
                norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
                fc1: Linear::new(store, &format!("{name}.fc1"), d, d * config.mlp_ratio, true, rng)?,
                fc2: Linear::new(store, &format!("{name}.fc2"), d * config.mlp_ratio, d, true, rng)?,
            });
        }
        let final_norm = LayerNorm::new(store, "text.final_norm", d)?;
        Ok(Self {
            config: config.clone(),
            token_table,
            positions,
            task_tables,
            blocks,
            final_norm,
        })
    }

    pub fn task_param(&self, name: TaskPromptName) -> Option<ParamId> {
        self.task_tables.iter().find(|t| t.0 == name).map(|t| t.1)
    }

    pub fn task_params(&self) -> &[(TaskPromptName, ParamId)] {
        &self.task_tables
    }

    /// Encodes a batch of token sequences to `[batch, seq_len, embed_dim]`.
    /// Only task prompts that occur in the batch enter the graph.
    pub fn encode<T: Float>(&self, g: &mut Graph<'_, T>, vocab: &Vocabulary, batch: &[PromptTokens]) -> Result<Var> {
        let (l, d) = (self.config.seq_len, self.config.embed_dim);
        let mut sources = vec![g.param(self.token_table)];
        let mut source_of: HashMap<TaskPromptName, usize> = HashMap::new();
        let mut index = Vec::with_capacity(batch.len() * l);
        for tokens in batch {
            if tokens.len() != l {
                return Err(Error::Prompt(format!("prompt of {} tokens, expected {l}", tokens.len())));
            }
            for &id in &tokens.ids {
                match vocab.resolve(id)? {
                    TokenSource::Word(row) => index.push((0, row)),
                    TokenSource::Task(name, row) => {
                        let src = match source_of.get(&name) {
                            Some(&s) => s,
                            None => {
                                let pid = self
                                    .task_param(name)
                                    .ok_or_else(|| Error::Prompt(format!("encoder has no table for {name}")))?;
                                sources.push(g.param(pid));
                                source_of.insert(name, sources.len() - 1);
                                sources.len() - 1
                            }
                        };
                        index.push((src, row));
                    }
                }
            }
        }
        let mut x = g.gather_rows(&sources, &index, &[batch.len(), l, d])?;
        let pos = g.param(self.positions);
        x = g.add_broadcast_leading(x, pos)?;
        for b in &self.blocks {
            let n = b.norm1.forward(g, x)?;
            let a = b.attn.forward(g, n, n)?;
            x = g.add(x, a)?;
            let n = b.norm2.forward(g, x)?;
            let h = b.fc1.forward(g, n)?;
            let h = g.silu(h);
            let h = b.fc2.forward(g, h)?;
            x = g.add(x, h)?;
        }
        self.final_norm.forward(g, x)
    }

    /// Forward-only encoding of a single prompt.
    pub fn embed(&self, store: &ParamStore<f32>, vocab: &Vocabulary, tokens: &PromptTokens) -> Result<TextEmbedding> {
        let mut g = Graph::inference(store);
        let out = self.encode(&mut g, vocab, std::slice::from_ref(tokens))?;
        let (l, d) = (self.config.seq_len, self.config.embed_dim);
        TextEmbedding::new(g.value(out).clone().reshape(&[l, d])?)
    }
}

/// Every caption the closed grammar can produce, including the empty one.
pub fn caption_grammar() -> Vec<String> {
    let mut out = vec![String::new()];
    for c in COLOR_WORDS {
        for s in SHAPE_WORDS {
            out.push(format!("a {c} {s}"));
        }
    }
    out
}
