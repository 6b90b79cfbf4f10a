//! Multi-task training of the denoiser, caption encoder and task prompts.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::info;
use promptpaint_autograd::{Adam, Float, Gradients, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, SaveRequest, LATEST};
use crate::dataset::{
    make_training_example, scene_from_seed, train_seed, RoutingConfig, SceneSpec, Task, TrainingExample,
};
use crate::denoiser::Denoiser;
use crate::model::{Conditioning, Model, ModelConfig, ParamGroup};
use crate::schedule::{add_noise_at, NoiseSchedule, ScheduleConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub learning_rate: f64,
    /// Linear warmup length in steps; 0 starts at the peak.
    pub warmup_steps: u64,
    pub lr_decay: LrDecay,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub clip_norm: f64,
    /// Probability of replacing a row's conditioning with the empty prompt.
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 40_000,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 500,
            lr_decay: LrDecay::Cosine,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 10,
            clip_norm: 1.0,
            cond_dropout: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// Half-cosine from the peak down to zero at `steps`.
    #[default]
    Cosine,
}

impl TrainConfig {
    /// Learning rate for the update that takes the model from `step` to `step + 1`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        let warm = if self.warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decay = match self.lr_decay {
            LrDecay::Constant => 1.0,
            LrDecay::Cosine => {
                let frac = (step as f64 / self.steps.max(1) as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        };
        self.learning_rate * warm * decay
    }
}

/// Everything a run needs; stored verbatim in every checkpoint manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub scene: SceneSpec,
    pub routing: RoutingConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if t.batch_size == 0 || t.learning_rate < 0.0 || !t.learning_rate.is_finite() {
            return Err(Error::Config("batch size must be positive and learning rate finite, non-negative".into()));
        }
        if t.checkpoint_every == 0 || t.log_every == 0 || t.clip_norm <= 0.0 {
            return Err(Error::Config("cadences and clip norm must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.cond_dropout) || !(0.0..=1.0).contains(&self.routing.t2i_prob) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.scene.size != self.model.denoiser.image_size {
            return Err(Error::Config(format!(
                "scenes are {}px, denoiser expects {}px",
                self.scene.size, self.model.denoiser.image_size
            )));
        }
        self.model.validate()?;
        self.schedule.build().map(|_| ())
    }

    /// An 8px, few-step configuration for tests and smoke runs.
    pub fn toy() -> Self {
        RunConfig {
            train: TrainConfig {
                steps: 3,
                batch_size: 4,
                checkpoint_every: 2,
                log_every: 1,
                learning_rate: 1e-3,
                warmup_steps: 0,
                lr_decay: LrDecay::Constant,
                ..TrainConfig::default()
            },
            model: ModelConfig::toy(),
            scene: SceneSpec {
                size: 8,
                radius_min: 1,
                radius_max: 3,
                gap: 1,
                ..SceneSpec::default()
            },
            routing: RoutingConfig {
                brush: crate::maskgen::BrushParams {
                    width: (1.0, 3.0),
                    walk_length: (2, 6),
                    ..Default::default()
                },
                ..RoutingConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Network inputs for one optimisation step, with timesteps and noise
/// already drawn.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub x_in: Tensor<f32>,
    pub timesteps: Vec<usize>,
    pub conditioning: Vec<Conditioning>,
    pub target: Tensor<f32>,
    pub tasks: Vec<Task>,
}

fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("noise shape")
}

/// Draws `t ~ U{0..T−1}` and `ε ~ N(0, I)` per example, noises the image and
/// stacks `[x_t, x0·(1 − m), m]`. Rows are dropped to the empty prompt with
/// probability `dropout`.
pub fn prepare_batch<R: Rng + ?Sized>(
    model: &Model,
    batch: &[TrainingExample],
    schedule: &NoiseSchedule,
    dropout: f64,
    rng: &mut R,
) -> Result<PreparedBatch> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut timesteps = Vec::with_capacity(batch.len());
    let mut conditioning = Vec::with_capacity(batch.len());
    let empty = model.empty_prompt();
    for ex in batch {
        let t = rng.random_range(0..schedule.len());
        let eps = randn(ex.image.shape(), rng);
        let xt = add_noise_at(&ex.image, &eps, schedule.alpha_bar(t))?;
        let x_in = Denoiser::extended_input(&xt, &ex.image, &ex.mask.to_tensor())?;
        inputs.push(x_in);
        targets.push(eps);
        timesteps.push(t);
        conditioning.push(if rng.random_bool(dropout) {
            Conditioning::Tokens(empty.clone())
        } else {
            ex.conditioning()
        });
    }
    let stack = |ts: &[Tensor<f32>]| -> Result<Tensor<f32>> {
        let s = ts[0].shape().to_vec();
        let refs: Vec<&Tensor<f32>> = ts.iter().collect();
        let flat = Tensor::concat_leading(&refs)?;
        let mut shape = vec![ts.len()];
        shape.extend_from_slice(&s);
        Ok(flat.reshape(&shape)?)
    };
    Ok(PreparedBatch {
        x_in: stack(&inputs)?,
        timesteps,
        conditioning,
        target: stack(&targets)?,
        tasks: batch.iter().map(|e| e.task).collect(),
    })
}

pub struct LossEval<T> {
    pub loss: f64,
    pub per_example: Vec<f64>,
    pub grads: Option<Gradients<T>>,
}

/// Mean squared noise-prediction error of a prepared batch, with gradients
/// when `with_grad` is set.
pub fn batch_loss<T: Float>(
    model: &Model,
    store: &ParamStore<T>,
    batch: &PreparedBatch,
    with_grad: bool,
) -> Result<LossEval<T>> {
    let mut g = if with_grad { Graph::new(store) } else { Graph::inference(store) };
    let x = g.input(batch.x_in.cast());
    let target = g.input(batch.target.cast());
    let cond = model.encode_conditioning(&mut g, &batch.conditioning)?;
    let pred = model.predict_noise(&mut g, x, &batch.timesteps, cond)?;
    let loss = g.mse(pred, target)?;
    let per = {
        let (p, t) = (g.value(pred).data(), g.value(target).data());
        let n = batch.timesteps.len();
        let inner = p.len() / n;
        (0..n)
            .map(|i| {
                let s: f64 = (i * inner..(i + 1) * inner)
                    .map(|j| {
                        let d = (p[j] - t[j]).to_f64_lossy();
                        d * d
                    })
                    .sum();
                s / inner as f64
            })
            .collect()
    };
    let value = g.value(loss).data()[0].to_f64_lossy();
    let grads = if with_grad { Some(g.backward(loss)?.params) } else { None };
    Ok(LossEval {
        loss: value,
        per_example: per,
        grads,
    })
}

pub fn group_norms<T: Float>(model: &Model, store: &ParamStore<T>, grads: &Gradients<T>) -> BTreeMap<ParamGroup, f64> {
    let mut sq: BTreeMap<ParamGroup, f64> = [
        ParamGroup::Denoiser,
        ParamGroup::TextEncoder,
        ParamGroup::Ctxt,
        ParamGroup::Obj,
        ParamGroup::Shape,
    ]
    .into_iter()
    .map(|g| (g, 0.0))
    .collect();
    for (id, g) in grads.iter() {
        *sq.entry(model.group_of(store, id)).or_default() += g.sq_norm().to_f64_lossy();
    }
    sq.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub loss: f64,
    /// Mean loss of the rows routed to each task present in the batch.
    pub per_task: BTreeMap<Task, f64>,
    pub grad_norms: BTreeMap<ParamGroup, f64>,
    pub grad_norm: f64,
    pub clipped: bool,
}

pub struct TrainState {
    pub config: RunConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub optimizer: Adam<f32>,
    pub schedule: NoiseSchedule,
    pub step: u64,
}

impl TrainState {
    pub fn init(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let (model, params) = Model::init(&config.model, config.train.seed)?;
        Ok(Self {
            config: config.clone(),
            model,
            params,
            optimizer: Adam::new(config.train.learning_rate).with_clip_norm(config.train.clip_norm),
            schedule: config.schedule.build()?,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: checkpoint::Checkpoint) -> Result<Self> {
        let config = ck.manifest.config.clone();
        let mut optimizer = Adam::new(config.train.learning_rate).with_clip_norm(config.train.clip_norm);
        if let Some(m) = ck.moments {
            optimizer.restore_moments(m);
        }
        Ok(Self {
            schedule: config.schedule.build()?,
            model: ck.model,
            params: ck.params,
            optimizer,
            step: ck.manifest.step,
            config,
        })
    }

    /// Per-step generator; a resumed run replays the same stream.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        rng.set_stream(step);
        rng
    }

    /// Scenes and routed examples for `step`.
    pub fn make_batch(&self, step: u64, rng: &mut ChaCha8Rng) -> Result<Vec<TrainingExample>> {
        (0..self.config.train.batch_size)
            .map(|slot| {
                let scene = scene_from_seed(train_seed(self.config.train.seed, step, slot), &self.config.scene)?;
                make_training_example(&scene, rng, &self.model.vocab, &self.config.routing)
            })
            .collect()
    }

    /// One optimiser update. Only parameters the loss reaches (in
    /// particular only the task prompts present in the batch) change.
    pub fn training_step<R: Rng + ?Sized>(&mut self, batch: &[TrainingExample], rng: &mut R) -> Result<StepOutcome> {
        let prepared = prepare_batch(&self.model, batch, &self.schedule, self.config.train.cond_dropout, rng)?;
        let eval = batch_loss(&self.model, &self.params, &prepared, true)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {} at step {}; timesteps {:?}; tasks {:?}; per-example {:?}; weights finite: {}",
                eval.loss,
                self.step,
                prepared.timesteps,
                prepared.tasks,
                eval.per_example,
                self.params.all_finite()
            )));
        }
        let grads = eval.grads.expect("requested gradients");
        let grad_norms = group_norms(&self.model, &self.params, &grads);
        self.optimizer.learning_rate = self.config.train.learning_rate_at(self.step);
        let report = self.optimizer.step(&mut self.params, grads)?;
        let mut sums: BTreeMap<Task, (f64, usize)> = BTreeMap::new();
        for (task, l) in prepared.tasks.iter().zip(&eval.per_example) {
            let e = sums.entry(*task).or_default();
            e.0 += l;
            e.1 += 1;
        }
        self.step += 1;
        Ok(StepOutcome {
            loss: eval.loss,
            per_task: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            grad_norms,
            grad_norm: report.grad_norm,
            clipped: report.clipped,
        })
    }

    pub fn save(&self, dir: &Path, metrics: BTreeMap<String, f64>) -> Result<checkpoint::Manifest> {
        checkpoint::save_checkpoint(
            dir,
            SaveRequest {
                model: &self.model,
                params: &self.params,
                moments: Some(self.optimizer.moments()),
                config: &self.config,
                step: self.step,
                metrics,
            },
        )
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub per_task: BTreeMap<Task, f64>,
    pub grad_norms: BTreeMap<ParamGroup, f64>,
    pub grad_norm: f64,
    pub clipped: bool,
    /// Rate used by the update that produced `step`.
    #[serde(default)]
    pub learning_rate: f64,
    pub seconds: f64,
}

fn checkpoint_name(step: u64) -> String {
    format!("step-{step:07}")
}

fn write_latest(out: &Path, step: u64) -> Result<()> {
    let tmp = out.join(format!(".{LATEST}.tmp"));
    fs::write(&tmp, format!("checkpoints/{}", checkpoint_name(step)))?;
    fs::rename(tmp, out.join(LATEST))?;
    Ok(())
}

/// Runs (or resumes) training into `out`, writing `train_log.jsonl`,
/// `checkpoints/step-NNNNNNN` and a `latest` pointer. Returns the manifest
/// of the final checkpoint.
pub fn train(config: &RunConfig, out: &Path, resume: bool) -> Result<checkpoint::Manifest> {
    fs::create_dir_all(out.join("checkpoints"))?;
    let mut state = if resume && out.join(LATEST).is_file() {
        let ck = checkpoint::load_checkpoint(out)?;
        if ck.manifest.config.model != config.model || ck.manifest.config.train.seed != config.train.seed {
            return Err(Error::Config("resume config disagrees with the stored model or seed".into()));
        }
        let mut s = TrainState::from_checkpoint(ck)?;
        s.config.train.steps = config.train.steps;
        info!("resuming from step {}", s.step);
        s
    } else {
        TrainState::init(config)?
    };
    let mut log = OpenOptions::new().create(true).append(true).open(out.join("train_log.jsonl"))?;
    let mut running: BTreeMap<String, f64> = BTreeMap::new();
    let save = |state: &TrainState, running: &BTreeMap<String, f64>| -> Result<checkpoint::Manifest> {
        let dir = out.join("checkpoints").join(checkpoint_name(state.step));
        let m = state.save(&dir, running.clone())?;
        write_latest(out, state.step)?;
        Ok(m)
    };
    if state.step == 0 && !out.join(LATEST).is_file() {
        save(&state, &running)?;
    }
    let started = Instant::now();
    while state.step < state.config.train.steps {
        let step = state.step;
        let mut rng = state.step_rng(step);
        let batch = state.make_batch(step, &mut rng)?;
        let outcome = state.training_step(&batch, &mut rng)?;
        let decay = 0.98;
        let ema = |m: &mut BTreeMap<String, f64>, k: String, v: f64| {
            let e = m.entry(k).or_insert(v);
            *e = decay * *e + (1.0 - decay) * v;
        };
        ema(&mut running, "loss".into(), outcome.loss);
        for (task, l) in &outcome.per_task {
            ema(&mut running, format!("loss.{}", task.as_str()), *l);
        }
        if state.step % state.config.train.log_every == 0 || state.step == state.config.train.steps {
            let rec = LogRecord {
                step: state.step,
                loss: outcome.loss,
                per_task: outcome.per_task.clone(),
                grad_norms: outcome.grad_norms.clone(),
                grad_norm: outcome.grad_norm,
                clipped: outcome.clipped,
                learning_rate: state.optimizer.learning_rate,
                seconds: started.elapsed().as_secs_f64(),
            };
            serde_json::to_writer(&mut log, &rec)?;
            log.write_all(b"\n")?;
            log.flush()?;
            info!("step {} loss {:.4} running {:.4}", state.step, outcome.loss, running["loss"]);
        }
        if state.step % state.config.train.checkpoint_every == 0 && state.step < state.config.train.steps {
            save(&state, &running)?;
        }
    }
    save(&state, &running)
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
