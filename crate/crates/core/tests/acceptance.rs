//! Acceptance report: one PASS/FAIL line per criterion, with the measured
//! values underneath.
//!
//! P1, P2 and P4 are asserted. P3 is read from the committed evaluation
//! report of the committed checkpoint and is reported without failing the
//! test run, so a model that misses a behavioural threshold shows up as a
//! FAIL line rather than a broken build.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use promptpaint::autograd::ParamStore;
use promptpaint::checkpoint::read_manifest;
use promptpaint::dataset::{eval_seed, make_training_example, scene_from_seed, RoutingConfig, Task};
use promptpaint::evaluate::EvalReport;
use promptpaint::imageio::{decode_rgb, encode_png_rgb, quantize};
use promptpaint::maskgen::{bbox_mask, dilate, Mask};
use promptpaint::metrics::{frechet_distance, FeatureExtractor};
use promptpaint::model::{Model, ModelConfig, ParamGroup};
use promptpaint::sampler::{guided_noise, GuidanceSpec, InpaintRequest, Mode, Pipeline};
use promptpaint::schedule::{add_noise, ScheduleConfig};
use promptpaint::textcond::{ComposeMode, TaskPromptName};
use promptpaint::trainer::{batch_loss, prepare_batch, read_log, train, RunConfig, TrainState};
use promptpaint::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = Result<String, String>;

fn artifacts() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../artifacts")
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Criterion {
    id: &'static str,
    title: &'static str,
    checks: Vec<(&'static str, Check)>,
}

impl Criterion {
    fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|(_, c)| c.is_ok())
    }

    fn print(&self, elapsed: f64) {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        println!("{} {verdict} {} ({elapsed:.1} s)", self.id, self.title);
        for (name, c) in &self.checks {
            match c {
                Ok(d) => println!("    ok   {name}: {d}"),
                Err(d) => println!("    FAIL {name}: {d}"),
            }
        }
    }
}

// P1

fn union_oracle(bits: &[bool], it: usize) -> Vec<bool> {
    let mut cur = bits.to_vec();
    for _ in 0..it {
        let mut next = vec![false; 16];
        for p in (0..16).filter(|&p| cur[p]) {
            let (y, x) = ((p / 4) as i64, (p % 4) as i64);
            for ny in (y - 1).max(0)..=(y + 1).min(3) {
                for nx in (x - 1).max(0)..=(x + 1).min(3) {
                    next[(ny * 4 + nx) as usize] = true;
                }
            }
        }
        cur = next;
    }
    cur
}

fn exhaustive_dilation() -> Check {
    let mut checked = 0;
    for code in 0u32..65_536 {
        let bits: Vec<bool> = (0..16).map(|i| code >> i & 1 == 1).collect();
        let m = Mask::from_bits(4, 4, bits.clone()).map_err(|e| e.to_string())?;
        for it in 0..=2 {
            let got = dilate(&m, 3, it).map_err(|e| e.to_string())?;
            if got.bits() != union_oracle(&bits, it).as_slice() {
                return Err(format!("mask {code:#06x} it={it} differs from the union oracle"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} (mask, it) pairs match"))
}

fn interpolation_endpoints() -> Check {
    let (model, store) = Model::init::<f32>(&ModelConfig::toy(), 7).map_err(|e| e.to_string())?;
    for caption in ["a red circle", "a yellow triangle", "a blue square"] {
        let embed = |task| {
            model
                .embed(&store, &model.compose(Some(caption), task, ComposeMode::Suffix).unwrap())
                .unwrap()
        };
        let (c, s) = (embed(TaskPromptName::Ctxt), embed(TaskPromptName::Shape));
        let a0 = model.embed_shape(&store, caption, 0.0).map_err(|e| e.to_string())?;
        let a1 = model.embed_shape(&store, caption, 1.0).map_err(|e| e.to_string())?;
        if a0 != c || a1 != s {
            return Err(format!("{caption}: endpoint differs"));
        }
    }
    Ok("alpha 0 and 1 reproduce both embeddings bit for bit".into())
}

fn guidance_linearity() -> Check {
    let (model, store) = Model::init::<f32>(&ModelConfig::toy(), 8).map_err(|e| e.to_string())?;
    let net = promptpaint::sampler::Frozen {
        model: &model,
        params: &store,
    };
    let embed = |c: Option<&str>, t, m| model.embed(&store, &model.compose(c, t, m).unwrap()).unwrap();
    let pos = embed(Some("a green circle"), TaskPromptName::Obj, ComposeMode::Suffix);
    let neg = embed(None, TaskPromptName::Ctxt, ComposeMode::Alone);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f32>::randn(&[8, 8, 7], 1.0, &mut rng);
    let at = |w| guided_noise(&net, &x, 300, &GuidanceSpec::new(pos.clone(), neg.clone(), w).unwrap()).unwrap();
    let single = |e| {
        use promptpaint::sampler::NoisePredictor;
        net.predict(&x.clone().reshape(&[1, 8, 8, 7]).unwrap(), 300, &[e]).unwrap().reshape(&[8, 8, 3]).unwrap()
    };
    let (e0, e1, e2) = (at(0.0), at(1.0), at(2.0));
    let d1 = e1.data().iter().zip(single(&pos).data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    let d0 = e0.data().iter().zip(single(&neg).data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    let lin = e2
        .data()
        .iter()
        .zip(e1.data().iter().zip(e0.data()))
        .map(|(a, (p, n))| (a - (2.0 * p - n)).abs())
        .fold(0.0f32, f32::max);
    ensure(
        d0 <= 1e-6 && d1 <= 1e-6 && lin <= 1e-6,
        format!("|w=0 - neg| {d0:.1e}, |w=1 - pos| {d1:.1e}, |e(2) - 2e(1) + e(0)| {lin:.1e} (tolerance 1e-6)"),
    )
}

fn forward_variance() -> Check {
    let sched = ScheduleConfig::default().build().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let x0 = Tensor::new(&[n, 1, 1], (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap();
    let eps = Tensor::new(&[n, 1, 1], (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()).unwrap();
    let mut worst: f64 = 0.0;
    for t in [0usize, 250, 500, 999] {
        let out = add_noise(&x0, t, &eps, &sched).map_err(|e| e.to_string())?;
        let xs: Vec<f64> = out.data().iter().map(|&v| v as f64).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let vx: f64 = {
            let d: Vec<f64> = x0.data().iter().map(|&v| v as f64).collect();
            let m = d.iter().sum::<f64>() / n as f64;
            d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64
        };
        let ab = sched.alpha_bar(t);
        let want = ab * vx + (1.0 - ab);
        worst = worst.max((var / want - 1.0).abs());
    }
    ensure(worst <= 0.02, format!("worst relative variance error {:.3}% at 1e5 draws", worst * 100.0))
}

fn prompt_gradients() -> Check {
    const H: f64 = 1e-5;
    let (model, store) = Model::init::<f64>(&ModelConfig::toy(), 4).map_err(|e| e.to_string())?;
    let run = RunConfig::toy();
    let mut routing = run.routing.clone();
    routing.t2i_prob = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch: Vec<_> = (0..6)
        .map(|i| {
            let scene = scene_from_seed(200 + i, &run.scene).unwrap();
            make_training_example(&scene, &mut rng, &model.vocab, &routing).unwrap()
        })
        .collect();
    let schedule = run.schedule.build().unwrap();
    let prepared = prepare_batch(&model, &batch, &schedule, 0.0, &mut rng).map_err(|e| e.to_string())?;
    let loss = |s: &ParamStore<f64>| batch_loss(&model, s, &prepared, false).unwrap().loss;
    let grads = batch_loss(&model, &store, &prepared, true).unwrap().grads.unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for name in TaskPromptName::ALL {
        let id = model.encoder.task_param(name).unwrap();
        let Some(g) = grads.get(id) else {
            continue;
        };
        let g = g.data().to_vec();
        let mut idx: Vec<usize> = (0..g.len()).collect();
        idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        for &i in idx.iter().take(4) {
            let mut p = store.clone();
            p.get_mut(id).data_mut()[i] += H;
            let mut m = store.clone();
            m.get_mut(id).data_mut()[i] -= H;
            let fd = (loss(&p) - loss(&m)) / (2.0 * H);
            worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-12));
            checked += 1;
        }
    }
    ensure(
        checked == 12 && worst < 1e-3,
        format!("{checked} prompt coordinates, worst relative error {worst:.2e} (tolerance 1e-3)"),
    )
}

fn frechet_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draw = |n: usize, f: usize, shift: f64, scale: f64, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..f)
                    .map(|j| scale * rng.sample::<f64, _>(StandardNormal) + if j == 0 { shift } else { 0.0 })
                    .collect()
            })
            .collect()
    };
    let a = draw(100_000, 2, 0.0, 1.0, &mut rng);
    let b = draw(100_000, 2, 2.0, 1.0, &mut rng);
    let gauss = frechet_distance(&a, &b).map_err(|e| e.to_string())?.distance;
    let same = frechet_distance(&a, &a).map_err(|e| e.to_string())?.distance;
    let (sa, sb) = (draw(600, 1, 0.5, 1.3, &mut rng), draw(800, 1, -0.2, 0.6, &mut rng));
    let stats = |v: &[Vec<f64>]| {
        let n = v.len() as f64;
        let m = v.iter().map(|r| r[0]).sum::<f64>() / n;
        (m, (v.iter().map(|r| (r[0] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
    };
    let ((m1, s1), (m2, s2)) = (stats(&sa), stats(&sb));
    let want = (m1 - m2).powi(2) + (s1 - s2).powi(2);
    let got = frechet_distance(&sa, &sb).map_err(|e| e.to_string())?.distance;
    ensure(
        (gauss - 4.0).abs() <= 0.1 && same.abs() <= 1e-6 && (got - want).abs() <= 1e-9,
        format!("shift 2 gives {gauss:.4} (4 ± 0.1); identical sets {same:.1e}; scalar case {got:.6} vs {want:.6}"),
    )
}

fn training_log() -> Check {
    let log = read_log(&artifacts().join("train_log.jsonl")).map_err(|e| format!("training log: {e}"))?;
    let window = |lo: u64, hi: u64| -> BTreeMap<Task, f64> {
        let mut sums: BTreeMap<Task, (f64, usize)> = BTreeMap::new();
        for r in log.iter().filter(|r| r.step >= lo && r.step < hi) {
            for (t, l) in &r.per_task {
                let e = sums.entry(*t).or_default();
                e.0 += l;
                e.1 += 1;
            }
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    };
    let (early, late) = (window(0, 100), window(1900, 2001));
    let mut parts = Vec::new();
    let mut ok = early.len() == 4 && late.len() == 4;
    for (t, e) in &early {
        let l = late.get(t).copied().unwrap_or(f64::NAN);
        ok &= l < *e;
        parts.push(format!("{} {e:.3}->{l:.3}", t.as_str()));
    }
    // every task prompt gets gradient somewhere in every 100-step window
    let last = log.last().map_or(0, |r| r.step);
    let mut starved = Vec::new();
    for w in 0..last / 100 {
        for g in [ParamGroup::Ctxt, ParamGroup::Obj, ParamGroup::Shape] {
            let fed = log
                .iter()
                .filter(|r| r.step > w * 100 && r.step <= (w + 1) * 100)
                .any(|r| r.grad_norms.get(&g).copied().unwrap_or(0.0) > 0.0);
            if !fed {
                starved.push(format!("{g:?}@{}", w * 100));
            }
        }
    }
    ok &= starved.is_empty();
    ensure(
        ok,
        format!(
            "per-task loss, steps 1-99 vs 1900-2000: {}; windows without prompt gradient: {}",
            parts.join(", "),
            starved.len()
        ),
    )
}

fn p1() -> Criterion {
    Criterion {
        id: "P1",
        title: "mechanism unit suite",
        checks: vec![
            ("4x4 exhaustive dilation, k=3, it 0..=2", exhaustive_dilation()),
            ("shape interpolation endpoints", interpolation_endpoints()),
            ("guidance endpoints and linearity", guidance_linearity()),
            ("forward-process Monte Carlo variance", forward_variance()),
            ("task-prompt finite differences", prompt_gradients()),
            ("Frechet oracles", frechet_oracles()),
            ("desk training log", training_log()),
        ],
    }
}

// P2

fn p2() -> Criterion {
    let cfg = RunConfig::default();
    let state = TrainState::init(&cfg).expect("default config");
    let mut counts: BTreeMap<Task, usize> = BTreeMap::new();
    let mut total = 0usize;
    let mut step = 0;
    while total < 100_000 {
        let mut rng = state.step_rng(step);
        for ex in state.make_batch(step, &mut rng).expect("batch") {
            *counts.entry(ex.task).or_default() += 1;
            total += 1;
        }
        step += 1;
    }
    let freq = |t: Task| counts.get(&t).copied().unwrap_or(0) as f64 / total as f64;
    let sub = 0.8 / 3.0;
    let mut checks = vec![(
        "t2i",
        ensure((freq(Task::T2i) - 0.2).abs() <= 0.01, format!("{:.4} (0.20 ± 0.01)", freq(Task::T2i))),
    )];
    for (name, t) in [("ctxt", Task::Ctxt), ("obj", Task::Obj), ("shape", Task::Shape)] {
        checks.push((name, ensure((freq(t) - sub).abs() <= 0.01, format!("{:.4} (0.2667 ± 0.01)", freq(t)))));
    }
    assert_eq!(RoutingConfig::default().t2i_prob, 0.2);
    Criterion {
        id: "P2",
        title: "routing statistics over 1e5 routed training examples",
        checks,
    }
}

// P3

fn p3() -> Criterion {
    let mut checks = Vec::new();
    let report: Result<EvalReport, String> = fs::read_to_string(artifacts().join("eval_report.json"))
        .map_err(|e| format!("no evaluation report: {e}"))
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()));
    let manifest = read_manifest(&artifacts().join("checkpoint")).map_err(|e| e.to_string());
    let ex = FeatureExtractor::load(&artifacts().join("extractor")).map_err(|e| e.to_string());
    match (&report, &manifest, &ex) {
        (Ok(r), Ok(m), Ok(ex)) => {
            checks.push((
                "checkpoint",
                ensure(
                    r.checkpoint_id == m.checkpoint_id,
                    format!("report {} / committed {} at step {}", r.checkpoint_id, m.checkpoint_id, m.step),
                ),
            ));
            let rec = ex.record.clone();
            checks.push((
                "classifier gate",
                ensure(
                    rec.as_ref().is_some_and(|x| x.accuracy >= 0.95) && rec.as_ref() == Some(&r.extractor),
                    format!("held-out accuracy {:.4} (>= 0.95)", r.extractor.accuracy),
                ),
            ));
            let t = &r.thresholds;
            checks.push((
                "(a) object",
                match &r.object {
                    Some(o) => ensure(
                        o.agreement >= t.object_agreement && o.trials >= 200,
                        format!("agreement {:.3} over {} trials (>= {})", o.agreement, o.trials, t.object_agreement),
                    ),
                    None => Err("not evaluated".into()),
                },
            ));
            checks.push((
                "(b) removal",
                match &r.removal {
                    Some(o) => ensure(
                        o.background_rate >= t.removal_background && o.margin >= t.removal_margin && o.trials >= 200,
                        format!(
                            "background {:.3} (>= {}), ablation {:.3}, margin {:.3} (>= {}) over {} trials",
                            o.background_rate, t.removal_background, o.ablation_background_rate, o.margin, t.removal_margin, o.trials
                        ),
                    ),
                    None => Err("not evaluated".into()),
                },
            ));
            checks.push((
                "(c) shape",
                match &r.shape {
                    Some(o) => ensure(
                        o.monotone && o.mean_spearman >= t.shape_spearman && o.trials >= 100,
                        format!(
                            "mean IoU {:?} at alpha {:?}, monotone {}, Spearman {:.3} (>= {}) over {} trials",
                            o.mean_iou.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
                            o.alphas,
                            o.monotone,
                            o.mean_spearman,
                            t.shape_spearman,
                            o.trials
                        ),
                    ),
                    None => Err("not evaluated".into()),
                },
            ));
            checks.push((
                "(d) context proxy-FID",
                match &r.fid {
                    Some(o) => ensure(
                        o.proxy_fid_context.distance < o.proxy_fid_object_random_caption.distance && o.scenes >= 500,
                        format!(
                            "context {:.3} vs object with random caption {:.3} over {} scenes",
                            o.proxy_fid_context.distance, o.proxy_fid_object_random_caption.distance, o.scenes
                        ),
                    ),
                    None => Err("not evaluated".into()),
                },
            ));
        }
        _ => {
            for (name, r) in [
                ("report", report.as_ref().err()),
                ("checkpoint", manifest.as_ref().err()),
                ("extractor", ex.as_ref().err()),
            ] {
                if let Some(e) = r {
                    checks.push((name, Err(e.clone())));
                }
            }
        }
    }
    Criterion {
        id: "P3",
        title: "trained-model behavioural suite (committed report)",
        checks,
    }
}

// P4

fn toy(steps: u64) -> RunConfig {
    let mut c = RunConfig::toy();
    c.train.steps = steps;
    c
}

fn round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = train(&toy(3), dir.path(), false).map_err(|e| e.to_string())?;
    let mut state = TrainState::init(&toy(3)).map_err(|e| e.to_string())?;
    for step in 0..3 {
        let mut rng = state.step_rng(step);
        let batch = state.make_batch(step, &mut rng).unwrap();
        state.training_step(&batch, &mut rng).unwrap();
    }
    let loaded = Pipeline::load(dir.path()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batch = state.make_batch(500, &mut rng).unwrap();
    let prepared = prepare_batch(&state.model, &batch, &state.schedule, 0.0, &mut rng).unwrap();
    let a = batch_loss(&state.model, &state.params, &prepared, false).unwrap().loss;
    let b = batch_loss(&loaded.model, &loaded.params, &prepared, false).unwrap().loss;
    ensure(
        (a - b).abs() <= 1e-6 && m.step == 3,
        format!("loss {a:.8} in memory, {b:.8} after save/load"),
    )
}

fn resume() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let straight = train(&toy(4), a.path(), false).map_err(|e| e.to_string())?;
    train(&toy(2), b.path(), false).map_err(|e| e.to_string())?;
    let resumed = train(&toy(4), b.path(), true).map_err(|e| e.to_string())?;
    let steps = |d: &Path| read_log(&d.join("train_log.jsonl")).unwrap().iter().map(|r| r.step).collect::<Vec<_>>();
    let (sa, sb) = (steps(a.path()), steps(b.path()));
    ensure(
        straight.step == 4 && resumed.step == 4 && sa == sb,
        format!("straight {sa:?}, resumed {sb:?}; checkpoints {} / {}", straight.checkpoint_id, resumed.checkpoint_id),
    )
}

fn inpaint_contracts(p: &Pipeline, label: &str) -> Check {
    let spec = &p.scene;
    let scene = scene_from_seed(eval_seed(123), spec).map_err(|e| e.to_string())?;
    let mask = bbox_mask(scene.objects[0].bbox, spec.size, spec.size).map_err(|e| e.to_string())?;
    let mut worst_out = 0usize;
    for mode in [Mode::Removal, Mode::Object, Mode::Context, Mode::Shape] {
        let mut req = InpaintRequest::new(scene.image.clone(), mask.clone(), mode);
        req.seed = 99;
        req.steps = Some(20);
        if mode.takes_caption() {
            req.caption = Some("a blue circle".into());
        }
        if mode.takes_alpha() {
            req.alpha = Some(0.5);
        }
        let x = p.inpaint(&req).map_err(|e| e.to_string())?;
        let y = p.inpaint(&req).map_err(|e| e.to_string())?;
        let (bx, by) = (encode_png_rgb(&x.image).unwrap(), encode_png_rgb(&y.image).unwrap());
        if bx != by {
            return Err(format!("{label} {mode:?}: repeated request produced different bytes"));
        }
        let decoded = decode_rgb(&bx).unwrap();
        let q = quantize(&scene.image);
        for (i, &on) in mask.bits().iter().enumerate() {
            if !on
                && (x.image.data()[i * 3..i * 3 + 3] != scene.image.data()[i * 3..i * 3 + 3]
                    || decoded.data()[i * 3..i * 3 + 3] != q.data()[i * 3..i * 3 + 3])
            {
                worst_out += 1;
            }
        }
    }
    ensure(
        worst_out == 0,
        format!("{label}: 4 modes byte-identical on repeat; {worst_out} unmasked pixels changed"),
    )
}

fn p4() -> Criterion {
    let toy_dir = tempfile::tempdir().unwrap();
    train(&toy(2), toy_dir.path(), false).unwrap();
    let toy_pipeline = Pipeline::load(toy_dir.path()).unwrap();
    let mut checks = vec![
        ("checkpoint loss round trip", round_trip()),
        ("resume step accounting", resume()),
        ("toy inpaint determinism and composite", inpaint_contracts(&toy_pipeline, "toy")),
    ];
    if let Ok(p) = Pipeline::load(&artifacts().join("checkpoint")) {
        checks.push(("trained inpaint determinism and composite", inpaint_contracts(&p, "trained")));
    }
    Criterion {
        id: "P4",
        title: "pipeline contracts",
        checks,
    }
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    for f in [p1 as fn() -> Criterion, p2, p3, p4] {
        let t = Instant::now();
        let c = f();
        c.print(t.elapsed().as_secs_f64());
        results.push(c);
    }
    for c in &results {
        if c.id != "P3" {
            assert!(c.passed(), "{} failed", c.id);
        }
    }
}
