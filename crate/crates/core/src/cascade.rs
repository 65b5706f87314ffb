//! Scale decomposition, staged inference and upsampler tuning.

use std::fmt;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{timesteps, Denoiser, FeatureGroup};
use crate::error::{Error, Result};
use crate::numerics::{Float, Graph, Tensor, Var};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{stream, tag};
use crate::schedule::{clipped_eps, ddim_step, forward_diffuse, forward_diffuse_batch, pivot_replace, DdimPlan, NoiseSchedule};
use crate::upsampler::STAGE_FACTOR;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub h: usize,
    pub w: usize,
}

impl Resolution {
    pub fn square(d: usize) -> Self {
        Self { h: d, w: d }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CascadePlan {
    /// `stages[0]` is the base resolution, the last entry the target.
    pub stages: Vec<Resolution>,
}

impl CascadePlan {
    pub fn base(&self) -> Resolution {
        self.stages[0]
    }

    pub fn target(&self) -> Resolution {
        *self.stages.last().expect("plan has at least one stage")
    }

    /// Number of adaptation stages `R`.
    pub fn r(&self) -> usize {
        self.stages.len() - 1
    }
}

impl fmt::Display for CascadePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.stages.iter().map(Resolution::to_string).collect();
        write!(f, "{} (R = {})", names.join(" -> "), self.r())
    }
}

/// `R = ceil(log4(pixels(target) / pixels(base)))` stages, each doubling
/// both axes.
pub fn plan(base: Resolution, target: Resolution) -> Result<CascadePlan> {
    if base.h == 0 || base.w == 0 {
        return Err(Error::invalid(format!("base resolution {base} is empty")));
    }
    if target.h < base.h || target.w < base.w {
        return Err(Error::invalid(format!("target {target} is smaller than base {base}")));
    }
    let mut stages = vec![base];
    let mut cur = base;
    while cur.pixels() < target.pixels() {
        cur = Resolution {
            h: cur.h * STAGE_FACTOR,
            w: cur.w * STAGE_FACTOR,
        };
        stages.push(cur);
    }
    if cur != target {
        return Err(Error::invalid(format!(
            "target {target} is not reachable from {base} by stages that double both axes"
        )));
    }
    Ok(CascadePlan { stages })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TuningFree,
    Tuned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub eta: f64,
    /// Clamp every clean-sample estimate to [-1, 1] before the update.
    pub clip_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ddim_steps: 50,
            eta: 0.0,
            clip_x0: true,
        }
    }
}

/// Stage-`r` plan: the full span for `r = 0`, `K -> 0` afterwards, with the
/// step count scaled to the span.
pub fn stage_plan(s: &NoiseSchedule, stage: usize, sampler: &SamplerConfig) -> Result<DdimPlan> {
    if stage == 0 {
        DdimPlan::new(s.num_steps(), sampler.ddim_steps, sampler.eta)
    } else {
        let k = s.pivot_step();
        let steps = (sampler.ddim_steps * k).div_ceil(s.num_steps()).max(1);
        DdimPlan::new(k, steps, sampler.eta)
    }
}

/// Per-sample standard normal draws stacked into a batch.
pub fn noise_batch<F: Float>(shape: &[usize], seeds: &[u64], tags: &[u64]) -> Result<Tensor<F>> {
    if shape.first() != Some(&seeds.len()) {
        return Err(Error::invalid(format!("{} seeds for batch shape {shape:?}", seeds.len())));
    }
    let item = &shape[1..];
    let items: Vec<Tensor<F>> = seeds
        .iter()
        .map(|&s| Tensor::randn(&[&[1], item].concat(), &mut stream(s, tags)))
        .collect();
    Tensor::stack_batch(&items)
}

/// Source of per-step skip deltas during a stage.
enum Injection<'a, F> {
    None,
    Stack {
        stack: &'a crate::upsampler::UpsamplerStack,
        pivot: FeatureGroup<F>,
    },
}

/// Denoise `z` along `plan`; DDIM noise (eta > 0) is drawn per sample.
#[allow(clippy::too_many_arguments)]
fn run_plan<F: Float>(
    model: &Denoiser<F>,
    s: &NoiseSchedule,
    plan: &DdimPlan,
    mut z: Tensor<F>,
    classes: Option<&[usize]>,
    injection: &Injection<F>,
    seeds: &[u64],
    stage: usize,
    clip_x0: bool,
) -> Result<Tensor<F>> {
    let b = seeds.len();
    for (i, (t, t_prev)) in plan.transitions().enumerate() {
        let deltas = match injection {
            Injection::None => None,
            Injection::Stack { stack, pivot } => Some(stack.apply(&model.store, pivot, t)?),
        };
        let (mut eps, _) = model.denoise(&z, &vec![t; b], classes, deltas.as_ref())?;
        if clip_x0 {
            eps = clipped_eps(&z, &eps, t, s)?;
        }
        let noise = if plan.eta > 0.0 {
            Some(noise_batch(z.shape(), seeds, &[tag::DDIM_NOISE, stage as u64, i as u64])?)
        } else {
            None
        };
        z = ddim_step(&z, &eps, t, t_prev, s, plan.eta, noise.as_ref())?;
    }
    Ok(z)
}

/// Plain DDIM sampling from pure noise over the full timestep span.
pub fn sample_ddim<F: Float>(
    model: &Denoiser<F>,
    s: &NoiseSchedule,
    res: Resolution,
    classes: Option<&[usize]>,
    seeds: &[u64],
    sampler: &SamplerConfig,
) -> Result<Tensor<F>> {
    let shape = [seeds.len(), model.config().in_channels, res.h, res.w];
    model.config().check_extent(res.h, res.w)?;
    let z = noise_batch(&shape, seeds, &[tag::SAMPLE_NOISE, 0])?;
    let plan = stage_plan(s, 0, sampler)?;
    run_plan(model, s, &plan, z, classes, &Injection::None, seeds, 0, sampler.clip_x0)
}

#[derive(Clone, Debug)]
pub struct CascadeOutput<F> {
    pub image: Tensor<F>,
    /// Clean output of every stage before the last, base first.
    pub pivots: Vec<Tensor<F>>,
}

/// Staged inference. Stage 0 samples the base resolution from noise; each
/// later stage starts from the pivot re-noised to `K`.
#[allow(clippy::too_many_arguments)]
pub fn sample_cascade<F: Float>(
    model: &Denoiser<F>,
    s: &NoiseSchedule,
    plan: &CascadePlan,
    mode: Mode,
    classes: Option<&[usize]>,
    seeds: &[u64],
    sampler: &SamplerConfig,
    t_probe: usize,
) -> Result<CascadeOutput<F>> {
    if mode == Mode::Tuned {
        if let Some(r) = (1..=plan.r()).find(|r| !model.stacks.contains_key(r)) {
            return Err(Error::invalid(format!("tuned mode needs an upsampler stack for stage {r}")));
        }
    }
    for st in &plan.stages {
        model.config().check_extent(st.h, st.w)?;
    }
    let mut z0 = sample_ddim(model, s, plan.base(), classes, seeds, sampler)?;
    let mut pivots = Vec::with_capacity(plan.r());
    for r in 1..=plan.r() {
        let start = pivot_replace_batch(&z0, s, seeds, r)?;
        let injection = match mode {
            Mode::TuningFree => Injection::None,
            Mode::Tuned => Injection::Stack {
                stack: &model.stacks[&r],
                pivot: model.extract_pivot_features(&z0, t_probe, classes)?,
            },
        };
        let ddim = stage_plan(s, r, sampler)?;
        let next = run_plan(model, s, &ddim, start, classes, &injection, seeds, r, sampler.clip_x0)?;
        pivots.push(std::mem::replace(&mut z0, next));
    }
    Ok(CascadeOutput { image: z0, pivots })
}

/// Pivot replacement with per-sample noise streams.
pub fn pivot_replace_batch<F: Float>(z0_prev: &Tensor<F>, s: &NoiseSchedule, seeds: &[u64], stage: usize) -> Result<Tensor<F>> {
    let items = (0..seeds.len())
        .map(|i| {
            let mut rng = stream(seeds[i], &[tag::PIVOT_NOISE, stage as u64]);
            pivot_replace(&z0_prev.batch_item(i)?, s, STAGE_FACTOR, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&items)
}

/// Pixel-space downsample used for ground-truth pivots: 2x2 area mean.
pub fn downsample<F: Float>(x: &Tensor<F>) -> Result<Tensor<F>> {
    crate::numerics::avg_pool(x, STAGE_FACTOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    /// Noise the ground-truth pivot to a step in `1..=max_t` before feature
    /// extraction; 0 disables it.
    pub pivot_augment_max_t: usize,
    pub t_probe: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            pivot_augment_max_t: 0,
            t_probe: 1,
        }
    }
}

fn draw_timesteps<R: Rng + ?Sized>(n: usize, max: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..=max)).collect()
}

/// Upsampler tuning loss for stage `stage`: ground-truth pivot from `downsample(x0)`,
/// `t ~ U{1..K}`, epsilon loss with injected pivot features.
#[allow(clippy::too_many_arguments)]
pub fn tune_loss<F: Float, R: Rng + ?Sized>(
    g: &Graph<F>,
    model: &Denoiser<F>,
    stage: usize,
    x0: &Tensor<F>,
    classes: Option<&[usize]>,
    s: &NoiseSchedule,
    cfg: &TuneConfig,
    rng: &mut R,
) -> Result<Var<F>> {
    let stack = model
        .stacks
        .get(&stage)
        .ok_or_else(|| Error::invalid(format!("no upsampler stack attached for stage {stage}")))?;
    let (b, _, h, w) = x0.dims4()?;
    let mut pivot = downsample(x0)?;
    if cfg.pivot_augment_max_t > 0 {
        let ta = draw_timesteps(b, cfg.pivot_augment_max_t.min(s.num_steps()), rng);
        pivot = forward_diffuse_batch(&pivot, &ta, &Tensor::randn(pivot.shape(), rng), s)?;
    }
    let features = model.extract_pivot_features(&pivot, cfg.t_probe, classes)?;
    let ts = draw_timesteps(b, s.pivot_step(), rng);
    let eps = Tensor::randn(&[b, x0.shape()[1], h, w], rng);
    let z_t = forward_diffuse_batch(x0, &ts, &eps, s)?;

    let ctx = model.ctx(g);
    let t = g.constant(timesteps(&ts));
    let feats: Vec<Var<F>> = features.levels.into_iter().map(|f| g.constant(f)).collect();
    let deltas = stack.forward(&ctx, &feats, &t)?;
    let (eps_hat, _) = model.unet.forward(&ctx, &g.constant(z_t), &t, classes, Some(&deltas))?;
    g.mse(&eps_hat, &g.constant(eps))
}

/// Denoising loss over `t ~ U{1..T}` with whatever is trainable.
pub fn denoising_loss<F: Float, R: Rng + ?Sized>(
    g: &Graph<F>,
    model: &Denoiser<F>,
    x0: &Tensor<F>,
    classes: Option<&[usize]>,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Var<F>> {
    let b = x0.shape().first().copied().unwrap_or(0);
    let ts = draw_timesteps(b, s.num_steps(), rng);
    let eps = Tensor::randn(x0.shape(), rng);
    let z_t = forward_diffuse_batch(x0, &ts, &eps, s)?;
    let ctx = model.ctx(g);
    let (eps_hat, _) = model
        .unet
        .forward(&ctx, &g.constant(z_t), &g.constant(timesteps(&ts)), classes, None)?;
    g.mse(&eps_hat, &g.constant(eps))
}

/// Which loss a training run optimizes.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// Upsampler tuning for one stage's stack.
    Upsampler { stage: usize, tune: TuneConfig },
    /// Plain denoising at the data resolution, for pretraining, full fine-tuning and
    /// low-rank adapters.
    Denoising,
}

/// One optimizer step; returns the loss value.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Denoiser<f32>,
    opt: &mut Adam<f32>,
    objective: &Objective,
    x0: &Tensor<f32>,
    classes: Option<&[usize]>,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<f32> {
    let g = Graph::new();
    let loss = match objective {
        Objective::Upsampler { stage, tune } => tune_loss(&g, model, *stage, x0, classes, s, tune, rng)?,
        Objective::Denoising => denoising_loss(&g, model, x0, classes, s, rng)?,
    };
    let value = loss.value().item()?;
    let grads = g.backward(&loss)?;
    opt.step(&mut model.store, &grads)?;
    Ok(value)
}

/// One upsampler tuning step for stage `stage`.
pub fn tune_step<R: Rng + ?Sized>(
    model: &mut Denoiser<f32>,
    opt: &mut Adam<f32>,
    stage: usize,
    batch: (&Tensor<f32>, Option<&[usize]>),
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<f32> {
    let objective = Objective::Upsampler {
        stage,
        tune: TuneConfig::default(),
    };
    train_step(model, opt, &objective, batch.0, batch.1, s, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            batch: 16,
            steps: 2000,
            seed: 0,
            eval_every: 0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

/// Training images plus optional class labels.
#[derive(Clone, Debug)]
pub struct TrainSet<'a> {
    pub images: &'a Tensor<f32>,
    pub labels: Option<&'a [usize]>,
}

impl TrainSet<'_> {
    pub fn len(&self) -> usize {
        self.images.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Deterministic minibatch for `step`, drawn with replacement.
    pub fn batch(&self, seed: u64, step: usize, size: usize) -> Result<(Tensor<f32>, Option<Vec<usize>>)> {
        if self.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let mut rng = stream(seed, &[tag::TRAIN_BATCH, step as u64]);
        let idx: Vec<usize> = (0..size).map(|_| rng.gen_range(0..self.len())).collect();
        let items = idx.iter().map(|&i| self.images.batch_item(i)).collect::<Result<Vec<_>>>()?;
        let labels = self.labels.map(|l| idx.iter().map(|&i| l[i]).collect());
        Ok((Tensor::stack_batch(&items)?, labels))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// `(step, loss)` for every step, 1-based.
    pub losses: Vec<(usize, f32)>,
    /// `(step, metric name, value)` from the eval hook.
    pub evals: Vec<(usize, String, f64)>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    /// Mean loss over the `window` steps ending at `step` (1-based).
    pub fn smoothed(&self, step: usize, window: usize) -> Option<f64> {
        if step == 0 || step > self.losses.len() || window == 0 {
            return None;
        }
        let lo = step.saturating_sub(window);
        let w = &self.losses[lo..step];
        Some(w.iter().map(|&(_, l)| l as f64).sum::<f64>() / w.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,metric,value\n");
        for (step, loss) in &self.losses {
            out.push_str(&format!("{step},loss,{loss}\n"));
        }
        for (step, name, v) in &self.evals {
            out.push_str(&format!("{step},{name},{v}\n"));
        }
        out
    }
}

/// Hooks invoked by [`train_loop`].
pub trait TrainHooks {
    fn eval(&mut self, _step: usize, _model: &Denoiser<f32>) -> Result<Vec<(String, f64)>> {
        Ok(Vec::new())
    }

    /// Persist the model; called at `checkpoint_every`, at the end, and with
    /// `diverged = true` before aborting on a non-finite loss.
    fn checkpoint(&mut self, _step: usize, _model: &Denoiser<f32>, _diverged: bool) -> Result<Option<PathBuf>> {
        Ok(None)
    }

    fn log(&mut self) -> Option<&mut dyn std::io::Write> {
        None
    }
}

/// No-op hooks.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

pub fn train_loop(
    model: &mut Denoiser<f32>,
    objective: &Objective,
    data: &TrainSet,
    s: &NoiseSchedule,
    cfg: &TrainConfig,
    hooks: &mut dyn TrainHooks,
) -> Result<TrainLog> {
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    })?;
    let mut log = TrainLog::default();
    if let Some(w) = hooks.log() {
        writeln!(w, "step,metric,value").map_err(|e| Error::io("train log", e))?;
    }
    for step in 1..=cfg.steps {
        let (x0, labels) = data.batch(cfg.seed, step, cfg.batch)?;
        let mut rng = stream(cfg.seed, &[tag::TRAIN_BATCH, step as u64, 1]);
        let loss = match train_step(model, &mut opt, objective, &x0, labels.as_deref(), s, &mut rng) {
            Ok(l) if l.is_finite() => l,
            Ok(l) => return Err(diverged(model, hooks, step, format!("loss {l}"))),
            Err(Error::NonFinite { op }) => return Err(diverged(model, hooks, step, format!("non-finite value in {op}"))),
            Err(e) => return Err(e),
        };
        log.losses.push((step, loss));
        if let Some(w) = hooks.log() {
            writeln!(w, "{step},loss,{loss}").map_err(|e| Error::io("train log", e))?;
        }
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!(
                "step {step}: loss {loss:.5} (smoothed {:.5})",
                log.smoothed(step, cfg.log_every).unwrap_or(f64::NAN)
            );
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            for (name, v) in hooks.eval(step, model)? {
                if let Some(w) = hooks.log() {
                    writeln!(w, "{step},{name},{v}").map_err(|e| Error::io("train log", e))?;
                }
                log.evals.push((step, name, v));
            }
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step != cfg.steps {
            log.checkpoints.extend(hooks.checkpoint(step, model, false)?);
        }
    }
    log.checkpoints.extend(hooks.checkpoint(cfg.steps, model, false)?);
    Ok(log)
}

fn diverged(model: &Denoiser<f32>, hooks: &mut dyn TrainHooks, step: usize, detail: String) -> Error {
    let snapshot = match hooks.checkpoint(step, model, true) {
        Ok(Some(p)) => format!("; snapshot written to {}", p.display()),
        Ok(None) => String::new(),
        Err(e) => format!("; snapshot failed: {e}"),
    };
    Error::Diverged {
        step,
        detail: format!("{detail}{snapshot}"),
    }
}

/// Reference composition used to cross-check [`sample_cascade`]: each stage
/// written out with module-level calls only.
#[doc(hidden)]
pub fn scripted_tuning_free<F: Float>(
    model: &Denoiser<F>,
    s: &NoiseSchedule,
    plan: &CascadePlan,
    seed: u64,
    sampler: &SamplerConfig,
) -> Result<Tensor<F>> {
    let base = plan.base();
    let c = model.config().in_channels;
    let mut z = Tensor::randn(&[1, c, base.h, base.w], &mut stream(seed, &[tag::SAMPLE_NOISE, 0]));
    for r in 0..=plan.r() {
        let ddim = stage_plan(s, r, sampler)?;
        if r > 0 {
            let up = crate::numerics::bilinear_upsample(&z, 2)?;
            let eps = Tensor::randn(up.shape(), &mut stream(seed, &[tag::PIVOT_NOISE, r as u64]));
            z = forward_diffuse(&up, s.pivot_step(), &eps, s)?;
        }
        for (t, t_prev) in ddim.transitions() {
            let mut eps = model.denoise(&z, &[t], None, None)?.0;
            if sampler.clip_x0 {
                eps = clipped_eps(&z, &eps, t, s)?;
            }
            z = ddim_step(&z, &eps, t, t_prev, s, 0.0, None)?;
        }
    }
    Ok(z)
}
