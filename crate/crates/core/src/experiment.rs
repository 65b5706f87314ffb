//! Orchestration of arms: model construction, training, sampling and
//! evaluation on one corpus.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{attach_lowrank, direct_inference, prepare_full_finetune, ADAPTER_GROUP};
use crate::cascade::{
    sample_cascade, sample_ddim, train_loop, CascadePlan, Mode, Objective, Resolution, TrainConfig, TrainHooks, TrainLog, TrainSet,
};
use crate::config::{Arm, RunConfig};
use crate::data::{corpus_specs, ingest_png, render, Dataset, SceneSpec};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::eval::{base_consistency, count_statistics, frechet_distance, kernel_distance, patch_metrics, FeatureExtractor, MetricReport};
use crate::numerics::{avg_pool, Tensor};
use crate::rng::{derive_seed, stream, tag};
use crate::schedule::NoiseSchedule;
use crate::upsampler::{freeze_base_attach, stage_group};

/// Init stream tag of the adapter factors.
const ADAPTER_INIT: u64 = 1000;

/// Build the untrained base model of `cfg`.
pub fn init_model(cfg: &RunConfig) -> Result<Denoiser<f32>> {
    Denoiser::new(&cfg.unet, &mut stream(cfg.init_seed, &[tag::INIT]))
}

/// Attach a zero-initialized stack for `stage`, freezing everything else.
pub fn attach_stack(model: &mut Denoiser<f32>, cfg: &RunConfig, stage: usize) -> Result<()> {
    let stack = model.new_stack(stage, &cfg.upsampler, &mut stream(cfg.init_seed, &[tag::INIT, stage as u64]))?;
    freeze_base_attach(model, stack)
}

pub fn attach_adapter(model: &mut Denoiser<f32>, cfg: &RunConfig, rank: usize) -> Result<()> {
    attach_lowrank(
        model,
        rank,
        &cfg.lowrank.filter,
        &mut stream(cfg.init_seed, &[tag::INIT, ADAPTER_INIT]),
    )
}

enum Source {
    Synthetic(Vec<SceneSpec>),
    /// Target-resolution images; the last `n_eval` are held out.
    Png(Dataset),
}

/// Generated images of one arm.
#[derive(Clone, Debug)]
pub struct Samples {
    pub target: Tensor<f32>,
    /// Base-resolution generations of the same seeds (the stage-0 pivots for
    /// cascaded arms).
    pub base: Tensor<f32>,
    /// Clean output of every stage before the last, for cascaded arms.
    pub pivots: Vec<Tensor<f32>>,
    /// Requested class per sample.
    pub labels: Vec<usize>,
    pub seeds: Vec<u64>,
}

pub struct Experiment {
    pub cfg: RunConfig,
    pub schedule: NoiseSchedule,
    pub plan: CascadePlan,
    source: Source,
}

impl Experiment {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.noise_schedule()?;
        let plan = cfg.plan()?;
        let source = match &cfg.data.png_dir {
            Some(dir) => {
                let ds = ingest_png(dir, plan.target())?;
                if ds.len() < 2 {
                    return Err(Error::Config {
                        field: "data.png_dir".into(),
                        reason: "need at least two images (train and eval)".into(),
                    });
                }
                Source::Png(ds)
            }
            None => {
                let base = cfg.cascade.base;
                Source::Synthetic(corpus_specs(
                    cfg.data.seed,
                    cfg.data.n_train + cfg.data.n_eval,
                    base.h.min(base.w),
                    &cfg.data.scene,
                )?)
            }
        };
        Ok(Self {
            cfg,
            schedule,
            plan,
            source,
        })
    }

    /// Whether labels are object counts the auditor can check.
    pub fn has_counts(&self) -> bool {
        matches!(self.source, Source::Synthetic(_))
    }

    fn split(&self, train: bool, res: Resolution) -> Result<Dataset> {
        match &self.source {
            Source::Synthetic(specs) => {
                let n_train = self.cfg.data.n_train;
                let chosen = if train { &specs[..n_train] } else { &specs[n_train..] };
                let items = chosen.par_iter().map(|s| render(s, res)).collect::<Result<Vec<_>>>()?;
                Ok(Dataset {
                    images: Tensor::stack_batch(&items)?,
                    labels: chosen.iter().map(SceneSpec::label).collect(),
                })
            }
            Source::Png(ds) => {
                let n_eval = self.cfg.data.n_eval.min(ds.len() / 2).max(1);
                let range = if train { 0..ds.len() - n_eval } else { ds.len() - n_eval..ds.len() };
                let full = self.plan.target();
                let factor = full.h / res.h;
                let items = range
                    .map(|i| {
                        let x = ds.images.batch_item(i)?;
                        if factor > 1 {
                            avg_pool(&x, factor)
                        } else {
                            Ok(x)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let labels = vec![0; items.len()];
                Ok(Dataset {
                    images: Tensor::stack_batch(&items)?,
                    labels,
                })
            }
        }
    }

    pub fn train_set(&self, res: Resolution) -> Result<Dataset> {
        self.split(true, res)
    }

    pub fn eval_set(&self, res: Resolution) -> Result<Dataset> {
        self.split(false, res)
    }

    /// Attach the arm's trainable modules and set trainability.
    pub fn prepare(&self, model: &mut Denoiser<f32>, arm: Arm) -> Result<()> {
        match arm {
            Arm::OursT => {
                for r in 1..=self.plan.r() {
                    if !model.stacks.contains_key(&r) {
                        attach_stack(model, &self.cfg, r)?;
                    }
                }
            }
            Arm::Lowrank { rank } => match &model.lowrank {
                Some(l) if l.rank == rank => {}
                Some(l) => {
                    return Err(Error::invalid(format!("model carries a rank-{} adapter, arm wants {rank}", l.rank)));
                }
                None => attach_adapter(model, &self.cfg, rank)?,
            },
            _ => {}
        }
        model.store.set_all_trainable(false);
        match arm {
            Arm::Base | Arm::FullFt => prepare_full_finetune(model),
            Arm::Lowrank { .. } => model.store.set_group_trainable(ADAPTER_GROUP, true),
            Arm::OursT => model.store.set_group_trainable(&stage_group(self.plan.r().max(1)), true),
            Arm::OursTf | Arm::Direct => {}
        }
        Ok(())
    }

    fn train_config(&self, arm: Arm) -> TrainConfig {
        match arm {
            Arm::Base => TrainConfig {
                lr: self.cfg.pretrain.lr,
                batch: self.cfg.pretrain.batch,
                steps: self.cfg.pretrain.steps,
                seed: self.cfg.pretrain.seed,
                ..self.cfg.train.clone()
            },
            _ => self.cfg.train.clone(),
        }
    }

    /// Train `arm` from `model` (the pretrained base for every arm but
    /// `Base`). Upsampler stacks are tuned lowest stage first.
    pub fn train(&self, model: &mut Denoiser<f32>, arm: Arm, hooks: &mut dyn TrainHooks) -> Result<Vec<TrainLog>> {
        self.prepare(model, arm)?;
        let tc = self.train_config(arm);
        let mut logs = Vec::new();
        match arm {
            Arm::OursTf | Arm::Direct => {
                if tc.steps > 0 {
                    log::info!("arm {arm} has nothing to train; ignoring train.steps");
                }
                let empty = self.empty_set();
                let idle = TrainConfig { steps: 0, ..tc };
                logs.push(train_loop(
                    model,
                    &Objective::Denoising,
                    &self.train_view(&empty),
                    &self.schedule,
                    &idle,
                    hooks,
                )?);
            }
            Arm::OursT => {
                for r in 1..=self.plan.r() {
                    model.store.set_all_trainable(false);
                    model.store.set_group_trainable(&stage_group(r), true);
                    let data = self.train_set(self.plan.stages[r])?;
                    let objective = Objective::Upsampler {
                        stage: r,
                        tune: self.cfg.tune_config(),
                    };
                    let stage_tc = TrainConfig {
                        seed: derive_seed(tc.seed, &[r as u64]),
                        ..tc.clone()
                    };
                    logs.push(train_loop(
                        model,
                        &objective,
                        &self.train_view(&data),
                        &self.schedule,
                        &stage_tc,
                        hooks,
                    )?);
                }
            }
            Arm::Base | Arm::FullFt | Arm::Lowrank { .. } => {
                let res = if arm == Arm::Base { self.plan.base() } else { self.plan.target() };
                let data = self.train_set(res)?;
                logs.push(train_loop(
                    model,
                    &Objective::Denoising,
                    &self.train_view(&data),
                    &self.schedule,
                    &tc,
                    hooks,
                )?);
            }
        }
        Ok(logs)
    }

    fn empty_set(&self) -> Dataset {
        Dataset {
            images: Tensor::zeros(&[0, self.cfg.unet.in_channels, 1, 1]),
            labels: Vec::new(),
        }
    }

    fn train_view<'a>(&self, data: &'a Dataset) -> TrainSet<'a> {
        TrainSet {
            images: &data.images,
            labels: (self.cfg.unet.num_classes > 0).then_some(data.labels.as_slice()),
        }
    }

    /// Seeds and class labels for `n` evaluation samples.
    pub fn sample_requests(&self, n: usize, seed: u64) -> Result<(Vec<u64>, Vec<usize>)> {
        let ref_labels = self.eval_labels()?;
        let seeds = (0..n).map(|i| derive_seed(seed, &[tag::EVAL, i as u64])).collect();
        let labels = (0..n).map(|i| ref_labels[i % ref_labels.len()]).collect();
        Ok((seeds, labels))
    }

    fn eval_labels(&self) -> Result<Vec<usize>> {
        Ok(match &self.source {
            Source::Synthetic(specs) => specs[self.cfg.data.n_train..].iter().map(SceneSpec::label).collect(),
            Source::Png(_) => vec![0],
        })
    }

    /// Sample `seeds` with `arm`, in fixed-size batches.
    pub fn generate(&self, model: &Denoiser<f32>, arm: Arm, seeds: &[u64], labels: &[usize]) -> Result<Samples> {
        let sampler = self.cfg.eval.sampler();
        let conditional = self.cfg.unet.num_classes > 0;
        let chunks: Vec<(usize, usize)> = (0..seeds.len())
            .step_by(self.cfg.eval.batch)
            .map(|lo| (lo, (lo + self.cfg.eval.batch).min(seeds.len())))
            .collect();
        let parts = chunks
            .par_iter()
            .map(|&(lo, hi)| -> Result<(Tensor<f32>, Tensor<f32>, Vec<Tensor<f32>>)> {
                let s = &seeds[lo..hi];
                let classes = conditional.then(|| &labels[lo..hi]);
                match arm {
                    Arm::OursTf | Arm::OursT => {
                        let mode = if arm == Arm::OursT { Mode::Tuned } else { Mode::TuningFree };
                        let out = sample_cascade(
                            model,
                            &self.schedule,
                            &self.plan,
                            mode,
                            classes,
                            s,
                            &sampler,
                            self.cfg.upsampler.t_probe,
                        )?;
                        let base = out.pivots.first().cloned().unwrap_or_else(|| out.image.clone());
                        Ok((out.image, base, out.pivots))
                    }
                    Arm::Base => {
                        let img = sample_ddim(model, &self.schedule, self.plan.base(), classes, s, &sampler)?;
                        Ok((img.clone(), img, Vec::new()))
                    }
                    Arm::Direct | Arm::FullFt | Arm::Lowrank { .. } => {
                        let high = direct_inference(model, &self.schedule, self.plan.target(), classes, s, &sampler)?;
                        let base = sample_ddim(model, &self.schedule, self.plan.base(), classes, s, &sampler)?;
                        Ok((high, base, Vec::new()))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let concat = |pick: &dyn Fn(&(Tensor<f32>, Tensor<f32>, Vec<Tensor<f32>>)) -> &Tensor<f32>| -> Result<Tensor<f32>> {
            let mut items = Vec::with_capacity(seeds.len());
            for p in &parts {
                let t = pick(p);
                for i in 0..t.shape()[0] {
                    items.push(t.batch_item(i)?);
                }
            }
            Tensor::stack_batch(&items)
        };
        let n_pivots = parts.first().map_or(0, |p| p.2.len());
        Ok(Samples {
            target: concat(&|p| &p.0)?,
            base: concat(&|p| &p.1)?,
            pivots: (0..n_pivots).map(|k| concat(&|p| &p.2[k])).collect::<Result<_>>()?,
            labels: labels.to_vec(),
            seeds: seeds.to_vec(),
        })
    }

    pub fn extractor(&self) -> FeatureExtractor {
        FeatureExtractor::new(self.cfg.eval.extractor_seed, self.cfg.unet.in_channels)
    }

    /// Every proxy metric of `samples` against the held-out references.
    pub fn score(&self, arm: Arm, samples: &Samples, reference: &Dataset, extractor: &FeatureExtractor) -> Result<MetricReport> {
        let gen = extractor.features(&samples.target)?;
        let real = extractor.features(&reference.images)?;
        let res = reference.resolution();
        let patch = self.cfg.patch_size().min(res.h.min(res.w));
        let (pfid, pkid) = patch_metrics(
            extractor,
            &samples.target,
            &reference.images,
            patch,
            self.cfg.eval.n_patches,
            self.cfg.eval.sample_seed,
        )?;
        let (acc, mae) = if self.has_counts() {
            count_statistics(&samples.target, &samples.labels, self.plan.base().h)?
        } else {
            (f64::NAN, f64::NAN)
        };
        Ok(MetricReport {
            arm: arm.to_string(),
            proxy_fid_r: frechet_distance(&gen, &real)?,
            proxy_kid_r: kernel_distance(&gen, &real)?.max(0.0),
            proxy_pfid_r: pfid,
            proxy_pkid_r: pkid.max(0.0),
            proxy_fid_b: base_consistency(extractor, &samples.base, &samples.target)?,
            count_accuracy: acc,
            count_mae: mae,
            n_samples: samples.seeds.len(),
            n_reference: reference.len(),
            extractor_seed: extractor.seed,
            sample_seed: self.cfg.eval.sample_seed,
            runtime_secs: 0.0,
            config_hash: self.cfg.hash(),
            checkpoint_hash: String::new(),
        })
    }

    /// Generate `eval.n_samples` images with `arm` and score them.
    pub fn evaluate(&self, model: &Denoiser<f32>, arm: Arm, checkpoint_hash: &str) -> Result<(MetricReport, Samples)> {
        let start = Instant::now();
        let (seeds, labels) = self.sample_requests(self.cfg.eval.n_samples, self.cfg.eval.sample_seed)?;
        let samples = self.generate(model, arm, &seeds, &labels)?;
        let res = if arm == Arm::Base { self.plan.base() } else { self.plan.target() };
        let reference = self.eval_set(res)?;
        let mut report = self.score(arm, &samples, &reference, &self.extractor())?;
        report.checkpoint_hash = checkpoint_hash.to_string();
        report.runtime_secs = start.elapsed().as_secs_f64();
        Ok((report, samples))
    }
}

/// Trainable parameters the arm optimizes.
pub fn trainable_parameters(model: &Denoiser<f32>, arm: Arm) -> usize {
    let counts = model.store.group_counts();
    let group = |g: &str| counts.get(g).copied().unwrap_or(0);
    match arm {
        Arm::OursT => model.stacks.keys().map(|&r| group(&stage_group(r))).sum(),
        Arm::Lowrank { .. } => group(ADAPTER_GROUP),
        Arm::Base | Arm::FullFt => model.base_parameter_count(),
        Arm::OursTf | Arm::Direct => 0,
    }
}

/// Sidecar of a training run; the only artifact carrying wall-clock time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arm: String,
    pub config_hash: String,
    pub code_version: String,
    /// Optimizer steps summed over stages.
    pub steps: usize,
    pub train_secs: f64,
    pub trainable_params: usize,
    pub checkpoint: String,
    pub checkpoint_hash: String,
    /// Checkpoint the run started from, if any.
    pub init_checkpoint: Option<String>,
    /// `(step, metric, value)` from periodic evaluation.
    pub curve: Vec<(usize, String, f64)>,
}

impl RunRecord {
    /// `(step, value)` points of one metric.
    pub fn metric(&self, name: &str) -> Vec<(usize, f64)> {
        self.curve.iter().filter(|(_, n, _)| n == name).map(|&(s, _, v)| (s, v)).collect()
    }
}

/// One row of the comparison table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub trainable_params: usize,
    pub steps: usize,
    pub train_secs: f64,
    /// Sampling wall-clock relative to Direct Inference.
    pub infer_time: Option<f64>,
    pub report: Option<MetricReport>,
}

/// Published baselines this crate does not implement.
pub const NOT_IMPLEMENTED: [&str; 2] = ["Attn-SF", "ScaleCrafter"];

/// Steps at which full fine-tuning first matches the tuned arm's
/// `proxy_fid_r`, divided by the tuned arm's steps. `None` in `first_step`
/// means it never got there within `ft_curve`; the ratio is then a lower
/// bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub target_fid: f64,
    pub tuned_steps: usize,
    pub first_step: Option<usize>,
    pub max_step: usize,
    pub ratio: f64,
    pub lower_bound: bool,
}

pub fn efficiency(target_fid: f64, tuned_steps: usize, ft_curve: &[(usize, f64)]) -> Option<Efficiency> {
    let max_step = ft_curve.iter().map(|&(s, _)| s).max()?;
    if tuned_steps == 0 {
        return None;
    }
    let first = ft_curve.iter().filter(|&&(_, f)| f <= target_fid).map(|&(s, _)| s).min();
    let reached = first.unwrap_or(max_step);
    Some(Efficiency {
        target_fid,
        tuned_steps,
        first_step: first,
        max_step,
        ratio: reached as f64 / tuned_steps as f64,
        lower_bound: first.is_none(),
    })
}

fn fmt_metric(v: f64, digits: usize) -> String {
    if v.is_finite() {
        format!("{v:.digits$}")
    } else {
        "n/a".into()
    }
}

const COLUMNS: [&str; 12] = [
    "method",
    "params",
    "steps",
    "train_secs",
    "infer_time",
    "proxy_fid_r",
    "proxy_kid_r",
    "proxy_pfid_r",
    "proxy_pkid_r",
    "proxy_fid_b",
    "count_accuracy",
    "count_mae",
];

fn row_cells(row: &CompareRow) -> Vec<String> {
    let mut cells = vec![
        row.method.clone(),
        row.trainable_params.to_string(),
        row.steps.to_string(),
        format!("{:.1}", row.train_secs),
        row.infer_time.map_or("n/a".into(), |t| format!("{t:.2}x")),
    ];
    match &row.report {
        Some(r) => cells.extend([
            fmt_metric(r.proxy_fid_r, 4),
            fmt_metric(r.proxy_kid_r, 5),
            fmt_metric(r.proxy_pfid_r, 4),
            fmt_metric(r.proxy_pkid_r, 5),
            fmt_metric(r.proxy_fid_b, 4),
            fmt_metric(r.count_accuracy, 3),
            fmt_metric(r.count_mae, 3),
        ]),
        None => cells.extend(std::iter::repeat_n("n/a (not implemented)".to_string(), 7)),
    }
    cells
}

/// `(csv, aligned text)`; unimplemented baselines are appended as n/a rows.
pub fn compare_table(rows: &[CompareRow], eff: Option<&Efficiency>, config_hash: &str) -> (String, String) {
    let mut all: Vec<Vec<String>> = rows.iter().map(row_cells).collect();
    for name in NOT_IMPLEMENTED {
        all.push(row_cells(&CompareRow {
            method: name.into(),
            trainable_params: 0,
            steps: 0,
            train_secs: 0.0,
            infer_time: None,
            report: None,
        }));
    }
    let mut csv = format!("# config_hash={config_hash} code_version={}\n", crate::config::CODE_VERSION);
    csv.push_str(&COLUMNS.join(","));
    csv.push('\n');
    for r in &all {
        csv.push_str(&r.join(","));
        csv.push('\n');
    }
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| all.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| -> String {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let header: Vec<String> = COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut text = line(&header);
    text.push('\n');
    text.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    text.push('\n');
    for r in &all {
        text.push_str(&line(r));
        text.push('\n');
    }
    if let Some(e) = eff {
        let summary = format!(
            "full fine-tuning budget ratio: {}{:.2}x (target proxy_fid_r {:.4} at {} tuned steps; {})\n",
            if e.lower_bound { ">= " } else { "" },
            e.ratio,
            e.target_fid,
            e.tuned_steps,
            match e.first_step {
                Some(s) => format!("reached at step {s}"),
                None => format!("not reached within {} steps", e.max_step),
            }
        );
        text.push_str(&summary);
        csv.push_str(&format!(
            "# efficiency_ratio={}{}\n",
            if e.lower_bound { ">=" } else { "" },
            e.ratio
        ));
    }
    (csv, text)
}
