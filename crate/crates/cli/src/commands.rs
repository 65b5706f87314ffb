use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cascade_core::cascade::{stage_plan, TrainHooks};
use cascade_core::checkpoint;
use cascade_core::checks;
use cascade_core::config::{Arm, RunConfig, CODE_VERSION};
use cascade_core::data::png_bytes_tagged;
use cascade_core::denoiser::Denoiser;
use cascade_core::eval::{svg_line_chart, MetricReport};
use cascade_core::experiment::{
    attach_stack, compare_table, efficiency, init_model, trainable_parameters, CompareRow, Experiment, RunRecord,
};
use cascade_core::Error;

use crate::{Command, ConfigArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => CliError::Usage(e.into()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(anyhow!("{msg}"))
}

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train {
            cfg,
            checkpoint,
            out,
            seed,
        } => train(&cfg, checkpoint.as_deref(), &out, seed),
        Command::Sample {
            cfg,
            checkpoint,
            n,
            seed,
            out,
        } => sample(&cfg, &checkpoint, n, seed, &out),
        Command::Eval {
            cfg,
            checkpoint,
            n,
            seed,
            out,
        } => eval(&cfg, &checkpoint, n, seed, &out),
        Command::Compare { descriptor, out } => compare(&descriptor, &out),
        Command::Plan { cfg } => plan(&cfg),
        Command::Check { cfg } => check(&cfg),
    }
}

fn load_config(path: Option<&Path>, overrides: &[String], arm: Option<Arm>) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { .. } | Error::Json(_) => usage(format!("cannot read config: {e}")),
            other => other.into(),
        })?,
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    if let Some(a) = arm {
        cfg.arm = a;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_of(args: &ConfigArgs) -> CliResult<RunConfig> {
    load_config(args.config.as_deref(), &args.overrides, args.arm)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn provenance_line(cfg: &RunConfig) -> String {
    format!("# config_hash={} code_version={CODE_VERSION}\n", cfg.hash())
}

fn load_model(cfg: &RunConfig, path: &Path) -> CliResult<(Denoiser<f32>, String)> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    let (model, manifest) = checkpoint::load(cfg, path)?;
    // the hash covers the arm, so compare under the checkpoint's own arm
    let mut same_arm = cfg.clone();
    if let Ok(arm) = manifest.arm.parse() {
        same_arm.arm = arm;
    }
    let current = same_arm.hash();
    if manifest.config_hash != current {
        log::warn!(
            "{} was written under config {} (current {}); tensor shapes match",
            path.display(),
            &manifest.config_hash[..12.min(manifest.config_hash.len())],
            &current[..12]
        );
    }
    Ok((model, checkpoint::file_hash(path)?))
}

struct TrainRun<'a> {
    exp: &'a Experiment,
    arm: Arm,
    out: &'a Path,
    final_steps: usize,
    /// Current upsampler stage when several are tuned in sequence, else 0.
    stage: usize,
}

impl TrainRun<'_> {
    fn path_for(&self, step: usize, diverged: bool) -> PathBuf {
        let name = if diverged {
            format!("{}_diverged_step{step}.ckpt", self.arm)
        } else if step == self.final_steps {
            format!("{}.ckpt", self.arm)
        } else if self.stage > 0 {
            format!("{}_stage{}_step{step}.ckpt", self.arm, self.stage)
        } else {
            format!("{}_step{step}.ckpt", self.arm)
        };
        self.out.join(name)
    }
}

impl TrainHooks for TrainRun<'_> {
    fn eval(&mut self, step: usize, model: &Denoiser<f32>) -> cascade_core::Result<Vec<(String, f64)>> {
        let (r, _) = self.exp.evaluate(model, self.arm, "")?;
        log::info!("step {step}: proxy_fid_r {:.4}, proxy_fid_b {:.4}", r.proxy_fid_r, r.proxy_fid_b);
        Ok(vec![
            ("proxy_fid_r".into(), r.proxy_fid_r),
            ("proxy_kid_r".into(), r.proxy_kid_r),
            ("proxy_fid_b".into(), r.proxy_fid_b),
            ("count_accuracy".into(), r.count_accuracy),
        ])
    }

    fn checkpoint(&mut self, step: usize, model: &Denoiser<f32>, diverged: bool) -> cascade_core::Result<Option<PathBuf>> {
        let path = self.path_for(step, diverged);
        checkpoint::save(&path, model, &self.exp.cfg.hash(), &self.arm.to_string(), step)?;
        if self.stage > 0 && !diverged && step == self.final_steps {
            self.stage += 1;
        }
        Ok(Some(path))
    }
}

fn train(args: &ConfigArgs, init: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = config_of(args)?;
    let arm = cfg.arm;
    if let Some(s) = seed {
        if arm == Arm::Base {
            cfg.pretrain.seed = s;
        } else {
            cfg.train.seed = s;
        }
    }
    let (mut model, init_name) = match (arm, init) {
        (_, Some(p)) => (load_model(&cfg, p)?.0, Some(p.display().to_string())),
        (Arm::Base, None) => (init_model(&cfg)?, None),
        (_, None) => return Err(usage(format!("arm {arm} needs --checkpoint <pretrained base model>"))),
    };
    let exp = Experiment::new(cfg.clone())?;
    create_dir(out)?;
    let steps = if arm == Arm::Base {
        cfg.pretrain.steps
    } else if arm.trains() {
        cfg.train.steps
    } else {
        0
    };
    let mut hooks = TrainRun {
        exp: &exp,
        arm,
        out,
        final_steps: steps,
        stage: if arm == Arm::OursT && exp.plan.r() > 1 { 1 } else { 0 },
    };
    log::info!(
        "training {} ({}) for {steps} steps per stage at {}",
        arm.display_name(),
        cfg.hash(),
        exp.plan
    );
    let start = Instant::now();
    let logs = exp.train(&mut model, arm, &mut hooks).map_err(|e| match e {
        Error::Diverged { .. } => CliError::Runtime(anyhow!("{e}")),
        other => other.into(),
    })?;
    let train_secs = start.elapsed().as_secs_f64();

    let mut csv = provenance_line(&cfg);
    csv.push_str("stage,step,metric,value\n");
    let mut curve = Vec::new();
    for (i, log) in logs.iter().enumerate() {
        let stage = if arm == Arm::OursT { i + 1 } else { 0 };
        for (step, loss) in &log.losses {
            csv.push_str(&format!("{stage},{step},loss,{loss}\n"));
        }
        for (step, name, v) in &log.evals {
            csv.push_str(&format!("{stage},{step},{name},{v}\n"));
            curve.push((*step, name.clone(), *v));
        }
    }
    write_file(&out.join(format!("{arm}_metrics.csv")), &csv)?;
    let losses: Vec<(String, Vec<(f64, f64)>)> = logs
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let pts = (1..=l.losses.len())
                .filter_map(|s| l.smoothed(s, 50).map(|v| (s as f64, v)))
                .collect();
            (format!("{arm} stage {}", i + 1), pts)
        })
        .collect();
    write_file(
        &out.join(format!("{arm}_loss.svg")),
        svg_line_chart(&format!("{} training loss", arm.display_name()), &losses),
    )?;

    let ckpt = out.join(format!("{arm}.ckpt"));
    let record = RunRecord {
        arm: arm.to_string(),
        config_hash: cfg.hash(),
        code_version: CODE_VERSION.into(),
        steps: logs.iter().map(|l| l.losses.len()).sum(),
        train_secs,
        trainable_params: trainable_parameters(&model, arm),
        checkpoint: ckpt.display().to_string(),
        checkpoint_hash: checkpoint::file_hash(&ckpt)?,
        init_checkpoint: init_name,
        curve,
    };
    write_file(
        &ckpt.with_extension("json"),
        serde_json::to_string_pretty(&record).map_err(anyhow::Error::from)?,
    )?;
    println!(
        "{}: {} steps in {train_secs:.1}s, {} trainable parameters -> {}",
        arm.display_name(),
        record.steps,
        record.trainable_params,
        ckpt.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SampleFile {
    file: String,
    sample: usize,
    seed: u64,
    stage: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Provenance<'a> {
    code_version: &'a str,
    config_hash: String,
    config: &'a RunConfig,
    arm: String,
    checkpoint: String,
    checkpoint_hash: String,
    base_seed: u64,
    /// Mean Pearson correlation of each pivot with the downsampled next stage.
    pivot_correlation: Vec<f64>,
    files: Vec<SampleFile>,
}

fn sample(args: &ConfigArgs, ckpt: &Path, n: usize, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let cfg = config_of(args)?;
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let arm = cfg.arm;
    let (model, ckpt_hash) = load_model(&cfg, ckpt)?;
    let exp = Experiment::new(cfg.clone())?;
    let base_seed = seed.unwrap_or(cfg.eval.sample_seed);
    let (seeds, labels) = exp.sample_requests(n, base_seed)?;
    let samples = exp.generate(&model, arm, &seeds, &labels)?;
    create_dir(out)?;
    let hash = cfg.hash();
    let final_stage = if arm == Arm::Base { 0 } else { exp.plan.r() };
    let mut files = Vec::new();
    for i in 0..n {
        let mut stages: Vec<(usize, &cascade_core::numerics::Tensor<f32>)> = samples.pivots.iter().enumerate().collect();
        stages.push((final_stage, &samples.target));
        for (stage, set) in stages {
            let img = set.batch_item(i)?;
            let seed_s = seeds[i].to_string();
            let stage_s = stage.to_string();
            let arm_s = arm.to_string();
            let text = [
                ("config_hash", hash.as_str()),
                ("code_version", CODE_VERSION),
                ("arm", arm_s.as_str()),
                ("seed", seed_s.as_str()),
                ("stage", stage_s.as_str()),
            ];
            let bytes = png_bytes_tagged(&img, &text)?;
            let name = format!("{arm}_{i:04}_seed{}_stage{stage}.png", seeds[i]);
            write_file(&out.join(&name), &bytes)?;
            files.push(SampleFile {
                file: name,
                sample: i,
                seed: seeds[i],
                stage,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
    }
    let mut pivot_correlation = Vec::new();
    for (r, pivot) in samples.pivots.iter().enumerate() {
        let next = samples.pivots.get(r + 1).unwrap_or(&samples.target);
        let rho = cascade_core::eval::pivot_correlation(pivot, next)?;
        log::info!("stage {r} pivot vs downsampled stage {} output: Pearson {rho:.3}", r + 1);
        pivot_correlation.push(rho);
    }
    let prov = Provenance {
        code_version: CODE_VERSION,
        config_hash: hash,
        config: &cfg,
        arm: arm.to_string(),
        checkpoint: ckpt.display().to_string(),
        checkpoint_hash: ckpt_hash,
        base_seed,
        pivot_correlation,
        files,
    };
    write_file(
        &out.join("provenance.json"),
        serde_json::to_string_pretty(&prov).map_err(anyhow::Error::from)?,
    )?;
    println!("wrote {} images for {n} samples to {}", prov.files.len(), out.display());
    Ok(())
}

fn append_report(out: &Path, report: &MetricReport) -> CliResult<()> {
    let csv = out.join("metrics.csv");
    let fresh = !csv.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv)
        .with_context(|| format!("opening {}", csv.display()))?;
    let mut text = String::new();
    if fresh {
        text.push_str(&format!("# code_version={CODE_VERSION}\n{}\n", MetricReport::csv_header()));
    }
    text.push_str(&report.csv_row());
    text.push('\n');
    f.write_all(text.as_bytes()).with_context(|| format!("writing {}", csv.display()))?;
    Ok(())
}

fn eval(args: &ConfigArgs, ckpt: &Path, n: Option<usize>, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let mut cfg = config_of(args)?;
    if let Some(n) = n {
        cfg.eval.n_samples = n;
    }
    if let Some(s) = seed {
        cfg.eval.sample_seed = s;
    }
    cfg.validate()?;
    let (model, ckpt_hash) = load_model(&cfg, ckpt)?;
    let exp = Experiment::new(cfg.clone())?;
    let (report, _) = exp.evaluate(&model, cfg.arm, &ckpt_hash)?;
    create_dir(out)?;
    let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    write_file(&out.join(format!("{}_report.json", cfg.arm)), &json)?;
    append_report(out, &report)?;
    println!("{json}");
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Descriptor {
    config: Option<PathBuf>,
    #[serde(default)]
    overrides: Vec<String>,
    arms: Vec<ArmEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ArmEntry {
    arm: Arm,
    checkpoint: PathBuf,
}

fn compare(descriptor: &Path, out: &Path) -> CliResult<()> {
    let text = fs::read_to_string(descriptor).map_err(|e| usage(format!("cannot read {}: {e}", descriptor.display())))?;
    let desc: Descriptor = serde_json::from_str(&text).map_err(|e| usage(format!("bad descriptor {}: {e}", descriptor.display())))?;
    if desc.arms.is_empty() {
        return Err(usage("descriptor lists no arms"));
    }
    let dir = descriptor.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { dir.join(p) };
    let missing: Vec<String> = desc
        .arms
        .iter()
        .filter(|a| !resolve(&a.checkpoint).exists())
        .map(|a| format!("{} ({})", a.arm, resolve(&a.checkpoint).display()))
        .collect();
    if !missing.is_empty() {
        return Err(usage(format!("missing checkpoint for arm(s): {}", missing.join(", "))));
    }
    let cfg = load_config(desc.config.as_ref().map(|p| resolve(p)).as_deref(), &desc.overrides, None)?;
    let exp = Experiment::new(cfg.clone())?;

    let mut evaluated = Vec::new();
    for entry in &desc.arms {
        let path = resolve(&entry.checkpoint);
        let (model, hash) = load_model(&cfg, &path)?;
        if entry.arm == Arm::OursT {
            for r in 1..=exp.plan.r() {
                if !model.stacks.contains_key(&r) {
                    return Err(CliError::Runtime(anyhow!(
                        "arm ours_t: {} has no upsampler for stage {r}",
                        path.display()
                    )));
                }
            }
        } else if entry.arm == Arm::OursTf && exp.plan.r() > 0 && !model.stacks.is_empty() {
            log::info!("ours_tf ignores the upsampler groups in {}", path.display());
        }
        log::info!("evaluating {} from {}", entry.arm.display_name(), path.display());
        let (report, _) = exp.evaluate(&model, entry.arm, &hash)?;
        let record: Option<RunRecord> = fs::read_to_string(path.with_extension("json"))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok());
        evaluated.push((entry.arm, trainable_parameters(&model, entry.arm), report, record));
    }
    let direct_secs = evaluated.iter().find(|e| e.0 == Arm::Direct).map(|e| e.2.runtime_secs);
    let rows: Vec<CompareRow> = evaluated
        .iter()
        .map(|(arm, params, report, record)| CompareRow {
            method: arm.display_name(),
            trainable_params: *params,
            steps: record.as_ref().filter(|_| arm.trains()).map_or(0, |r| r.steps),
            train_secs: record.as_ref().filter(|_| arm.trains()).map_or(0.0, |r| r.train_secs),
            infer_time: direct_secs.filter(|&d| d > 0.0).map(|d| report.runtime_secs / d),
            report: Some(report.clone()),
        })
        .collect();
    let ours = evaluated.iter().find(|e| e.0 == Arm::OursT);
    let ft = evaluated.iter().find(|e| e.0 == Arm::FullFt);
    let eff = match (ours, ft) {
        (Some((_, _, rep, Some(rec))), Some((_, _, _, Some(ft_rec)))) => {
            efficiency(rep.proxy_fid_r, rec.steps, &ft_rec.metric("proxy_fid_r"))
        }
        _ => None,
    };
    if let (Some(e), Some((_, _, _, Some(ft_rec)))) = (&eff, ft) {
        let curve: Vec<(f64, f64)> = ft_rec.metric("proxy_fid_r").iter().map(|&(s, v)| (s as f64, v)).collect();
        let max = curve.iter().map(|p| p.0).fold(e.tuned_steps as f64, f64::max);
        let series = vec![
            ("full fine-tuning".to_string(), curve),
            ("Ours-T".to_string(), vec![(0.0, e.target_fid), (max, e.target_fid)]),
        ];
        create_dir(out)?;
        write_file(
            &out.join("efficiency.svg"),
            svg_line_chart("proxy FID_r vs training steps", &series),
        )?;
    }
    let (csv, table) = compare_table(&rows, eff.as_ref(), &cfg.hash());
    create_dir(out)?;
    write_file(&out.join("compare.csv"), &csv)?;
    write_file(&out.join("compare.txt"), &table)?;
    let reports: Vec<&MetricReport> = evaluated.iter().map(|e| &e.2).collect();
    write_file(
        &out.join("reports.json"),
        serde_json::to_string_pretty(&reports).map_err(anyhow::Error::from)?,
    )?;
    print!("{table}");
    Ok(())
}

fn plan(args: &ConfigArgs) -> CliResult<()> {
    let cfg = config_of(args)?;
    let p = cfg.plan()?;
    let s = cfg.noise_schedule()?;
    let sampler = cfg.eval.sampler();
    println!("plan: {p}");
    println!(
        "schedule: {:?}, T = {}, K = {}, alpha_bar_K = {:.5}",
        cfg.schedule.kind,
        s.num_steps(),
        s.pivot_step(),
        s.alpha_bar(s.pivot_step())
    );
    for (r, res) in p.stages.iter().enumerate() {
        let ddim = stage_plan(&s, r, &sampler)?;
        let start = if r == 0 {
            "noise at T".to_string()
        } else {
            format!("pivot at K = {}", s.pivot_step())
        };
        println!("  stage {r}: {res}, {} DDIM steps from {start}", ddim.transitions().count());
    }
    let mut model = init_model(&cfg)?;
    let base = model.base_parameter_count();
    for r in 1..=p.r() {
        attach_stack(&mut model, &cfg, r)?;
    }
    let ups = trainable_parameters(&model, Arm::OursT);
    println!("base parameters: {base}");
    println!(
        "upsampler parameters: {ups} over {} stage(s), ratio {:.4}%",
        p.r(),
        100.0 * ups as f64 / base.max(1) as f64
    );
    Ok(())
}

fn check(args: &ConfigArgs) -> CliResult<()> {
    let cfg = config_of(args)?;
    let start = Instant::now();
    let outcomes = checks::run_all(&cfg.unet, &cfg.eval.sampler())?;
    let mut failed = 0;
    for o in &outcomes {
        println!("[{}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        failed += (!o.passed) as usize;
    }
    println!("{} checks, {failed} failed, {:.1}s", outcomes.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(CliError::Runtime(anyhow!("{failed} invariant check(s) failed")));
    }
    Ok(())
}
