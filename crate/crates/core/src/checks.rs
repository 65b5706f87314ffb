//! Runtime invariant suite: gradient checks, schedule checks and the
//! zero-init equivalence of tuned and tuning-free sampling.

use serde::Serialize;

use crate::baselines::{attach_lowrank, LayerFilter};
use crate::cascade::{plan, sample_cascade, Mode, Resolution, SamplerConfig};
use crate::denoiser::{timesteps, Denoiser, UNetConfig};
use crate::error::Result;
use crate::nn::Ctx;
use crate::numerics::gradcheck::{check_inputs, check_params, GradCheck};
use crate::numerics::{bilinear_upsample, Graph, ParamStore, Tensor, Var};
use crate::rng::stream;
use crate::schedule::{pivot_replace, NoiseSchedule, ScheduleKind};
use crate::upsampler::{freeze_base_attach, UpsamplerConfig, STAGE_FACTOR};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const ALPHA_BAR_TOLERANCE: f64 = 1e-10;
pub const PIVOT_DRAWS: usize = 10_000;
/// Mean band in standard errors and relative variance tolerance.
pub const PIVOT_MEAN_SIGMAS: f64 = 3.0;
pub const PIVOT_VAR_REL: f64 = 0.05;
pub const ZERO_INIT_TOLERANCE: f64 = 1e-6;
pub const ZERO_INIT_SEEDS: usize = 16;

#[derive(Clone, Debug, Serialize)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    /// The measured quantity compared against the tolerance.
    pub value: f64,
    pub detail: String,
}

impl Outcome {
    fn grad(name: &str, rep: GradCheck) -> Self {
        Self {
            name: format!("gradient: {name}"),
            passed: rep.max_rel_error < FD_TOLERANCE,
            value: rep.max_rel_error,
            detail: format!(
                "max rel err {:.2e} over {} probes (worst {})",
                rep.max_rel_error, rep.checked, rep.worst
            ),
        }
    }
}

fn project(g: &Graph<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let p = g.constant(Tensor::randn(y.shape(), &mut stream(seed, &[])));
    g.sum(&g.mul(y, &p)?)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut stream(seed, &[]))
}

type OpCheck = (
    &'static str,
    Vec<Tensor<f64>>,
    f64,
    Box<dyn Fn(&Graph<f64>, &[Var<f64>]) -> Result<Var<f64>>>,
);

fn op_checks() -> Vec<OpCheck> {
    let x4 = || randn(&[2, 3, 6, 5], 1);
    let pair = || vec![randn(&[2, 3, 2, 2], 2), randn(&[2, 3, 2, 2], 3)];
    vec![
        (
            "conv2d stride 2",
            vec![x4(), randn(&[4, 3, 3, 3], 4), randn(&[4], 5)],
            FD_STEP,
            Box::new(|g, v| project(g, &g.conv2d(&v[0], &v[1], Some(&v[2]), 2, 1)?, 10)),
        ),
        (
            "conv2d stride 1",
            vec![x4(), randn(&[4, 3, 3, 3], 4), randn(&[4], 5)],
            FD_STEP,
            Box::new(|g, v| project(g, &g.conv2d(&v[0], &v[1], Some(&v[2]), 1, 1)?, 11)),
        ),
        (
            "linear",
            vec![randn(&[3, 5], 6), randn(&[4, 5], 7), randn(&[4], 8)],
            FD_STEP,
            Box::new(|g, v| project(g, &g.linear(&v[0], &v[1], Some(&v[2]))?, 12)),
        ),
        (
            "matmul + reshape",
            vec![randn(&[3, 2], 9), randn(&[2, 6], 10)],
            FD_STEP,
            Box::new(|g, v| project(g, &g.reshape(&g.matmul(&v[0], &v[1])?, &[1, 2, 3, 3])?, 13)),
        ),
        (
            "group_norm",
            vec![randn(&[2, 8, 3, 3], 11), randn(&[8], 12), randn(&[8], 13)],
            FD_STEP,
            Box::new(|g, v| project(g, &g.group_norm(&v[0], &v[1], &v[2], 4, 1e-5)?, 14)),
        ),
        (
            "silu",
            vec![randn(&[2, 3, 3, 3], 14)],
            FD_STEP,
            Box::new(|g, v| project(g, &g.silu(&v[0])?, 15)),
        ),
        ("add", pair(), FD_STEP, Box::new(|g, v| project(g, &g.add(&v[0], &v[1])?, 16))),
        ("sub", pair(), FD_STEP, Box::new(|g, v| project(g, &g.sub(&v[0], &v[1])?, 17))),
        ("mul", pair(), FD_STEP, Box::new(|g, v| project(g, &g.mul(&v[0], &v[1])?, 18))),
        ("scale", pair(), FD_STEP, Box::new(|g, v| project(g, &g.scale(&v[0], 0.3)?, 19))),
        ("mse", pair(), FD_STEP, Box::new(|g, v| g.mse(&v[0], &v[1]))),
        (
            "bilinear_upsample",
            vec![randn(&[1, 2, 4, 4], 20)],
            FD_STEP,
            Box::new(|g, v| project(g, &g.bilinear_upsample(&v[0], 2)?, 21)),
        ),
        (
            "nearest_upsample",
            vec![randn(&[1, 2, 4, 4], 22)],
            FD_STEP,
            Box::new(|g, v| project(g, &g.nearest_upsample(&v[0], 2)?, 23)),
        ),
        (
            "avg_pool",
            vec![randn(&[1, 2, 4, 4], 24)],
            FD_STEP,
            Box::new(|g, v| project(g, &g.avg_pool(&v[0], 2)?, 25)),
        ),
        (
            "scale_shift",
            vec![randn(&[2, 3, 2, 2], 26), randn(&[2, 6], 27)],
            FD_STEP,
            Box::new(|g, v| project(g, &g.scale_shift(&v[0], &v[1])?, 28)),
        ),
        (
            "concat_channels",
            vec![randn(&[2, 1, 2, 3], 29), randn(&[2, 2, 2, 3], 30)],
            FD_STEP,
            Box::new(|g, v| project(g, &g.concat_channels(&[&v[0], &v[1]])?, 31)),
        ),
        (
            "embedding",
            vec![randn(&[4, 3], 32)],
            FD_STEP,
            Box::new(|g, v| project(g, &g.embedding(&v[0], &[2, 0, 2])?, 33)),
        ),
        // high-frequency channels have derivatives proportional to t
        (
            "timestep_embedding",
            vec![Tensor::new(&[3], vec![1.0, 250.0, 999.0]).expect("shape")],
            1e-5,
            Box::new(|g, v| project(g, &g.timestep_embedding(&v[0], 8)?, 34)),
        ),
    ]
}

fn tiny_unet() -> UNetConfig {
    UNetConfig {
        in_channels: 2,
        base_channels: 4,
        levels: 2,
        blocks_per_level: 1,
        time_embed_dim: 8,
        num_classes: 3,
        groupnorm_groups: 2,
    }
}

fn perturb(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut r = stream(seed, &[]);
    for id in ids {
        let noise = Tensor::uniform(store.value(id).shape(), -0.3, 0.3, &mut r);
        let v = store.value(id).add(&noise).expect("same shape");
        store.assign(id, v).expect("same shape");
    }
}

/// Base UNet and upsampler stack differentiated end to end, every
/// parameter trainable.
fn composite_check() -> Result<GradCheck> {
    let mut m = Denoiser::<f64>::new(&tiny_unet(), &mut stream(40, &[]))?;
    let ucfg = UpsamplerConfig {
        hidden_channels: 2,
        time_embed_dim: 4,
        ..Default::default()
    };
    let stack = m.new_stack(1, &ucfg, &mut stream(41, &[]))?;
    perturb(&mut m.store, 42);
    m.store.set_all_trainable(true);
    let low = randn(&[1, 2, 4, 4], 43);
    let high = randn(&[1, 2, 8, 8], 44);
    let unet = m.unet.clone();
    check_params(&m.store, FD_STEP, 2, |g, store| {
        let ctx = Ctx::new(g, store);
        let (_, pivot) = unet.forward(&ctx, &g.constant(low.clone()), &g.constant(timesteps(&[1])), Some(&[2]), None)?;
        let t = g.constant(timesteps(&[37]));
        let deltas = stack.forward(&ctx, &pivot, &t)?;
        let (eps, _) = unet.forward(&ctx, &g.constant(high.clone()), &t, Some(&[2]), Some(&deltas))?;
        project(g, &eps, 45)
    })
}

fn lowrank_check() -> Result<GradCheck> {
    let mut m = Denoiser::<f64>::new(&tiny_unet(), &mut stream(50, &[]))?;
    attach_lowrank(&mut m, 2, &LayerFilter::AllEligible, &mut stream(51, &[]))?;
    perturb(&mut m.store, 52);
    let x = randn(&[1, 2, 8, 8], 53);
    let unet = m.unet.clone();
    let adapter = m.lowrank.clone();
    check_params(&m.store, FD_STEP, 2, |g, store| {
        let ctx = Ctx::new(g, store).with_lowrank(adapter.as_ref());
        let (eps, _) = unet.forward(&ctx, &g.constant(x.clone()), &g.constant(timesteps(&[500])), Some(&[1]), None)?;
        project(g, &eps, 54)
    })
}

/// Every differentiable op, the composite model and the adapter path.
pub fn gradient_checks() -> Result<Vec<Outcome>> {
    let mut out = Vec::new();
    for (name, inputs, step, f) in op_checks() {
        out.push(Outcome::grad(name, check_inputs(&inputs, step, 64, f)?));
    }
    out.push(Outcome::grad("composite UNet + upsampler stack", composite_check()?));
    out.push(Outcome::grad("UNet with low-rank adapter", lowrank_check()?));
    Ok(out)
}

/// Cumulative-product identity and Monte-Carlo moments of pivot
/// replacement.
pub fn schedule_checks(draws: usize) -> Result<Vec<Outcome>> {
    let mut out = Vec::new();
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        let s = NoiseSchedule::new(kind, 1000, 700)?;
        let mut prod = 1.0f64;
        let mut worst = 0.0f64;
        for t in 1..=s.num_steps() {
            prod *= 1.0 - s.beta(t);
            worst = worst.max((s.alpha_bar(t) - prod).abs());
        }
        out.push(Outcome {
            name: format!("alpha_bar cumulative product ({kind:?})"),
            passed: worst <= ALPHA_BAR_TOLERANCE,
            value: worst,
            detail: format!("max |alpha_bar_t - prod(1 - beta)| = {worst:.2e}"),
        });
    }

    let s = NoiseSchedule::new(ScheduleKind::Linear, 1000, 700)?;
    let z0 = randn(&[1, 1, 2, 2], 60).cast::<f32>();
    let mean = bilinear_upsample(&z0, STAGE_FACTOR)?.scale(s.alpha_bar(700).sqrt() as f32);
    let var = 1.0 - s.alpha_bar(700);
    let n = mean.numel();
    let (mut sum, mut sq) = (vec![0f64; n], vec![0f64; n]);
    let mut rng = stream(61, &[]);
    for _ in 0..draws {
        let z = pivot_replace(&z0, &s, STAGE_FACTOR, &mut rng)?;
        for (i, &v) in z.data().iter().enumerate() {
            sum[i] += v as f64;
            sq[i] += (v as f64) * (v as f64);
        }
    }
    let dn = draws as f64;
    let se = (var / dn).sqrt();
    let (mut worst_mean, mut worst_var) = (0f64, 0f64);
    for i in 0..n {
        let m = sum[i] / dn;
        let v = (sq[i] - dn * m * m) / (dn - 1.0);
        worst_mean = worst_mean.max((m - mean.data()[i] as f64).abs() / se);
        worst_var = worst_var.max((v / var - 1.0).abs());
    }
    out.push(Outcome {
        name: "pivot replacement mean".into(),
        passed: worst_mean <= PIVOT_MEAN_SIGMAS,
        value: worst_mean,
        detail: format!("worst element {worst_mean:.2} standard errors from sqrt(ab_K) up(z0) over {draws} draws"),
    });
    out.push(Outcome {
        name: "pivot replacement variance".into(),
        passed: worst_var <= PIVOT_VAR_REL,
        value: worst_var,
        detail: format!("worst relative deviation {:.2}% from 1 - ab_K = {var:.5}", 100.0 * worst_var),
    });
    Ok(out)
}

/// Freshly attached upsamplers leave cascade sampling unchanged.
pub fn zero_init_equivalence(unet: &UNetConfig, seeds: usize, sampler: &SamplerConfig) -> Result<Outcome> {
    let mut m = Denoiser::<f32>::new(unet, &mut stream(70, &[]))?;
    let stack = m.new_stack(1, &UpsamplerConfig::default(), &mut stream(71, &[]))?;
    freeze_base_attach(&mut m, stack)?;
    let s = NoiseSchedule::new(ScheduleKind::Linear, 1000, 700)?;
    let d = unet.divisor();
    let p = plan(Resolution::square(d), Resolution::square(2 * d))?;
    let seeds: Vec<u64> = (0..seeds as u64).collect();
    let classes: Option<Vec<usize>> = (unet.num_classes > 0).then(|| seeds.iter().map(|&s| s as usize % unet.num_classes).collect());
    let tf = sample_cascade(&m, &s, &p, Mode::TuningFree, classes.as_deref(), &seeds, sampler, 1)?;
    let tuned = sample_cascade(&m, &s, &p, Mode::Tuned, classes.as_deref(), &seeds, sampler, 1)?;
    let diff = tf.image.max_abs_diff(&tuned.image)? as f64;
    Ok(Outcome {
        name: "zero-init equivalence (tuned vs tuning-free)".into(),
        passed: diff <= ZERO_INIT_TOLERANCE,
        value: diff,
        detail: format!("max |difference| {diff:.2e} over {} seeds at {p}", seeds.len()),
    })
}

pub fn run_all(unet: &UNetConfig, sampler: &SamplerConfig) -> Result<Vec<Outcome>> {
    let mut out = gradient_checks()?;
    out.extend(schedule_checks(PIVOT_DRAWS)?);
    out.push(zero_init_equivalence(unet, ZERO_INIT_SEEDS, sampler)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes() {
        for o in gradient_checks().unwrap() {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }

    #[test]
    fn schedule_suite_passes() {
        for o in schedule_checks(PIVOT_DRAWS).unwrap() {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }

    #[test]
    fn zero_init_on_tiny_model() {
        let o = zero_init_equivalence(
            &tiny_unet(),
            3,
            &SamplerConfig {
                ddim_steps: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(o.passed, "{}", o.detail);
    }
}
