use proptest::prelude::*;

use cascade_core::baselines::{attach_lowrank, LayerFilter};
use cascade_core::cascade::{plan, stage_plan, Resolution, SamplerConfig};
use cascade_core::checkpoint;
use cascade_core::config::RunConfig;
use cascade_core::data::{random_scene, SceneConfig};
use cascade_core::denoiser::{Denoiser, UNetConfig};
use cascade_core::eval::{frechet_distance, kernel_distance, FeatureExtractor, Features};
use cascade_core::numerics::Tensor;
use cascade_core::rng::stream;
use cascade_core::schedule::{DdimPlan, NoiseSchedule, ScheduleKind};
use cascade_core::upsampler::{freeze_base_attach, UpsamplerConfig};

fn small_unet(base_channels: usize, levels: usize) -> UNetConfig {
    UNetConfig {
        base_channels,
        levels,
        blocks_per_level: 1,
        time_embed_dim: 16,
        groupnorm_groups: 4,
        num_classes: 3,
        ..Default::default()
    }
}

fn features(n: usize, d: usize, shift: f64, seed: u64) -> Features {
    let t = Tensor::<f64>::randn(&[n, d], &mut stream(seed, &[]));
    Features::from_fn(n, d, |i, j| t.data()[i * d + j] + shift)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn schedules_are_valid(cosine in any::<bool>(), t in 10usize..2000, k_frac in 0.05f64..0.95) {
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let k = ((t as f64 * k_frac) as usize).clamp(1, t - 1);
        let s = NoiseSchedule::new(kind, t, k).unwrap();
        let mut prod = 1.0f64;
        for step in 1..=t {
            let b = s.beta(step);
            prop_assert!(b > 0.0 && b < 1.0);
            prod *= 1.0 - b;
            prop_assert!((s.alpha_bar(step) - prod).abs() <= 1e-10);
            if step > 1 {
                prop_assert!(s.alpha_bar(step) < s.alpha_bar(step - 1));
            }
        }
        prop_assert!(s.pivot_step() < s.num_steps());
    }

    #[test]
    fn ddim_plans_descend_from_their_start(start in 1usize..1000, steps in 1usize..80) {
        let steps = steps.min(start);
        let p = DdimPlan::new(start, steps, 0.0).unwrap();
        prop_assert_eq!(p.step_indices.len(), steps);
        prop_assert_eq!(p.step_indices[0], start);
        prop_assert!(p.step_indices.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn later_stages_start_at_the_pivot_step(stage in 0usize..4, ddim in 1usize..60) {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000, 700).unwrap();
        let p = stage_plan(&s, stage, &SamplerConfig { ddim_steps: ddim, ..Default::default() }).unwrap();
        let start = if stage == 0 { 1000 } else { 700 };
        prop_assert_eq!(p.start_step, start);
        prop_assert_eq!(p.step_indices[0], start);
    }

    #[test]
    fn cascade_plans_double_each_axis(base in 1usize..24, doublings in 0u32..4) {
        let target = base << doublings;
        let p = plan(Resolution::square(base), Resolution::square(target)).unwrap();
        prop_assert_eq!(p.r(), doublings as usize);
        let ratio = (target * target) as f64 / (base * base) as f64;
        prop_assert_eq!(p.r(), ratio.log(4.0).round().ceil() as usize);
        for w in p.stages.windows(2) {
            prop_assert!(w[1].h <= 2 * w[0].h && w[1].w <= 2 * w[0].w);
        }
        prop_assert_eq!(p.target(), Resolution::square(target));
    }

    #[test]
    fn fresh_upsamplers_emit_zero_and_match_skip_shapes(levels in 2usize..4, seed in 0u64..1000, t in 1usize..1000) {
        let unet = small_unet(8, levels);
        let mut m = Denoiser::<f32>::new(&unet, &mut stream(seed, &[])).unwrap();
        let stack = m.new_stack(1, &UpsamplerConfig::default(), &mut stream(seed, &[1])).unwrap();
        let d = unet.divisor();
        let pivot = Tensor::<f32>::uniform(&[2, 3, d, d], -1.0, 1.0, &mut stream(seed, &[2]));
        let feats = m.extract_pivot_features(&pivot, 1, Some(&[0, 1])).unwrap();
        let deltas = stack.apply(&m.store, &feats, t).unwrap();
        let want = unet.skip_shapes(2, 2 * d, 2 * d);
        prop_assert_eq!(deltas.levels.len(), want.len());
        for (delta, shape) in deltas.levels.iter().zip(&want) {
            prop_assert_eq!(delta.shape(), &shape[..]);
            prop_assert!(delta.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn lowrank_counts_follow_the_closed_form(rank in 1usize..6, seed in 0u64..1000) {
        let mut m = Denoiser::<f32>::new(&small_unet(8, 2), &mut stream(seed, &[])).unwrap();
        attach_lowrank(&mut m, rank, &LayerFilter::AllEligible, &mut stream(seed, &[1])).unwrap();
        let adapter = m.lowrank.as_ref().unwrap();
        let census = m.parameter_census();
        prop_assert_eq!(census.trainable, adapter.expected_parameters());
        let sum: usize = adapter.factors.values().map(|f| rank * (f.in_dim + f.out_dim)).sum();
        prop_assert_eq!(census.trainable, sum);
    }

    #[test]
    fn random_scenes_keep_their_margins(seed in 0u64..10_000, base in 12usize..40) {
        let cfg = SceneConfig::default();
        let spec = random_scene(&cfg, base, &mut stream(seed, &[])).unwrap();
        prop_assert!(spec.validate().is_ok());
        prop_assert!((cfg.min_objects..=cfg.max_objects).contains(&spec.objects.len()));
    }

    #[test]
    fn distances_are_symmetric_and_vanish_on_identical_sets(n in 4usize..30, shift in -1.0f64..1.0, seed in 0u64..1000) {
        let a = features(n, 6, 0.0, seed);
        let b = features(n, 6, shift, seed + 1);
        prop_assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-8);
        prop_assert!(kernel_distance(&a, &a).unwrap().abs() <= 1e-6);
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() <= 1e-8, "{ab} vs {ba}");
        prop_assert!((kernel_distance(&a, &b).unwrap() - kernel_distance(&b, &a).unwrap()).abs() <= 1e-8);
        prop_assert!(frechet_distance(&a, &b).unwrap() >= 0.0);
    }

    #[test]
    fn extractor_is_a_pure_function_of_its_seed(seed in 0u64..1000) {
        let x = Tensor::<f32>::uniform(&[3, 3, 12, 12], -1.0, 1.0, &mut stream(seed, &[7]));
        let a = FeatureExtractor::new(seed, 3).features(&x).unwrap();
        let b = FeatureExtractor::new(seed, 3).features(&x).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn default_stack_is_under_one_percent_of_the_base() {
    let cfg = RunConfig::default();
    let mut m = Denoiser::<f32>::new(&cfg.unet, &mut stream(0, &[])).unwrap();
    let stack = m.new_stack(1, &cfg.upsampler, &mut stream(1, &[])).unwrap();
    let n = stack.parameter_count(&m.store);
    assert!(
        (n as f64) < 0.01 * m.base_parameter_count() as f64,
        "{n} vs {}",
        m.base_parameter_count()
    );
}

#[test]
fn checkpoints_round_trip_with_every_group() {
    let mut cfg = RunConfig::default();
    cfg.unet = small_unet(8, 2);
    let mut m = Denoiser::<f32>::new(&cfg.unet, &mut stream(3, &[])).unwrap();
    let stack = m.new_stack(1, &cfg.upsampler, &mut stream(4, &[])).unwrap();
    freeze_base_attach(&mut m, stack).unwrap();
    let hash = cfg.hash();
    let a = checkpoint::to_bytes(&m, &hash, "ours_t", 11).unwrap();
    let (back, manifest) = checkpoint::model_from_bytes(&cfg, &a).unwrap();
    assert_eq!(manifest.step, 11);
    assert_eq!(manifest.config_hash, hash);
    assert_eq!(checkpoint::to_bytes(&back, &hash, "ours_t", 11).unwrap(), a);

    let mut wider = cfg.clone();
    wider.unet.base_channels = 12;
    let err = checkpoint::model_from_bytes(&wider, &a).unwrap_err().to_string();
    assert!(err.contains("tensor"), "{err}");
}
