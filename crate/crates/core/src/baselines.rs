//! Comparison arms: direct inference at the target resolution, full
//! fine-tuning, and low-rank adapters on frozen base weights.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{sample_ddim, train_step, Objective, Resolution, SamplerConfig};
use crate::denoiser::{Denoiser, BASE_GROUP};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::numerics::{Float, ParamId, ParamStore, Tensor, Var};
use crate::optim::Adam;
use crate::schedule::NoiseSchedule;

pub const ADAPTER_GROUP: &str = "adapter";

/// Base-resolution weights sampled directly at `res`.
pub fn direct_inference<F: Float>(
    model: &Denoiser<F>,
    s: &NoiseSchedule,
    res: Resolution,
    classes: Option<&[usize]>,
    seeds: &[u64],
    sampler: &SamplerConfig,
) -> Result<Tensor<F>> {
    sample_ddim(model, s, res, classes, seeds, sampler)
}

/// Make every base parameter trainable (and nothing else).
pub fn prepare_full_finetune<F: Float>(model: &mut Denoiser<F>) {
    model.store.set_all_trainable(false);
    model.store.set_group_trainable(BASE_GROUP, true);
}

/// One denoising step at the batch resolution with all base weights trainable.
pub fn full_finetune_step<R: Rng + ?Sized>(
    model: &mut Denoiser<f32>,
    opt: &mut Adam<f32>,
    batch: (&Tensor<f32>, Option<&[usize]>),
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<f32> {
    prepare_full_finetune(model);
    train_step(model, opt, &Objective::Denoising, batch.0, batch.1, s, rng)
}

/// Which base weights receive adapter factors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerFilter {
    /// Every conv/linear weight with `min(in, out) >= rank`.
    AllEligible,
    /// Every conv/linear weight; a too-small layer is an error.
    All,
    /// Layers whose name starts with one of the prefixes.
    Prefixes(Vec<String>),
}

#[derive(Clone, Debug)]
pub struct LowRankFactor {
    pub name: String,
    pub a: ParamId,
    pub b: ParamId,
    pub out_dim: usize,
    pub in_dim: usize,
}

/// `W + (1/r) A B` with `A: out x r`, `B: r x in` (conv weights flattened
/// to `out x in*k*k`); `B` starts at zero.
#[derive(Clone, Debug)]
pub struct LowRankAdapter {
    pub rank: usize,
    pub factors: BTreeMap<ParamId, LowRankFactor>,
}

impl LowRankAdapter {
    pub(crate) fn delta<F: Float>(&self, ctx: &Ctx<F>, weight: ParamId) -> Result<Option<Var<F>>> {
        let Some(f) = self.factors.get(&weight) else {
            return Ok(None);
        };
        let g = ctx.g;
        let ab = g.matmul(&ctx.param(f.a), &ctx.param(f.b))?;
        let ab = g.scale(&ab, F::lit(1.0 / self.rank as f64))?;
        Ok(Some(g.reshape(&ab, ctx.store.value(weight).shape())?))
    }

    /// Closed-form trainable count `sum r (in + out)`.
    pub fn expected_parameters(&self) -> usize {
        self.factors.values().map(|f| self.rank * (f.in_dim + f.out_dim)).sum()
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.factors.values().map(|f| f.name.as_str()).collect()
    }
}

fn dims<F: Float>(store: &ParamStore<F>, id: ParamId) -> (usize, usize) {
    let shape = store.value(id).shape();
    (shape[0], shape[1..].iter().product())
}

/// Attach a rank-`rank` adapter and freeze everything else.
pub fn attach_lowrank<F: Float, R: Rng + ?Sized>(model: &mut Denoiser<F>, rank: usize, filter: &LayerFilter, rng: &mut R) -> Result<()> {
    if rank == 0 {
        return Err(Error::invalid("low-rank adapter rank must be at least 1"));
    }
    if model.lowrank.is_some() {
        return Err(Error::invalid("model already has a low-rank adapter"));
    }
    let mut chosen = Vec::new();
    for (name, id) in model.unet.conv_and_linear_weights() {
        let (out_dim, in_dim) = dims(&model.store, id);
        let fits = rank <= out_dim.min(in_dim);
        let selected = match filter {
            LayerFilter::AllEligible => fits,
            LayerFilter::All => true,
            LayerFilter::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
        };
        if !selected {
            continue;
        }
        if !fits {
            return Err(Error::invalid(format!(
                "rank {rank} exceeds min(in, out) = {} of layer {name} ({out_dim} x {in_dim})",
                out_dim.min(in_dim)
            )));
        }
        chosen.push((name, id, out_dim, in_dim));
    }
    if chosen.is_empty() {
        return Err(Error::invalid(format!(
            "no layer matches the adapter filter {filter:?} at rank {rank}"
        )));
    }
    let mut factors = BTreeMap::new();
    for (name, id, out_dim, in_dim) in chosen {
        let a = model
            .store
            .add(format!("lowrank.{name}.a"), ADAPTER_GROUP, Tensor::randn(&[out_dim, rank], rng));
        let b = model
            .store
            .add(format!("lowrank.{name}.b"), ADAPTER_GROUP, Tensor::zeros(&[rank, in_dim]));
        factors.insert(
            id,
            LowRankFactor {
                name,
                a,
                b,
                out_dim,
                in_dim,
            },
        );
    }
    model.store.set_all_trainable(false);
    model.store.set_group_trainable(ADAPTER_GROUP, true);
    model.lowrank = Some(LowRankAdapter { rank, factors });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::UNetConfig;
    use crate::numerics::gradcheck::check_params;
    use crate::numerics::Graph;
    use crate::optim::AdamConfig;
    use crate::rng::stream;
    use crate::schedule::ScheduleKind;

    fn model() -> Denoiser<f32> {
        Denoiser::new(&UNetConfig::default(), &mut stream(30, &[])).unwrap()
    }

    #[test]
    fn adapter_count_matches_closed_form() {
        let mut m4 = model();
        attach_lowrank(&mut m4, 4, &LayerFilter::AllEligible, &mut stream(1, &[])).unwrap();
        let mut m32 = model();
        attach_lowrank(&mut m32, 32, &LayerFilter::AllEligible, &mut stream(1, &[])).unwrap();
        for m in [&m4, &m32] {
            let ad = m.lowrank.as_ref().unwrap();
            let c = m.parameter_census();
            assert_eq!(c.trainable, ad.expected_parameters());
            assert_eq!(c.per_group[ADAPTER_GROUP], ad.expected_parameters());
        }
        // same layer set: the count scales exactly with rank
        let (a4, a32) = (m4.lowrank.as_ref().unwrap(), m32.lowrank.as_ref().unwrap());
        let common: usize = a32.factors.values().map(|f| f.in_dim + f.out_dim).sum();
        assert_eq!(a32.expected_parameters(), 32 * common);
        assert!(a32.expected_parameters() > a4.expected_parameters());
        let mut m4b = model();
        let names: Vec<String> = a32.layer_names().iter().map(|s| s.to_string()).collect();
        attach_lowrank(&mut m4b, 4, &LayerFilter::Prefixes(names), &mut stream(1, &[])).unwrap();
        assert_eq!(m4b.lowrank.as_ref().unwrap().expected_parameters() * 8, a32.expected_parameters());
    }

    #[test]
    fn too_large_rank_names_the_layer() {
        let mut m = model();
        let err = attach_lowrank(&mut m, 32, &LayerFilter::All, &mut stream(1, &[])).unwrap_err();
        assert!(err.to_string().contains("conv_out") || err.to_string().contains("layer"), "{err}");
        assert!(m.lowrank.is_none());
        assert!(attach_lowrank(&mut m, 0, &LayerFilter::All, &mut stream(1, &[])).is_err());
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let base = model();
        let mut m = base.clone();
        attach_lowrank(&mut m, 4, &LayerFilter::AllEligible, &mut stream(2, &[])).unwrap();
        let z = Tensor::randn(&[1, 3, 16, 16], &mut stream(3, &[]));
        let a = base.denoise(&z, &[400], None, None).unwrap().0;
        let b = m.denoise(&z, &[400], None, None).unwrap().0;
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-6);
    }

    #[test]
    fn adapter_training_changes_outputs_not_base() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000, 700).unwrap();
        let mut m = model();
        attach_lowrank(&mut m, 4, &LayerFilter::AllEligible, &mut stream(2, &[])).unwrap();
        let before = m.store.group_bytes(BASE_GROUP);
        let mut opt = Adam::new(AdamConfig {
            lr: 1e-3,
            ..Default::default()
        })
        .unwrap();
        let x0 = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut stream(4, &[]));
        train_step(&mut m, &mut opt, &Objective::Denoising, &x0, None, &s, &mut stream(5, &[])).unwrap();
        assert_eq!(m.store.group_bytes(BASE_GROUP), before);
        let b_id = m.lowrank.as_ref().unwrap().factors.values().next().unwrap().b;
        assert!(m.store.value(b_id).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn full_finetune_trains_everything() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000, 700).unwrap();
        let mut m = model();
        let before = m.store.group_bytes(BASE_GROUP);
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        let x0 = Tensor::uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut stream(6, &[]));
        let l = full_finetune_step(&mut m, &mut opt, (&x0, None), &s, &mut stream(7, &[])).unwrap();
        assert!(l.is_finite());
        let c = m.parameter_census();
        assert_eq!(c.trainable, c.total);
        assert_ne!(m.store.group_bytes(BASE_GROUP), before);
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        let cfg = UNetConfig {
            in_channels: 2,
            base_channels: 4,
            levels: 2,
            blocks_per_level: 1,
            time_embed_dim: 8,
            num_classes: 0,
            groupnorm_groups: 2,
        };
        let mut m = Denoiser::<f64>::new(&cfg, &mut stream(8, &[])).unwrap();
        attach_lowrank(&mut m, 2, &LayerFilter::AllEligible, &mut stream(9, &[])).unwrap();
        let ids: Vec<_> = m.lowrank.as_ref().unwrap().factors.values().map(|f| f.b).collect();
        let mut r = stream(10, &[]);
        for id in ids {
            let shape = m.store.value(id).shape().to_vec();
            m.store.assign(id, Tensor::uniform(&shape, -0.2, 0.2, &mut r)).unwrap();
        }
        let z = Tensor::<f64>::randn(&[1, 2, 4, 4], &mut r);
        let rep = check_params(&m.store, 1e-4, 2, |g: &Graph<f64>, store| {
            let ctx = Ctx::new(g, store).with_lowrank(m.lowrank.as_ref());
            let t = g.constant(crate::denoiser::timesteps(&[20]));
            let (eps, _) = m.unet.forward(&ctx, &g.constant(z.clone()), &t, None, None)?;
            g.sum(&g.mul(&eps, &eps)?)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{}", rep.worst);
    }
}
