//! Time-aware feature upsamplers mapping stage-(r-1) pivot skip features to
//! additive deltas on stage-r skips.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{timesteps, Denoiser, FeatureGroup, UNetConfig, BASE_GROUP};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, ResBlock};
use crate::numerics::{Float, Graph, ParamStore, Var};

/// Per-axis growth between consecutive stages.
pub const STAGE_FACTOR: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpsamplerConfig {
    /// Number of tapped skip levels; 0 means every UNet level.
    pub levels: usize,
    /// Timestep at which the clean pivot is run through the UNet.
    pub t_probe: usize,
    pub hidden_channels: usize,
    pub time_embed_dim: usize,
}

impl Default for UpsamplerConfig {
    fn default() -> Self {
        Self {
            levels: 0,
            t_probe: 1,
            hidden_channels: 4,
            time_embed_dim: 16,
        }
    }
}

impl UpsamplerConfig {
    pub fn resolved_levels(&self, unet: &UNetConfig) -> usize {
        if self.levels == 0 {
            unet.levels
        } else {
            self.levels
        }
    }

    pub fn validate(&self, unet: &UNetConfig) -> Result<()> {
        let bad = |field: &str, reason: String| Error::Config {
            field: format!("upsampler.{field}"),
            reason,
        };
        if self.resolved_levels(unet) != unet.levels {
            return Err(bad(
                "levels",
                format!("the stack must cover all {} UNet skip levels, got {}", unet.levels, self.levels),
            ));
        }
        if self.t_probe == 0 {
            return Err(bad("t_probe", "must be at least 1".into()));
        }
        if self.hidden_channels == 0 || self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(bad(
                "hidden_channels",
                "hidden_channels must be positive and time_embed_dim a positive even number".into(),
            ));
        }
        Ok(())
    }
}

pub fn stage_group(stage: usize) -> String {
    format!("upsampler_stage_{stage}")
}

/// One `phi_n`: bilinear x2, 1x1 projection, two time-conditioned residual
/// blocks, zero-initialized 3x3 output conv.
#[derive(Clone, Debug)]
pub struct FeatureUpsampler {
    proj_in: Conv2d,
    blocks: [ResBlock; 2],
    proj_out: Conv2d,
}

impl FeatureUpsampler {
    fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        group: &str,
        channels: usize,
        cfg: &UpsamplerConfig,
        rng: &mut R,
    ) -> Self {
        let w = cfg.hidden_channels;
        let groups = w;
        Self {
            proj_in: Conv2d::new(store, &format!("{name}.proj_in"), group, channels, w, 1, 1, rng),
            blocks: [
                ResBlock::new(store, &format!("{name}.block0"), group, w, w, cfg.time_embed_dim, groups, rng),
                ResBlock::new(store, &format!("{name}.block1"), group, w, w, cfg.time_embed_dim, groups, rng),
            ],
            proj_out: Conv2d::zeros(store, &format!("{name}.proj_out"), group, w, channels, 3),
        }
    }

    fn forward<F: Float>(&self, ctx: &Ctx<F>, h: &Var<F>, emb: &Var<F>) -> Result<Var<F>> {
        let x = ctx.g.bilinear_upsample(h, STAGE_FACTOR)?;
        let mut x = self.proj_in.forward(ctx, &x)?;
        for b in &self.blocks {
            x = b.forward(ctx, &x, emb)?;
        }
        self.proj_out.forward(ctx, &x)
    }
}

/// The stack `phi_1..phi_N` used for one stage transition.
#[derive(Clone, Debug)]
pub struct UpsamplerStack {
    pub stage: usize,
    pub config: UpsamplerConfig,
    layers: Vec<FeatureUpsampler>,
}

impl UpsamplerStack {
    /// Register a fresh stack for stage `stage` in `store`.
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        stage: usize,
        unet: &UNetConfig,
        cfg: &UpsamplerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if stage == 0 {
            return Err(Error::invalid("upsampler stacks exist only for stages r >= 1"));
        }
        cfg.validate(unet)?;
        let group = stage_group(stage);
        let layers = (0..cfg.resolved_levels(unet))
            .map(|n| FeatureUpsampler::new(store, &format!("{group}.phi{n}"), &group, unet.level_channels(n), cfg, rng))
            .collect();
        Ok(Self {
            stage,
            config: cfg.clone(),
            layers,
        })
    }

    pub fn levels(&self) -> usize {
        self.layers.len()
    }

    pub fn group(&self) -> String {
        stage_group(self.stage)
    }

    /// Differentiable deltas for a batch of pivot features at timesteps `t`.
    pub fn forward<F: Float>(&self, ctx: &Ctx<F>, pivot: &[Var<F>], t: &Var<F>) -> Result<Vec<Var<F>>> {
        if pivot.len() != self.levels() {
            return Err(Error::invalid(format!(
                "pivot feature group has {} levels, upsampler stack has {}",
                pivot.len(),
                self.levels()
            )));
        }
        let emb = ctx.g.timestep_embedding(t, self.config.time_embed_dim)?;
        self.layers.iter().zip(pivot).map(|(phi, h)| phi.forward(ctx, h, &emb)).collect()
    }

    /// Inference-mode deltas; one timestep shared by the whole batch.
    pub fn apply<F: Float>(&self, store: &ParamStore<F>, pivot: &FeatureGroup<F>, t: usize) -> Result<FeatureGroup<F>> {
        let g = Graph::inference();
        let ctx = Ctx::new(&g, store);
        let b = pivot.levels.first().map_or(0, |h| h.shape()[0]);
        let vars: Vec<Var<F>> = pivot.levels.iter().map(|h| g.constant(h.clone())).collect();
        let out = self.forward(&ctx, &vars, &g.constant(timesteps(&vec![t; b])))?;
        Ok(FeatureGroup {
            levels: out.into_iter().map(Var::into_value).collect(),
        })
    }

    pub fn parameter_count<F: Float>(&self, store: &ParamStore<F>) -> usize {
        store.group_counts().get(&self.group()).copied().unwrap_or(0)
    }
}

impl<F: Float> Denoiser<F> {
    /// Create a zero-initialized stack for `stage` inside this model's store.
    pub fn new_stack<R: Rng + ?Sized>(&mut self, stage: usize, cfg: &UpsamplerConfig, rng: &mut R) -> Result<UpsamplerStack> {
        if self.stacks.contains_key(&stage) || self.store.groups().contains(&stage_group(stage)) {
            return Err(Error::invalid(format!("stage {stage} already has an upsampler stack")));
        }
        let unet = self.config().clone();
        UpsamplerStack::new(&mut self.store, stage, &unet, cfg, rng)
    }
}

/// Plug `stack` into `model` and freeze everything except its parameters.
pub fn freeze_base_attach<F: Float>(model: &mut Denoiser<F>, stack: UpsamplerStack) -> Result<()> {
    if stack.levels() != model.config().levels {
        return Err(Error::invalid(format!(
            "upsampler stack has {} levels, denoiser taps {}",
            stack.levels(),
            model.config().levels
        )));
    }
    if !model.store.groups().contains(&stack.group()) {
        return Err(Error::invalid(format!(
            "stack parameters for {} are not registered in this model",
            stack.group()
        )));
    }
    model.store.set_all_trainable(false);
    model.store.set_group_trainable(&stack.group(), true);
    model.stacks.insert(stack.stage, stack);
    debug_assert!(model.store.entries().iter().filter(|e| e.group == BASE_GROUP).all(|e| !e.trainable));
    Ok(())
}
