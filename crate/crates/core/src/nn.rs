//! Parameterized layers shared by the denoiser, the feature upsamplers and
//! the evaluation feature extractor.

use rand::Rng;

use crate::baselines::LowRankAdapter;
use crate::error::Result;
use crate::numerics::{Float, Graph, ParamId, ParamStore, Tensor, Var};

/// Forward-pass context: the graph being recorded, the parameter table and
/// an optional low-rank adapter that rewrites weights on the fly.
#[derive(Clone, Copy)]
pub struct Ctx<'a, F> {
    pub g: &'a Graph<F>,
    pub store: &'a ParamStore<F>,
    pub lowrank: Option<&'a LowRankAdapter>,
}

impl<'a, F: Float> Ctx<'a, F> {
    pub fn new(g: &'a Graph<F>, store: &'a ParamStore<F>) -> Self {
        Self { g, store, lowrank: None }
    }

    pub fn with_lowrank(mut self, lowrank: Option<&'a LowRankAdapter>) -> Self {
        self.lowrank = lowrank;
        self
    }

    pub fn param(&self, id: ParamId) -> Var<F> {
        self.store.var(self.g, id)
    }

    /// Weight tensor, including the low-rank delta if one targets it.
    pub fn weight(&self, id: ParamId) -> Result<Var<F>> {
        let w = self.param(id);
        match self.lowrank.and_then(|l| l.delta(self, id).transpose()) {
            Some(delta) => self.g.add(&w, &delta?),
            None => Ok(w),
        }
    }
}

fn fan_in_uniform<F: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        group: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add(format!("{name}.weight"), group, fan_in_uniform(&[cout, cin, k, k], fan_in, rng));
        let bias = store.add(format!("{name}.bias"), group, fan_in_uniform(&[cout], fan_in, rng));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// Zero-initialized weights and bias: the layer outputs exactly zero.
    pub fn zeros<F: Float>(store: &mut ParamStore<F>, name: &str, group: &str, cin: usize, cout: usize, k: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), group, Tensor::zeros(&[cout, cin, k, k]));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward<F: Float>(&self, ctx: &Ctx<F>, x: &Var<F>) -> Result<Var<F>> {
        let w = ctx.weight(self.weight)?;
        ctx.g.conv2d(x, &w, Some(&ctx.param(self.bias)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        group: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, fan_in_uniform(&[dout, din], din, rng));
        let bias = store.add(format!("{name}.bias"), group, fan_in_uniform(&[dout], din, rng));
        Self { weight, bias }
    }

    pub fn forward<F: Float>(&self, ctx: &Ctx<F>, x: &Var<F>) -> Result<Var<F>> {
        let w = ctx.weight(self.weight)?;
        ctx.g.linear(x, &w, Some(&ctx.param(self.bias)))
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, group: &str, channels: usize, groups: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full(&[channels], F::one())),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward<F: Float>(&self, ctx: &Ctx<F>, x: &Var<F>) -> Result<Var<F>> {
        ctx.g
            .group_norm(x, &ctx.param(self.gamma), &ctx.param(self.beta), self.groups, GROUP_NORM_EPS)
    }
}

/// Largest group count `<= preferred` dividing `channels`.
pub fn groups_for(channels: usize, preferred: usize) -> usize {
    (1..=preferred.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// `GN -> SiLU -> conv3x3 -> scale/shift(emb) -> GN -> SiLU -> conv3x3`,
/// added to a (1x1-projected when channels change) residual path.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub emb_proj: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        group: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), group, cin, groups_for(cin, groups)),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), group, cin, cout, 3, 1, rng),
            emb_proj: Linear::new(store, &format!("{name}.emb"), group, emb_dim, 2 * cout, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), group, cout, groups_for(cout, groups)),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), group, cout, cout, 3, 1, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), group, cin, cout, 1, 1, rng)),
        }
    }

    /// `emb` is the already-activated conditioning vector `[B, emb_dim]`.
    pub fn forward<F: Float>(&self, ctx: &Ctx<F>, x: &Var<F>, emb: &Var<F>) -> Result<Var<F>> {
        let g = ctx.g;
        let h = self.conv1.forward(ctx, &g.silu(&self.norm1.forward(ctx, x)?)?)?;
        let h = g.scale_shift(&h, &self.emb_proj.forward(ctx, emb)?)?;
        let h = self.conv2.forward(ctx, &g.silu(&self.norm2.forward(ctx, &h)?)?)?;
        let residual = match &self.skip {
            Some(s) => s.forward(ctx, x)?,
            None => x.clone(),
        };
        g.add(&residual, &h)
    }
}
