//! Tiny fully-convolutional UNet noise predictor with per-level skip taps.
//!
//! The encoder's last tensor at every level is a skip feature. These are
//! returned as a [`FeatureGroup`] (finest first, coarsest last) and may be
//! shifted by additive deltas before the decoder concatenates them.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::LowRankAdapter;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, GroupNorm, Linear, ResBlock};
use crate::numerics::{Float, Graph, ParamStore, Tensor, Var};
use crate::upsampler::UpsamplerStack;

pub const BASE_GROUP: &str = "base";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    pub time_embed_dim: usize,
    /// 0 means unconditional.
    pub num_classes: usize,
    pub groupnorm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 32,
            levels: 3,
            blocks_per_level: 2,
            time_embed_dim: 128,
            num_classes: 0,
            groupnorm_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Error::Config {
            field: format!("unet.{field}"),
            reason,
        };
        if !(2..=4).contains(&self.levels) {
            return Err(bad("levels", format!("must be in 2..=4, got {}", self.levels)));
        }
        if self.groupnorm_groups == 0 || self.base_channels % self.groupnorm_groups != 0 {
            return Err(bad(
                "base_channels",
                format!("{} not divisible by {} groups", self.base_channels, self.groupnorm_groups),
            ));
        }
        if self.base_channels % 2 != 0 || self.base_channels == 0 {
            return Err(bad("base_channels", "must be a positive even number".into()));
        }
        if self.in_channels == 0 || self.blocks_per_level == 0 || self.time_embed_dim == 0 {
            return Err(bad(
                "in_channels",
                "in_channels, blocks_per_level and time_embed_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let d = self.divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::invalid(format!(
                "input extent {h}x{w} must be a positive multiple of {d} (2^(levels-1)) on both axes"
            )));
        }
        Ok(())
    }

    /// Skip-feature shapes for a `batch x in_channels x h x w` input.
    pub fn skip_shapes(&self, batch: usize, h: usize, w: usize) -> Vec<[usize; 4]> {
        (0..self.levels).map(|l| [batch, self.level_channels(l), h >> l, w >> l]).collect()
    }

    fn sinusoid_dim(&self) -> usize {
        self.base_channels
    }
}

/// Ordered skip tensors, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGroup<F> {
    pub levels: Vec<Tensor<F>>,
}

impl<F: Float> FeatureGroup<F> {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.levels.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(Tensor::is_finite)
    }
}

/// Parameter layout of the UNet; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Unet {
    cfg: UNetConfig,
    time_fc1: Linear,
    time_fc2: Linear,
    class_embed: Option<crate::numerics::ParamId>,
    conv_in: Conv2d,
    encoder: Vec<Vec<ResBlock>>,
    downsamplers: Vec<Conv2d>,
    middle: ResBlock,
    decoder: Vec<Vec<ResBlock>>,
    upsamplers: Vec<Conv2d>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

impl Unet {
    pub fn new<F: Float, R: Rng + ?Sized>(store: &mut ParamStore<F>, cfg: &UNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let g = BASE_GROUP;
        let groups = cfg.groupnorm_groups;
        let temb = cfg.time_embed_dim;
        let time_fc1 = Linear::new(store, "time.fc1", g, cfg.sinusoid_dim(), temb, rng);
        let time_fc2 = Linear::new(store, "time.fc2", g, temb, temb, rng);
        let class_embed = (cfg.num_classes > 0).then(|| store.add("class.embedding", g, Tensor::randn(&[cfg.num_classes, temb], rng)));
        let conv_in = Conv2d::new(store, "conv_in", g, cfg.in_channels, cfg.base_channels, 3, 1, rng);

        let mut encoder = Vec::new();
        let mut downsamplers = Vec::new();
        let mut ch = cfg.base_channels;
        for l in 0..cfg.levels {
            let cout = cfg.level_channels(l);
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_level {
                blocks.push(ResBlock::new(store, &format!("enc.{l}.{b}"), g, ch, cout, temb, groups, rng));
                ch = cout;
            }
            encoder.push(blocks);
            if l + 1 < cfg.levels {
                downsamplers.push(Conv2d::new(store, &format!("down.{l}"), g, ch, ch, 3, 2, rng));
            }
        }
        let middle = ResBlock::new(store, "mid", g, ch, ch, temb, groups, rng);

        let mut decoder: Vec<Vec<ResBlock>> = vec![Vec::new(); cfg.levels];
        let mut upsamplers = Vec::new();
        for l in (0..cfg.levels).rev() {
            let cl = cfg.level_channels(l);
            let mut blocks = Vec::new();
            blocks.push(ResBlock::new(store, &format!("dec.{l}.0"), g, ch + cl, cl, temb, groups, rng));
            for b in 1..cfg.blocks_per_level {
                blocks.push(ResBlock::new(store, &format!("dec.{l}.{b}"), g, cl, cl, temb, groups, rng));
            }
            decoder[l] = blocks;
            ch = cl;
            if l > 0 {
                let cn = cfg.level_channels(l - 1);
                upsamplers.push(Conv2d::new(store, &format!("up.{l}"), g, cl, cn, 3, 1, rng));
                ch = cn;
            }
        }
        upsamplers.reverse();
        let out_norm = GroupNorm::new(store, "out.norm", g, cfg.base_channels, groups);
        let conv_out = Conv2d::new(store, "conv_out", g, cfg.base_channels, cfg.in_channels, 3, 1, rng);
        Ok(Self {
            cfg: cfg.clone(),
            time_fc1,
            time_fc2,
            class_embed,
            conv_in,
            encoder,
            downsamplers,
            middle,
            decoder,
            upsamplers,
            out_norm,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Conditioning vector `SiLU(MLP(sinusoid(t)) + class_embed[c])`.
    fn embedding<F: Float>(&self, ctx: &Ctx<F>, t: &Var<F>, classes: Option<&[usize]>) -> Result<Var<F>> {
        let g = ctx.g;
        let e = g.timestep_embedding(t, self.cfg.sinusoid_dim())?;
        let e = self.time_fc1.forward(ctx, &e)?;
        let mut e = self.time_fc2.forward(ctx, &g.silu(&e)?)?;
        match (self.class_embed, classes) {
            (Some(table), Some(c)) => {
                if c.len() != t.value().numel() {
                    return Err(Error::invalid(format!(
                        "{} class labels for a batch of {}",
                        c.len(),
                        t.value().numel()
                    )));
                }
                e = g.add(&e, &g.embedding(&ctx.param(table), c)?)?;
            }
            (Some(_), None) => return Err(Error::invalid("class-conditional model needs class labels")),
            (None, _) => {}
        }
        g.silu(&e)
    }

    /// Noise prediction and pre-injection skip features.
    pub fn forward<F: Float>(
        &self,
        ctx: &Ctx<F>,
        z: &Var<F>,
        t: &Var<F>,
        classes: Option<&[usize]>,
        inject: Option<&[Var<F>]>,
    ) -> Result<(Var<F>, Vec<Var<F>>)> {
        let g = ctx.g;
        let (b, c, h, w) = z.value().dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::invalid(format!(
                "denoiser expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        self.cfg.check_extent(h, w)?;
        if t.value().numel() != b {
            return Err(Error::invalid(format!("{} timesteps for a batch of {b}", t.value().numel())));
        }
        if let Some(deltas) = inject {
            let want = self.cfg.skip_shapes(b, h, w);
            if deltas.len() != want.len() {
                return Err(Error::invalid(format!(
                    "injection has {} levels, denoiser taps {}",
                    deltas.len(),
                    want.len()
                )));
            }
            for (d, s) in deltas.iter().zip(&want) {
                if d.shape() != s {
                    return Err(Error::ShapeMismatch {
                        op: "skip injection",
                        lhs: s.to_vec(),
                        rhs: d.shape().to_vec(),
                    });
                }
            }
        }

        let emb = self.embedding(ctx, t, classes)?;
        let mut x = self.conv_in.forward(ctx, z)?;
        let mut skips = Vec::with_capacity(self.cfg.levels);
        for l in 0..self.cfg.levels {
            for block in &self.encoder[l] {
                x = block.forward(ctx, &x, &emb)?;
            }
            skips.push(x.clone());
            if l + 1 < self.cfg.levels {
                x = self.downsamplers[l].forward(ctx, &x)?;
            }
        }
        x = self.middle.forward(ctx, &x, &emb)?;
        for l in (0..self.cfg.levels).rev() {
            let skip = match inject {
                Some(d) => g.add(&skips[l], &d[l])?,
                None => skips[l].clone(),
            };
            x = g.concat_channels(&[&x, &skip])?;
            for block in &self.decoder[l] {
                x = block.forward(ctx, &x, &emb)?;
            }
            if l > 0 {
                x = self.upsamplers[l - 1].forward(ctx, &g.bilinear_upsample(&x, 2)?)?;
            }
        }
        let x = g.silu(&self.out_norm.forward(ctx, &x)?)?;
        let eps = self.conv_out.forward(ctx, &x)?;
        Ok((eps, skips))
    }

    pub fn conv_and_linear_weights(&self) -> Vec<(String, crate::numerics::ParamId)> {
        let mut out = Vec::new();
        let mut lin = |name: &str, l: &Linear| out.push((name.to_string(), l.weight));
        lin("time.fc1", &self.time_fc1);
        lin("time.fc2", &self.time_fc2);
        let mut convs: Vec<(String, &Conv2d)> = vec![("conv_in".into(), &self.conv_in)];
        let mut blocks: Vec<(String, &ResBlock)> = Vec::new();
        for (l, level) in self.encoder.iter().enumerate() {
            for (b, blk) in level.iter().enumerate() {
                blocks.push((format!("enc.{l}.{b}"), blk));
            }
        }
        for (l, d) in self.downsamplers.iter().enumerate() {
            convs.push((format!("down.{l}"), d));
        }
        blocks.push(("mid".into(), &self.middle));
        for (l, level) in self.decoder.iter().enumerate() {
            for (b, blk) in level.iter().enumerate() {
                blocks.push((format!("dec.{l}.{b}"), blk));
            }
        }
        for (i, u) in self.upsamplers.iter().enumerate() {
            convs.push((format!("up.{}", i + 1), u));
        }
        convs.push(("conv_out".into(), &self.conv_out));
        for (name, blk) in &blocks {
            out.push((format!("{name}.conv1"), blk.conv1.weight));
            out.push((format!("{name}.emb"), blk.emb_proj.weight));
            out.push((format!("{name}.conv2"), blk.conv2.weight));
            if let Some(s) = &blk.skip {
                out.push((format!("{name}.skip"), s.weight));
            }
        }
        for (name, c) in convs {
            out.push((name, c.weight));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Census {
    pub total: usize,
    pub trainable: usize,
    pub per_group: BTreeMap<String, usize>,
}

/// The base UNet together with everything that can be plugged into it.
#[derive(Clone, Debug)]
pub struct Denoiser<F> {
    pub store: ParamStore<F>,
    pub unet: Unet,
    /// One feature-upsampler stack per target stage `r >= 1`.
    pub stacks: BTreeMap<usize, UpsamplerStack>,
    pub lowrank: Option<LowRankAdapter>,
}

impl<F: Float> Denoiser<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &UNetConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let unet = Unet::new(&mut store, cfg, rng)?;
        Ok(Self {
            store,
            unet,
            stacks: BTreeMap::new(),
            lowrank: None,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        self.unet.config()
    }

    pub fn ctx<'a>(&'a self, g: &'a Graph<F>) -> Ctx<'a, F> {
        Ctx::new(g, &self.store).with_lowrank(self.lowrank.as_ref())
    }

    /// Inference-mode noise prediction with optional skip injection.
    pub fn denoise(
        &self,
        z_t: &Tensor<F>,
        t: &[usize],
        classes: Option<&[usize]>,
        inject: Option<&FeatureGroup<F>>,
    ) -> Result<(Tensor<F>, FeatureGroup<F>)> {
        let g = Graph::inference();
        let ctx = self.ctx(&g);
        let tv = g.constant(timesteps(t));
        let deltas: Option<Vec<Var<F>>> = inject.map(|fg| fg.levels.iter().map(|d| g.constant(d.clone())).collect());
        let (eps, skips) = self.unet.forward(&ctx, &g.constant(z_t.clone()), &tv, classes, deltas.as_deref())?;
        Ok((
            eps.into_value(),
            FeatureGroup {
                levels: skips.into_iter().map(Var::into_value).collect(),
            },
        ))
    }

    /// Skip features of a clean stage-(r-1) output, probed at `t_probe`.
    pub fn extract_pivot_features(&self, z0_prev: &Tensor<F>, t_probe: usize, classes: Option<&[usize]>) -> Result<FeatureGroup<F>> {
        let b = z0_prev.shape().first().copied().unwrap_or(0);
        Ok(self.denoise(z0_prev, &vec![t_probe; b], classes, None)?.1)
    }

    pub fn parameter_census(&self) -> Census {
        Census {
            total: self.store.total_count(),
            trainable: self.store.trainable_count(),
            per_group: self.store.group_counts(),
        }
    }

    pub fn base_parameter_count(&self) -> usize {
        self.store.group_counts().get(BASE_GROUP).copied().unwrap_or(0)
    }
}

/// Timesteps as a real-valued `[B]` tensor.
pub fn timesteps<F: Float>(t: &[usize]) -> Tensor<F> {
    Tensor::from_fn(&[t.len()], |i| F::lit(t[i] as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_params;
    use crate::rng::stream;

    pub(crate) fn tiny() -> UNetConfig {
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

    /// Parameter arithmetic written out layer by layer.
    fn expected_params(cfg: &UNetConfig) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let lin = |din: usize, dout: usize| din * dout + dout;
        let gn = |c: usize| 2 * c;
        let res = |cin: usize, cout: usize| {
            gn(cin)
                + conv(cin, cout, 3)
                + lin(cfg.time_embed_dim, 2 * cout)
                + gn(cout)
                + conv(cout, cout, 3)
                + if cin != cout { conv(cin, cout, 1) } else { 0 }
        };
        let ch = |l: usize| cfg.base_channels * 2usize.pow(l as u32);
        let mut total = lin(cfg.base_channels, cfg.time_embed_dim) + lin(cfg.time_embed_dim, cfg.time_embed_dim);
        total += cfg.num_classes * cfg.time_embed_dim;
        total += conv(cfg.in_channels, ch(0), 3);
        let mut c = ch(0);
        for l in 0..cfg.levels {
            for _ in 0..cfg.blocks_per_level {
                total += res(c, ch(l));
                c = ch(l);
            }
            if l + 1 < cfg.levels {
                total += conv(c, c, 3);
            }
        }
        total += res(c, c);
        for l in (0..cfg.levels).rev() {
            total += res(c + ch(l), ch(l));
            total += (cfg.blocks_per_level - 1) * res(ch(l), ch(l));
            c = ch(l);
            if l > 0 {
                total += conv(c, ch(l - 1), 3);
                c = ch(l - 1);
            }
        }
        total + gn(ch(0)) + conv(ch(0), cfg.in_channels, 3)
    }

    #[test]
    fn census_matches_layer_arithmetic() {
        for cfg in [
            UNetConfig::default(),
            tiny(),
            UNetConfig {
                levels: 4,
                num_classes: 5,
                ..Default::default()
            },
        ] {
            let d = Denoiser::<f32>::new(&cfg, &mut stream(0, &[])).unwrap();
            let c = d.parameter_census();
            assert_eq!(c.total, expected_params(&cfg), "{cfg:?}");
            assert_eq!(c.trainable, c.total);
        }
    }

    #[test]
    fn zero_injection_is_identity() {
        let cfg = UNetConfig {
            num_classes: 4,
            ..Default::default()
        };
        let d = Denoiser::<f32>::new(&cfg, &mut stream(1, &[])).unwrap();
        let z = Tensor::randn(&[2, 3, 16, 16], &mut stream(2, &[]));
        let (e0, skips) = d.denoise(&z, &[10, 900], Some(&[1, 3]), None).unwrap();
        let (e1, skips1) = d.denoise(&z, &[10, 900], Some(&[1, 3]), Some(&skips.zeros_like())).unwrap();
        assert_eq!(e0.data(), e1.data());
        assert_eq!(skips, skips1);
        assert_eq!(e0.shape(), z.shape());
    }

    #[test]
    fn resolution_agnostic_shapes() {
        let cfg = UNetConfig::default();
        let d = Denoiser::<f32>::new(&cfg, &mut stream(3, &[])).unwrap();
        let small = d.denoise(&Tensor::zeros(&[1, 3, 32, 32]), &[5], None, None).unwrap().1;
        let big = d.denoise(&Tensor::zeros(&[1, 3, 64, 64]), &[5], None, None).unwrap().1;
        for (s, b) in small.levels.iter().zip(&big.levels) {
            assert_eq!(b.shape()[2], 2 * s.shape()[2]);
            assert_eq!(b.shape()[3], 2 * s.shape()[3]);
            assert_eq!(b.shape()[1], s.shape()[1]);
        }
        let want: Vec<Vec<usize>> = cfg.skip_shapes(1, 64, 64).iter().map(|s| s.to_vec()).collect();
        assert_eq!(big.shapes(), want);
    }

    #[test]
    fn divisibility_and_injection_errors() {
        let d = Denoiser::<f32>::new(&UNetConfig::default(), &mut stream(4, &[])).unwrap();
        let msg = d
            .denoise(&Tensor::zeros(&[1, 3, 30, 32]), &[5], None, None)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("multiple of 4"), "{msg}");
        let (_, skips) = d.denoise(&Tensor::zeros(&[1, 3, 16, 16]), &[5], None, None).unwrap();
        let mut bad = skips.zeros_like();
        bad.levels.pop();
        assert!(d.denoise(&Tensor::zeros(&[1, 3, 16, 16]), &[5], None, Some(&bad)).is_err());
        let mut bad = skips.zeros_like();
        bad.levels[0] = Tensor::zeros(&[1, 32, 8, 8]);
        assert!(d.denoise(&Tensor::zeros(&[1, 3, 16, 16]), &[5], None, Some(&bad)).is_err());
    }

    #[test]
    fn pivot_features_are_pure_and_finite() {
        let d = Denoiser::<f32>::new(&UNetConfig::default(), &mut stream(5, &[])).unwrap();
        let z = Tensor::randn(&[1, 3, 16, 16], &mut stream(6, &[]));
        let a = d.extract_pivot_features(&z, 1, None).unwrap();
        let b = d.extract_pivot_features(&z, 1, None).unwrap();
        assert_eq!(a, b);
        let zero = d.extract_pivot_features(&Tensor::zeros(&[1, 3, 16, 16]), 1, None).unwrap();
        assert!(zero.is_finite());
        let (_, skips) = d.denoise(&z, &[1], None, None).unwrap();
        assert_eq!(a.shapes(), skips.shapes());
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        let cfg = tiny();
        let d = Denoiser::<f64>::new(&cfg, &mut stream(7, &[])).unwrap();
        let mut r = stream(8, &[]);
        let z = Tensor::<f64>::randn(&[2, 2, 8, 8], &mut r);
        let rep = check_params(&d.store, 1e-4, 3, |g, store| {
            let ctx = Ctx::new(g, store);
            let t = g.constant(timesteps(&[3, 40]));
            let (eps, _) = d.unet.forward(&ctx, &g.constant(z.clone()), &t, Some(&[0, 2]), None)?;
            g.sum(&g.mul(&eps, &eps)?)
        })
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{} over {} probes", rep.worst, rep.checked);
    }
}
