//! Run configuration: one JSON document, every field defaulted.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::baselines::LayerFilter;
use crate::cascade::{plan, CascadePlan, Resolution, SamplerConfig, TrainConfig, TuneConfig};
use crate::data::SceneConfig;
use crate::denoiser::UNetConfig;
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::upsampler::UpsamplerConfig;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    #[serde(rename = "T")]
    pub num_steps: usize,
    #[serde(rename = "K")]
    pub pivot_step: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            num_steps: 1000,
            pivot_step: 700,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    pub base: Resolution,
    pub target: Resolution,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            base: Resolution::square(32),
            target: Resolution::square(64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub scene: SceneConfig,
    /// Train on PNG files instead of the synthetic corpus.
    pub png_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 20_000,
            n_eval: 1_000,
            scene: SceneConfig::default(),
            png_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub extractor_seed: u64,
    pub n_samples: usize,
    pub ddim_steps: usize,
    pub eta: f64,
    /// Clamp clean-sample estimates to [-1, 1] while sampling.
    pub clip_x0: bool,
    pub sample_seed: u64,
    /// Patch side for pFID; 0 means the base resolution.
    pub patch: usize,
    pub n_patches: usize,
    /// Samples denoised together; fixed so results do not depend on threads.
    pub batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            extractor_seed: 1234,
            n_samples: 1000,
            ddim_steps: 50,
            eta: 0.0,
            clip_x0: true,
            sample_seed: 0,
            patch: 0,
            n_patches: 4,
            batch: 16,
        }
    }
}

impl EvalConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            ddim_steps: self.ddim_steps,
            eta: self.eta,
            clip_x0: self.clip_x0,
        }
    }
}

/// Pretraining of the base model at the base resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch: 16,
            steps: 20_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowRankConfig {
    pub filter: LayerFilter,
}

impl Default for LowRankConfig {
    fn default() -> Self {
        Self {
            filter: LayerFilter::AllEligible,
        }
    }
}

/// Experiment arm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Arm {
    /// Pretraining of the base model itself.
    Base,
    OursTf,
    OursT,
    Direct,
    FullFt,
    Lowrank {
        rank: usize,
    },
}

impl Arm {
    pub fn trains(&self) -> bool {
        !matches!(self, Arm::OursTf | Arm::Direct)
    }

    /// Whether samples come from the staged pipeline.
    pub fn cascaded(&self) -> bool {
        matches!(self, Arm::OursTf | Arm::OursT)
    }

    pub fn display_name(&self) -> String {
        match self {
            Arm::Base => "Base model".into(),
            Arm::OursTf => "Ours-TF".into(),
            Arm::OursT => "Ours-T".into(),
            Arm::Direct => "Direct Inference".into(),
            Arm::FullFt => "Full Fine-tuning".into(),
            Arm::Lowrank { rank } => format!("LORA-R{rank}"),
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arm::Base => f.write_str("base"),
            Arm::OursTf => f.write_str("ours_tf"),
            Arm::OursT => f.write_str("ours_t"),
            Arm::Direct => f.write_str("direct"),
            Arm::FullFt => f.write_str("full_ft"),
            Arm::Lowrank { rank } => write!(f, "lowrank{rank}"),
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let arm = match s {
            "base" => Arm::Base,
            "ours_tf" => Arm::OursTf,
            "ours_t" => Arm::OursT,
            "direct" => Arm::Direct,
            "full_ft" => Arm::FullFt,
            other => match other.strip_prefix("lowrank").map(|r| r.trim_start_matches([':', '_'])) {
                Some(r) => Arm::Lowrank {
                    rank: r.parse().map_err(|_| Error::Config {
                        field: "arm".into(),
                        reason: format!("bad low-rank arm `{s}`, expected e.g. lowrank4"),
                    })?,
                },
                None => {
                    return Err(Error::Config {
                        field: "arm".into(),
                        reason: format!("unknown arm `{s}` (base, ours_tf, ours_t, direct, full_ft, lowrank<r>)"),
                    })
                }
            },
        };
        Ok(arm)
    }
}

impl TryFrom<String> for Arm {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Arm> for String {
    fn from(a: Arm) -> String {
        a.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub unet: UNetConfig,
    pub cascade: CascadeConfig,
    pub upsampler: UpsamplerConfig,
    pub tune: TuneOptions,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub lowrank: LowRankConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub arm: Arm,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

/// Options of the upsampler tuning objective not covered elsewhere.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneOptions {
    pub pivot_augment_max_t: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            unet: UNetConfig {
                num_classes: 5,
                ..UNetConfig::default()
            },
            cascade: CascadeConfig::default(),
            upsampler: UpsamplerConfig::default(),
            tune: TuneOptions::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            lowrank: LowRankConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            arm: Arm::OursT,
            init_seed: 0,
        }
    }
}

fn bad(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| bad(&json_error_field(&e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// sha256 of the canonical (sorted-key, compact) JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes").to_string();
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Apply `a.b.c=value`; `value` is parsed as JSON, or taken as a string.
    /// Only types are checked here; call [`RunConfig::validate`] after the
    /// last override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| bad("--override", format!("expected key=value, got `{spec}`")))?;
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| bad(key, "no such config field"))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(root).map_err(|e| bad(key, e.to_string()))?;
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::new(s.kind, s.num_steps, s.pivot_step).map_err(|e| bad("schedule", e.to_string()))
    }

    pub fn plan(&self) -> Result<CascadePlan> {
        plan(self.cascade.base, self.cascade.target).map_err(|e| bad("cascade", e.to_string()))
    }

    pub fn tune_config(&self) -> TuneConfig {
        TuneConfig {
            pivot_augment_max_t: self.tune.pivot_augment_max_t,
            t_probe: self.upsampler.t_probe,
        }
    }

    pub fn patch_size(&self) -> usize {
        if self.eval.patch == 0 {
            self.cascade.base.h.min(self.cascade.base.w)
        } else {
            self.eval.patch
        }
    }

    /// First offending field wins.
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.num_steps < 2 {
            return Err(bad("schedule.T", "must be at least 2"));
        }
        if s.pivot_step == 0 || s.pivot_step >= s.num_steps {
            return Err(bad("schedule.K", format!("must satisfy 0 < K < T = {}", s.num_steps)));
        }
        self.unet.validate()?;
        self.upsampler.validate(&self.unet)?;
        if self.upsampler.t_probe > s.num_steps {
            return Err(bad("upsampler.t_probe", "must not exceed T"));
        }
        let plan = self.plan()?;
        for st in &plan.stages {
            self.unet.check_extent(st.h, st.w).map_err(|e| bad("cascade", e.to_string()))?;
            if st.h < 8 || st.w < 8 {
                return Err(bad("cascade.base", "stage resolutions must be at least 8"));
            }
        }
        if self.unet.num_classes > 0 && self.unet.num_classes <= self.data.scene.max_objects {
            return Err(bad(
                "unet.num_classes",
                format!("labels go up to {}, need num_classes > that", self.data.scene.max_objects),
            ));
        }
        for (field, lr) in [("pretrain.lr", self.pretrain.lr), ("train.lr", self.train.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(bad(field, "must be positive"));
            }
        }
        if self.pretrain.batch == 0 || self.train.batch == 0 {
            return Err(bad("train.batch", "must be at least 1"));
        }
        if self.data.n_train == 0 || self.data.n_eval == 0 {
            return Err(bad("data.n_train", "n_train and n_eval must be at least 1"));
        }
        let e = &self.eval;
        if e.n_samples < 2 {
            return Err(bad("eval.n_samples", "need at least 2 samples for distances"));
        }
        if e.ddim_steps == 0 || e.batch == 0 || e.n_patches == 0 {
            return Err(bad("eval.ddim_steps", "ddim_steps, batch and n_patches must be positive"));
        }
        if !(0.0..=1.0).contains(&e.eta) {
            return Err(bad("eval.eta", "must lie in [0, 1]"));
        }
        let p = self.patch_size();
        if p > self.cascade.target.h.min(self.cascade.target.w) {
            return Err(bad("eval.patch", "larger than the target resolution"));
        }
        if let Arm::Lowrank { rank } = self.arm {
            if rank == 0 {
                return Err(bad("arm", "low-rank rank must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Best-effort field path for a serde error message.
fn json_error_field(e: &serde_json::Error) -> String {
    let msg = e.to_string();
    msg.split('`').nth(1).map_or_else(|| "<document>".to_string(), str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.schedule.pivot_step, 700);
        assert_eq!(c.train.lr, 5e-5);
        assert_eq!(c.eval.ddim_steps, 50);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn overrides_edit_nested_fields() {
        let mut c = RunConfig::default();
        let h = c.hash();
        c.apply_override("train.steps=10").unwrap();
        c.apply_override("arm=lowrank32").unwrap();
        c.apply_override("cascade.target={\"h\":128,\"w\":128}").unwrap();
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.arm, Arm::Lowrank { rank: 32 });
        assert_eq!(c.plan().unwrap().r(), 2);
        assert_ne!(c.hash(), h);
        assert!(c.apply_override("train.stepz=1").is_err());
        c.apply_override("schedule.K=1000").unwrap();
        assert!(c.validate().is_err());
        assert!(c.apply_override("nonsense").is_err());
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::from_json(r#"{"schedule": {"K": 0}}"#).unwrap_err();
        assert!(err.to_string().contains("schedule.K"), "{err}");
        let err = RunConfig::from_json(r#"{"unet": {"levels": 7}}"#).unwrap_err();
        assert!(err.to_string().contains("unet.levels"), "{err}");
        let err = RunConfig::from_json(r#"{"trian": {}}"#).unwrap_err();
        assert!(err.to_string().contains("trian"), "{err}");
        let err = RunConfig::from_json(r#"{"cascade": {"target": {"h": 48, "w": 48}}}"#).unwrap_err();
        assert!(err.to_string().contains("cascade"), "{err}");
    }

    #[test]
    fn arm_names_round_trip() {
        for a in [
            Arm::Base,
            Arm::OursTf,
            Arm::OursT,
            Arm::Direct,
            Arm::FullFt,
            Arm::Lowrank { rank: 4 },
        ] {
            assert_eq!(a.to_string().parse::<Arm>().unwrap(), a);
        }
        assert_eq!("lowrank:8".parse::<Arm>().unwrap(), Arm::Lowrank { rank: 8 });
        assert!("lora".parse::<Arm>().is_err());
    }
}
