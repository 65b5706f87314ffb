//! Single-file checkpoints: magic, manifest length, JSON manifest, then one
//! little-endian f32 blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::ADAPTER_GROUP;
use crate::config::{RunConfig, CODE_VERSION};
use crate::denoiser::{Denoiser, BASE_GROUP};
use crate::error::{Error, Result};
use crate::experiment::{attach_adapter, attach_stack, init_model};
use crate::numerics::Tensor;
use crate::upsampler::stage_group;

pub const MAGIC: &[u8; 8] = b"SCASCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub group: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub code_version: String,
    pub config_hash: String,
    pub arm: String,
    pub step: usize,
    /// Adapter rank when the adapter group is present.
    pub lowrank_rank: Option<usize>,
    pub tensors: Vec<TensorRecord>,
}

impl Manifest {
    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.tensors.iter().map(|t| t.group.clone()).collect();
        g.dedup();
        g.sort();
        g.dedup();
        g
    }

    /// Stage indices with an upsampler group.
    pub fn stages(&self) -> Vec<usize> {
        self.groups()
            .iter()
            .filter_map(|g| g.strip_prefix("upsampler_stage_")?.parse().ok())
            .collect()
    }
}

/// Serialize every parameter of `model`.
pub fn to_bytes(model: &Denoiser<f32>, config_hash: &str, arm: &str, step: usize) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.store.len());
    let mut blob = Vec::new();
    for (_, e) in model.store.iter() {
        tensors.push(TensorRecord {
            name: e.name.clone(),
            dtype: "f32".into(),
            shape: e.value.shape().to_vec(),
            offset: blob.len(),
            group: e.group.clone(),
        });
        blob.extend(e.value.to_le_f32_bytes());
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        code_version: CODE_VERSION.into(),
        config_hash: config_hash.into(),
        arm: arm.into(),
        step,
        lowrank_rank: model.lowrank.as_ref().map(|l| l.rank),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Write atomically via a temporary sibling file.
pub fn save(path: &Path, model: &Denoiser<f32>, config_hash: &str, arm: &str, step: usize) -> Result<String> {
    let bytes = to_bytes(model, config_hash, arm, step)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Parse header and manifest; returns the manifest and the blob.
pub fn parse(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    Ok((manifest, &bytes[16 + len..]))
}

fn decode(blob: &[u8], rec: &TensorRecord) -> Result<Tensor<f32>> {
    if rec.dtype != "f32" {
        return Err(Error::Checkpoint(format!(
            "tensor {} has unsupported dtype {}",
            rec.name, rec.dtype
        )));
    }
    let n: usize = rec.shape.iter().product();
    let bytes = blob
        .get(rec.offset..rec.offset + 4 * n)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {} extends past the blob", rec.name)))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&rec.shape, data)
}

/// Build the model described by `cfg` and fill it from `bytes`. Upsampler
/// stacks and the adapter are re-created from the groups present.
pub fn model_from_bytes(cfg: &RunConfig, bytes: &[u8]) -> Result<(Denoiser<f32>, Manifest)> {
    let (manifest, blob) = parse(bytes)?;
    let mut model = init_model(cfg)?;
    for stage in manifest.stages() {
        attach_stack(&mut model, cfg, stage)?;
    }
    if manifest.groups().iter().any(|g| g == ADAPTER_GROUP) {
        let rank = manifest
            .lowrank_rank
            .ok_or_else(|| Error::Checkpoint("adapter tensors without a rank".into()))?;
        attach_adapter(&mut model, cfg, rank)?;
    }
    if manifest.tensors.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, the configured model has {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    for rec in &manifest.tensors {
        let id = model
            .store
            .find(&rec.name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} does not exist in the configured model", rec.name)))?;
        let want = model.store.value(id).shape().to_vec();
        if want != rec.shape || model.store.entry(id).group != rec.group {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?} in group {}, the configured model expects {:?} in group {}",
                rec.name,
                rec.shape,
                rec.group,
                want,
                model.store.entry(id).group
            )));
        }
        model.store.assign(id, decode(blob, rec)?)?;
    }
    Ok((model, manifest))
}

pub fn load(cfg: &RunConfig, path: &Path) -> Result<(Denoiser<f32>, Manifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(cfg, &bytes)
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Serialized bytes of the frozen base group.
pub fn base_bytes(model: &Denoiser<f32>) -> Vec<u8> {
    model.store.group_bytes(BASE_GROUP)
}

pub fn upsampler_groups(model: &Denoiser<f32>) -> Vec<String> {
    model.stacks.keys().map(|&r| stage_group(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{attach_lowrank, LayerFilter};
    use crate::denoiser::UNetConfig;
    use crate::rng::{stream, tag};
    use crate::upsampler::freeze_base_attach;

    fn cfg() -> RunConfig {
        RunConfig {
            unet: UNetConfig {
                base_channels: 8,
                levels: 2,
                blocks_per_level: 1,
                time_embed_dim: 16,
                groupnorm_groups: 4,
                num_classes: 5,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn perturbed(c: &RunConfig) -> Denoiser<f32> {
        let mut m = Denoiser::new(&c.unet, &mut stream(c.init_seed, &[tag::INIT])).unwrap();
        let stack = m.new_stack(1, &c.upsampler, &mut stream(3, &[])).unwrap();
        freeze_base_attach(&mut m, stack).unwrap();
        let ids: Vec<_> = m.store.iter().map(|(id, _)| id).collect();
        let mut r = stream(4, &[]);
        for id in ids {
            let shape = m.store.value(id).shape().to_vec();
            m.store.assign(id, Tensor::uniform(&shape, -1.0, 1.0, &mut r)).unwrap();
        }
        m
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let c = cfg();
        let m = perturbed(&c);
        let a = to_bytes(&m, &c.hash(), "ours_t", 7).unwrap();
        let (back, manifest) = model_from_bytes(&c, &a).unwrap();
        assert_eq!(manifest.step, 7);
        assert_eq!(manifest.stages(), vec![1]);
        let b = to_bytes(&back, &c.hash(), "ours_t", 7).unwrap();
        assert_eq!(a, b);
        assert!(back.stacks.contains_key(&1));
    }

    #[test]
    fn adapter_checkpoints_round_trip() {
        let c = cfg();
        let mut m = Denoiser::new(&c.unet, &mut stream(c.init_seed, &[tag::INIT])).unwrap();
        attach_lowrank(&mut m, 4, &LayerFilter::AllEligible, &mut stream(5, &[])).unwrap();
        let a = to_bytes(&m, "h", "lowrank4", 0).unwrap();
        let (back, _) = model_from_bytes(&c, &a).unwrap();
        assert_eq!(to_bytes(&back, "h", "lowrank4", 0).unwrap(), a);
        assert_eq!(back.lowrank.as_ref().unwrap().rank, 4);
    }

    #[test]
    fn rejects_version_and_shape_mismatch() {
        let c = cfg();
        let m = perturbed(&c);
        let bytes = to_bytes(&m, "h", "ours_t", 0).unwrap();
        let (mut manifest, blob) = parse(&bytes).unwrap();
        manifest.format_version = 99;
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut forged = MAGIC.to_vec();
        forged.extend((json.len() as u64).to_le_bytes());
        forged.extend(json);
        forged.extend(blob);
        assert!(model_from_bytes(&c, &forged).unwrap_err().to_string().contains("format version"));

        let mut wider = c.clone();
        wider.unet.base_channels = 12;
        let err = model_from_bytes(&wider, &bytes).unwrap_err().to_string();
        assert!(err.contains("conv_in.weight") || err.contains("tensor"), "{err}");
        assert!(model_from_bytes(&c, b"garbage").is_err());
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg();
        let m = perturbed(&c);
        let p = dir.path().join("sub/model.ckpt");
        let h1 = save(&p, &m, &c.hash(), "ours_t", 1).unwrap();
        let (back, _) = load(&c, &p).unwrap();
        let p2 = dir.path().join("again.ckpt");
        let h2 = save(&p2, &back, &c.hash(), "ours_t", 1).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(file_hash(&p).unwrap(), h1);
    }
}
