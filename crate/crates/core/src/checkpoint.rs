//! Versioned JSON checkpoints, written atomically.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asr::ToyAsr;
use crate::disent::ProtoDisentModel;
use crate::error::{Error, Result};
use crate::training::{build_param_groups, ParameterGroupManifest, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

/// Write `bytes` to a sibling temporary file, sync it, then rename it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub train_config: TrainConfig,
    pub manifest: ParameterGroupManifest,
    pub model: ProtoDisentModel,
}

impl ModelCheckpoint {
    pub fn new(model: ProtoDisentModel, train_config: TrainConfig) -> Result<Self> {
        let manifest = build_param_groups(&model, &train_config)?;
        Ok(Self {
            version: FORMAT_VERSION,
            train_config,
            manifest,
            model,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut ck: Self = serde_json::from_slice(&fs::read(path)?)?;
        check_version(ck.version)?;
        ck.model.store.reindex()?;
        for (group, entry) in &ck.manifest.groups {
            for p in &entry.params {
                let id = ck
                    .model
                    .store
                    .id(p)
                    .ok_or_else(|| Error::Integrity(format!("manifest lists unknown parameter `{p}`")))?;
                if ck.model.store.get(id).group.name() != group {
                    return Err(Error::Integrity(format!("parameter `{p}` is not in group `{group}`")));
                }
            }
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsrCheckpoint {
    pub version: u32,
    pub asr: ToyAsr,
}

impl AsrCheckpoint {
    pub fn save(asr: &ToyAsr, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Borrowed<'a> {
            version: u32,
            asr: &'a ToyAsr,
        }
        write_atomic(
            path,
            &serde_json::to_vec(&Borrowed {
                version: FORMAT_VERSION,
                asr,
            })?,
        )
    }

    pub fn load(path: &Path) -> Result<ToyAsr> {
        let mut ck: Self = serde_json::from_slice(&fs::read(path)?)?;
        check_version(ck.version)?;
        ck.asr.reindex()?;
        Ok(ck.asr)
    }
}

fn check_version(v: u32) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "checkpoint format version {v}, expected {FORMAT_VERSION}"
        )));
    }
    Ok(())
}
