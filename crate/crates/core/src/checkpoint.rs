//! Versioned checkpoint directories: `manifest.json` plus one raw little-endian
//! f32 file per parameter group, alongside the telemetry CSVs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Module, NamedTensor, TensorKind};
use crate::model::Network;
use crate::ssam::ShiftState;
use crate::telemetry::write_telemetry;
use crate::trainer::{EpochRecord, FrozenMasks, TrainConfig, TrainedModel};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const GROUPS: [&str; 5] = ["stem", "rfe", "die", "disc", "head"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub file: String,
    /// Total number of f32 values in the file.
    pub len: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub bands: usize,
    pub num_classes: usize,
    pub config: TrainConfig,
    pub groups: Vec<GroupEntry>,
    pub shift: ShiftState,
    pub frozen: FrozenMasks,
    pub history: Vec<EpochRecord>,
}

fn group_tensors<'a>(net: &'a Network<f32>, group: &str) -> Vec<NamedTensor<'a, f32>> {
    let mut out = Vec::new();
    match group {
        "stem" => net.stem.tensors(group, &mut out),
        "rfe" => net.rfe.tensors(group, &mut out),
        "die" => net.die.tensors(group, &mut out),
        "disc" => net.disc.tensors(group, &mut out),
        "head" => net.head.tensors(group, &mut out),
        _ => unreachable!("unknown group {group}"),
    }
    out
}

fn group_tensors_mut<'a>(net: &'a mut Network<f32>, group: &str) -> Vec<(TensorKind, &'a mut Vec<f32>)> {
    let mut out = Vec::new();
    match group {
        "stem" => net.stem.tensors_mut(&mut out),
        "rfe" => net.rfe.tensors_mut(&mut out),
        "die" => net.die.tensors_mut(&mut out),
        "disc" => net.disc.tensors_mut(&mut out),
        "head" => net.head.tensors_mut(&mut out),
        _ => unreachable!("unknown group {group}"),
    }
    out
}

fn group_entries(net: &Network<f32>) -> Vec<GroupEntry> {
    GROUPS
        .iter()
        .map(|&g| {
            let tensors = group_tensors(net, g);
            GroupEntry {
                name: g.to_string(),
                file: format!("{g}.f32"),
                len: tensors.iter().map(|t| t.data.len()).sum(),
                tensors: tensors
                    .into_iter()
                    .map(|t| TensorEntry {
                        name: t.name,
                        kind: t.kind,
                        shape: t.shape,
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Writes the model and its telemetry into `dir` (created if missing).
pub fn save_checkpoint(model: &TrainedModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let net = &model.network;
    for g in GROUPS {
        let mut bytes = Vec::new();
        for t in group_tensors(net, g) {
            for v in t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let path = dir.join(format!("{g}.f32"));
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        bands: net.bands,
        num_classes: net.num_classes,
        config: model.config.clone(),
        groups: group_entries(net),
        shift: model.shift.clone(),
        frozen: model.frozen.clone(),
        history: model.history.clone(),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    write_telemetry(&model.history, dir)
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("unreadable manifest: {e}")))?;
    let found = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::format(path, "missing format_version"))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(Error::Version {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::format(path, format!("invalid manifest: {e}")))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<TrainedModel> {
    let dir = dir.as_ref();
    let manifest = read_manifest(&dir.join(MANIFEST))?;
    let cfg = &manifest.config;
    let mut net = Network::<f32>::new(manifest.bands, manifest.num_classes, &cfg.backbone, cfg.disc_hidden, cfg.seed)?;
    let expected = group_entries(&net);
    if expected.len() != manifest.groups.len() {
        return Err(Error::format(dir.join(MANIFEST), "parameter groups do not match the configuration"));
    }
    for (want, have) in expected.iter().zip(&manifest.groups) {
        if want.name != have.name || want.tensors != have.tensors || want.len != have.len {
            return Err(Error::format(
                dir.join(MANIFEST),
                format!("group {} does not match the configuration", have.name),
            ));
        }
        let path: PathBuf = dir.join(&have.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != have.len * 4 {
            return Err(Error::format(
                &path,
                format!("expected {} bytes, found {}", have.len * 4, bytes.len()),
            ));
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for (_, t) in group_tensors_mut(&mut net, &have.name) {
            t.iter_mut().for_each(|v| *v = values.next().expect("length checked"));
        }
    }
    Ok(TrainedModel {
        config: manifest.config,
        network: net,
        shift: manifest.shift,
        history: manifest.history,
        frozen: manifest.frozen,
    })
}
