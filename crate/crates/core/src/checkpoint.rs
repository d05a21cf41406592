//! Checkpoint directories: `params.bin` (named little-endian f64 tensors),
//! `optimizer.bin` (moment estimates, same encoding) and `meta.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_json, write_json};
use crate::network::{CNModel, NetworkConfig, Stage1Model, UMSNModel};
use crate::semantics::{ClassId, SNetModel};
use crate::tensor::{ParamStore, Tensor};

pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

const MAGIC: &[u8; 8] = b"UMSNTNS1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Snet,
    SnetFinetune,
    Stage1,
    Umsn,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Snet => "snet",
            Phase::SnetFinetune => "snet_finetune",
            Phase::Stage1 => "stage1",
            Phase::Umsn => "umsn",
        }
    }
}

/// Enough to rebuild the parameter layout before loading values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Snet {
        width_multiplier: f64,
        seed: u64,
    },
    Stage1 {
        class: ClassId,
        width_multiplier: f64,
        seed: u64,
    },
    Umsn {
        network: NetworkConfig,
        seed: u64,
        /// Whether a confidence scorer is stored alongside.
        confidence: bool,
    },
}

impl ModelSpec {
    pub fn width_multiplier(&self) -> f64 {
        match self {
            ModelSpec::Snet { width_multiplier, .. } | ModelSpec::Stage1 { width_multiplier, .. } => {
                *width_multiplier
            }
            ModelSpec::Umsn { network, .. } => network.width_multiplier,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: Phase,
    pub iteration: u64,
    pub config_digest: String,
    pub master_seed: u64,
    pub width_multiplier: f64,
    pub model: ModelSpec,
    #[serde(default)]
    pub optimizer_step: u64,
}

pub type NamedTensors = BTreeMap<String, Tensor>;

pub fn encode_tensors(tensors: &NamedTensors) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(path: &Path, bytes: &[u8]) -> Result<NamedTensors> {
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated tensor archive"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(bad("not a tensor archive"));
    }
    let read_u64 = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
    let count = read_u64(take(8)?);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = read_u64(take(8)?) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = read_u64(take(8)?) as usize;
        }
        let n: usize = shape.iter().product();
        let raw = take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.insert(name, Tensor::from_vec(shape, data));
    }
    Ok(out)
}

pub fn store_tensors(ps: &ParamStore) -> NamedTensors {
    ps.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect()
}

/// Fills every parameter of `ps` from `tensors`; names and shapes must match.
pub fn restore_store(ps: &mut ParamStore, tensors: &NamedTensors) -> Result<()> {
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let name = ps.name(id).to_string();
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
        if t.shape() != ps.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?} in the checkpoint but {:?} in the model",
                t.shape(),
                ps.get(id).shape()
            )));
        }
        *ps.get_mut(id) = t.clone();
    }
    Ok(())
}

/// In-memory checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: NamedTensors,
    pub optimizer: NamedTensors,
}

impl Checkpoint {
    /// Writes into a sibling temporary directory, then renames it into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = match dir.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => std::path::PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
        let tmp = tempfile::Builder::new()
            .prefix(".ckpt-")
            .tempdir_in(&parent)
            .map_err(|e| Error::io(&parent, e))?;
        atomic_write(&tmp.path().join(PARAMS_FILE), &encode_tensors(&self.params))?;
        atomic_write(&tmp.path().join(OPTIMIZER_FILE), &encode_tensors(&self.optimizer))?;
        write_json(&tmp.path().join(META_FILE), &self.meta)?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = tmp.keep();
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CheckpointMeta = read_json(&dir.join(META_FILE))?;
        let read = |name: &str| -> Result<NamedTensors> {
            let p = dir.join(name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            decode_tensors(&p, &bytes)
        };
        let params = read(PARAMS_FILE)?;
        let optimizer = if dir.join(OPTIMIZER_FILE).exists() {
            read(OPTIMIZER_FILE)?
        } else {
            NamedTensors::new()
        };
        Ok(Self {
            meta,
            params,
            optimizer,
        })
    }

    pub fn snet(&self) -> Result<SNetModel> {
        match self.meta.model {
            ModelSpec::Snet {
                width_multiplier,
                seed,
            } => {
                let mut m = SNetModel::new(width_multiplier, seed)?;
                restore_store(m.params_mut(), &self.params)?;
                Ok(m)
            }
            ref other => Err(Error::Checkpoint(format!("expected an S-Net checkpoint, found {other:?}"))),
        }
    }

    pub fn stage1(&self) -> Result<Stage1Model> {
        match self.meta.model {
            ModelSpec::Stage1 {
                class,
                width_multiplier,
                seed,
            } => {
                let mut m = Stage1Model::new(class, width_multiplier, seed)?;
                restore_store(m.params_mut(), &self.params)?;
                Ok(m)
            }
            ref other => Err(Error::Checkpoint(format!(
                "expected a first-stage checkpoint, found {other:?}"
            ))),
        }
    }

    /// The deblurring network and, when stored, its confidence scorer.
    pub fn umsn(&self) -> Result<(UMSNModel, Option<CNModel>)> {
        match self.meta.model {
            ModelSpec::Umsn {
                network,
                seed,
                confidence,
            } => {
                let mut m = UMSNModel::new(network, seed)?;
                restore_store(m.params_mut(), &self.params)?;
                let cn = if confidence {
                    let mut cn = CNModel::new(network.width_multiplier, seed)?;
                    restore_store(cn.params_mut(), &self.params)?;
                    Some(cn)
                } else {
                    None
                };
                Ok((m, cn))
            }
            ref other => Err(Error::Checkpoint(format!("expected a UMSN checkpoint, found {other:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_tensor;

    fn meta(model: ModelSpec) -> CheckpointMeta {
        CheckpointMeta {
            phase: Phase::Umsn,
            iteration: 3,
            config_digest: "abc".into(),
            master_seed: 1,
            width_multiplier: model.width_multiplier(),
            model,
            optimizer_step: 3,
        }
    }

    #[test]
    fn archive_round_trip() {
        let mut t = NamedTensors::new();
        t.insert("a.b".into(), random_tensor([2, 3, 1, 4], 1));
        t.insert("c".into(), Tensor::scalar(f64::MIN_POSITIVE));
        let bytes = encode_tensors(&t);
        assert_eq!(decode_tensors(Path::new("x"), &bytes).unwrap(), t);
        assert!(decode_tensors(Path::new("x"), &bytes[..bytes.len() - 1]).is_err());
        assert!(decode_tensors(Path::new("x"), b"garbage!").is_err());
    }

    #[test]
    fn umsn_checkpoint_reproduces_outputs() {
        let network = NetworkConfig::umsn(0.25);
        let mut model = UMSNModel::new(network, 4).unwrap();
        // perturb so that the loaded model cannot match by re-initialisation alone
        for id in model.params().ids().collect::<Vec<_>>() {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v += 1e-3;
            }
        }
        let cn = CNModel::new(0.25, 4).unwrap();
        let mut params = store_tensors(model.params());
        params.extend(store_tensors(cn.params()));
        let ck = Checkpoint {
            meta: meta(ModelSpec::Umsn {
                network,
                seed: 4,
                confidence: true,
            }),
            params,
            optimizer: NamedTensors::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        ck.save(&path).unwrap();
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ck);
        let (m2, cn2) = loaded.umsn().unwrap();
        assert!(cn2.is_some());
        let y = random_tensor([1, 3, 16, 16], 2).map(|v| 0.5 + 0.3 * v);
        let masks = Tensor::full([1, 4, 16, 16], 0.25);
        assert_eq!(model.predict(&y, &masks).unwrap(), m2.predict(&y, &masks).unwrap());
        assert!(loaded.snet().is_err());
    }

    #[test]
    fn topology_mismatch_is_reported() {
        let model = Stage1Model::new(ClassId::new(1).unwrap(), 0.25, 1).unwrap();
        let ck = Checkpoint {
            meta: meta(ModelSpec::Stage1 {
                class: ClassId::new(1).unwrap(),
                width_multiplier: 0.5,
                seed: 1,
            }),
            params: store_tensors(model.params()),
            optimizer: NamedTensors::new(),
        };
        let err = ck.stage1().unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }
}
