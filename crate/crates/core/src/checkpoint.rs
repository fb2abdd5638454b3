//! Binary checkpoint container.
//!
//! ```text
//! b"CGCLORA1" | u64 LE manifest length | JSON manifest | f64 LE tensor data
//! ```
//!
//! The manifest echoes the model config and lists every tensor with its
//! role, shape and element offset into the data section. Loading rebuilds
//! the model from the config and then overwrites every tensor by name, so
//! a checkpoint can only be loaded into the structure it was taken from.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::MergedModel;
use crate::model::{build_model, ModelConfig, ToyTransformer};
use crate::tensor::{ParamId, Tensor};

pub const MAGIC: &[u8; 8] = b"CGCLORA1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "role")]
pub enum Role {
    Base,
    CommonA { layer: String, expert: usize },
    CommonB { layer: String, expert: usize },
    SpecificA { layer: String, task: usize },
    SpecificB { layer: String, task: usize },
    TaskEmbedding { gate: usize },
    CommonTransform { gate: usize },
    SpecificTransform { gate: usize },
    Merged { task: usize, layer: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    #[serde(flatten)]
    pub role: Role,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Model,
    Merged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: Kind,
    pub config: ModelConfig,
    pub n_tasks: usize,
    pub tensors: Vec<TensorEntry>,
    /// Free-form caller data, e.g. cluster membership.
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn roles(model: &ToyTransformer) -> HashMap<ParamId, Role> {
    let mut out = HashMap::new();
    for layer in model.adapted_layers() {
        for (i, e) in layer.bank.common.iter().enumerate() {
            let l = layer.name.clone();
            out.insert(e.a, Role::CommonA { layer: l.clone(), expert: i });
            out.insert(e.b, Role::CommonB { layer: l, expert: i });
        }
        for (j, e) in layer.bank.specific.iter().enumerate() {
            let l = layer.name.clone();
            out.insert(e.a, Role::SpecificA { layer: l.clone(), task: j });
            out.insert(e.b, Role::SpecificB { layer: l, task: j });
        }
    }
    if let Some(set) = &model.gates {
        for (g, gate) in set.gates.iter().enumerate() {
            out.insert(gate.embedding, Role::TaskEmbedding { gate: g });
            if let Some(wc) = gate.common_transform {
                out.insert(wc, Role::CommonTransform { gate: g });
            }
            out.insert(gate.specific_transform, Role::SpecificTransform { gate: g });
        }
    }
    out
}

fn write_container(path: &Path, manifest: &Manifest, tensors: &[&Tensor]) -> Result<()> {
    let json = serde_json::to_vec(manifest)?;
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * total);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for t in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Manifest, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Format("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", manifest.version)));
    }
    let data = &bytes[16 + len..];
    if data.len() % 8 != 0 {
        return Err(Error::Format("data section is not a whole number of f64".into()));
    }
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((manifest, values))
}

fn slice<'a>(values: &'a [f64], e: &TensorEntry) -> Result<&'a [f64]> {
    let n: usize = e.shape.iter().product();
    values
        .get(e.offset..e.offset + n)
        .ok_or_else(|| Error::Format(format!("tensor {} runs past the data section", e.name)))
}

/// Writes every tensor of `model`, frozen and trainable.
pub fn save_model(path: &Path, model: &ToyTransformer, meta: serde_json::Value) -> Result<()> {
    let roles = roles(model);
    let mut offset = 0;
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    for id in model.store.ids() {
        let t = model.store.get(id);
        entries.push(TensorEntry {
            name: model.store.name(id).to_string(),
            role: roles.get(&id).cloned().unwrap_or(Role::Base),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        tensors.push(t);
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        kind: Kind::Model,
        config: model.config.clone(),
        n_tasks: model.n_tasks,
        tensors: entries,
        meta,
    };
    write_container(path, &manifest, &tensors)
}

/// Rebuilds the model described by the manifest and restores every tensor.
pub fn load_model(path: &Path) -> Result<(ToyTransformer, Manifest)> {
    let (manifest, values) = read_container(path)?;
    if manifest.kind != Kind::Model {
        return Err(Error::Format("expected a model checkpoint".into()));
    }
    let mut model = build_model(&manifest.config, manifest.n_tasks)?;
    let by_name: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    if by_name.len() != model.store.len() || manifest.tensors.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, model has {}",
            manifest.tensors.len(),
            model.store.len()
        )));
    }
    let roles = roles(&model);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let e = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Format(format!("tensor {name} missing from checkpoint")))?;
        let want_role = roles.get(&id).cloned().unwrap_or(Role::Base);
        if e.role != want_role || e.shape != model.store.get(id).shape() {
            return Err(Error::Format(format!("tensor {name} has the wrong role or shape")));
        }
        let src = slice(&values, e)?;
        model.store.get_mut(id).data_mut().copy_from_slice(src);
    }
    Ok((model, manifest))
}

/// Writes per-task fused matrices.
pub fn save_merged(path: &Path, model: &ToyTransformer, merged: &[MergedModel], meta: serde_json::Value) -> Result<()> {
    let names: Vec<String> = model.adapted_layers().iter().map(|l| l.name.clone()).collect();
    let mut offset = 0;
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    for m in merged {
        if m.layers.len() != names.len() {
            return Err(Error::Contract("merged set does not match the model".into()));
        }
        for (layer, t) in names.iter().zip(&m.layers) {
            entries.push(TensorEntry {
                name: format!("merged.task{}.{layer}", m.task),
                role: Role::Merged {
                    task: m.task,
                    layer: layer.clone(),
                },
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            tensors.push(t);
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        kind: Kind::Merged,
        config: model.config.clone(),
        n_tasks: model.n_tasks,
        tensors: entries,
        meta,
    };
    write_container(path, &manifest, &tensors)
}

/// Reads per-task fused matrices, grouped by task in ascending order.
pub fn load_merged(path: &Path) -> Result<(Vec<MergedModel>, Manifest)> {
    let (manifest, values) = read_container(path)?;
    if manifest.kind != Kind::Merged {
        return Err(Error::Format("expected a merged-weights checkpoint".into()));
    }
    let mut sets: Vec<MergedModel> = (0..manifest.n_tasks)
        .map(|task| MergedModel {
            task,
            layers: Vec::new(),
        })
        .collect();
    for e in &manifest.tensors {
        let Role::Merged { task, .. } = e.role else {
            return Err(Error::Format(format!("unexpected role for {}", e.name)));
        };
        let set = sets
            .get_mut(task)
            .ok_or_else(|| Error::Format(format!("task {task} outside 0..{}", manifest.n_tasks)))?;
        set.layers.push(Tensor::new(e.shape.clone(), slice(&values, e)?.to_vec())?);
    }
    Ok((sets, manifest))
}
