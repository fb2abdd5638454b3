//! Static per-task weights, the cluster registry and batch-by-task
//! inference.
//!
//! Because gate weights depend only on the task id, every adapted layer
//! collapses for task `j` to one matrix
//! `W_j = W0 + (α/r)·[w^S_j·B^S_j·A^S_j + Σ_i w^C_{ji}·B^C_i·A^C_i]`.
//! Inference for a task therefore runs on a plain dense network, and the
//! merge is computed once per task rather than once per sample.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::CgcLoraLayer;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gate::GateWeights;
use crate::model::{ToyTransformer, Weights};
use crate::taskdata::{wrap_input, TaskSpec, Tokenizer, BOS, EOS};
use crate::tensor::{ParamStore, Tensor};

/// Fused matrices for one task, in [`ToyTransformer::adapted_layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedModel {
    pub task: usize,
    pub layers: Vec<Tensor>,
}

/// `W_j` for one layer.
pub fn merge_task_weights(
    store: &ParamStore,
    layer: &CgcLoraLayer,
    weights: &GateWeights,
    task: usize,
) -> Result<Tensor> {
    let delta = layer.delta(store, task, weights)?;
    let w0 = store.get(layer.w0);
    let data = w0.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect();
    Tensor::matrix(w0.rows(), w0.cols(), data)
}

/// Fused weights of every adapted layer for `task`.
pub fn merge_model(model: &ToyTransformer, task: usize) -> Result<MergedModel> {
    let layers = model.adapted_layers();
    let n_gates = model.gates.as_ref().map_or(1, |g| g.gates.len());
    // one gate evaluation per distinct gate, shared by the layers using it
    let weights: Vec<GateWeights> = (0..n_gates)
        .map(|g| model.gate_weights(task, g))
        .collect::<Result<_>>()?;
    let gate_of = |l: &CgcLoraLayer| model.gates.as_ref().map_or(0, |g| g.for_layer(l.gate_ref));
    let fused = layers
        .iter()
        .map(|l| merge_task_weights(&model.store, l, &weights[gate_of(l)], task))
        .collect::<Result<Vec<_>>>()?;
    Ok(MergedModel { task, layers: fused })
}

/// One merged set per task.
pub fn retrieve_all(model: &ToyTransformer) -> Result<Vec<MergedModel>> {
    (0..model.n_tasks).map(|t| merge_model(model, t)).collect()
}

/// Greedy continuation of `prompt` until `EOS`, `max_new_tokens` or the
/// context limit. Returns the generated ids without the trailing `EOS`.
pub fn greedy_decode(
    model: &ToyTransformer,
    weights: Weights<'_>,
    prompt: &[usize],
    max_new_tokens: usize,
) -> Result<Vec<usize>> {
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    let vocab = model.config.vocab_size;
    for _ in 0..max_new_tokens {
        if tokens.len() >= model.config.max_seq_len {
            break;
        }
        let logits = model.forward(&tokens, weights)?;
        let last = &logits.data()[logits.len() - vocab..];
        let next = argmax(last);
        if next == EOS {
            break;
        }
        tokens.push(next);
        out.push(next);
    }
    Ok(out)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// One routable cluster: a model, its task set and cached merges.
#[derive(Debug)]
pub struct ClusterEntry {
    pub model: ToyTransformer,
    /// Global task ids, position = local task id in the model.
    pub tasks: Vec<usize>,
    /// Prompt and answer templates, indexed by local task id.
    pub specs: Vec<TaskSpec>,
    pub merged: Vec<MergedModel>,
    accesses: AtomicUsize,
}

impl ClusterEntry {
    /// How many times inference read this cluster's parameters.
    pub fn accesses(&self) -> usize {
        self.accesses.load(Ordering::Relaxed)
    }
}

/// Routes tasks to the adapter set of their cluster.
#[derive(Debug, Default)]
pub struct AdapterRegistry {
    tokenizer: Tokenizer,
    clusters: BTreeMap<String, ClusterEntry>,
    routes: HashMap<usize, (String, usize)>,
    merges: AtomicUsize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferRequest {
    pub cluster_id: String,
    pub task_id: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferOutput {
    pub task_id: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub text: Option<String>,
    pub token_count: usize,
    pub latency_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    /// Per-task fused weights.
    Merged,
    /// Gated expert forward, no fusion.
    Unmerged,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Registers a cluster and eagerly merges its per-task weights.
    ///
    /// `task_ids` are global ids; entry `k` is served by local task `k` of
    /// `model` and uses `specs[k]`.
    pub fn register_cluster(
        &mut self,
        cluster_id: &str,
        task_ids: &[usize],
        specs: Vec<TaskSpec>,
        model: ToyTransformer,
    ) -> Result<()> {
        if self.clusters.contains_key(cluster_id) {
            return Err(Error::Config(format!("cluster {cluster_id:?} is already registered")));
        }
        for (i, t) in task_ids.iter().enumerate() {
            if let Some((c, _)) = self.routes.get(t) {
                return Err(Error::RegistryConflict {
                    task: *t,
                    cluster: c.clone(),
                });
            }
            if task_ids[..i].contains(t) {
                return Err(Error::RegistryConflict {
                    task: *t,
                    cluster: cluster_id.to_string(),
                });
            }
        }
        if task_ids.len() != model.n_tasks {
            return Err(Error::Config(format!(
                "cluster {cluster_id:?} lists {} tasks but its model serves {}",
                task_ids.len(),
                model.n_tasks
            )));
        }
        let merged = retrieve_all(&model)?;
        self.merges.fetch_add(merged.len(), Ordering::Relaxed);
        self.register_merged(cluster_id, task_ids, specs, model, merged)
    }

    /// Registers a cluster whose fused weights were computed elsewhere.
    pub fn register_merged(
        &mut self,
        cluster_id: &str,
        task_ids: &[usize],
        specs: Vec<TaskSpec>,
        model: ToyTransformer,
        merged: Vec<MergedModel>,
    ) -> Result<()> {
        if self.clusters.contains_key(cluster_id) {
            return Err(Error::Config(format!("cluster {cluster_id:?} is already registered")));
        }
        if let Some(t) = task_ids.iter().find(|t| self.routes.contains_key(t)) {
            return Err(Error::RegistryConflict {
                task: *t,
                cluster: self.routes[t].0.clone(),
            });
        }
        if merged.len() != task_ids.len() || specs.len() != task_ids.len() || model.n_tasks != task_ids.len() {
            return Err(Error::Contract(
                "cluster needs one spec and one merged set per task of its model".into(),
            ));
        }
        for (local, &t) in task_ids.iter().enumerate() {
            self.routes.insert(t, (cluster_id.to_string(), local));
        }
        self.clusters.insert(
            cluster_id.to_string(),
            ClusterEntry {
                model,
                tasks: task_ids.to_vec(),
                specs,
                merged,
                accesses: AtomicUsize::new(0),
            },
        );
        Ok(())
    }

    pub fn cluster(&self, id: &str) -> Option<&ClusterEntry> {
        self.clusters.get(id)
    }

    pub fn cluster_ids(&self) -> impl Iterator<Item = &str> {
        self.clusters.keys().map(String::as_str)
    }

    pub fn routable_tasks(&self) -> usize {
        self.routes.len()
    }

    /// Number of per-task merges performed so far.
    pub fn merge_invocations(&self) -> usize {
        self.merges.load(Ordering::Relaxed)
    }

    /// `(cluster, local task)` for a global task id. A task registered
    /// under a different cluster is not registered in this one.
    pub fn route(&self, cluster_id: &str, task_id: usize) -> Result<(&ClusterEntry, usize)> {
        let entry = self
            .clusters
            .get(cluster_id)
            .ok_or_else(|| Error::UnknownCluster(cluster_id.to_string()))?;
        match self.routes.get(&task_id) {
            Some((c, local)) if c == cluster_id => Ok((entry, *local)),
            _ => Err(Error::TaskNotRegistered(task_id)),
        }
    }

    /// Greedy generation for every request, grouped by task so each task's
    /// fused weights are looked up once. Failures become error records and
    /// the batch continues. Output order matches input order.
    pub fn infer_batch(
        &self,
        requests: &[InferRequest],
        max_new_tokens: usize,
        mode: InferMode,
        exec: Exec,
    ) -> Vec<InferOutput> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in requests.iter().enumerate() {
            groups.entry(r.task_id).or_default().push(i);
        }
        let mut out: Vec<Option<InferOutput>> = vec![None; requests.len()];
        for (task_id, idxs) in groups {
            let failed = |msg: String| InferOutput {
                task_id,
                text: None,
                token_count: 0,
                latency_ms: 0.0,
                error: Some(msg),
            };
            let mut routed: Vec<(usize, Result<(&ClusterEntry, usize)>)> = idxs
                .iter()
                .map(|&i| (i, self.route(&requests[i].cluster_id, task_id)))
                .collect();
            let ok: Vec<(usize, &ClusterEntry, usize)> = routed
                .iter_mut()
                .filter_map(|(i, r)| match r {
                    Ok((c, l)) => Some((*i, *c, *l)),
                    Err(e) => {
                        out[*i] = Some(failed(e.to_string()));
                        None
                    }
                })
                .collect();
            let results = exec.map(&ok, |&(i, entry, local)| {
                entry.accesses.fetch_add(1, Ordering::Relaxed);
                let started = Instant::now();
                let weights = match mode {
                    InferMode::Merged => Weights::Merged(&entry.merged[local]),
                    InferMode::Unmerged => Weights::Adapted { task: local },
                };
                let res = self
                    .prompt(entry, local, &requests[i].text)
                    .and_then(|p| greedy_decode(&entry.model, weights, &p, max_new_tokens));
                let latency_ms = started.elapsed().as_secs_f64() * 1e3;
                match res {
                    Ok(ids) => InferOutput {
                        task_id,
                        text: Some(self.tokenizer.detokenize(&ids)),
                        token_count: ids.len(),
                        latency_ms,
                        error: None,
                    },
                    Err(e) => InferOutput {
                        task_id,
                        text: None,
                        token_count: 0,
                        latency_ms,
                        error: Some(e.to_string()),
                    },
                }
            });
            for ((i, _, _), r) in ok.iter().zip(results) {
                out[*i] = Some(r);
            }
        }
        out.into_iter().map(|o| o.expect("every request answered")).collect()
    }

    /// `BOS · wrapped input` for a raw request text.
    fn prompt(&self, entry: &ClusterEntry, local: usize, raw: &str) -> Result<Vec<usize>> {
        let wrapped = wrap_input(&entry.specs[local], raw)?;
        let mut ids = vec![BOS];
        ids.extend(self.tokenizer.tokenize(&wrapped)?);
        Ok(ids)
    }
}

