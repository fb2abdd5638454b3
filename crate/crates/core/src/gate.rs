//! Task-motivated gate: expert weights that depend on the task id alone.
//!
//! For task `j` the gate reads row `e_j` of the task-embedding matrix `E`,
//! forms common-expert logits `WC·e_j` and a specific-expert logit `WS·e_j`,
//! and normalizes their concatenation with a softmax. The first `N_C`
//! entries weight the common experts, the last one the task's own expert.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::INIT_STD;
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Normalized expert weights, common experts first.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights(Vec<f64>);

impl GateWeights {
    pub fn new(w: Vec<f64>) -> Self {
        Self(w)
    }

    /// `1/(N_C+1)` for each of the `N_C + 1` experts.
    pub fn uniform(n_common: usize) -> Self {
        let n = n_common + 1;
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn common(&self) -> &[f64] {
        &self.0[..self.0.len() - 1]
    }

    pub fn specific(&self) -> f64 {
        self.0[self.0.len() - 1]
    }
}

pub fn uniform_weights(n_common: usize) -> GateWeights {
    GateWeights::uniform(n_common)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSharing {
    /// One gate referenced by every adapted layer.
    #[default]
    SingleShared,
    /// An independent gate (with its own `E`) per transformer block.
    PerLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskGate {
    pub embedding: ParamId,
    pub common_transform: Option<ParamId>,
    pub specific_transform: ParamId,
    pub n_tasks: usize,
    pub n_common: usize,
    pub d_task: usize,
}

impl TaskGate {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        n_tasks: usize,
        n_common: usize,
        d_task: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_tasks == 0 || d_task == 0 {
            return Err(Error::Config(format!(
                "{name}: gate needs at least one task and a positive embedding dimension"
            )));
        }
        let trainable = |shape: &[usize], rng: &mut ChaCha8Rng| {
            Tensor::randn(shape, INIT_STD, rng).with_requires_grad(true)
        };
        let embedding = store.add(format!("{name}.E"), trainable(&[n_tasks, d_task], rng));
        let common_transform =
            (n_common > 0).then(|| store.add(format!("{name}.WC"), trainable(&[n_common, d_task], rng)));
        let specific_transform = store.add(format!("{name}.WS"), trainable(&[1, d_task], rng));
        Ok(Self {
            embedding,
            common_transform,
            specific_transform,
            n_tasks,
            n_common,
            d_task,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.embedding];
        out.extend(self.common_transform);
        out.push(self.specific_transform);
        out
    }

    /// `N_T·d_T + N_C·d_T + d_T`.
    pub fn param_count(&self) -> usize {
        (self.n_tasks + self.n_common + 1) * self.d_task
    }

    /// Softmax-normalized weights for `task` as a tape node of length
    /// `N_C + 1`.
    pub fn weights_on(&self, tape: &mut Tape<'_>, task: usize) -> Result<Var> {
        if task >= self.n_tasks {
            return Err(Error::TaskNotRegistered(task));
        }
        let e = tape.param(self.embedding);
        let e_j = tape.gather_rows(e, &[task])?;
        let ws = tape.param(self.specific_transform);
        let spec = tape.matmul_nt(e_j, ws)?;
        let logits = match self.common_transform {
            Some(wc) => {
                let wc = tape.param(wc);
                let common = tape.matmul_nt(e_j, wc)?;
                tape.concat(&[common, spec])?
            }
            None => tape.reshape(spec, &[1])?,
        };
        tape.softmax(logits)
    }
}

/// Gate weights for `task`, independent of any input sample.
pub fn gate_weights(store: &ParamStore, gate: &TaskGate, task: usize) -> Result<GateWeights> {
    let mut tape = Tape::with_params(store);
    let w = gate.weights_on(&mut tape, task)?;
    Ok(GateWeights(tape.value(w).to_vec()))
}

/// The gates of a model and which one each block uses.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSet {
    pub sharing: GateSharing,
    pub gates: Vec<TaskGate>,
    layer_count: usize,
}

impl GateSet {
    pub fn for_layer(&self, layer: usize) -> usize {
        match self.sharing {
            GateSharing::SingleShared => 0,
            GateSharing::PerLayer => layer,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.gates.iter().flat_map(TaskGate::params).collect()
    }

    pub fn param_count(&self) -> usize {
        self.gates.iter().map(TaskGate::param_count).sum()
    }
}

pub fn make_gates(
    store: &mut ParamStore,
    sharing: GateSharing,
    layer_count: usize,
    n_tasks: usize,
    n_common: usize,
    d_task: usize,
    seed: u64,
) -> Result<GateSet> {
    if layer_count == 0 {
        return Err(Error::Config("layer_count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = match sharing {
        GateSharing::SingleShared => 1,
        GateSharing::PerLayer => layer_count,
    };
    let gates = (0..count)
        .map(|l| TaskGate::init(store, &format!("gate{l}"), n_tasks, n_common, d_task, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(GateSet {
        sharing,
        gates,
        layer_count,
    })
}
