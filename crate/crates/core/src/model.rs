//! Decoder-only toy transformer whose projections carry CGC-LoRA layers.
//!
//! Pre-norm blocks with non-affine layer norm, causal multi-head attention,
//! a GELU feed-forward and learned positional embeddings. Every base tensor
//! is frozen; only expert banks and gates are trainable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{CgcLoraLayer, ExpertLayout};
use crate::error::{Error, Result};
use crate::gate::{make_gates, GateSet, GateSharing, GateWeights};
use crate::merge::MergedModel;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Training/ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Common and task-specific experts weighted by the task gate.
    #[default]
    CgcLora,
    /// One common expert holding the full rank, weight fixed at 1.
    LoraFull,
    /// CGC experts with uniform weights and no gate parameters.
    WoGate,
    /// CGC experts with an independent gate per block.
    MultiGate,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::CgcLora, Variant::LoraFull, Variant::WoGate, Variant::MultiGate];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CgcLora => "cgc_lora",
            Variant::LoraFull => "lora_full",
            Variant::WoGate => "wo_gate",
            Variant::MultiGate => "multi_gate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub r_total: usize,
    pub alpha: f64,
    pub n_common: usize,
    pub d_task: usize,
    pub sharing: GateSharing,
    pub rank_overrides: Option<Vec<usize>>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            r_total: 16,
            alpha: 16.0,
            n_common: 4,
            d_task: 8,
            sharing: GateSharing::SingleShared,
            rank_overrides: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Attach adapters to the vocabulary projection as well.
    pub wrap_output: bool,
    pub variant: Variant,
    pub adapter: AdapterConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_seq_len: 128,
            wrap_output: false,
            variant: Variant::CgcLora,
            adapter: AdapterConfig::default(),
            seed: 0,
        }
    }
}

/// How expert weights are produced for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gating {
    Learned(GateSharing),
    Uniform,
    /// Single expert with weight 1.
    Fixed,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("adapter.r_total", self.adapter.r_total),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{field} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.adapter.alpha > 0.0) {
            return Err(Error::Config("adapter.alpha must be positive".into()));
        }
        if self.adapter.d_task == 0 && matches!(self.gating(), Gating::Learned(_)) {
            return Err(Error::Config("adapter.d_task must be positive".into()));
        }
        Ok(())
    }

    pub fn gating(&self) -> Gating {
        match self.variant {
            Variant::CgcLora => Gating::Learned(self.adapter.sharing),
            Variant::MultiGate => Gating::Learned(GateSharing::PerLayer),
            Variant::WoGate => Gating::Uniform,
            Variant::LoraFull => Gating::Fixed,
        }
    }

    /// Expert layout of every adapted layer for `n_tasks` tasks.
    pub fn layout(&self, n_tasks: usize) -> Result<ExpertLayout> {
        match self.variant {
            Variant::LoraFull => ExpertLayout::new(1, 0, self.adapter.r_total, None),
            _ => ExpertLayout::new(
                self.adapter.n_common,
                n_tasks,
                self.adapter.r_total,
                self.adapter.rank_overrides.as_deref(),
            ),
        }
    }

    /// Hand-countable number of trainable scalars.
    pub fn expected_trainable(&self, n_tasks: usize) -> usize {
        let r = self.adapter.r_total;
        let (d, f) = (self.d_model, self.d_ff);
        let per_block = 4 * r * (d + d) + r * (d + f) + r * (f + d);
        let out = if self.wrap_output { r * (d + self.vocab_size) } else { 0 };
        let gates = match self.gating() {
            Gating::Learned(sharing) => {
                let one = (n_tasks + self.adapter.n_common + 1) * self.adapter.d_task;
                match sharing {
                    GateSharing::SingleShared => one,
                    GateSharing::PerLayer => one * self.n_layers,
                }
            }
            _ => 0,
        };
        self.n_layers * per_block + out + gates
    }
}

/// Which weights the projections use during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Weights<'m> {
    /// Frozen base only.
    Base,
    /// Base plus gated experts for a task.
    Adapted { task: usize },
    /// Per-task fused matrices.
    Merged(&'m MergedModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub q: CgcLoraLayer,
    pub k: CgcLoraLayer,
    pub v: CgcLoraLayer,
    pub o: CgcLoraLayer,
    pub ff1: CgcLoraLayer,
    pub ff2: CgcLoraLayer,
}

impl Block {
    pub fn layers(&self) -> [&CgcLoraLayer; 6] {
        [&self.q, &self.k, &self.v, &self.o, &self.ff1, &self.ff2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutputProjection {
    Plain(ParamId),
    Adapted(CgcLoraLayer),
}

#[derive(Debug, Clone)]
pub struct ToyTransformer {
    pub config: ModelConfig,
    pub n_tasks: usize,
    pub store: ParamStore,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub output: OutputProjection,
    pub gates: Option<GateSet>,
    pub layout: ExpertLayout,
}

/// Deterministically builds a model: Gaussian base weights, frozen, with
/// zero-delta expert banks.
pub fn build_model(config: &ModelConfig, n_tasks: usize) -> Result<ToyTransformer> {
    config.validate()?;
    if n_tasks == 0 {
        return Err(Error::Config("at least one task is required".into()));
    }
    let layout = config.layout(n_tasks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);

    // base tensors first, so the base is identical for any adapter layout
    let tok_emb = store.add("tok_emb", Tensor::randn(&[v, d], 1.0, &mut rng));
    let pos_emb = store.add("pos_emb", Tensor::randn(&[config.max_seq_len, d], 1.0, &mut rng));
    let base = |store: &mut ParamStore, name: String, d_out: usize, d_in: usize, rng: &mut ChaCha8Rng| {
        store.add(name, Tensor::randn(&[d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng))
    };
    let mut base_ids = Vec::new();
    for l in 0..config.n_layers {
        let dims = [(d, d), (d, d), (d, d), (d, d), (f, d), (d, f)];
        let ids: Vec<ParamId> = ["wq", "wk", "wv", "wo", "w1", "w2"]
            .iter()
            .zip(dims)
            .map(|(n, (o, i))| base(&mut store, format!("block{l}.{n}"), o, i, &mut rng))
            .collect();
        base_ids.push(ids);
    }
    let w_out = base(&mut store, "w_out".into(), v, d, &mut rng);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xADA9_7E25);
    let alpha = config.adapter.alpha;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for (l, ids) in base_ids.iter().enumerate() {
        let mut attach = |name: &str, id: ParamId, rng: &mut ChaCha8Rng| {
            CgcLoraLayer::attach(&mut store, &format!("block{l}.{name}"), id, &layout, alpha, l, rng)
        };
        blocks.push(Block {
            q: attach("wq", ids[0], &mut rng)?,
            k: attach("wk", ids[1], &mut rng)?,
            v: attach("wv", ids[2], &mut rng)?,
            o: attach("wo", ids[3], &mut rng)?,
            ff1: attach("w1", ids[4], &mut rng)?,
            ff2: attach("w2", ids[5], &mut rng)?,
        });
    }
    let output = if config.wrap_output {
        let last = config.n_layers - 1;
        OutputProjection::Adapted(CgcLoraLayer::attach(
            &mut store, "w_out", w_out, &layout, alpha, last, &mut rng,
        )?)
    } else {
        OutputProjection::Plain(w_out)
    };
    let gates = match config.gating() {
        Gating::Learned(sharing) => Some(make_gates(
            &mut store,
            sharing,
            config.n_layers,
            n_tasks,
            layout.n_common,
            config.adapter.d_task,
            config.seed ^ 0x6A7E,
        )?),
        _ => None,
    };
    Ok(ToyTransformer {
        config: config.clone(),
        n_tasks,
        store,
        tok_emb,
        pos_emb,
        blocks,
        output,
        gates,
        layout,
    })
}

impl ToyTransformer {
    /// Every adapted layer, blocks first, then the output projection if
    /// wrapped.
    pub fn adapted_layers(&self) -> Vec<&CgcLoraLayer> {
        let mut out: Vec<&CgcLoraLayer> = self.blocks.iter().flat_map(|b| b.layers()).collect();
        if let OutputProjection::Adapted(l) = &self.output {
            out.push(l);
        }
        out
    }

    /// Expert matrices and gate tensors, never base weights or embeddings.
    pub fn trainable_parameters(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.adapted_layers().iter().flat_map(|l| l.trainable_ids()).collect();
        if let Some(g) = &self.gates {
            ids.extend(g.params());
        }
        ids
    }

    /// Every frozen tensor: embeddings and base projections.
    pub fn base_parameters(&self) -> Vec<ParamId> {
        self.store.frozen()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters().iter().map(|&id| self.store.get(id).len()).sum()
    }

    /// Expert weights for `task` at block `layer`, as plain values.
    pub fn gate_weights(&self, task: usize, layer: usize) -> Result<GateWeights> {
        if task >= self.n_tasks {
            return Err(Error::TaskNotRegistered(task));
        }
        match (&self.gates, self.config.gating()) {
            (Some(set), _) => crate::gate::gate_weights(&self.store, &set.gates[set.for_layer(layer)], task),
            (None, Gating::Uniform) => Ok(GateWeights::uniform(self.layout.n_common)),
            (None, _) => Ok(GateWeights::new(vec![1.0])),
        }
    }

    /// Gate weight nodes, one per gate, computed once per forward.
    fn weight_nodes(&self, tape: &mut Tape<'_>, task: usize) -> Result<Vec<Var>> {
        if task >= self.n_tasks {
            return Err(Error::TaskNotRegistered(task));
        }
        match &self.gates {
            Some(set) => set.gates.iter().map(|g| g.weights_on(tape, task)).collect(),
            None => {
                let w = match self.config.gating() {
                    Gating::Uniform => GateWeights::uniform(self.layout.n_common),
                    _ => GateWeights::new(vec![1.0]),
                };
                Ok(vec![tape.constant(&[w.len()], w.as_slice().to_vec())?])
            }
        }
    }

    fn gate_index(&self, layer: usize) -> usize {
        self.gates.as_ref().map_or(0, |g| g.for_layer(layer))
    }

    /// Logits `[T×vocab]` for a token sequence on the given tape.
    pub fn forward_on<'a>(&'a self, tape: &mut Tape<'a>, tokens: &[usize], weights: Weights<'a>) -> Result<Var> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::Argument("empty token sequence".into()));
        }
        if t > self.config.max_seq_len {
            return Err(Error::Length {
                len: t,
                max: self.config.max_seq_len,
            });
        }
        let gate_nodes = match weights {
            Weights::Adapted { task } => Some((task, self.weight_nodes(tape, task)?)),
            _ => None,
        };
        let project = |tape: &mut Tape<'a>, layer: &CgcLoraLayer, x: Var, merged: Option<&'a Tensor>| -> Result<Var> {
            match (&gate_nodes, merged) {
                (_, Some(w)) => {
                    let w = tape.borrowed(w);
                    tape.matmul_nt(x, w)
                }
                (Some((task, nodes)), None) => layer.forward(tape, x, *task, nodes[self.gate_index(layer.gate_ref)]),
                (None, None) => layer.forward_base(tape, x),
            }
        };
        let merged = match weights {
            Weights::Merged(m) => Some(m),
            _ => None,
        };
        if let Some(m) = merged {
            if m.layers.len() != self.adapted_layers().len() {
                return Err(Error::Contract("merged weight set does not match the model".into()));
            }
        }
        let fused = |idx: usize| merged.map(|m| &m.layers[idx]);

        let tok = tape.param(self.tok_emb);
        let pos = tape.param(self.pos_emb);
        let xt = tape.gather_rows(tok, tokens)?;
        let positions: Vec<usize> = (0..t).collect();
        let xp = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(xt, xp)?;

        let n_heads = self.config.n_heads;
        let dh = self.config.d_model / n_heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for (l, block) in self.blocks.iter().enumerate() {
            let base = l * 6;
            let h = tape.layer_norm(x);
            let q = project(tape, &block.q, h, fused(base))?;
            let k = project(tape, &block.k, h, fused(base + 1))?;
            let v = project(tape, &block.v, h, fused(base + 2))?;
            let mut heads = Vec::with_capacity(n_heads);
            for hd in 0..n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let p = tape.causal_softmax(scores)?;
                heads.push(tape.matmul(p, vh)?);
            }
            let attn = if n_heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let o = project(tape, &block.o, attn, fused(base + 3))?;
            x = tape.add(x, o)?;

            let h2 = tape.layer_norm(x);
            let f1 = project(tape, &block.ff1, h2, fused(base + 4))?;
            let f1 = tape.gelu(f1);
            let f2 = project(tape, &block.ff2, f1, fused(base + 5))?;
            x = tape.add(x, f2)?;
        }
        let xf = tape.layer_norm(x);
        match &self.output {
            OutputProjection::Plain(w) => {
                let w = tape.param(*w);
                tape.matmul_nt(xf, w)
            }
            OutputProjection::Adapted(layer) => project(tape, layer, xf, fused(self.blocks.len() * 6)),
        }
    }

    /// Logits for `tokens` under the given weights.
    pub fn forward(&self, tokens: &[usize], weights: Weights<'_>) -> Result<Tensor> {
        let mut tape = Tape::with_params(&self.store);
        let logits = self.forward_on(&mut tape, tokens, weights)?;
        Ok(tape.to_tensor(logits))
    }
}

/// Logits of the adapted model for `task`.
pub fn forward_lm(model: &ToyTransformer, tokens: &[usize], task: usize) -> Result<Tensor> {
    model.forward(tokens, Weights::Adapted { task })
}
