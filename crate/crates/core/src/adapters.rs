//! Low-rank adapters: a vanilla LoRA pair and the expert bank of a
//! CGC-LoRA layer.
//!
//! Dimension convention: `x ∈ R^{d_in}`, `W0 ∈ R^{d_out×d_in}`,
//! `B ∈ R^{d_out×r}`, `A ∈ R^{r×d_in}`, so `h = W0·x + (α/r)·B·A·x`.
//! Sequences are stored as rows, so on the tape a layer maps
//! `X[T×d_in] ↦ X·W0ᵀ + (α/r)·(X·Aᵀ)·Bᵀ`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateWeights;
use crate::tensor::{matmul_into, ParamId, ParamStore, Tape, Tensor, Var};

/// Standard deviation of the Gaussian used for every `A` matrix.
pub const INIT_STD: f64 = 0.02;

/// One paired `(A, B)` low-rank expert stored in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expert {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

impl Expert {
    /// `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config(format!("{name}: rank must be at least 1")));
        }
        if rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "{name}: rank {rank} exceeds min(d_in, d_out) = {}",
                d_in.min(d_out)
            )));
        }
        let a = Tensor::randn(&[rank, d_in], INIT_STD, rng).with_requires_grad(true);
        let b = Tensor::zeros(&[d_out, rank]).with_requires_grad(true);
        Ok(Self {
            a: store.add(format!("{name}.A"), a),
            b: store.add(format!("{name}.B"), b),
            rank,
        })
    }

    /// Materialized `B·A`.
    pub fn delta(&self, store: &ParamStore) -> Tensor {
        let a = store.get(self.a);
        let b = store.get(self.b);
        let (d_out, d_in) = (b.rows(), a.cols());
        let mut out = vec![0.0; d_out * d_in];
        matmul_into(b.data(), a.data(), &mut out, d_out, self.rank, d_in);
        Tensor::matrix(d_out, d_in, out).expect("expert shapes are consistent")
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        store.get(self.a).len() + store.get(self.b).len()
    }
}

/// A vanilla LoRA adapter: one expert plus its scale `alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraAdapter {
    pub expert: Expert,
    pub alpha: f64,
    pub d_in: usize,
    pub d_out: usize,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.expert.rank
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.expert.rank as f64
    }

    /// `X·W0ᵀ + (α/r)·(X·Aᵀ)·Bᵀ` on the tape.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, w0: ParamId) -> Result<Var> {
        let w0 = tape.param(w0);
        let base = tape.matmul_nt(x, w0)?;
        let a = tape.param(self.expert.a);
        let b = tape.param(self.expert.b);
        let u = tape.matmul_nt(x, a)?;
        let d = tape.matmul_nt(u, b)?;
        let d = tape.scale(d, self.scale());
        tape.add(base, d)
    }
}

pub fn init_lora(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<LoraAdapter> {
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("{name}: alpha must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expert = Expert::init(store, name, d_in, d_out, rank, &mut rng)?;
    Ok(LoraAdapter {
        expert,
        alpha,
        d_in,
        d_out,
    })
}

/// `W0·x + (α/r)·B·A·x` for a single input vector.
pub fn lora_forward(store: &ParamStore, x: &[f64], w0: ParamId, adapter: &LoraAdapter) -> Result<Vec<f64>> {
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(&[1, x.len()], x.to_vec())?;
    let h = adapter.forward(&mut tape, xv, w0)?;
    Ok(tape.value(h).to_vec())
}

/// Splits a total rank budget across `n_experts`.
///
/// Without overrides the budget must divide evenly. Overrides are accepted
/// as given once they have the right length, are all positive and sum to
/// `r_total`.
pub fn split_ranks(r_total: usize, n_experts: usize, overrides: Option<&[usize]>) -> Result<Vec<usize>> {
    if n_experts == 0 {
        return Err(Error::Config("at least one expert is required".into()));
    }
    match overrides {
        None => {
            if r_total % n_experts != 0 || r_total < n_experts {
                return Err(Error::Config(format!(
                    "total rank {r_total} does not split evenly over {n_experts} experts; \
                     pass rank_overrides to choose an uneven split"
                )));
            }
            Ok(vec![r_total / n_experts; n_experts])
        }
        Some(ranks) => {
            if ranks.len() != n_experts {
                return Err(Error::Config(format!(
                    "rank_overrides has {} entries for {n_experts} experts",
                    ranks.len()
                )));
            }
            if ranks.iter().any(|&r| r == 0) {
                return Err(Error::Config("every expert rank must be at least 1".into()));
            }
            let sum: usize = ranks.iter().sum();
            if sum != r_total {
                return Err(Error::Config(format!(
                    "rank_overrides sum to {sum}, expected total rank {r_total}"
                )));
            }
            Ok(ranks.to_vec())
        }
    }
}

/// How the rank budget of every wrapped layer is laid out over experts.
///
/// Ranks are ordered common experts first, then one specific expert per
/// task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertLayout {
    pub n_common: usize,
    pub n_specific: usize,
    pub ranks: Vec<usize>,
}

impl ExpertLayout {
    pub fn new(n_common: usize, n_specific: usize, r_total: usize, overrides: Option<&[usize]>) -> Result<Self> {
        let ranks = split_ranks(r_total, n_common + n_specific, overrides)?;
        Ok(Self {
            n_common,
            n_specific,
            ranks,
        })
    }

    pub fn r_total(&self) -> usize {
        self.ranks.iter().sum()
    }

    pub fn n_experts(&self) -> usize {
        self.n_common + self.n_specific
    }

    /// Length of the weight vector a forward pass consumes: one entry per
    /// common expert plus one for the task's own specific expert if any.
    pub fn weight_len(&self) -> usize {
        self.n_common + usize::from(self.n_specific > 0)
    }
}

/// Common experts shared by all tasks plus one specific expert per task.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub common: Vec<Expert>,
    pub specific: Vec<Expert>,
    pub d_in: usize,
    pub d_out: usize,
}

impl ExpertBank {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        layout: &ExpertLayout,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut ranks = layout.ranks.iter().copied();
        let mut common = Vec::with_capacity(layout.n_common);
        for i in 0..layout.n_common {
            let r = ranks.next().expect("layout ranks cover every expert");
            common.push(Expert::init(store, &format!("{name}.common{i}"), d_in, d_out, r, rng)?);
        }
        let mut specific = Vec::with_capacity(layout.n_specific);
        for j in 0..layout.n_specific {
            let r = ranks.next().expect("layout ranks cover every expert");
            specific.push(Expert::init(store, &format!("{name}.task{j}"), d_in, d_out, r, rng)?);
        }
        Ok(Self {
            common,
            specific,
            d_in,
            d_out,
        })
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.common.iter().chain(&self.specific).map(|e| e.rank).collect()
    }

    pub fn r_total(&self) -> usize {
        self.ranks().iter().sum()
    }

    pub fn experts(&self) -> impl Iterator<Item = &Expert> {
        self.common.iter().chain(&self.specific)
    }

    pub fn weight_len(&self) -> usize {
        self.common.len() + usize::from(!self.specific.is_empty())
    }

    /// Experts that take part in a forward pass for `task`, in weight order.
    fn active(&self, task: usize) -> Result<Vec<&Expert>> {
        let mut out: Vec<&Expert> = self.common.iter().collect();
        if !self.specific.is_empty() {
            out.push(self.specific.get(task).ok_or(Error::TaskNotRegistered(task))?);
        }
        Ok(out)
    }
}

/// `Σ rank_i·(d_in + d_out)` over every expert of the bank.
pub fn expert_param_count(bank: &ExpertBank, d_in: usize, d_out: usize) -> usize {
    bank.ranks().iter().map(|r| r * (d_in + d_out)).sum()
}

/// A frozen base weight with a CGC-LoRA expert bank attached.
#[derive(Debug, Clone, PartialEq)]
pub struct CgcLoraLayer {
    pub name: String,
    pub w0: ParamId,
    pub bank: ExpertBank,
    pub alpha: f64,
    pub r_total: usize,
    /// Index of the gate serving this layer.
    pub gate_ref: usize,
}

impl CgcLoraLayer {
    /// Attaches a fresh bank to an existing base weight. `W0` is marked
    /// frozen.
    pub fn attach(
        store: &mut ParamStore,
        name: &str,
        w0: ParamId,
        layout: &ExpertLayout,
        alpha: f64,
        gate_ref: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Config(format!("{name}: alpha must be positive")));
        }
        store.get_mut(w0).set_requires_grad(false);
        let (d_out, d_in) = {
            let w = store.get(w0);
            (w.rows(), w.cols())
        };
        let bank = ExpertBank::init(store, name, d_in, d_out, layout, rng)?;
        Ok(Self {
            name: name.to_string(),
            w0,
            r_total: layout.r_total(),
            bank,
            alpha,
            gate_ref,
        })
    }

    pub fn d_in(&self) -> usize {
        self.bank.d_in
    }

    pub fn d_out(&self) -> usize {
        self.bank.d_out
    }

    /// `α / r` with `r` the total rank of the bank.
    pub fn scale(&self) -> f64 {
        self.alpha / self.r_total as f64
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.bank.experts().flat_map(|e| [e.a, e.b]).collect()
    }

    /// Base projection only, ignoring the adapters.
    pub fn forward_base(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w0 = tape.param(self.w0);
        tape.matmul_nt(x, w0)
    }

    /// Eq. 4 on the tape: `X·W0ᵀ + (α/r)·Σ_e w_e·(X·A_eᵀ)·B_eᵀ` over the
    /// common experts and the task's own specific expert.
    ///
    /// The active experts are stacked so the delta costs two products:
    /// `U = X·[A_1; …; A_n]ᵀ`, columns of `U` scaled by their expert's
    /// weight, then `U·[B_1 … B_n]ᵀ`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, task: usize, weights: Var) -> Result<Var> {
        let active = self.bank.active(task)?;
        let wlen = tape.value(weights).len();
        if wlen != active.len() {
            return Err(Error::Contract(format!(
                "{}: {} gate weights for {} active experts",
                self.name,
                wlen,
                active.len()
            )));
        }
        let base = self.forward_base(tape, x)?;

        let r_active: usize = active.iter().map(|e| e.rank).sum();
        let a_parts: Vec<Var> = active.iter().map(|e| tape.param(e.a)).collect();
        let b_parts: Vec<Var> = active.iter().map(|e| tape.param(e.b)).collect();
        let a_flat = tape.concat(&a_parts)?;
        let a_stack = tape.reshape(a_flat, &[r_active, self.d_in()])?;
        let b_stack = tape.concat_cols(&b_parts)?;

        let expand: Vec<usize> = active
            .iter()
            .enumerate()
            .flat_map(|(k, e)| std::iter::repeat(k).take(e.rank))
            .collect();
        let w_col = tape.reshape(weights, &[wlen, 1])?;
        let w_rep = tape.gather_rows(w_col, &expand)?;
        let w_row = tape.reshape(w_rep, &[1, r_active])?;

        let u = tape.matmul_nt(x, a_stack)?;
        let rows = tape.shape(u)[0];
        let ones = tape.constant(&[rows, 1], vec![1.0; rows])?;
        let w_grid = tape.matmul(ones, w_row)?;
        let u = tape.mul(u, w_grid)?;
        let delta = tape.matmul_nt(u, b_stack)?;
        let delta = tape.scale(delta, self.scale());
        tape.add(base, delta)
    }

    /// `(α/r)·ΔW_j` for the given normalized weights.
    pub fn delta(&self, store: &ParamStore, task: usize, weights: &GateWeights) -> Result<Tensor> {
        let active = self.bank.active(task)?;
        if weights.len() != active.len() {
            return Err(Error::Contract(format!(
                "{}: {} gate weights for {} active experts",
                self.name,
                weights.len(),
                active.len()
            )));
        }
        let mut out = vec![0.0; self.d_out() * self.d_in()];
        for (e, &w) in active.iter().zip(weights.as_slice()) {
            let d = e.delta(store);
            let s = self.scale() * w;
            out.iter_mut().zip(d.data()).for_each(|(o, v)| *o += s * v);
        }
        Ok(Tensor::matrix(self.d_out(), self.d_in(), out).expect("delta shape"))
    }
}

/// Eq. 4 for a single input vector.
pub fn cgc_forward(
    store: &ParamStore,
    x: &[f64],
    task: usize,
    layer: &CgcLoraLayer,
    weights: &GateWeights,
) -> Result<Vec<f64>> {
    if x.len() != layer.d_in() {
        return Err(Error::dim("cgc_forward", &[x.len()], &[layer.d_in()]));
    }
    let mut tape = Tape::with_params(store);
    let xv = tape.constant(&[1, x.len()], x.to_vec())?;
    let w = tape.constant(&[weights.len()], weights.as_slice().to_vec())?;
    let h = layer.forward(&mut tape, xv, task, w)?;
    Ok(tape.value(h).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn init_lora_shapes_and_zero_b() {
        let mut store = ParamStore::new();
        let ad = init_lora(&mut store, "l", 4, 4, 2, 2.0, 7).unwrap();
        assert_eq!(store.get(ad.expert.a).shape(), &[2, 4]);
        assert_eq!(store.get(ad.expert.b).shape(), &[4, 2]);
        assert!(store.get(ad.expert.b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_lora_is_deterministic() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        let a1 = init_lora(&mut s1, "l", 6, 5, 3, 1.0, 42).unwrap();
        let a2 = init_lora(&mut s2, "l", 6, 5, 3, 1.0, 42).unwrap();
        let bits = |s: &ParamStore, id| s.get(id).data().iter().map(|v: &f64| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&s1, a1.expert.a), bits(&s2, a2.expert.a));
    }

    #[test]
    fn init_lora_rejects_oversized_rank() {
        let mut store = ParamStore::new();
        assert!(matches!(
            init_lora(&mut store, "l", 4, 3, 4, 1.0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lora_forward_hand_example() {
        // W0 = 0, alpha = r = 1, B = [[1],[2]], A = [[3,4]], x = [1,1] -> [7, 14]
        let mut store = ParamStore::new();
        let w0 = store.add("w0", Tensor::zeros(&[2, 2]));
        let ad = init_lora(&mut store, "l", 2, 2, 1, 1.0, 0).unwrap();
        store.get_mut(ad.expert.b).data_mut().copy_from_slice(&[1.0, 2.0]);
        store.get_mut(ad.expert.a).data_mut().copy_from_slice(&[3.0, 4.0]);
        let h = lora_forward(&store, &[1.0, 1.0], w0, &ad).unwrap();
        assert_eq!(h, vec![7.0, 14.0]);
    }

    #[test]
    fn lora_forward_at_init_is_base() {
        let mut store = ParamStore::new();
        let mut r = rng(3);
        let w0 = store.add("w0", Tensor::randn(&[5, 4], 1.0, &mut r));
        let ad = init_lora(&mut store, "l", 4, 5, 2, 16.0, 1).unwrap();
        let x = [0.3, -1.2, 0.5, 2.0];
        let h = lora_forward(&store, &x, w0, &ad).unwrap();
        let w = store.get(w0).data();
        for i in 0..5 {
            let want: f64 = (0..4).map(|j| w[i * 4 + j] * x[j]).sum();
            assert_eq!(h[i], want);
        }
    }

    #[test]
    fn lora_forward_rejects_bad_input_width() {
        let mut store = ParamStore::new();
        let w0 = store.add("w0", Tensor::zeros(&[3, 4]));
        let ad = init_lora(&mut store, "l", 4, 3, 1, 1.0, 0).unwrap();
        assert!(matches!(
            lora_forward(&store, &[1.0, 2.0], w0, &ad),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn split_ranks_default_and_overrides() {
        assert_eq!(split_ranks(16, 8, None).unwrap(), vec![2; 8]);
        let over = [1, 1, 2, 2, 2, 2, 3, 3];
        assert_eq!(split_ranks(16, 8, Some(&over)).unwrap(), over.to_vec());
        assert!(matches!(split_ranks(16, 5, None), Err(Error::Config(_))));
        assert!(matches!(split_ranks(16, 2, Some(&[8, 7])), Err(Error::Config(_))));
        assert!(matches!(split_ranks(16, 2, Some(&[16, 0])), Err(Error::Config(_))));
        assert!(matches!(split_ranks(16, 3, Some(&[8, 8])), Err(Error::Config(_))));
    }

    #[test]
    fn split_ranks_error_mentions_overrides() {
        let msg = split_ranks(16, 5, None).unwrap_err().to_string();
        assert!(msg.contains("rank_overrides"), "{msg}");
    }

    fn bank_with(ranks: &[usize], n_common: usize, d_in: usize, d_out: usize) -> ExpertBank {
        let mut store = ParamStore::new();
        let r: usize = ranks.iter().sum();
        let layout = ExpertLayout::new(n_common, ranks.len() - n_common, r, Some(ranks)).unwrap();
        ExpertBank::init(&mut store, "b", d_in, d_out, &layout, &mut rng(0)).unwrap()
    }

    #[test]
    fn expert_param_count_examples() {
        assert_eq!(expert_param_count(&bank_with(&[2; 8], 4, 64, 64), 64, 64), 2048);
        assert_eq!(expert_param_count(&bank_with(&[16], 1, 64, 64), 64, 64), 2048);
        assert_eq!(
            expert_param_count(&bank_with(&[1, 1, 2, 2, 2, 2, 3, 3], 4, 64, 64), 64, 64),
            2048
        );
    }

    #[test]
    fn cgc_forward_unknown_task_and_bad_weights() {
        let mut store = ParamStore::new();
        let w0 = store.add("w0", Tensor::zeros(&[3, 3]));
        let layout = ExpertLayout::new(1, 2, 3, None).unwrap();
        let layer = CgcLoraLayer::attach(&mut store, "l", w0, &layout, 1.0, 0, &mut rng(1)).unwrap();
        let w = GateWeights::uniform(1);
        assert!(matches!(
            cgc_forward(&store, &[1.0, 0.0, 0.0], 5, &layer, &w),
            Err(Error::TaskNotRegistered(5))
        ));
        let bad = GateWeights::uniform(2);
        assert!(matches!(
            cgc_forward(&store, &[1.0, 0.0, 0.0], 0, &layer, &bad),
            Err(Error::Contract(_))
        ));
    }
}
