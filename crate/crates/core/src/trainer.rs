//! Masked next-token objective and the multi-task training loop.
//!
//! All tasks' training samples are pooled and shuffled once per epoch, so a
//! batch can mix tasks. Each sample runs on its own tape; per-sample
//! gradients are folded into the store in sample order, which keeps the
//! result identical whether samples ran in parallel or not.

use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{build_model, ModelConfig, ToyTransformer, Variant, Weights};
use crate::taskdata::{Corpus, Sample, Split};
use crate::tensor::{Gradients, ParamId, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Validation decode every this many steps; 0 disables it.
    pub eval_every: usize,
    /// Validation samples decoded per task at each evaluation.
    pub eval_samples: usize,
    pub max_new_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_steps: 2000,
            learning_rate: 1e-2,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            eval_every: 500,
            eval_samples: 32,
            max_new_tokens: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Mean masked negative log-likelihood of `targets` under `logits[T×V]`.
pub fn lm_loss(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let loss = tape.cross_entropy(l, targets, mask)?;
    Ok(tape.scalar(loss))
}

/// Loss node of one sample: position `t` predicts token `t + 1`, scored on
/// the answer span only.
pub fn sample_loss<'a>(
    model: &'a ToyTransformer,
    tape: &mut Tape<'a>,
    sample: &Sample,
    task: usize,
) -> Result<Var> {
    let n = sample.tokens.len();
    if n < 2 {
        return Err(Error::DegenerateSample);
    }
    let logits = model.forward_on(tape, &sample.tokens[..n - 1], Weights::Adapted { task })?;
    tape.cross_entropy(logits, &sample.tokens[1..], &sample.loss_mask[1..])
}

/// Position of a sample in the pooled corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub task: usize,
    pub index: usize,
}

/// Pooled, per-epoch shuffled batches without replacement.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    pool: Vec<SampleRef>,
    batch_size: usize,
    rng: ChaCha8Rng,
    cursor: usize,
    epoch: usize,
}

impl BatchSampler {
    /// `task_sizes[t]` is the number of training samples of task `t`.
    pub fn new(task_sizes: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let pool: Vec<SampleRef> = task_sizes
            .iter()
            .enumerate()
            .flat_map(|(task, &n)| (0..n).map(move |index| SampleRef { task, index }))
            .collect();
        if pool.is_empty() {
            return Err(Error::Config("no training samples to draw from".into()));
        }
        let mut s = Self {
            pool,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: 0,
            epoch: 0,
        };
        s.pool.shuffle(&mut s.rng);
        Ok(s)
    }

    /// Completed epochs so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    /// The next batch. The final batch of an epoch may be short; batches
    /// never straddle epochs.
    pub fn next_batch(&mut self) -> Vec<SampleRef> {
        if self.cursor == self.pool.len() {
            self.pool.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let end = (self.cursor + self.batch_size).min(self.pool.len());
        let batch = self.pool[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }

    /// The remaining batches of the current epoch.
    ///
    /// Called on an exhausted epoch it returns the whole next epoch.
    pub fn rest_of_epoch(&mut self) -> Vec<Vec<SampleRef>> {
        let mut out = vec![self.next_batch()];
        while self.cursor < self.pool.len() {
            out.push(self.next_batch());
        }
        out
    }
}

/// The batches of one epoch over per-task sample lists.
pub fn sample_batches(task_sizes: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Vec<SampleRef>>> {
    Ok(BatchSampler::new(task_sizes, batch_size, seed)?.rest_of_epoch())
}

/// State dumped when the loss stops being finite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub step: usize,
    /// `(task, samples in the failing batch)`
    pub task_mix: Vec<(usize, usize)>,
    /// `(parameter name, L2 norm)` for every trainable tensor.
    pub param_norms: Vec<(String, f64)>,
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "batch task mix")?;
        for (t, n) in &self.task_mix {
            write!(f, " {t}:{n}")?;
        }
        let worst = self
            .param_norms
            .iter()
            .filter(|(_, v)| !v.is_finite())
            .map(|(n, _)| n.as_str())
            .collect::<Vec<_>>();
        if worst.is_empty() {
            write!(f, "; all parameter norms finite")
        } else {
            write!(f, "; non-finite parameters: {}", worst.join(", "))
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step {
        step: usize,
        loss: f64,
        lr: f64,
    },
    Eval {
        step: usize,
        task: String,
        metric_name: String,
        value: f64,
    },
}

pub trait MetricsSink {
    fn record(&mut self, rec: &LogRecord) -> Result<()>;
}

impl MetricsSink for Vec<LogRecord> {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct JsonLines<W: Write>(pub W);

impl<W: Write> MetricsSink for JsonLines<W> {
    fn record(&mut self, rec: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.0, rec)?;
        self.0.write_all(b"\n")?;
        Ok(())
    }
}

/// Discards everything.
pub struct NoLog;

impl MetricsSink for NoLog {
    fn record(&mut self, _: &LogRecord) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
    pub final_loss: Option<f64>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, model: &ToyTransformer) -> Self {
        let ids = model.trainable_parameters();
        let zeros = |id: &ParamId| vec![0.0; model.store.get(*id).len()];
        Self {
            kind,
            lr,
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            ids,
            t: 0,
        }
    }

    /// Applies `grads[k]` (already averaged) to `ids[k]`.
    fn step(&mut self, model: &mut ToyTransformer, grads: &[Vec<f64>]) {
        self.t += 1;
        let (c1, c2) = (1.0 - ADAM_B1.powi(self.t), 1.0 - ADAM_B2.powi(self.t));
        for (k, &id) in self.ids.iter().enumerate() {
            let p = model.store.get_mut(id).data_mut();
            let g = &grads[k];
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in p.iter_mut().zip(g) {
                        *w -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..p.len() {
                        m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * g[i];
                        v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * g[i] * g[i];
                        p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Mean loss and summed gradients of a batch, one tape per sample.
///
/// Returns `(loss, grads)` with `grads[k]` aligned to `ids[k]`, averaged
/// over the batch. A gradient for any tensor outside `ids` is a contract
/// violation.
pub fn batch_gradients(
    model: &ToyTransformer,
    corpus: &Corpus,
    batch: &[SampleRef],
    ids: &[ParamId],
    exec: Exec,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let per_sample = exec.map(batch, |r| -> Result<(f64, Gradients)> {
        let sample = &corpus.data[r.task].train[r.index];
        let mut tape = Tape::with_params(&model.store);
        let loss = sample_loss(model, &mut tape, sample, r.task)?;
        let grads = tape.backward(loss)?;
        Ok((tape.scalar(loss), grads))
    });
    let mut slot = vec![usize::MAX; model.store.len()];
    for (k, id) in ids.iter().enumerate() {
        slot[id.0] = k;
    }
    let mut sums: Vec<Vec<f64>> = ids.iter().map(|id| vec![0.0; model.store.get(*id).len()]).collect();
    let mut loss = 0.0;
    for r in per_sample {
        let (l, g) = r?;
        loss += l;
        for (id, gv) in g.params() {
            let k = slot[id.0];
            if k == usize::MAX {
                return Err(Error::Contract(format!(
                    "gradient reached non-trainable tensor {}",
                    model.store.name(id)
                )));
            }
            for (s, x) in sums[k].iter_mut().zip(gv) {
                *s += x;
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    sums.iter_mut().flatten().for_each(|s| *s *= inv);
    Ok((loss * inv, sums))
}

/// Trains the adapters of `model` on the training split of `corpus`.
pub fn train(
    model: &mut ToyTransformer,
    corpus: &Corpus,
    config: &TrainConfig,
    exec: Exec,
    log: &mut dyn MetricsSink,
) -> Result<TrainSummary> {
    config.validate()?;
    if corpus.specs.len() != model.n_tasks {
        return Err(Error::Config(format!(
            "corpus has {} tasks but the model was built for {}",
            corpus.specs.len(),
            model.n_tasks
        )));
    }
    let sizes: Vec<usize> = corpus.data.iter().map(|d| d.train.len()).collect();
    let mut sampler = BatchSampler::new(&sizes, config.batch_size, config.seed)?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, model);
    let mut trainable = opt.ids.clone();
    trainable.sort();
    if trainable != model.store.trainable() {
        return Err(Error::Contract("optimizer set differs from the trainable set".into()));
    }
    let mut losses = Vec::with_capacity(config.max_steps);
    for step in 1..=config.max_steps {
        let batch = sampler.next_batch();
        let (loss, grads) = match batch_gradients(model, corpus, &batch, &opt.ids, exec) {
            Err(Error::Numeric(_)) => return Err(Error::NonFinite(Box::new(diagnostics(model, step, &batch)))),
            r => r?,
        };
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(Box::new(diagnostics(model, step, &batch))));
        }
        opt.step(model, &grads);
        losses.push(loss);
        log.record(&LogRecord::Step {
            step,
            loss,
            lr: config.learning_rate,
        })?;
        if config.eval_every > 0 && step % config.eval_every == 0 {
            let report = evaluate_split(model, corpus, Split::Val, config.eval_samples, config.max_new_tokens, exec)?;
            log_report(log, step, &report)?;
        }
    }
    Ok(TrainSummary {
        steps: config.max_steps,
        epochs: sampler.epoch(),
        final_loss: losses.last().copied(),
        losses,
    })
}

fn diagnostics(model: &ToyTransformer, step: usize, batch: &[SampleRef]) -> Diagnostics {
    let mut mix = vec![0usize; model.n_tasks];
    for r in batch {
        mix[r.task] += 1;
    }
    Diagnostics {
        step,
        task_mix: mix.into_iter().enumerate().filter(|(_, n)| *n > 0).collect(),
        param_norms: model
            .trainable_parameters()
            .iter()
            .map(|&id| (model.store.name(id).to_string(), model.store.get(id).norm()))
            .collect(),
    }
}

/// Greedy-decodes up to `limit` samples per task of `split` with the
/// unmerged adapters and scores them.
pub fn evaluate_split(
    model: &ToyTransformer,
    corpus: &Corpus,
    split: Split,
    limit: usize,
    max_new_tokens: usize,
    exec: Exec,
) -> Result<EvalReport> {
    let sets: Vec<&[Sample]> = corpus
        .data
        .iter()
        .map(|d| {
            let s = d.split(split);
            &s[..limit.min(s.len())]
        })
        .collect();
    evaluate(&corpus.specs, &sets, exec, |task, sample| {
        let ids = crate::merge::greedy_decode(model, Weights::Adapted { task }, sample.prompt_tokens(), max_new_tokens)?;
        Ok(crate::taskdata::Tokenizer::default().detokenize(&ids))
    })
}

fn log_report(log: &mut dyn MetricsSink, step: usize, report: &EvalReport) -> Result<()> {
    for t in &report.tasks {
        log.record(&LogRecord::Eval {
            step,
            task: t.name.clone(),
            metric_name: t.metric.name().to_string(),
            value: t.value,
        })?;
    }
    log.record(&LogRecord::Eval {
        step,
        task: "average".into(),
        metric_name: "average".into(),
        value: report.average,
    })
}

/// Builds the model for `variant` and trains it.
pub fn run_variant(
    variant: Variant,
    model_config: &ModelConfig,
    corpus: &Corpus,
    config: &TrainConfig,
    exec: Exec,
    log: &mut dyn MetricsSink,
) -> Result<(ToyTransformer, TrainSummary)> {
    let cfg = ModelConfig {
        variant,
        ..model_config.clone()
    };
    let mut model = build_model(&cfg, corpus.specs.len())?;
    let summary = train(&mut model, corpus, config, exec, log)?;
    Ok((model, summary))
}
