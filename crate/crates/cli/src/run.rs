//! `train`, `merge`, `infer` and `eval`.
//!
//! A run directory holds:
//!
//! - `config.toml`, the config exactly as given, and `resolved.toml` with
//!   command-line overrides applied (rerunning from it reproduces the run)
//! - `cluster-<id>.ckpt` and `metrics-<id>.jsonl` per cluster
//! - `summary.json`
//! - `merged-<id>.ckpt` after `merge`, and `evals/eval-NNNN/` after `eval`

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use cgc_lora::adapters::ExpertLayout;
use cgc_lora::checkpoint::{load_merged, load_model, save_merged, save_model};
use cgc_lora::merge::{greedy_decode, retrieve_all, AdapterRegistry, InferMode, InferOutput, InferRequest, MergedModel};
use cgc_lora::metrics::{evaluate, EvalReport};
use cgc_lora::model::{build_model, ToyTransformer, Variant, Weights};
use cgc_lora::taskdata::{Sample, Split, TaskSpec, Tokenizer};
use cgc_lora::trainer::{train as train_model, JsonLines};
use cgc_lora::Exec;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{load_data, DataDir};
use crate::{fresh_dir, io_err, read, write, CliError, Result};

pub const SUMMARY: &str = "summary.json";
pub const RESOLVED: &str = "resolved.toml";

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub max_steps: Option<usize>,
    pub variant: Option<Variant>,
    /// Sets both the model init seed and the training seed.
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(n) = self.max_steps {
            cfg.train.max_steps = n;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
            cfg.model.variant = v;
        }
        if let Some(s) = self.seed {
            cfg.model.seed = s;
            cfg.train.seed = s;
        }
    }
}

/// Stored in every cluster checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMeta {
    pub cluster: String,
    /// Global task ids; position is the model's local task id.
    pub task_ids: Vec<usize>,
    pub task_names: Vec<String>,
    pub specs: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: String,
    pub tasks: Vec<String>,
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub trainable: usize,
    pub layout: ExpertLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub clusters: Vec<ClusterSummary>,
}

fn ckpt_path(run: &Path, id: &str) -> PathBuf {
    run.join(format!("cluster-{id}.ckpt"))
}

fn merged_path(run: &Path, id: &str) -> PathBuf {
    run.join(format!("merged-{id}.ckpt"))
}

/// One line describing how the adapters wrap each layer.
pub fn layout_line(variant: Variant, layout: &ExpertLayout) -> String {
    let rank: usize = layout.ranks.iter().sum();
    let common = &layout.ranks[..layout.n_common];
    let specific = &layout.ranks[layout.n_common..];
    match variant {
        Variant::LoraFull => format!(
            "variant lora_full wraps each layer with {} common expert of full rank {rank} and no gate",
            layout.n_common
        ),
        v => format!(
            "variant {} wraps each layer with {} common experts (ranks {common:?}) and {} specific experts (ranks {specific:?}), total rank {rank}",
            v.name(),
            layout.n_common,
            layout.n_specific
        ),
    }
}

/// Trains every cluster of the config into a new run directory under
/// `out_root` and returns that directory.
pub fn train(
    config: Option<&Path>,
    data: &Path,
    out_root: &Path,
    overrides: &Overrides,
    exec: Exec,
) -> Result<PathBuf> {
    let loaded = RunConfig::load(config)?;
    let mut cfg = loaded.config;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    let data = load_data(data)?;
    for t in &cfg.data.tasks {
        if data.task_id(t).is_none() {
            return Err(CliError::Usage(format!("task {t:?} is not in the corpus")));
        }
    }
    let clusters = cfg.clusters();
    let model_cfg = cfg.model_config();
    // catch infeasible layouts before creating anything
    for c in &clusters {
        model_cfg.layout(c.tasks.len())?;
    }

    let run = fresh_dir(out_root, "run")?;
    write(&run.join("config.toml"), &loaded.text)?;
    write(&run.join(RESOLVED), cfg.to_toml()?)?;

    let mut summaries = Vec::new();
    for c in &clusters {
        let corpus = data.corpus.select(&c.tasks)?;
        let mut model = build_model(&model_cfg, c.tasks.len())?;
        eprintln!("cluster {}: {}", c.id, layout_line(cfg.variant, &model.layout));
        let log_path = run.join(format!("metrics-{}.jsonl", c.id));
        let log_file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
        let mut log = JsonLines(std::io::BufWriter::new(log_file));
        let result = train_model(&mut model, &corpus, &cfg.train, exec, &mut log);
        log.0.flush().map_err(io_err(&log_path))?;
        let summary = result?;
        let meta = ClusterMeta {
            cluster: c.id.clone(),
            task_ids: c.tasks.iter().map(|t| data.task_id(t).expect("checked above")).collect(),
            task_names: c.tasks.clone(),
            specs: corpus.specs.clone(),
        };
        save_model(&ckpt_path(&run, &c.id), &model, serde_json::to_value(&meta)?)?;
        eprintln!(
            "cluster {}: {} steps, {} epochs, final loss {}",
            c.id,
            summary.steps,
            summary.epochs,
            summary.final_loss.map_or("n/a".into(), |l| format!("{l:.6}"))
        );
        summaries.push(ClusterSummary {
            id: c.id.clone(),
            tasks: c.tasks.clone(),
            steps: summary.steps,
            epochs: summary.epochs,
            final_loss: summary.final_loss,
            trainable: model.trainable_count(),
            layout: model.layout.clone(),
        });
    }
    let summary = RunSummary {
        variant: cfg.variant,
        clusters: summaries,
    };
    write(&run.join(SUMMARY), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(run)
}

pub fn read_summary(run: &Path) -> Result<RunSummary> {
    let p = run.join(SUMMARY);
    if !p.is_file() {
        return Err(CliError::Usage(format!("{} is not a run directory", run.display())));
    }
    Ok(serde_json::from_str(&read(&p)?)?)
}

pub fn read_resolved(run: &Path) -> Result<RunConfig> {
    RunConfig::parse(&read(&run.join(RESOLVED))?)
}

fn load_cluster(run: &Path, id: &str) -> Result<(ToyTransformer, ClusterMeta)> {
    let (model, manifest) = load_model(&ckpt_path(run, id))?;
    let meta: ClusterMeta = serde_json::from_value(manifest.meta)?;
    Ok((model, meta))
}

/// Writes `merged-<id>.ckpt` for every cluster. Existing merged files are
/// never replaced.
pub fn merge(run: &Path) -> Result<Vec<PathBuf>> {
    let summary = read_summary(run)?;
    for c in &summary.clusters {
        let p = merged_path(run, &c.id);
        if p.exists() {
            return Err(CliError::Usage(format!(
                "{} already exists; run directories are append-only",
                p.display()
            )));
        }
    }
    let mut written = Vec::new();
    for c in &summary.clusters {
        let (model, meta) = load_cluster(run, &c.id)?;
        let merged = retrieve_all(&model)?;
        let p = merged_path(run, &c.id);
        save_merged(&p, &model, &merged, serde_json::to_value(&meta)?)?;
        written.push(p);
    }
    Ok(written)
}

/// Loads every cluster of a run, with fused weights from `merge` when
/// present and computed in memory otherwise.
pub fn load_clusters(run: &Path) -> Result<Vec<(ToyTransformer, ClusterMeta, Vec<MergedModel>)>> {
    let summary = read_summary(run)?;
    let mut out = Vec::new();
    for c in &summary.clusters {
        let (model, meta) = load_cluster(run, &c.id)?;
        let mp = merged_path(run, &c.id);
        let merged = if mp.is_file() {
            load_merged(&mp)?.0
        } else {
            retrieve_all(&model)?
        };
        out.push((model, meta, merged));
    }
    Ok(out)
}

pub fn registry(run: &Path) -> Result<AdapterRegistry> {
    let mut reg = AdapterRegistry::new();
    for (model, meta, merged) in load_clusters(run)? {
        reg.register_merged(&meta.cluster, &meta.task_ids, meta.specs, model, merged)?;
    }
    Ok(reg)
}

#[derive(Debug, Clone)]
pub struct InferOpts {
    pub mode: InferMode,
    pub max_new_tokens: Option<usize>,
    pub exec: Exec,
}

/// Parses line-delimited requests; blank lines are skipped.
pub fn read_requests(path: &Path) -> Result<Vec<InferRequest>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut reqs = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        reqs.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Usage(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(reqs)
}

/// Runs every request and returns one output per request, in order.
/// Fails only when there were requests and none succeeded.
pub fn infer(run: &Path, requests: &[InferRequest], opts: &InferOpts) -> Result<Vec<InferOutput>> {
    let cfg = read_resolved(run)?;
    let reg = registry(run)?;
    let max_new = opts.max_new_tokens.unwrap_or(cfg.train.max_new_tokens);
    Ok(reg.infer_batch(requests, max_new, opts.mode, opts.exec))
}

pub fn write_outputs(outputs: &[InferOutput], mut w: impl Write) -> Result<()> {
    for o in outputs {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n").map_err(io_err(Path::new("<output>")))?;
    }
    w.flush().map_err(io_err(Path::new("<output>")))
}

pub fn all_failed(outputs: &[InferOutput]) -> bool {
    !outputs.is_empty() && outputs.iter().all(|o| o.error.is_some())
}

#[derive(Debug, Clone)]
pub struct EvalOpts {
    pub split: Split,
    pub mode: InferMode,
    /// Score the reference answers instead of model generations.
    pub oracle: bool,
    pub limit: Option<usize>,
    pub max_new_tokens: Option<usize>,
    pub exec: Exec,
}

/// Scores every task of the run on `split` of the corpus, ordered by global
/// task id.
pub fn eval(run: &Path, data: &DataDir, opts: &EvalOpts) -> Result<EvalReport> {
    let cfg = read_resolved(run)?;
    let max_new = opts.max_new_tokens.unwrap_or(cfg.train.max_new_tokens);
    let clusters = load_clusters(run)?;
    let tokenizer = Tokenizer::default();
    let mut scores = Vec::new();
    for (model, meta, merged) in &clusters {
        let mut specs = Vec::new();
        let mut sets: Vec<&[Sample]> = Vec::new();
        for &g in &meta.task_ids {
            let spec = data
                .corpus
                .specs
                .get(g)
                .ok_or(cgc_lora::Error::TaskNotRegistered(g))?;
            let name = &meta.task_names[specs.len()];
            if &spec.name != name {
                return Err(CliError::Usage(format!(
                    "corpus task {g} is {:?} but the run trained it as {name:?}",
                    spec.name
                )));
            }
            let s = data.corpus.data[g].split(opts.split);
            sets.push(&s[..opts.limit.unwrap_or(s.len()).min(s.len())]);
            specs.push(spec.clone());
        }
        let report = evaluate(&specs, &sets, opts.exec, |local, sample| {
            if opts.oracle {
                return Ok(sample.target_text.clone());
            }
            let weights = match opts.mode {
                InferMode::Merged => Weights::Merged(&merged[local]),
                InferMode::Unmerged => Weights::Adapted { task: local },
            };
            let ids = greedy_decode(model, weights, sample.prompt_tokens(), max_new)?;
            Ok(tokenizer.detokenize(&ids))
        })?;
        scores.extend(report.tasks);
    }
    scores.sort_by_key(|s| s.task_id);
    Ok(EvalReport::from_scores(scores))
}

/// Writes `report.json` and `table.txt` into a new `evals/eval-NNNN`.
pub fn save_eval(run: &Path, report: &EvalReport) -> Result<PathBuf> {
    let dir = fresh_dir(&run.join("evals"), "eval")?;
    write(&dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    write(&dir.join("table.txt"), report.table())?;
    Ok(dir)
}
