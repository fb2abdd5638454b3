//! One-axis hyperparameter sweeps over a single model covering every task
//! in `data.tasks`.
//!
//! The per-expert rank is what the axes hold fixed or vary, so the total
//! rank follows the expert count: `r_total = rank * (N_C + N_T)`.
//!
//! - `n_common`: the per-expert rank of the base config is kept and N_C
//!   takes each value.
//! - `expert_rank`: N_C of the base config is kept and the per-expert rank
//!   takes each value.

use std::path::{Path, PathBuf};

use cgc_lora::metrics::{render_table, EvalReport};
use cgc_lora::model::{build_model, ModelConfig};
use cgc_lora::taskdata::{Corpus, Split};
use cgc_lora::trainer::{evaluate_split, train, NoLog, TrainConfig};
use cgc_lora::Exec;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::load_data;
use crate::{fresh_dir, write, CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    NCommon,
    ExpertRank,
}

impl Axis {
    pub fn header(self) -> &'static str {
        match self {
            Axis::NCommon => "N_C",
            Axis::ExpertRank => "rank",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub value: usize,
    pub n_common: usize,
    pub expert_rank: usize,
    pub r_total: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub skipped: Option<String>,
    pub final_loss: Option<f64>,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: Axis,
    pub rows: Vec<SweepRow>,
    pub table: String,
}

#[derive(Debug, Clone)]
pub struct SweepOpts {
    pub axis: Axis,
    /// Defaults to the grid in the config's `[sweep]` table.
    pub values: Option<Vec<usize>>,
    /// Run the configurations on separate threads.
    pub parallel: bool,
    pub exec: Exec,
}

struct Point {
    value: usize,
    n_common: usize,
    expert_rank: usize,
}

fn plan(base: &ModelConfig, n_tasks: usize, axis: Axis, values: &[usize]) -> Vec<(Point, Option<String>)> {
    let a = &base.adapter;
    let experts0 = a.n_common + n_tasks;
    let base_rank = (a.r_total % experts0 == 0).then(|| a.r_total / experts0);
    values
        .iter()
        .map(|&v| {
            let (n_common, rank) = match axis {
                Axis::NCommon => (v, base_rank.unwrap_or(0)),
                Axis::ExpertRank => (a.n_common, v),
            };
            let p = Point {
                value: v,
                n_common,
                expert_rank: rank,
            };
            let reason = if a.rank_overrides.is_some() {
                Some("rank_overrides are set".to_string())
            } else if v == 0 {
                Some(format!("{} must be at least 1", axis.header()))
            } else if base_rank.is_none() && axis == Axis::NCommon {
                Some(format!("base r_total {} does not split evenly over {experts0} experts", a.r_total))
            } else {
                None
            };
            (p, reason)
        })
        .collect()
}

fn run_point(
    base: &ModelConfig,
    p: &Point,
    corpus: &Corpus,
    train_cfg: &TrainConfig,
    exec: Exec,
) -> Result<(Option<f64>, EvalReport)> {
    let n_tasks = corpus.specs.len();
    let mut cfg = base.clone();
    cfg.adapter.n_common = p.n_common;
    cfg.adapter.r_total = p.expert_rank * (p.n_common + n_tasks);
    let mut model = build_model(&cfg, n_tasks)?;
    let summary = train(&mut model, corpus, train_cfg, exec, &mut NoLog)?;
    let report = evaluate_split(&model, corpus, Split::Test, usize::MAX, train_cfg.max_new_tokens, exec)?;
    Ok((summary.final_loss, report))
}

/// Runs the sweep and writes `sweep-NNNN/` under `out_root` with the config
/// echo, `sweep.json` and `table.txt`. Rows that cannot run carry the
/// reason in their label.
pub fn sweep(config: Option<&Path>, data: &Path, out_root: &Path, opts: &SweepOpts) -> Result<(PathBuf, SweepResult)> {
    let loaded = RunConfig::load(config)?;
    let cfg = loaded.config;
    let data = load_data(data)?;
    let corpus = data.corpus.select(&cfg.data.tasks)?;
    let base = cfg.model_config();
    let values = opts.values.clone().unwrap_or_else(|| match opts.axis {
        Axis::NCommon => cfg.sweep.n_common.clone(),
        Axis::ExpertRank => cfg.sweep.expert_rank.clone(),
    });
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let points = plan(&base, corpus.specs.len(), opts.axis, &values);

    let dir = fresh_dir(out_root, "sweep")?;
    write(&dir.join("config.toml"), &loaded.text)?;
    write(&dir.join("resolved.toml"), cfg.to_toml()?)?;

    let run = |p: &Point| run_point(&base, p, &corpus, &cfg.train, opts.exec);
    let results: Vec<Option<Result<(Option<f64>, EvalReport)>>> = if opts.parallel || cfg.sweep.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = points
                .iter()
                .map(|(p, skip)| skip.is_none().then(|| s.spawn(|| run(p))))
                .collect();
            handles
                .into_iter()
                .map(|h| h.map(|h| h.join().expect("sweep worker panicked")))
                .collect()
        })
    } else {
        points.iter().map(|(p, skip)| skip.is_none().then(|| run(p))).collect()
    };

    let mut rows = Vec::new();
    let mut numeric_failure = None;
    for ((p, skip), res) in points.into_iter().zip(results) {
        let mut skipped = skip;
        let (mut final_loss, mut report) = (None, None);
        match res {
            Some(Ok((l, r))) => {
                final_loss = l;
                report = Some(r);
            }
            Some(Err(e)) => {
                // infeasible layouts surface as config errors and are skipped;
                // divergence is reported after the table is written
                if e.exit_code() == 3 {
                    numeric_failure.get_or_insert_with(|| e.to_string());
                    skipped = Some(format!("failed: {e}"));
                } else {
                    skipped = Some(e.to_string());
                }
            }
            None => {}
        }
        let label = match &skipped {
            None => format!("{}={}", opts.axis.header(), p.value),
            Some(why) => format!("{}={} (skipped: {why})", opts.axis.header(), p.value),
        };
        rows.push(SweepRow {
            label,
            value: p.value,
            n_common: p.n_common,
            expert_rank: p.expert_rank,
            r_total: p.expert_rank * (p.n_common + corpus.specs.len()),
            skipped,
            final_loss,
            report,
        });
    }
    let table_rows: Vec<(String, Option<EvalReport>)> = rows.iter().map(|r| (r.label.clone(), r.report.clone())).collect();
    let table = render_table(opts.axis.header(), &table_rows);
    let result = SweepResult {
        axis: opts.axis,
        rows,
        table,
    };
    write(&dir.join("sweep.json"), serde_json::to_string_pretty(&result)? + "\n")?;
    write(&dir.join("table.txt"), &result.table)?;
    if let Some(msg) = numeric_failure {
        return Err(CliError::Core(cgc_lora::Error::Numeric(format!(
            "a sweep run diverged ({msg}); table written to {}",
            dir.display()
        ))));
    }
    Ok((dir, result))
}
