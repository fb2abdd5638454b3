//! Micro-F1 for entity lists, macro-F1 for labels, Rouge-L for free text,
//! and the cross-task average.
//!
//! Matching is exact string equality after trimming. Rouge-L works on
//! characters and uses the harmonic mean of LCS precision and recall.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::taskdata::{parse_output, AnswerSchema, Gold, MetricKind, Sample, TaskSpec};

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    2.0 * p * r / (p + r)
}

/// Pooled-count F1 over per-sample sets.
pub fn micro_f1<S: AsRef<str>>(preds: &[Vec<S>], golds: &[Vec<S>]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Argument(format!(
            "micro_f1: {} predictions for {} references",
            preds.len(),
            golds.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let p: HashSet<&str> = p.iter().map(|s| s.as_ref().trim()).collect();
        let g: HashSet<&str> = g.iter().map(|s| s.as_ref().trim()).collect();
        let hit = p.intersection(&g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(f1(tp, fp, fn_))
}

/// Unweighted mean of per-class F1 over the classes present in `golds`.
pub fn macro_f1<S: AsRef<str>>(preds: &[S], golds: &[S], labels: &[S]) -> Result<f64> {
    let preds: Vec<Option<&str>> = preds.iter().map(|p| Some(p.as_ref())).collect();
    macro_f1_with_misses(&preds, golds, labels)
}

/// [`macro_f1`] where `None` is a prediction outside every class: it
/// counts as a miss for the gold class and a false positive for none.
pub fn macro_f1_with_misses<S: AsRef<str>>(preds: &[Option<&str>], golds: &[S], labels: &[S]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Argument(format!(
            "macro_f1: {} predictions for {} references",
            preds.len(),
            golds.len()
        )));
    }
    let labels: Vec<&str> = labels.iter().map(|l| l.as_ref().trim()).collect();
    let class = |s: &str| {
        labels
            .iter()
            .position(|l| *l == s.trim())
            .ok_or_else(|| Error::Argument(format!("label {s:?} is not in the label set")))
    };
    let mut tp = vec![0usize; labels.len()];
    let mut fp = vec![0usize; labels.len()];
    let mut fn_ = vec![0usize; labels.len()];
    let mut present = vec![false; labels.len()];
    for (p, g) in preds.iter().zip(golds) {
        let g = class(g.as_ref())?;
        present[g] = true;
        match p.map(class).transpose()? {
            Some(p) if p == g => tp[g] += 1,
            Some(p) => {
                fp[p] += 1;
                fn_[g] += 1;
            }
            None => fn_[g] += 1,
        }
    }
    let scores: Vec<f64> = (0..labels.len())
        .filter(|&c| present[c])
        .map(|c| f1(tp[c], fp[c], fn_[c]))
        .collect();
    if scores.is_empty() {
        return Ok(0.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with equal weight on precision and recall.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Character-level [`rouge_l`].
pub fn rouge_l_chars(candidate: &str, reference: &str) -> f64 {
    let c: Vec<char> = candidate.chars().collect();
    let r: Vec<char> = reference.chars().collect();
    rouge_l(&c, &r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task_id: usize,
    pub name: String,
    pub metric: MetricKind,
    pub value: f64,
    /// Fraction of generations equal to the reference answer sentence.
    pub exact_match: f64,
    pub parse_failures: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskScore>,
    pub average: f64,
}

impl EvalReport {
    pub fn from_scores(tasks: Vec<TaskScore>) -> Self {
        let average = if tasks.is_empty() {
            0.0
        } else {
            tasks.iter().map(|t| t.value).sum::<f64>() / tasks.len() as f64
        };
        Self { tasks, average }
    }

    pub fn task(&self, name: &str) -> Option<&TaskScore> {
        self.tasks.iter().find(|t| t.name == name)
    }

    /// One-row table with tasks as columns and the average last.
    pub fn table(&self) -> String {
        render_table("setting", &[("score".to_string(), Some(self.clone()))])
    }
}

/// Settings as rows, tasks as columns, average last. Rows whose report is
/// `None` are printed with their label only (e.g. skipped sweep points).
pub fn render_table(header: &str, rows: &[(String, Option<EvalReport>)]) -> String {
    let names: Vec<String> = rows
        .iter()
        .find_map(|(_, r)| r.as_ref())
        .map(|r| r.tasks.iter().map(|t| t.name.clone()).collect())
        .unwrap_or_default();
    let mut cols: Vec<String> = vec![header.to_string()];
    cols.extend(names.iter().cloned());
    cols.push("average".into());
    let mut cells: Vec<Vec<String>> = vec![cols];
    for (label, report) in rows {
        let mut line = vec![label.clone()];
        if let Some(r) = report {
            line.extend(r.tasks.iter().map(|t| format!("{:.4}", t.value)));
            line.push(format!("{:.4}", r.average));
        }
        cells.push(line);
    }
    let ncol = cells.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncol)
        .map(|c| cells.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(line, "{:<w$}", cell, w = widths[c]);
            } else {
                let _ = write!(line, "  {:>w$}", cell, w = widths[c]);
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Scores one task's generations against its samples.
pub fn score_task(spec: &TaskSpec, samples: &[Sample], generations: &[String]) -> Result<TaskScore> {
    if samples.len() != generations.len() {
        return Err(Error::Argument("one generation per sample is required".into()));
    }
    let parsed: Vec<_> = generations.iter().map(|g| parse_output(spec, g)).collect();
    let parse_failures = parsed.iter().filter(|p| p.parse_failed).count();
    let exact = samples
        .iter()
        .zip(generations)
        .filter(|(s, g)| s.target_text == **g)
        .count();
    let value = match &spec.schema {
        AnswerSchema::EntityList => {
            let entities = |g: &Gold| match g {
                Gold::Entities(e) => e.clone(),
                _ => Vec::new(),
            };
            let preds: Vec<Vec<String>> = parsed.iter().map(|p| entities(&p.answer)).collect();
            let golds: Vec<Vec<String>> = samples.iter().map(|s| entities(&s.gold)).collect();
            micro_f1(&preds, &golds)?
        }
        AnswerSchema::Label { labels } => {
            let label = |g: &Gold| match g {
                Gold::Label(l) => l.clone(),
                _ => String::new(),
            };
            let preds: Vec<Option<String>> = parsed
                .iter()
                .map(|p| (!p.parse_failed).then(|| label(&p.answer)))
                .collect();
            let preds: Vec<Option<&str>> = preds.iter().map(Option::as_deref).collect();
            let golds: Vec<String> = samples.iter().map(|s| label(&s.gold)).collect();
            macro_f1_with_misses(&preds, &golds, labels)?
        }
        AnswerSchema::FreeText => {
            let text = |g: &Gold| match g {
                Gold::Text(t) => t.clone(),
                _ => String::new(),
            };
            if samples.is_empty() {
                0.0
            } else {
                parsed
                    .iter()
                    .zip(samples)
                    .map(|(p, s)| rouge_l_chars(&text(&p.answer), &text(&s.gold)))
                    .sum::<f64>()
                    / samples.len() as f64
            }
        }
    };
    Ok(TaskScore {
        task_id: spec.task_id,
        name: spec.name.clone(),
        metric: spec.metric,
        value,
        exact_match: if samples.is_empty() {
            0.0
        } else {
            exact as f64 / samples.len() as f64
        },
        parse_failures,
        samples: samples.len(),
    })
}

/// Generates an answer sentence for every sample with `generate(task,
/// sample)`, parses and scores it, and averages across tasks.
///
/// `sets[t]` are the samples of `specs[t]`.
pub fn evaluate<F>(specs: &[TaskSpec], sets: &[&[Sample]], exec: Exec, generate: F) -> Result<EvalReport>
where
    F: Fn(usize, &Sample) -> Result<String> + Sync,
{
    if specs.len() != sets.len() {
        return Err(Error::Argument("one sample set per task is required".into()));
    }
    let jobs: Vec<(usize, &Sample)> = sets
        .iter()
        .enumerate()
        .flat_map(|(t, s)| s.iter().map(move |x| (t, x)))
        .collect();
    let generated = exec.map(&jobs, |&(t, s)| generate(t, s));
    let mut generated = generated.into_iter();
    let mut scores = Vec::with_capacity(specs.len());
    for (spec, set) in specs.iter().zip(sets) {
        let gens = generated.by_ref().take(set.len()).collect::<Result<Vec<_>>>()?;
        scores.push(score_task(spec, set, &gens)?);
    }
    Ok(EvalReport::from_scores(scores))
}
