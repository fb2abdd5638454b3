//! Corpus directories: one `<task>.jsonl` of [`CorpusRecord`]s per task plus
//! a `manifest.json`. Task ids in the files are global: the position of the
//! task in the manifest.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use cgc_lora::taskdata::{
    corpus_from_records, gen_synthetic, Corpus, CorpusRecord, Split, SplitSizes, SuiteParams, TaskSpec,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{io_err, read, write, CliError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub version: u32,
    pub seed: u64,
    pub sizes: SplitSizes,
    pub suite: SuiteParams,
    pub tasks: Vec<TaskFile>,
    pub specs: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub name: String,
    pub file: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// A loaded corpus directory. `corpus.specs[i].task_id == i`.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub manifest: DataManifest,
    pub corpus: Corpus,
}

impl DataDir {
    /// Global id of a task name.
    pub fn task_id(&self, name: &str) -> Option<usize> {
        self.manifest.tasks.iter().position(|t| t.name == name)
    }
}

/// Writes the corpus described by `cfg.data` into `out`. Reruns overwrite
/// with identical bytes.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<DataManifest> {
    let d = &cfg.data;
    let corpus = gen_synthetic(d.seed, d.sizes, &d.suite)?.select(&d.tasks)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut tasks = Vec::new();
    for (spec, data) in corpus.specs.iter().zip(&corpus.data) {
        let file = format!("{}.jsonl", spec.name);
        let mut text = String::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for s in data.split(split) {
                text.push_str(&serde_json::to_string(&CorpusRecord::from_sample(s, split))?);
                text.push('\n');
            }
        }
        write(&out.join(&file), text)?;
        tasks.push(TaskFile {
            name: spec.name.clone(),
            file,
            train: data.train.len(),
            val: data.val.len(),
            test: data.test.len(),
        });
    }
    let manifest = DataManifest {
        version: crate::config::CONFIG_VERSION,
        seed: d.seed,
        sizes: d.sizes,
        suite: d.suite.clone(),
        tasks,
        specs: corpus.specs,
    };
    write(&out.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_data(dir: &Path) -> Result<DataDir> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "no corpus at {} (missing {MANIFEST}; run gen-data first)",
            dir.display()
        )));
    }
    let manifest: DataManifest = serde_json::from_str(&read(&path)?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for t in &manifest.tasks {
        let p = dir.join(&t.file);
        let f = fs::File::open(&p).map_err(io_err(&p))?;
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(io_err(&p))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: CorpusRecord = serde_json::from_str(&line)
                .map_err(|e| CliError::Usage(format!("{}:{}: {e}", p.display(), n + 1)))?;
            records.push(r);
        }
    }
    let corpus = corpus_from_records(manifest.specs.clone(), &records)?;
    for (t, d) in manifest.tasks.iter().zip(&corpus.data) {
        if (d.train.len(), d.val.len(), d.test.len()) != (t.train, t.val, t.test) {
            return Err(CliError::Usage(format!("{}: record counts disagree with the manifest", t.file)));
        }
    }
    Ok(DataDir { manifest, corpus })
}
