//! Prompt wrapping, answer parsing, a character tokenizer and the synthetic
//! multi-task corpus.
//!
//! A raw input is substituted into its task's prompt template, the model
//! continues with an answer sentence, and the answer sentence is parsed back
//! into a structured answer:
//!
//! ```text
//! raw input -> wrapped prompt -> model -> answer sentence -> answer
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TEXT_PLACEHOLDER: &str = "[Text]";
pub const ANSWER_PLACEHOLDER: &str = "[Answer]";
pub const ENTITY_DELIMITER: &str = ", ";

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const N_SPECIAL: usize = 3;

/// Space, `a-z`, `A-Z` and a little punctuation: 61 characters, which with
/// the three specials gives a vocabulary of 64.
pub const DEFAULT_ALPHABET: &str =
    " abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ:,.=>?!-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    MicroF1,
    MacroF1,
    RougeL,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::MicroF1 => "micro_f1",
            MetricKind::MacroF1 => "macro_f1",
            MetricKind::RougeL => "rouge_l",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AnswerSchema {
    EntityList,
    Label { labels: Vec<String> },
    FreeText,
}

impl AnswerSchema {
    pub fn metric(&self) -> MetricKind {
        match self {
            AnswerSchema::EntityList => MetricKind::MicroF1,
            AnswerSchema::Label { .. } => MetricKind::MacroF1,
            AnswerSchema::FreeText => MetricKind::RougeL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub prompt_template: String,
    pub answer_template: String,
    pub schema: AnswerSchema,
    pub metric: MetricKind,
}

impl TaskSpec {
    pub fn new(
        task_id: usize,
        name: &str,
        prompt_template: &str,
        answer_template: &str,
        schema: AnswerSchema,
    ) -> Result<Self> {
        let spec = Self {
            task_id,
            name: name.to_string(),
            prompt_template: prompt_template.to_string(),
            answer_template: answer_template.to_string(),
            metric: schema.metric(),
            schema,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_template.matches(TEXT_PLACEHOLDER).count() != 1 {
            return Err(Error::Config(format!(
                "task {}: prompt template must contain exactly one {TEXT_PLACEHOLDER}",
                self.name
            )));
        }
        if self.answer_template.matches(ANSWER_PLACEHOLDER).count() != 1 {
            return Err(Error::Config(format!(
                "task {}: answer template must contain exactly one {ANSWER_PLACEHOLDER}",
                self.name
            )));
        }
        if self.metric != self.schema.metric() {
            return Err(Error::Config(format!(
                "task {}: metric {} does not match its answer schema",
                self.name,
                self.metric.name()
            )));
        }
        Ok(())
    }

    fn answer_affixes(&self) -> (&str, &str) {
        self.answer_template
            .split_once(ANSWER_PLACEHOLDER)
            .expect("validated answer template")
    }
}

/// Structured answer of a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gold {
    Entities(Vec<String>),
    Label(String),
    Text(String),
}

impl Gold {
    pub fn empty_like(schema: &AnswerSchema) -> Self {
        match schema {
            AnswerSchema::EntityList => Gold::Entities(Vec::new()),
            AnswerSchema::Label { .. } => Gold::Label(String::new()),
            AnswerSchema::FreeText => Gold::Text(String::new()),
        }
    }
}

/// Substitutes `raw` for the template's placeholder.
pub fn wrap_input(spec: &TaskSpec, raw: &str) -> Result<String> {
    if raw.contains(TEXT_PLACEHOLDER) {
        return Err(Error::Escaping(TEXT_PLACEHOLDER.to_string()));
    }
    Ok(spec.prompt_template.replacen(TEXT_PLACEHOLDER, raw, 1))
}

/// Renders the answer sentence for a structured answer.
pub fn format_answer(spec: &TaskSpec, gold: &Gold) -> String {
    let body = match gold {
        Gold::Entities(es) => es.join(ENTITY_DELIMITER),
        Gold::Label(l) => l.clone(),
        Gold::Text(t) => t.clone(),
    };
    spec.answer_template.replacen(ANSWER_PLACEHOLDER, &body, 1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parsed {
    pub answer: Gold,
    pub parse_failed: bool,
}

/// Recovers the structured answer from a generated answer sentence.
///
/// Unparseable text yields an empty answer with `parse_failed` set.
pub fn parse_output(spec: &TaskSpec, generated: &str) -> Parsed {
    let (prefix, suffix) = spec.answer_affixes();
    let failed = || Parsed {
        answer: Gold::empty_like(&spec.schema),
        parse_failed: true,
    };
    let body = generated
        .strip_prefix(prefix)
        .and_then(|rest| rest.strip_suffix(suffix));
    match &spec.schema {
        AnswerSchema::FreeText => Parsed {
            answer: Gold::Text(body.unwrap_or(generated).to_string()),
            parse_failed: body.is_none(),
        },
        AnswerSchema::EntityList => {
            let Some(body) = body else { return failed() };
            let mut seen = HashSet::new();
            let entities: Vec<String> = body
                .split(ENTITY_DELIMITER.trim())
                .map(str::trim)
                .filter(|e| !e.is_empty())
                .filter(|e| seen.insert(e.to_string()))
                .map(str::to_string)
                .collect();
            if entities.is_empty() {
                return failed();
            }
            Parsed {
                answer: Gold::Entities(entities),
                parse_failed: false,
            }
        }
        AnswerSchema::Label { labels } => {
            let Some(body) = body else { return failed() };
            let body = body.trim();
            match labels.iter().find(|l| l.as_str() == body) {
                Some(l) => Parsed {
                    answer: Gold::Label(l.clone()),
                    parse_failed: false,
                },
                None => failed(),
            }
        }
    }
}

/// Character-level tokenizer with reserved `PAD`, `BOS` and `EOS` ids.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    alphabet: Vec<char>,
    index: HashMap<char, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new(DEFAULT_ALPHABET).expect("default alphabet has no duplicates")
    }
}

impl Tokenizer {
    pub fn new(alphabet: &str) -> Result<Self> {
        let alphabet: Vec<char> = alphabet.chars().collect();
        let mut index = HashMap::new();
        for (i, &c) in alphabet.iter().enumerate() {
            if index.insert(c, i + N_SPECIAL).is_some() {
                return Err(Error::Config(format!("duplicate character {c:?} in alphabet")));
            }
        }
        Ok(Self { alphabet, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet.len() + N_SPECIAL
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| self.index.get(&c).copied().ok_or(Error::UnknownToken(c)))
            .collect()
    }

    /// Inverse of [`Tokenizer::tokenize`]. Special ids are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= N_SPECIAL)
            .filter_map(|&id| self.alphabet.get(id - N_SPECIAL))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub task_id: usize,
    pub raw_input: String,
    pub wrapped_input: String,
    pub target_text: String,
    pub gold: Gold,
    /// `BOS · prompt · target · EOS`
    #[serde(skip)]
    pub tokens: Vec<usize>,
    /// Marks the target and `EOS` positions of `tokens`.
    #[serde(skip)]
    pub loss_mask: Vec<bool>,
}

impl Sample {
    pub fn build(spec: &TaskSpec, tokenizer: &Tokenizer, raw: &str, gold: Gold) -> Result<Self> {
        let wrapped = wrap_input(spec, raw)?;
        let target = format_answer(spec, &gold);
        let mut s = Self {
            task_id: spec.task_id,
            raw_input: raw.to_string(),
            wrapped_input: wrapped,
            target_text: target,
            gold,
            tokens: Vec::new(),
            loss_mask: Vec::new(),
        };
        s.encode(tokenizer)?;
        Ok(s)
    }

    /// Fills `tokens` and `loss_mask` from the text fields.
    pub fn encode(&mut self, tokenizer: &Tokenizer) -> Result<()> {
        let prompt = tokenizer.tokenize(&self.wrapped_input)?;
        let target = tokenizer.tokenize(&self.target_text)?;
        let mut tokens = Vec::with_capacity(prompt.len() + target.len() + 2);
        tokens.push(BOS);
        tokens.extend(&prompt);
        let prompt_len = tokens.len();
        tokens.extend(&target);
        tokens.push(EOS);
        self.loss_mask = (0..tokens.len()).map(|i| i >= prompt_len).collect();
        self.tokens = tokens;
        Ok(())
    }

    /// `BOS · prompt`, the decoding context.
    pub fn prompt_tokens(&self) -> &[usize] {
        let n = self.loss_mask.iter().take_while(|&&m| !m).count();
        &self.tokens[..n]
    }
}

/// The four synthetic tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    Copy,
    Reverse,
    ExtractCaps,
    ParityLabel,
}

impl SyntheticTask {
    pub const ALL: [SyntheticTask; 4] = [
        SyntheticTask::Copy,
        SyntheticTask::Reverse,
        SyntheticTask::ExtractCaps,
        SyntheticTask::ParityLabel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::Copy => "copy",
            SyntheticTask::Reverse => "reverse",
            SyntheticTask::ExtractCaps => "extract_caps",
            SyntheticTask::ParityLabel => "parity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn spec(self, task_id: usize) -> TaskSpec {
        let (prompt, answer, schema) = match self {
            SyntheticTask::Copy => ("copy:[Text]=", "[Answer]", AnswerSchema::FreeText),
            SyntheticTask::Reverse => ("rev:[Text]=", "[Answer]", AnswerSchema::FreeText),
            SyntheticTask::ExtractCaps => ("caps:[Text]=", "E:[Answer]", AnswerSchema::EntityList),
            SyntheticTask::ParityLabel => (
                "par:[Text]=",
                "[Answer]",
                AnswerSchema::Label {
                    labels: vec!["even".into(), "odd".into()],
                },
            ),
        };
        TaskSpec::new(task_id, self.name(), prompt, answer, schema).expect("built-in templates are valid")
    }

    /// The gold answer for a raw input.
    pub fn solve(self, raw: &str) -> Gold {
        match self {
            SyntheticTask::Copy => Gold::Text(raw.to_string()),
            SyntheticTask::Reverse => Gold::Text(raw.chars().rev().collect()),
            // first occurrence only, the same set semantics the parser uses
            SyntheticTask::ExtractCaps => {
                let mut seen = HashSet::new();
                Gold::Entities(
                    raw.split_whitespace()
                        .filter(|w| w.chars().next().is_some_and(char::is_uppercase))
                        .filter(|w| seen.insert(*w))
                        .map(str::to_string)
                        .collect(),
                )
            }
            SyntheticTask::ParityLabel => {
                let n = raw.chars().filter(|c| c.is_alphabetic()).count();
                Gold::Label(if n % 2 == 0 { "even" } else { "odd" }.to_string())
            }
        }
    }

    fn draw_raw(self, p: &SuiteParams, rng: &mut ChaCha8Rng) -> String {
        let letters: Vec<char> = ('a'..='z').take(p.letters).collect();
        match self {
            SyntheticTask::Copy | SyntheticTask::Reverse => {
                let len = rng.gen_range(p.min_len..=p.max_len);
                letters.choose_multiple(rng, len).collect()
            }
            SyntheticTask::ExtractCaps => loop {
                let n_words = rng.gen_range(p.min_words..=p.max_words);
                let words: Vec<String> = (0..n_words)
                    .map(|_| {
                        let w: String = (0..2).map(|_| *letters.choose(rng).unwrap()).collect();
                        if rng.gen_bool(0.5) {
                            let mut cs = w.chars();
                            let first = cs.next().unwrap().to_ascii_uppercase();
                            std::iter::once(first).chain(cs).collect()
                        } else {
                            w
                        }
                    })
                    .collect();
                if words.iter().any(|w| w.starts_with(|c: char| c.is_uppercase())) {
                    break words.join(" ");
                }
            },
            SyntheticTask::ParityLabel => {
                let len = rng.gen_range(p.min_parity_len..=p.max_parity_len);
                (0..len).map(|_| *letters.choose(rng).unwrap()).collect()
            }
        }
    }
}

/// Shape of the synthetic strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteParams {
    /// Letters are drawn from the first `letters` lowercase characters.
    pub letters: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub min_parity_len: usize,
    pub max_parity_len: usize,
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self {
            letters: 12,
            min_len: 3,
            max_len: 5,
            min_words: 2,
            max_words: 3,
            min_parity_len: 1,
            max_parity_len: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 1000,
            val: 100,
            test: 100,
        }
    }
}

impl SplitSizes {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if v == 0 {
                return Err(Error::Config(format!("sizes.{field} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskData {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub specs: Vec<TaskSpec>,
    pub data: Vec<TaskData>,
}

impl Corpus {
    pub fn task_by_name(&self, name: &str) -> Option<&TaskSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Restricts the corpus to `names`, renumbering task ids densely in the
    /// given order.
    pub fn select(&self, names: &[String]) -> Result<Corpus> {
        let mut specs = Vec::new();
        let mut data = Vec::new();
        for (local, name) in names.iter().enumerate() {
            let spec = self
                .task_by_name(name)
                .ok_or_else(|| Error::Config(format!("unknown task {name:?}")))?;
            let mut spec = spec.clone();
            let old = spec.task_id;
            spec.task_id = local;
            let renumber = |v: &[Sample]| -> Vec<Sample> {
                v.iter()
                    .cloned()
                    .map(|mut s| {
                        s.task_id = local;
                        s
                    })
                    .collect()
            };
            let d = &self.data[old];
            data.push(TaskData {
                train: renumber(&d.train),
                val: renumber(&d.val),
                test: renumber(&d.test),
            });
            specs.push(spec);
        }
        Ok(Corpus { specs, data })
    }
}

/// Deterministic four-task corpus: COPY, REVERSE, EXTRACT-CAPS and
/// PARITY-LABEL, with pairwise-disjoint raw inputs across splits.
pub fn gen_synthetic(suite_seed: u64, sizes: SplitSizes, params: &SuiteParams) -> Result<Corpus> {
    sizes.validate()?;
    if params.letters == 0 || params.letters > 26 {
        return Err(Error::Config("suite.letters must be in 1..=26".into()));
    }
    if params.min_len == 0 || params.min_len > params.max_len || params.max_len > params.letters {
        return Err(Error::Config(
            "suite lengths must satisfy 1 <= min_len <= max_len <= letters".into(),
        ));
    }
    if params.min_words == 0 || params.min_words > params.max_words {
        return Err(Error::Config("suite word counts must satisfy 1 <= min_words <= max_words".into()));
    }
    if params.min_parity_len == 0 || params.min_parity_len > params.max_parity_len {
        return Err(Error::Config("suite parity lengths must satisfy 1 <= min <= max".into()));
    }
    let tokenizer = Tokenizer::default();
    let total = sizes.train + sizes.val + sizes.test;
    let mut specs = Vec::new();
    let mut data = Vec::new();
    for (task_id, task) in SyntheticTask::ALL.into_iter().enumerate() {
        let spec = task.spec(task_id);
        let mut rng = ChaCha8Rng::seed_from_u64(suite_seed.wrapping_mul(0x9E37_79B9).wrapping_add(task_id as u64));
        let mut seen = HashSet::new();
        let mut raws = Vec::with_capacity(total);
        let mut attempts = 0usize;
        while raws.len() < total {
            attempts += 1;
            if attempts > total * 1000 {
                return Err(Error::Config(format!(
                    "task {}: could not draw {total} distinct inputs; enlarge the suite parameters",
                    spec.name
                )));
            }
            let raw = task.draw_raw(params, &mut rng);
            if seen.insert(raw.clone()) {
                raws.push(raw);
            }
        }
        let mut samples = raws
            .iter()
            .map(|raw| Sample::build(&spec, &tokenizer, raw, task.solve(raw)))
            .collect::<Result<Vec<_>>>()?;
        let test = samples.split_off(sizes.train + sizes.val);
        let val = samples.split_off(sizes.train);
        data.push(TaskData {
            train: samples,
            val,
            test,
        });
        specs.push(spec);
    }
    Ok(Corpus { specs, data })
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub task_id: usize,
    pub split: Split,
    pub input: String,
    pub target: String,
    pub gold: Gold,
}

impl CorpusRecord {
    pub fn from_sample(s: &Sample, split: Split) -> Self {
        Self {
            task_id: s.task_id,
            split,
            input: s.raw_input.clone(),
            target: s.target_text.clone(),
            gold: s.gold.clone(),
        }
    }
}

/// Rebuilds a corpus from records and the task specs they refer to.
pub fn corpus_from_records(specs: Vec<TaskSpec>, records: &[CorpusRecord]) -> Result<Corpus> {
    let tokenizer = Tokenizer::default();
    let mut by_task: BTreeMap<usize, TaskData> = specs.iter().map(|s| (s.task_id, TaskData::default())).collect();
    for r in records {
        let spec = specs
            .iter()
            .find(|s| s.task_id == r.task_id)
            .ok_or(Error::TaskNotRegistered(r.task_id))?;
        let sample = Sample::build(spec, &tokenizer, &r.input, r.gold.clone())?;
        if sample.target_text != r.target {
            return Err(Error::Format(format!(
                "record target {:?} disagrees with its gold answer",
                r.target
            )));
        }
        let d = by_task.get_mut(&r.task_id).expect("task present");
        match r.split {
            Split::Train => d.train.push(sample),
            Split::Val => d.val.push(sample),
            Split::Test => d.test.push(sample),
        }
    }
    Ok(Corpus {
        data: by_task.into_values().collect(),
        specs,
    })
}
