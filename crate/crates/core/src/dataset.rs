//! QA records, vocabularies and question→answer prior audits.
//!
//! Source files (SLAKE, VQA-RAD style JSON or JSONL) are mapped onto one
//! canonical record through a [`FieldMap`], since upstream key names differ
//! between releases. The canonical on-disk form is JSONL with fields
//! `id, image_ref, question, answer, question_type` and an optional `split`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::KvConfig;
use crate::error::{Error, Result};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }

    fn is_unassigned(&self) -> bool {
        *self == Split::Unassigned
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "training" => Ok(Split::Train),
            "test" | "testing" => Ok(Split::Test),
            "" | "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QASample {
    pub id: String,
    pub image_ref: String,
    pub question_raw: String,
    pub question_tokens: Vec<String>,
    pub answer: String,
    pub question_type: String,
    pub split: Split,
}

impl QASample {
    /// Builds a sample from raw text, normalizing question and answer.
    /// Returns `None` when either normalizes to nothing.
    pub fn new(
        id: impl Into<String>,
        image_ref: impl Into<String>,
        question: &str,
        answer: &str,
        question_type: Option<&str>,
    ) -> Option<Self> {
        let question_tokens = normalize(question);
        let answer = normalize_answer(answer);
        if question_tokens.is_empty() || answer.is_empty() {
            return None;
        }
        let question_type = match question_type.map(str::trim).filter(|t| !t.is_empty()) {
            Some(t) => t.to_string(),
            None => derive_question_type(&question_tokens),
        };
        Some(Self {
            id: id.into(),
            image_ref: image_ref.into(),
            question_raw: question.to_string(),
            question_tokens,
            answer,
            question_type,
            split: Split::Unassigned,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Normalized question re-joined with single spaces.
    pub fn question_key(&self) -> String {
        self.question_tokens.join(" ")
    }
}

/// Lowercases, turns punctuation into separators (hyphens between two
/// alphanumerics and apostrophes excepted) and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().flat_map(char::to_lowercase).collect();
    let mut cleaned = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            cleaned.push(c);
        } else if c == '-' {
            let prev = i
                .checked_sub(1)
                .map(|j| chars[j].is_alphanumeric())
                .unwrap_or(false);
            let next = chars
                .get(i + 1)
                .map(|n| n.is_alphanumeric())
                .unwrap_or(false);
            cleaned.push(if prev && next { '-' } else { ' ' });
        } else if c == '\'' || c == '\u{2019}' {
            // dropped: "don't" -> "dont"
        } else {
            cleaned.push(' ');
        }
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}

pub fn normalize_answer(text: &str) -> String {
    normalize(text).join(" ")
}

/// First normalized token, capitalized (`which ...` → `Which`).
pub fn derive_question_type(tokens: &[String]) -> String {
    let Some(first) = tokens.first() else {
        return "Other".to_string();
    };
    let mut chars = first.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => "Other".to_string(),
    }
}

/// Source-key names for one dataset flavour.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    pub id: Option<String>,
    pub image: String,
    pub question: String,
    pub answer: String,
    pub question_type: Option<String>,
    pub split: Option<String>,
    /// `(field, kept value)`: records whose field differs are filtered out.
    pub language: Option<(String, String)>,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self::canonical()
    }
}

impl FieldMap {
    pub fn canonical() -> Self {
        Self {
            id: Some("id".into()),
            image: "image_ref".into(),
            question: "question".into(),
            answer: "answer".into(),
            question_type: Some("question_type".into()),
            split: Some("split".into()),
            language: None,
        }
    }

    /// SLAKE release keys (`qid`, `img_name`, `content_type`, `q_lang`).
    pub fn slake() -> Self {
        Self {
            id: Some("qid".into()),
            image: "img_name".into(),
            question: "question".into(),
            answer: "answer".into(),
            question_type: Some("content_type".into()),
            split: None,
            language: Some(("q_lang".into(), "en".into())),
        }
    }

    /// VQA-RAD release keys.
    pub fn radvqa() -> Self {
        Self {
            id: Some("qid".into()),
            image: "image_name".into(),
            question: "question".into(),
            answer: "answer".into(),
            question_type: Some("question_type".into()),
            split: None,
            language: None,
        }
    }

    /// Reads `id`, `image`, `question`, `answer`, `question_type`, `split`,
    /// `language` and `language_value`, optionally under `prefix.`.
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let get = |k: &str| cfg.get_str(k).map(str::to_string).filter(|s| !s.is_empty());
        let need = |k: &str| get(k).ok_or_else(|| Error::Config(format!("field map lacks `{k}`")));
        let language = match (get("language"), get("language_value")) {
            (Some(f), Some(v)) => Some((f, v)),
            (None, None) => None,
            _ => {
                return Err(Error::Config(
                    "`language` and `language_value` go together".into(),
                ))
            }
        };
        Ok(Self {
            id: get("id"),
            image: need("image")?,
            question: need("question")?,
            answer: need("answer")?,
            question_type: get("question_type"),
            split: get("split"),
            language,
        })
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "canonical" => Some(Self::canonical()),
            "slake" => Some(Self::slake()),
            "radvqa" | "vqa-rad" => Some(Self::radvqa()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub samples: Vec<QASample>,
    /// `(record index, reason)` for every skipped record.
    pub skipped: Vec<(usize, String)>,
}

impl LoadReport {
    pub fn skip_count(&self) -> usize {
        self.skipped.len()
    }
}

fn field_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(if *b { "yes" } else { "no" }.to_string()),
        _ => None,
    }
}

fn parse_records(path: &Path, text: &str) -> Result<Vec<Value>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).map_err(|e| Error::parse(path.display().to_string(), e))
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e))
            })
            .collect()
    }
}

/// Loads a JSON array or JSONL file. Records that cannot be normalized are
/// skipped and reported, never fatal.
pub fn load_dataset(path: &Path, map: &FieldMap) -> Result<LoadReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records = parse_records(path, &text)?;
    let mut report = LoadReport::default();
    for (i, rec) in records.iter().enumerate() {
        match record_to_sample(i, rec, map) {
            Ok(s) => report.samples.push(s),
            Err(reason) => report.skipped.push((i, reason)),
        }
    }
    if report.samples.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    Ok(report)
}

fn record_to_sample(
    index: usize,
    rec: &Value,
    map: &FieldMap,
) -> std::result::Result<QASample, String> {
    let obj = rec.as_object().ok_or("record is not an object")?;
    let get = |k: &str| obj.get(k).and_then(field_string);
    if let Some((field, keep)) = &map.language {
        match get(field) {
            Some(lang) if lang == *keep => {}
            Some(lang) => return Err(format!("language `{lang}` filtered")),
            None => {}
        }
    }
    let id = map
        .id
        .as_deref()
        .and_then(get)
        .unwrap_or_else(|| index.to_string());
    let image = get(&map.image).ok_or_else(|| format!("missing `{}`", map.image))?;
    let question = get(&map.question).ok_or_else(|| format!("missing `{}`", map.question))?;
    let answer = get(&map.answer).ok_or_else(|| format!("missing `{}`", map.answer))?;
    let qtype = map.question_type.as_deref().and_then(get);
    let split = match map.split.as_deref().and_then(get) {
        Some(s) => s.parse::<Split>().map_err(|e| e.to_string())?,
        None => Split::Unassigned,
    };
    QASample::new(id, image, &question, &answer, qtype.as_deref())
        .map(|s| s.with_split(split))
        .ok_or_else(|| "question or answer empty after normalization".to_string())
}

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalRecord {
    id: String,
    image_ref: String,
    question: String,
    answer: String,
    question_type: String,
    #[serde(default, skip_serializing_if = "Split::is_unassigned")]
    split: Split,
}

pub fn to_canonical_jsonl(samples: &[QASample]) -> String {
    let mut out = String::new();
    for s in samples {
        let rec = CanonicalRecord {
            id: s.id.clone(),
            image_ref: s.image_ref.clone(),
            question: s.question_raw.clone(),
            answer: s.answer.clone(),
            question_type: s.question_type.clone(),
            split: s.split,
        };
        out.push_str(&serde_json::to_string(&rec).expect("canonical record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_canonical(path: &Path, samples: &[QASample]) -> Result<()> {
    crate::fsutil::write_atomic(path, to_canonical_jsonl(samples).as_bytes())
}

pub fn read_canonical(path: &Path) -> Result<Vec<QASample>> {
    Ok(load_dataset(path, &FieldMap::canonical())?.samples)
}

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Bijective token↔index map; index 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    index_to_token: Vec<String>,
    token_to_index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }
}

impl Vocab {
    /// Sorted, deduplicated vocabulary over `tokens`, after the unknown token.
    pub fn from_tokens<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let set: BTreeSet<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_string())
            .filter(|t| t != UNKNOWN_TOKEN)
            .collect();
        let index_to_token: Vec<String> = std::iter::once(UNKNOWN_TOKEN.to_string())
            .chain(set)
            .collect();
        let token_to_index = index_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            index_to_token,
            token_to_index,
        }
    }

    /// Rebuilds from an explicit index order (index 0 must be the unknown token).
    pub fn from_ordered(index_to_token: Vec<String>) -> Result<Self> {
        if index_to_token.first().map(String::as_str) != Some(UNKNOWN_TOKEN) {
            return Err(Error::parse("vocab", "index 0 must be the unknown token"));
        }
        let token_to_index: HashMap<String, usize> = index_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if token_to_index.len() != index_to_token.len() {
            return Err(Error::parse("vocab", "duplicate tokens"));
        }
        Ok(Self {
            index_to_token,
            token_to_index,
        })
    }

    pub fn len(&self) -> usize {
        self.index_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() <= 1
    }

    /// Index of `token`, or 0 when unknown.
    pub fn index(&self, token: &str) -> usize {
        self.token_to_index.get(token).copied().unwrap_or(0)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.index_to_token.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.index_to_token
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.index(t)).collect()
    }
}

/// Question vocabulary over question tokens; answer vocabulary over whole
/// normalized answer strings (answers are classes, not tokenized).
pub fn build_vocabs(samples: &[QASample]) -> (Vocab, Vocab) {
    let q = Vocab::from_tokens(samples.iter().flat_map(|s| s.question_tokens.iter()));
    let a = Vocab::from_tokens(samples.iter().map(|s| s.answer.as_str()));
    (q, a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyMode {
    ExactQuestion,
    QuestionType,
}

impl KeyMode {
    pub fn key(self, s: &QASample) -> String {
        match self {
            KeyMode::ExactQuestion => s.question_key(),
            KeyMode::QuestionType => s.question_type.clone(),
        }
    }
}

impl std::str::FromStr for KeyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact_question" | "exact" | "question" => Ok(KeyMode::ExactQuestion),
            "question_type" | "type" => Ok(KeyMode::QuestionType),
            other => Err(Error::Config(format!("unknown key mode `{other}`"))),
        }
    }
}

/// Count of the most frequent answer against all others, e.g. `59:1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dominance {
    pub top: usize,
    pub rest: usize,
}

impl fmt::Display for Dominance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.top, self.rest)
    }
}

/// Answer histograms per `(key, split)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PriorTable {
    pub mode: Option<KeyMode>,
    counts: BTreeMap<(String, Split), BTreeMap<String, usize>>,
}

impl PriorTable {
    pub fn build(samples: &[QASample], mode: KeyMode) -> Self {
        let mut counts: BTreeMap<(String, Split), BTreeMap<String, usize>> = BTreeMap::new();
        for s in samples {
            *counts
                .entry((mode.key(s), s.split))
                .or_default()
                .entry(s.answer.clone())
                .or_default() += 1;
        }
        Self {
            mode: Some(mode),
            counts,
        }
    }

    pub fn histogram(&self, key: &str, split: Split) -> Option<&BTreeMap<String, usize>> {
        self.counts.get(&(key.to_string(), split))
    }

    pub fn keys(&self) -> impl Iterator<Item = (&str, Split)> {
        self.counts.keys().map(|(k, s)| (k.as_str(), *s))
    }

    /// Most frequent answer (ties: lexicographically smallest) and its dominance.
    pub fn dominance(&self, key: &str, split: Split) -> Option<(String, Dominance)> {
        let hist = self.histogram(key, split)?;
        let total: usize = hist.values().sum();
        let (ans, &top) = hist
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))?;
        Some((
            ans.clone(),
            Dominance {
                top,
                rest: total - top,
            },
        ))
    }

    pub fn split_total(&self, split: Split) -> usize {
        self.counts
            .iter()
            .filter(|((_, s), _)| *s == split)
            .map(|(_, h)| h.values().sum::<usize>())
            .sum()
    }

    /// `key,split,answer,count,ratio` rows; `ratio` repeats the key's dominance.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,split,answer,count,ratio\n");
        for ((key, split), hist) in &self.counts {
            let ratio = self
                .dominance(key, *split)
                .map(|(_, d)| d.to_string())
                .unwrap_or_default();
            let mut rows: Vec<_> = hist.iter().collect();
            rows.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
            for (ans, count) in rows {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    csv_field(key),
                    split,
                    csv_field(ans),
                    count,
                    ratio
                ));
            }
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
