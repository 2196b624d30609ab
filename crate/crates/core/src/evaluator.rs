//! Accuracy reports per question type, biased/debiased comparison, the
//! prior-only yardstick and per-sample score decompositions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::{argmax, CausalScores, Checkpoint, Mode};
use crate::config::KvConfig;
use crate::dataset::{csv_field, KeyMode, QASample};
use crate::encoders::ImageSource;
use crate::error::{Error, Result};

/// The seven named report rows, in table order.
pub const TABLE_TYPES: [&str; 7] = [
    "Abnormal", "Color", "Modality", "Organ", "Plane", "Position", "Size",
];
pub const OTHER_TYPE: &str = "Other";

/// Maps dataset question-type labels onto [`TABLE_TYPES`]; anything unmapped
/// becomes [`OTHER_TYPE`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TypeMapping {
    map: BTreeMap<String, String>,
}

impl TypeMapping {
    /// Identity on the named types, matched case-insensitively.
    pub fn table() -> Self {
        let map = TABLE_TYPES
            .iter()
            .map(|t| (t.to_ascii_lowercase(), t.to_string()))
            .collect();
        Self { map }
    }

    /// `type.<label>=<Row>` entries layered over [`TypeMapping::table`].
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        let mut m = Self::table();
        for (label, row) in cfg.section("type") {
            let canon = TABLE_TYPES
                .iter()
                .chain(std::iter::once(&OTHER_TYPE))
                .find(|t| t.eq_ignore_ascii_case(&row))
                .ok_or_else(|| {
                    Error::Config(format!("type.{label}: `{row}` is not a report row"))
                })?;
            m.map.insert(label.to_ascii_lowercase(), canon.to_string());
        }
        Ok(m)
    }

    pub fn row(&self, label: &str) -> &str {
        self.map
            .get(&label.to_ascii_lowercase())
            .map_or(OTHER_TYPE, String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypeAccuracy {
    pub correct: usize,
    pub count: usize,
    pub accuracy: f64,
}

impl TypeAccuracy {
    fn new(correct: usize, count: usize) -> Self {
        Self {
            correct,
            count,
            accuracy: if count == 0 {
                0.0
            } else {
                correct as f64 / count as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `biased`, `debiased` or `prior_only`.
    pub mode: String,
    pub dataset: String,
    pub overall: TypeAccuracy,
    pub by_type: BTreeMap<String, TypeAccuracy>,
}

impl EvalReport {
    /// Builds a report from per-sample `(row, correct)` outcomes.
    pub fn from_outcomes(
        mode: impl Into<String>,
        dataset: impl Into<String>,
        outcomes: impl IntoIterator<Item = (String, bool)>,
    ) -> Self {
        let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (row, ok) in outcomes {
            let e = tally.entry(row).or_default();
            e.0 += usize::from(ok);
            e.1 += 1;
        }
        let (c, n) = tally.values().fold((0, 0), |(c, n), (a, b)| (c + a, n + b));
        Self {
            mode: mode.into(),
            dataset: dataset.into(),
            overall: TypeAccuracy::new(c, n),
            by_type: tally
                .into_iter()
                .map(|(k, (c, n))| (k, TypeAccuracy::new(c, n)))
                .collect(),
        }
    }

    /// `Overall`, then the named types present, then `Other` if present.
    pub fn rows(&self) -> Vec<(&str, TypeAccuracy)> {
        let mut out = vec![("Overall", self.overall)];
        for t in TABLE_TYPES {
            if let Some(a) = self.by_type.get(t) {
                out.push((t, *a));
            }
        }
        for (t, a) in &self.by_type {
            if !TABLE_TYPES.contains(&t.as_str()) {
                out.push((t.as_str(), *a));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            context: context.to_string(),
            message: e.to_string(),
        })
    }
}

/// Exact-match accuracy of `ck` on `samples` in `mode`. Samples are scored in
/// parallel; the report does not depend on scheduling.
pub fn evaluate(
    ck: &Checkpoint,
    samples: &[QASample],
    images: &ImageSource,
    mode: Mode,
    mapping: &TypeMapping,
    dataset: &str,
) -> Result<EvalReport> {
    let outcomes: Vec<(String, bool)> = samples
        .par_iter()
        .map(|s| {
            let e = ck.encode(s, images)?;
            let pred = ck.model.predict(&e, mode)?;
            Ok((
                mapping.row(&s.question_type).to_string(),
                e.answer == Some(pred),
            ))
        })
        .collect::<Result<_>>()?;
    Ok(EvalReport::from_outcomes(
        mode.to_string(),
        dataset,
        outcomes,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub row: String,
    pub count: usize,
    pub biased: f64,
    pub debiased: f64,
    pub delta: f64,
    /// `biased`, `debiased` or `tie`.
    pub winner: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub dataset: String,
    pub rows: Vec<ComparisonRow>,
}

/// Side-by-side rows of two reports; rows missing from either side are dropped.
pub fn compare(biased: &EvalReport, debiased: &EvalReport) -> Comparison {
    let other: BTreeMap<&str, TypeAccuracy> = debiased.rows().into_iter().collect();
    let rows = biased
        .rows()
        .into_iter()
        .filter_map(|(row, b)| {
            let d = other.get(row)?;
            let winner = match b.accuracy.total_cmp(&d.accuracy) {
                std::cmp::Ordering::Greater => "biased",
                std::cmp::Ordering::Less => "debiased",
                std::cmp::Ordering::Equal => "tie",
            };
            Some(ComparisonRow {
                row: row.to_string(),
                count: b.count,
                biased: b.accuracy,
                debiased: d.accuracy,
                delta: d.accuracy - b.accuracy,
                winner,
            })
        })
        .collect();
    Comparison {
        dataset: biased.dataset.clone(),
        rows,
    }
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,count,biased,debiased,delta,winner\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4},{:+.4},{}",
                csv_field(&r.row),
                r.count,
                r.biased,
                r.debiased,
                r.delta,
                r.winner
            );
        }
        out
    }

    /// Markdown table with the better value of each row in bold.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Row | n | VQA | CFVQA | Δ |\n|---|---:|---:|---:|---:|\n");
        let cell = |v: f64, bold: bool| {
            if bold {
                format!("**{v:.3}**")
            } else {
                format!("{v:.3}")
            }
        };
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:+.3} |",
                r.row,
                r.count,
                cell(r.biased, r.winner != "debiased"),
                cell(r.debiased, r.winner != "biased"),
                r.delta
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes") + "\n"
    }
}

/// Which table a prior-only prediction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    ExactQuestion,
    QuestionType,
    Global,
}

/// Train-majority answers per exact question, per question type, and overall.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorOnly {
    mode: KeyMode,
    by_question: BTreeMap<String, String>,
    by_type: BTreeMap<String, String>,
    global: String,
}

/// Most frequent answer; ties go to the lexicographically smallest.
fn majority<'a>(answers: impl Iterator<Item = &'a str>) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(a, _)| a.to_string())
}

fn majority_by(
    samples: &[QASample],
    key: impl Fn(&QASample) -> String,
) -> BTreeMap<String, String> {
    let mut groups: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    for s in samples {
        groups.entry(key(s)).or_default().push(&s.answer);
    }
    groups
        .into_iter()
        .filter_map(|(k, v)| Some((k, majority(v.into_iter())?)))
        .collect()
}

impl PriorOnly {
    pub fn fit(train: &[QASample], mode: KeyMode) -> Result<Self> {
        let global = majority(train.iter().map(|s| s.answer.as_str()))
            .ok_or_else(|| Error::EmptyDataset("train split".into()))?;
        Ok(Self {
            mode,
            by_question: majority_by(train, QASample::question_key),
            by_type: majority_by(train, |s| s.question_type.clone()),
            global,
        })
    }

    /// With `exact_question` keys: exact question, then type, then global.
    /// With `question_type` keys the exact step is skipped.
    pub fn predict(&self, s: &QASample) -> (&str, PriorSource) {
        if self.mode == KeyMode::ExactQuestion {
            if let Some(a) = self.by_question.get(&s.question_key()) {
                return (a, PriorSource::ExactQuestion);
            }
        }
        if let Some(a) = self.by_type.get(&s.question_type) {
            return (a, PriorSource::QuestionType);
        }
        (&self.global, PriorSource::Global)
    }
}

pub fn prior_only_baseline(
    train: &[QASample],
    test: &[QASample],
    mode: KeyMode,
    mapping: &TypeMapping,
    dataset: &str,
) -> Result<EvalReport> {
    let p = PriorOnly::fit(train, mode)?;
    Ok(EvalReport::from_outcomes(
        "prior_only",
        dataset,
        test.iter().map(|s| {
            (
                mapping.row(&s.question_type).to_string(),
                p.predict(s).0 == s.answer,
            )
        }),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredAnswer {
    pub answer: String,
    pub score: f32,
}

/// Biased prediction, the bias, and what remains after subtracting it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Explanation {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub biased_prediction: String,
    pub debiased_prediction: String,
    pub te: Vec<ScoredAnswer>,
    pub nde: Vec<ScoredAnswer>,
    pub tie: Vec<ScoredAnswer>,
}

/// Indices of the `k` largest scores, best first; ties keep the lower index first.
pub fn top_k(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn explain(
    ck: &Checkpoint,
    s: &QASample,
    images: &ImageSource,
    k: usize,
) -> Result<Explanation> {
    let e = ck.encode(s, images)?;
    let scores: CausalScores = ck.model.scores(&e)?;
    let list = |v: &[f32]| {
        top_k(v, k)
            .into_iter()
            .map(|i| ScoredAnswer {
                answer: ck.answer(i).to_string(),
                score: v[i],
            })
            .collect()
    };
    Ok(Explanation {
        id: s.id.clone(),
        question: s.question_raw.clone(),
        answer: s.answer.clone(),
        biased_prediction: ck.answer(argmax(&scores.te)).to_string(),
        debiased_prediction: ck.answer(argmax(&scores.tie)).to_string(),
        te: list(&scores.te),
        nde: list(&scores.nde),
        tie: list(&scores.tie),
    })
}
