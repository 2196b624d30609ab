//! Per-question-type answer distributions for train vs test, as CSV and SVG.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use super::SplitResult;
use crate::dataset::{csv_field, QASample, Split};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeDivergence {
    pub question_type: String,
    pub train_count: usize,
    pub test_count: usize,
    /// Total-variation distance; `None` when either side is empty.
    pub tv_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TypeHistogram {
    pub train: BTreeMap<String, usize>,
    pub test: BTreeMap<String, usize>,
}

fn proportions(h: &BTreeMap<String, usize>) -> BTreeMap<&str, f64> {
    let total: usize = h.values().sum();
    h.iter()
        .map(|(a, &c)| {
            (
                a.as_str(),
                if total == 0 {
                    0.0
                } else {
                    c as f64 / total as f64
                },
            )
        })
        .collect()
}

impl TypeHistogram {
    pub fn tv_distance(&self) -> Option<f64> {
        if self.train.is_empty() || self.test.is_empty() {
            return None;
        }
        let (p, q) = (proportions(&self.train), proportions(&self.test));
        let answers: BTreeSet<&str> = p.keys().chain(q.keys()).copied().collect();
        let l1: f64 = answers
            .iter()
            .map(|a| (p.get(a).unwrap_or(&0.0) - q.get(a).unwrap_or(&0.0)).abs())
            .sum();
        Some(0.5 * l1)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitReport {
    pub by_type: BTreeMap<String, TypeHistogram>,
}

/// Report for a split result over the samples it was computed from.
pub fn split_report(split: &SplitResult, samples: &[QASample]) -> SplitReport {
    let (train, test) = split.apply(samples);
    SplitReport::from_splits(&train, &test)
}

impl SplitReport {
    pub fn from_splits(train: &[QASample], test: &[QASample]) -> Self {
        let mut by_type: BTreeMap<String, TypeHistogram> = BTreeMap::new();
        for (samples, split) in [(train, Split::Train), (test, Split::Test)] {
            for s in samples {
                let h = by_type.entry(s.question_type.clone()).or_default();
                let side = if split == Split::Train {
                    &mut h.train
                } else {
                    &mut h.test
                };
                *side.entry(s.answer.clone()).or_default() += 1;
            }
        }
        Self { by_type }
    }

    pub fn divergence(&self) -> Vec<TypeDivergence> {
        self.by_type
            .iter()
            .map(|(t, h)| TypeDivergence {
                question_type: t.clone(),
                train_count: h.train.values().sum(),
                test_count: h.test.values().sum(),
                tv_distance: h.tv_distance(),
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "question_type,answer,train_count,train_prop,test_count,test_prop,tv_distance\n",
        );
        for (t, h) in &self.by_type {
            let (p, q) = (proportions(&h.train), proportions(&h.test));
            let tv = h
                .tv_distance()
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default();
            let answers: BTreeSet<&String> = h.train.keys().chain(h.test.keys()).collect();
            for a in answers {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{},{:.6},{}",
                    csv_field(t),
                    csv_field(a),
                    h.train.get(a).unwrap_or(&0),
                    p.get(a.as_str()).unwrap_or(&0.0),
                    h.test.get(a).unwrap_or(&0),
                    q.get(a.as_str()).unwrap_or(&0.0),
                    tv
                );
            }
        }
        out
    }

    /// Stacked answer-proportion bars, one train/test pair per question type.
    /// The eight most frequent answers get their own colour; the rest share grey.
    pub fn to_svg(&self) -> String {
        const PALETTE: [&str; 8] = [
            "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
        ];
        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for h in self.by_type.values() {
            for (a, c) in h.train.iter().chain(&h.test) {
                *freq.entry(a).or_default() += c;
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let colour: BTreeMap<&str, &str> = ranked
            .iter()
            .take(PALETTE.len())
            .zip(PALETTE)
            .map(|((a, _), c)| (*a, c))
            .collect();

        let (bar_w, gap, group_gap, plot_h, top, left) = (18.0, 4.0, 24.0, 200.0, 20.0, 40.0);
        let group_w = 2.0 * bar_w + gap;
        let width = left + self.by_type.len() as f64 * (group_w + group_gap) + 160.0;
        let height = top + plot_h + 70.0;
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="10">"#
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="#333"/>"##,
            top + plot_h
        );
        for (gi, (t, h)) in self.by_type.iter().enumerate() {
            let gx = left + 8.0 + gi as f64 * (group_w + group_gap);
            for (bi, (label, hist)) in [("tr", &h.train), ("te", &h.test)].into_iter().enumerate() {
                let x = gx + bi as f64 * (bar_w + gap);
                let mut y = top + plot_h;
                let mut segs: Vec<(&String, f64)> = proportions(hist)
                    .into_iter()
                    .map(|(a, p)| (hist.get_key_value(a).unwrap().0, p))
                    .collect();
                segs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
                for (a, p) in segs {
                    let hgt = p * plot_h;
                    y -= hgt;
                    let fill = colour.get(a.as_str()).copied().unwrap_or("#bab0ac");
                    let _ = writeln!(
                        svg,
                        r#"<rect x="{x:.1}" y="{y:.2}" width="{bar_w}" height="{hgt:.2}" fill="{fill}"><title>{} {}: {:.3}</title></rect>"#,
                        xml_escape(t),
                        xml_escape(a),
                        p
                    );
                }
                let _ = writeln!(
                    svg,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#,
                    x + bar_w / 2.0,
                    top + plot_h + 12.0
                );
            }
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                gx + group_w / 2.0,
                top + plot_h + 26.0,
                xml_escape(t)
            );
        }
        let lx = width - 150.0;
        for (i, (a, c)) in colour.iter().enumerate() {
            let ly = top + i as f64 * 14.0;
            let _ = writeln!(
                svg,
                r#"<rect x="{lx}" y="{ly}" width="10" height="10" fill="{c}"/>"#
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}">{}</text>"#,
                lx + 14.0,
                ly + 9.0,
                xml_escape(a)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
