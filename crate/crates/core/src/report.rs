//! Markdown rendering of reasoning transcripts and score tables, and the run
//! manifest written next to every prediction file.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::eval::EvalReport;
use crate::model::ToxicityType;
use crate::prompt::{PromptStrategy, StructureFormat};
use crate::response::{ParseFailure, ToxicityPrediction};
use crate::util::round_half_up;

fn or_missing(s: &str) -> &str {
    if s.trim().is_empty() {
        "(not provided)"
    } else {
        s.trim()
    }
}

/// One `##` section per organ with the four reasoning fields and both
/// verdicts. Warnings are shown as a banner above the sections.
pub fn render_case_study(pred: &ToxicityPrediction) -> String {
    let mut md = format!("# Toxicity prediction: {}\n\n", pred.compound_id);
    for w in &pred.warnings {
        md.push_str(&format!("> **Warning:** {w}\n"));
    }
    if !pred.warnings.is_empty() {
        md.push('\n');
    }
    for t in ToxicityType::ALL {
        let Some(v) = pred.verdicts.get(&t) else { continue };
        let r = &v.reasoning;
        md.push_str(&format!("## {}\n\n", t.display_name()));
        md.push_str("**Reasoning**\n\n");
        md.push_str(&format!("- *Pathway*: {}\n", or_missing(&r.pathway)));
        md.push_str(&format!("- *GO Term*: {}\n", or_missing(&r.go_term)));
        md.push_str(&format!("- *IUPAC Support*: {}\n", or_missing(&r.iupac_support)));
        md.push_str(&format!("- *Overall Mechanism*: {}\n\n", or_missing(&r.overall_mechanism)));
        md.push_str(&format!(
            "**Prediction**: {}  \n**Answer**: {}\n\n",
            v.prediction.as_str(),
            v.answer.as_str()
        ));
    }
    md
}

/// Transcript for a compound whose response could not be parsed.
pub fn render_failure(compound_id: &str, failure: &ParseFailure, raw_text: &str) -> String {
    format!(
        "# Toxicity prediction: {compound_id}\n\n> **Parse failure ({:?}):** {}\n\n## Raw response\n\n```text\n{}\n```\n",
        failure.stage,
        failure.detail,
        raw_text.trim_end()
    )
}

/// Three-decimal cell text, rounded half up.
pub fn format_score(x: f64) -> String {
    format!("{:.3}", round_half_up(x, 3))
}

/// Methods as rows, the six types plus Average as columns. The largest value
/// in each column is bold; tied maxima are all bold.
pub fn render_comparison(rows: &[(String, EvalReport)]) -> String {
    let columns: Vec<Box<dyn Fn(&EvalReport) -> f64>> = ToxicityType::ALL
        .iter()
        .map(|&t| Box::new(move |r: &EvalReport| r.per_type_f1[&t]) as Box<dyn Fn(&EvalReport) -> f64>)
        .chain(std::iter::once(Box::new(|r: &EvalReport| r.macro_f1) as Box<dyn Fn(&EvalReport) -> f64>))
        .collect();
    let best: Vec<f64> = columns
        .iter()
        .map(|col| {
            rows.iter()
                .map(|(_, r)| round_half_up(col(r), 3))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();

    let mut md = String::from("| Method |");
    for t in ToxicityType::ALL {
        md.push_str(&format!(" {} |", t.short_name()));
    }
    md.push_str(" Average |\n|---|");
    md.push_str(&"---:|".repeat(columns.len()));
    md.push('\n');
    for (name, report) in rows {
        md.push_str(&format!("| {name} |"));
        for (col, top) in columns.iter().zip(&best) {
            let v = col(report);
            let cell = format_score(v);
            if round_half_up(v, 3) == *top {
                md.push_str(&format!(" **{cell}** |"));
            } else {
                md.push_str(&format!(" {cell} |"));
            }
        }
        md.push('\n');
    }
    md
}

/// Full report for one prediction set: the score row, counts, pooled
/// confusion matrices and per-fold scores when folds were used.
pub fn render_eval_report(method: &str, report: &EvalReport) -> String {
    let mut md = format!("# Evaluation: {method}\n\n");
    md.push_str(&render_comparison(&[(method.to_string(), report.clone())]));
    md.push_str(&format!(
        "\nCompounds scored: {}  \nParse failures (excluded): {}\n\n",
        report.n_compounds, report.n_parse_failures
    ));
    md.push_str("## Confusion counts (pooled)\n\n| Type | TP | FP | FN | TN | F1 (pooled) |\n|---|---:|---:|---:|---:|---:|\n");
    for t in ToxicityType::ALL {
        if let Some(c) = report.confusion.get(&t) {
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                t.short_name(),
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                format_score(crate::eval::f1(*c))
            ));
        }
    }
    if let Some(folds) = &report.per_fold_f1 {
        md.push_str("\n## Per-fold F1\n\n| Fold |");
        for t in ToxicityType::ALL {
            md.push_str(&format!(" {} |", t.short_name()));
        }
        md.push_str("\n|---|");
        md.push_str(&"---:|".repeat(ToxicityType::ALL.len()));
        md.push('\n');
        for (i, scores) in folds {
            md.push_str(&format!("| {} |", i + 1));
            for t in ToxicityType::ALL {
                md.push_str(&format!(" {} |", format_score(scores[&t])));
            }
            md.push('\n');
        }
    }
    md
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestOutcome {
    Parsed,
    ParseFailure,
    GatewayError,
    PromptError,
}

/// One issued (or attempted) chat request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub compound_id: String,
    /// Absent only when the prompt could not be built.
    pub fingerprint: Option<String>,
    pub prompt_hash: Option<String>,
    pub from_cache: bool,
    pub outcome: RequestOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub compounds: usize,
    pub requests: usize,
    pub cache_hits: usize,
    pub provider_calls: usize,
    pub predictions: usize,
    pub parse_failures: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub model_id: String,
    pub strategy: PromptStrategy,
    pub format: StructureFormat,
    pub config: serde_json::Value,
    pub template_digests: BTreeMap<String, String>,
    pub requests: Vec<RequestRecord>,
    pub counts: ManifestCounts,
}

impl RunManifest {
    pub fn parse_failure_count(&self) -> usize {
        self.requests
            .iter()
            .filter(|r| r.outcome == RequestOutcome::ParseFailure)
            .count()
    }
}
