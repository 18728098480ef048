//! Reduces a raw biological context to toxicity-relevant terms, either by an
//! LLM judgement or by a keyword lexicon.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{fingerprint, ChatRequest, Gateway, GatewayError};
use crate::ingest::{BioContext, Term};
use crate::prompt::{render_template, render_terms, PromptError, TemplateStore};
use crate::response::{extract_json, longest_balanced_span, remove_trailing_commas};

const DEFAULT_LEXICON: &str = include_str!("../assets/toxicity_lexicon.txt");

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("keyword lexicon is empty")]
    EmptyLexicon,
    #[error("context for {0} is already filtered")]
    AlreadyFiltered(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("filter response for {compound_id} is not a JSON list of term ids: {detail}")]
    UnparseableFilterResponse { compound_id: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMethod {
    Llm,
    Keyword,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub term_id: String,
    pub kept: bool,
    pub rationale: Option<String>,
    pub method: FilterMethod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub context: BioContext,
    pub decisions: Vec<FilterDecision>,
    pub warnings: Vec<String>,
    /// Fingerprint of the chat request, when one was issued.
    pub request_fingerprint: Option<String>,
}

/// One lowercase substring per line; blank lines and `#` comments skipped.
pub fn parse_lexicon(text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    text.lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter(|l| seen.insert(l.clone()))
        .collect()
}

pub fn default_lexicon() -> Vec<String> {
    parse_lexicon(DEFAULT_LEXICON)
}

pub fn load_lexicon(path: &Path) -> std::io::Result<Vec<String>> {
    Ok(parse_lexicon(&std::fs::read_to_string(path)?))
}

fn rebuild(ctx: &BioContext, keep: impl Fn(&Term) -> bool) -> BioContext {
    let mut out = BioContext::empty(ctx.compound_id.clone());
    for t in ctx.terms().filter(|t| keep(t)) {
        out.push(t.clone());
    }
    out.filtered = true;
    out
}

/// Keeps terms whose lowercased name contains any lexicon entry (plain
/// substring match, so short entries match broadly).
pub fn filter_keyword(ctx: &BioContext, lexicon: &[String]) -> Result<FilterOutcome, FilterError> {
    if lexicon.is_empty() {
        return Err(FilterError::EmptyLexicon);
    }
    let mut decisions = Vec::with_capacity(ctx.len());
    let mut kept_ids = HashSet::new();
    for t in ctx.terms() {
        let name = t.term_name.to_lowercase();
        let hit = lexicon.iter().find(|e| name.contains(e.as_str()));
        if hit.is_some() {
            kept_ids.insert(t.term_id.clone());
        }
        decisions.push(FilterDecision {
            term_id: t.term_id.clone(),
            kept: hit.is_some(),
            rationale: Some(match hit {
                Some(e) => format!("matched {e:?}"),
                None => "no lexicon entry matched".to_string(),
            }),
            method: FilterMethod::Keyword,
        });
    }
    Ok(FilterOutcome {
        context: rebuild(ctx, |t| kept_ids.contains(&t.term_id)),
        decisions,
        warnings: Vec::new(),
        request_fingerprint: None,
    })
}

/// The single chat request that asks the model which terms to keep.
pub fn filter_request(ctx: &BioContext, model_id: &str, store: &TemplateStore) -> Result<ChatRequest, FilterError> {
    let system = store.get("filter.system.txt")?;
    let user = store.get("filter.user.txt")?;
    let mut values = std::collections::BTreeMap::new();
    values.insert("pathways", render_terms(&ctx.pathways));
    values.insert("go_terms", render_terms(&ctx.go_terms));
    values.insert("compound_id", ctx.compound_id.clone());
    let system = render_template("filter.system.txt", &system, &values)?;
    let user = render_template("filter.user.txt", &user, &values)?;
    Ok(ChatRequest::new(model_id, system, user))
}

fn id_list(value: &Value) -> Option<Vec<String>> {
    let arr = match value {
        Value::Array(a) => a,
        Value::Object(m) => m
            .iter()
            .find(|(k, v)| v.is_array() && matches!(k.to_lowercase().as_str(), "keep" | "kept" | "term_ids" | "ids"))
            .and_then(|(_, v)| v.as_array())?,
        _ => return None,
    };
    arr.iter()
        .map(|v| match v {
            Value::String(s) => Some(s.trim().to_string()),
            Value::Object(m) => m.get("term_id").or_else(|| m.get("id")).and_then(|s| s.as_str()).map(|s| s.trim().to_string()),
            _ => None,
        })
        .collect()
}

/// Reads the kept-id list, applying the object repair ladder and then a
/// bracket-balanced fallback for arrays wrapped in prose.
pub fn parse_filter_response(text: &str) -> Result<(Vec<String>, Vec<String>), String> {
    if let Ok(ex) = extract_json(text) {
        if let Some(ids) = id_list(&ex.value) {
            return Ok((ids, ex.warnings));
        }
    }
    let (s, e) = longest_balanced_span(text, b'[', b']').ok_or("no JSON array found")?;
    let slice = &text[s..e];
    let mut warnings = vec!["extracted balanced array".to_string()];
    let value: Value = match serde_json::from_str(slice) {
        Ok(v) => v,
        Err(_) => {
            warnings.push("removed trailing commas".to_string());
            serde_json::from_str(&remove_trailing_commas(slice)).map_err(|e| e.to_string())?
        }
    };
    id_list(&value).map(|ids| (ids, warnings)).ok_or_else(|| "array entries are not term ids".to_string())
}

/// Sends all terms of one compound in one request and keeps the ids the
/// model returns. Ids not present in the input are dropped with a warning.
pub fn filter_llm(
    ctx: &BioContext,
    gateway: &Gateway,
    model_id: &str,
    store: &TemplateStore,
) -> Result<FilterOutcome, FilterError> {
    if ctx.filtered {
        return Err(FilterError::AlreadyFiltered(ctx.compound_id.clone()));
    }
    if ctx.is_empty() {
        return Ok(FilterOutcome {
            context: rebuild(ctx, |_| false),
            decisions: Vec::new(),
            warnings: Vec::new(),
            request_fingerprint: None,
        });
    }
    let req = filter_request(ctx, model_id, store)?;
    let fp = fingerprint(&req).to_hex();
    let resp = gateway.complete(&req)?;
    let (ids, mut warnings) =
        parse_filter_response(&resp.text).map_err(|detail| FilterError::UnparseableFilterResponse {
            compound_id: ctx.compound_id.clone(),
            detail,
        })?;

    let known: BTreeSet<&str> = ctx.terms().map(|t| t.term_id.as_str()).collect();
    let mut kept = HashSet::new();
    for id in ids {
        if known.contains(id.as_str()) {
            kept.insert(id);
        } else {
            log::warn!("{}: filter returned unknown term id {id:?}", ctx.compound_id);
            warnings.push(format!("ignored unknown term id {id:?}"));
        }
    }
    let decisions = ctx
        .terms()
        .map(|t| FilterDecision {
            term_id: t.term_id.clone(),
            kept: kept.contains(&t.term_id),
            rationale: None,
            method: FilterMethod::Llm,
        })
        .collect();
    Ok(FilterOutcome {
        context: rebuild(ctx, |t| kept.contains(&t.term_id)),
        decisions,
        warnings,
        request_fingerprint: Some(fp),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{record_fixture, ReplayProvider};
    use crate::ingest::TermKind;
    use std::sync::Arc;

    fn ctx() -> BioContext {
        let mut c = BioContext::empty("D1");
        c.push(Term::new("R-HSA-109581", "Apoptosis", TermKind::Pathway, "CTD"));
        c.push(Term::new("R-HSA-111459", "Activation of caspases", TermKind::Pathway, "CTD"));
        c.push(Term::new("R-HSA-400253", "Circadian rhythm", TermKind::Pathway, "CTD"));
        c.push(Term::new("GO:0042752", "regulation of circadian rhythm", TermKind::GoBiologicalProcess, "CTD"));
        c
    }

    fn lex(entries: &[&str]) -> Vec<String> {
        entries.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn keyword_examples() {
        let out = filter_keyword(&ctx(), &lex(&["apoptosis", "caspase"])).unwrap();
        let names: Vec<&str> = out.context.terms().map(|t| t.term_name.as_str()).collect();
        assert_eq!(names, ["Apoptosis", "Activation of caspases"]);
        assert!(out.context.filtered);
        assert_eq!(out.decisions.len(), 4);
        assert_eq!(out.decisions[1].rationale.as_deref(), Some("matched \"caspase\""));

        let of = filter_keyword(&ctx(), &lex(&["of"])).unwrap();
        assert_eq!(of.context.len(), 2);
        assert!(matches!(filter_keyword(&ctx(), &[]), Err(FilterError::EmptyLexicon)));
    }

    #[test]
    fn keyword_is_idempotent_and_contractive() {
        let lexicon = default_lexicon();
        assert!(lexicon.len() >= 40);
        let once = filter_keyword(&ctx(), &lexicon).unwrap().context;
        let twice = filter_keyword(&once, &lexicon).unwrap().context;
        assert_eq!(once, twice);
        let before: BTreeSet<_> = ctx().terms().map(|t| t.term_id.clone()).collect();
        assert!(once.terms().all(|t| before.contains(&t.term_id)));
    }

    #[test]
    fn lexicon_parsing() {
        assert_eq!(parse_lexicon("# c\nApoptosis\n\n apoptosis \nCYP\n"), ["apoptosis", "cyp"]);
    }

    #[test]
    fn response_shapes() {
        assert_eq!(parse_filter_response("[\"a\", \"b\"]").unwrap().0, ["a", "b"]);
        let (ids, w) = parse_filter_response("Keep these: [\"a\",] thanks").unwrap();
        assert_eq!(ids, ["a"]);
        assert_eq!(w.len(), 2);
        assert_eq!(parse_filter_response("```json\n[\"x\"]\n```").unwrap().0, ["x"]);
        assert_eq!(parse_filter_response("{\"keep\": [\"y\"]}").unwrap().0, ["y"]);
        assert!(parse_filter_response("nothing relevant").is_err());
        assert!(parse_filter_response("[1, 2]").is_err());
    }

    #[test]
    fn llm_subset_enforcement() {
        let dir = tempfile::tempdir().unwrap();
        let store = TemplateStore::Embedded;
        let req = filter_request(&ctx(), "m", &store).unwrap();
        record_fixture(&req, "[\"R-HSA-109581\", \"R-HSA-999999\"]", dir.path()).unwrap();
        let gw = Gateway::new(Arc::new(ReplayProvider::new(dir.path())));
        let out = filter_llm(&ctx(), &gw, "m", &store).unwrap();
        let ids: Vec<&str> = out.context.terms().map(|t| t.term_id.as_str()).collect();
        assert_eq!(ids, ["R-HSA-109581"]);
        assert!(out.context.filtered);
        assert_eq!(out.decisions.len(), 4);
        assert_eq!(out.decisions.iter().filter(|d| d.kept).count(), 1);
        assert!(out.warnings.iter().any(|w| w.contains("R-HSA-999999")));
        assert_eq!(out.request_fingerprint, Some(fingerprint(&req).to_hex()));
    }

    #[test]
    fn llm_empty_context_issues_no_request() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::new(Arc::new(ReplayProvider::new(dir.path())));
        let out = filter_llm(&BioContext::empty("X"), &gw, "m", &TemplateStore::Embedded).unwrap();
        assert!(out.context.is_empty() && out.context.filtered);
        assert_eq!(gw.stats().requests, 0);
        let mut done = ctx();
        done.filtered = true;
        assert!(matches!(
            filter_llm(&done, &gw, "m", &TemplateStore::Embedded),
            Err(FilterError::AlreadyFiltered(_))
        ));
    }

    #[test]
    fn llm_replay_miss_propagates() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::new(Arc::new(ReplayProvider::new(dir.path())));
        let err = filter_llm(&ctx(), &gw, "m", &TemplateStore::Embedded).unwrap_err();
        assert!(matches!(err, FilterError::Gateway(GatewayError::ReplayMiss(_))));
    }
}
