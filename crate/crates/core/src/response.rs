//! Turns raw model text into validated per-organ verdicts.
//!
//! Extraction runs an ordered repair ladder and logs every repair it applies.
//! Reasoning text is read leniently; verdicts are read strictly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{parse_binary_verdict, parse_toxicity_type, BinaryVerdict, ToxicityType};

pub const WARN_CODE_FENCE: &str = "stripped code fence";
pub const WARN_BALANCED_OBJECT: &str = "extracted balanced object";
pub const WARN_TRAILING_COMMAS: &str = "removed trailing commas";
pub const WARN_MISMATCH: &str = "prediction/answer mismatch";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no JSON object could be extracted: {detail}")]
pub struct ExtractionFailure {
    pub detail: String,
}

/// Parsed JSON plus the repairs needed to get it.
#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub value: Value,
    pub warnings: Vec<String>,
}

fn parse_value(text: &str) -> Option<Value> {
    serde_json::from_str::<Value>(text.trim()).ok()
}

/// Removes Markdown code fences, keeping the content of the first fenced
/// block (or the text with fence lines dropped if the block is unterminated).
fn strip_code_fence(text: &str) -> Option<String> {
    let start = text.find("```")?;
    let after_ticks = &text[start + 3..];
    let body_start = after_ticks.find('\n').map(|i| i + 1).unwrap_or(after_ticks.len());
    let body = &after_ticks[body_start..];
    let inner = match body.find("```") {
        Some(end) => &body[..end],
        None => body,
    };
    Some(inner.trim().to_string())
}

/// Byte span of the longest `{...}` region whose braces balance, ignoring
/// braces inside JSON strings. Linear time.
pub fn longest_balanced_span(text: &str, open: u8, close: u8) -> Option<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut stack: Vec<usize> = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    let mut best: Option<(usize, usize)> = None;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        if b == b'"' && !stack.is_empty() {
            in_string = true;
        } else if b == open {
            stack.push(i);
        } else if b == close {
            if let Some(start) = stack.pop() {
                let len = i + 1 - start;
                if best.is_none_or(|(s, e)| e - s < len) {
                    best = Some((start, i + 1));
                }
            }
        }
    }
    best
}

/// Drops commas that directly precede `}` or `]` (whitespace allowed),
/// leaving string contents untouched.
pub fn remove_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        if c == '"' {
            in_string = true;
        } else if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Repair ladder: whole text, then fence stripping, then the longest balanced
/// object, then trailing-comma removal. Rungs are cumulative; each rung that
/// changes the candidate adds a warning.
pub fn extract_json(text: &str) -> Result<Extracted, ExtractionFailure> {
    let mut warnings = Vec::new();
    let mut candidate = text.trim().to_string();
    if let Some(v) = parse_value(&candidate) {
        return Ok(Extracted { value: v, warnings });
    }

    if let Some(stripped) = strip_code_fence(&candidate) {
        if stripped != candidate {
            candidate = stripped;
            warnings.push(WARN_CODE_FENCE.to_string());
            if let Some(v) = parse_value(&candidate) {
                return Ok(Extracted { value: v, warnings });
            }
        }
    }

    if let Some((s, e)) = longest_balanced_span(&candidate, b'{', b'}') {
        if e - s != candidate.len() {
            candidate = candidate[s..e].to_string();
            warnings.push(WARN_BALANCED_OBJECT.to_string());
            if let Some(v) = parse_value(&candidate) {
                return Ok(Extracted { value: v, warnings });
            }
        }
    }

    let repaired = remove_trailing_commas(&candidate);
    if repaired != candidate {
        warnings.push(WARN_TRAILING_COMMAS.to_string());
        if let Some(v) = parse_value(&repaired) {
            return Ok(Extracted { value: v, warnings });
        }
    }

    Err(ExtractionFailure {
        detail: if candidate.is_empty() {
            "empty response".to_string()
        } else {
            format!("after {} repair(s) the text still is not valid JSON", warnings.len())
        },
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningBlock {
    pub pathway: String,
    pub go_term: String,
    pub iupac_support: String,
    pub overall_mechanism: String,
}

impl ReasoningBlock {
    pub fn is_empty(&self) -> bool {
        self.pathway.is_empty()
            && self.go_term.is_empty()
            && self.iupac_support.is_empty()
            && self.overall_mechanism.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganVerdict {
    pub reasoning: ReasoningBlock,
    pub prediction: BinaryVerdict,
    /// Authoritative label for evaluation.
    pub answer: BinaryVerdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToxicityPrediction {
    pub compound_id: String,
    pub verdicts: BTreeMap<ToxicityType, OrganVerdict>,
    pub warnings: Vec<String>,
}

impl ToxicityPrediction {
    pub fn answer(&self, t: ToxicityType) -> BinaryVerdict {
        self.verdicts[&t].answer
    }

    /// Renders the prediction in the schema the model is asked to emit.
    pub fn to_model_json(&self) -> Value {
        let mut top = Map::new();
        for (t, v) in &self.verdicts {
            top.insert(
                t.display_name().to_string(),
                serde_json::json!({
                    "Reasoning": {
                        "Pathway": v.reasoning.pathway,
                        "GO Term": v.reasoning.go_term,
                        "IUPAC Support": v.reasoning.iupac_support,
                        "Overall Mechanism": v.reasoning.overall_mechanism,
                    },
                    "Prediction": v.prediction.as_str(),
                    "Answer": v.answer.as_str(),
                }),
            );
        }
        Value::Object(top)
    }

    pub fn to_normalized(&self) -> NormalizedPrediction {
        NormalizedPrediction {
            compound_id: self.compound_id.clone(),
            answers: self.verdicts.iter().map(|(t, v)| (*t, v.answer)).collect(),
            warnings: self.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailureStage {
    Extraction,
    Schema,
    Vocabulary,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{stage:?} failure: {detail}")]
pub struct ParseFailure {
    pub stage: FailureStage,
    pub detail: String,
}

impl ParseFailure {
    fn schema(detail: impl Into<String>) -> Self {
        ParseFailure {
            stage: FailureStage::Schema,
            detail: detail.into(),
        }
    }

    fn vocabulary(detail: impl Into<String>) -> Self {
        ParseFailure {
            stage: FailureStage::Vocabulary,
            detail: detail.into(),
        }
    }
}

pub type ParseOutcome = Result<ToxicityPrediction, ParseFailure>;

fn fold(key: &str) -> String {
    key.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str) -> Option<&'a Value> {
    let want = fold(name);
    obj.iter().find(|(k, _)| fold(k) == want).map(|(_, v)| v)
}

fn reasoning_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.trim().to_string(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn read_verdict(v: &Value, organ: ToxicityType, what: &str) -> Result<BinaryVerdict, ParseFailure> {
    match v {
        Value::String(s) => parse_binary_verdict(s)
            .map_err(|_| ParseFailure::vocabulary(format!("{organ}: {what} {s:?} is not Toxic/Non-toxic"))),
        other => Err(ParseFailure::vocabulary(format!(
            "{organ}: {what} must be a string, found {other}"
        ))),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Reasoning,
    AnswerOnly,
}

/// Parses a chain-of-thought response: every organ needs `Answer`, reasoning
/// sub-fields are optional with a warning when missing.
pub fn parse_prediction(json: &Value, compound_id: &str) -> ParseOutcome {
    parse_with(json, compound_id, Mode::Reasoning)
}

/// Parses a response from a strategy without reasoning blocks.
pub fn parse_zeroshot_prediction(json: &Value, compound_id: &str) -> ParseOutcome {
    parse_with(json, compound_id, Mode::AnswerOnly)
}

fn parse_with(json: &Value, compound_id: &str, mode: Mode) -> ParseOutcome {
    let top = json
        .as_object()
        .ok_or_else(|| ParseFailure::schema("top-level value is not an object"))?;
    let mut warnings = Vec::new();

    let mut organs: BTreeMap<ToxicityType, &Value> = BTreeMap::new();
    for (key, value) in top {
        match parse_toxicity_type(key) {
            Ok(t) => {
                if organs.contains_key(&t) {
                    warnings.push(format!("duplicate key {key:?} for {t} ignored"));
                } else {
                    organs.insert(t, value);
                }
            }
            Err(_) => warnings.push(format!("ignored unknown key {key:?}")),
        }
    }

    let mut verdicts = BTreeMap::new();
    for t in ToxicityType::ALL {
        let raw = organs
            .get(&t)
            .ok_or_else(|| ParseFailure::schema(t.display_name()))?;
        let merged;
        let obj: &Map<String, Value> = match raw {
            Value::Object(o) => o,
            Value::Array(items) if items.iter().all(Value::is_object) && !items.is_empty() => {
                let mut m = Map::new();
                for item in items {
                    if let Value::Object(o) = item {
                        for (k, v) in o {
                            m.entry(k.clone()).or_insert_with(|| v.clone());
                        }
                    }
                }
                warnings.push(format!("{t}: merged list of objects"));
                merged = m;
                &merged
            }
            Value::String(s) => {
                let answer = parse_binary_verdict(s)
                    .map_err(|_| ParseFailure::vocabulary(format!("{t}: verdict {s:?} is not Toxic/Non-toxic")))?;
                warnings.push(format!("{t}: bare verdict string accepted as Answer"));
                verdicts.insert(
                    t,
                    OrganVerdict {
                        reasoning: ReasoningBlock::default(),
                        prediction: answer,
                        answer,
                    },
                );
                continue;
            }
            Value::Number(_) | Value::Bool(_) => {
                return Err(ParseFailure::vocabulary(format!("{t}: verdict {raw} is not Toxic/Non-toxic")))
            }
            _ => return Err(ParseFailure::schema(format!("{t}: value is not an object"))),
        };

        let answer_raw = field(obj, "Answer").ok_or_else(|| ParseFailure::schema(format!("{t}: missing Answer")))?;
        let answer = read_verdict(answer_raw, t, "Answer")?;
        let prediction = match field(obj, "Prediction") {
            Some(p) => read_verdict(p, t, "Prediction")?,
            None => {
                if mode == Mode::Reasoning {
                    warnings.push(format!("{t}: missing Prediction"));
                }
                answer
            }
        };
        if prediction != answer {
            warnings.push(format!("{t}: {WARN_MISMATCH}"));
        }

        let reasoning = match (field(obj, "Reasoning"), mode) {
            (Some(Value::Object(r)), _) => {
                let mut block = ReasoningBlock::default();
                let slots: [(&str, &mut String); 4] = [
                    ("Pathway", &mut block.pathway),
                    ("GO Term", &mut block.go_term),
                    ("IUPAC Support", &mut block.iupac_support),
                    ("Overall Mechanism", &mut block.overall_mechanism),
                ];
                for (name, slot) in slots {
                    match field(r, name) {
                        Some(v) => *slot = reasoning_text(v),
                        None if mode == Mode::Reasoning => {
                            warnings.push(format!("{t}: reasoning field {name:?} missing"))
                        }
                        None => {}
                    }
                }
                block
            }
            (Some(Value::String(s)), _) => {
                if mode == Mode::Reasoning {
                    warnings.push(format!("{t}: reasoning given as plain text"));
                }
                ReasoningBlock {
                    overall_mechanism: s.trim().to_string(),
                    ..Default::default()
                }
            }
            (Some(_), Mode::Reasoning) | (None, Mode::Reasoning) => {
                warnings.push(format!("{t}: reasoning missing"));
                ReasoningBlock::default()
            }
            (_, Mode::AnswerOnly) => ReasoningBlock::default(),
        };

        verdicts.insert(
            t,
            OrganVerdict {
                reasoning,
                prediction,
                answer,
            },
        );
    }

    Ok(ToxicityPrediction {
        compound_id: compound_id.to_string(),
        verdicts,
        warnings,
    })
}

/// Extraction plus schema parsing in one step; extraction warnings are
/// carried into the prediction.
pub fn parse_response(text: &str, compound_id: &str, with_reasoning: bool) -> ParseOutcome {
    let extracted = extract_json(text).map_err(|e| ParseFailure {
        stage: FailureStage::Extraction,
        detail: e.detail,
    })?;
    let mut pred = if with_reasoning {
        parse_prediction(&extracted.value, compound_id)?
    } else {
        parse_zeroshot_prediction(&extracted.value, compound_id)?
    };
    let mut warnings = extracted.warnings;
    warnings.append(&mut pred.warnings);
    pred.warnings = warnings;
    Ok(pred)
}

/// Byte-level entry point for untrusted input; invalid UTF-8 is replaced.
pub fn parse_response_bytes(bytes: &[u8], compound_id: &str, with_reasoning: bool) -> ParseOutcome {
    parse_response(&String::from_utf8_lossy(bytes), compound_id, with_reasoning)
}

/// One line of the prediction exchange format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizedPrediction {
    pub compound_id: String,
    pub answers: BTreeMap<ToxicityType, BinaryVerdict>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ExchangeError {
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("line {line}: duplicate compound id {id:?}")]
    Duplicate { line: usize, id: String },
}

impl NormalizedPrediction {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("prediction serializes")
    }
}

/// Reads exchange JSONL, checking that each line covers all six types.
pub fn read_exchange_jsonl(text: &str) -> Result<Vec<NormalizedPrediction>, ExchangeError> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let p: NormalizedPrediction = serde_json::from_str(line).map_err(|e| ExchangeError::Invalid {
            line: line_no,
            message: e.to_string(),
        })?;
        if p.compound_id.trim().is_empty() {
            return Err(ExchangeError::Invalid {
                line: line_no,
                message: "empty compound_id".into(),
            });
        }
        if let Some(t) = ToxicityType::ALL.iter().find(|t| !p.answers.contains_key(t)) {
            return Err(ExchangeError::Invalid {
                line: line_no,
                message: format!("answers missing {:?}", t.key()),
            });
        }
        if !seen.insert(p.compound_id.clone()) {
            return Err(ExchangeError::Duplicate {
                line: line_no,
                id: p.compound_id,
            });
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_exchange_jsonl(preds: &[NormalizedPrediction]) -> String {
    let mut s = String::new();
    for p in preds {
        s.push_str(&p.to_json_line());
        s.push('\n');
    }
    s
}
