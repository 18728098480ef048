//! Prompt rendering for every strategy and structure format.
//!
//! Wording lives in text templates (`<strategy>.system.txt`,
//! `<strategy>.user.txt`) with `{{placeholder}}` slots. The defaults are
//! compiled in; a template directory overrides them without a rebuild.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{BioContext, Term};
use crate::model::{Compound, LabelMap, LabelRecord, ToxicityType};
use crate::util::sha256_hex;

/// Few-shot prompts always carry this many worked examples.
pub const FEWSHOT_COUNT: usize = 4;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template asset {name:?} not found{}", .path.as_ref().map(|p| format!(" at {}", p.display())).unwrap_or_default())]
    MissingTemplateAsset { name: String, path: Option<PathBuf> },
    #[error("template {template:?} uses unknown placeholder {{{{{placeholder}}}}}")]
    UnknownPlaceholder { template: String, placeholder: String },
    #[error("template {template:?} has an unterminated placeholder")]
    UnterminatedPlaceholder { template: String },
    #[error("strategy {strategy} cannot be combined with structure format {format}")]
    IllegalCombination {
        strategy: PromptStrategy,
        format: StructureFormat,
    },
    #[error("strategy {strategy} needs {expected} few-shot example(s), got {found}")]
    WrongExampleCount {
        strategy: PromptStrategy,
        expected: usize,
        found: usize,
    },
    #[error("strategy {0} needs a biological context")]
    MissingContext(PromptStrategy),
    #[error("biological context for {0} has not been filtered")]
    UnfilteredContext(String),
    #[error("compound {compound_id} has no {format} structure")]
    MissingStructure {
        compound_id: String,
        format: StructureFormat,
    },
    #[error("example pool has {available} compound(s), {needed} needed")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("reading template {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptStrategy {
    #[serde(rename = "zeroshot")]
    ZeroShot,
    #[serde(rename = "fewshot")]
    FewShot,
    #[serde(rename = "cot")]
    Cot,
    #[serde(rename = "bioprocess-cot")]
    BioProcessCot,
    #[serde(rename = "cotox")]
    CoTox,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 5] = [
        PromptStrategy::ZeroShot,
        PromptStrategy::FewShot,
        PromptStrategy::Cot,
        PromptStrategy::BioProcessCot,
        PromptStrategy::CoTox,
    ];

    /// Template file stem and CLI spelling.
    pub fn key(self) -> &'static str {
        match self {
            PromptStrategy::ZeroShot => "zeroshot",
            PromptStrategy::FewShot => "fewshot",
            PromptStrategy::Cot => "cot",
            PromptStrategy::BioProcessCot => "bioprocess-cot",
            PromptStrategy::CoTox => "cotox",
        }
    }

    pub fn uses_structure(self) -> bool {
        self != PromptStrategy::BioProcessCot
    }

    pub fn uses_context(self) -> bool {
        matches!(self, PromptStrategy::BioProcessCot | PromptStrategy::CoTox)
    }

    /// Whether the expected output carries per-organ reasoning blocks.
    pub fn has_reasoning(self) -> bool {
        matches!(
            self,
            PromptStrategy::Cot | PromptStrategy::BioProcessCot | PromptStrategy::CoTox
        )
    }

    pub fn check_format(self, format: StructureFormat) -> Result<(), PromptError> {
        if self.uses_structure() == (format != StructureFormat::None) {
            Ok(())
        } else {
            Err(PromptError::IllegalCombination { strategy: self, format })
        }
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for PromptStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded = s.trim().to_lowercase().replace(['_', ' '], "-");
        PromptStrategy::ALL
            .into_iter()
            .find(|p| p.key() == folded || p.key().replace('-', "") == folded.replace('-', ""))
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureFormat {
    Smiles,
    Iupac,
    None,
}

impl StructureFormat {
    pub fn key(self) -> &'static str {
        match self {
            StructureFormat::Smiles => "smiles",
            StructureFormat::Iupac => "iupac",
            StructureFormat::None => "none",
        }
    }

    /// How the structure is introduced in prompts.
    pub fn label(self) -> &'static str {
        match self {
            StructureFormat::Smiles => "SMILES",
            StructureFormat::Iupac => "IUPAC name",
            StructureFormat::None => "none",
        }
    }

    pub fn structure_of(self, compound: &Compound) -> Option<&str> {
        let s = match self {
            StructureFormat::Smiles => compound.smiles.as_deref(),
            StructureFormat::Iupac => compound.iupac_name.as_deref(),
            StructureFormat::None => None,
        };
        s.map(str::trim).filter(|s| !s.is_empty())
    }
}

impl fmt::Display for StructureFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for StructureFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_lowercase().as_str() {
            "smiles" => Ok(StructureFormat::Smiles),
            "iupac" => Ok(StructureFormat::Iupac),
            "none" => Ok(StructureFormat::None),
            _ => Err(format!("unknown structure format {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub compound: Compound,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub strategy: PromptStrategy,
    pub format: StructureFormat,
    pub compound_id: String,
    pub content_hash: u64,
}

impl PromptBundle {
    pub fn content_hash_hex(&self) -> String {
        format!("{:016x}", self.content_hash)
    }
}

/// Stable 64-bit digest of a system/user pair (length-prefixed so the split
/// point matters).
pub fn content_hash(system_text: &str, user_text: &str) -> u64 {
    let mut h = Sha256::new();
    for part in [system_text, user_text] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

const EMBEDDED: &[(&str, &str)] = &[
    ("zeroshot.system.txt", include_str!("../assets/templates/zeroshot.system.txt")),
    ("zeroshot.user.txt", include_str!("../assets/templates/zeroshot.user.txt")),
    ("fewshot.system.txt", include_str!("../assets/templates/fewshot.system.txt")),
    ("fewshot.user.txt", include_str!("../assets/templates/fewshot.user.txt")),
    ("cot.system.txt", include_str!("../assets/templates/cot.system.txt")),
    ("cot.user.txt", include_str!("../assets/templates/cot.user.txt")),
    ("bioprocess-cot.system.txt", include_str!("../assets/templates/bioprocess-cot.system.txt")),
    ("bioprocess-cot.user.txt", include_str!("../assets/templates/bioprocess-cot.user.txt")),
    ("cotox.system.txt", include_str!("../assets/templates/cotox.system.txt")),
    ("cotox.user.txt", include_str!("../assets/templates/cotox.user.txt")),
    ("filter.system.txt", include_str!("../assets/templates/filter.system.txt")),
    ("filter.user.txt", include_str!("../assets/templates/filter.user.txt")),
];

/// Where template text comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplateStore {
    Embedded,
    Dir(PathBuf),
}

impl TemplateStore {
    pub fn names() -> impl Iterator<Item = &'static str> {
        EMBEDDED.iter().map(|(n, _)| *n)
    }

    pub fn get(&self, name: &str) -> Result<String, PromptError> {
        match self {
            TemplateStore::Embedded => EMBEDDED
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.to_string())
                .ok_or_else(|| PromptError::MissingTemplateAsset {
                    name: name.to_string(),
                    path: None,
                }),
            TemplateStore::Dir(dir) => {
                let path = dir.join(name);
                match std::fs::read_to_string(&path) {
                    Ok(t) => Ok(t),
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(PromptError::MissingTemplateAsset {
                        name: name.to_string(),
                        path: Some(path),
                    }),
                    Err(source) => Err(PromptError::Io { path, source }),
                }
            }
        }
    }

    /// SHA-256 of each named template, for run manifests.
    pub fn digests<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<BTreeMap<String, String>, PromptError> {
        names
            .into_iter()
            .map(|n| Ok((n.to_string(), sha256_hex(self.get(n)?.as_bytes()))))
            .collect()
    }

    /// Writes the compiled-in templates to `dir` as a starting point for edits.
    pub fn export_embedded(dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, text) in EMBEDDED {
            std::fs::write(dir.join(name), text)?;
        }
        Ok(())
    }
}

pub fn template_names_for(strategy: PromptStrategy) -> [String; 2] {
    [
        format!("{}.system.txt", strategy.key()),
        format!("{}.user.txt", strategy.key()),
    ]
}

/// Replaces `{{name}}` slots in one pass; substituted text is not rescanned.
pub fn render_template(name: &str, template: &str, values: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or_else(|| PromptError::UnterminatedPlaceholder {
            template: name.to_string(),
        })?;
        let key = after[..end].trim();
        let value = values.get(key).ok_or_else(|| PromptError::UnknownPlaceholder {
            template: name.to_string(),
            placeholder: key.to_string(),
        })?;
        out.push_str(value);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn render_terms(terms: &[Term]) -> String {
    if terms.is_empty() {
        return "- (none)".to_string();
    }
    terms
        .iter()
        .map(|t| format!("- {} ({})", t.term_name, t.term_id))
        .collect::<Vec<_>>()
        .join("\n")
}

fn toxicity_list() -> String {
    ToxicityType::ALL
        .iter()
        .map(|t| format!("- {}", t.display_name()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The JSON layout the model must return, written out for all six organs.
pub fn output_schema(with_reasoning: bool) -> String {
    let mut s = String::from("{\n");
    let n = ToxicityType::ALL.len();
    for (i, t) in ToxicityType::ALL.iter().enumerate() {
        let comma = if i + 1 < n { "," } else { "" };
        if with_reasoning {
            s.push_str(&format!(
                "  \"{}\": {{\n    \"Reasoning\": {{\n      \"Pathway\": \"<step 1>\",\n      \"GO Term\": \"<step 2>\",\n      \"IUPAC Support\": \"<step 3>\",\n      \"Overall Mechanism\": \"<step 4>\"\n    }},\n    \"Prediction\": \"Toxic or Non-toxic\",\n    \"Answer\": \"Toxic or Non-toxic\"\n  }}{comma}\n",
                t.display_name()
            ));
        } else {
            s.push_str(&format!(
                "  \"{}\": {{\"Answer\": \"Toxic or Non-toxic\"}}{comma}\n",
                t.display_name()
            ));
        }
    }
    s.push('}');
    s
}

/// One-line answer object in the zero-shot layout, used for example outputs.
pub fn answer_json(labels: &LabelMap) -> String {
    let parts: Vec<String> = ToxicityType::ALL
        .iter()
        .filter_map(|t| {
            labels
                .get(t)
                .map(|v| format!("\"{}\": {{\"Answer\": \"{}\"}}", t.display_name(), v.as_str()))
        })
        .collect();
    format!("{{{}}}", parts.join(", "))
}

fn structure(compound: &Compound, format: StructureFormat) -> Result<&str, PromptError> {
    format.structure_of(compound).ok_or_else(|| PromptError::MissingStructure {
        compound_id: compound.id.clone(),
        format,
    })
}

fn render_examples(examples: &[FewShotExample], format: StructureFormat) -> Result<String, PromptError> {
    let mut blocks = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        blocks.push(format!(
            "Example {}\nCompound ({}): {}\nOutput: {}",
            i + 1,
            format.label(),
            structure(&ex.compound, format)?,
            answer_json(&ex.labels)
        ));
    }
    Ok(blocks.join("\n\n"))
}

pub fn build_system_prompt(store: &TemplateStore, strategy: PromptStrategy) -> Result<String, PromptError> {
    let [name, _] = template_names_for(strategy);
    let text = store.get(&name)?;
    render_template(&name, &text, &BTreeMap::new())
}

pub fn build_user_prompt(
    store: &TemplateStore,
    compound: &Compound,
    ctx: Option<&BioContext>,
    strategy: PromptStrategy,
    format: StructureFormat,
    examples: Option<&[FewShotExample]>,
) -> Result<String, PromptError> {
    strategy.check_format(format)?;
    let examples = examples.unwrap_or(&[]);
    let expected = if strategy == PromptStrategy::FewShot { FEWSHOT_COUNT } else { 0 };
    if examples.len() != expected {
        return Err(PromptError::WrongExampleCount {
            strategy,
            expected,
            found: examples.len(),
        });
    }

    let mut values: BTreeMap<&str, String> = BTreeMap::new();
    values.insert("toxicity_types", toxicity_list());
    values.insert("output_schema", output_schema(strategy.has_reasoning()));
    if strategy.uses_structure() {
        values.insert("structure_label", format.label().to_string());
        values.insert("structure", structure(compound, format)?.to_string());
    }
    if strategy.uses_context() {
        let ctx = ctx.ok_or(PromptError::MissingContext(strategy))?;
        if !ctx.filtered {
            return Err(PromptError::UnfilteredContext(ctx.compound_id.clone()));
        }
        values.insert("pathways", render_terms(&ctx.pathways));
        values.insert("go_terms", render_terms(&ctx.go_terms));
    }
    if strategy == PromptStrategy::FewShot {
        values.insert("examples", render_examples(examples, format)?);
    }

    let [_, name] = template_names_for(strategy);
    let text = store.get(&name)?;
    render_template(&name, &text, &values)
}

pub fn build_prompt(
    store: &TemplateStore,
    compound: &Compound,
    ctx: Option<&BioContext>,
    strategy: PromptStrategy,
    format: StructureFormat,
    examples: Option<&[FewShotExample]>,
) -> Result<PromptBundle, PromptError> {
    let user_text = build_user_prompt(store, compound, ctx, strategy, format, examples)?;
    let system_text = build_system_prompt(store, strategy)?;
    Ok(PromptBundle {
        content_hash: content_hash(&system_text, &user_text),
        system_text,
        user_text,
        strategy,
        format,
        compound_id: compound.id.clone(),
    })
}

/// Seeded choice of `k` examples from a training pool. The pool is put in id
/// order first, so caller ordering does not matter. When the pool allows it,
/// the selection holds at least one example with a Toxic label and one with
/// a Non-toxic label.
pub fn select_fewshot_examples(
    pool: &[(Compound, LabelRecord)],
    k: usize,
    seed: u64,
) -> Result<Vec<FewShotExample>, PromptError> {
    if pool.len() < k {
        return Err(PromptError::PoolTooSmall {
            needed: k,
            available: pool.len(),
        });
    }
    let mut order: Vec<&(Compound, LabelRecord)> = pool.iter().collect();
    order.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut chosen, mut rest) = {
        let rest = order.split_off(k);
        (order, rest)
    };

    for wants_toxic in [true, false] {
        let has = |r: &LabelRecord| if wants_toxic { r.any_toxic() } else { r.any_non_toxic() };
        if k == 0 || chosen.iter().any(|(_, r)| has(r)) {
            continue;
        }
        let Some(pos) = rest.iter().position(|(_, r)| has(r)) else {
            continue;
        };
        // Replace the last chosen entry that is not the only carrier of the
        // other polarity.
        let other = |r: &LabelRecord| if wants_toxic { r.any_non_toxic() } else { r.any_toxic() };
        let carriers = chosen.iter().filter(|(_, r)| other(r)).count();
        let slot = (0..chosen.len())
            .rev()
            .find(|&i| !other(&chosen[i].1) || carriers > 1)
            .unwrap_or(chosen.len() - 1);
        let incoming = rest.remove(pos);
        let outgoing = std::mem::replace(&mut chosen[slot], incoming);
        rest.push(outgoing);
    }

    Ok(chosen
        .into_iter()
        .map(|(c, r)| FewShotExample {
            compound: c.clone(),
            labels: r.labels.clone(),
        })
        .collect())
}
