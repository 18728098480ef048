//! Label vocabulary and compound identity shared across the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabularyError {
    #[error("unknown toxicity type: {0:?}")]
    UnknownToxicityType(String),
    #[error("unknown verdict: {0:?}")]
    UnknownVerdict(String),
    #[error("label map for {compound_id} is missing {missing}")]
    IncompleteLabels { compound_id: String, missing: ToxicityType },
}

/// The six organ-level toxicity endpoints, in table-column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ToxicityType {
    Cardio,
    Hemato,
    Infertility,
    Liver,
    Pulmonary,
    Renal,
}

impl ToxicityType {
    pub const ALL: [ToxicityType; 6] = [
        ToxicityType::Cardio,
        ToxicityType::Hemato,
        ToxicityType::Infertility,
        ToxicityType::Liver,
        ToxicityType::Pulmonary,
        ToxicityType::Renal,
    ];

    /// Name used in prompts and in model output keys.
    pub fn display_name(self) -> &'static str {
        match self {
            ToxicityType::Cardio => "Cardiotoxicity",
            ToxicityType::Hemato => "Hematological Toxicity",
            ToxicityType::Infertility => "Infertility",
            ToxicityType::Liver => "Liver Toxicity",
            ToxicityType::Pulmonary => "Pulmonary Toxicity",
            ToxicityType::Renal => "Renal Toxicity",
        }
    }

    /// Column header form ("Cardio", "Hemato", ...).
    pub fn short_name(self) -> &'static str {
        match self {
            ToxicityType::Cardio => "Cardio",
            ToxicityType::Hemato => "Hemato",
            ToxicityType::Infertility => "Infertility",
            ToxicityType::Liver => "Liver",
            ToxicityType::Pulmonary => "Pulmonary",
            ToxicityType::Renal => "Renal",
        }
    }

    /// Lowercase key used in the prediction exchange format and label headers.
    pub fn key(self) -> &'static str {
        match self {
            ToxicityType::Cardio => "cardio",
            ToxicityType::Hemato => "hemato",
            ToxicityType::Infertility => "infertility",
            ToxicityType::Liver => "liver",
            ToxicityType::Pulmonary => "pulmonary",
            ToxicityType::Renal => "renal",
        }
    }
}

impl fmt::Display for ToxicityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

fn fold_key(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Case- and punctuation-insensitive lookup over canonical names, short
/// column names and a few common synonyms.
pub fn parse_toxicity_type(s: &str) -> Result<ToxicityType, VocabularyError> {
    let folded = fold_key(s);
    let t = match folded.as_str() {
        "cardiotoxicity" | "cardio" | "cardiac" | "cardiactoxicity" => ToxicityType::Cardio,
        "hematologicaltoxicity" | "hemato" | "hematotoxicity" | "hematological"
        | "haematologicaltoxicity" | "haemato" => ToxicityType::Hemato,
        "infertility" | "infertilitytoxicity" | "reproductivetoxicity" => {
            ToxicityType::Infertility
        }
        "livertoxicity" | "liver" | "hepatotoxicity" => ToxicityType::Liver,
        "pulmonarytoxicity" | "pulmonary" | "lungtoxicity" => ToxicityType::Pulmonary,
        "renaltoxicity" | "renal" | "nephrotoxicity" | "kidneytoxicity" => ToxicityType::Renal,
        _ => return Err(VocabularyError::UnknownToxicityType(s.to_string())),
    };
    Ok(t)
}

impl FromStr for ToxicityType {
    type Err = VocabularyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_toxicity_type(s)
    }
}

impl Serialize for ToxicityType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.key())
    }
}

impl<'de> Deserialize<'de> for ToxicityType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_toxicity_type(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryVerdict {
    Toxic,
    NonToxic,
}

impl BinaryVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            BinaryVerdict::Toxic => "Toxic",
            BinaryVerdict::NonToxic => "Non-toxic",
        }
    }

    pub fn is_toxic(self) -> bool {
        self == BinaryVerdict::Toxic
    }
}

impl fmt::Display for BinaryVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Accepts the model vocabulary (Toxic / Non-toxic) and the dataset
/// vocabulary (Yes / No).
pub fn parse_binary_verdict(s: &str) -> Result<BinaryVerdict, VocabularyError> {
    let normalized: String = s
        .trim()
        .to_lowercase()
        .split(|c: char| c.is_whitespace() || c == '-' || c == '_')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("");
    match normalized.as_str() {
        "toxic" | "yes" => Ok(BinaryVerdict::Toxic),
        "nontoxic" | "no" => Ok(BinaryVerdict::NonToxic),
        _ => Err(VocabularyError::UnknownVerdict(s.to_string())),
    }
}

impl FromStr for BinaryVerdict {
    type Err = VocabularyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_binary_verdict(s)
    }
}

impl Serialize for BinaryVerdict {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for BinaryVerdict {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse_binary_verdict(&s).map_err(serde::de::Error::custom)
    }
}

/// A drug with whatever structural representations are known for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Compound {
    pub id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smiles: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iupac_name: Option<String>,
    /// Chemical accession used to join against toxicogenomics exports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctd_id: Option<String>,
}

impl Compound {
    pub fn new(id: impl Into<String>, name: impl Into<String>) -> Self {
        Compound {
            id: id.into(),
            name: name.into(),
            smiles: None,
            iupac_name: None,
            ctd_id: None,
        }
    }

    pub fn has_structure(&self) -> bool {
        self.smiles.is_some() || self.iupac_name.is_some()
    }
}

pub type LabelMap = BTreeMap<ToxicityType, BinaryVerdict>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub compound_id: String,
    pub labels: LabelMap,
}

impl LabelRecord {
    /// Builds a record, rejecting label maps that do not cover all six types.
    pub fn new(compound_id: impl Into<String>, labels: LabelMap) -> Result<Self, VocabularyError> {
        let compound_id = compound_id.into();
        check_total(&compound_id, &labels)?;
        Ok(LabelRecord {
            compound_id,
            labels,
        })
    }

    pub fn get(&self, t: ToxicityType) -> BinaryVerdict {
        self.labels[&t]
    }

    pub fn any_toxic(&self) -> bool {
        self.labels.values().any(|v| v.is_toxic())
    }

    pub fn any_non_toxic(&self) -> bool {
        self.labels.values().any(|v| !v.is_toxic())
    }
}

pub(crate) fn check_total(compound_id: &str, labels: &LabelMap) -> Result<(), VocabularyError> {
    for t in ToxicityType::ALL {
        if !labels.contains_key(&t) {
            return Err(VocabularyError::IncompleteLabels {
                compound_id: compound_id.to_string(),
                missing: t,
            });
        }
    }
    Ok(())
}
