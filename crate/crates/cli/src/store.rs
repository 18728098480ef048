//! The context store: everything `prepare` and `gsea-context` produce and
//! `predict` consumes, in one deterministic JSON file.

use std::collections::BTreeMap;
use std::path::Path;

use cotox_core::filter::{FilterDecision, FilterMethod};
use cotox_core::ingest::{BioContext, DatasetSplit};
use cotox_core::model::Compound;
use cotox_core::resolver::ResolutionStatus;
use cotox_core::util::{sha256_hex, write_atomic};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const STORE_VERSION: u32 = 1;

/// Where a compound's context came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextSource {
    Ctd,
    Gsea,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRecord {
    pub method: FilterMethod,
    pub terms_before: usize,
    pub terms_after: usize,
    pub decisions: Vec<FilterDecision>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextStore {
    pub version: u32,
    pub compounds: BTreeMap<String, Compound>,
    /// Filtered contexts, keyed by compound id.
    pub contexts: BTreeMap<String, BioContext>,
    pub context_source: BTreeMap<String, ContextSource>,
    pub split: DatasetSplit,
    /// Training compounds with a structure, eligible as few-shot examples.
    pub fewshot_pool: Vec<String>,
    /// Structure lookup outcome per compound that needed one.
    pub resolution: BTreeMap<String, ResolutionStatus>,
    pub filter: BTreeMap<String, FilterRecord>,
}

impl ContextStore {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("store serializes");
        s.push('\n');
        s
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::data(format!("creating {}: {e}", parent.display())))?;
        }
        write_atomic(path, self.to_json().as_bytes())
            .map_err(|e| CliError::data(format!("writing {}: {e}", path.display())))
    }

    /// `Ok(None)` when the file does not exist.
    pub fn load(path: &Path) -> CliResult<Option<Self>> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(CliError::data(format!("reading {}: {e}", path.display()))),
        };
        let store: ContextStore = serde_json::from_str(&text)
            .map_err(|e| CliError::data(format!("{}: invalid context store: {e}", path.display())))?;
        if store.version != STORE_VERSION {
            return Err(CliError::data(format!(
                "{}: context store version {} (expected {STORE_VERSION}); rerun `cotox prepare`",
                path.display(),
                store.version
            )));
        }
        Ok(Some(store))
    }
}
