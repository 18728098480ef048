//! Readers for label tables, toxicogenomics association exports, GMT gene
//! sets and ranked gene lists, plus the train/test split.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{parse_binary_verdict, parse_toxicity_type, Compound, LabelMap, LabelRecord, ToxicityType};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}:{line}: bad verdict {value:?} in column {column:?}")]
    BadVerdict {
        path: PathBuf,
        line: usize,
        column: String,
        value: String,
    },
    #[error("{path}:{line}: duplicate compound id {id:?}")]
    DuplicateCompoundId { path: PathBuf, line: usize, id: String },
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: file contains no data rows")]
    EmptyFile { path: PathBuf },
    #[error("{path}: duplicate gene {gene:?}")]
    DuplicateGene { path: PathBuf, gene: String },
    #[error("{path}:{line}: non-numeric score {value:?}")]
    NonNumericScore {
        path: PathBuf,
        line: usize,
        value: String,
    },
    #[error("{path}: ranked list needs at least 2 entries, found {found}")]
    TooFewEntries { path: PathBuf, found: usize },
    #[error("no compound has biological context; test set would be empty")]
    EmptyTestSet,
}

fn read_to_string(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TermKind {
    Pathway,
    GoBiologicalProcess,
    GoMolecularFunction,
    GoCellularComponent,
}

impl TermKind {
    pub fn is_go(self) -> bool {
        !matches!(self, TermKind::Pathway)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub term_id: String,
    pub term_name: String,
    pub kind: TermKind,
    pub source: String,
}

impl Term {
    pub fn new(
        term_id: impl Into<String>,
        term_name: impl Into<String>,
        kind: TermKind,
        source: impl Into<String>,
    ) -> Self {
        Term {
            term_id: term_id.into(),
            term_name: term_name.into(),
            kind,
            source: source.into(),
        }
    }
}

/// Pathway and GO annotations attached to one compound.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BioContext {
    pub compound_id: String,
    pub pathways: Vec<Term>,
    pub go_terms: Vec<Term>,
    pub filtered: bool,
}

impl BioContext {
    pub fn empty(compound_id: impl Into<String>) -> Self {
        BioContext {
            compound_id: compound_id.into(),
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pathways.is_empty() && self.go_terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pathways.len() + self.go_terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = &Term> {
        self.pathways.iter().chain(self.go_terms.iter())
    }

    /// Appends a term to the list matching its kind, skipping duplicate ids.
    pub fn push(&mut self, term: Term) -> bool {
        let list = if term.kind.is_go() {
            &mut self.go_terms
        } else {
            &mut self.pathways
        };
        if list.iter().any(|t| t.term_id == term.term_id) {
            return false;
        }
        list.push(term);
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneSet {
    pub name: String,
    pub description: String,
    pub genes: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub gene: String,
    pub score: f64,
}

/// Genes sorted by descending score, ties broken by ascending symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Sorts the entries into canonical order. Fails on duplicates, non-finite
    /// scores or fewer than two entries.
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self, RankedListError> {
        if entries.len() < 2 {
            return Err(RankedListError::TooFew(entries.len()));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        let mut out = Vec::with_capacity(entries.len());
        for (gene, score) in entries {
            let gene = gene.trim().to_uppercase();
            if !score.is_finite() {
                return Err(RankedListError::NonFinite(gene));
            }
            if !seen.insert(gene.clone()) {
                return Err(RankedListError::Duplicate(gene));
            }
            out.push(RankedEntry { gene, score });
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.gene.cmp(&b.gene)));
        Ok(RankedList { entries: out })
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn genes(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.gene.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RankedListError {
    #[error("ranked list needs at least 2 entries, found {0}")]
    TooFew(usize),
    #[error("duplicate gene {0:?}")]
    Duplicate(String),
    #[error("non-finite score for gene {0:?}")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

/// Everything the label table carries: labels plus compound identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelFile {
    pub records: Vec<LabelRecord>,
    pub compounds: Vec<Compound>,
}

fn sniff_delimiter(first_line: &str) -> u8 {
    if first_line.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

/// Reads the label table and returns one record per data row.
pub fn load_labels(path: &Path) -> Result<Vec<LabelRecord>, IngestError> {
    Ok(load_label_file(path)?.records)
}

/// Reads the label table. Required columns are `compound_id`, `name` and one
/// column per toxicity type (header cells are matched with
/// [`parse_toxicity_type`]). Optional `smiles`, `iupac_name` and `ctd_id`
/// columns populate the [`Compound`].
pub fn load_label_file(path: &Path) -> Result<LabelFile, IngestError> {
    let text = read_to_string(path)?;
    let first = text.lines().next().unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(sniff_delimiter(first))
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let malformed = |line: usize, reason: String| IngestError::MalformedRow {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?.clone();

    let find = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)))
    };
    let missing = |column: &str| IngestError::MissingColumn {
        path: path.to_path_buf(),
        column: column.to_string(),
    };
    let id_col = find(&["compound_id", "id"]).ok_or_else(|| missing("compound_id"))?;
    let name_col = find(&["name", "drug_name", "generic_name"]).ok_or_else(|| missing("name"))?;
    let smiles_col = find(&["smiles"]);
    let iupac_col = find(&["iupac_name", "iupac"]);
    let ctd_col = find(&["ctd_id", "chemical_id"]);

    let mut type_cols: BTreeMap<ToxicityType, usize> = BTreeMap::new();
    for (i, h) in headers.iter().enumerate() {
        if i == id_col || i == name_col {
            continue;
        }
        if let Ok(t) = parse_toxicity_type(h) {
            type_cols.entry(t).or_insert(i);
        }
    }
    for t in ToxicityType::ALL {
        if !type_cols.contains_key(&t) {
            return Err(missing(t.short_name()));
        }
    }

    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    let mut compounds = Vec::new();
    for (row_idx, row) in reader.records().enumerate() {
        let line = row_idx + 2;
        let row = row.map_err(|e| malformed(line, e.to_string()))?;
        let cell = |i: usize| row.get(i).unwrap_or("").to_string();
        let id = cell(id_col);
        if id.is_empty() {
            return Err(malformed(line, "empty compound id".into()));
        }
        if seen.insert(id.clone(), line).is_some() {
            return Err(IngestError::DuplicateCompoundId {
                path: path.to_path_buf(),
                line,
                id,
            });
        }
        let mut labels = LabelMap::new();
        for (&t, &col) in &type_cols {
            let value = cell(col);
            let verdict = parse_binary_verdict(&value).map_err(|_| IngestError::BadVerdict {
                path: path.to_path_buf(),
                line,
                column: headers.get(col).unwrap_or_default().to_string(),
                value: value.clone(),
            })?;
            labels.insert(t, verdict);
        }
        let opt = |col: Option<usize>| col.map(cell).filter(|s| !s.is_empty());
        compounds.push(Compound {
            id: id.clone(),
            name: cell(name_col),
            smiles: opt(smiles_col),
            iupac_name: opt(iupac_col),
            ctd_id: opt(ctd_col),
        });
        records.push(LabelRecord { compound_id: id, labels });
    }
    Ok(LabelFile { records, compounds })
}

/// One chemical-term association row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CtdAssociation {
    pub compound_key: String,
    pub chemical_name: String,
    pub term: Term,
}

fn normalize_term_id(raw: &str) -> String {
    // Reactome accessions are self-identifying; drop the database tag.
    raw.strip_prefix("REACT:").unwrap_or(raw).to_string()
}

/// Reads the normalized four-column association layout:
/// `chemical_id<TAB>chemical_name<TAB>term_name<TAB>term_id`.
///
/// If the file instead carries a raw export `# Fields:` header, the raw
/// adapter ([`load_ctd_raw`]) is used.
pub fn load_ctd_associations(path: &Path, kind: TermKind) -> Result<Vec<CtdAssociation>, IngestError> {
    let text = read_to_string(path)?;
    if raw_fields_header(&text).is_some() {
        return parse_ctd_raw(path, &text, kind);
    }
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() < 4 {
            return Err(IngestError::MalformedRow {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let (key, chem, name, id) = (fields[0].trim(), fields[1].trim(), fields[2].trim(), fields[3].trim());
        if key.is_empty() || name.is_empty() || id.is_empty() {
            return Err(IngestError::MalformedRow {
                path: path.to_path_buf(),
                line: line_no,
                reason: "empty chemical id, term name or term id".into(),
            });
        }
        out.push(CtdAssociation {
            compound_key: key.to_string(),
            chemical_name: chem.to_string(),
            term: Term::new(normalize_term_id(id), name, kind, "CTD"),
        });
    }
    if out.is_empty() {
        return Err(IngestError::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    Ok(out)
}

/// Adapter for raw toxicogenomics exports (`CTD_chem_pathways_enriched`,
/// `CTD_chem_go_enriched` and friends). Those files announce their columns in
/// a `# Fields:` comment followed by a `# col1<TAB>col2...` line.
pub fn load_ctd_raw(path: &Path, kind: TermKind) -> Result<Vec<CtdAssociation>, IngestError> {
    let text = read_to_string(path)?;
    parse_ctd_raw(path, &text, kind)
}

fn raw_fields_header(text: &str) -> Option<(usize, Vec<String>)> {
    let mut lines = text.lines().enumerate();
    while let Some((_, line)) = lines.next() {
        if line.trim().eq_ignore_ascii_case("# fields:") {
            let (idx, cols) = lines.next()?;
            let cols: Vec<String> = cols
                .trim_start_matches('#')
                .trim()
                .split('\t')
                .map(|c| c.trim().to_string())
                .collect();
            return cols.iter().any(|c| c == "ChemicalID").then_some((idx, cols));
        }
        if !line.starts_with('#') {
            return None;
        }
    }
    None
}

fn parse_ctd_raw(path: &Path, text: &str, kind: TermKind) -> Result<Vec<CtdAssociation>, IngestError> {
    let (_, columns) = raw_fields_header(text).ok_or_else(|| IngestError::MissingColumn {
        path: path.to_path_buf(),
        column: "# Fields:".into(),
    })?;
    let col = |names: &[&str]| columns.iter().position(|c| names.contains(&c.as_str()));
    let missing = |c: &str| IngestError::MissingColumn {
        path: path.to_path_buf(),
        column: c.to_string(),
    };
    let id_col = col(&["ChemicalID"]).ok_or_else(|| missing("ChemicalID"))?;
    let chem_col = col(&["ChemicalName"]).ok_or_else(|| missing("ChemicalName"))?;
    let name_col = col(&["PathwayName", "GOTermName"]).ok_or_else(|| missing("PathwayName/GOTermName"))?;
    let term_col = col(&["PathwayID", "GOTermID"]).ok_or_else(|| missing("PathwayID/GOTermID"))?;
    let ontology_col = col(&["Ontology"]);

    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let get = |i: usize| fields.get(i).map(|s| s.trim()).unwrap_or("");
        let needed = [id_col, chem_col, name_col, term_col].into_iter().max().unwrap_or(0);
        if fields.len() <= needed {
            return Err(IngestError::MalformedRow {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: format!("expected at least {} fields, found {}", needed + 1, fields.len()),
            });
        }
        let row_kind = match ontology_col.map(get) {
            Some("Biological Process") => TermKind::GoBiologicalProcess,
            Some("Molecular Function") => TermKind::GoMolecularFunction,
            Some("Cellular Component") => TermKind::GoCellularComponent,
            _ => kind,
        };
        out.push(CtdAssociation {
            compound_key: get(id_col).to_string(),
            chemical_name: get(chem_col).to_string(),
            term: Term::new(normalize_term_id(get(term_col)), get(name_col), row_kind, "CTD"),
        });
    }
    if out.is_empty() {
        return Err(IngestError::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    Ok(out)
}

/// Collects the associations of one compound into a deduplicated context,
/// preserving first-seen order.
pub fn build_bio_context(associations: &[CtdAssociation], compound_key: &str) -> BioContext {
    let mut ctx = BioContext::empty(compound_key);
    for a in associations.iter().filter(|a| a.compound_key == compound_key) {
        ctx.push(a.term.clone());
    }
    ctx
}

/// Reads a GMT file: `name<TAB>description<TAB>gene...` per line.
pub fn parse_gmt(path: &Path) -> Result<Vec<GeneSet>, IngestError> {
    let text = read_to_string(path)?;
    parse_gmt_str(path, &text)
}

pub(crate) fn parse_gmt_str(path: &Path, text: &str) -> Result<Vec<GeneSet>, IngestError> {
    let mut sets = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let genes: BTreeSet<String> = fields
            .iter()
            .skip(2)
            .map(|g| g.trim().to_uppercase())
            .filter(|g| !g.is_empty())
            .collect();
        if fields.len() < 3 || genes.is_empty() || fields[0].trim().is_empty() {
            return Err(IngestError::MalformedRow {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: "gene set line needs a name, a description and at least one gene".into(),
            });
        }
        sets.push(GeneSet {
            name: fields[0].trim().to_string(),
            description: fields[1].trim().to_string(),
            genes,
        });
    }
    Ok(sets)
}

/// Reads a two-column `gene<TAB>score` file. A first line whose score field
/// does not parse as a number is treated as a header.
pub fn parse_rank_file(path: &Path) -> Result<RankedList, IngestError> {
    let text = read_to_string(path)?;
    let mut entries = Vec::new();
    let mut first_data_line = true;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(IngestError::MalformedRow {
                path: path.to_path_buf(),
                line: line_no,
                reason: "expected gene<TAB>score".into(),
            });
        }
        let parsed = fields[1].parse::<f64>().ok().filter(|s| s.is_finite());
        let is_header = first_data_line && fields[1].parse::<f64>().is_err();
        first_data_line = false;
        if is_header {
            continue;
        }
        let score = parsed.ok_or_else(|| IngestError::NonNumericScore {
            path: path.to_path_buf(),
            line: line_no,
            value: fields[1].to_string(),
        })?;
        entries.push((fields[0].to_string(), score));
    }
    RankedList::new(entries).map_err(|e| match e {
        RankedListError::TooFew(found) => IngestError::TooFewEntries {
            path: path.to_path_buf(),
            found,
        },
        RankedListError::Duplicate(gene) => IngestError::DuplicateGene {
            path: path.to_path_buf(),
            gene,
        },
        RankedListError::NonFinite(gene) => IngestError::NonNumericScore {
            path: path.to_path_buf(),
            line: 0,
            value: gene,
        },
    })
}

/// Test set = compounds with at least one pathway or GO term; everything else
/// trains. When `max_test` is set and the context-bearing pool is larger, a
/// seeded subsample is kept for test and the remainder moves to train.
pub fn split_dataset(
    labels: &[LabelRecord],
    contexts: &BTreeMap<String, BioContext>,
    seed: u64,
    max_test: Option<usize>,
) -> Result<DatasetSplit, IngestError> {
    let mut test: Vec<String> = Vec::new();
    let mut train = BTreeSet::new();
    for r in labels {
        let has_context = contexts
            .get(&r.compound_id)
            .is_some_and(|c| !c.is_empty());
        if has_context {
            test.push(r.compound_id.clone());
        } else {
            train.insert(r.compound_id.clone());
        }
    }
    if test.is_empty() {
        return Err(IngestError::EmptyTestSet);
    }
    test.sort();
    test.dedup();
    if let Some(max) = max_test.filter(|&m| m > 0 && m < test.len()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        test.shuffle(&mut rng);
        for id in test.drain(max..) {
            train.insert(id);
        }
    }
    Ok(DatasetSplit {
        train_ids: train,
        test_ids: test.into_iter().collect(),
    })
}
