use std::collections::BTreeMap;
use std::path::PathBuf;

use cotox_core::gsea::{enrich_to_context, enrichment_report_tsv, GseaError};
use cotox_core::ingest::{parse_gmt, parse_rank_file, DatasetSplit};

use crate::config::PipelineConfig;
use crate::env::Env;
use crate::error::{CliError, CliResult};
use crate::pipeline::{create_dir, file_stem, load_labels, write_file, ContextFilter};
use crate::store::{ContextSource, ContextStore, STORE_VERSION};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GseaCompoundSummary {
    pub compound_id: String,
    pub sets_scored: usize,
    pub terms_passing: usize,
    pub terms_kept: usize,
    pub report_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GseaContextSummary {
    pub compounds: Vec<GseaCompoundSummary>,
    pub store_digest: String,
}

impl std::fmt::Display for GseaContextSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.compounds {
            if c.terms_passing == 0 {
                writeln!(
                    f,
                    "{}: notice: no gene set passed the thresholds ({} scored); context is empty",
                    c.compound_id, c.sets_scored
                )?;
            } else {
                writeln!(
                    f,
                    "{}: {} of {} sets passed, {} kept after filtering; report {}",
                    c.compound_id,
                    c.terms_passing,
                    c.sets_scored,
                    c.terms_kept,
                    c.report_path.display()
                )?;
            }
        }
        write!(f, "store sha256 {}", self.store_digest)
    }
}

fn gsea_error(id: &str, e: GseaError) -> CliError {
    match e {
        GseaError::InvalidParams(_) => CliError::config(format!("gsea: {e}")),
        e => CliError::data(format!("{id}: {e}")),
    }
}

/// Derives context from each configured ranked signature, filters it and
/// stores it for the compound, which joins the test set. Enrichment tables
/// go to `<output_dir>/gsea/<compound_id>.tsv`.
pub fn cmd_gsea_context(cfg: &PipelineConfig, env: &Env, output_dir: PathBuf) -> CliResult<GseaContextSummary> {
    let gmt = PipelineConfig::require_file("gmt", cfg.paths.gmt.as_ref())?;
    if cfg.paths.rank_files.is_empty() {
        return Err(CliError::config("paths.rank_files is empty"));
    }
    for (id, path) in &cfg.paths.rank_files {
        PipelineConfig::require_file(&format!("rank_files.{id}"), Some(path))?;
    }
    let labels = load_labels(cfg)?;
    let sets = parse_gmt(&gmt).map_err(|e| CliError::data(e.to_string()))?;
    let params = cfg.gsea.params();
    let kind_map = cfg.gsea.kind_map()?;
    let filter = ContextFilter::new(cfg, env)?;

    let store_path = cfg.context_store_path();
    let mut store = match ContextStore::load(&store_path)? {
        Some(s) => s,
        None => ContextStore {
            version: STORE_VERSION,
            compounds: labels.compounds.iter().map(|c| (c.id.clone(), c.clone())).collect(),
            contexts: BTreeMap::new(),
            context_source: BTreeMap::new(),
            split: DatasetSplit {
                train_ids: labels.records.iter().map(|r| r.compound_id.clone()).collect(),
                test_ids: Default::default(),
            },
            fewshot_pool: Vec::new(),
            resolution: BTreeMap::new(),
            filter: BTreeMap::new(),
        },
    };

    let report_dir = output_dir.join("gsea");
    create_dir(&report_dir)?;
    let mut summaries = Vec::new();
    for (id, rank_path) in &cfg.paths.rank_files {
        if !store.compounds.contains_key(id) {
            return Err(CliError::data(format!("paths.rank_files.{id}: compound is not in the label table")));
        }
        let ranked = parse_rank_file(rank_path).map_err(|e| CliError::data(e.to_string()))?;
        let outcome = enrich_to_context(id, &ranked, &sets, &params, cfg.gsea.thresholds(), &kind_map)
            .map_err(|e| gsea_error(id, e))?;
        let report_path = report_dir.join(format!("{}.tsv", file_stem(id)));
        write_file(&report_path, enrichment_report_tsv(&outcome.results).as_bytes())?;
        let passing = outcome.context.len();
        let (ctx, record) = filter.apply(&outcome.context)?;
        if passing == 0 {
            log::info!("{id}: no gene set passed the thresholds; context is empty");
        } else {
            store.split.train_ids.remove(id);
            store.split.test_ids.insert(id.clone());
        }
        summaries.push(GseaCompoundSummary {
            compound_id: id.clone(),
            sets_scored: outcome.results.len(),
            terms_passing: passing,
            terms_kept: ctx.len(),
            report_path,
        });
        store.contexts.insert(id.clone(), ctx);
        store.context_source.insert(id.clone(), ContextSource::Gsea);
        store.filter.insert(id.clone(), record);
    }
    store.save(&store_path)?;
    Ok(GseaContextSummary {
        compounds: summaries,
        store_digest: store.digest(),
    })
}
