use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use cotox_core::http::{HttpTransport, RetryPolicy};
use cotox_core::ingest::{load_ctd_associations, split_dataset, BioContext, CtdAssociation, TermKind};
use cotox_core::model::Compound;
use cotox_core::resolver::{FixtureTransport, ResolutionCache, Resolver, ResolverConfig, StructureProperty};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{PipelineConfig, ResolverMode};
use crate::env::Env;
use crate::error::{CliError, CliResult};
use crate::pipeline::{load_labels, par_map, resolver_min_interval, ContextFilter};
use crate::store::{ContextSource, ContextStore, STORE_VERSION};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareSummary {
    pub compounds: usize,
    pub test: usize,
    pub train: usize,
    pub fewshot_pool: usize,
    pub resolution_requests: usize,
    pub store_digest: String,
}

impl std::fmt::Display for PrepareSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "prepared {} compounds: {} test, {} train, {} few-shot candidates; {} structure lookups; store sha256 {}",
            self.compounds, self.test, self.train, self.fewshot_pool, self.resolution_requests, self.store_digest
        )
    }
}

/// Groups associations by chemical key once, so context assembly is linear
/// in the size of the export.
fn index_associations(assocs: &[CtdAssociation]) -> HashMap<&str, Vec<&CtdAssociation>> {
    let mut by_key: HashMap<&str, Vec<&CtdAssociation>> = HashMap::new();
    for a in assocs {
        by_key.entry(a.compound_key.as_str()).or_default().push(a);
    }
    by_key
}

fn ctd_inputs(cfg: &PipelineConfig) -> CliResult<Vec<CtdAssociation>> {
    if cfg.paths.ctd_pathways.is_none() && cfg.paths.ctd_go.is_none() {
        return Err(CliError::config("paths.ctd_pathways or paths.ctd_go must be set"));
    }
    let mut all = Vec::new();
    for (field, path, kind) in [
        ("ctd_pathways", &cfg.paths.ctd_pathways, TermKind::Pathway),
        ("ctd_go", &cfg.paths.ctd_go, TermKind::GoBiologicalProcess),
    ] {
        if path.is_none() {
            continue;
        }
        let path = PipelineConfig::require_file(field, path.as_ref())?;
        all.extend(load_ctd_associations(&path, kind).map_err(|e| CliError::data(e.to_string()))?);
    }
    Ok(all)
}

fn resolver(cfg: &PipelineConfig, env: &Env) -> CliResult<Option<Resolver>> {
    let transport: Arc<dyn HttpTransport> = match cfg.resolver.mode {
        ResolverMode::Off => return Ok(None),
        ResolverMode::Live => env.http.clone(),
        ResolverMode::Fixture => Arc::new(FixtureTransport::new(
            cfg.paths.pubchem_fixtures_dir.clone().expect("validated on load"),
            cfg.resolver.base_url.clone(),
        )),
    };
    let cache_path = cfg.paths.cache_dir.join("structures.json");
    let cache = ResolutionCache::open(&cache_path).map_err(|e| CliError::data(format!("{}: {e}", cache_path.display())))?;
    let config = ResolverConfig {
        base_url: cfg.resolver.base_url.clone(),
        retry: RetryPolicy::default(),
        max_in_flight: cfg.resolver.max_in_flight,
        min_interval: resolver_min_interval(cfg),
        not_found_ttl: chrono::Duration::days(cfg.resolver.not_found_ttl_days),
    };
    Ok(Some(Resolver::new(config, transport, cache)))
}

/// Builds contexts from the association exports, splits, filters the test
/// contexts, resolves missing structures and writes the context store.
/// The store is rebuilt from scratch, so `gsea-context` runs after this.
pub fn cmd_prepare(cfg: &PipelineConfig, env: &Env) -> CliResult<PrepareSummary> {
    let labels = load_labels(cfg)?;
    let assocs = ctd_inputs(cfg)?;
    let by_key = index_associations(&assocs);
    let store_path = cfg.context_store_path();

    let mut raw: BTreeMap<String, BioContext> = BTreeMap::new();
    for c in &labels.compounds {
        let key = c.ctd_id.as_deref().unwrap_or(&c.id);
        let mut ctx = BioContext::empty(c.id.clone());
        for a in by_key.get(key).into_iter().flatten() {
            ctx.push(a.term.clone());
        }
        if !ctx.is_empty() {
            raw.insert(c.id.clone(), ctx);
        }
    }

    let split = split_dataset(&labels.records, &raw, cfg.run.split_seed, cfg.run.max_test)
        .map_err(|e| CliError::data(e.to_string()))?;

    let filter = ContextFilter::new(cfg, env)?;
    let mut contexts = BTreeMap::new();
    let mut context_source = BTreeMap::new();
    let mut filter_records = BTreeMap::new();
    let test_ids: Vec<&String> = split.test_ids.iter().collect();
    let filtered = par_map(&test_ids, cfg.run.workers, |id| filter.apply(&raw[*id]));
    for (id, result) in test_ids.into_iter().zip(filtered) {
        let (ctx, rec) = result?;
        contexts.insert(id.clone(), ctx);
        context_source.insert(id.clone(), ContextSource::Ctd);
        filter_records.insert(id.clone(), rec);
    }

    let mut compounds: BTreeMap<String, Compound> =
        labels.compounds.iter().map(|c| (c.id.clone(), c.clone())).collect();
    let mut candidates: Vec<String> = split.train_ids.iter().cloned().collect();
    candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.run.fewshot_seed));
    candidates.truncate(cfg.run.fewshot_pool_size);
    candidates.sort();

    let needs: Vec<String> = split
        .test_ids
        .iter()
        .chain(candidates.iter())
        .filter(|id| {
            let c = &compounds[*id];
            c.smiles.is_none() || c.iupac_name.is_none()
        })
        .cloned()
        .collect();
    let mut resolution = BTreeMap::new();
    let mut resolution_requests = 0;
    if let Some(resolver) = resolver(cfg, env)? {
        let names: Vec<String> = needs.iter().map(|id| compounds[id].name.clone()).collect();
        let results = resolver.resolve_batch(
            &names,
            cfg.resolver.max_in_flight,
            &[StructureProperty::IupacName, StructureProperty::CanonicalSmiles],
        );
        for (id, result) in needs.iter().zip(results) {
            match result {
                Ok(rec) => {
                    let c = compounds.get_mut(id).expect("id from labels");
                    if c.iupac_name.is_none() {
                        c.iupac_name = rec.iupac_name.clone();
                    }
                    if c.smiles.is_none() {
                        c.smiles = rec.canonical_smiles.clone();
                    }
                    resolution.insert(id.clone(), rec.status);
                }
                Err(e) => log::warn!("{id}: structure lookup failed: {e}"),
            }
        }
        resolution_requests = resolver.requests_issued();
    }
    let fewshot_pool: Vec<String> = candidates.into_iter().filter(|id| compounds[id].has_structure()).collect();

    let store = ContextStore {
        version: STORE_VERSION,
        compounds,
        contexts,
        context_source,
        split,
        fewshot_pool,
        resolution,
        filter: filter_records,
    };
    store.save(&store_path)?;
    Ok(PrepareSummary {
        compounds: store.compounds.len(),
        test: store.split.test_ids.len(),
        train: store.split.train_ids.len(),
        fewshot_pool: store.fewshot_pool.len(),
        resolution_requests,
        store_digest: store.digest(),
    })
}
