use std::collections::BTreeMap;
use std::path::PathBuf;

use cotox_core::gateway::{fingerprint, ChatRequest, Gateway};
use cotox_core::ingest::BioContext;
use cotox_core::model::{Compound, LabelRecord};
use cotox_core::prompt::{
    build_prompt, select_fewshot_examples, template_names_for, FewShotExample, PromptStrategy, StructureFormat,
    TemplateStore, FEWSHOT_COUNT,
};
use cotox_core::report::{render_case_study, render_failure, ManifestCounts, RequestOutcome, RequestRecord, RunManifest};
use cotox_core::response::{parse_response, write_exchange_jsonl, NormalizedPrediction};

use crate::config::PipelineConfig;
use crate::env::Env;
use crate::error::{CliError, CliResult};
use crate::pipeline::{build_gateway, create_dir, file_stem, gateway_error, load_labels, par_map, template_store, write_file};
use crate::store::ContextStore;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictSummary {
    pub run_dir: PathBuf,
    pub requests: usize,
    pub predictions: usize,
    pub parse_failures: usize,
    pub errors: usize,
}

impl std::fmt::Display for PredictSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} predictions, {} parse failures, {} errors over {} compounds; run directory {}",
            self.predictions,
            self.parse_failures,
            self.errors,
            self.requests,
            self.run_dir.display()
        )
    }
}

/// Method label used in reports, e.g. `cotox-iupac` or `bioprocess-cot`.
pub fn method_name(strategy: PromptStrategy, format: StructureFormat) -> String {
    if strategy.uses_structure() {
        format!("{}-{}", strategy.key(), format.key())
    } else {
        strategy.key().to_string()
    }
}

struct Job<'a> {
    compound: &'a Compound,
    context: Option<&'a BioContext>,
}

struct JobResult {
    record: RequestRecord,
    prediction: Option<NormalizedPrediction>,
    transcript: Option<String>,
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    strategy: PromptStrategy,
    format: StructureFormat,
    templates: &'a TemplateStore,
    examples: Option<&'a [FewShotExample]>,
    gateway: &'a Gateway,
}

impl Runner<'_> {
    fn run(&self, job: &Job) -> CliResult<JobResult> {
        let id = job.compound.id.clone();
        let bundle = match build_prompt(self.templates, job.compound, job.context, self.strategy, self.format, self.examples) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("{id}: prompt not built: {e}");
                return Ok(JobResult {
                    record: RequestRecord {
                        compound_id: id,
                        fingerprint: None,
                        prompt_hash: None,
                        from_cache: false,
                        outcome: RequestOutcome::PromptError,
                        detail: Some(e.to_string()),
                        warnings: Vec::new(),
                    },
                    prediction: None,
                    transcript: None,
                });
            }
        };
        let mut req = ChatRequest::new(self.cfg.provider.model_id.clone(), bundle.system_text.clone(), bundle.user_text.clone());
        req.temperature = self.cfg.provider.temperature;
        req.max_output_tokens = self.cfg.provider.max_output_tokens;
        let mut record = RequestRecord {
            compound_id: id.clone(),
            fingerprint: Some(fingerprint(&req).to_hex()),
            prompt_hash: Some(bundle.content_hash_hex()),
            from_cache: false,
            outcome: RequestOutcome::GatewayError,
            detail: None,
            warnings: Vec::new(),
        };
        let resp = match self.gateway.complete(&req) {
            Ok(r) => r,
            Err(e) if e.is_auth() => return Err(gateway_error(e)),
            Err(e) => {
                log::warn!("{id}: request failed: {e}");
                record.detail = Some(e.to_string());
                return Ok(JobResult {
                    record,
                    prediction: None,
                    transcript: None,
                });
            }
        };
        record.from_cache = resp.from_cache;
        Ok(match parse_response(&resp.text, &id, self.strategy.has_reasoning()) {
            Ok(pred) => {
                record.outcome = RequestOutcome::Parsed;
                record.warnings = pred.warnings.clone();
                JobResult {
                    record,
                    transcript: Some(render_case_study(&pred)),
                    prediction: Some(pred.to_normalized()),
                }
            }
            Err(failure) => {
                log::warn!("{id}: response not parsed: {failure}");
                record.outcome = RequestOutcome::ParseFailure;
                record.detail = Some(failure.to_string());
                JobResult {
                    record,
                    transcript: Some(render_failure(&id, &failure, &resp.text)),
                    prediction: None,
                }
            }
        })
    }
}

fn fewshot_examples(
    cfg: &PipelineConfig,
    store: Option<&ContextStore>,
    labels: &BTreeMap<String, LabelRecord>,
    format: StructureFormat,
) -> CliResult<Vec<FewShotExample>> {
    let store = store.ok_or_else(|| {
        CliError::data(format!(
            "few-shot prompting draws examples from the context store; run `cotox prepare` first ({} not found)",
            cfg.context_store_path().display()
        ))
    })?;
    let pool: Vec<(Compound, LabelRecord)> = store
        .fewshot_pool
        .iter()
        .filter_map(|id| {
            let c = store.compounds.get(id)?;
            format.structure_of(c)?;
            Some((c.clone(), labels.get(id)?.clone()))
        })
        .collect();
    select_fewshot_examples(&pool, FEWSHOT_COUNT, cfg.run.fewshot_seed).map_err(|e| CliError::data(e.to_string()))
}

/// Prompts the model once per test compound and writes predictions,
/// transcripts and the run manifest into `<output_dir>/<run_id>/`.
pub fn cmd_predict(cfg: &PipelineConfig, env: &Env, output_dir: PathBuf, run_id: Option<String>) -> CliResult<PredictSummary> {
    let started_at = env.now();
    let strategy = cfg.run.strategy;
    let format = cfg.run.format;
    strategy.check_format(format).map_err(|e| CliError::config(e.to_string()))?;
    let labels = load_labels(cfg)?;
    let label_map: BTreeMap<String, LabelRecord> =
        labels.records.iter().map(|r| (r.compound_id.clone(), r.clone())).collect();
    let store_path = cfg.context_store_path();
    let store = ContextStore::load(&store_path)?;
    if strategy.uses_context() && store.is_none() {
        return Err(CliError::data(format!(
            "strategy {strategy} needs biological context but the context store {} does not exist; run `cotox prepare` first",
            store_path.display()
        )));
    }

    // Without a store the structure-only strategies score every labeled compound.
    let fallback: BTreeMap<String, Compound>;
    let (compounds, test_ids): (&BTreeMap<String, Compound>, Vec<String>) = match &store {
        Some(s) => (&s.compounds, s.split.test_ids.iter().cloned().collect()),
        None => {
            fallback = labels.compounds.iter().map(|c| (c.id.clone(), c.clone())).collect();
            (&fallback, fallback.keys().cloned().collect())
        }
    };
    let jobs: Vec<Job> = test_ids
        .iter()
        .map(|id| {
            let compound = compounds
                .get(id)
                .ok_or_else(|| CliError::data(format!("test compound {id} is missing from the context store")))?;
            Ok(Job {
                compound,
                context: store.as_ref().and_then(|s| s.contexts.get(id)),
            })
        })
        .collect::<CliResult<_>>()?;

    let examples = if strategy == PromptStrategy::FewShot {
        Some(fewshot_examples(cfg, store.as_ref(), &label_map, format)?)
    } else {
        None
    };
    let templates = template_store(cfg)?;
    let gateway = build_gateway(cfg, env)?;
    let runner = Runner {
        cfg,
        strategy,
        format,
        templates: &templates,
        examples: examples.as_deref(),
        gateway: &gateway,
    };
    let results = par_map(&jobs, cfg.run.workers, |job| runner.run(job))
        .into_iter()
        .collect::<CliResult<Vec<_>>>()?;

    let run_id = run_id.unwrap_or_else(|| format!("{}-{}", started_at.format("%Y%m%dT%H%M%SZ"), method_name(strategy, format)));
    let run_dir = output_dir.join(&run_id);
    let transcripts = run_dir.join("transcripts");
    create_dir(&transcripts)?;

    let mut predictions = Vec::new();
    let mut requests = Vec::new();
    for r in results {
        if let Some(t) = &r.transcript {
            write_file(&transcripts.join(format!("{}.md", file_stem(&r.record.compound_id))), t.as_bytes())?;
        }
        predictions.extend(r.prediction);
        requests.push(r.record);
    }
    predictions.sort_by(|a, b| a.compound_id.cmp(&b.compound_id));
    write_file(&run_dir.join(PREDICTIONS_FILE), write_exchange_jsonl(&predictions).as_bytes())?;

    let count = |o: RequestOutcome| requests.iter().filter(|r| r.outcome == o).count();
    let stats = gateway.stats();
    let counts = ManifestCounts {
        compounds: jobs.len(),
        requests: stats.requests,
        cache_hits: stats.cache_hits,
        provider_calls: stats.provider_calls,
        predictions: predictions.len(),
        parse_failures: count(RequestOutcome::ParseFailure),
        errors: count(RequestOutcome::GatewayError) + count(RequestOutcome::PromptError),
    };
    let gateway_errors = count(RequestOutcome::GatewayError);
    let [system_name, user_name] = template_names_for(strategy);
    let manifest = RunManifest {
        run_id,
        started_at,
        finished_at: env.now(),
        model_id: cfg.provider.model_id.clone(),
        strategy,
        format,
        config: cfg.snapshot(),
        template_digests: templates
            .digests([system_name.as_str(), user_name.as_str()])
            .map_err(|e| CliError::config(e.to_string()))?,
        requests,
        counts: counts.clone(),
    };
    let mut manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    manifest_json.push('\n');
    write_file(&run_dir.join(MANIFEST_FILE), manifest_json.as_bytes())?;

    if gateway_errors > 0 && gateway_errors == jobs.len() {
        return Err(CliError::Provider(format!(
            "all {gateway_errors} requests failed at the provider; see {}",
            run_dir.join(MANIFEST_FILE).display()
        )));
    }
    Ok(PredictSummary {
        run_dir,
        requests: jobs.len(),
        predictions: counts.predictions,
        parse_failures: counts.parse_failures,
        errors: counts.errors,
    })
}
