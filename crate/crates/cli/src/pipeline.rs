//! Helpers shared by the subcommands: input loading, provider wiring and
//! context filtering.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use cotox_core::filter::{filter_keyword, filter_llm, load_lexicon, default_lexicon, FilterError, FilterMethod};
use cotox_core::gateway::{ChatCompletionsProvider, ChatProvider, EndpointConfig, Gateway, GatewayError, ReplayProvider};
use cotox_core::http::RetryPolicy;
use cotox_core::ingest::{load_label_file, BioContext, LabelFile};
use cotox_core::prompt::TemplateStore;

use crate::config::{FilterMode, PipelineConfig, ProviderMode};
use crate::env::Env;
use crate::error::{CliError, CliResult};
use crate::store::FilterRecord;

pub fn load_labels(cfg: &PipelineConfig) -> CliResult<LabelFile> {
    let path = PipelineConfig::require_file("labels", Some(&cfg.paths.labels))?;
    load_label_file(&path).map_err(|e| CliError::data(e.to_string()))
}

pub fn template_store(cfg: &PipelineConfig) -> CliResult<TemplateStore> {
    match &cfg.paths.template_dir {
        None => Ok(TemplateStore::Embedded),
        Some(dir) if dir.is_dir() => Ok(TemplateStore::Dir(dir.clone())),
        Some(dir) => Err(CliError::config(format!(
            "paths.template_dir: directory not found: {}",
            dir.display()
        ))),
    }
}

pub fn lexicon(cfg: &PipelineConfig) -> CliResult<Vec<String>> {
    match &cfg.paths.lexicon {
        None => Ok(default_lexicon()),
        Some(p) => load_lexicon(p).map_err(|e| CliError::config(format!("paths.lexicon: {}: {e}", p.display()))),
    }
}

pub fn gateway_error(e: GatewayError) -> CliError {
    CliError::Provider(e.to_string())
}

/// Chat gateway per the provider section: replay fixtures or a live
/// endpoint, with the response cache under `cache_dir/llm`.
pub fn build_gateway(cfg: &PipelineConfig, env: &Env) -> CliResult<Gateway> {
    let pr = &cfg.provider;
    let provider: Arc<dyn ChatProvider> = match pr.mode {
        ProviderMode::Replay => {
            let dir = cfg.paths.fixtures_dir.clone().expect("validated on load");
            Arc::new(ReplayProvider::new(dir))
        }
        ProviderMode::Live => {
            let api_key = match &pr.api_key_env {
                None => None,
                Some(var) => Some(env.var(var).filter(|v| !v.is_empty()).ok_or_else(|| {
                    CliError::config(format!("provider.api_key_env: environment variable {var} is not set"))
                })?),
            };
            let endpoint = EndpointConfig {
                api_key,
                auth_header: pr.auth_header.clone(),
                auth_prefix: pr.auth_prefix.clone(),
                retry: RetryPolicy {
                    max_attempts: pr.retry_attempts,
                    ..RetryPolicy::default()
                },
                ..EndpointConfig::new(pr.base_url.clone())
            };
            Arc::new(ChatCompletionsProvider::new(endpoint, env.http.clone()))
        }
    };
    let mut gateway = Gateway::new(provider)
        .with_cache_dir(cfg.paths.cache_dir.join("llm"))
        .with_max_in_flight(pr.max_in_flight)
        .with_requests_per_minute(pr.requests_per_minute);
    if pr.record && pr.mode == ProviderMode::Live {
        gateway = gateway.with_record_dir(cfg.paths.fixtures_dir.clone().expect("validated on load"));
    }
    Ok(gateway)
}

/// Everything needed to filter contexts with the configured method.
pub struct ContextFilter<'a> {
    pub cfg: &'a PipelineConfig,
    pub templates: TemplateStore,
    pub lexicon: Vec<String>,
    pub gateway: Option<Gateway>,
}

impl<'a> ContextFilter<'a> {
    pub fn new(cfg: &'a PipelineConfig, env: &Env) -> CliResult<Self> {
        let gateway = match cfg.run.filter {
            FilterMode::Llm => Some(build_gateway(cfg, env)?),
            FilterMode::Keyword => None,
        };
        Ok(ContextFilter {
            cfg,
            templates: template_store(cfg)?,
            lexicon: lexicon(cfg)?,
            gateway,
        })
    }

    /// Filters one raw context. An unparseable model reply keeps no terms
    /// and is recorded as a warning, so a single bad reply does not stop a
    /// batch.
    pub fn apply(&self, raw: &BioContext) -> CliResult<(BioContext, FilterRecord)> {
        let outcome = match &self.gateway {
            None => filter_keyword(raw, &self.lexicon),
            Some(gw) => filter_llm(raw, gw, self.cfg.filter_model_id(), &self.templates),
        };
        let method = match self.cfg.run.filter {
            FilterMode::Llm => FilterMethod::Llm,
            FilterMode::Keyword => FilterMethod::Keyword,
        };
        let (context, decisions, warnings) = match outcome {
            Ok(o) => (o.context, o.decisions, o.warnings),
            Err(FilterError::UnparseableFilterResponse { compound_id, detail }) => {
                log::warn!("{compound_id}: unparseable filter reply, keeping no terms: {detail}");
                let mut ctx = BioContext::empty(compound_id);
                ctx.filtered = true;
                (ctx, Vec::new(), vec![format!("unparseable filter reply: {detail}")])
            }
            Err(FilterError::Gateway(e)) => return Err(gateway_error(e)),
            Err(FilterError::Prompt(e)) => return Err(CliError::config(e.to_string())),
            Err(e) => return Err(CliError::data(e.to_string())),
        };
        let record = FilterRecord {
            method,
            terms_before: raw.len(),
            terms_after: context.len(),
            decisions,
            warnings,
        };
        Ok((context, record))
    }
}

/// Applies `f` to every item on up to `workers` scoped threads, returning
/// results in input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every slot filled"))
        .collect()
}

/// File-system safe rendering of a compound id.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::data(format!("creating {}: {e}", path.display())))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    cotox_core::util::write_atomic(path, bytes).map_err(|e| CliError::data(format!("writing {}: {e}", path.display())))
}

pub fn resolver_min_interval(cfg: &PipelineConfig) -> Duration {
    Duration::from_millis(cfg.resolver.min_interval_ms)
}

pub fn output_dir(cfg: &PipelineConfig, out: Option<&PathBuf>) -> PathBuf {
    out.cloned().unwrap_or_else(|| cfg.paths.output_dir.clone())
}
