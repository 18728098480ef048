//! Pipeline configuration: one TOML document, paths relative to the file,
//! secrets only through environment variables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cotox_core::gsea::{GseaParams, KindMap, Thresholds};
use cotox_core::ingest::TermKind;
use cotox_core::prompt::{PromptStrategy, StructureFormat};
use cotox_core::resolver::DEFAULT_PUBCHEM_BASE;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default)]
    pub resolver: ResolverSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub gsea: GseaSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub labels: PathBuf,
    #[serde(default)]
    pub ctd_pathways: Option<PathBuf>,
    #[serde(default)]
    pub ctd_go: Option<PathBuf>,
    #[serde(default)]
    pub gmt: Option<PathBuf>,
    /// Ranked signature per compound id, for GSEA-derived context.
    #[serde(default)]
    pub rank_files: BTreeMap<String, PathBuf>,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    /// Replay fixtures for chat requests (and recording target).
    #[serde(default)]
    pub fixtures_dir: Option<PathBuf>,
    /// Replay fixtures for structure lookups.
    #[serde(default)]
    pub pubchem_fixtures_dir: Option<PathBuf>,
    #[serde(default)]
    pub template_dir: Option<PathBuf>,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Defaults to `<cache_dir>/context_store.json`.
    #[serde(default)]
    pub context_store: Option<PathBuf>,
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    Live,
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    pub base_url: String,
    pub model_id: String,
    /// Model used for context filtering; defaults to `model_id`.
    #[serde(default)]
    pub filter_model_id: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub auth_header: String,
    pub auth_prefix: String,
    pub max_in_flight: usize,
    pub requests_per_minute: u32,
    pub retry_attempts: u32,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Write live responses into `paths.fixtures_dir` for later replay.
    pub record: bool,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            mode: ProviderMode::Replay,
            base_url: "https://api.openai.com/v1".into(),
            model_id: "gpt-4o".into(),
            filter_model_id: None,
            api_key_env: None,
            auth_header: "Authorization".into(),
            auth_prefix: "Bearer ".into(),
            max_in_flight: 4,
            requests_per_minute: 60,
            retry_attempts: 3,
            temperature: 0.0,
            max_output_tokens: cotox_core::gateway::DEFAULT_MAX_OUTPUT_TOKENS,
            record: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolverMode {
    Live,
    Fixture,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolverSection {
    pub mode: ResolverMode,
    pub base_url: String,
    pub max_in_flight: usize,
    pub min_interval_ms: u64,
    pub not_found_ttl_days: i64,
}

impl Default for ResolverSection {
    fn default() -> Self {
        ResolverSection {
            mode: ResolverMode::Off,
            base_url: DEFAULT_PUBCHEM_BASE.into(),
            max_in_flight: 2,
            min_interval_ms: 200,
            not_found_ttl_days: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    Llm,
    Keyword,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub strategy: PromptStrategy,
    pub format: StructureFormat,
    pub filter: FilterMode,
    pub split_seed: u64,
    /// Cap on the test set; larger context-bearing pools are subsampled.
    pub max_test: Option<usize>,
    pub fewshot_seed: u64,
    /// Training compounds whose structures are resolved for few-shot use.
    pub fewshot_pool_size: usize,
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            strategy: PromptStrategy::CoTox,
            format: StructureFormat::Iupac,
            filter: FilterMode::Keyword,
            split_seed: 0,
            max_test: None,
            fewshot_seed: 0,
            fewshot_pool_size: 32,
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Number of folds; 1 scores the pooled test set.
    pub k: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { k: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GseaSection {
    pub weight_exponent: f64,
    pub permutations: usize,
    pub seed: u64,
    pub min_set_size: usize,
    pub max_set_size: usize,
    pub q_max: f64,
    pub p_max: f64,
    /// Gene-set name prefix to term kind: "pathway", "go_bp", "go_mf", "go_cc".
    pub kind_prefixes: Option<BTreeMap<String, String>>,
}

impl Default for GseaSection {
    fn default() -> Self {
        let p = GseaParams::default();
        let t = Thresholds::default();
        GseaSection {
            weight_exponent: p.weight_exponent,
            permutations: p.permutations,
            seed: p.seed,
            min_set_size: p.min_set_size,
            max_set_size: p.max_set_size,
            q_max: t.q_max,
            p_max: t.p_max,
            kind_prefixes: None,
        }
    }
}

impl GseaSection {
    pub fn params(&self) -> GseaParams {
        GseaParams {
            weight_exponent: self.weight_exponent,
            permutations: self.permutations,
            seed: self.seed,
            min_set_size: self.min_set_size,
            max_set_size: self.max_set_size,
        }
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            q_max: self.q_max,
            p_max: self.p_max,
        }
    }

    pub fn kind_map(&self) -> CliResult<KindMap> {
        let Some(prefixes) = &self.kind_prefixes else {
            return Ok(KindMap::default());
        };
        let mut map = KindMap {
            prefixes: Vec::new(),
            default_kind: TermKind::Pathway,
        };
        for (prefix, kind) in prefixes {
            let kind = match kind.as_str() {
                "pathway" => TermKind::Pathway,
                "go_bp" => TermKind::GoBiologicalProcess,
                "go_mf" => TermKind::GoMolecularFunction,
                "go_cc" => TermKind::GoCellularComponent,
                other => {
                    return Err(CliError::config(format!(
                        "gsea.kind_prefixes.{prefix}: unknown kind {other:?} (pathway, go_bp, go_mf, go_cc)"
                    )))
                }
            };
            map.prefixes.push((prefix.clone(), kind));
        }
        // Longest prefix first so that e.g. GOBP_ wins over GO_.
        map.prefixes.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(map)
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> CliResult<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("reading {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        PipelineConfig::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let p = &mut self.paths;
        abs(&mut p.labels);
        abs(&mut p.cache_dir);
        abs(&mut p.output_dir);
        for opt in [
            &mut p.ctd_pathways,
            &mut p.ctd_go,
            &mut p.gmt,
            &mut p.fixtures_dir,
            &mut p.pubchem_fixtures_dir,
            &mut p.template_dir,
            &mut p.lexicon,
            &mut p.context_store,
        ] {
            if let Some(path) = opt {
                abs(path);
            }
        }
        for path in p.rank_files.values_mut() {
            abs(path);
        }
    }

    fn validate(&self) -> CliResult<()> {
        let pr = &self.provider;
        if !(0.0..=1.0).contains(&pr.temperature) {
            return Err(CliError::config("provider.temperature must lie in [0, 1]"));
        }
        if pr.max_in_flight == 0 {
            return Err(CliError::config("provider.max_in_flight must be >= 1"));
        }
        if pr.retry_attempts == 0 {
            return Err(CliError::config("provider.retry_attempts must be >= 1"));
        }
        if pr.mode == ProviderMode::Replay && self.paths.fixtures_dir.is_none() {
            return Err(CliError::config("paths.fixtures_dir is required when provider.mode = \"replay\""));
        }
        if pr.record && self.paths.fixtures_dir.is_none() {
            return Err(CliError::config("paths.fixtures_dir is required when provider.record = true"));
        }
        if self.resolver.mode == ResolverMode::Fixture && self.paths.pubchem_fixtures_dir.is_none() {
            return Err(CliError::config(
                "paths.pubchem_fixtures_dir is required when resolver.mode = \"fixture\"",
            ));
        }
        if self.resolver.max_in_flight == 0 {
            return Err(CliError::config("resolver.max_in_flight must be >= 1"));
        }
        if self.run.workers == 0 {
            return Err(CliError::config("run.workers must be >= 1"));
        }
        self.run
            .strategy
            .check_format(self.run.format)
            .map_err(|e| CliError::config(format!("run: {e}")))?;
        self.gsea
            .params()
            .validate()
            .map_err(|e| CliError::config(format!("gsea: {e}")))?;
        self.gsea.kind_map()?;
        Ok(())
    }

    /// Fails with a config error naming `field` when the file is absent.
    pub fn require_file(field: &str, path: Option<&PathBuf>) -> CliResult<PathBuf> {
        match path {
            None => Err(CliError::config(format!("paths.{field} is not set"))),
            Some(p) if !p.is_file() => Err(CliError::config(format!(
                "paths.{field}: file not found: {}",
                p.display()
            ))),
            Some(p) => Ok(p.clone()),
        }
    }

    pub fn context_store_path(&self) -> PathBuf {
        self.paths
            .context_store
            .clone()
            .unwrap_or_else(|| self.paths.cache_dir.join("context_store.json"))
    }

    pub fn filter_model_id(&self) -> &str {
        self.provider.filter_model_id.as_deref().unwrap_or(&self.provider.model_id)
    }

    /// Configuration as JSON for run manifests. Contains no secrets: keys are
    /// only ever referenced by environment-variable name.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}
