//! Drug name → IUPAC name / SMILES lookup against PubChem PUG REST, with a
//! persistent single-file cache and a replayable fixture transport.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use percent_encoding::{utf8_percent_encode, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{
    is_transient, HttpRequest, HttpResponse, HttpTransport, InFlightLimit, Pacer, RetryPolicy,
    TransportError,
};
use crate::util::write_atomic;

pub const DEFAULT_PUBCHEM_BASE: &str = "https://pubchem.ncbi.nlm.nih.gov/rest/pug";
const PROPERTY_LIST: &str = "IUPACName,CanonicalSMILES";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StructureProperty {
    IupacName,
    CanonicalSmiles,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResolutionStatus {
    Resolved,
    NotFound,
    Ambiguous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionRecord {
    pub query: String,
    pub iupac_name: Option<String>,
    pub canonical_smiles: Option<String>,
    pub resolved_at: DateTime<Utc>,
    pub status: ResolutionStatus,
    /// Number of compound ids PubChem returned for the name.
    #[serde(default)]
    pub cid_count: usize,
}

impl ResolutionRecord {
    fn restricted_to(mut self, properties: &[StructureProperty]) -> Self {
        if !properties.contains(&StructureProperty::IupacName) {
            self.iupac_name = None;
        }
        if !properties.contains(&StructureProperty::CanonicalSmiles) {
            self.canonical_smiles = None;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("compound name is empty")]
    EmptyName,
    #[error("network error: {0}")]
    Network(String),
    #[error("rate limited by the service after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("unexpected response body: {0}")]
    Parse(String),
    #[error("cache error: {0}")]
    Cache(String),
}

#[derive(Debug, Clone)]
pub struct ResolverConfig {
    pub base_url: String,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    /// Minimum spacing between request starts.
    pub min_interval: Duration,
    pub not_found_ttl: chrono::Duration,
}

impl Default for ResolverConfig {
    fn default() -> Self {
        ResolverConfig {
            base_url: DEFAULT_PUBCHEM_BASE.to_string(),
            retry: RetryPolicy::default(),
            max_in_flight: 2,
            min_interval: Duration::from_millis(200),
            not_found_ttl: chrono::Duration::days(30),
        }
    }
}

/// Request path (relative to the base URL) for a name lookup.
pub fn property_path(name: &str) -> String {
    format!(
        "compound/name/{}/property/{}/JSON",
        utf8_percent_encode(name.trim(), NON_ALPHANUMERIC),
        PROPERTY_LIST
    )
}

/// Fixture file stem for a relative request path.
pub fn fixture_key(relative_path: &str) -> String {
    hex::encode(Sha256::digest(format!("GET {relative_path}").as_bytes()))
}

/// Stores a response body so that [`FixtureTransport`] can replay it.
pub fn write_fixture(dir: &Path, relative_path: &str, body: &str) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", fixture_key(relative_path)));
    write_atomic(&path, body.as_bytes())?;
    Ok(path)
}

/// Serves recorded response bodies keyed by the request path. Never touches
/// the network; a missing fixture is an error.
pub struct FixtureTransport {
    dir: PathBuf,
    base_url: String,
}

impl FixtureTransport {
    pub fn new(dir: impl Into<PathBuf>, base_url: impl Into<String>) -> Self {
        FixtureTransport {
            dir: dir.into(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
        }
    }
}

impl HttpTransport for FixtureTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let relative = request
            .url
            .strip_prefix(&self.base_url)
            .unwrap_or(&request.url)
            .trim_start_matches('/');
        let path = self.dir.join(format!("{}.json", fixture_key(relative)));
        match fs::read_to_string(&path) {
            Ok(body) => Ok(HttpResponse::new(200, body)),
            Err(_) => Err(TransportError::NoFixture(relative.to_string())),
        }
    }
}

/// JSON-file backed cache keyed by lowercase trimmed name.
pub struct ResolutionCache {
    path: Option<PathBuf>,
    entries: Mutex<BTreeMap<String, ResolutionRecord>>,
}

impl ResolutionCache {
    pub fn in_memory() -> Self {
        ResolutionCache {
            path: None,
            entries: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self, ResolveError> {
        let path = path.into();
        let entries = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| ResolveError::Cache(format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(ResolveError::Cache(format!("{}: {e}", path.display()))),
        };
        Ok(ResolutionCache {
            path: Some(path),
            entries: Mutex::new(entries),
        })
    }

    pub fn key(name: &str) -> String {
        name.trim().to_lowercase()
    }

    pub fn get(&self, name: &str) -> Option<ResolutionRecord> {
        self.entries
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(&Self::key(name))
            .cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn put(&self, record: ResolutionRecord) -> Result<(), ResolveError> {
        let mut entries = self.entries.lock().unwrap_or_else(|e| e.into_inner());
        entries.insert(Self::key(&record.query), record);
        if let Some(path) = &self.path {
            let body = serde_json::to_vec_pretty(&*entries)
                .map_err(|e| ResolveError::Cache(e.to_string()))?;
            write_atomic(path, &body)
                .map_err(|e| ResolveError::Cache(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

pub struct Resolver {
    config: ResolverConfig,
    transport: Arc<dyn HttpTransport>,
    cache: ResolutionCache,
    limit: InFlightLimit,
    pacer: Pacer,
    clock: Clock,
    requests: AtomicUsize,
}

impl Resolver {
    pub fn new(config: ResolverConfig, transport: Arc<dyn HttpTransport>, cache: ResolutionCache) -> Self {
        let limit = InFlightLimit::new(config.max_in_flight);
        let pacer = Pacer::new(config.min_interval);
        Resolver {
            config,
            transport,
            cache,
            limit,
            pacer,
            clock: Arc::new(Utc::now),
            requests: AtomicUsize::new(0),
        }
    }

    pub fn with_clock(mut self, clock: impl Fn() -> DateTime<Utc> + Send + Sync + 'static) -> Self {
        self.clock = Arc::new(clock);
        self
    }

    pub fn cache(&self) -> &ResolutionCache {
        &self.cache
    }

    /// HTTP exchanges issued so far, retries included.
    pub fn requests_issued(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn resolve(
        &self,
        name: &str,
        properties: &[StructureProperty],
    ) -> Result<ResolutionRecord, ResolveError> {
        let trimmed = name.trim();
        if trimmed.is_empty() {
            return Err(ResolveError::EmptyName);
        }
        let now = (self.clock)();
        if let Some(hit) = self.cache.get(trimmed) {
            let expired = hit.status == ResolutionStatus::NotFound
                && now - hit.resolved_at > self.config.not_found_ttl;
            if !expired {
                return Ok(hit.restricted_to(properties));
            }
        }
        let record = self.fetch(trimmed, now)?;
        self.cache.put(record.clone())?;
        Ok(record.restricted_to(properties))
    }

    /// Resolves every name, preserving order. Repeated names (after case and
    /// whitespace folding) are looked up once; at most `max_in_flight`
    /// lookups run concurrently.
    pub fn resolve_batch(
        &self,
        names: &[String],
        max_in_flight: usize,
        properties: &[StructureProperty],
    ) -> Vec<Result<ResolutionRecord, ResolveError>> {
        let mut unique: Vec<&str> = Vec::new();
        let mut slot_of: HashMap<String, usize> = HashMap::new();
        let slots: Vec<Option<usize>> = names
            .iter()
            .map(|n| {
                let key = ResolutionCache::key(n);
                if key.is_empty() {
                    return None;
                }
                Some(*slot_of.entry(key).or_insert_with(|| {
                    unique.push(n.as_str());
                    unique.len() - 1
                }))
            })
            .collect();

        let results: Vec<Mutex<Option<Result<ResolutionRecord, ResolveError>>>> =
            unique.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = max_in_flight.max(1).min(unique.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(name) = unique.get(i) else { break };
                    let r = self.resolve(name, properties);
                    *results[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
                });
            }
        });
        let results: Vec<Result<ResolutionRecord, ResolveError>> = results
            .into_iter()
            .map(|m| {
                m.into_inner()
                    .unwrap_or_else(|e| e.into_inner())
                    .unwrap_or(Err(ResolveError::Network("lookup did not run".into())))
            })
            .collect();
        names
            .iter()
            .zip(slots)
            .map(|(name, slot)| match slot {
                None => Err(ResolveError::EmptyName),
                Some(i) => results[i].clone().map(|mut r| {
                    r.query = name.trim().to_string();
                    r
                }),
            })
            .collect()
    }

    fn fetch(&self, name: &str, now: DateTime<Utc>) -> Result<ResolutionRecord, ResolveError> {
        let url = format!(
            "{}/{}",
            self.config.base_url.trim_end_matches('/'),
            property_path(name)
        );
        let request = HttpRequest::get(url);
        let attempts = self.config.retry.max_attempts.max(1);
        let mut last_error = ResolveError::Network("no attempt made".into());
        for attempt in 1..=attempts {
            let outcome = {
                let _permit = self.limit.acquire();
                self.pacer.wait();
                self.requests.fetch_add(1, Ordering::SeqCst);
                self.transport.send(&request)
            };
            let hint = match outcome {
                Ok(resp) if is_transient(resp.status) && !is_not_found(&resp) => {
                    last_error = if matches!(resp.status, 429 | 503) {
                        ResolveError::RateLimited { attempts: attempt }
                    } else {
                        ResolveError::Network(format!("HTTP {}", resp.status))
                    };
                    resp.retry_after()
                }
                Ok(resp) => return interpret_response(name, &resp, now),
                Err(TransportError::NoFixture(what)) => {
                    return Err(ResolveError::Network(format!("no fixture for {what}")))
                }
                Err(e) => {
                    last_error = ResolveError::Network(e.to_string());
                    None
                }
            };
            if attempt < attempts {
                std::thread::sleep(self.config.retry.delay(attempt, hint));
            }
        }
        Err(last_error)
    }
}

fn is_not_found(resp: &HttpResponse) -> bool {
    if resp.status == 404 {
        return true;
    }
    serde_json::from_str::<Value>(&resp.body)
        .ok()
        .and_then(|v| v.pointer("/Fault/Code").and_then(Value::as_str).map(String::from))
        .is_some_and(|code| code == "PUGREST.NotFound")
}

fn interpret_response(
    name: &str,
    resp: &HttpResponse,
    now: DateTime<Utc>,
) -> Result<ResolutionRecord, ResolveError> {
    let not_found = ResolutionRecord {
        query: name.to_string(),
        iupac_name: None,
        canonical_smiles: None,
        resolved_at: now,
        status: ResolutionStatus::NotFound,
        cid_count: 0,
    };
    if is_not_found(resp) {
        return Ok(not_found);
    }
    if !resp.is_success() {
        return Err(ResolveError::Network(format!("HTTP {}", resp.status)));
    }
    let body: Value = serde_json::from_str(&resp.body).map_err(|e| ResolveError::Parse(e.to_string()))?;
    let props = body
        .pointer("/PropertyTable/Properties")
        .and_then(Value::as_array)
        .ok_or_else(|| ResolveError::Parse("missing PropertyTable.Properties".into()))?;
    let Some(first) = props.first() else {
        return Ok(not_found);
    };
    let text = |keys: &[&str]| {
        keys.iter()
            .find_map(|k| first.get(*k).and_then(Value::as_str))
            .map(str::to_string)
    };
    let iupac_name = text(&["IUPACName"]);
    // PubChem renamed the returned key; accept both spellings.
    let canonical_smiles = text(&["CanonicalSMILES", "ConnectivitySMILES", "SMILES"]);
    let status = if props.len() > 1 {
        ResolutionStatus::Ambiguous
    } else if iupac_name.is_some() {
        ResolutionStatus::Resolved
    } else {
        ResolutionStatus::NotFound
    };
    Ok(ResolutionRecord {
        query: name.to_string(),
        iupac_name,
        canonical_smiles,
        resolved_at: now,
        status,
        cid_count: props.len(),
    })
}
