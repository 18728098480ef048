//! Process-level dependencies handed to every command, so tests can swap the
//! network and the environment.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use cotox_core::http::HttpTransport;

type VarLookup = dyn Fn(&str) -> Option<String> + Send + Sync;

#[derive(Clone)]
pub struct Env {
    /// Transport for live provider and structure-service traffic.
    pub http: Arc<dyn HttpTransport>,
    vars: Arc<VarLookup>,
    clock: Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>,
}

impl Env {
    /// Real environment variables and wall clock.
    pub fn process(http: Arc<dyn HttpTransport>) -> Self {
        Env {
            http,
            vars: Arc::new(|name| std::env::var(name).ok()),
            clock: Arc::new(Utc::now),
        }
    }

    /// Fixed variables instead of the process environment.
    pub fn with_vars(mut self, vars: BTreeMap<String, String>) -> Self {
        self.vars = Arc::new(move |name| vars.get(name).cloned());
        self
    }

    pub fn var(&self, name: &str) -> Option<String> {
        (self.vars)(name)
    }

    pub fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }
}
