pub mod eval;
pub mod filter;
pub mod gateway;
pub mod gsea;
pub mod http;
pub mod ingest;
pub mod model;
pub mod prompt;
pub mod report;
pub mod resolver;
pub mod response;
pub mod util;
