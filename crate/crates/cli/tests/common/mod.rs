//! Synthetic offline workspace shared by the command tests and the
//! acceptance target: ten context-bearing compounds, four without context,
//! keyword filtering and replay fixtures for every test-set prompt.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cotox_cli::config::PipelineConfig;
use cotox_cli::env::Env;
use cotox_cli::store::ContextStore;
use cotox_core::gateway::{record_fixture, ChatRequest};
use cotox_core::http::{CountingTransport, OfflineTransport};
use cotox_core::model::ToxicityType;
use cotox_core::prompt::{build_prompt, PromptStrategy, StructureFormat, TemplateStore};

pub const MODEL: &str = "synthetic-model";

/// Per-compound labels (rows) over Cardio, Hemato, Infertility, Liver,
/// Pulmonary, Renal. 1 = Toxic.
pub const LABELS: [(&str, [u8; 6]); 10] = [
    ("C01", [1, 0, 0, 1, 0, 0]),
    ("C02", [1, 1, 0, 1, 0, 1]),
    ("C03", [0, 0, 1, 1, 0, 0]),
    ("C04", [1, 0, 0, 0, 1, 0]),
    ("C05", [0, 1, 0, 1, 0, 0]),
    ("C06", [0, 0, 0, 1, 1, 1]),
    ("C07", [1, 1, 1, 0, 0, 0]),
    ("C08", [0, 0, 0, 1, 0, 0]),
    ("C09", [1, 0, 0, 0, 0, 1]),
    ("C10", [0, 1, 0, 1, 1, 0]),
];

/// The answers the replayed model gives.
pub const ANSWERS: [(&str, [u8; 6]); 10] = [
    ("C01", [1, 0, 0, 1, 0, 0]),
    ("C02", [1, 0, 0, 1, 0, 1]),
    ("C03", [1, 0, 1, 1, 0, 0]),
    ("C04", [1, 0, 0, 1, 0, 0]),
    ("C05", [0, 1, 0, 1, 0, 0]),
    ("C06", [0, 0, 0, 1, 1, 0]),
    ("C07", [0, 1, 1, 0, 0, 0]),
    ("C08", [0, 0, 1, 1, 0, 0]),
    ("C09", [1, 0, 0, 0, 0, 1]),
    ("C10", [0, 1, 0, 1, 1, 1]),
];

/// Compounds without any association; they land in the training split.
pub const TRAIN_ONLY: [(&str, [u8; 6]); 4] = [
    ("T01", [1, 0, 0, 0, 0, 0]),
    ("T02", [0, 0, 0, 1, 0, 0]),
    ("T03", [0, 1, 0, 0, 0, 1]),
    ("T04", [0, 0, 0, 0, 0, 0]),
];

fn verdict(bit: u8) -> &'static str {
    if bit == 1 {
        "Toxic"
    } else {
        "Non-toxic"
    }
}

fn yes_no(bit: u8) -> &'static str {
    if bit == 1 {
        "Yes"
    } else {
        "No"
    }
}

/// Model output in the chain-of-thought layout.
pub fn cot_response(answers: [u8; 6]) -> String {
    let mut obj = serde_json::Map::new();
    for (t, bit) in ToxicityType::ALL.iter().zip(answers) {
        obj.insert(
            t.display_name().to_string(),
            serde_json::json!({
                "Reasoning": {
                    "Pathway": format!("pathway evidence for {}", t.short_name()),
                    "GO Term": "GO evidence",
                    "IUPAC Support": "substructure evidence",
                    "Overall Mechanism": "combined mechanism"
                },
                "Prediction": verdict(bit),
                "Answer": verdict(bit)
            }),
        );
    }
    format!("Here is my analysis.\n```json\n{}\n```\n", serde_json::to_string_pretty(&obj).unwrap())
}

pub struct Workspace {
    pub dir: PathBuf,
    pub config: PathBuf,
}

impl Workspace {
    pub fn fixtures(&self) -> PathBuf {
        self.dir.join("fixtures")
    }

    pub fn load_config(&self) -> PipelineConfig {
        PipelineConfig::load(&self.config).unwrap()
    }
}

fn iupac(i: usize) -> String {
    format!("{}-methyl-synthetic-{}-ol", i + 1, i + 2)
}

/// Writes labels, association exports and a config into `dir`.
/// `paths_extra` is added to the `[paths]` table; `extra_toml` is appended
/// and may add sections not present in the base.
pub fn write_workspace(dir: &Path, paths_extra: &str, extra_toml: &str) -> Workspace {
    std::fs::create_dir_all(dir).unwrap();
    let mut labels = String::from("compound_id,name,iupac_name,smiles,cardio,hemato,infertility,liver,pulmonary,renal\n");
    for (i, (id, bits)) in LABELS.iter().chain(TRAIN_ONLY.iter()).enumerate() {
        let cells: Vec<&str> = bits.iter().map(|&b| yes_no(b)).collect();
        labels.push_str(&format!("{id},Drug {id},{},C{}O,{}\n", iupac(i), "C".repeat(i + 1), cells.join(",")));
    }
    std::fs::write(dir.join("labels.csv"), labels).unwrap();

    let mut pathways = String::new();
    let mut go = String::new();
    for (i, (id, _)) in LABELS.iter().enumerate() {
        pathways.push_str(&format!("{id}\tDrug {id}\tApoptosis\tR-HSA-109581\n"));
        pathways.push_str(&format!("{id}\tDrug {id}\tMetabolism of nucleotides {i}\tR-HSA-15869{i}\n"));
        if i % 2 == 0 {
            go.push_str(&format!("{id}\tDrug {id}\tresponse to oxidative stress\tGO:0006979\n"));
        }
        go.push_str(&format!("{id}\tDrug {id}\tprotein binding {i}\tGO:000551{i}\n"));
    }
    std::fs::write(dir.join("ctd_pathways.tsv"), pathways).unwrap();
    std::fs::write(dir.join("ctd_go.tsv"), go).unwrap();

    let config = format!(
        r#"[paths]
labels = "labels.csv"
ctd_pathways = "ctd_pathways.tsv"
ctd_go = "ctd_go.tsv"
cache_dir = "cache"
fixtures_dir = "fixtures"
output_dir = "runs"
{paths_extra}
[provider]
mode = "replay"
base_url = "http://127.0.0.1:9/v1"
model_id = "{MODEL}"
auth_header = "Authorization"
auth_prefix = "Bearer "
max_in_flight = 4
requests_per_minute = 0
retry_attempts = 1
temperature = 0.0
max_output_tokens = 2048
record = false

[eval]
k = 1
seed = 7
{extra_toml}"#
    );
    let path = dir.join("cotox.toml");
    std::fs::write(&path, config).unwrap();
    Workspace {
        dir: dir.to_path_buf(),
        config: path,
    }
}

/// The request `predict` will issue for one compound, rebuilt from the store.
pub fn request_for(cfg: &PipelineConfig, store: &ContextStore, id: &str, strategy: PromptStrategy, format: StructureFormat) -> ChatRequest {
    let bundle = build_prompt(
        &TemplateStore::Embedded,
        &store.compounds[id],
        store.contexts.get(id),
        strategy,
        format,
        None,
    )
    .unwrap();
    let mut req = ChatRequest::new(cfg.provider.model_id.clone(), bundle.system_text, bundle.user_text);
    req.temperature = cfg.provider.temperature;
    req.max_output_tokens = cfg.provider.max_output_tokens;
    req
}

/// Records a replay fixture per compound. Requires a prepared store.
pub fn record_responses(ws: &Workspace, responses: &BTreeMap<String, String>, strategy: PromptStrategy, format: StructureFormat) {
    let cfg = ws.load_config();
    let store = ContextStore::load(&cfg.context_store_path()).unwrap().unwrap();
    for (id, text) in responses {
        let req = request_for(&cfg, &store, id, strategy, format);
        record_fixture(&req, text, &ws.fixtures()).unwrap();
    }
}

pub fn designed_responses() -> BTreeMap<String, String> {
    ANSWERS.iter().map(|(id, bits)| (id.to_string(), cot_response(*bits))).collect()
}

/// An environment whose only transport refuses and counts every call.
pub fn offline_env() -> (Env, Arc<CountingTransport>) {
    let counting = Arc::new(CountingTransport::new(Arc::new(OfflineTransport)));
    (Env::process(counting.clone()).with_vars(BTreeMap::new()), counting)
}

pub fn args(parts: &[&str]) -> Vec<OsString> {
    std::iter::once("cotox").chain(parts.iter().copied()).map(OsString::from).collect()
}

pub fn cli_run(env: &Env, parts: &[&str]) -> i32 {
    cotox_cli::main_with(args(parts), env)
}

/// 50 genes scored 25..1 then -1..-25, so the top five genes carry the
/// strongest positive signal.
pub fn planted_ranking() -> Vec<(String, f64)> {
    (0..50)
        .map(|i| {
            let score = if i < 25 { (25 - i) as f64 } else { -((i - 24) as f64) };
            (format!("G{:02}", i + 1), score)
        })
        .collect()
}

pub const PLANTED_SET: &str = "REACTOME_APOPTOSIS";

/// The planted top-5 set plus `decoys` five-gene sets drawn with xorshift.
pub fn planted_gmt(decoys: usize, seed: u64) -> String {
    let mut gmt = format!("{PLANTED_SET}\tna\tG01\tG02\tG03\tG04\tG05\n");
    let mut x = seed.max(1);
    let mut next = move || {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        x
    };
    for d in 0..decoys {
        let mut genes: Vec<usize> = Vec::new();
        while genes.len() < 5 {
            let g = (next() % 50) as usize + 1;
            if !genes.contains(&g) {
                genes.push(g);
            }
        }
        let cells: Vec<String> = genes.iter().map(|g| format!("G{g:02}")).collect();
        gmt.push_str(&format!("DECOY_{d:03}\tna\t{}\n", cells.join("\t")));
    }
    gmt
}

/// Writes the planted GMT and a rank file for `compound_id` and returns the
/// TOML lines that point the config at them.
pub fn write_gsea_inputs(dir: &Path, compound_id: &str) -> String {
    std::fs::write(dir.join("sets.gmt"), planted_gmt(100, 0x9E3779B97F4A7C15)).unwrap();
    let rank: String = planted_ranking().iter().map(|(g, s)| format!("{g}\t{s}\n")).collect();
    std::fs::write(dir.join(format!("{compound_id}.rnk")), format!("gene\tscore\n{rank}")).unwrap();
    format!("gmt = \"sets.gmt\"\nrank_files = {{ {compound_id} = \"{compound_id}.rnk\" }}\n")
}
