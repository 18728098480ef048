mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use common::*;
use cotox_cli::commands::{cmd_evaluate, cmd_gsea_context, cmd_predict, cmd_prepare};
use cotox_cli::env::Env;
use cotox_cli::store::{ContextSource, ContextStore};
use cotox_core::filter::filter_request;
use cotox_core::gateway::record_fixture;
use cotox_core::http::{HttpRequest, HttpResponse, HttpTransport, TransportError};
use cotox_core::ingest::{build_bio_context, load_ctd_associations, TermKind};
use cotox_core::prompt::{PromptStrategy, StructureFormat, TemplateStore};
use cotox_core::report::{RequestOutcome, RunManifest};
use cotox_core::resolver::{property_path, write_fixture, ResolutionStatus};

const COTOX: PromptStrategy = PromptStrategy::CoTox;
const IUPAC: StructureFormat = StructureFormat::Iupac;

fn prepared(extra_paths: &str, extra: &str) -> (tempfile::TempDir, Workspace, Env) {
    let tmp = tempfile::tempdir().unwrap();
    let ws = write_workspace(tmp.path(), extra_paths, extra);
    let (env, _) = offline_env();
    cmd_prepare(&ws.load_config(), &env).unwrap();
    (tmp, ws, env)
}

#[test]
fn prepare_builds_filtered_store_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = write_workspace(tmp.path(), "", "");
    let (env, counter) = offline_env();
    let first = cmd_prepare(&ws.load_config(), &env).unwrap();
    assert_eq!((first.compounds, first.test, first.train), (14, 10, 4));
    assert_eq!(first.fewshot_pool, 4);

    let store = ContextStore::load(&ws.load_config().context_store_path()).unwrap().unwrap();
    let c01 = &store.contexts["C01"];
    assert!(c01.filtered);
    let kept: Vec<&str> = c01.terms().map(|t| t.term_name.as_str()).collect();
    assert_eq!(kept, ["Apoptosis", "response to oxidative stress"]);
    assert_eq!(store.filter["C01"].terms_before, 4);
    assert_eq!(store.context_source["C02"], ContextSource::Ctd);

    let second = cmd_prepare(&ws.load_config(), &env).unwrap();
    assert_eq!(first.store_digest, second.store_digest);
    assert_eq!(counter.calls(), 0);
}

#[test]
fn prepare_resolves_missing_structures_from_fixtures() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = write_workspace(
        tmp.path(),
        "pubchem_fixtures_dir = \"pubchem\"\n",
        "[resolver]\nmode = \"fixture\"\n",
    );
    // Drop the IUPAC name of C01 so it has to be looked up.
    let labels = std::fs::read_to_string(ws.dir.join("labels.csv")).unwrap();
    let labels = labels.replacen("C01,Drug C01,1-methyl-synthetic-2-ol,", "C01,Drug C01,,", 1);
    std::fs::write(ws.dir.join("labels.csv"), labels).unwrap();
    let body = r#"{"PropertyTable":{"Properties":[{"CID":42,"IUPACName":"looked-up-name","CanonicalSMILES":"CO"}]}}"#;
    write_fixture(&ws.dir.join("pubchem"), &property_path("Drug C01"), body).unwrap();

    let (env, counter) = offline_env();
    let summary = cmd_prepare(&ws.load_config(), &env).unwrap();
    assert_eq!(summary.resolution_requests, 1);
    let store = ContextStore::load(&ws.load_config().context_store_path()).unwrap().unwrap();
    assert_eq!(store.compounds["C01"].iupac_name.as_deref(), Some("looked-up-name"));
    assert_eq!(store.compounds["C01"].smiles.as_deref(), Some("CCO"), "label-file SMILES kept");
    assert_eq!(store.resolution["C01"], ResolutionStatus::Resolved);

    let again = cmd_prepare(&ws.load_config(), &env).unwrap();
    assert_eq!(again.resolution_requests, 0, "warm cache");
    assert_eq!(counter.calls(), 0);
}

#[test]
fn missing_ctd_path_is_config_error_naming_field() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = write_workspace(tmp.path(), "", "");
    std::fs::remove_file(ws.dir.join("ctd_go.tsv")).unwrap();
    let (env, _) = offline_env();
    let err = cmd_prepare(&ws.load_config(), &env).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("paths.ctd_go"), "{err}");
    assert_eq!(cli_run(&env, &["prepare", "--config", ws.config.to_str().unwrap()]), 1);
}

#[test]
fn unknown_config_key_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = write_workspace(tmp.path(), "", "[run]\nstrategy = \"cotox\"\ncolour = \"blue\"\n");
    let (env, _) = offline_env();
    assert_eq!(cli_run(&env, &["prepare", "--config", ws.config.to_str().unwrap()]), 1);
}

#[test]
fn illegal_strategy_format_override_exits_1() {
    let (_tmp, ws, env) = prepared("", "");
    let code = cli_run(
        &env,
        &["predict", "--config", ws.config.to_str().unwrap(), "--strategy", "bioprocess-cot", "--format", "smiles"],
    );
    assert_eq!(code, 1);
}

#[test]
fn cotox_without_store_is_precondition_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = write_workspace(tmp.path(), "", "");
    let (env, _) = offline_env();
    let err = cmd_predict(&ws.load_config(), &env, ws.dir.join("runs"), Some("r".into())).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("cotox prepare"), "{err}");
}

#[test]
fn garbage_fixture_yields_parse_failure_and_run_continues() {
    let (_tmp, ws, env) = prepared("", "[run]\nmax_test = 3\nsplit_seed = 11\n");
    let store = ContextStore::load(&ws.load_config().context_store_path()).unwrap().unwrap();
    let ids: Vec<String> = store.split.test_ids.iter().cloned().collect();
    assert_eq!(ids.len(), 3);
    let mut responses = BTreeMap::new();
    responses.insert(ids[0].clone(), cot_response([1, 0, 0, 0, 0, 0]));
    responses.insert(ids[1].clone(), "I cannot answer that.".to_string());
    responses.insert(ids[2].clone(), cot_response([0, 0, 0, 1, 0, 0]));
    record_responses(&ws, &responses, COTOX, IUPAC);

    let summary = cmd_predict(&ws.load_config(), &env, ws.dir.join("runs"), Some("g".into())).unwrap();
    assert_eq!((summary.predictions, summary.parse_failures, summary.errors), (2, 1, 0));
    let jsonl = std::fs::read_to_string(summary.run_dir.join("predictions.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(summary.run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.parse_failure_count(), 1);
    let failed = manifest.requests.iter().find(|r| r.compound_id == ids[1]).unwrap();
    assert_eq!(failed.outcome, RequestOutcome::ParseFailure);
    let transcript = std::fs::read_to_string(summary.run_dir.join(format!("transcripts/{}.md", ids[1]))).unwrap();
    assert!(transcript.contains("I cannot answer that."));

    let eval = cmd_evaluate(&ws.load_config(), &[summary.run_dir.join("predictions.jsonl")], None).unwrap();
    assert_eq!(eval.reports[0].1.n_parse_failures, 1);
    assert_eq!(eval.reports[0].0, "cotox-iupac");
}

#[test]
fn missing_fixtures_everywhere_is_provider_error() {
    let (_tmp, ws, env) = prepared("", "");
    let err = cmd_predict(&ws.load_config(), &env, ws.dir.join("runs"), Some("m".into())).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn perfect_predictions_score_one_and_two_files_compare() {
    let (_tmp, ws, env) = prepared("", "");
    let perfect: BTreeMap<String, String> = LABELS.iter().map(|(id, b)| (id.to_string(), cot_response(*b))).collect();
    record_responses(&ws, &perfect, COTOX, IUPAC);
    let run = cmd_predict(&ws.load_config(), &env, ws.dir.join("runs"), Some("perfect".into())).unwrap();
    let file = run.run_dir.join("predictions.jsonl");
    let eval = cmd_evaluate(&ws.load_config(), &[file.clone()], None).unwrap();
    let report = &eval.reports[0].1;
    assert!(report.per_type_f1.values().all(|&f| f == 1.0));
    assert_eq!(report.macro_f1, 1.0);
    let md = std::fs::read_to_string(&eval.report_path).unwrap();
    assert!(md.contains("| cotox-iupac | **1.000** | **1.000** |"), "{md}");

    let out = ws.dir.join("cmp");
    let two = cmd_evaluate(&ws.load_config(), &[file.clone(), file], Some(&out)).unwrap();
    let md = std::fs::read_to_string(two.report_path).unwrap();
    assert!(md.starts_with("# Comparison\n\n| Method |"));
    let table: Vec<&str> = md.lines().skip(2).take_while(|l| l.starts_with('|')).collect();
    assert_eq!(table.len(), 4, "header, rule and two rows");
    assert!(table[3].starts_with("| cotox-iupac (2) |"));
}

#[test]
fn unknown_ids_in_predictions_are_listed() {
    let (_tmp, ws, _env) = prepared("", "");
    let file = ws.dir.join("stray.jsonl");
    let answers = r#"{"cardio":"Toxic","hemato":"Toxic","infertility":"Toxic","liver":"Toxic","pulmonary":"Toxic","renal":"Toxic"}"#;
    std::fs::write(
        &file,
        format!(
            "{{\"compound_id\":\"ZZ1\",\"answers\":{answers}}}\n{{\"compound_id\":\"C01\",\"answers\":{answers}}}\n{{\"compound_id\":\"ZZ2\",\"answers\":{answers}}}\n"
        ),
    )
    .unwrap();
    let err = cmd_evaluate(&ws.load_config(), &[file], None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let msg = err.to_string();
    assert!(msg.contains("ZZ1") && msg.contains("ZZ2") && !msg.contains("C01"), "{msg}");
}

#[test]
fn gsea_context_recovers_planted_set() {
    let tmp = tempfile::tempdir().unwrap();
    let gsea_paths = write_gsea_inputs(tmp.path(), "T01");
    let ws = write_workspace(tmp.path(), &gsea_paths, "[gsea]\npermutations = 1000\nseed = 1\n");
    let (env, counter) = offline_env();
    cmd_prepare(&ws.load_config(), &env).unwrap();
    let summary = cmd_gsea_context(&ws.load_config(), &env, ws.dir.join("runs")).unwrap();
    assert_eq!(summary.compounds.len(), 1);
    let c = &summary.compounds[0];
    assert!(c.terms_passing >= 1);

    let store = ContextStore::load(&ws.load_config().context_store_path()).unwrap().unwrap();
    let ctx = &store.contexts["T01"];
    assert!(ctx.filtered);
    assert!(ctx.terms().any(|t| t.term_id == PLANTED_SET), "{ctx:?}");
    assert!(ctx.terms().all(|t| !t.term_id.starts_with("DECOY")), "decoys removed by the filter");
    assert_eq!(store.context_source["T01"], ContextSource::Gsea);
    assert!(store.split.test_ids.contains("T01"));
    let tsv = std::fs::read_to_string(&c.report_path).unwrap();
    assert!(tsv.starts_with("set_name\tes\tp\tq\thits\tkept\n"));
    assert_eq!(counter.calls(), 0);
}

#[test]
fn gsea_thresholds_excluding_everything_give_notice() {
    let tmp = tempfile::tempdir().unwrap();
    let gsea_paths = write_gsea_inputs(tmp.path(), "T02");
    let ws = write_workspace(tmp.path(), &gsea_paths, "[gsea]\npermutations = 200\np_max = 0.0\n");
    let (env, _) = offline_env();
    let summary = cmd_gsea_context(&ws.load_config(), &env, ws.dir.join("runs")).unwrap();
    assert_eq!(summary.compounds[0].terms_passing, 0);
    assert!(summary.to_string().contains("notice: no gene set passed"));
    let store = ContextStore::load(&ws.load_config().context_store_path()).unwrap().unwrap();
    assert!(store.contexts["T02"].is_empty());
    assert!(!store.split.test_ids.contains("T02"));
}

#[test]
fn gsea_without_gmt_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = write_workspace(tmp.path(), "gmt = \"absent.gmt\"\nrank_files = { T01 = \"T01.rnk\" }\n", "");
    let (env, _) = offline_env();
    let err = cmd_gsea_context(&ws.load_config(), &env, ws.dir.join("runs")).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("paths.gmt"));
}

#[test]
fn llm_filter_runs_from_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = write_workspace(tmp.path(), "", "[run]\nfilter = \"llm\"\n");
    let cfg = ws.load_config();
    let mut assocs = load_ctd_associations(&ws.dir.join("ctd_pathways.tsv"), TermKind::Pathway).unwrap();
    assocs.extend(load_ctd_associations(&ws.dir.join("ctd_go.tsv"), TermKind::GoBiologicalProcess).unwrap());
    for (id, _) in LABELS {
        let raw = build_bio_context(&assocs, id);
        let req = filter_request(&raw, &cfg.provider.model_id, &TemplateStore::Embedded).unwrap();
        let reply = if id == "C03" {
            "No idea.".to_string()
        } else {
            "```json\n[\"R-HSA-109581\", \"GO:9999999\"]\n```".to_string()
        };
        record_fixture(&req, &reply, &ws.fixtures()).unwrap();
    }
    let (env, counter) = offline_env();
    cmd_prepare(&cfg, &env).unwrap();
    let store = ContextStore::load(&cfg.context_store_path()).unwrap().unwrap();
    let c01: Vec<&str> = store.contexts["C01"].terms().map(|t| t.term_id.as_str()).collect();
    assert_eq!(c01, ["R-HSA-109581"]);
    assert!(store.filter["C01"].warnings.iter().any(|w| w.contains("GO:9999999")));
    assert!(store.contexts["C03"].is_empty());
    assert!(store.filter["C03"].warnings[0].contains("unparseable"));
    assert_eq!(counter.calls(), 0);
}

struct Unauthorized;

impl HttpTransport for Unauthorized {
    fn send(&self, _: &HttpRequest) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse::new(401, r#"{"error":{"message":"bad key"}}"#))
    }
}

#[test]
fn live_mode_needs_key_and_auth_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = write_workspace(tmp.path(), "", "");
    let text = std::fs::read_to_string(&ws.config).unwrap().replace("mode = \"replay\"", "mode = \"live\"\napi_key_env = \"SYNTH_KEY\"");
    std::fs::write(&ws.config, text).unwrap();
    let (env, counter) = offline_env();
    cmd_prepare(&ws.load_config(), &env).unwrap();

    let err = cmd_predict(&ws.load_config(), &env, ws.dir.join("runs"), None).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("SYNTH_KEY"));
    assert_eq!(counter.calls(), 0);

    let env = Env::process(Arc::new(Unauthorized)).with_vars(BTreeMap::from([("SYNTH_KEY".into(), "k".into())]));
    let code = cli_run(&env, &["predict", "--config", ws.config.to_str().unwrap(), "--run-id", "auth"]);
    assert_eq!(code, 3);
}

#[test]
fn structure_only_strategy_without_store_uses_all_labeled() {
    let tmp = tempfile::tempdir().unwrap();
    let ws = write_workspace(tmp.path(), "", "[run]\nstrategy = \"zeroshot\"\nformat = \"smiles\"\n");
    let (env, _) = offline_env();
    let run = cmd_predict(&ws.load_config(), &env, ws.dir.join("runs"), Some("z".into()));
    // No fixtures were recorded, so every request misses: provider error,
    // but only after all 14 labeled compounds were attempted.
    let err = run.unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("all 14 requests"), "{err}");
}
