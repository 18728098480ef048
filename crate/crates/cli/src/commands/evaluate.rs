use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cotox_core::eval::{evaluate, EvalReport};
use cotox_core::report::{render_comparison, render_eval_report, RunManifest};
use cotox_core::response::read_exchange_jsonl;

use crate::commands::predict::{method_name, MANIFEST_FILE};
use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{create_dir, load_labels, write_file};

pub const REPORT_FILE: &str = "report.md";
pub const EVAL_JSON_FILE: &str = "eval.json";

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateSummary {
    pub report_path: PathBuf,
    pub reports: Vec<(String, EvalReport)>,
}

impl std::fmt::Display for EvaluateSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, r) in &self.reports {
            writeln!(f, "{name}: macro F1 {:.3} over {} compounds", r.macro_f1, r.n_compounds)?;
        }
        write!(f, "report written to {}", self.report_path.display())
    }
}

/// Method name and parse-failure count from the manifest next to a
/// predictions file, when there is one.
fn manifest_info(predictions: &Path) -> CliResult<(Option<String>, usize)> {
    let Some(dir) = predictions.parent() else { return Ok((None, 0)) };
    let path = dir.join(MANIFEST_FILE);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((None, 0)),
        Err(e) => return Err(CliError::data(format!("reading {}: {e}", path.display()))),
    };
    let m: RunManifest =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: invalid manifest: {e}", path.display())))?;
    Ok((Some(method_name(m.strategy, m.format)), m.parse_failure_count()))
}

fn fallback_name(predictions: &Path) -> String {
    predictions
        .parent()
        .and_then(|d| d.file_name())
        .or_else(|| predictions.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "predictions".into())
}

/// Scores each predictions file against the labels and writes `report.md`
/// (plus `eval.json`) into `out`, or next to the first file.
pub fn cmd_evaluate(cfg: &PipelineConfig, files: &[PathBuf], out: Option<&Path>) -> CliResult<EvaluateSummary> {
    if files.is_empty() {
        return Err(CliError::config("evaluate needs at least one predictions file"));
    }
    let labels = load_labels(cfg)?;
    let mut reports: Vec<(String, EvalReport)> = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for file in files {
        let text = std::fs::read_to_string(file).map_err(|e| CliError::data(format!("reading {}: {e}", file.display())))?;
        let preds = read_exchange_jsonl(&text).map_err(|e| CliError::data(format!("{}: {e}", file.display())))?;
        let (name, parse_failures) = manifest_info(file)?;
        let mut name = name.unwrap_or_else(|| fallback_name(file));
        let n = seen.entry(name.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            name = format!("{name} ({n})");
        }
        let report = evaluate(&preds, &labels.records, parse_failures, cfg.eval.k, cfg.eval.seed)
            .map_err(|e| CliError::data(format!("{}: {e}", file.display())))?;
        reports.push((name, report));
    }

    let mut md = String::new();
    if reports.len() > 1 {
        md.push_str("# Comparison\n\n");
        md.push_str(&render_comparison(&reports));
        md.push('\n');
    }
    for (i, (name, report)) in reports.iter().enumerate() {
        if i > 0 || reports.len() > 1 {
            md.push('\n');
        }
        md.push_str(&render_eval_report(name, report));
    }

    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => files[0].parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
    };
    create_dir(&dir)?;
    let report_path = dir.join(REPORT_FILE);
    write_file(&report_path, md.as_bytes())?;
    let json: BTreeMap<&str, &EvalReport> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let mut json = serde_json::to_string_pretty(&json).expect("reports serialize");
    json.push('\n');
    write_file(&dir.join(EVAL_JSON_FILE), json.as_bytes())?;
    Ok(EvaluateSummary { report_path, reports })
}
