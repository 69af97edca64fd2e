//! Consolidates the artifacts of a run directory into one JSON document and
//! a flat CSV, validating the JSON against the shipped schema.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fairmap_core::eval::{read_pareto_csv, TrialOutcome};
use serde_json::{json, Map, Value};

use crate::commands::{
    load_trials, CONFIG_FILE, CROSSVAL_FILE, FINGERPRINT_FILE, FRONT_FILE, HISTORY_FILE,
    METRICS_FILE, SCENARIO_FILE, SELECTION_FILE, TRIALS_DIR,
};

pub const SCHEMA: &str = include_str!("../schema/report.schema.json");
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

fn read_json(path: &Path) -> Result<Option<Value>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    Ok(Some(
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    ))
}

/// CSV rows as JSON objects; numeric and boolean cells are typed.
fn read_csv_objects(path: &Path) -> Result<Option<Vec<Map<String, Value>>>> {
    if !path.is_file() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header = r.headers()?.clone();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut obj = Map::new();
        for (h, cell) in header.iter().zip(rec.iter()) {
            let v = if let Ok(x) = cell.parse::<f64>() {
                json!(x)
            } else if let Ok(b) = cell.parse::<bool>() {
                json!(b)
            } else {
                json!(cell)
            };
            obj.insert(h.to_string(), v);
        }
        rows.push(obj);
    }
    Ok(Some(rows))
}

pub fn validate(report: &Value) -> Result<()> {
    let schema: Value = serde_json::from_str(SCHEMA).expect("shipped schema is valid JSON");
    let validator = jsonschema::validator_for(&schema).expect("shipped schema compiles");
    let errors: Vec<String> = validator
        .iter_errors(report)
        .map(|e| format!("{} at {}", e, e.instance_path))
        .collect();
    if !errors.is_empty() {
        bail!("report does not match its schema:\n  {}", errors.join("\n  "));
    }
    Ok(())
}

pub fn build(run_dir: &Path) -> Result<Value> {
    if !run_dir.is_dir() {
        bail!("run directory {} does not exist", run_dir.display());
    }
    let config = read_json(&run_dir.join(CONFIG_FILE))?;
    let fingerprint = fs::read_to_string(run_dir.join(FINGERPRINT_FILE))
        .ok()
        .map(|s| s.trim().to_string());
    let model_metrics = read_json(&run_dir.join(METRICS_FILE))?;
    let history = read_csv_objects(&run_dir.join(HISTORY_FILE))?.map(|rows| {
        json!({
            "epochs": rows.len(),
            "last": rows.last().cloned().unwrap_or_default(),
        })
    });
    let trials_dir = run_dir.join(TRIALS_DIR);
    let trials = if trials_dir.is_dir() {
        let records = load_trials(&trials_dir)?;
        let mut points = Vec::new();
        let mut failed = Vec::new();
        for r in &records {
            match &r.outcome {
                TrialOutcome::Completed { point } => points.push(json!({
                    "model_id": point.model_id,
                    "config_digest": point.hyperparameters.config_digest,
                    "weights": point.hyperparameters.weights,
                    "metrics": point.metrics,
                })),
                TrialOutcome::Failed { error, .. } => {
                    failed.push(json!({ "trial": r.trial, "error": error }))
                }
            }
        }
        Some(json!({ "completed": points.len(), "failed": failed, "points": points }))
    } else {
        None
    };
    let front_path = run_dir.join(FRONT_FILE);
    let front = if front_path.is_file() {
        let pts = read_pareto_csv(fs::File::open(&front_path)?)?;
        Some(json!(pts.iter().map(|p| p.model_id).collect::<Vec<_>>()))
    } else {
        None
    };
    let selection = read_json(&run_dir.join(SELECTION_FILE))?;
    let scenarios = read_csv_objects(&run_dir.join(SCENARIO_FILE))?;
    let crossval = read_csv_objects(&run_dir.join(CROSSVAL_FILE))?;
    let sections = [
        model_metrics.is_some(),
        history.is_some(),
        trials.is_some(),
        front.is_some(),
        selection.is_some(),
        scenarios.is_some(),
        crossval.is_some(),
    ];
    if !sections.iter().any(|&s| s) {
        bail!("no run artifacts found in {}", run_dir.display());
    }
    Ok(json!({
        "version": 1,
        "config": config,
        "fingerprint": fingerprint,
        "model_metrics": model_metrics,
        "history": history,
        "trials": trials,
        "front": front,
        "selection": selection,
        "scenarios": scenarios,
        "crossval": crossval,
    }))
}

/// Flat `section,id,metric,value` view of the report.
fn flat_rows(report: &Value) -> Vec<[String; 4]> {
    let mut rows = Vec::new();
    let mut push_map = |section: &str, id: String, map: &Value| {
        if let Some(m) = map.as_object() {
            for (k, v) in m {
                if v.is_number() || v.is_boolean() {
                    rows.push([section.to_string(), id.clone(), k.clone(), v.to_string()]);
                }
            }
        }
    };
    push_map("model", String::new(), &report["model_metrics"]);
    if let Some(h) = report["history"].as_object() {
        push_map("history_last", h["epochs"].to_string(), &h["last"]);
    }
    if let Some(points) = report["trials"]["points"].as_array() {
        for p in points {
            push_map("trial", p["model_id"].to_string(), &p["metrics"]);
        }
    }
    if report["selection"].is_object() {
        let s = &report["selection"];
        let id = s["model_id"].to_string();
        push_map("selection", id.clone(), &s["metrics"]);
        push_map("selection", id, &json!({ "score": s["score"] }));
    }
    if let Some(list) = report["scenarios"].as_array() {
        for s in list {
            let id = format!(
                "{}/{}/{}",
                s["scenario"].as_str().unwrap_or_default(),
                s["variant"].as_str().unwrap_or_default(),
                s["classifier"].as_str().unwrap_or_default()
            );
            push_map("scenario", id, s);
        }
    }
    if let Some(list) = report["crossval"].as_array() {
        for r in list {
            let metric = r["metric"].as_str().unwrap_or_default().to_string();
            push_map("crossval", metric, &json!({ "mean": r["mean"], "std": r["std"] }));
        }
    }
    rows
}

/// Builds, validates and writes `report.json` and `report.csv`.
pub fn write(run_dir: &Path) -> Result<Value> {
    let report = build(run_dir)?;
    validate(&report)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    fs::write(run_dir.join(REPORT_JSON), text)?;
    let mut w = csv::Writer::from_path(run_dir.join(REPORT_CSV))?;
    w.write_record(["section", "id", "metric", "value"])?;
    for row in flat_rows(&report) {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(report)
}
