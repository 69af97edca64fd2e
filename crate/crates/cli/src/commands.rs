//! One function per subcommand. Every output lands under the configured
//! output directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use fairmap_core::data::{write_csv, Encoder};
use fairmap_core::eval::{
    self, completed_points, evaluate_model, pareto_front, read_pareto_csv, run_all_scenarios,
    select_tradeoff, sweep_split, trial_config, write_crossval_csv, write_pareto_csv,
    write_scenario_csv, LabeledSplit, SelectionCoefficients, TrialOutcome, TrialRecord,
};
use fairmap_core::{MappingEnsemble, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_DIR: &str = "model";
pub const TRIALS_DIR: &str = "trials";
pub const PARETO_FILE: &str = "pareto.csv";
pub const FRONT_FILE: &str = "front.csv";
pub const SELECTION_FILE: &str = "selection.json";
pub const SCENARIO_FILE: &str = "scenarios.csv";
pub const CROSSVAL_FILE: &str = "crossval.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const FINGERPRINT_FILE: &str = "fingerprint.txt";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).with_context(|| format!("creating {}", path.display()))
}

/// Creates the output directory and echoes the effective configuration.
fn start(config: &RunConfig) -> Result<PathBuf> {
    let out = config.output_dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join(CONFIG_FILE), config)?;
    Ok(out)
}

pub fn prepare(config: &RunConfig) -> Result<()> {
    let ds = config.load_dataset()?;
    let out = start(config)?;
    let encoder = Encoder::fit(&ds);
    let encoded = encoder.encode(&ds)?;
    write_csv(&ds, &out.join("dataset.csv"))?;
    write_json(&out.join("encoder.json"), &encoder)?;
    let mut w = csv::Writer::from_writer(create(&out.join("encoded.csv"))?);
    let mut header: Vec<String> = (0..encoded.ncols()).map(|c| format!("x{c}")).collect();
    header.push("group".into());
    w.write_record(&header)?;
    for (row, g) in encoded.values.rows().into_iter().zip(&encoded.groups) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(g.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    let fp = ds.fingerprint();
    fs::write(out.join(FINGERPRINT_FILE), format!("{fp}\n"))?;
    println!("{} rows, {} groups, fingerprint {fp}", ds.len(), ds.k());
    Ok(())
}

pub fn train(config: &RunConfig) -> Result<()> {
    let ds = config.load_dataset()?;
    let out = start(config)?;
    let (train, test) = sweep_split(&ds, &config.sweep, config.seed())?;
    let ensemble = fairmap_core::mapping::train(&train, &config.train)?;
    ensemble.save(&out.join(MODEL_DIR))?;
    let mut w = csv::Writer::from_writer(create(&out.join(HISTORY_FILE))?);
    for rec in &ensemble.history {
        w.serialize(rec)?;
    }
    w.flush()?;
    let split = LabeledSplit::new(&ensemble.encoder, &train, &test)?;
    let metrics = evaluate_model(&ensemble, &split, &config.eval, config.seed())?;
    write_json(&out.join(METRICS_FILE), &metrics)?;
    if let Some(last) = ensemble.history.last() {
        println!(
            "trained {:?} for {} epochs: generator {:.6} discriminator {:.6}",
            ensemble.config.mode,
            ensemble.history.len(),
            last.generator,
            last.discriminator
        );
    }
    Ok(())
}

fn trial_path(dir: &Path, trial: usize) -> PathBuf {
    dir.join(format!("trial_{trial:05}.json"))
}

/// Trial records already on disk, keyed by trial index.
pub fn load_trials(dir: &Path) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(&path)?;
            let rec: TrialRecord = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            out.push(rec);
        }
    }
    out.sort_by_key(|r| r.trial);
    Ok(out)
}

pub fn sweep(config: &RunConfig, resume: bool) -> Result<()> {
    let ds = config.load_dataset()?;
    let out = start(config)?;
    let trials_dir = out.join(TRIALS_DIR);
    if !resume && trials_dir.exists() {
        fs::remove_dir_all(&trials_dir)?;
    }
    fs::create_dir_all(&trials_dir)?;
    let done: BTreeSet<usize> = load_trials(&trials_dir)?
        .into_iter()
        .filter(|r| r.trial < config.sweep.budget)
        .map(|r| r.trial)
        .collect();
    if !done.is_empty() {
        log::info!("resuming: {} of {} trials already done", done.len(), config.sweep.budget);
    }
    let write_error: Mutex<Option<anyhow::Error>> = Mutex::new(None);
    eval::sweep_with(
        &ds,
        &config.train,
        &config.sweep,
        &config.eval,
        config.seed(),
        &done,
        &|rec| {
            if let Err(e) = write_json(&trial_path(&trials_dir, rec.trial), rec) {
                write_error.lock().expect("poisoned").get_or_insert(e);
            }
            log::info!("trial {} finished", rec.trial);
        },
    )?;
    if let Some(e) = write_error.into_inner().expect("poisoned") {
        return Err(e);
    }
    let records: Vec<TrialRecord> = load_trials(&trials_dir)?
        .into_iter()
        .filter(|r| r.trial < config.sweep.budget)
        .collect();
    let failed = records
        .iter()
        .filter(|r| matches!(r.outcome, TrialOutcome::Failed { .. }))
        .count();
    let points = completed_points(&records);
    write_pareto_csv(create(&out.join(PARETO_FILE))?, &points)?;
    if !points.is_empty() {
        let front = pareto_front(&points, &config.eval.perspective)?;
        write_pareto_csv(create(&out.join(FRONT_FILE))?, &front)?;
        println!(
            "{} trials completed, {failed} failed, {} on the front",
            points.len(),
            front.len()
        );
    } else {
        println!("no trial completed, {failed} failed");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub model_id: usize,
    pub score: f64,
    pub k: usize,
    pub coefficients: SelectionCoefficients,
    pub metrics: std::collections::BTreeMap<String, f64>,
    /// Present when the sweep configuration was available to rebuild it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
}

pub struct SelectArgs {
    pub pareto: Option<PathBuf>,
    pub k: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn select(config: Option<&RunConfig>, args: &SelectArgs) -> Result<()> {
    let pareto = match (&args.pareto, config) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => c.output_dir.join(PARETO_FILE),
        (None, None) => bail!("select needs --pareto or --config"),
    };
    let k = match (args.k, config) {
        (Some(k), _) => k,
        (None, Some(c)) => c.load_dataset()?.k(),
        (None, None) => bail!("select needs --k or --config"),
    };
    let points = read_pareto_csv(
        fs::File::open(&pareto).with_context(|| format!("opening {}", pareto.display()))?,
    )?;
    if points.is_empty() {
        bail!("{} holds no points", pareto.display());
    }
    let (perspective, coeffs) = match config {
        Some(c) => (
            c.eval.perspective,
            c.eval.coefficients.unwrap_or(SelectionCoefficients::for_groups(k)),
        ),
        None => (
            eval::Perspective::new(eval::PerspectiveName::Fairmapping),
            SelectionCoefficients::for_groups(k),
        ),
    };
    let front = pareto_front(&points, &perspective)?;
    let chosen = select_tradeoff(&front, &coeffs, k)?;
    let train_config = config.map(|c| trial_config(&c.train, &c.sweep, c.seed(), chosen.point.model_id));
    let file = SelectionFile {
        model_id: chosen.point.model_id,
        score: chosen.score,
        k,
        coefficients: coeffs,
        metrics: chosen.point.metrics.clone(),
        train_config,
    };
    let out = match (&args.out, config) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => c.output_dir.clone(),
        (None, None) => pareto
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    fs::create_dir_all(&out)?;
    write_json(&out.join(SELECTION_FILE), &file)?;
    println!("selected model {} with score {:.6}", file.model_id, file.score);
    Ok(())
}

pub fn scenario(config: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let dir = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output_dir.join(MODEL_DIR));
    if !dir.join("manifest.json").is_file() {
        bail!("no checkpoint at {}", dir.display());
    }
    let ensemble = MappingEnsemble::load(&dir)?;
    let ds = config.load_dataset()?;
    let out = start(config)?;
    let (train, test) = sweep_split(&ds, &config.sweep, config.seed())?;
    let split = LabeledSplit::new(&ensemble.encoder, &train, &test)?;
    let results = run_all_scenarios(
        &ensemble,
        &split,
        &config.eval.comparison_classifiers,
        config.seed(),
    )?;
    write_scenario_csv(create(&out.join(SCENARIO_FILE))?, &results)?;
    println!("{} scenario rows written", results.len());
    Ok(())
}

pub fn crossval(config: &RunConfig, selection: Option<&Path>, folds: usize) -> Result<()> {
    let path = selection
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.output_dir.join(SELECTION_FILE));
    let train_config = if path.is_file() {
        let sel: SelectionFile = serde_json::from_str(&fs::read_to_string(&path)?)
            .with_context(|| format!("parsing {}", path.display()))?;
        sel.train_config.unwrap_or_else(|| config.train.clone())
    } else if selection.is_some() {
        bail!("no selection at {}", path.display());
    } else {
        config.train.clone()
    };
    let ds = config.load_dataset()?;
    let out = start(config)?;
    let rows = eval::crossval(&ds, &train_config, &config.eval, folds, config.seed())?;
    write_crossval_csv(create(&out.join(CROSSVAL_FILE))?, &rows)?;
    for r in &rows {
        println!("{:<12} {:.4} ± {:.4}", r.metric, r.mean, r.std);
    }
    Ok(())
}
