//! End-to-end orchestration: dataset ingestion, balanced subset, grouped
//! splits and folds, cross-testing evaluation, the deployable predictor and
//! a manifest tying the artifacts together.
//!
//! Every run writes its fully resolved configuration into the manifest, so a
//! run is reproducible from the manifest alone. Artifacts are written under
//! a `.partial` name and renamed on completion; an aborted stage leaves the
//! partial file in place for inspection.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    assign_folds, assign_splits, build_balanced_subset, load_dataset, write_fold_csv,
    write_id_csv, write_split_csv, Dataset, FoldAssignment, Split, SplitAssignment,
};
use crate::error::{Error, Result, Stage};
use crate::evaluation::{
    config_digest, cross_test, cross_validate, fit_fold_predictor, EvaluationReport,
    PipelineParams,
};
use crate::predictor::Predictor;

pub const DEFAULT_CONDITION_CAP: usize = 1500;
pub const DEFAULT_NORMAL_COUNT: usize = 5000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub features: PathBuf,
    pub labels: PathBuf,
    pub params: PipelineParams,
    #[serde(default = "default_cap")]
    pub per_condition_cap: usize,
    #[serde(default = "default_normals")]
    pub normal_count: usize,
    /// `test` (cross-testing, the default) or `cv` (cross-validation).
    #[serde(default = "default_protocol")]
    pub protocol: String,
}

fn default_cap() -> usize {
    DEFAULT_CONDITION_CAP
}

fn default_normals() -> usize {
    DEFAULT_NORMAL_COUNT
}

fn default_protocol() -> String {
    "test".into()
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageEvent {
    pub stage: String,
    pub elapsed_ms: u128,
    pub details: serde_json::Value,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: EvaluationReport,
    pub predictor: Predictor,
    pub manifest: serde_json::Value,
    pub out_dir: PathBuf,
}

/// Write through a `.partial` name so interrupted artifacts are recognizable.
fn write_artifact(path: &Path, contents: &[u8]) -> Result<()> {
    let partial = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.partial", ext.to_string_lossy()),
        None => "partial".into(),
    });
    std::fs::write(&partial, contents)?;
    std::fs::rename(&partial, path)?;
    Ok(())
}

struct StageTimer<'a> {
    sink: &'a mut dyn FnMut(&StageEvent),
}

impl<'a> StageTimer<'a> {
    fn run<T>(
        &mut self,
        stage: Stage,
        details: impl FnOnce(&T) -> serde_json::Value,
        body: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let start = Instant::now();
        let value = body().map_err(|e| e.in_stage(stage))?;
        (self.sink)(&StageEvent {
            stage: stage.name().into(),
            elapsed_ms: start.elapsed().as_millis(),
            details: details(&value),
        });
        Ok(value)
    }
}

/// Run the whole pipeline and write every artifact under `out_dir`.
///
/// Stages: dataset -> split -> evaluation -> predictor -> manifest. The
/// evaluation stage runs the configured fold protocol; the predictor stage
/// refits on every non-LEARN sample (the largest reference set available)
/// and serializes the deployable bundle.
pub fn run_pipeline(
    config: &RunConfig,
    out_dir: &Path,
    event_sink: &mut dyn FnMut(&StageEvent),
) -> Result<RunOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut timer = StageTimer { sink: event_sink };
    let params = &config.params;

    let dataset: Dataset = timer.run(
        Stage::Dataset,
        |d: &Dataset| serde_json::json!({"samples": d.n_samples(), "conditions": d.n_conditions()}),
        || load_dataset(&config.features, &config.labels),
    )?;

    let (splits, valid_folds, test_folds) = timer.run(
        Stage::Dataset,
        |(s, _, _): &(SplitAssignment, FoldAssignment, FoldAssignment)| {
            serde_json::json!({
                "learn": s.ids_in(Split::Learn).len(),
                "valid": s.ids_in(Split::Valid).len(),
                "test": s.ids_in(Split::Test).len(),
            })
        },
        || {
            let balanced = build_balanced_subset(
                &dataset,
                params.m,
                config.per_condition_cap,
                config.normal_count,
                params.seed,
            )?;
            let splits = assign_splits(&dataset, &balanced, params.seed)?;
            let folds_over = |split: Split| -> Result<FoldAssignment> {
                let mut ids = Vec::new();
                let mut patients = Vec::new();
                for r in &dataset.records {
                    if splits.get(&r.sample_id) == Some(split) {
                        ids.push(r.sample_id.clone());
                        patients.push(r.patient_id.clone());
                    }
                }
                assign_folds(&ids, &patients, params.n_folds, params.seed)
            };
            let valid_folds = folds_over(Split::Valid)?;
            let test_folds = folds_over(Split::Test)?;
            write_id_csv(&balanced, &out_dir.join("balanced.csv"))?;
            write_split_csv(&splits, &out_dir.join("splits.csv"))?;
            write_fold_csv(&valid_folds, &out_dir.join("folds_valid.csv"))?;
            write_fold_csv(&test_folds, &out_dir.join("folds_test.csv"))?;
            Ok((splits, valid_folds, test_folds))
        },
    )?;

    let report = timer.run(
        Stage::Evaluation,
        |r: &EvaluationReport| {
            serde_json::json!({"average_auc": r.average_auc, "average_auc_rare": r.average_auc_rare})
        },
        || {
            let report = match config.protocol.as_str() {
                "cv" => cross_validate(&dataset, &splits, &valid_folds, params)?,
                "test" => cross_test(&dataset, &splits, &test_folds, params)?,
                other => {
                    return Err(Error::InvalidParameter {
                        name: "protocol".into(),
                        message: format!("expected \"cv\" or \"test\", got {other:?}"),
                    })
                }
            };
            write_artifact(&out_dir.join("report.json"), report.to_json()?.as_bytes())?;
            let roc_dir = out_dir.join("roc");
            std::fs::create_dir_all(&roc_dir)?;
            for outcome in &report.conditions {
                if let Some(roc) = &outcome.roc {
                    roc.write_csv(&roc_dir.join(format!("{:02}_{}.csv", outcome.index, outcome.name)))?;
                }
            }
            Ok(report)
        },
    )?;

    let predictor = timer.run(
        Stage::Predictor,
        |p: &Predictor| serde_json::json!({"references": p.reference_pi.nrows(), "k": p.k}),
        || {
            // Deploy with the widest labeled reference pool: everything the
            // CNN-training split never saw.
            let reference: Vec<usize> = dataset
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| {
                    matches!(splits.get(&r.sample_id), Some(Split::Valid) | Some(Split::Test))
                })
                .map(|(i, _)| i)
                .collect();
            let (predictor, _) = fit_fold_predictor(&dataset, &reference, params, 0)?;
            write_artifact(&out_dir.join("predictor.json"), predictor.to_json()?.as_bytes())?;
            Ok(predictor)
        },
    )?;

    let manifest = timer.run(
        Stage::Io,
        |_| serde_json::json!({}),
        || {
            let mut artifacts = vec![
                "balanced.csv".to_string(),
                "splits.csv".into(),
                "folds_valid.csv".into(),
                "folds_test.csv".into(),
                "report.json".into(),
                "predictor.json".into(),
            ];
            for outcome in &report.conditions {
                if outcome.roc.is_some() {
                    artifacts.push(format!("roc/{:02}_{}.csv", outcome.index, outcome.name));
                }
            }
            let manifest = serde_json::json!({
                "config": config,
                "config_digest": config_digest(config),
                "artifacts": artifacts,
                "report_digest": config_digest(&report),
            });
            write_artifact(
                &out_dir.join("manifest.json"),
                serde_json::to_string_pretty(&manifest)?.as_bytes(),
            )?;
            Ok(manifest)
        },
    )?;

    Ok(RunOutcome {
        report,
        predictor,
        manifest,
        out_dir: out_dir.to_path_buf(),
    })
}
