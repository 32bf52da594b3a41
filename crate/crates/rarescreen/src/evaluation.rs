//! ROC analysis and the grouped cross-validation / cross-testing protocol.
//!
//! AUC is computed as the Mann-Whitney statistic with half credit for tied
//! pairs, which equals trapezoidal integration of the tie-grouped curve.
//! The protocols rebuild the whole reduction + density + regression pipeline
//! per fold on that fold's reference set, score the held-out fold, and pool
//! every fold's predictions into a single ROC per condition.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FoldAssignment, Split, SplitAssignment};
use crate::density::{fit_condition_models, KernelMode};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::pca::{self, PcaModel};
use crate::predictor::{Predictor, PredictorMetadata};
use crate::tsne::{fit_tsne, KernelVariant, TsneConfig};

// ---------------------------------------------------------------------------
// ROC / AUC
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Score threshold producing this operating point; the origin carries
    /// +infinity (serialized as null in JSON, `inf` in CSV).
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub condition: String,
    pub auc: f64,
    pub points: Vec<RocPoint>,
    pub positives: usize,
    pub negatives: usize,
}

/// ROC curve and AUC for one condition. AUC is
/// (#concordant + 0.5 * #tied) / (positives * negatives); the curve is a
/// descending-threshold sweep with tied scores grouped.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "roc_auc".into(),
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            context: "roc_auc scores".into(),
        });
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass(if positives == 0 {
            "no positive samples".into()
        } else {
            "no negative samples".into()
        }));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut cum_tp, mut cum_fp) = (0usize, 0usize);
    let (mut concordant, mut tied) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        let mut j = i;
        let (mut pos_g, mut neg_g) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == score {
            if labels[order[j]] == 1 {
                pos_g += 1;
            } else {
                neg_g += 1;
            }
            j += 1;
        }
        cum_tp += pos_g;
        cum_fp += neg_g;
        concordant += pos_g as u64 * (negatives - cum_fp) as u64;
        tied += pos_g as u64 * neg_g as u64;
        points.push(RocPoint {
            fpr: cum_fp as f64 / negatives as f64,
            tpr: cum_tp as f64 / positives as f64,
            threshold: score,
        });
        i = j;
    }
    let auc = (concordant as f64 + 0.5 * tied as f64) / (positives as f64 * negatives as f64);
    Ok(RocResult {
        condition: String::new(),
        auc,
        points,
        positives,
        negatives,
    })
}

impl RocResult {
    /// Trapezoidal area under the stored operating points.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }

    /// Plot-ready `fpr,tpr,threshold` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["fpr", "tpr", "threshold"])?;
        for p in &self.points {
            w.write_record([
                format!("{}", p.fpr),
                format!("{}", p.tpr),
                format!("{}", p.threshold),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pipeline parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    /// Number of frequent conditions; conditions beyond index M are rare.
    pub m: usize,
    /// PCA dimension; `None` skips the projection and works in the raw
    /// feature space.
    pub p_prime: Option<usize>,
    /// Embedding dimension P''.
    pub output_dim: usize,
    pub perplexity: f64,
    /// Neighbor count for the regression.
    pub k: usize,
    pub tsne_iterations: usize,
    pub tsne_learning_rate: f64,
    pub kernel_variant: KernelVariant,
    pub kernel_mode: KernelMode,
    pub n_folds: usize,
    pub seed: u64,
}

impl PipelineParams {
    /// Parameter defaults: P' = 50, P'' = 2, perplexity 30, K = 3, ten folds.
    pub fn defaults(m: usize, seed: u64) -> Self {
        PipelineParams {
            m,
            p_prime: Some(50),
            output_dim: 2,
            perplexity: 30.0,
            k: 3,
            tsne_iterations: crate::tsne::DEFAULT_ITERATIONS,
            tsne_learning_rate: crate::tsne::DEFAULT_LEARNING_RATE,
            kernel_variant: KernelVariant::default(),
            kernel_mode: KernelMode::default(),
            n_folds: 10,
            seed,
        }
    }

    fn tsne_config(&self, fold: usize) -> TsneConfig {
        TsneConfig {
            perplexity: self.perplexity,
            output_dim: self.output_dim,
            iterations: self.tsne_iterations,
            learning_rate: self.tsne_learning_rate,
            kernel_variant: self.kernel_variant,
            // Each fold's embedding gets its own deterministic stream.
            seed: self.seed.wrapping_add(fold as u64),
            ..TsneConfig::default()
        }
    }

    pub fn digest(&self) -> String {
        config_digest(self)
    }
}

/// FNV-1a over the canonical JSON encoding; hex string for reports.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in json.as_bytes() {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{hash:016x}")
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionOutcome {
    /// 1-based condition index in frequency order.
    pub index: usize,
    pub name: String,
    /// Present when a pooled ROC could be built.
    pub roc: Option<RocResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped_reason: Option<String>,
    /// Folds that contributed predictions for this condition.
    pub folds_used: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mode: String,
    pub m: usize,
    pub conditions: Vec<ConditionOutcome>,
    /// Mean AUC over all conditions with a defined ROC.
    pub average_auc: Option<f64>,
    /// Mean AUC over rare conditions (1-based index > M).
    pub average_auc_rare: Option<f64>,
    pub fold_reference_sizes: Vec<usize>,
    pub config_digest: String,
    pub params: PipelineParams,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Protocol {
    CrossValidation,
    CrossTesting,
}

/// Ten-fold cross-validation over the validation split: each fold's models
/// are built from the remaining validation samples and score the held-out
/// fold; predictions are pooled into one ROC per condition.
pub fn cross_validate(
    dataset: &Dataset,
    splits: &SplitAssignment,
    folds: &FoldAssignment,
    params: &PipelineParams,
) -> Result<EvaluationReport> {
    run_protocol(dataset, splits, folds, params, Protocol::CrossValidation)
}

/// Cross-testing: fold models are built from the whole validation split plus
/// the other nine test folds, and score the held-out test fold.
pub fn cross_test(
    dataset: &Dataset,
    splits: &SplitAssignment,
    folds: &FoldAssignment,
    params: &PipelineParams,
) -> Result<EvaluationReport> {
    run_protocol(dataset, splits, folds, params, Protocol::CrossTesting)
}

struct FoldRun {
    reference_size: usize,
    /// Indices into `dataset.records` of the scored samples.
    predicted: Vec<usize>,
    scores: Mat,
    /// Conditions without a usable model in this fold.
    omitted: HashSet<usize>,
}

fn run_protocol(
    dataset: &Dataset,
    splits: &SplitAssignment,
    folds: &FoldAssignment,
    params: &PipelineParams,
    protocol: Protocol,
) -> Result<EvaluationReport> {
    let fold_runs: Vec<FoldRun> = (0..folds.n_folds)
        .into_par_iter()
        .map(|f| run_fold(dataset, splits, folds, params, protocol, f))
        .collect::<Result<_>>()?;

    let n_cond = dataset.n_conditions();
    let mut conditions = Vec::with_capacity(n_cond);
    for c in 0..n_cond {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        let mut folds_used = 0;
        for run in &fold_runs {
            if run.omitted.contains(&c) {
                continue;
            }
            folds_used += 1;
            for (row, &rec) in run.predicted.iter().enumerate() {
                scores.push(run.scores.get(row, c));
                labels.push(dataset.records[rec].labels[c]);
            }
        }
        let outcome = if folds_used == 0 {
            ConditionOutcome {
                index: c + 1,
                name: dataset.condition_names[c].clone(),
                roc: None,
                skipped_reason: Some("no fold had both classes in its reference set".into()),
                folds_used,
            }
        } else {
            match roc_auc(&scores, &labels) {
                Ok(mut roc) => {
                    roc.condition = dataset.condition_names[c].clone();
                    ConditionOutcome {
                        index: c + 1,
                        name: dataset.condition_names[c].clone(),
                        roc: Some(roc),
                        skipped_reason: None,
                        folds_used,
                    }
                }
                Err(Error::SingleClass(reason)) => ConditionOutcome {
                    index: c + 1,
                    name: dataset.condition_names[c].clone(),
                    roc: None,
                    skipped_reason: Some(reason),
                    folds_used,
                },
                Err(e) => return Err(e),
            }
        };
        conditions.push(outcome);
    }

    let mean = |outcomes: &[&ConditionOutcome]| -> Option<f64> {
        let aucs: Vec<f64> = outcomes
            .iter()
            .filter_map(|o| o.roc.as_ref().map(|r| r.auc))
            .collect();
        if aucs.is_empty() {
            None
        } else {
            Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
        }
    };
    let all: Vec<&ConditionOutcome> = conditions.iter().collect();
    let rare: Vec<&ConditionOutcome> = conditions.iter().filter(|o| o.index > params.m).collect();

    Ok(EvaluationReport {
        mode: match protocol {
            Protocol::CrossValidation => "cross_validation".into(),
            Protocol::CrossTesting => "cross_testing".into(),
        },
        m: params.m,
        average_auc: mean(&all),
        average_auc_rare: mean(&rare),
        conditions,
        fold_reference_sizes: fold_runs.iter().map(|r| r.reference_size).collect(),
        config_digest: params.digest(),
        params: params.clone(),
    })
}

fn run_fold(
    dataset: &Dataset,
    splits: &SplitAssignment,
    folds: &FoldAssignment,
    params: &PipelineParams,
    protocol: Protocol,
    fold: usize,
) -> Result<FoldRun> {
    let mut reference = Vec::new();
    let mut predicted = Vec::new();
    for (i, r) in dataset.records.iter().enumerate() {
        let split = splits.get(&r.sample_id);
        let sample_fold = folds.fold_of(&r.sample_id);
        match protocol {
            Protocol::CrossValidation => {
                if split == Some(Split::Valid) {
                    match sample_fold {
                        Some(f) if f == fold => predicted.push(i),
                        Some(_) => reference.push(i),
                        None => {}
                    }
                }
            }
            Protocol::CrossTesting => match split {
                Some(Split::Valid) => reference.push(i),
                Some(Split::Test) => match sample_fold {
                    Some(f) if f == fold => predicted.push(i),
                    Some(_) => reference.push(i),
                    None => {}
                },
                _ => {}
            },
        }
    }

    // No patient may sit on both sides of a fold iteration.
    let ref_patients: HashSet<&str> = reference
        .iter()
        .map(|&i| dataset.records[i].patient_id.as_str())
        .collect();
    for &i in &predicted {
        if ref_patients.contains(dataset.records[i].patient_id.as_str()) {
            return Err(Error::PatientLeak {
                patient: dataset.records[i].patient_id.clone(),
                fold,
            });
        }
    }

    let (predictor, omitted) = fit_fold_predictor(dataset, &reference, params, fold)?;
    let predict_features =
        Mat::from_rows(&predicted.iter().map(|&i| dataset.records[i].features.clone()).collect::<Vec<_>>());
    let scores = predictor.predict_batch(&predict_features)?;
    Ok(FoldRun {
        reference_size: reference.len(),
        predicted,
        scores,
        omitted,
    })
}

/// Fit reduction, embedding, densities and the regression predictor on the
/// given reference records. Shared by the protocols and the final artifact.
pub(crate) fn fit_fold_predictor(
    dataset: &Dataset,
    reference: &[usize],
    params: &PipelineParams,
    fold: usize,
) -> Result<(Predictor, HashSet<usize>)> {
    let ref_features =
        Mat::from_rows(&reference.iter().map(|&i| dataset.records[i].features.clone()).collect::<Vec<_>>());
    let ref_ids: Vec<String> = reference
        .iter()
        .map(|&i| dataset.records[i].sample_id.clone())
        .collect();
    let ref_labels: Vec<Vec<u8>> = reference
        .iter()
        .map(|&i| dataset.records[i].labels.clone())
        .collect();

    let (pca_model, pi): (Option<PcaModel>, Mat) = match params.p_prime {
        Some(p_prime) => {
            let model = pca::fit_pca(&ref_features, p_prime)?;
            let pi = pca::project_batch(&model, &ref_features)?;
            (Some(model), pi)
        }
        None => (None, ref_features),
    };

    let embedding = fit_tsne(&pi, &ref_ids, &params.tsne_config(fold))?;
    let fit = fit_condition_models(
        &embedding,
        &ref_labels,
        &dataset.condition_names,
        params.kernel_mode,
    )?;
    let omitted: HashSet<usize> = fit.omitted.iter().map(|o| o.index).collect();

    let predictor = Predictor {
        pca: pca_model,
        reference_pi: pi,
        reference_q: fit.reference.q,
        k: params.k,
        condition_names: dataset.condition_names.clone(),
        metadata: PredictorMetadata {
            seed: params.seed,
            config_digest: params.digest(),
        },
    };
    predictor.validate()?;
    Ok((predictor, omitted))
}

// ---------------------------------------------------------------------------
// Parameter sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// PCA dimension; the value `inf` disables the projection entirely.
    PPrime,
    /// Embedding dimension P''.
    PSecond,
    Perplexity,
    K,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "pprime" => Ok(SweepParam::PPrime),
            "psecond" => Ok(SweepParam::PSecond),
            "perplexity" => Ok(SweepParam::Perplexity),
            "k" => Ok(SweepParam::K),
            other => Err(Error::InvalidParameter {
                name: "param".into(),
                message: format!("unknown sweep parameter {other:?} (expected pprime, psecond, perplexity or k)"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::PPrime => "pprime",
            SweepParam::PSecond => "psecond",
            SweepParam::Perplexity => "perplexity",
            SweepParam::K => "k",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub avg_auc: Option<f64>,
    pub avg_auc_rare: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// `param,value,avg_auc,avg_auc_rare` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["param", "value", "avg_auc", "avg_auc_rare"])?;
        for row in &self.rows {
            w.write_record([
                row.param.clone(),
                row.value.clone(),
                row.avg_auc.map_or_else(String::new, |v| format!("{v}")),
                row.avg_auc_rare.map_or_else(String::new, |v| format!("{v}")),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn apply_sweep_value(base: &PipelineParams, param: SweepParam, value: &str) -> Result<PipelineParams> {
    let mut params = base.clone();
    let bad = |message: String| Error::InvalidParameter {
        name: param.name().into(),
        message,
    };
    match param {
        SweepParam::PPrime => {
            if value == "inf" {
                params.p_prime = None;
            } else {
                params.p_prime =
                    Some(value.parse().map_err(|_| bad(format!("not an integer: {value:?}")))?);
            }
        }
        SweepParam::PSecond => {
            params.output_dim = value.parse().map_err(|_| bad(format!("not an integer: {value:?}")))?;
        }
        SweepParam::Perplexity => {
            params.perplexity = value.parse().map_err(|_| bad(format!("not a number: {value:?}")))?;
        }
        SweepParam::K => {
            params.k = value.parse().map_err(|_| bad(format!("not an integer: {value:?}")))?;
        }
    }
    Ok(params)
}

/// One cross-validation run per value, all other parameters held at the base
/// settings. Splits and folds are shared across settings so rows are
/// comparable.
pub fn parameter_sweep(
    dataset: &Dataset,
    splits: &SplitAssignment,
    folds: &FoldAssignment,
    base: &PipelineParams,
    param: SweepParam,
    values: &[String],
) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let params = apply_sweep_value(base, param, value)?;
        let report = cross_validate(dataset, splits, folds, &params)?;
        rows.push(SweepRow {
            param: param.name().into(),
            value: value.clone(),
            avg_auc: report.average_auc,
            avg_auc_rare: report.average_auc_rare,
        });
    }
    Ok(SweepTable { rows })
}

#[cfg(test)]
mod tests;
