//! Stochastic neighbor embedding with per-sample bandwidths calibrated to a
//! target perplexity.
//!
//! Two output kernels are provided. `student_t` is the standard heavy-tailed
//! formulation (symmetrized joint distribution, Cauchy output kernel) and is
//! the default. `paper_sne` keeps Gaussian output conditionals with a fixed
//! bandwidth of 1/sqrt(2), so the output-space exponent is exactly
//! -||tau_i - tau_j||^2; the cost is then the sum of row-wise KL divergences.
//! Optimization is plain gradient descent with momentum and early
//! exaggeration; everything is sequential and seeded, so a run is bitwise
//! reproducible.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::SeededRng;

pub const DEFAULT_PERPLEXITY: f64 = 30.0;
pub const DEFAULT_OUTPUT_DIM: usize = 2;
pub const DEFAULT_ITERATIONS: usize = 1000;
pub const DEFAULT_LEARNING_RATE: f64 = 200.0;

/// Iterations before the momentum switch and the end of early exaggeration.
const SCHEDULE_SWITCH: usize = 250;
const EARLY_EXAGGERATION: f64 = 12.0;
const INIT_STD: f64 = 1e-4;

/// Relative tolerance on the calibrated perplexity.
pub const PERPLEXITY_TOLERANCE: f64 = 1e-4;
const CALIBRATION_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelVariant {
    /// Gaussian output conditionals, constant bandwidth 1/sqrt(2).
    PaperSne,
    /// Symmetrized joint distribution with Student-t output kernel.
    #[default]
    StudentT,
}

impl std::fmt::Display for KernelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            KernelVariant::PaperSne => "paper_sne",
            KernelVariant::StudentT => "student_t",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub output_dim: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    /// Iteration at which momentum switches and exaggeration ends.
    pub schedule_switch: usize,
    pub early_exaggeration: f64,
    pub kernel_variant: KernelVariant,
    /// Reserved for a Barnes-Hut style approximation. Only exact O(n^2)
    /// gradients are implemented; setting this is rejected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub barnes_hut_theta: Option<f64>,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: DEFAULT_PERPLEXITY,
            output_dim: DEFAULT_OUTPUT_DIM,
            iterations: DEFAULT_ITERATIONS,
            learning_rate: DEFAULT_LEARNING_RATE,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            schedule_switch: SCHEDULE_SWITCH,
            early_exaggeration: EARLY_EXAGGERATION,
            kernel_variant: KernelVariant::default(),
            barnes_hut_theta: None,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn with_seed(seed: u64) -> Self {
        TsneConfig {
            seed,
            ..Self::default()
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if self.perplexity <= 0.0 || !self.perplexity.is_finite() {
            return Err(Error::InvalidParameter {
                name: "perplexity".into(),
                message: format!("must be positive and finite, got {}", self.perplexity),
            });
        }
        if self.perplexity >= n as f64 {
            return Err(Error::PerplexityTooLarge {
                perplexity: self.perplexity,
                neighbors: n,
            });
        }
        if self.output_dim == 0 {
            return Err(Error::InvalidParameter {
                name: "output_dim".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "learning_rate".into(),
                message: "must be positive".into(),
            });
        }
        if self.barnes_hut_theta.is_some() {
            return Err(Error::InvalidParameter {
                name: "barnes_hut_theta".into(),
                message: "approximate gradients are not implemented; leave unset for exact descent"
                    .into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighborEmbedding {
    pub sample_ids: Vec<String>,
    pub tau: Mat,
    /// Calibrated input-space bandwidth h_I per sample.
    pub bandwidths: Vec<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub cost_trace: Vec<f64>,
    pub config: TsneConfig,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Bandwidth calibration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CalibrationWarning {
    AllDistancesZero,
    UnreachablePerplexity,
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub h: f64,
    pub p_row: Vec<f64>,
    pub warning: Option<CalibrationWarning>,
}

/// Binary-search the Gaussian bandwidth so the row's perplexity (2 to the
/// entropy) hits `rho_bar`. Input is the squared distances from one sample to
/// its neighbors (itself excluded).
pub fn calibrate_bandwidth(sq_dists: &[f64], rho_bar: f64) -> Result<Calibration> {
    let m = sq_dists.len();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    for &d in sq_dists {
        if !d.is_finite() || d < 0.0 {
            return Err(Error::NonFinite {
                context: "calibrate_bandwidth distances".into(),
            });
        }
    }
    if rho_bar >= m as f64 {
        return Err(Error::PerplexityTooLarge {
            perplexity: rho_bar,
            neighbors: m,
        });
    }
    if sq_dists.iter().all(|&d| d == 0.0) {
        return Ok(Calibration {
            h: 1.0,
            p_row: vec![1.0 / m as f64; m],
            warning: Some(CalibrationWarning::AllDistancesZero),
        });
    }
    let d_min = sq_dists.iter().copied().fold(f64::INFINITY, f64::min);
    let d_max = sq_dists.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if d_max - d_min <= 1e-12 * d_max {
        // Equidistant neighbors: the row is uniform and its perplexity is m
        // for ANY bandwidth, so the target is only reachable when it equals
        // m. Bisection would otherwise push beta until float noise between
        // the distances explodes.
        let warning = if (m as f64 - rho_bar).abs() <= PERPLEXITY_TOLERANCE * rho_bar {
            None
        } else {
            Some(CalibrationWarning::UnreachablePerplexity)
        };
        return Ok(Calibration {
            h: 1.0,
            p_row: vec![1.0 / m as f64; m],
            warning,
        });
    }

    // Shift by the smallest distance: the row is invariant and exp() cannot
    // underflow for the nearest neighbor.
    let shift = d_min;
    let mut beta = 1.0_f64; // beta = 1 / (2 h^2)
    let mut beta_min = f64::NEG_INFINITY;
    let mut beta_max = f64::INFINITY;
    let mut row = vec![0.0; m];
    let mut warning = Some(CalibrationWarning::UnreachablePerplexity);
    for _ in 0..CALIBRATION_MAX_ITERS {
        let mut sum = 0.0;
        for (w, &d) in row.iter_mut().zip(sq_dists) {
            *w = (-beta * (d - shift)).exp();
            sum += *w;
        }
        let mut entropy_bits = 0.0;
        for w in &mut row {
            *w /= sum;
            if *w > 0.0 {
                entropy_bits -= *w * w.log2();
            }
        }
        let perplexity = entropy_bits.exp2();
        if (perplexity - rho_bar).abs() <= 1e-6 * rho_bar {
            warning = None;
            break;
        }
        if perplexity > rho_bar {
            beta_min = beta;
            beta = if beta_max.is_finite() {
                0.5 * (beta + beta_max)
            } else {
                beta * 2.0
            };
        } else {
            beta_max = beta;
            beta = if beta_min.is_finite() {
                0.5 * (beta + beta_min)
            } else {
                beta * 0.5
            };
        }
    }
    Ok(Calibration {
        h: (1.0 / (2.0 * beta)).sqrt(),
        p_row: row,
        warning,
    })
}

/// Full matrix of conditional neighbor probabilities: row I holds p_{J|I}
/// with a zero diagonal and unit row sum.
pub struct ConditionalMatrix {
    pub p: Mat,
    pub bandwidths: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn conditional_matrix(pi: &Mat, rho_bar: f64) -> Result<ConditionalMatrix> {
    let n = pi.nrows();
    if n < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: n });
    }
    let dists = pi.pairwise_sq_dists();
    let mut p = Mat::zeros(n, n);
    let mut bandwidths = Vec::with_capacity(n);
    let mut warnings = Vec::new();
    let mut neighbor_d = vec![0.0; n - 1];
    for i in 0..n {
        let mut k = 0;
        for j in 0..n {
            if j != i {
                neighbor_d[k] = dists.get(i, j);
                k += 1;
            }
        }
        let cal = calibrate_bandwidth(&neighbor_d, rho_bar)?;
        if let Some(w) = cal.warning {
            warnings.push(format!("row {i}: {w:?}"));
        }
        bandwidths.push(cal.h);
        let mut k = 0;
        for j in 0..n {
            if j != i {
                p.set(i, j, cal.p_row[k]);
                k += 1;
            }
        }
    }
    Ok(ConditionalMatrix {
        p,
        bandwidths,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Cost and gradient
// ---------------------------------------------------------------------------

/// Symmetrized joint distribution p_IJ = (p_{J|I} + p_{I|J}) / (2n).
pub fn joint_probabilities(p_rows: &Mat) -> Mat {
    let n = p_rows.nrows();
    let mut joint = Mat::zeros(n, n);
    let norm = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                joint.set(i, j, (p_rows.get(i, j) + p_rows.get(j, i)) / norm);
            }
        }
    }
    joint
}

fn output_conditionals(tau: &Mat) -> Mat {
    let n = tau.nrows();
    let d2 = tau.pairwise_sq_dists();
    let mut q = Mat::zeros(n, n);
    for i in 0..n {
        // Shift by the row minimum so the nearest neighbor never underflows.
        let mut min_d = f64::INFINITY;
        for j in 0..n {
            if j != i {
                min_d = min_d.min(d2.get(i, j));
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            if j != i {
                let w = (-(d2.get(i, j) - min_d)).exp();
                q.set(i, j, w);
                sum += w;
            }
        }
        for j in 0..n {
            if j != i {
                q.set(i, j, q.get(i, j) / sum);
            }
        }
    }
    q
}

fn student_weights(tau: &Mat) -> (Mat, f64) {
    let n = tau.nrows();
    let d2 = tau.pairwise_sq_dists();
    let mut w = Mat::zeros(n, n);
    let mut z = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = 1.0 / (1.0 + d2.get(i, j));
                w.set(i, j, v);
                z += v;
            }
        }
    }
    (w, z)
}

/// KL objective for the given output coordinates. `p_rows` holds the input
/// conditionals; the Student-t variant symmetrizes them internally. Terms
/// with p = 0 contribute nothing.
pub fn tsne_cost(p_rows: &Mat, tau: &Mat, variant: KernelVariant) -> f64 {
    let n = p_rows.nrows();
    match variant {
        KernelVariant::PaperSne => {
            let q = output_conditionals(tau);
            let mut cost = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let p = p_rows.get(i, j);
                    if i != j && p > 0.0 {
                        cost += p * (p / q.get(i, j).max(1e-300)).ln();
                    }
                }
            }
            cost
        }
        KernelVariant::StudentT => {
            let joint = joint_probabilities(p_rows);
            let (w, z) = student_weights(tau);
            let mut cost = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let p = joint.get(i, j);
                    if i != j && p > 0.0 {
                        let q = (w.get(i, j) / z).max(1e-300);
                        cost += p * (p / q).ln();
                    }
                }
            }
            cost
        }
    }
}

/// Analytic gradient of [`tsne_cost`] with respect to every tau coordinate.
pub fn tsne_cost_gradient(p_rows: &Mat, tau: &Mat, variant: KernelVariant) -> Mat {
    let n = tau.nrows();
    let d = tau.ncols();
    let mut grad = Mat::zeros(n, d);
    match variant {
        KernelVariant::PaperSne => {
            let q = output_conditionals(tau);
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let coeff = 2.0
                        * (p_rows.get(i, j) - q.get(i, j) + p_rows.get(j, i) - q.get(j, i));
                    for k in 0..d {
                        let diff = tau.get(i, k) - tau.get(j, k);
                        grad.set(i, k, grad.get(i, k) + coeff * diff);
                    }
                }
            }
        }
        KernelVariant::StudentT => {
            let joint = joint_probabilities(p_rows);
            let (w, z) = student_weights(tau);
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let wij = w.get(i, j);
                    let coeff = 4.0 * (joint.get(i, j) - wij / z) * wij;
                    for k in 0..d {
                        let diff = tau.get(i, k) - tau.get(j, k);
                        grad.set(i, k, grad.get(i, k) + coeff * diff);
                    }
                }
            }
        }
    }
    grad
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

/// Embed the rows of `pi` by gradient descent on the KL objective, with
/// early exaggeration and a momentum schedule. Deterministic for a given
/// config (the initialization draws from the seeded generator).
pub fn fit_tsne(pi: &Mat, sample_ids: &[String], config: &TsneConfig) -> Result<NeighborEmbedding> {
    let n = pi.nrows();
    if n < 5 {
        return Err(Error::TooFewSamples { needed: 5, got: n });
    }
    if sample_ids.len() != n {
        return Err(Error::DimensionMismatch {
            context: "fit_tsne sample ids".into(),
            expected: n,
            actual: sample_ids.len(),
        });
    }
    config.validate(n)?;

    let conditionals = conditional_matrix(pi, config.perplexity)?;
    // Both variants consume the conditional matrix; the Student-t cost and
    // gradient symmetrize it internally, so exaggerating the conditionals
    // exaggerates the joint distribution by the same factor.
    let p_used = conditionals.p.clone();
    let mut exaggerated = p_used.clone();
    for v in exaggerated.as_mut_slice() {
        *v *= config.early_exaggeration;
    }

    let d = config.output_dim;
    let mut rng = SeededRng::new(config.seed);
    let mut tau = Mat::from_vec(n, d, rng.normal_vec(n * d, INIT_STD));
    let mut velocity = Mat::zeros(n, d);

    // The conditional-KL objective carries total mass n (one unit per row)
    // where the joint carries 1, so its gradient is ~n times steeper. The
    // step is normalized accordingly to keep the configured learning rate
    // meaningful for both variants.
    let step = match config.kernel_variant {
        KernelVariant::StudentT => config.learning_rate,
        KernelVariant::PaperSne => config.learning_rate / n as f64,
    };

    let initial_cost = tsne_cost(&conditionals.p, &tau, config.kernel_variant);
    let mut cost_trace = vec![initial_cost];
    let mut final_cost = initial_cost;
    // Backtracking guard: a step that blows the cost up is undone and
    // retried at half the scale (with the velocity reset), because the
    // Gaussian-output objective has unbounded attraction forces and a fixed
    // step can explode geometrically. The scale recovers multiplicatively
    // after accepted steps. Everything stays deterministic.
    let mut step_scale = 1.0_f64;
    for it in 0..config.iterations {
        let active = if it < config.schedule_switch {
            &exaggerated
        } else {
            &p_used
        };
        let grad = tsne_cost_gradient(active, &tau, config.kernel_variant);
        let momentum = if it < config.schedule_switch {
            config.momentum_initial
        } else {
            config.momentum_final
        };
        loop {
            let saved_tau = tau.clone();
            for idx in 0..n * d {
                let v = momentum * velocity.as_slice()[idx] - step * step_scale * grad.as_slice()[idx];
                velocity.as_mut_slice()[idx] = v;
                tau.as_mut_slice()[idx] += v;
            }
            let cost = tsne_cost(&conditionals.p, &tau, config.kernel_variant);
            let acceptable = cost.is_finite()
                && tau.as_slice().iter().all(|v| v.is_finite())
                && cost <= final_cost + (0.25 * final_cost).max(1.0);
            if acceptable {
                final_cost = cost;
                step_scale = (step_scale * 1.2).min(1.0);
                break;
            }
            tau = saved_tau;
            velocity.as_mut_slice().fill(0.0);
            step_scale *= 0.5;
            if step_scale < 1e-12 {
                return Err(Error::TsneDiverged {
                    iteration: it,
                    trace: cost_trace,
                });
            }
        }
        cost_trace.push(final_cost);
    }

    Ok(NeighborEmbedding {
        sample_ids: sample_ids.to_vec(),
        tau,
        bandwidths: conditionals.bandwidths,
        initial_cost,
        final_cost,
        cost_trace,
        config: config.clone(),
        warnings: conditionals.warnings,
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

impl NeighborEmbedding {
    /// `sample_id,t0,...,t{d-1}` rows for every reference sample.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["sample_id".to_string()];
        header.extend((0..self.tau.ncols()).map(|k| format!("t{k}")));
        w.write_record(&header)?;
        for (id, row) in self.sample_ids.iter().zip(self.tau.rows_iter()) {
            let mut record = vec![id.clone()];
            record.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Sidecar with the config, bandwidths and cost trace.
    pub fn write_meta_json(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "bandwidths": self.bandwidths,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "cost_trace": self.cost_trace,
            "warnings": self.warnings,
        });
        std::fs::write(path, serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }
}

/// Parse a `sample_id,<v0>,...` numeric table (projections, embeddings).
pub fn parse_vector_csv<R: std::io::Read>(reader: R, path: &Path) -> Result<(Vec<String>, Mat)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 2 || &headers[0] != "sample_id" {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            message: "expected header sample_id,<v0>,...".into(),
        });
    }
    let width = headers.len() - 1;
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, record) in rdr.records().enumerate() {
        let row_no = idx + 2;
        let record = record.map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            row: row_no,
            message: e.to_string(),
        })?;
        if record.len() != width + 1 {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                row: row_no,
                message: format!("expected {} fields, got {}", width + 1, record.len()),
            });
        }
        let id = record[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateSampleId { id, row: row_no });
        }
        let mut row = Vec::with_capacity(width);
        for field in record.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| Error::MalformedRecord {
                path: path.to_path_buf(),
                row: row_no,
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::MalformedRecord {
                    path: path.to_path_buf(),
                    row: row_no,
                    message: format!("not finite: {field}"),
                });
            }
            row.push(v);
        }
        ids.push(id);
        rows.push(row);
    }
    Ok((ids, Mat::from_rows(&rows)))
}
