//! Per-condition Parzen-Rosenblatt density models in the embedding space and
//! the presence-probability ratio built on them.
//!
//! The kernel comes in two flavors. `PaperForm` applies the one-dimensional
//! Gaussian normalization (2*pi)^(-1/2) to the vector argument as written,
//! which is only proportional to a true density in more than one dimension.
//! `Normalized` divides by (2*pi)^(d/2) * h^d so the estimate integrates to
//! one; the probability ratio divides densities with different bandwidths,
//! so the bandwidth factor does not cancel and the mode matters. Models are
//! fitted and evaluated in `Normalized` mode by default; `PaperForm` stays
//! available for comparison.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Mat};
use crate::tsne::NeighborEmbedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    /// (2*pi)^(-d/2) h^(-d) exp(-||x||^2 / (2 h^2)): integrates to one.
    #[default]
    Normalized,
    /// (2*pi)^(-1/2) exp(-||x/h||^2 / 2): the kernel as written.
    PaperForm,
}

/// Scott's bandwidth: count^(-1 / (d + 4)).
pub fn scott_bandwidth(count: usize, output_dim: usize) -> f64 {
    assert!(count >= 1, "bandwidth needs at least one sample");
    (count as f64).powf(-1.0 / (output_dim as f64 + 4.0))
}

/// Parzen estimate at `tau` from kernels centered on `points`, paper-form
/// kernel. Underflow to zero far from all points is fine.
pub fn density_at(points: &[Vec<f64>], h: f64, tau: &[f64]) -> f64 {
    density_at_mode(points, h, tau, KernelMode::PaperForm)
}

pub fn density_at_mode(points: &[Vec<f64>], h: f64, tau: &[f64], mode: KernelMode) -> f64 {
    assert!(!points.is_empty(), "density needs at least one point");
    assert!(h > 0.0, "bandwidth must be positive");
    let d = tau.len();
    let norm = match mode {
        KernelMode::PaperForm => (2.0 * std::f64::consts::PI).powf(-0.5),
        KernelMode::Normalized => {
            (2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0) * h.powi(-(d as i32))
        }
    };
    let sum: f64 = points
        .iter()
        .map(|p| (-sq_dist(tau, p) / (2.0 * h * h)).exp())
        .sum();
    norm * sum / points.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Presence {
    pub value: f64,
    /// Set when both densities underflowed and the class prior was returned.
    pub prior_fallback: bool,
}

/// F / (F + F_bar), falling back to the condition prior when both densities
/// are zero (the ratio is 0/0 far from all data).
pub fn presence_probability(f: f64, f_bar: f64, prior: f64) -> Result<Presence> {
    if f < 0.0 || f_bar < 0.0 {
        return Err(Error::NegativeDensity { f, f_bar });
    }
    let total = f + f_bar;
    if total == 0.0 {
        Ok(Presence {
            value: prior,
            prior_fallback: true,
        })
    } else {
        Ok(Presence {
            value: f / total,
            prior_fallback: false,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionModel {
    /// Condition index in the dataset's frequency-sorted order (1-based in
    /// reports, 0-based here).
    pub n: usize,
    pub name: String,
    pub h_pos: f64,
    pub h_neg: f64,
    pub pos: Vec<Vec<f64>>,
    pub neg: Vec<Vec<f64>>,
    pub output_dim: usize,
    #[serde(default)]
    pub mode: KernelMode,
}

impl ConditionModel {
    pub fn positive_density(&self, tau: &[f64]) -> f64 {
        density_at_mode(&self.pos, self.h_pos, tau, self.mode)
    }

    pub fn negative_density(&self, tau: &[f64]) -> f64 {
        density_at_mode(&self.neg, self.h_neg, tau, self.mode)
    }

    pub fn prior(&self) -> f64 {
        self.pos.len() as f64 / (self.pos.len() + self.neg.len()) as f64
    }

    /// Presence probability at a location in the embedding space.
    pub fn presence_at(&self, tau: &[f64]) -> Result<Presence> {
        presence_probability(
            self.positive_density(tau),
            self.negative_density(tau),
            self.prior(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let model: ConditionModel = serde_json::from_str(json)?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pos.is_empty() || self.neg.is_empty() {
            return Err(Error::InvalidParameter {
                name: "condition model".into(),
                message: "positive and negative point sets must be non-empty".into(),
            });
        }
        if !(self.h_pos > 0.0 && self.h_neg > 0.0) {
            return Err(Error::InvalidParameter {
                name: "condition model".into(),
                message: "bandwidths must be positive".into(),
            });
        }
        for p in self.pos.iter().chain(&self.neg) {
            if p.len() != self.output_dim || p.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter {
                    name: "condition model".into(),
                    message: "point dimension mismatch or non-finite coordinate".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceProbabilities {
    pub sample_ids: Vec<String>,
    /// q[j][n]: exact presence probability of condition n at reference j.
    pub q: Mat,
    /// Reference/condition pairs where the prior fallback fired.
    pub prior_fallbacks: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OmittedCondition {
    pub index: usize,
    pub name: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct DensityFit {
    pub models: Vec<ConditionModel>,
    pub reference: ReferenceProbabilities,
    pub omitted: Vec<OmittedCondition>,
}

/// Fit one model per condition over the reference embedding and evaluate the
/// exact presence probability at every reference sample (each sample's own
/// kernel included). Conditions lacking a positive or a negative reference
/// sample are omitted and listed; their q column is filled with the prior.
pub fn fit_condition_models(
    embedding: &NeighborEmbedding,
    labels: &[Vec<u8>],
    condition_names: &[String],
    mode: KernelMode,
) -> Result<DensityFit> {
    let n_ref = embedding.tau.nrows();
    if labels.len() != n_ref {
        return Err(Error::DimensionMismatch {
            context: "fit_condition_models labels".into(),
            expected: n_ref,
            actual: labels.len(),
        });
    }
    let n_cond = condition_names.len();
    let dim = embedding.tau.ncols();
    let mut models = Vec::new();
    let mut omitted = Vec::new();
    let mut q = Mat::zeros(n_ref, n_cond);
    let mut prior_fallbacks = 0usize;

    for c in 0..n_cond {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (row, label_row) in embedding.tau.rows_iter().zip(labels) {
            if label_row[c] == 1 {
                pos.push(row.to_vec());
            } else {
                neg.push(row.to_vec());
            }
        }
        if pos.is_empty() || neg.is_empty() {
            let reason = if pos.is_empty() {
                "no positive reference sample"
            } else {
                "no negative reference sample"
            };
            // Prior for an absent class is 0 or 1; fill the column with it.
            let prior = pos.len() as f64 / n_ref as f64;
            for j in 0..n_ref {
                q.set(j, c, prior);
            }
            omitted.push(OmittedCondition {
                index: c,
                name: condition_names[c].clone(),
                reason: reason.into(),
            });
            continue;
        }
        let model = ConditionModel {
            n: c,
            name: condition_names[c].clone(),
            h_pos: scott_bandwidth(pos.len(), dim),
            h_neg: scott_bandwidth(neg.len(), dim),
            pos,
            neg,
            output_dim: dim,
            mode,
        };
        for (j, tau_row) in embedding.tau.rows_iter().enumerate() {
            let presence = model.presence_at(tau_row)?;
            if presence.prior_fallback {
                prior_fallbacks += 1;
            }
            q.set(j, c, presence.value);
        }
        models.push(model);
    }

    Ok(DensityFit {
        models,
        reference: ReferenceProbabilities {
            sample_ids: embedding.sample_ids.clone(),
            q,
            prior_fallbacks,
        },
        omitted,
    })
}

impl ReferenceProbabilities {
    /// `sample_id,q_1,...,q_N` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["sample_id".to_string()];
        header.extend((1..=self.q.ncols()).map(|n| format!("q_{n}")));
        w.write_record(&header)?;
        for (id, row) in self.sample_ids.iter().zip(self.q.rows_iter()) {
            let mut record = vec![id.clone()];
            record.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Riemann-sum integral of a fitted density over a 2-D grid covering the
/// points with a 6h margin at h/10 resolution. Test support for the
/// normalization invariant.
pub fn integrate_density_2d(points: &[Vec<f64>], h: f64, mode: KernelMode) -> f64 {
    assert!(points.iter().all(|p| p.len() == 2), "2-D grids only");
    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let margin = 6.0 * h;
    let step = h / 10.0;
    let nx = ((x1 - x0 + 2.0 * margin) / step).ceil() as usize + 1;
    let ny = ((y1 - y0 + 2.0 * margin) / step).ceil() as usize + 1;
    let mut integral = 0.0;
    for ix in 0..nx {
        let x = x0 - margin + (ix as f64 + 0.5) * step;
        for iy in 0..ny {
            let y = y0 - margin + (iy as f64 + 0.5) * step;
            integral += density_at_mode(points, h, &[x, y], mode);
        }
    }
    integral * step * step
}
