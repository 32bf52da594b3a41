//! Linear dimension reduction: fit an orthonormal component basis on the
//! sample covariance and project feature vectors onto it.
//!
//! The decomposition runs one-sided Jacobi sweeps on the centered data
//! matrix, which avoids forming the covariance explicitly and keeps small
//! singular values accurate. Components are returned in descending
//! eigenvalue order with a deterministic sign (largest-magnitude entry
//! positive) so serialized models compare equal across runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaModel {
    pub p: usize,
    pub p_prime: usize,
    pub mean: Vec<f64>,
    /// Variance along each retained component, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// `p_prime` rows of length `p`, mutually orthonormal.
    pub components: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Fit the top `p_prime` principal components of `data` (rows are samples).
/// Requests beyond `min(P, n_samples)` are clamped with a warning recorded in
/// the model. Covariance uses the n−1 divisor.
pub fn fit_pca(data: &Mat, p_prime: usize) -> Result<PcaModel> {
    let n = data.nrows();
    let p = data.ncols();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    if p_prime == 0 {
        return Err(Error::InvalidParameter {
            name: "p_prime".into(),
            message: "must be at least 1".into(),
        });
    }
    let mut warnings = Vec::new();
    let limit = p.min(n);
    let effective = if p_prime > limit {
        warnings.push(format!(
            "requested {p_prime} components clamped to {limit} (P = {p}, n = {n})"
        ));
        limit
    } else {
        p_prime
    };

    let mean = data.col_means();
    let mut centered = data.clone();
    for r in 0..n {
        let row = centered.row_mut(r);
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }

    let (mut eigenvalues, mut basis) = jacobi_svd_right(&centered, n);
    // Descending variance; stable under ties.
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]).then(a.cmp(&b)));
    eigenvalues = order.iter().map(|&i| eigenvalues[i]).collect();
    basis = order.iter().map(|&i| std::mem::take(&mut basis[i])).collect();

    eigenvalues.truncate(effective);
    basis.truncate(effective);
    for comp in &mut basis {
        fix_sign(comp);
    }
    Ok(PcaModel {
        p,
        p_prime: effective,
        mean,
        eigenvalues,
        components: basis,
        warnings,
    })
}

/// Right singular basis of `centered` via one-sided Jacobi column rotations.
/// Returns (eigenvalues of the covariance, basis vectors), unsorted.
fn jacobi_svd_right(centered: &Mat, n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p = centered.ncols();
    // Work on columns: w[j] is the j-th column of the centered data.
    let mut w: Vec<Vec<f64>> = (0..p)
        .map(|j| (0..n).map(|i| centered.get(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            e
        })
        .collect();

    let eps = 1e-15;
    let max_sweeps = 60;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for i in 0..p {
            for j in (i + 1)..p {
                let alpha: f64 = w[i].iter().map(|x| x * x).sum();
                let beta: f64 = w[j].iter().map(|x| x * x).sum();
                let gamma: f64 = w[i].iter().zip(&w[j]).map(|(a, b)| a * b).sum();
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, i, j, c, s);
                rotate_pair(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let eigenvalues = w
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>() / (n as f64 - 1.0))
        .collect();
    (eigenvalues, v)
}

/// Apply a plane rotation to columns `i < j` of a column-major list.
fn rotate_pair(columns: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = columns.split_at_mut(j);
    for (a, b) in left[i].iter_mut().zip(right[0].iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

fn fix_sign(component: &mut [f64]) {
    let mut max_idx = 0;
    let mut max_abs = 0.0;
    for (i, &x) in component.iter().enumerate() {
        if x.abs() > max_abs {
            max_abs = x.abs();
            max_idx = i;
        }
    }
    if component[max_idx] < 0.0 {
        for x in component.iter_mut() {
            *x = -*x;
        }
    }
}

/// Project a single feature vector: `components * (gamma - mean)`.
pub fn project(model: &PcaModel, gamma: &[f64]) -> Result<Vec<f64>> {
    if gamma.len() != model.p {
        return Err(Error::DimensionMismatch {
            context: "project input".into(),
            expected: model.p,
            actual: gamma.len(),
        });
    }
    let centered: Vec<f64> = gamma.iter().zip(&model.mean).map(|(g, m)| g - m).collect();
    Ok(model
        .components
        .iter()
        .map(|comp| crate::linalg::dot(comp, &centered))
        .collect())
}

pub fn project_batch(model: &PcaModel, data: &Mat) -> Result<Mat> {
    let mut rows = Vec::with_capacity(data.nrows());
    for r in data.rows_iter() {
        rows.push(project(model, r)?);
    }
    Ok(Mat::from_rows(&rows))
}

impl PcaModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let model: PcaModel = serde_json::from_str(json)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Structural checks applied to deserialized models.
    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.p
            || self.components.len() != self.p_prime
            || self.eigenvalues.len() != self.p_prime
        {
            return Err(Error::InvalidParameter {
                name: "pca model".into(),
                message: "field lengths disagree with p / p_prime".into(),
            });
        }
        for comp in &self.components {
            if comp.len() != self.p {
                return Err(Error::InvalidParameter {
                    name: "pca model".into(),
                    message: "component length disagrees with p".into(),
                });
            }
        }
        let all = self
            .mean
            .iter()
            .chain(self.eigenvalues.iter())
            .chain(self.components.iter().flatten());
        for v in all {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "pca model".into(),
                });
            }
        }
        Ok(())
    }
}
