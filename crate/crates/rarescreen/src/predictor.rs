//! The deployable artifact: a linear projection, reference projections
//! paired with their exact presence probabilities, and inverse-distance
//! weighted K-nearest-neighbor regression over them. The prediction is
//! differentiable with the neighbor set held fixed, which exposes a
//! sensitivity gradient with respect to the input feature vector.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::pca::{self, PcaModel};

/// Distances below this are treated as exact matches in Eq-of-limits terms:
/// the inverse-distance weight diverges, so exact matches dominate.
const ZERO_DISTANCE: f64 = 1e-12;
/// Neighbor-set stability margin for the gradient.
const TIE_MARGIN: f64 = 1e-9;

pub const DEFAULT_NEIGHBORS: usize = 3;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PredictorMetadata {
    pub seed: u64,
    #[serde(default)]
    pub config_digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Predictor {
    /// Projection into the reduced space; `None` runs K-NN on raw features.
    pub pca: Option<PcaModel>,
    pub reference_pi: Mat,
    /// Exact reference probabilities, one column per condition.
    pub reference_q: Mat,
    pub k: usize,
    pub condition_names: Vec<String>,
    #[serde(default)]
    pub metadata: PredictorMetadata,
}

impl Predictor {
    pub fn input_dim(&self) -> usize {
        self.pca.as_ref().map_or(self.reference_pi.ncols(), |m| m.p)
    }

    pub fn n_conditions(&self) -> usize {
        self.reference_q.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.reference_pi.nrows();
        if m == 0 {
            return Err(Error::EmptyReferenceSet);
        }
        if self.reference_q.nrows() != m {
            return Err(Error::DimensionMismatch {
                context: "predictor reference_q rows".into(),
                expected: m,
                actual: self.reference_q.nrows(),
            });
        }
        if self.k == 0 || self.k > m {
            return Err(Error::InvalidParameter {
                name: "k".into(),
                message: format!("must be in 1..={m}, got {}", self.k),
            });
        }
        if self.condition_names.len() != self.reference_q.ncols() {
            return Err(Error::DimensionMismatch {
                context: "predictor condition names".into(),
                expected: self.reference_q.ncols(),
                actual: self.condition_names.len(),
            });
        }
        if let Some(model) = &self.pca {
            model.validate()?;
            if model.p_prime != self.reference_pi.ncols() {
                return Err(Error::DimensionMismatch {
                    context: "predictor reference_pi width".into(),
                    expected: model.p_prime,
                    actual: self.reference_pi.ncols(),
                });
            }
        }
        for &v in self.reference_q.as_slice() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter {
                    name: "reference_q".into(),
                    message: format!("probability out of [0,1]: {v}"),
                });
            }
        }
        if self.reference_pi.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "predictor reference_pi".into(),
            });
        }
        Ok(())
    }

    fn project(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        match &self.pca {
            Some(model) => pca::project(model, gamma),
            None => {
                if gamma.len() != self.reference_pi.ncols() {
                    return Err(Error::DimensionMismatch {
                        context: "predict input".into(),
                        expected: self.reference_pi.ncols(),
                        actual: gamma.len(),
                    });
                }
                Ok(gamma.to_vec())
            }
        }
    }

    /// All reference distances from `pi`, sorted ascending with ties broken
    /// by lower row index.
    fn sorted_distances(&self, pi: &[f64]) -> Vec<(f64, usize)> {
        let mut dists: Vec<(f64, usize)> = self
            .reference_pi
            .rows_iter()
            .enumerate()
            .map(|(j, row)| (crate::linalg::sq_dist(pi, row).sqrt(), j))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        dists
    }

    /// Presence probability per condition for one feature vector.
    pub fn predict(&self, gamma: &[f64]) -> Result<Vec<f64>> {
        self.validate_nonempty()?;
        let pi = self.project(gamma)?;
        let dists = self.sorted_distances(&pi);
        let neighbors = &dists[..self.k.min(dists.len())];
        let n_cond = self.reference_q.ncols();
        if neighbors.iter().any(|&(d, _)| d < ZERO_DISTANCE) {
            // Exact matches dominate the inverse-distance limit: average the
            // q values over every zero-distance reference row.
            let matches: Vec<usize> = dists
                .iter()
                .take_while(|&&(d, _)| d < ZERO_DISTANCE)
                .map(|&(_, j)| j)
                .collect();
            let mut out = vec![0.0; n_cond];
            for &j in &matches {
                for (o, &q) in out.iter_mut().zip(self.reference_q.row(j)) {
                    *o += q;
                }
            }
            for o in &mut out {
                *o /= matches.len() as f64;
            }
            return Ok(out);
        }
        let weight_sum: f64 = neighbors.iter().map(|&(d, _)| 1.0 / d).sum();
        let mut out = vec![0.0; n_cond];
        for &(d, j) in neighbors {
            let w = 1.0 / d;
            for (o, &q) in out.iter_mut().zip(self.reference_q.row(j)) {
                *o += w * q;
            }
        }
        for o in &mut out {
            *o /= weight_sum;
        }
        Ok(out)
    }

    /// Row-wise [`Predictor::predict`]; rows are independent so the batch is
    /// evaluated in parallel with the output kept in input order.
    pub fn predict_batch(&self, gammas: &Mat) -> Result<Mat> {
        let rows: Vec<Vec<f64>> = gammas
            .to_rows()
            .par_iter()
            .map(|row| self.predict(row))
            .collect::<Result<_>>()?;
        Ok(Mat::from_rows(&rows))
    }

    /// Analytic gradient of the condition-`n` prediction with respect to the
    /// input feature vector, with the neighbor set held constant. Errors on
    /// an unstable neighbor set (K-th and (K+1)-th equidistant within 1e-9)
    /// and on zero-distance neighbors, where the weight is singular.
    pub fn prediction_gradient(&self, gamma: &[f64], condition: usize) -> Result<Vec<f64>> {
        self.validate_nonempty()?;
        if condition >= self.reference_q.ncols() {
            return Err(Error::InvalidParameter {
                name: "condition".into(),
                message: format!(
                    "index {condition} out of range ({} conditions)",
                    self.reference_q.ncols()
                ),
            });
        }
        let pi = self.project(gamma)?;
        let dists = self.sorted_distances(&pi);
        let k = self.k.min(dists.len());
        if dists.len() > k {
            let (dk, jk) = dists[k - 1];
            let (dk1, jk1) = dists[k];
            if (dk1 - dk).abs() < TIE_MARGIN {
                return Err(Error::UnstableNeighborSet {
                    a: jk,
                    b: jk1,
                    da: dk,
                    db: dk1,
                });
            }
        }
        let neighbors = &dists[..k];
        if let Some(&(_, j)) = neighbors.iter().find(|&&(d, _)| d < ZERO_DISTANCE) {
            return Err(Error::ZeroDistanceNeighbor { index: j });
        }

        let weight_sum: f64 = neighbors.iter().map(|&(d, _)| 1.0 / d).sum();
        let q_hat: f64 = neighbors
            .iter()
            .map(|&(d, j)| self.reference_q.get(j, condition) / d)
            .sum::<f64>()
            / weight_sum;

        // d q_hat / d pi = sum_k (q_hat - q_k) (pi - pi_k) / (d_k^3 * sum_w)
        let dim = pi.len();
        let mut grad_pi = vec![0.0; dim];
        for &(d, j) in neighbors {
            let coeff = (q_hat - self.reference_q.get(j, condition)) / (d * d * d * weight_sum);
            for (g, (p, r)) in grad_pi.iter_mut().zip(pi.iter().zip(self.reference_pi.row(j))) {
                *g += coeff * (p - r);
            }
        }

        // Chain through the linear projection: grad_gamma = C^T grad_pi.
        match &self.pca {
            Some(model) => {
                let mut grad = vec![0.0; model.p];
                for (comp, g_pi) in model.components.iter().zip(&grad_pi) {
                    for (g, c) in grad.iter_mut().zip(comp) {
                        *g += c * g_pi;
                    }
                }
                Ok(grad)
            }
            None => Ok(grad_pi),
        }
    }

    fn validate_nonempty(&self) -> Result<()> {
        if self.reference_pi.nrows() == 0 {
            return Err(Error::EmptyReferenceSet);
        }
        Ok(())
    }

    pub fn condition_index(&self, name: &str) -> Option<usize> {
        self.condition_names.iter().position(|c| c == name)
    }

    // -- serialization ------------------------------------------------------

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let predictor: Predictor = serde_json::from_str(json)?;
        predictor.validate()?;
        Ok(predictor)
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
}

#[cfg(test)]
mod tests;
