//! Deterministic synthetic datasets: one isotropic Gaussian cluster per
//! condition with means on a sphere of radius `separation` (unit
//! within-cluster standard deviation), a normal cluster at the origin,
//! optional co-occurring samples placed midway between cluster means, and
//! label noise that swaps positive/negative pairs so per-condition
//! frequencies stay exact. Patients own one or two consecutive samples.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{build_dataset, Dataset, FeatureRow, LabelsTable};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Ambient feature dimension P.
    pub p: usize,
    pub n_frequent: usize,
    pub n_rare: usize,
    pub samples_per_frequent: usize,
    pub samples_per_rare: usize,
    /// Normal (all-zero label) samples; defaults to `samples_per_frequent`.
    #[serde(default)]
    pub n_normal: Option<usize>,
    /// Distance of cluster means from the origin, in within-cluster sigmas.
    pub separation: f64,
    /// Fraction of each condition's positives whose label is swapped onto a
    /// random negative (frequencies preserved).
    #[serde(default)]
    pub label_noise: f64,
    /// Fraction of frequent-condition samples shared with the next frequent
    /// condition, drawn midway between the two cluster means.
    #[serde(default)]
    pub co_occurrence: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn from_json(json: &str) -> Result<Self> {
        let spec: SynthSpec = serde_json::from_str(json)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, message: String| Error::InvalidParameter {
            name: name.into(),
            message,
        };
        if self.p == 0 {
            return Err(bad("p", "ambient dimension must be positive".into()));
        }
        if self.n_frequent == 0 {
            return Err(bad("n_frequent", "need at least one frequent condition".into()));
        }
        if self.samples_per_frequent == 0 || (self.n_rare > 0 && self.samples_per_rare == 0) {
            return Err(bad("samples", "per-condition sample counts must be positive".into()));
        }
        if self.samples_per_rare > self.samples_per_frequent {
            return Err(bad(
                "samples_per_rare",
                "rare conditions must not outnumber frequent ones".into(),
            ));
        }
        if self.separation.is_nan() || self.separation <= 0.0 {
            return Err(bad("separation", "must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(bad("label_noise", "must be in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.co_occurrence) {
            return Err(bad("co_occurrence", "must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn n_normal(&self) -> usize {
        self.n_normal.unwrap_or(self.samples_per_frequent)
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub feature_rows: Vec<FeatureRow>,
    pub labels: LabelsTable,
    /// sample_id -> generating cluster, for oracle checks.
    pub cluster_map: Vec<(String, String)>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let n_cond = spec.n_frequent + spec.n_rare;

    let mut means = Vec::with_capacity(n_cond);
    for _ in 0..n_cond {
        let mut v = rng.normal_vec(spec.p, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x *= spec.separation / norm;
        }
        means.push(v);
    }

    let condition_names: Vec<String> = (0..spec.n_frequent)
        .map(|i| format!("freq{i:02}"))
        .chain((0..spec.n_rare).map(|i| format!("rare{i:02}")))
        .collect();

    // Shared samples between consecutive frequent conditions; each pair
    // consumes budget from both partners so frequencies stay exact.
    let per_pair = if spec.n_frequent >= 2 {
        ((spec.co_occurrence * spec.samples_per_frequent as f64) / 2.0).floor() as usize
    } else {
        0
    };
    let pairs: Vec<(usize, usize)> = (0..spec.n_frequent.saturating_sub(1))
        .map(|c| (c, c + 1))
        .collect();
    let mut budget = vec![spec.samples_per_frequent; spec.n_frequent];
    for &(a, b) in &pairs {
        if budget[a] < per_pair || budget[b] < per_pair {
            return Err(Error::InvalidParameter {
                name: "co_occurrence".into(),
                message: "rate too high for the per-condition budget".into(),
            });
        }
        budget[a] -= per_pair;
        budget[b] -= per_pair;
    }

    let mut samples: Vec<(Vec<f64>, Vec<u8>, String)> = Vec::new();
    for c in 0..spec.n_frequent {
        for _ in 0..budget[c] {
            let x: Vec<f64> = means[c].iter().map(|m| m + rng.normal()).collect();
            let mut labels = vec![0u8; n_cond];
            labels[c] = 1;
            samples.push((x, labels, condition_names[c].clone()));
        }
    }
    for &(a, b) in &pairs {
        for _ in 0..per_pair {
            let x: Vec<f64> = means[a]
                .iter()
                .zip(&means[b])
                .map(|(ma, mb)| (ma + mb) / 2.0 + rng.normal())
                .collect();
            let mut labels = vec![0u8; n_cond];
            labels[a] = 1;
            labels[b] = 1;
            samples.push((x, labels, format!("co_{}_{}", condition_names[a], condition_names[b])));
        }
    }
    for r in 0..spec.n_rare {
        let c = spec.n_frequent + r;
        for _ in 0..spec.samples_per_rare {
            let x: Vec<f64> = means[c].iter().map(|m| m + rng.normal()).collect();
            let mut labels = vec![0u8; n_cond];
            labels[c] = 1;
            samples.push((x, labels, condition_names[c].clone()));
        }
    }
    for _ in 0..spec.n_normal() {
        let x = rng.normal_vec(spec.p, 1.0);
        samples.push((x, vec![0u8; n_cond], "normal".into()));
    }

    // Label noise: swap the bit of a random positive and a random negative.
    // The feature vectors stay where they are, so the swapped pair is
    // mislabeled while the frequency is unchanged.
    if spec.label_noise > 0.0 {
        for c in 0..n_cond {
            let positives: Vec<usize> = samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.1[c] == 1)
                .map(|(i, _)| i)
                .collect();
            let swaps = (spec.label_noise * positives.len() as f64).floor() as usize;
            for _ in 0..swaps {
                let from = positives[rng.below(positives.len())];
                let negatives: Vec<usize> = samples
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.1[c] == 0)
                    .map(|(i, _)| i)
                    .collect();
                if negatives.is_empty() || samples[from].1[c] == 0 {
                    continue;
                }
                let to = negatives[rng.below(negatives.len())];
                samples[from].1[c] = 0;
                samples[to].1[c] = 1;
            }
        }
    }

    // Patients own one or two consecutive samples.
    let mut feature_rows = Vec::with_capacity(samples.len());
    let mut label_rows = Vec::with_capacity(samples.len());
    let mut cluster_map = Vec::with_capacity(samples.len());
    let mut patient = 0usize;
    let mut remaining_in_patient = 0usize;
    for (i, (features, labels, cluster)) in samples.into_iter().enumerate() {
        if remaining_in_patient == 0 {
            patient += 1;
            remaining_in_patient = if rng.uniform() < 0.5 { 2 } else { 1 };
        }
        remaining_in_patient -= 1;
        let sample_id = format!("s{i:05}");
        let patient_id = format!("p{patient:05}");
        feature_rows.push(FeatureRow {
            sample_id: sample_id.clone(),
            patient_id,
            features,
        });
        label_rows.push((sample_id.clone(), labels, None));
        cluster_map.push((sample_id, cluster));
    }

    Ok(SynthOutput {
        feature_rows,
        labels: LabelsTable {
            condition_names,
            rows: label_rows,
        },
        cluster_map,
    })
}

impl SynthOutput {
    /// Assemble directly into a [`Dataset`] (no filesystem round trip).
    pub fn to_dataset(&self) -> Result<Dataset> {
        build_dataset(
            self.feature_rows.clone(),
            self.labels.clone(),
            Path::new("synthetic"),
        )
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let p = self.feature_rows.first().map_or(0, |r| r.features.len());

        let mut w = csv::Writer::from_path(dir.join("features.csv"))?;
        let mut header = vec!["sample_id".to_string(), "patient_id".to_string()];
        header.extend((0..p).map(|k| format!("f{k}")));
        w.write_record(&header)?;
        for row in &self.feature_rows {
            let mut record = vec![row.sample_id.clone(), row.patient_id.clone()];
            record.extend(row.features.iter().map(|v| format!("{v}")));
            w.write_record(&record)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
        let mut header = vec!["sample_id".to_string()];
        header.extend(self.labels.condition_names.iter().cloned());
        w.write_record(&header)?;
        for (id, labels, _) in &self.labels.rows {
            let mut record = vec![id.clone()];
            record.extend(labels.iter().map(u8::to_string));
            w.write_record(&record)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("clusters.csv"))?;
        w.write_record(["sample_id", "cluster"])?;
        for (id, cluster) in &self.cluster_map {
            w.write_record([id, cluster])?;
        }
        w.flush()?;
        Ok(())
    }
}
