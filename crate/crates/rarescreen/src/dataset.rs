//! Dataset ingestion, balanced-subset construction and patient-grouped
//! split / fold assignment.
//!
//! Two CSV files describe a dataset: a features file
//! (`sample_id,patient_id,f0,...`) and a labels file
//! (`sample_id,<name_1>,...`) with strictly binary values. Conditions are
//! re-sorted by descending frequency on load; the original column order is
//! kept in [`Dataset::original_condition_order`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Reserved labels-file column carrying an explicit normal flag. When
/// present it must agree with the all-zero label row.
pub const IS_NORMAL_COLUMN: &str = "is_normal";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub patient_id: String,
    pub features: Vec<f64>,
    /// One entry per condition, in the dataset's (frequency-sorted) order.
    pub labels: Vec<u8>,
}

impl SampleRecord {
    /// Normal samples carry no condition at all.
    pub fn is_normal(&self) -> bool {
        self.labels.iter().all(|&y| y == 0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    /// Condition names sorted by descending frequency.
    pub condition_names: Vec<String>,
    /// f_n = number of positive samples per condition, non-increasing.
    pub frequencies: Vec<usize>,
    /// Column order of the labels file, before frequency sorting.
    pub original_condition_order: Vec<String>,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.records.len()
    }

    pub fn n_conditions(&self) -> usize {
        self.condition_names.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.features.len())
    }

    pub fn record_index(&self) -> HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.sample_id.as_str(), i))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    Learn,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Learn => "LEARN",
            Split::Valid => "VALID",
            Split::Test => "TEST",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignments: BTreeMap<String, Split>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn get(&self, sample_id: &str) -> Option<Split> {
        self.assignments.get(sample_id).copied()
    }

    pub fn ids_in(&self, split: Split) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: BTreeMap<String, usize>,
    pub n_folds: usize,
}

impl FoldAssignment {
    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.folds.get(sample_id).copied()
    }
}

// ---------------------------------------------------------------------------
// CSV parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FeatureRow {
    pub sample_id: String,
    pub patient_id: String,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LabelsTable {
    pub condition_names: Vec<String>,
    /// (sample_id, labels in file column order, explicit normal flag if any)
    pub rows: Vec<(String, Vec<u8>, Option<bool>)>,
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader)
}

/// Parse a features file. Header must be `sample_id,patient_id,f0,...,f{P-1}`.
/// Duplicate ids, NaN/Inf features and ragged rows are rejected with the
/// offending row number (1-based, counting the header as row 1).
pub fn parse_features_csv<R: Read>(reader: R, path: &Path) -> Result<Vec<FeatureRow>> {
    let mut rdr = csv_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| malformed_header(path, &e.to_string()))?
        .clone();
    if headers.len() < 3 || &headers[0] != "sample_id" || &headers[1] != "patient_id" {
        return Err(malformed_header(
            path,
            "expected header sample_id,patient_id,f0,...",
        ));
    }
    let p = headers.len() - 2;
    let mut rows = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, record) in rdr.records().enumerate() {
        let row_no = idx + 2;
        let record = record.map_err(|e| malformed(path, row_no, &e.to_string()))?;
        if record.len() != p + 2 {
            return Err(malformed(
                path,
                row_no,
                &format!("expected {} fields, got {}", p + 2, record.len()),
            ));
        }
        let sample_id = record[0].to_string();
        if sample_id.is_empty() {
            return Err(malformed(path, row_no, "empty sample_id"));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(Error::DuplicateSampleId {
                id: sample_id,
                row: row_no,
            });
        }
        let patient_id = record[1].to_string();
        if patient_id.is_empty() {
            return Err(malformed(path, row_no, "empty patient_id"));
        }
        let mut features = Vec::with_capacity(p);
        for (k, field) in record.iter().skip(2).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                malformed(path, row_no, &format!("feature f{k}: not a number: {field:?}"))
            })?;
            if !v.is_finite() {
                return Err(malformed(
                    path,
                    row_no,
                    &format!("feature f{k} is not finite: {field}"),
                ));
            }
            features.push(v);
        }
        rows.push(FeatureRow {
            sample_id,
            patient_id,
            features,
        });
    }
    Ok(rows)
}

/// Parse a labels file. Values must be exactly `0` or `1`. An `is_normal`
/// column, when present, is separated from the conditions and validated
/// against the all-zero row later.
pub fn parse_labels_csv<R: Read>(reader: R, path: &Path) -> Result<LabelsTable> {
    let mut rdr = csv_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| malformed_header(path, &e.to_string()))?
        .clone();
    if headers.len() < 2 || &headers[0] != "sample_id" {
        return Err(malformed_header(path, "expected header sample_id,<name_1>,..."));
    }
    let mut condition_names = Vec::new();
    let mut normal_col = None;
    for (i, name) in headers.iter().skip(1).enumerate() {
        if name == IS_NORMAL_COLUMN {
            if normal_col.is_some() {
                return Err(malformed_header(path, "duplicate is_normal column"));
            }
            normal_col = Some(i);
        } else {
            if name.is_empty() {
                return Err(malformed_header(path, "empty condition name"));
            }
            condition_names.push(name.to_string());
        }
    }
    {
        let mut uniq = HashSet::new();
        for name in &condition_names {
            if !uniq.insert(name) {
                return Err(malformed_header(path, &format!("duplicate condition {name:?}")));
            }
        }
    }
    let n_fields = headers.len();
    let mut rows = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, record) in rdr.records().enumerate() {
        let row_no = idx + 2;
        let record = record.map_err(|e| malformed(path, row_no, &e.to_string()))?;
        if record.len() != n_fields {
            return Err(malformed(
                path,
                row_no,
                &format!("expected {} fields, got {}", n_fields, record.len()),
            ));
        }
        let sample_id = record[0].to_string();
        if sample_id.is_empty() {
            return Err(malformed(path, row_no, "empty sample_id"));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(Error::DuplicateSampleId {
                id: sample_id,
                row: row_no,
            });
        }
        let mut labels = Vec::with_capacity(condition_names.len());
        let mut normal_flag = None;
        for (i, field) in record.iter().skip(1).enumerate() {
            let bit = match field {
                "0" => 0u8,
                "1" => 1u8,
                other => {
                    return Err(malformed(
                        path,
                        row_no,
                        &format!("label value must be 0 or 1, got {other:?}"),
                    ))
                }
            };
            if Some(i) == normal_col {
                normal_flag = Some(bit == 1);
            } else {
                labels.push(bit);
            }
        }
        rows.push((sample_id, labels, normal_flag));
    }
    Ok(LabelsTable {
        condition_names,
        rows,
    })
}

fn malformed(path: &Path, row: usize, message: &str) -> Error {
    Error::MalformedRecord {
        path: path.to_path_buf(),
        row,
        message: message.to_string(),
    }
}

fn malformed_header(path: &Path, message: &str) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

// ---------------------------------------------------------------------------
// load_dataset
// ---------------------------------------------------------------------------

/// Load and cross-validate the two files, compute condition frequencies and
/// re-sort conditions by descending frequency (stable, so equal counts keep
/// file order).
pub fn load_dataset(features_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let features_file = open(features_path)?;
    let labels_file = open(labels_path)?;
    let feature_rows = parse_features_csv(features_file, features_path)?;
    let labels_table = parse_labels_csv(labels_file, labels_path)?;
    build_dataset(feature_rows, labels_table, labels_path)
}

fn open(path: &Path) -> Result<std::fs::File> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    std::fs::File::open(path).map_err(|source| Error::IoPath {
        path: path.to_path_buf(),
        source,
    })
}

/// Join parsed features and labels into a [`Dataset`]. Exposed separately so
/// in-memory tables (e.g. from the synthetic generator) skip the filesystem.
pub fn build_dataset(
    feature_rows: Vec<FeatureRow>,
    labels_table: LabelsTable,
    labels_path: &Path,
) -> Result<Dataset> {
    let mut label_by_id: HashMap<String, (usize, Vec<u8>, Option<bool>)> = HashMap::new();
    for (idx, (id, labels, flag)) in labels_table.rows.into_iter().enumerate() {
        label_by_id.insert(id, (idx + 2, labels, flag));
    }
    let p = feature_rows.first().map_or(0, |r| r.features.len());
    let mut records = Vec::with_capacity(feature_rows.len());
    for row in feature_rows {
        if row.features.len() != p {
            return Err(Error::DimensionMismatch {
                context: format!("features of sample {:?}", row.sample_id),
                expected: p,
                actual: row.features.len(),
            });
        }
        let (row_no, labels, flag) = label_by_id.remove(&row.sample_id).ok_or_else(|| {
            Error::SampleIdMismatch {
                message: format!("sample {:?} has features but no labels", row.sample_id),
            }
        })?;
        if let Some(is_normal) = flag {
            let all_zero = labels.iter().all(|&y| y == 0);
            if is_normal != all_zero {
                return Err(malformed(
                    labels_path,
                    row_no,
                    &format!(
                        "is_normal={} disagrees with label row (all zero: {})",
                        u8::from(is_normal),
                        all_zero
                    ),
                ));
            }
        }
        records.push(SampleRecord {
            sample_id: row.sample_id,
            patient_id: row.patient_id,
            features: row.features,
            labels,
        });
    }
    if let Some(id) = label_by_id.keys().next() {
        return Err(Error::SampleIdMismatch {
            message: format!("sample {id:?} has labels but no features"),
        });
    }

    let original_condition_order = labels_table.condition_names;
    let n = original_condition_order.len();
    let mut frequencies = vec![0usize; n];
    for r in &records {
        if r.labels.len() != n {
            return Err(Error::DimensionMismatch {
                context: format!("labels of sample {:?}", r.sample_id),
                expected: n,
                actual: r.labels.len(),
            });
        }
        for (f, &y) in frequencies.iter_mut().zip(&r.labels) {
            *f += usize::from(y);
        }
    }
    // Stable sort keeps the file order for equal frequencies.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&c| std::cmp::Reverse(frequencies[c]));
    let condition_names: Vec<String> = order
        .iter()
        .map(|&c| original_condition_order[c].clone())
        .collect();
    let sorted_frequencies: Vec<usize> = order.iter().map(|&c| frequencies[c]).collect();
    for r in &mut records {
        let old = std::mem::take(&mut r.labels);
        r.labels = order.iter().map(|&c| old[c]).collect();
    }
    Ok(Dataset {
        records,
        condition_names,
        frequencies: sorted_frequencies,
        original_condition_order,
    })
}

// ---------------------------------------------------------------------------
// Balanced subset
// ---------------------------------------------------------------------------

/// Build the balanced subset: iterate the frequent conditions rarest-first
/// (c_M, c_{M-1}, ..., c_1), randomly adding positives for each until all are
/// taken or the selected positive count for that condition reaches the cap.
/// Samples positive for any rare condition (index > M) are never selected.
/// Finally `normal_count` all-zero samples are added at random.
pub fn build_balanced_subset(
    dataset: &Dataset,
    m: usize,
    per_condition_cap: usize,
    normal_count: usize,
    seed: u64,
) -> Result<BTreeSet<String>> {
    let n_cond = dataset.n_conditions();
    if m == 0 || m > n_cond {
        return Err(Error::MOutOfRange { m, n: n_cond });
    }
    let records = &dataset.records;
    let rare_positive: Vec<bool> = records.iter().map(|r| r.labels[m..].contains(&1)).collect();
    let mut selected = vec![false; records.len()];
    let mut rng = SeededRng::new(seed);
    for c in (0..m).rev() {
        let already: usize = records
            .iter()
            .enumerate()
            .filter(|(i, r)| selected[*i] && r.labels[c] == 1)
            .count();
        let mut candidates: Vec<usize> = (0..records.len())
            .filter(|&i| !selected[i] && !rare_positive[i] && records[i].labels[c] == 1)
            .collect();
        rng.shuffle(&mut candidates);
        let room = per_condition_cap.saturating_sub(already);
        for i in candidates.into_iter().take(room) {
            selected[i] = true;
        }
    }
    let mut normals: Vec<usize> = (0..records.len())
        .filter(|&i| !selected[i] && records[i].is_normal())
        .collect();
    rng.shuffle(&mut normals);
    for &i in normals.iter().take(normal_count) {
        selected[i] = true;
    }
    Ok(records
        .iter()
        .enumerate()
        .filter(|(i, _)| selected[*i])
        .map(|(_, r)| r.sample_id.clone())
        .collect())
}

// ---------------------------------------------------------------------------
// Patient-grouped splits
// ---------------------------------------------------------------------------

struct PatientGroup {
    sample_idx: Vec<usize>,
    /// Positive count per condition across the group's samples.
    positives: Vec<usize>,
}

/// Assign every sample to LEARN / VALID / TEST. The balanced subset is split
/// 80/10/10 and the remainder 0/20/80, grouping by patient. A patient whose
/// samples straddle the balanced boundary goes wholly to the side holding its
/// majority (ties to the balanced side). Within a side, patient groups are
/// greedily dealt to the split with the largest remaining deficit, weighting
/// per-condition positive deficits so the condition distribution tracks the
/// target fractions.
pub fn assign_splits(
    dataset: &Dataset,
    balanced: &BTreeSet<String>,
    seed: u64,
) -> Result<SplitAssignment> {
    let n_cond = dataset.n_conditions();
    let mut patients: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in dataset.records.iter().enumerate() {
        patients.entry(r.patient_id.as_str()).or_default().push(i);
    }

    let mut balanced_groups = Vec::new();
    let mut rest_groups = Vec::new();
    for (_, sample_idx) in patients {
        let in_balanced = sample_idx
            .iter()
            .filter(|&&i| balanced.contains(&dataset.records[i].sample_id))
            .count();
        let out = sample_idx.len() - in_balanced;
        let mut positives = vec![0usize; n_cond];
        for &i in &sample_idx {
            for (p, &y) in positives.iter_mut().zip(&dataset.records[i].labels) {
                *p += usize::from(y);
            }
        }
        let group = PatientGroup {
            sample_idx,
            positives,
        };
        if in_balanced >= out {
            balanced_groups.push(group);
        } else {
            rest_groups.push(group);
        }
    }

    let mut rng = SeededRng::new(seed);
    let mut assignments = BTreeMap::new();
    assign_side(
        balanced_groups,
        &[(Split::Learn, 0.8), (Split::Valid, 0.1), (Split::Test, 0.1)],
        dataset,
        &mut rng,
        &mut assignments,
    );
    assign_side(
        rest_groups,
        &[(Split::Valid, 0.2), (Split::Test, 0.8)],
        dataset,
        &mut rng,
        &mut assignments,
    );
    Ok(SplitAssignment { assignments, seed })
}

fn assign_side(
    mut groups: Vec<PatientGroup>,
    targets: &[(Split, f64)],
    dataset: &Dataset,
    rng: &mut SeededRng,
    assignments: &mut BTreeMap<String, Split>,
) {
    if groups.is_empty() {
        return;
    }
    let n_cond = dataset.n_conditions();
    let total: usize = groups.iter().map(|g| g.sample_idx.len()).sum();
    let mut pos_totals = vec![0usize; n_cond];
    for g in &groups {
        for (t, p) in pos_totals.iter_mut().zip(&g.positives) {
            *t += p;
        }
    }

    rng.shuffle(&mut groups);
    // Groups carrying the scarcest positives are placed first, while every
    // split still has room for them.
    let rarity = |g: &PatientGroup| -> f64 {
        g.positives
            .iter()
            .zip(&pos_totals)
            .filter(|(_, &t)| t > 0)
            .map(|(&p, &t)| p as f64 / t as f64)
            .sum()
    };
    groups.sort_by(|a, b| rarity(b).total_cmp(&rarity(a)));

    let mut cur_count: BTreeMap<Split, usize> = BTreeMap::new();
    let mut cur_pos: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
    for (s, _) in targets {
        cur_count.insert(*s, 0);
        cur_pos.insert(*s, vec![0; n_cond]);
    }
    for g in groups {
        // Condition deficits decide; the plain sample-count deficit only
        // breaks ties (and places groups that carry no positives at all),
        // so scarce positives are never crowded out by bulk balancing.
        let mut best: Option<(Split, f64, f64)> = None;
        for &(s, t) in targets {
            if t <= 0.0 {
                continue;
            }
            let mut condition_score = 0.0;
            for c in 0..n_cond {
                if pos_totals[c] > 0 && g.positives[c] > 0 {
                    let fill = cur_pos[&s][c] as f64 / pos_totals[c] as f64;
                    condition_score += (g.positives[c] as f64 / pos_totals[c] as f64) * (t - fill);
                }
            }
            let count_score =
                (g.sample_idx.len() as f64 / total as f64) * (t - cur_count[&s] as f64 / total as f64);
            let better = match best {
                None => true,
                Some((_, bc, bn)) => {
                    condition_score > bc || (condition_score == bc && count_score > bn)
                }
            };
            if better {
                best = Some((s, condition_score, count_score));
            }
        }
        let (chosen, _, _) = best.expect("at least one positive-target split");
        *cur_count.get_mut(&chosen).unwrap() += g.sample_idx.len();
        let pos = cur_pos.get_mut(&chosen).unwrap();
        for (p, gp) in pos.iter_mut().zip(&g.positives) {
            *p += gp;
        }
        for &i in &g.sample_idx {
            assignments.insert(dataset.records[i].sample_id.clone(), chosen);
        }
    }
}

// ---------------------------------------------------------------------------
// Patient-grouped folds
// ---------------------------------------------------------------------------

/// Deal patients round-robin into `n_folds` folds after a seeded shuffle, so
/// fold sizes in patients differ by at most one and same-patient samples
/// share a fold.
pub fn assign_folds(
    sample_ids: &[String],
    patient_ids: &[String],
    n_folds: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    if sample_ids.len() != patient_ids.len() {
        return Err(Error::DimensionMismatch {
            context: "assign_folds id lists".into(),
            expected: sample_ids.len(),
            actual: patient_ids.len(),
        });
    }
    if n_folds < 2 {
        return Err(Error::InvalidParameter {
            name: "n_folds".into(),
            message: format!("must be at least 2, got {n_folds}"),
        });
    }
    let mut patients: Vec<&str> = Vec::new();
    let mut seen = HashSet::new();
    for p in patient_ids {
        if seen.insert(p.as_str()) {
            patients.push(p.as_str());
        }
    }
    if patients.len() < n_folds {
        return Err(Error::TooFewPatients {
            patients: patients.len(),
            folds: n_folds,
        });
    }
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut patients);
    let fold_of_patient: HashMap<&str, usize> = patients
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i % n_folds))
        .collect();
    let folds = sample_ids
        .iter()
        .zip(patient_ids)
        .map(|(s, p)| (s.clone(), fold_of_patient[p.as_str()]))
        .collect();
    Ok(FoldAssignment { folds, n_folds })
}

// ---------------------------------------------------------------------------
// Assignment CSV output
// ---------------------------------------------------------------------------

pub fn write_split_csv(assignment: &SplitAssignment, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "assignment"])?;
    for (id, split) in &assignment.assignments {
        w.write_record([id.as_str(), split.name()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_fold_csv(assignment: &FoldAssignment, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "fold"])?;
    for (id, fold) in &assignment.folds {
        w.write_record([id.as_str(), &fold.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_id_csv(ids: &BTreeSet<String>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id"])?;
    for id in ids {
        w.write_record([id.as_str()])?;
    }
    w.flush()?;
    Ok(())
}
