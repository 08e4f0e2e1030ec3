//! Patient-wise stratified hold-out and k-fold splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};

/// Validation groups used when a single fold is requested.
pub const SINGLE_FOLD_GROUPS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub fold_count: usize,
    pub test_ratio: f64,
    pub seed: u64,
    pub test_ids: Vec<String>,
    pub folds: Vec<Fold>,
}

impl SplitAssignment {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Every bag outside the test set.
    pub fn pool_ids(&self) -> BTreeSet<&str> {
        self.folds
            .iter()
            .flat_map(|f| f.train_ids.iter().chain(&f.validation_ids))
            .map(String::as_str)
            .collect()
    }
}

/// FNV-1a over the seed and the patient id; stable across platforms.
pub fn patient_hash(seed: u64, patient_id: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    seed.to_le_bytes()
        .iter()
        .chain(patient_id.as_bytes())
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

struct Patient<'a> {
    id: &'a str,
    bags: Vec<&'a str>,
}

pub fn make_splits(
    manifest: &DatasetManifest,
    test_ratio: f64,
    fold_count: usize,
    seed: u64,
) -> Result<SplitAssignment> {
    if fold_count == 0 {
        return Err(Error::InvalidConfig("fold_count must be positive".into()));
    }
    if !(0.0..1.0).contains(&test_ratio) {
        return Err(Error::InvalidConfig(format!(
            "test_ratio {test_ratio} outside [0, 1)"
        )));
    }
    manifest.validate()?;
    if manifest.entries.is_empty() {
        return Err(Error::Empty("manifest entries"));
    }

    let mut entries: Vec<&ManifestEntry> = manifest.entries.iter().collect();
    entries.sort_by(|a, b| a.bag_id.cmp(&b.bag_id));

    // Group bags by patient; a patient is filed under its majority label.
    let mut by_patient: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
    for entry in &entries {
        by_patient.entry(&entry.patient_id).or_default().push(entry);
    }
    let mut per_class: Vec<Vec<Patient>> = (0..manifest.class_count).map(|_| Vec::new()).collect();
    for (id, bags) in by_patient {
        let mut votes = vec![0usize; manifest.class_count];
        for b in &bags {
            votes[b.label] += 1;
        }
        let label = (0..votes.len()).max_by(|&a, &b| votes[a].cmp(&votes[b]).then(b.cmp(&a))).unwrap();
        per_class[label].push(Patient {
            id,
            bags: bags.iter().map(|b| b.bag_id.as_str()).collect(),
        });
    }
    for (class, patients) in per_class.iter_mut().enumerate() {
        if patients.len() < fold_count + 1 {
            return Err(Error::Stratification(format!(
                "class {class} has {} distinct patients, at least {} required",
                patients.len(),
                fold_count + 1
            )));
        }
        patients.sort_by_key(|p| (patient_hash(seed, p.id), p.id));
    }

    let quotas = apportion_test_quotas(&per_class, entries.len(), test_ratio);
    let groups = if fold_count == 1 { SINGLE_FOLD_GROUPS } else { fold_count };
    let mut test_ids = Vec::new();
    let mut group_ids: Vec<Vec<String>> = vec![Vec::new(); groups];
    let mut group_totals = vec![0usize; groups];

    for (patients, quota) in per_class.iter().zip(quotas) {
        let mut taken = 0;
        let mut taken_patients = 0;
        let mut pool: Vec<&Patient> = Vec::new();
        for patient in patients {
            let size = patient.bags.len();
            let keeps_enough = patients.len() - taken_patients > fold_count;
            if taken + size <= quota && keeps_enough {
                taken += size;
                taken_patients += 1;
                test_ids.extend(patient.bags.iter().map(|s| s.to_string()));
            } else {
                pool.push(patient);
            }
        }
        let mut class_counts = vec![0usize; groups];
        for patient in pool {
            let target = (0..groups)
                .min_by_key(|&g| (class_counts[g], group_totals[g], g))
                .expect("at least one group");
            class_counts[target] += patient.bags.len();
            group_totals[target] += patient.bags.len();
            group_ids[target].extend(patient.bags.iter().map(|s| s.to_string()));
        }
    }

    test_ids.sort();
    for ids in &mut group_ids {
        ids.sort();
    }
    let folds = (0..fold_count)
        .map(|f| {
            let mut train_ids: Vec<String> = group_ids
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, ids)| ids.iter().cloned())
                .collect();
            train_ids.sort();
            Fold {
                train_ids,
                validation_ids: group_ids[f].clone(),
            }
        })
        .collect();

    Ok(SplitAssignment {
        fold_count,
        test_ratio,
        seed,
        test_ids,
        folds,
    })
}

/// Largest-remainder apportionment of `round(total · ratio)` test bags.
fn apportion_test_quotas(per_class: &[Vec<Patient>], total: usize, ratio: f64) -> Vec<usize> {
    let sizes: Vec<usize> = per_class
        .iter()
        .map(|ps| ps.iter().map(|p| p.bags.len()).sum())
        .collect();
    let target = (total as f64 * ratio).round() as usize;
    let exact: Vec<f64> = sizes.iter().map(|&n| n as f64 * ratio).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(quotas.iter().sum());
    for class in order.into_iter().cycle().take(sizes.len() * 2) {
        if missing == 0 {
            break;
        }
        if quotas[class] < sizes[class] {
            quotas[class] += 1;
            missing -= 1;
        }
    }
    quotas
}
