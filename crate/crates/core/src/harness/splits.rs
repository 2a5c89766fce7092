use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Manifest;
use crate::error::{Error, Result};

/// Share of samples reserved for the patient-disjoint holdout set.
pub const HOLDOUT_FRACTION: f64 = 0.376;
pub const N_FOLDS: usize = 5;
pub const MAX_SPLIT_ATTEMPTS: u64 = 100;
pub const MIN_PATIENTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    /// 0-based reshuffle attempt that satisfied class presence.
    pub attempt: u64,
    pub holdout: Vec<String>,
    pub folds: Vec<Fold>,
}

impl SplitSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Scan ids of the train/val pool (all folds' validation sets).
    pub fn pool(&self) -> Vec<&str> {
        self.folds.iter().flat_map(|f| f.val.iter().map(String::as_str)).collect()
    }
}

/// Patients in first-appearance order with their scan ids.
fn patients(m: &Manifest) -> Vec<(String, Vec<String>)> {
    let mut order: Vec<String> = Vec::new();
    let mut scans: HashMap<String, Vec<String>> = HashMap::new();
    for r in &m.rows {
        scans
            .entry(r.patient_id.clone())
            .or_insert_with(|| {
                order.push(r.patient_id.clone());
                Vec::new()
            })
            .push(r.scan_id.clone());
    }
    order
        .into_iter()
        .map(|p| {
            let s = scans.remove(&p).expect("inserted above");
            (p, s)
        })
        .collect()
}

fn has_both(ids: &[String], labels: &HashMap<&str, u8>) -> bool {
    let pos = ids.iter().filter(|s| labels[s.as_str()] == 1).count();
    pos > 0 && pos < ids.len()
}

/// Patient-atomic holdout plus 5-fold split of the remaining pool.
///
/// Patients are shuffled with `seed`, taken into the holdout until it holds
/// `round(0.376·N)` samples, and the remaining patients are dealt in shuffled
/// order to whichever fold currently holds the fewest samples. Attempts that
/// leave a split without one of the classes are reshuffled.
pub fn make_splits(m: &Manifest, seed: u64) -> Result<SplitSpec> {
    m.validate()?;
    let groups = patients(m);
    if groups.len() < MIN_PATIENTS {
        return Err(Error::validation(format!(
            "splitting needs at least {MIN_PATIENTS} patients, got {}",
            groups.len()
        )));
    }
    let labels: HashMap<&str, u8> = m.rows.iter().map(|r| (r.scan_id.as_str(), r.label)).collect();
    if !has_both(&m.rows.iter().map(|r| r.scan_id.clone()).collect::<Vec<_>>(), &labels) {
        return Err(Error::validation("manifest must contain both classes"));
    }
    let target = (HOLDOUT_FRACTION * m.len() as f64).round() as usize;
    for attempt in 0..MAX_SPLIT_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt);
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.shuffle(&mut rng);

        let mut holdout = Vec::new();
        let mut rest = order.into_iter();
        while holdout.len() < target {
            let Some(p) = rest.next() else { break };
            holdout.extend(groups[p].1.iter().cloned());
        }
        let mut folds: Vec<Vec<String>> = vec![Vec::new(); N_FOLDS];
        for p in rest {
            let k = (0..N_FOLDS).min_by_key(|&k| folds[k].len()).expect("five folds");
            folds[k].extend(groups[p].1.iter().cloned());
        }
        let spec = SplitSpec {
            seed,
            attempt,
            holdout,
            folds: (0..N_FOLDS)
                .map(|k| Fold {
                    train: (0..N_FOLDS).filter(|&j| j != k).flat_map(|j| folds[j].iter().cloned()).collect(),
                    val: folds[k].clone(),
                })
                .collect(),
        };
        let ok = has_both(&spec.holdout, &labels)
            && spec.folds.iter().all(|f| has_both(&f.train, &labels) && has_both(&f.val, &labels));
        if ok {
            validate_splits(m, &spec)?;
            return Ok(spec);
        }
    }
    Err(Error::validation(format!("no split with both classes in every partition after {MAX_SPLIT_ATTEMPTS} attempts")))
}

/// Checks patient-level disjointness and that the folds partition the pool.
pub fn validate_splits(m: &Manifest, spec: &SplitSpec) -> Result<()> {
    let patient: HashMap<&str, &str> = m.rows.iter().map(|r| (r.scan_id.as_str(), r.patient_id.as_str())).collect();
    let lookup = |id: &str| -> Result<&str> {
        patient.get(id).copied().ok_or_else(|| Error::validation(format!("split references unknown scan {id}")))
    };
    if spec.folds.len() != N_FOLDS {
        return Err(Error::validation(format!("expected {N_FOLDS} folds, got {}", spec.folds.len())));
    }
    let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
    let mut pool: HashSet<&str> = HashSet::new();
    for id in &spec.holdout {
        owner.insert(lookup(id)?, "holdout");
    }
    for (k, f) in spec.folds.iter().enumerate() {
        for id in &f.val {
            if !pool.insert(id.as_str()) {
                return Err(Error::validation(format!("scan {id} appears in two validation folds")));
            }
            let p = lookup(id)?;
            if owner.get(p) == Some(&"holdout") {
                return Err(Error::validation(format!("patient {p} is in the holdout and fold {k}")));
            }
        }
    }
    let val_patients: Vec<HashSet<&str>> =
        spec.folds.iter().map(|f| f.val.iter().map(|id| patient[id.as_str()]).collect()).collect();
    for (k, f) in spec.folds.iter().enumerate() {
        let train: HashSet<&str> = f.train.iter().map(|id| id.as_str()).collect();
        let expect: HashSet<&str> = pool.iter().copied().filter(|id| !f.val.iter().any(|v| v == id)).collect();
        if train != expect || train.len() != f.train.len() {
            return Err(Error::validation(format!("fold {k} training set is not the other folds' union")));
        }
        for id in &f.train {
            let p = lookup(id)?;
            if val_patients[k].contains(p) {
                return Err(Error::validation(format!("patient {p} leaks between train and val of fold {k}")));
            }
            if owner.get(p) == Some(&"holdout") {
                return Err(Error::validation(format!("patient {p} leaks from holdout into fold {k}")));
            }
        }
    }
    let holdout: HashSet<&str> = spec.holdout.iter().map(String::as_str).collect();
    if holdout.len() != spec.holdout.len() || holdout.iter().any(|id| pool.contains(id)) {
        return Err(Error::validation("holdout scans overlap the train/val pool"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::ManifestRow;
    use rand::Rng;

    pub(crate) fn random_manifest(rng: &mut ChaCha8Rng, patients: usize, max_scans: usize) -> Manifest {
        let mut rows = Vec::new();
        for p in 0..patients {
            for s in 0..rng.random_range(1..=max_scans) {
                rows.push(ManifestRow {
                    patient_id: format!("p{p}"),
                    scan_id: format!("p{p}_s{s}"),
                    volume_path: format!("p{p}_s{s}.meta.json").into(),
                    label: u8::from(rng.random_bool(0.5)),
                    nodule_size_cm: None,
                    months_post_sbrt: None,
                });
            }
        }
        Manifest::new(rows, "").unwrap()
    }

    #[test]
    fn deterministic_and_leak_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_manifest(&mut rng, 30, 4);
        let a = make_splits(&m, 7).unwrap();
        assert_eq!(a, make_splits(&m, 7).unwrap());
        assert_ne!(a, make_splits(&m, 8).unwrap());
        validate_splits(&m, &a).unwrap();
        let total = a.holdout.len() + a.pool().len();
        assert_eq!(total, m.len());
    }

    #[test]
    fn study_sized_counts_with_single_scan_patients() {
        let rows = (0..221)
            .map(|i| ManifestRow {
                patient_id: format!("p{i}"),
                scan_id: format!("s{i}"),
                volume_path: "x.meta.json".into(),
                label: u8::from(i % 5 < 3),
                nodule_size_cm: None,
                months_post_sbrt: None,
            })
            .collect();
        let m = Manifest::new(rows, "").unwrap();
        let s = make_splits(&m, 0).unwrap();
        assert_eq!(s.holdout.len(), 83);
        for f in &s.folds {
            assert!((27..=28).contains(&f.val.len()));
            assert!((110..=111).contains(&f.train.len()));
        }
    }

    #[test]
    fn leakage_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_manifest(&mut rng, 20, 3);
        let mut s = make_splits(&m, 1).unwrap();
        let moved = s.folds[0].val.pop().unwrap();
        s.holdout.push(moved);
        assert!(validate_splits(&m, &s).is_err());
    }

    #[test]
    fn impossible_requests() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_manifest(&mut rng, 5, 2);
        assert!(make_splits(&m, 0).is_err());
        let mut one_class = random_manifest(&mut rng, 20, 2);
        one_class.rows.iter_mut().for_each(|r| r.label = 1);
        assert!(make_splits(&one_class, 0).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_manifest(&mut rng, 15, 2);
        let s = make_splits(&m, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("splits.json");
        s.save(&p).unwrap();
        assert_eq!(SplitSpec::load(&p).unwrap(), s);
    }
}
