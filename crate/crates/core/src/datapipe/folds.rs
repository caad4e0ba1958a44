//! Station-disjoint cross-validation folds, stratified by site class.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, RecordEntry, StationMeta};
use super::SiteClass;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

/// Assigns every labelled station to one fold.
///
/// Stations are grouped by site class (A to E), each group is shuffled with a
/// single seeded generator, and folds are dealt round-robin with a counter
/// that carries over from one class to the next.
pub fn plan_folds(stations: &[StationMeta], n_folds: usize, seed: u64) -> Result<FoldPlan> {
    if n_folds < 2 {
        return Err(CoreError::Folds(format!("need at least 2 folds, got {n_folds}")));
    }
    let mut by_class: BTreeMap<SiteClass, Vec<&str>> = BTreeMap::new();
    for s in stations {
        if let Some(c) = s.site_class() {
            by_class.entry(c).or_default().push(&s.station_id);
        }
    }
    let labeled: usize = by_class.values().map(Vec::len).sum();
    if labeled < n_folds {
        return Err(CoreError::Folds(format!(
            "{labeled} labelled stations cannot fill {n_folds} folds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    let mut counter = 0usize;
    for ids in by_class.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for id in ids.iter() {
            if assignment.insert(id.to_string(), counter % n_folds).is_some() {
                return Err(CoreError::Folds(format!("duplicate station {id}")));
            }
            counter += 1;
        }
    }
    Ok(FoldPlan {
        n_folds,
        seed,
        assignment,
    })
}

impl FoldPlan {
    pub fn check_fold(&self, fold: usize) -> Result<()> {
        if fold >= self.n_folds {
            return Err(CoreError::Config(format!("fold {fold} out of range 0..{}", self.n_folds)));
        }
        Ok(())
    }

    pub fn fold_of(&self, station_id: &str) -> Option<usize> {
        self.assignment.get(station_id).copied()
    }

    pub fn test_stations(&self, fold: usize) -> BTreeSet<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn train_stations(&self, fold: usize) -> BTreeSet<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// Records of labelled stations split into `(train, test)` for `fold`.
    pub fn split_records<'a>(&self, records: &'a [RecordEntry], fold: usize) -> (Vec<&'a RecordEntry>, Vec<&'a RecordEntry>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for r in records {
            match self.fold_of(&r.station_id) {
                Some(f) if f == fold => test.push(r),
                Some(_) => train.push(r),
                None => {}
            }
        }
        (train, test)
    }

    /// Fraction of labelled-station records that fall in each fold's test set.
    pub fn test_fractions(&self, manifest: &DatasetManifest) -> Vec<f64> {
        let mut counts = vec![0usize; self.n_folds];
        for r in &manifest.records {
            if let Some(f) = self.fold_of(&r.station_id) {
                counts[f] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        counts.iter().map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 }).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# n_folds={} seed={}\nstation_id,fold\n", self.n_folds, self.seed);
        for (id, f) in &self.assignment {
            s.push_str(&format!("{id},{f}\n"));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| CoreError::Format { what: "folds.csv", detail: d };
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut n_folds = None;
        let mut seed = None;
        for kv in head.trim_start_matches('#').split_whitespace() {
            match kv.split_once('=') {
                Some(("n_folds", v)) => n_folds = v.parse().ok(),
                Some(("seed", v)) => seed = v.parse().ok(),
                _ => return Err(bad(format!("unexpected header item {kv:?}"))),
            }
        }
        let (Some(n_folds), Some(seed)) = (n_folds, seed) else {
            return Err(bad("first line must be `# n_folds=K seed=S`".into()));
        };
        if lines.next() != Some("station_id,fold") {
            return Err(bad("missing `station_id,fold` header".into()));
        }
        let mut assignment = BTreeMap::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let (id, f) = line.split_once(',').ok_or_else(|| bad(format!("line {}: {line:?}", i + 3)))?;
            let f: usize = f.parse().map_err(|_| bad(format!("line {}: bad fold {f:?}", i + 3)))?;
            if f >= n_folds {
                return Err(bad(format!("station {id}: fold {f} >= {n_folds}")));
            }
            if assignment.insert(id.to_string(), f).is_some() {
                return Err(bad(format!("station {id} listed twice")));
            }
        }
        Ok(Self {
            n_folds,
            seed,
            assignment,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::from_csv(&text)
    }
}
