//! Per-station percentage errors aggregated to site classes, error
//! histograms and map data.
//!
//! Aggregation runs record → station → class: each station's error is the
//! signed mean of its records' percentage errors, its absolute error is the
//! magnitude of that mean, and a class error is the mean of its stations'
//! absolute errors. Every reported number is rounded to six decimals so that
//! the exported text files re-parse to the in-memory values exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datapipe::{FeatureSet, Sample, SiteClass};
use crate::error::{CoreError, Result};
use crate::trainer::{predict_vs30, Checkpoint};

pub const HIST_LO: f64 = -100.0;
pub const HIST_HI: f64 = 100.0;
pub const HIST_WIDTH: f64 = 5.0;
pub const HIST_BINS: usize = 40;

/// Rounds to six decimals through the decimal text form.
pub fn q6(x: f64) -> f64 {
    format!("{x:.6}").parse().expect("formatted float parses")
}

pub fn classify_site(vs30: f64) -> Result<SiteClass> {
    SiteClass::from_vs30(vs30).ok_or_else(|| CoreError::Config(format!("vs30 must be positive, got {vs30}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationError {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub site_class: SiteClass,
    pub true_vs30: f64,
    pub n_records: usize,
    /// Signed mean over records of `100 · (pred − true) / true`.
    pub mean_pct_error: f64,
    pub abs_mean_pct_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub site_class: SiteClass,
    pub n_stations: usize,
    pub abs_mean_error: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    /// Signed station errors below −100 %.
    pub underflow: usize,
    /// Bin `i` covers `[−100 + 5i, −95 + 5i)`.
    pub counts: Vec<usize>,
    /// Signed station errors at or above +100 %.
    pub overflow: usize,
}

impl Histogram {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut h = Self {
            underflow: 0,
            counts: vec![0; HIST_BINS],
            overflow: 0,
        };
        for v in values {
            if v < HIST_LO {
                h.underflow += 1;
            } else if v >= HIST_HI {
                h.overflow += 1;
            } else {
                let i = (((v - HIST_LO) / HIST_WIDTH).floor() as usize).min(HIST_BINS - 1);
                h.counts[i] += 1;
            }
        }
        h
    }

    pub fn total(&self) -> usize {
        self.underflow + self.overflow + self.counts.iter().sum::<usize>()
    }

    pub fn bin_of(v: f64) -> Option<usize> {
        (HIST_LO..HIST_HI)
            .contains(&v)
            .then(|| (((v - HIST_LO) / HIST_WIDTH).floor() as usize).min(HIST_BINS - 1))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lower_pct,upper_pct,count\n");
        s.push_str(&format!("-inf,{HIST_LO:.6},{}\n", self.underflow));
        for (i, c) in self.counts.iter().enumerate() {
            let lo = HIST_LO + HIST_WIDTH * i as f64;
            s.push_str(&format!("{lo:.6},{:.6},{c}\n", lo + HIST_WIDTH));
        }
        s.push_str(&format!("{HIST_HI:.6},inf,{}\n", self.overflow));
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedStation {
    pub station_id: String,
    pub reason: String,
}

/// Overall error of one fold inside a merged cross-validation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: Option<usize>,
    pub n_stations: usize,
    pub overall_abs_mean_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub fold: Option<usize>,
    pub stations: Vec<StationError>,
    pub classes: Vec<ClassRow>,
    pub overall_abs_mean_error: f64,
    /// Population standard deviation of the signed station errors.
    pub std_pct: f64,
    pub histogram: Histogram,
    pub skipped: Vec<SkippedStation>,
    /// Per-fold overall errors when this report merges several folds.
    pub folds: Vec<FoldSummary>,
}

/// One test-record prediction with its station's ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordPrediction {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub true_vs30: f64,
    pub pred_vs30: f64,
}

/// Signed per-station errors from record predictions, in station-id order.
pub fn station_errors(preds: &[RecordPrediction]) -> Result<Vec<StationError>> {
    let mut by_station: BTreeMap<&str, Vec<&RecordPrediction>> = BTreeMap::new();
    for p in preds {
        by_station.entry(&p.station_id).or_default().push(p);
    }
    by_station
        .into_iter()
        .map(|(id, rs)| {
            let first = rs[0];
            if rs.iter().any(|r| r.true_vs30 != first.true_vs30) {
                return Err(CoreError::InvalidRecord {
                    record_id: id.to_owned(),
                    detail: "station has records with different vs30 labels".into(),
                });
            }
            let class = classify_site(first.true_vs30)?;
            // sort so the float sum does not depend on record order
            let mut pct: Vec<f64> = rs.iter().map(|r| 100.0 * (r.pred_vs30 - r.true_vs30) / r.true_vs30).collect();
            pct.sort_by(f64::total_cmp);
            let mean = q6(pct.iter().sum::<f64>() / pct.len() as f64);
            Ok(StationError {
                station_id: id.to_owned(),
                lat: q6(first.lat),
                lon: q6(first.lon),
                site_class: class,
                true_vs30: q6(first.true_vs30),
                n_records: rs.len(),
                mean_pct_error: mean,
                abs_mean_pct_error: mean.abs(),
            })
        })
        .collect()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl EvalReport {
    /// Builds class rows, overall error, spread and histogram from station
    /// errors.
    pub fn from_stations(label: &str, fold: Option<usize>, mut stations: Vec<StationError>, skipped: Vec<SkippedStation>) -> Result<Self> {
        stations.sort_by(|a, b| a.station_id.cmp(&b.station_id));
        if let Some(w) = stations.windows(2).find(|w| w[0].station_id == w[1].station_id) {
            return Err(CoreError::Config(format!("station {} appears twice", w[0].station_id)));
        }
        let mut per_class: BTreeMap<SiteClass, Vec<f64>> = BTreeMap::new();
        for s in &stations {
            per_class.entry(s.site_class).or_default().push(s.abs_mean_pct_error);
        }
        let classes = per_class
            .into_iter()
            .map(|(c, v)| ClassRow {
                site_class: c,
                n_stations: v.len(),
                abs_mean_error: q6(mean(v)),
            })
            .collect();
        let overall = q6(mean(stations.iter().map(|s| s.abs_mean_pct_error)));
        let m = mean(stations.iter().map(|s| s.mean_pct_error));
        let std = q6(mean(stations.iter().map(|s| (s.mean_pct_error - m).powi(2))).sqrt());
        Ok(Self {
            label: label.to_owned(),
            fold,
            histogram: Histogram::of(stations.iter().map(|s| s.mean_pct_error)),
            stations,
            classes,
            overall_abs_mean_error: overall,
            std_pct: std,
            skipped,
            folds: Vec::new(),
        })
    }

    /// Pools the stations of per-fold reports into one cross-validation
    /// report. Folds must not share stations.
    pub fn merge(label: &str, reports: &[EvalReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(CoreError::EmptySet("no reports to merge".into()));
        }
        let stations = reports.iter().flat_map(|r| r.stations.iter().cloned()).collect();
        let skipped = reports.iter().flat_map(|r| r.skipped.iter().cloned()).collect();
        let mut out = Self::from_stations(label, None, stations, skipped)?;
        out.folds = reports
            .iter()
            .map(|r| FoldSummary {
                fold: r.fold,
                n_stations: r.stations.len(),
                overall_abs_mean_error: r.overall_abs_mean_error,
            })
            .collect();
        Ok(out)
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    /// `Site Class,No. of Stations,Absolute Mean Error %`, overall row first.
    pub fn class_summary_csv(&self) -> String {
        let mut s = String::from("Site Class,No. of Stations,Absolute Mean Error %\n");
        s.push_str(&format!("Overall,{},{:.6}\n", self.n_stations(), self.overall_abs_mean_error));
        for c in &self.classes {
            s.push_str(&format!("{},{},{:.6}\n", c.site_class, c.n_stations, c.abs_mean_error));
        }
        s
    }

    pub fn station_errors_csv(&self) -> String {
        let mut s = String::from("station_id,lat,lon,site_class,true_vs30,n_records,mean_pct_error,abs_mean_pct_error\n");
        for e in &self.stations {
            s.push_str(&format!(
                "{},{:.6},{:.6},{},{:.6},{},{:.6},{:.6}\n",
                e.station_id, e.lat, e.lon, e.site_class, e.true_vs30, e.n_records, e.mean_pct_error, e.abs_mean_pct_error
            ));
        }
        s
    }

    pub fn error_map_geojson(&self) -> String {
        let features: Vec<_> = self
            .stations
            .iter()
            .map(|e| {
                json!({
                    "type": "Feature",
                    "geometry": {"type": "Point", "coordinates": [e.lon, e.lat]},
                    "properties": {
                        "station_id": e.station_id,
                        "abs_mean_pct_error": e.abs_mean_pct_error,
                        "site_class": e.site_class,
                    },
                })
            })
            .collect();
        let doc = json!({"type": "FeatureCollection", "features": features});
        serde_json::to_string_pretty(&doc).expect("json value serialises") + "\n"
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes `report.json`, `class_summary.csv`, `station_errors.csv`,
    /// `histogram.csv` and `error_map.geojson` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let files = [
            ("report.json", self.to_json()),
            ("class_summary.csv", self.class_summary_csv()),
            ("station_errors.csv", self.station_errors_csv()),
            ("histogram.csv", self.histogram.to_csv()),
            ("error_map.geojson", self.error_map_geojson()),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| CoreError::io(&p, e))?;
        }
        Ok(())
    }

    /// Reads `report.json` from a directory written by [`EvalReport::export`].
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("report.json");
        let text = fs::read_to_string(&p).map_err(|e| CoreError::io(&p, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Deserialize)]
struct StationRow {
    station_id: String,
    lat: f64,
    lon: f64,
    site_class: String,
    true_vs30: f64,
    n_records: usize,
    mean_pct_error: f64,
    abs_mean_pct_error: f64,
}

/// Parses the text written by [`EvalReport::station_errors_csv`].
pub fn parse_station_errors(text: &str) -> Result<Vec<StationError>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize::<StationRow>()
        .map(|row| {
            let r = row.map_err(|e| CoreError::csv("station_errors.csv", e))?;
            let site_class = SiteClass::from_letter(&r.site_class).ok_or_else(|| CoreError::Format {
                what: "station_errors.csv",
                detail: format!("unknown site class {:?}", r.site_class),
            })?;
            Ok(StationError {
                station_id: r.station_id,
                lat: r.lat,
                lon: r.lon,
                site_class,
                true_vs30: r.true_vs30,
                n_records: r.n_records,
                mean_pct_error: r.mean_pct_error,
                abs_mean_pct_error: r.abs_mean_pct_error,
            })
        })
        .collect()
}

/// Anything that maps windows to vs30 predictions in m/s.
pub trait Predictor {
    fn predict(&self, samples: &[&Sample]) -> Result<Vec<f64>>;
}

/// A checkpoint predicting with `threads` workers.
pub struct CheckpointPredictor<'a> {
    pub checkpoint: &'a Checkpoint,
    pub threads: usize,
}

impl Predictor for CheckpointPredictor<'_> {
    fn predict(&self, samples: &[&Sample]) -> Result<Vec<f64>> {
        predict_vs30(self.checkpoint, samples, self.threads)
    }
}

/// Predicts the mean training label for every input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanPredictor {
    pub mean_vs30: f64,
}

impl MeanPredictor {
    pub fn fit(labels: &[f64]) -> Result<Self> {
        if labels.is_empty() {
            return Err(CoreError::EmptySet("no training labels for the mean predictor".into()));
        }
        Ok(Self {
            mean_vs30: labels.iter().sum::<f64>() / labels.len() as f64,
        })
    }

    /// Fits on the labelled windows of the given training stations.
    pub fn fit_stations(data: &FeatureSet, train: &BTreeSet<&str>) -> Result<Self> {
        let labels: Vec<f64> = data
            .samples
            .iter()
            .filter(|s| train.contains(s.station_id.as_str()))
            .filter_map(|s| s.context.label_vs30)
            .collect();
        Self::fit(&labels)
    }
}

impl Predictor for MeanPredictor {
    fn predict(&self, samples: &[&Sample]) -> Result<Vec<f64>> {
        Ok(vec![self.mean_vs30; samples.len()])
    }
}

/// Scores `predictor` on the windows of `test_stations`. Test stations with
/// no surviving window or no label are listed as skipped.
pub fn evaluate(
    predictor: &dyn Predictor,
    data: &FeatureSet,
    test_stations: &BTreeSet<&str>,
    label: &str,
    fold: Option<usize>,
) -> Result<EvalReport> {
    let samples: Vec<&Sample> = data
        .samples
        .iter()
        .filter(|s| test_stations.contains(s.station_id.as_str()) && s.context.label_vs30.is_some())
        .collect();
    let mut skipped = Vec::new();
    for &st in test_stations {
        if samples.iter().any(|s| s.station_id == st) {
            continue;
        }
        let windows = data.samples.iter().filter(|s| s.station_id == st).count();
        let rejected = data.rejected.iter().filter(|r| r.station_id == st).count();
        let reason = if windows > 0 {
            "no vs30 label".to_owned()
        } else {
            format!("no surviving windows ({rejected} rejected)")
        };
        skipped.push(SkippedStation {
            station_id: st.to_owned(),
            reason,
        });
    }
    if samples.is_empty() {
        return Err(CoreError::EmptySet("no test windows to evaluate".into()));
    }
    let preds = predictor.predict(&samples)?;
    let records: Vec<RecordPrediction> = samples
        .iter()
        .zip(preds)
        .map(|(s, p)| RecordPrediction {
            station_id: s.station_id.clone(),
            lat: s.context.station_lat,
            lon: s.context.station_lon,
            true_vs30: s.context.label_vs30.expect("filtered"),
            pred_vs30: p,
        })
        .collect();
    EvalReport::from_stations(label, fold, station_errors(&records)?, skipped)
}
