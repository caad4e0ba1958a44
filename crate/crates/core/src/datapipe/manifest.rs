//! CSV dataset manifest: records, stations and events.
//!
//! A dataset directory holds `manifest.csv`, `stations.csv` and `events.csv`;
//! waveform paths are relative to that directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Serialize};

use super::sm3c;
use super::SiteClass;
use crate::error::{CoreError, Result};
use crate::sigprep::WaveformRecord;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const STATIONS_FILE: &str = "stations.csv";
pub const EVENTS_FILE: &str = "events.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationMeta {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(deserialize_with = "empty_as_none", default)]
    pub vs30_mps: Option<f64>,
}

impl StationMeta {
    pub fn site_class(&self) -> Option<SiteClass> {
        self.vs30_mps.and_then(SiteClass::from_vs30)
    }

    pub fn is_labeled(&self) -> bool {
        self.vs30_mps.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMeta {
    pub event_id: String,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub magnitude: f64,
    #[serde(rename = "origin_time_iso8601")]
    pub origin_time: String,
}

impl EventMeta {
    pub fn origin_time(&self) -> Result<DateTime<FixedOffset>> {
        DateTime::parse_from_rfc3339(&self.origin_time).map_err(|e| {
            CoreError::Manifest(format!("event {}: bad origin time {:?}: {e}", self.event_id, self.origin_time))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub record_id: String,
    pub waveform_path: String,
    pub station_id: String,
    pub event_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<RecordEntry>,
    pub stations: Vec<StationMeta>,
    pub events: Vec<EventMeta>,
}

fn empty_as_none<'de, D>(d: D) -> std::result::Result<Option<f64>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let s: Option<String> = Option::deserialize(d)?;
    match s.as_deref().map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => v.parse().map(Some).map_err(serde::de::Error::custom),
    }
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CoreError::csv(path, e))?;
    let got: Vec<String> = rdr
        .headers()
        .map_err(|e| CoreError::csv(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    if got != header {
        return Err(CoreError::Manifest(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            got,
            header
        )));
    }
    rdr.deserialize().map(|r| r.map_err(|e| CoreError::csv(path, e))).collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::csv(path, e))?;
    if rows.is_empty() {
        w.write_record(header).map_err(|e| CoreError::csv(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| CoreError::csv(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

#[derive(Serialize)]
struct StationRow<'a> {
    station_id: &'a str,
    lat: f64,
    lon: f64,
    vs30_mps: Option<f64>,
}

impl DatasetManifest {
    /// Loads `manifest.csv` (or the manifest file given directly) together
    /// with the station and event tables beside it.
    pub fn load(path: &Path) -> Result<Self> {
        let (root, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let m = Self {
            records: read_csv(&manifest_path, &["record_id", "waveform_path", "station_id", "event_id"])?,
            stations: read_csv(&root.join(STATIONS_FILE), &["station_id", "lat", "lon", "vs30_mps"])?,
            events: read_csv(
                &root.join(EVENTS_FILE),
                &["event_id", "origin_lat", "origin_lon", "magnitude", "origin_time_iso8601"],
            )?,
            root,
        };
        m.validate()?;
        Ok(m)
    }

    /// Writes the three tables into `root`.
    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| CoreError::io(&self.root, e))?;
        write_csv(
            &self.root.join(MANIFEST_FILE),
            &self.records,
            &["record_id", "waveform_path", "station_id", "event_id"],
        )?;
        let stations: Vec<StationRow> = self
            .stations
            .iter()
            .map(|s| StationRow {
                station_id: &s.station_id,
                lat: s.lat,
                lon: s.lon,
                vs30_mps: s.vs30_mps,
            })
            .collect();
        write_csv(&self.root.join(STATIONS_FILE), &stations, &["station_id", "lat", "lon", "vs30_mps"])?;
        write_csv(
            &self.root.join(EVENTS_FILE),
            &self.events,
            &["event_id", "origin_lat", "origin_lon", "magnitude", "origin_time_iso8601"],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let mut station_ids = BTreeSet::new();
        for s in &self.stations {
            if !station_ids.insert(s.station_id.as_str()) {
                return Err(CoreError::Manifest(format!("duplicate station {}", s.station_id)));
            }
            if !(s.lat.is_finite() && s.lon.is_finite()) {
                return Err(CoreError::Manifest(format!("station {}: non-finite coordinates", s.station_id)));
            }
            if let Some(v) = s.vs30_mps {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(CoreError::Manifest(format!("station {}: vs30 {v} must be positive", s.station_id)));
                }
            }
        }
        let mut event_ids = BTreeSet::new();
        for e in &self.events {
            if !event_ids.insert(e.event_id.as_str()) {
                return Err(CoreError::Manifest(format!("duplicate event {}", e.event_id)));
            }
            if !(0.0..=10.0).contains(&e.magnitude) {
                return Err(CoreError::Manifest(format!(
                    "event {}: magnitude {} outside [0, 10]",
                    e.event_id, e.magnitude
                )));
            }
            if !(e.origin_lat.is_finite() && e.origin_lon.is_finite()) {
                return Err(CoreError::Manifest(format!("event {}: non-finite coordinates", e.event_id)));
            }
            e.origin_time()?;
        }
        let mut record_ids = BTreeSet::new();
        for r in &self.records {
            if !record_ids.insert(r.record_id.as_str()) {
                return Err(CoreError::Manifest(format!("duplicate record {}", r.record_id)));
            }
            if !station_ids.contains(r.station_id.as_str()) {
                return Err(CoreError::Manifest(format!(
                    "record {} references unknown station {}",
                    r.record_id, r.station_id
                )));
            }
            if !event_ids.contains(r.event_id.as_str()) {
                return Err(CoreError::Manifest(format!(
                    "record {} references unknown event {}",
                    r.record_id, r.event_id
                )));
            }
        }
        Ok(())
    }

    pub fn station_map(&self) -> BTreeMap<&str, &StationMeta> {
        self.stations.iter().map(|s| (s.station_id.as_str(), s)).collect()
    }

    pub fn event_map(&self) -> BTreeMap<&str, &EventMeta> {
        self.events.iter().map(|e| (e.event_id.as_str(), e)).collect()
    }

    pub fn labeled_stations(&self) -> Vec<StationMeta> {
        self.stations.iter().filter(|s| s.is_labeled()).cloned().collect()
    }

    pub fn waveform_path(&self, r: &RecordEntry) -> PathBuf {
        self.root.join(&r.waveform_path)
    }

    pub fn load_record(&self, r: &RecordEntry) -> Result<WaveformRecord> {
        let w = sm3c::read(&self.waveform_path(r))?;
        let rec = WaveformRecord {
            record_id: r.record_id.clone(),
            station_id: r.station_id.clone(),
            event_id: r.event_id.clone(),
            sample_rate_hz: w.sample_rate_hz,
            channels: w.channels,
        };
        rec.validate()?;
        Ok(rec)
    }
}
