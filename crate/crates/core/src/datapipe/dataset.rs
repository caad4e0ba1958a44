//! Turns manifest records into network-ready feature vectors.

use std::collections::BTreeMap;
use std::thread;

use super::manifest::{DatasetManifest, EventMeta, RecordEntry, StationMeta};
use crate::error::{CoreError, Result};
use crate::sigprep::{self, CropOutcome, Domain, SiteContext, WindowLength};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub record_id: String,
    pub station_id: String,
    pub event_id: String,
    /// Channels-first features, unstandardised.
    pub features: Vec<f32>,
    pub context: SiteContext,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedRecord {
    pub record_id: String,
    pub station_id: String,
    pub pga_index: usize,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub domain: Domain,
    pub window: WindowLength,
    pub shape: Vec<usize>,
    pub samples: Vec<Sample>,
    pub rejected: Vec<RejectedRecord>,
}

impl FeatureSet {
    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }
}

enum Processed {
    Sample(Sample),
    Rejected(RejectedRecord),
}

struct Lookup<'a> {
    manifest: &'a DatasetManifest,
    stations: BTreeMap<&'a str, &'a StationMeta>,
    events: BTreeMap<&'a str, &'a EventMeta>,
}

fn process(lk: &Lookup, r: &RecordEntry, domain: Domain, window: WindowLength) -> Result<Processed> {
    let (manifest, stations, events) = (lk.manifest, &lk.stations, &lk.events);
    let st = stations
        .get(r.station_id.as_str())
        .ok_or_else(|| CoreError::Manifest(format!("unknown station {}", r.station_id)))?;
    let ev = events
        .get(r.event_id.as_str())
        .ok_or_else(|| CoreError::Manifest(format!("unknown event {}", r.event_id)))?;
    let rec = sigprep::normalize_rate(&manifest.load_record(r)?)?;
    let context = SiteContext {
        label_vs30: st.vs30_mps,
        station_lat: st.lat,
        station_lon: st.lon,
        event_lat: ev.origin_lat,
        event_lon: ev.origin_lon,
    };
    Ok(match sigprep::crop_around_pga(&rec, window, context)? {
        CropOutcome::Accepted(w) => Processed::Sample(Sample {
            record_id: r.record_id.clone(),
            station_id: r.station_id.clone(),
            event_id: r.event_id.clone(),
            features: sigprep::features(&w, domain)?,
            context: w.context,
        }),
        CropOutcome::Rejected {
            record_id,
            pga_index,
            n_samples,
        } => Processed::Rejected(RejectedRecord {
            record_id,
            station_id: r.station_id.clone(),
            pga_index,
            n_samples,
        }),
    })
}

/// Loads, windows and transforms every record accepted by `keep`, in manifest
/// order. `threads > 1` splits the records into contiguous chunks processed
/// concurrently; the result is identical for any thread count.
pub fn build_features(
    manifest: &DatasetManifest,
    domain: Domain,
    window: WindowLength,
    keep: &(dyn Fn(&RecordEntry) -> bool + Sync),
    threads: usize,
) -> Result<FeatureSet> {
    let lk = Lookup {
        manifest,
        stations: manifest.station_map(),
        events: manifest.event_map(),
    };
    let lk = &lk;
    let todo: Vec<&RecordEntry> = manifest.records.iter().filter(|r| keep(r)).collect();
    let threads = threads.clamp(1, todo.len().max(1));
    let chunk = todo.len().div_ceil(threads).max(1);
    let results: Vec<Result<Processed>> = if threads == 1 {
        todo.iter().map(|r| process(lk, r, domain, window)).collect()
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = todo
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|r| process(lk, r, domain, window))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("feature worker panicked"))
                .collect()
        })
    };
    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    for r in results {
        match r? {
            Processed::Sample(s) => samples.push(s),
            Processed::Rejected(r) => rejected.push(r),
        }
    }
    Ok(FeatureSet {
        domain,
        window,
        shape: domain.feature_shape(window),
        samples,
        rejected,
    })
}
