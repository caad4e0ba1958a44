//! Dataset I/O, fold planning and the synthetic corpus generator.

pub mod dataset;
pub mod folds;
pub mod manifest;
pub mod sm3c;
pub mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use dataset::{build_features, FeatureSet, RejectedRecord, Sample};
pub use folds::{plan_folds, FoldPlan};
pub use manifest::{DatasetManifest, EventMeta, RecordEntry, StationMeta};
pub use synth::{synth_corpus, synth_record, BoundingBox, SynthConfig};

/// NEHRP-style site class; a boundary value belongs to the lower class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SiteClass {
    A,
    B,
    C,
    D,
    E,
}

impl SiteClass {
    pub const ALL: [SiteClass; 5] = [SiteClass::A, SiteClass::B, SiteClass::C, SiteClass::D, SiteClass::E];

    pub fn from_vs30(vs30: f64) -> Option<Self> {
        if !(vs30 > 0.0) || vs30.is_nan() {
            return None;
        }
        Some(if vs30 > 1500.0 {
            SiteClass::A
        } else if vs30 > 760.0 {
            SiteClass::B
        } else if vs30 > 360.0 {
            SiteClass::C
        } else if vs30 > 180.0 {
            SiteClass::D
        } else {
            SiteClass::E
        })
    }

    /// Open-closed `(lo, hi]` vs30 interval; class A is unbounded above.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            SiteClass::A => (1500.0, f64::INFINITY),
            SiteClass::B => (760.0, 1500.0),
            SiteClass::C => (360.0, 760.0),
            SiteClass::D => (180.0, 360.0),
            SiteClass::E => (0.0, 180.0),
        }
    }

    pub fn letter(self) -> &'static str {
        match self {
            SiteClass::A => "A",
            SiteClass::B => "B",
            SiteClass::C => "C",
            SiteClass::D => "D",
            SiteClass::E => "E",
        }
    }

    pub fn from_letter(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.letter() == s)
    }
}

impl fmt::Display for SiteClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}
