use std::collections::{BTreeMap, BTreeSet};

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use vs30_core::datapipe::{FeatureSet, RejectedRecord, Sample, SiteClass};
use vs30_core::evalreport::{
    classify_site, evaluate, parse_station_errors, station_errors, EvalReport, MeanPredictor, Predictor,
    RecordPrediction, HIST_BINS,
};
use vs30_core::sigprep::{Domain, SiteContext, WindowLength};
use vs30_core::Result;

fn arb_records() -> impl Strategy<Value = Vec<RecordPrediction>> {
    prop::collection::vec((0usize..12, 1usize..6), 1..12).prop_flat_map(|stations| {
        let mut strategies = Vec::new();
        for (i, (vs_idx, n)) in stations.into_iter().enumerate() {
            let truth = 120.0 + 150.0 * vs_idx as f64;
            strategies.push(prop::collection::vec(10.0f64..3000.0, n).prop_map(move |preds| {
                preds
                    .into_iter()
                    .map(|p| RecordPrediction {
                        station_id: format!("S{i:03}"),
                        lat: 38.0 + i as f64 * 0.137,
                        lon: 30.0 + i as f64 * 0.071,
                        true_vs30: truth,
                        pred_vs30: p,
                    })
                    .collect::<Vec<_>>()
            }));
        }
        strategies.prop_map(|v| v.concat())
    })
}

fn report(records: &[RecordPrediction]) -> EvalReport {
    EvalReport::from_stations("t", Some(0), station_errors(records).unwrap(), Vec::new()).unwrap()
}

/// Independent re-aggregation straight from the definitions.
fn oracle(records: &[RecordPrediction]) -> (f64, BTreeMap<SiteClass, (usize, f64)>) {
    let mut per: BTreeMap<&str, (f64, Vec<f64>)> = BTreeMap::new();
    for r in records {
        per.entry(&r.station_id)
            .or_insert((r.true_vs30, Vec::new()))
            .1
            .push((r.pred_vs30 - r.true_vs30) / r.true_vs30 * 100.0);
    }
    let mut classes: BTreeMap<SiteClass, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::new();
    for (truth, errs) in per.values() {
        let signed = errs.iter().sum::<f64>() / errs.len() as f64;
        classes.entry(SiteClass::from_vs30(*truth).unwrap()).or_default().push(signed.abs());
        all.push(signed.abs());
    }
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    (m(&all), classes.into_iter().map(|(c, v)| (c, (v.len(), m(&v)))).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_matches_definitions(records in arb_records()) {
        let r = report(&records);
        let (overall, classes) = oracle(&records);
        prop_assert!((r.overall_abs_mean_error - overall).abs() < 1e-5);
        prop_assert_eq!(r.classes.len(), classes.len());
        for row in &r.classes {
            let (n, e) = classes[&row.site_class];
            prop_assert_eq!(row.n_stations, n);
            prop_assert!((row.abs_mean_error - e).abs() < 1e-5);
        }
        prop_assert_eq!(r.classes.iter().map(|c| c.n_stations).sum::<usize>(), r.n_stations());
        prop_assert_eq!(r.histogram.total(), r.n_stations());
        let weighted: f64 = r.classes.iter().map(|c| c.abs_mean_error * c.n_stations as f64).sum::<f64>()
            / r.n_stations() as f64;
        // both sides are rounded to 6 decimals, half a unit each
        prop_assert!((weighted - r.overall_abs_mean_error).abs() <= 1e-6 + 1e-12);
    }

    #[test]
    fn aggregation_ignores_order(records in arb_records(), seed in any::<u64>()) {
        let mut shuffled = records.clone();
        // deterministic Fisher-Yates on a simple LCG
        let mut s = seed | 1;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(report(&records), report(&shuffled));
    }

    #[test]
    fn exported_numbers_reparse_exactly(records in arb_records()) {
        let r = report(&records);
        let parsed = parse_station_errors(&r.station_errors_csv()).unwrap();
        prop_assert_eq!(&parsed, &r.stations);
        let again = EvalReport::from_stations("t", Some(0), parsed, Vec::new()).unwrap();
        prop_assert_eq!(again.class_summary_csv(), r.class_summary_csv());
        prop_assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn classification_is_monotone(a in 1.0f64..4000.0, b in 1.0f64..4000.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        // letters run from A (stiffest) to E, so a faster site never gets a later letter
        prop_assert!(classify_site(hi).unwrap() <= classify_site(lo).unwrap());
    }
}

#[test]
fn class_summary_reaggregates_from_station_file() {
    let records: Vec<RecordPrediction> = (0..30)
        .map(|i| RecordPrediction {
            station_id: format!("S{:02}", i % 10),
            lat: 39.0 + (i % 10) as f64 * 0.01,
            lon: 31.0,
            true_vs30: 150.0 + 170.0 * (i % 10) as f64,
            pred_vs30: 200.0 + 37.0 * i as f64,
        })
        .collect();
    let r = report(&records);
    let dir = tempfile::tempdir().unwrap();
    r.export(dir.path()).unwrap();
    let read = |n: &str| std::fs::read_to_string(dir.path().join(n)).unwrap();
    let stations = parse_station_errors(&read("station_errors.csv")).unwrap();
    let mut sums: BTreeMap<SiteClass, (usize, f64)> = BTreeMap::new();
    for s in &stations {
        let e = sums.entry(s.site_class).or_default();
        e.0 += 1;
        e.1 += s.abs_mean_pct_error;
    }
    let summary = read("class_summary.csv");
    let rows: Vec<Vec<String>> = summary.lines().skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect();
    assert_eq!(rows.len(), sums.len() + 1);
    assert_eq!(rows[0][0], "Overall");
    let overall = stations.iter().map(|s| s.abs_mean_pct_error).sum::<f64>() / stations.len() as f64;
    assert_abs_diff_eq!(rows[0][2].parse::<f64>().unwrap(), overall, epsilon = 1e-6);
    for row in &rows[1..] {
        let (n, sum) = sums[&SiteClass::from_letter(&row[0]).unwrap()];
        assert_eq!(row[1].parse::<usize>().unwrap(), n);
        assert_abs_diff_eq!(row[2].parse::<f64>().unwrap(), sum / n as f64, epsilon = 1e-6);
    }
    let geo: serde_json::Value = serde_json::from_str(&read("error_map.geojson")).unwrap();
    assert_eq!(geo["features"].as_array().unwrap().len(), stations.len());
    assert_eq!(read("histogram.csv").lines().count(), 1 + HIST_BINS + 2);

    let back = EvalReport::load(dir.path()).unwrap();
    assert_eq!(back, r);
    let dir2 = tempfile::tempdir().unwrap();
    back.export(dir2.path()).unwrap();
    for f in ["report.json", "class_summary.csv", "station_errors.csv", "histogram.csv", "error_map.geojson"] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(dir2.path().join(f)).unwrap(), "{f}");
    }
}

fn sample(id: &str, station: &str, vs30: f64) -> Sample {
    Sample {
        record_id: id.into(),
        station_id: station.into(),
        event_id: "E1".into(),
        features: vec![0.0; 3],
        context: SiteContext {
            label_vs30: Some(vs30),
            station_lat: 39.0,
            station_lon: 31.0,
            event_lat: 39.5,
            event_lon: 31.5,
        },
    }
}

fn feature_set() -> FeatureSet {
    FeatureSet {
        domain: Domain::Time,
        window: WindowLength::S15,
        shape: vec![3, 1],
        samples: vec![sample("r1", "a", 300.0), sample("r2", "a", 300.0), sample("r3", "b", 900.0)],
        rejected: vec![RejectedRecord {
            record_id: "r4".into(),
            station_id: "c".into(),
            pga_index: 10,
            n_samples: 3000,
        }],
    }
}

struct Truth;

impl Predictor for Truth {
    fn predict(&self, samples: &[&Sample]) -> Result<Vec<f64>> {
        Ok(samples.iter().map(|s| s.context.label_vs30.unwrap()).collect())
    }
}

#[test]
fn perfect_predictor_scores_zero() {
    let data = feature_set();
    let test: BTreeSet<&str> = ["a", "b", "c"].into();
    let r = evaluate(&Truth, &data, &test, "truth", Some(1)).unwrap();
    assert_eq!((r.overall_abs_mean_error, r.std_pct), (0.0, 0.0));
    assert_eq!(r.histogram.counts[20], 2);
    assert_eq!(r.histogram.total(), 2);
    assert_eq!(r.skipped.len(), 1);
    assert_eq!(r.skipped[0].station_id, "c");
}

#[test]
fn baseline_report_is_finite() {
    let data = feature_set();
    let base = MeanPredictor::fit_stations(&data, &["a", "b"].into()).unwrap();
    assert_eq!(base.mean_vs30, 500.0);
    let r = evaluate(&base, &data, &["a", "b"].into(), "baseline", None).unwrap();
    assert!(r.overall_abs_mean_error.is_finite() && r.std_pct.is_finite());
    // a: +66.67 %, b: −44.44 %
    assert_abs_diff_eq!(r.overall_abs_mean_error, (200.0 / 3.0 + 400.0 / 9.0) / 2.0, epsilon = 1e-6);
}

#[test]
fn merged_overall_is_station_weighted() {
    let mk = |fold: usize, n: usize, err: f64| {
        let records: Vec<RecordPrediction> = (0..n)
            .map(|i| RecordPrediction {
                station_id: format!("F{fold}S{i}"),
                lat: 39.0,
                lon: 31.0,
                true_vs30: 400.0,
                pred_vs30: 400.0 * (1.0 + err * (i + 1) as f64 / 100.0),
            })
            .collect();
        EvalReport::from_stations("f", Some(fold), station_errors(&records).unwrap(), Vec::new()).unwrap()
    };
    let folds = vec![mk(0, 3, 10.0), mk(1, 5, -4.0), mk(2, 2, 7.5)];
    let merged = EvalReport::merge("cv", &folds).unwrap();
    let weighted = folds.iter().map(|r| r.overall_abs_mean_error * r.n_stations() as f64).sum::<f64>() / 10.0;
    assert_abs_diff_eq!(merged.overall_abs_mean_error, weighted, epsilon = 1e-6);
    assert_eq!(merged.folds.len(), 3);
    assert!(EvalReport::merge("dup", &[folds[0].clone(), folds[0].clone()]).is_err());
}
