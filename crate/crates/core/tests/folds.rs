use std::collections::BTreeMap;

use proptest::prelude::*;
use vs30_core::datapipe::{plan_folds, FoldPlan, RecordEntry, SiteClass, StationMeta};

fn arb_stations() -> impl Strategy<Value = Vec<StationMeta>> {
    prop::collection::vec(prop::option::weighted(0.9, 100.0f64..2000.0), 5..80).prop_map(|labels| {
        labels
            .into_iter()
            .enumerate()
            .map(|(i, vs30)| StationMeta {
                station_id: format!("ST{i:03}"),
                lat: 38.0,
                lon: 30.0,
                vs30_mps: vs30,
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn every_labelled_station_lands_in_exactly_one_fold(stations in arb_stations(), k in 2usize..6, seed in any::<u64>()) {
        let labelled: Vec<&StationMeta> = stations.iter().filter(|s| s.is_labeled()).collect();
        prop_assume!(labelled.len() >= k);
        let plan = plan_folds(&stations, k, seed).unwrap();
        prop_assert_eq!(plan.assignment.len(), labelled.len());
        prop_assert!(plan.assignment.values().all(|&f| f < k));
        let sizes: Vec<usize> = (0..k).map(|f| plan.test_stations(f).len()).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), labelled.len());
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in 0..k {
            prop_assert!(plan.test_stations(f).is_disjoint(&plan.train_stations(f)));
            prop_assert_eq!(plan.test_stations(f).len() + plan.train_stations(f).len(), labelled.len());
        }
        // each class is spread within one station across folds
        let mut per_class: BTreeMap<SiteClass, Vec<usize>> = BTreeMap::new();
        for s in &labelled {
            per_class.entry(s.site_class().unwrap()).or_insert_with(|| vec![0; k])[plan.assignment[&s.station_id]] += 1;
        }
        for counts in per_class.values() {
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
        prop_assert_eq!(plan_folds(&stations, k, seed).unwrap(), plan.clone());
        prop_assert_eq!(FoldPlan::from_csv(&plan.to_csv()).unwrap(), plan);
    }

    #[test]
    fn record_split_is_station_disjoint(
        stations in arb_stations(),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..200),
        seed in any::<u64>(),
    ) {
        let labelled = stations.iter().filter(|s| s.is_labeled()).count();
        prop_assume!(labelled >= 3);
        let plan = plan_folds(&stations, 3, seed).unwrap();
        let records: Vec<RecordEntry> = picks
            .iter()
            .enumerate()
            .map(|(i, ix)| RecordEntry {
                record_id: format!("R{i}"),
                waveform_path: format!("w/R{i}.sm3c"),
                station_id: ix.get(&stations).station_id.clone(),
                event_id: "E".into(),
            })
            .collect();
        for fold in 0..3 {
            let (train, test) = plan.split_records(&records, fold);
            let test_ids = plan.test_stations(fold);
            prop_assert!(test.iter().all(|r| test_ids.contains(r.station_id.as_str())));
            prop_assert!(train.iter().all(|r| !test_ids.contains(r.station_id.as_str())));
            let unlabelled = records.iter().filter(|r| plan.fold_of(&r.station_id).is_none()).count();
            prop_assert_eq!(train.len() + test.len() + unlabelled, records.len());
        }
    }
}
