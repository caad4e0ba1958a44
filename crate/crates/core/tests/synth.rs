use vs30_core::datapipe::synth::{self, synth_catalog, synth_record, SynthConfig};
use vs30_core::datapipe::{EventMeta, StationMeta};
use vs30_core::sigprep::{crop_around_pga, find_pga, SiteContext, WindowLength};
use vs30_testkit::reference::{dft_magnitudes, pearson};

fn station(vs30: f64) -> StationMeta {
    StationMeta {
        station_id: "S".into(),
        lat: 39.0,
        lon: 31.0,
        vs30_mps: Some(vs30),
    }
}

fn event(magnitude: f64) -> EventMeta {
    EventMeta {
        event_id: "E".into(),
        origin_lat: 39.3,
        origin_lon: 31.4,
        magnitude,
        origin_time: "2020-01-01T00:00:00Z".into(),
    }
}

fn window_spectrum(vs30: f64, seed: u64) -> Vec<f64> {
    let rec = synth_record(&station(vs30), &event(5.0), 90.0, seed).unwrap();
    let w = crop_around_pga(&rec, WindowLength::S15, SiteContext::default())
        .unwrap()
        .accepted(WindowLength::S15)
        .unwrap();
    // sum horizontal magnitudes over 100-sample frames, so bins are 1 Hz apart
    let mut acc = vec![0.0; 51];
    for c in 0..2 {
        for frame in w.samples[c].chunks_exact(100) {
            let x: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
            for (a, m) in acc.iter_mut().zip(dft_magnitudes(&x)) {
                *a += m;
            }
        }
    }
    acc
}

#[test]
fn resonance_dominates_the_spectrum() {
    assert_eq!(synth::resonance_hz(600.0), 5.0);
    let spec = window_spectrum(600.0, 3);
    let peak = (1..spec.len()).max_by(|&a, &b| spec[a].total_cmp(&spec[b])).unwrap();
    assert!((4..=6).contains(&peak), "dominant bin {peak}");
}

#[test]
fn same_inputs_same_bytes() {
    let a = synth_record(&station(400.0), &event(4.0), 60.0, 9).unwrap();
    let b = synth_record(&station(400.0), &event(4.0), 60.0, 9).unwrap();
    for c in 0..3 {
        let ab: Vec<u32> = a.channels[c].iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.channels[c].iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
    }
}

#[test]
fn pga_scales_with_magnitude() {
    let lo = synth_record(&station(400.0), &event(3.0), 90.0, 21).unwrap();
    let hi = synth_record(&station(400.0), &event(6.0), 90.0, 21).unwrap();
    let ratio = find_pga(&hi.channels).2 as f64 / find_pga(&lo.channels).2 as f64;
    let expected = 10f64.powf(1.5);
    assert!((ratio / expected - 1.0).abs() < 1e-4, "ratio {ratio}");
}

#[test]
fn peak_sits_near_record_middle() {
    let cfg = SynthConfig {
        n_stations: 10,
        n_events: 10,
        seed: 4,
        ..SynthConfig::default()
    };
    let (stations, events, pairs) = synth_catalog(&cfg).unwrap();
    let mut accepted = 0;
    for (k, &(s, e)) in pairs.iter().enumerate() {
        let rec = synth_record(&stations[s], &events[e], cfg.record_s, k as u64).unwrap();
        if crop_around_pga(&rec, WindowLength::S60, SiteContext::default())
            .unwrap()
            .accepted(WindowLength::S60)
            .is_ok()
        {
            accepted += 1;
        }
    }
    assert!(accepted as f64 >= 0.95 * pairs.len() as f64, "{accepted}/{}", pairs.len());
}

#[test]
fn spectral_centroid_tracks_vs30() {
    let cfg = SynthConfig {
        n_stations: 200,
        n_events: 2,
        seed: 17,
        ..SynthConfig::default()
    };
    let (stations, events, _) = synth_catalog(&cfg).unwrap();
    let mut vs = Vec::new();
    let mut centroids = Vec::new();
    for (si, s) in stations.iter().enumerate() {
        let mut c = 0.0;
        for (ei, e) in events.iter().enumerate() {
            let rec = synth_record(s, e, cfg.record_s, synth::mix_seed(cfg.seed, si as u64, ei as u64)).unwrap();
            let w = crop_around_pga(&rec, WindowLength::S15, SiteContext::default())
                .unwrap()
                .accepted(WindowLength::S15)
                .unwrap();
            let x: Vec<f64> = w.samples[0].iter().map(|&v| v as f64).collect();
            let mag = dft_magnitudes(&x);
            let df = 100.0 / x.len() as f64;
            let num: f64 = mag.iter().enumerate().map(|(k, m)| k as f64 * df * m).sum();
            c += num / mag.iter().sum::<f64>();
        }
        vs.push(s.vs30_mps.unwrap());
        centroids.push(c / events.len() as f64);
    }
    let r = pearson(&vs, &centroids);
    println!("pearson(vs30, centroid) = {r:.3}");
    assert!(r > 0.7, "correlation {r}");
}
