//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per check and
//! exits non-zero if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ndnet::{Mode, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vs30_core::datapipe::{
    self, build_features, plan_folds, sm3c, synth_record, DatasetManifest, EventMeta, RecordEntry, StationMeta, SynthConfig,
};
use vs30_core::encoders::{EncoderKind, Model, ModelSpec};
use vs30_core::evalreport::EvalReport;
use vs30_core::sigprep::{self, Domain, SiteContext, WindowLength, N_BINS};
use vs30_core::trainer::{self, Checkpoint, LoadMode, LossTrace, Split, Target, TrainConfig};
use vs30_testkit::gradcheck::{run_suite, GRAD_REL_TOL};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn vs30(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vs30"))
        .args(args)
        .current_dir(dir)
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!(
            "`vs30 {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn gradient_suite() -> Outcome {
    let reports = run_suite(20, 20240601);
    let mut worst = 0.0f64;
    for r in &reports {
        ensure!(r.cases >= 20, "{} ran only {} cases", r.layer, r.cases);
        ensure!(
            r.passed(),
            "{}: gradient rel error {:.3e}, forward rel error {:.3e}",
            r.layer,
            r.worst_grad_rel,
            r.worst_forward_rel
        );
        worst = worst.max(r.worst_grad_rel);
    }
    Ok(format!("{} layer types x 20 shapes, worst gradient rel error {worst:.2e} (tol {GRAD_REL_TOL:e})", reports.len()))
}

fn causality_suite() -> Outcome {
    let mut checked = 0;
    for w in WindowLength::ALL {
        let spec = ModelSpec::new(EncoderKind::Tcn, Domain::Time, w);
        let mut model = Model::new(&spec, 31).map_err(err)?;
        let l = w.samples();
        let mut rng = ChaCha8Rng::seed_from_u64(w.seconds() as u64);
        let x: Vec<f32> = (0..3 * l).map(|_| rng.random_range(-1.0..1.0)).collect();
        for t in [0, l / 3, l / 2, l - 2] {
            let base = embed_at(&mut model, &x, t)?;
            let mut y = x.clone();
            for c in 0..3 {
                for v in &mut y[c * l + t + 1..(c + 1) * l] {
                    *v += rng.random_range(-10.0..10.0);
                }
            }
            ensure!(embed_at(&mut model, &y, t)? == base, "{w}: output at t={t} moved after a future perturbation");
            checked += 1;
        }
    }
    Ok(format!("{checked} readout positions across 15/30/60 s exactly invariant"))
}

fn embed_at(model: &mut Model, x: &[f32], t: usize) -> Result<Vec<u32>, String> {
    let mut tape = Tape::new();
    let mut shape = vec![1];
    shape.extend(model.spec.input_shape());
    let xv = tape.constant(shape, x.to_vec()).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let e = model.encode_at(&mut tape, xv, Mode::Eval, &mut rng, Some(t)).map_err(err)?;
    Ok(bits(tape.value(e)))
}

fn station(id: &str, vs30: Option<f64>) -> StationMeta {
    StationMeta {
        station_id: id.into(),
        lat: 39.0,
        lon: 31.5,
        vs30_mps: vs30,
    }
}

fn event(id: &str) -> EventMeta {
    EventMeta {
        event_id: id.into(),
        origin_lat: 39.2,
        origin_lon: 31.8,
        magnitude: 5.0,
        origin_time: "2021-03-04T05:06:07Z".into(),
    }
}

fn shape_suite() -> Outcome {
    let rec = synth_record(&station("S", Some(500.0)), &event("E"), 90.0, 3).map_err(err)?;
    for (w, d) in WindowLength::ALL.into_iter().zip([29, 59, 119]) {
        let win = sigprep::crop_around_pga(&rec, w, SiteContext::default())
            .map_err(err)?
            .accepted(w)
            .map_err(err)?;
        let vol = sigprep::to_spectral(&win).map_err(err)?;
        ensure!(vol.shape() == [d, N_BINS, 3], "{w}: spectral volume {:?}", vol.shape());
        ensure!(vol.data.len() == d * 51 * 3, "{w}: {} values", vol.data.len());
    }
    let mut n = 0;
    for kind in [EncoderKind::Resnet, EncoderKind::Tcn] {
        for domain in [Domain::Time, Domain::Frequency] {
            for w in WindowLength::ALL {
                let spec = ModelSpec::new(kind, domain, w);
                let mut m = Model::new(&spec, 5).map_err(err)?;
                let win = sigprep::crop_around_pga(&rec, w, SiteContext::default())
                    .map_err(err)?
                    .accepted(w)
                    .map_err(err)?;
                let x = sigprep::features(&win, domain).map_err(err)?;
                ensure!(x.len() == spec.input_shape().iter().product::<usize>(), "{kind}/{domain}/{w}: input size");
                let mut x2 = x.clone();
                x2.extend(x.iter().map(|v| v * 0.5));
                let y = m.predict(x2, vec![0.3, 0.6, 0.7, 0.2], 2).map_err(err)?;
                ensure!(y.len() == 2 && y.iter().all(|v| v.is_finite()), "{kind}/{domain}/{w}: output {y:?}");
                n += 1;
            }
        }
    }
    Ok(format!("{n} configurations give finite scalars; D = 29/59/119"))
}

fn fold_disjointness_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for corpus in 0..100 {
        let n_st = rng.random_range(5..60);
        let stations: Vec<StationMeta> = (0..n_st)
            .map(|i| {
                let label = (i < 2 || rng.random_bool(0.85)).then(|| rng.random_range(100.0..2000.0));
                station(&format!("S{i}"), label)
            })
            .collect();
        let labeled: Vec<StationMeta> = stations.iter().filter(|s| s.vs30_mps.is_some()).cloned().collect();
        let k = rng.random_range(2..=5usize).min(labeled.len());
        let records: Vec<RecordEntry> = (0..rng.random_range(10..400))
            .map(|i| {
                let s = &stations[rng.random_range(0..stations.len())];
                RecordEntry {
                    record_id: format!("R{i}"),
                    waveform_path: format!("w/R{i}.sm3c"),
                    station_id: s.station_id.clone(),
                    event_id: format!("E{}", rng.random_range(0..20)),
                }
            })
            .collect();
        let plan = plan_folds(&labeled, k, rng.random()).map_err(err)?;
        ensure!(plan.assignment.len() == labeled.len(), "corpus {corpus}: not every labelled station assigned");
        for fold in 0..k {
            let (train, test) = plan.split_records(&records, fold);
            let test_st: BTreeSet<&str> = test.iter().map(|r| r.station_id.as_str()).collect();
            ensure!(
                train.iter().all(|r| !test_st.contains(r.station_id.as_str())),
                "corpus {corpus} fold {fold}: a test station has training records"
            );
            let held = plan.test_stations(fold);
            ensure!(
                plan.train_stations(fold).is_disjoint(&held),
                "corpus {corpus} fold {fold}: station lists overlap"
            );
        }
    }
    Ok("100 random corpora, no test-station record in any training split".into())
}

fn overfit_check() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = SynthConfig {
        n_stations: 10,
        n_events: 1,
        record_s: 80.0,
        seed: 4,
        ..SynthConfig::default()
    };
    let manifest = datapipe::synth_corpus(&cfg, dir.path()).map_err(err)?;
    let plan = plan_folds(&manifest.labeled_stations(), 5, 1).map_err(err)?;
    let mut lines = Vec::new();
    for kind in [EncoderKind::Resnet, EncoderKind::Tcn] {
        for domain in [Domain::Time, Domain::Frequency] {
            let features = build_features(&manifest, domain, WindowLength::S15, &|_| true, 1).map_err(err)?;
            let spec = ModelSpec::new(kind, domain, WindowLength::S15);
            let tc = TrainConfig {
                epochs: 200,
                batch_size: 8,
                base_lr: 1e-3,
                dropout_rate: 0.0,
                val_fraction: 0.0,
                seed: 11,
                ..TrainConfig::default()
            };
            let out = trainer::train_single_phase(&features, &plan, 0, &spec, &tc, &mut |_| {}).map_err(err)?;
            ensure!(out.setup.train.n == 8, "{kind}/{domain}: {} training samples", out.setup.train.n);
            let losses = out.trace.losses(Split::Train);
            let (first, last) = (losses[0], *losses.last().expect("200 epochs"));
            ensure!(
                last < 0.01 * first,
                "{kind}/{domain}: final MSE {last:.4} is {:.2}% of initial {first:.4}",
                100.0 * last / first
            );
            lines.push(format!("{kind}/{domain} {:.2e}", last / first));
        }
    }
    Ok(format!("final/initial train MSE: {}", lines.join(", ")))
}

const CV_FILES: [&str; 5] = ["report.json", "class_summary.csv", "station_errors.csv", "histogram.csv", "error_map.geojson"];

/// synth → split → train × folds → evaluate × folds → report, in `dir`.
fn pipeline(dir: &Path, synth: &[&str], epochs: usize) -> Result<PathBuf, String> {
    let mut args = vec!["synth", "--out", "corpus"];
    args.extend_from_slice(synth);
    vs30(dir, &args)?;
    vs30(dir, &["split", "--manifest", "corpus", "--folds", "5", "--seed", "3", "--out", "folds.csv"])?;
    fs::write(
        dir.join("run.toml"),
        format!("[data]\nmanifest = \"corpus\"\nfolds = \"folds.csv\"\n\n[train]\nepochs = {epochs}\nbase_lr = 1e-3\nseed = 5\n"),
    )
    .map_err(err)?;
    let mut evals = Vec::new();
    for fold in 0..5 {
        let f = fold.to_string();
        let run = format!("runs/fold{fold}");
        let ev = format!("evals/fold{fold}");
        vs30(dir, &["train", "--config", "run.toml", "--fold", &f, "--out", &run])?;
        vs30(dir, &["evaluate", "--checkpoint", &format!("{run}/best.ckpt"), "--manifest", "corpus", "--out", &ev])?;
        evals.push(ev);
    }
    let mut args = vec!["report", "--out", "cv", "--runs"];
    args.extend(evals.iter().map(String::as_str));
    vs30(dir, &args)?;
    Ok(dir.join("cv"))
}

fn learnability_check() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let cv = pipeline(
        dir.path(),
        &["--stations", "200", "--events", "20", "--seed", "2024", "--class-skew"],
        6,
    )?;
    let model = EvalReport::load(&cv).map_err(err)?;
    let base = EvalReport::load(&cv.join("baseline")).map_err(err)?;
    ensure!(model.folds.len() == 5, "{} folds in the merged report", model.folds.len());
    let ratio = model.overall_abs_mean_error / base.overall_abs_mean_error;
    ensure!(
        ratio <= 0.7,
        "model {:.3}% vs baseline {:.3}% (ratio {ratio:.3})",
        model.overall_abs_mean_error,
        base.overall_abs_mean_error
    );
    Ok(format!(
        "overall {:.3}% vs mean baseline {:.3}% over {} stations (ratio {ratio:.3})",
        model.overall_abs_mean_error,
        base.overall_abs_mean_error,
        model.n_stations()
    ))
}

fn transfer_fidelity() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let cfg = SynthConfig {
        n_stations: 15,
        n_events: 3,
        record_s: 40.0,
        seed: 8,
        ..SynthConfig::default()
    };
    let manifest = datapipe::synth_corpus(&cfg, dir.path()).map_err(err)?;
    let plan = plan_folds(&manifest.labeled_stations(), 5, 2).map_err(err)?;
    let mut lines = Vec::new();
    for (kind, domain) in [(EncoderKind::Resnet, Domain::Frequency), (EncoderKind::Tcn, Domain::Time)] {
        let features = build_features(&manifest, domain, WindowLength::S15, &|_| true, 1).map_err(err)?;
        let spec = ModelSpec {
            output_dim: 2,
            ..ModelSpec::new(kind, domain, WindowLength::S15)
        };
        let base = TrainConfig {
            epochs: 2,
            batch_size: 16,
            base_lr: 1e-3,
            seed: 3,
            ..TrainConfig::default()
        };
        let pre_cfg = TrainConfig {
            target: Target::Epicenter,
            ..base.clone()
        };
        let pre = trainer::pretrain_epicenter(&features, Some((&plan, 1)), &spec, &pre_cfg, &mut |_| {}).map_err(err)?;
        // round-trip through the file format, as the CLI does
        let ckpt_path = dir.path().join(format!("pre-{kind}.ckpt"));
        pre.best.save(&ckpt_path).map_err(err)?;
        let pretrained = Checkpoint::load(&ckpt_path, LoadMode::Transfer).map_err(err)?;
        let ft_cfg = TrainConfig { epochs: 0, ..base };
        let ft = trainer::train_two_phase(&pretrained, &features, &plan, 1, &ft_cfg, &mut |_| {}).map_err(err)?;
        let probe: Vec<f32> = features.samples.iter().take(4).flat_map(|s| s.features.iter().copied()).collect();
        let a = pre.best.model.clone().embed(probe.clone(), 4).map_err(err)?;
        let b = ft.best.model.clone().embed(probe, 4).map_err(err)?;
        ensure!(bits(&a) == bits(&b), "{kind}/{domain}: encoder activations differ at epoch 0");
        let manifest = ft.transfer.ok_or("no transfer manifest")?;
        let copied: BTreeSet<&str> = manifest.copied.iter().map(String::as_str).collect();
        let encoder: BTreeSet<&str> = ft.best.model.store.names().filter(|n| n.starts_with("encoder.")).collect();
        ensure!(copied == encoder, "{kind}/{domain}: copied set differs from the encoder parameter set");
        ensure!(manifest.copied.len() == copied.len(), "{kind}/{domain}: duplicate names in manifest");
        let head: BTreeSet<&str> = ft.best.model.store.names().filter(|n| !n.starts_with("encoder.")).collect();
        let reinit: BTreeSet<&str> = manifest.reinitialized.iter().map(String::as_str).collect();
        ensure!(reinit == head, "{kind}/{domain}: reinitialised set differs from the head");
        lines.push(format!("{kind}/{domain} {} tensors", copied.len()));
    }
    Ok(format!("bitwise encoder activations; copied exactly the encoder ({})", lines.join(", ")))
}

fn schedule_check() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = dir.path();
    vs30(d, &["synth", "--stations", "12", "--events", "2", "--seed", "6", "--record-s", "40", "--out", "corpus"])?;
    vs30(d, &["split", "--manifest", "corpus", "--folds", "3", "--seed", "1", "--out", "folds.csv"])?;
    vs30(
        d,
        &[
            "train", "--manifest", "corpus", "--folds", "folds.csv", "--fold", "0", "--out", "run",
            "--set", "train.epochs=21", "--set", "model.resnet.stages=[4, 4]", "--set", "model.resnet.stem_filters=4",
        ],
    )?;
    let trace = LossTrace::from_csv(&fs::read_to_string(d.join("run/loss_trace.csv")).map_err(err)?).map_err(err)?;
    let want = [(4, 1e-5), (5, 9e-6), (10, 8.1e-6), (20, 7.29e-6)];
    for (epoch, lr) in want {
        let got = trace.lr_at(epoch).ok_or(format!("no row for epoch {epoch}"))?;
        ensure!(got == lr, "epoch {epoch}: logged lr {got:e}, expected {lr:e}");
    }
    Ok("epochs 4/5/10/20 logged 1e-5 / 9e-6 / 8.1e-6 / 7.29e-6".into())
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let d = dir.path();
    let cfg = SynthConfig {
        n_stations: 10,
        n_events: 2,
        record_s: 40.0,
        seed: 12,
        ..SynthConfig::default()
    };
    let manifest = datapipe::synth_corpus(&cfg, &d.join("corpus")).map_err(err)?;

    let wf = manifest.waveform_path(&manifest.records[0]);
    let raw = fs::read(&wf).map_err(err)?;
    let decoded = sm3c::decode(&raw).map_err(err)?;
    ensure!(sm3c::encode(&decoded).map_err(err)? == raw, "SM3C bytes changed");

    let loaded = DatasetManifest::load(&d.join("corpus")).map_err(err)?;
    ensure!(loaded == manifest, "manifest differs after load");
    let copy = d.join("copy");
    fs::create_dir_all(&copy).map_err(err)?;
    let moved = DatasetManifest { root: copy.clone(), ..loaded };
    moved.save().map_err(err)?;
    for f in ["manifest.csv", "stations.csv", "events.csv"] {
        let a = fs::read(d.join("corpus").join(f)).map_err(err)?;
        ensure!(a == fs::read(copy.join(f)).map_err(err)?, "{f} bytes changed");
    }

    let features = build_features(&manifest, Domain::Frequency, WindowLength::S15, &|_| true, 1).map_err(err)?;
    let plan = plan_folds(&manifest.labeled_stations(), 2, 0).map_err(err)?;
    let tc = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let out = trainer::train_single_phase(
        &features,
        &plan,
        0,
        &ModelSpec::new(EncoderKind::Tcn, Domain::Frequency, WindowLength::S15),
        &tc,
        &mut |_| {},
    )
    .map_err(err)?;
    let p = d.join("m.ckpt");
    out.last.save(&p).map_err(err)?;
    let bytes = fs::read(&p).map_err(err)?;
    let back = Checkpoint::load(&p, LoadMode::Inference).map_err(err)?;
    ensure!(back.encode().map_err(err)? == bytes, "checkpoint bytes changed");
    let probe: Vec<f32> = features.samples.iter().take(3).flat_map(|s| s.features.iter().copied()).collect();
    let coords = vec![0.2, 0.4, 0.6, 0.8, 0.1, 0.9];
    let a = out.last.model.clone().predict(probe.clone(), coords.clone(), 3).map_err(err)?;
    let b = back.model.clone().predict(probe, coords, 3).map_err(err)?;
    ensure!(bits(&a) == bits(&b), "checkpoint forward pass changed");

    let test = plan.test_stations(0);
    let predictor = vs30_core::evalreport::CheckpointPredictor {
        checkpoint: &back,
        threads: 1,
    };
    let report = vs30_core::evalreport::evaluate(&predictor, &features, &test, "m", Some(0)).map_err(err)?;
    report.export(&d.join("r1")).map_err(err)?;
    let again = EvalReport::load(&d.join("r1")).map_err(err)?;
    ensure!(again == report, "report differs after load");
    again.export(&d.join("r2")).map_err(err)?;
    for f in CV_FILES {
        ensure!(
            fs::read(d.join("r1").join(f)).map_err(err)? == fs::read(d.join("r2").join(f)).map_err(err)?,
            "{f} bytes changed"
        );
    }
    Ok("SM3C, manifest, checkpoint and report files reproduce byte for byte".into())
}

fn determinism_check() -> Outcome {
    let synth = ["--stations", "25", "--events", "4", "--seed", "99", "--record-s", "60"];
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    let ca = pipeline(a.path(), &synth, 3)?;
    let cb = pipeline(b.path(), &synth, 3)?;
    let mut compared = 0;
    for sub in ["", "baseline"] {
        for f in CV_FILES {
            let x = fs::read(ca.join(sub).join(f)).map_err(err)?;
            let y = fs::read(cb.join(sub).join(f)).map_err(err)?;
            ensure!(x == y, "cv/{sub}/{f} differs between runs");
            compared += 1;
        }
    }
    for fold in 0..5 {
        for f in ["best.ckpt", "last.ckpt", "loss_trace.csv"] {
            let rel = format!("runs/fold{fold}/{f}");
            ensure!(
                fs::read(a.path().join(&rel)).map_err(err)? == fs::read(b.path().join(&rel)).map_err(err)?,
                "{rel} differs between runs"
            );
            compared += 1;
        }
    }
    Ok(format!("{compared} output files byte-identical across two runs"))
}

fn main() {
    let checks: [(&str, fn() -> Outcome, Duration); 10] = [
        ("gradient suite", gradient_suite, Duration::from_secs(60)),
        ("causality suite", causality_suite, Duration::from_secs(60)),
        ("shape suite", shape_suite, Duration::from_secs(60)),
        ("fold-disjointness suite", fold_disjointness_suite, Duration::from_secs(60)),
        ("overfit check", overfit_check, Duration::from_secs(300)),
        ("learnability check", learnability_check, Duration::from_secs(900)),
        ("transfer fidelity", transfer_fidelity, Duration::from_secs(300)),
        ("schedule check", schedule_check, Duration::from_secs(900)),
        ("format round-trips", format_round_trips, Duration::from_secs(60)),
        ("determinism", determinism_check, Duration::from_secs(900)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check, budget) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let result = result.and_then(|msg| {
            if took > budget {
                Err(format!("took {:.1} s, budget {} s ({msg})", took.as_secs_f64(), budget.as_secs()))
            } else {
                Ok(msg)
            }
        });
        match result {
            Ok(msg) => println!("PASS {name} [{:.1} s]: {msg}", took.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name} [{:.1} s]: {msg}", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
