use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::Utc;
use vs30_core::datapipe::{self, build_features, plan_folds, sm3c, DatasetManifest, FeatureSet, FoldPlan, Sample, SynthConfig};
use vs30_core::evalreport::{evaluate as score, CheckpointPredictor, EvalReport, MeanPredictor};
use vs30_core::sigprep::{self, SiteContext, WaveformRecord};
use vs30_core::trainer::{self, Checkpoint, EpochReport, LoadMode, LossTrace, Phase, Target, TrainOutcome};

use crate::config::RunConfig;
use crate::{EvaluateArgs, PredictArgs, PretrainArgs, ReportArgs, RunArgs, SplitArgs, SynthArgs, TrainArgs, TransferArgs, UsageError};

/// Worker count from `VS30_THREADS`, default 1.
pub fn threads() -> Result<usize> {
    match std::env::var("VS30_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!(UsageError(format!("VS30_THREADS must be a positive integer, got {s:?}"))),
        },
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_stations: a.stations,
        n_events: a.events,
        class_skew: a.class_skew,
        cutoff_km: a.cutoff_km,
        record_s: a.record_s,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let manifest = datapipe::synth_corpus(&cfg, &a.out)?;
    println!(
        "wrote {} records from {} stations and {} events to {}",
        manifest.records.len(),
        manifest.stations.len(),
        manifest.events.len(),
        a.out.display()
    );
    Ok(())
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let m = DatasetManifest::load(path)?;
    m.validate()?;
    Ok(m)
}

pub fn split(a: SplitArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let plan = plan_folds(&manifest.labeled_stations(), a.folds, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    plan.save(&a.out)?;
    let fractions: Vec<String> = plan.test_fractions(&manifest).iter().map(|f| format!("{f:.3}")).collect();
    println!(
        "{} stations in {} folds; test record fractions {}",
        plan.assignment.len(),
        plan.n_folds,
        fractions.join(" ")
    );
    Ok(())
}

/// Output directory of a training command, with its timestamped log.
struct RunDir {
    out: PathBuf,
    log: File,
}

impl RunDir {
    fn open(out: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        write(&out.join("config.toml"), cfg.to_toml()?)?;
        let log_path = out.join("run.log");
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .with_context(|| format!("opening {}", log_path.display()))?;
        Ok(Self { out: out.to_owned(), log })
    }

    fn log(&mut self, msg: &str) {
        // the log is diagnostic only; a failed write must not abort training
        let _ = writeln!(self.log, "{} {msg}", Utc::now().to_rfc3339());
    }

    fn progress(&mut self) -> impl FnMut(&EpochReport) + '_ {
        move |r: &EpochReport| {
            let val = r.val_loss.map_or("-".to_owned(), |v| v.to_string());
            self.log(&format!("epoch {} train_loss {} val_loss {val} lr {:e}", r.epoch, r.train_loss, r.lr));
        }
    }

    fn finish(&mut self, outcome: &TrainOutcome, features: &FeatureSet, previous: Option<LossTrace>) -> Result<()> {
        outcome.best.save(&self.out.join("best.ckpt"))?;
        outcome.last.save(&self.out.join("last.ckpt"))?;
        let mut trace = previous.unwrap_or_default();
        trace.rows.extend(outcome.trace.rows.iter().cloned());
        write(&self.out.join("loss_trace.csv"), trace.to_csv())?;
        let mut rej = String::from("record_id,station_id,pga_index,n_samples\n");
        for r in &features.rejected {
            rej.push_str(&format!("{},{},{},{}\n", r.record_id, r.station_id, r.pga_index, r.n_samples));
        }
        write(&self.out.join("rejected_records.csv"), rej)?;
        if let Some(m) = &outcome.transfer {
            write(&self.out.join("transfer_manifest.json"), serde_json::to_string_pretty(m)? + "\n")?;
        }
        for w in &outcome.best.model.warnings {
            self.log(&format!("warning: {w}"));
        }
        let best = &outcome.best.meta;
        let summary = match (best.epoch, best.best_val_loss) {
            (Some(e), Some(v)) => format!("best epoch {e} val_loss {v}"),
            _ => format!("finished {} epochs without a validation split", outcome.trace.rows.len()),
        };
        self.log(&summary);
        println!("{summary}; checkpoints in {}", self.out.display());
        Ok(())
    }
}

fn resolve(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(run.config.as_deref(), &run.overrides)?;
    if let Some(m) = &run.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    if let Some(f) = &run.folds {
        cfg.data.folds = Some(f.clone());
    }
    absolutize(&mut cfg)?;
    Ok(cfg)
}

/// Makes data paths absolute so the resolved config reloads from any
/// directory.
fn absolutize(cfg: &mut RunConfig) -> Result<()> {
    for p in [&mut cfg.data.manifest, &mut cfg.data.folds, &mut cfg.data.pretrained]
        .into_iter()
        .flatten()
    {
        *p = std::path::absolute(&*p).with_context(|| format!("resolving {}", p.display()))?;
    }
    Ok(())
}

fn load_plan(path: &Path, fold: usize) -> Result<FoldPlan> {
    let plan = FoldPlan::load(path)?;
    plan.check_fold(fold)?;
    Ok(plan)
}

fn features_for(cfg: &RunConfig, manifest: &DatasetManifest, keep: &(dyn Fn(&str) -> bool + Sync), threads: usize) -> Result<FeatureSet> {
    Ok(build_features(
        manifest,
        cfg.model.domain,
        cfg.model.duration_s,
        &|r| keep(&r.station_id),
        threads,
    )?)
}

/// Loads `best.ckpt`/`last.ckpt` and the loss trace of an earlier run in
/// `out`, checking that the configuration is unchanged.
fn previous_run(out: &Path, cfg: &RunConfig) -> Result<(Checkpoint, Checkpoint, LossTrace)> {
    let mode = LoadMode::Resume { config_hash: cfg.hash() };
    let last = Checkpoint::load(&out.join("last.ckpt"), mode.clone())?;
    let best = Checkpoint::load(&out.join("best.ckpt"), mode)?;
    let p = out.join("loss_trace.csv");
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok((best, last, LossTrace::from_csv(&text)?))
}

fn run_or_resume(
    run: &RunArgs,
    cfg: &RunConfig,
    features: &FeatureSet,
    fresh: impl FnOnce(&mut dyn FnMut(&EpochReport)) -> vs30_core::Result<TrainOutcome>,
) -> Result<()> {
    let previous = if run.resume {
        Some(previous_run(&run.out, cfg)?)
    } else {
        None
    };
    let mut dir = RunDir::open(&run.out, cfg)?;
    dir.log(&format!("config_hash {}", cfg.hash()));
    let (outcome, trace) = match previous {
        Some((best, last, trace)) => {
            dir.log(&format!("resuming after epoch {:?}", last.meta.epoch));
            let out = trainer::resume(&best, &last, features, cfg.train.epochs, &mut dir.progress())?;
            (out, Some(trace))
        }
        None => (fresh(&mut dir.progress())?, None),
    };
    dir.finish(&outcome, features, trace)
}

pub fn train(a: TrainArgs, threads: usize) -> Result<()> {
    let mut cfg = resolve(&a.run)?;
    cfg.train.phase = Phase::Single;
    cfg.train.target = Target::Vs30;
    cfg.model.output_dim = 1;
    let manifest = load_manifest(cfg.manifest()?)?;
    let plan = load_plan(cfg.folds()?, a.fold)?;
    let train_set = plan.train_stations(a.fold);
    let features = features_for(&cfg, &manifest, &|s| train_set.contains(s), threads)?;
    run_or_resume(&a.run, &cfg, &features, |p| {
        trainer::train_single_phase(&features, &plan, a.fold, &cfg.model, &cfg.train, p)
    })
}

pub fn pretrain(a: PretrainArgs, threads: usize) -> Result<()> {
    let mut cfg = resolve(&a.run)?;
    cfg.train.phase = Phase::Pretrain;
    cfg.train.target = Target::Epicenter;
    cfg.model.output_dim = 2;
    let manifest = load_manifest(cfg.manifest()?)?;
    let plan = match a.fold {
        Some(f) => Some(load_plan(cfg.folds()?, f)?),
        None => None,
    };
    let excluded: BTreeSet<&str> = match (&plan, a.fold) {
        (Some(p), Some(f)) => p.test_stations(f),
        _ => BTreeSet::new(),
    };
    let features = features_for(&cfg, &manifest, &|s| !excluded.contains(s), threads)?;
    let fold = plan.as_ref().zip(a.fold);
    run_or_resume(&a.run, &cfg, &features, |p| {
        trainer::pretrain_epicenter(&features, fold, &cfg.model, &cfg.train, p)
    })
}

pub fn transfer_train(a: TransferArgs, threads: usize) -> Result<()> {
    let mut cfg = resolve(&a.run)?;
    if let Some(p) = &a.pretrained {
        cfg.data.pretrained = Some(p.clone());
        absolutize(&mut cfg)?;
    }
    let pre_path = cfg
        .data
        .pretrained
        .clone()
        .ok_or_else(|| UsageError("no pretrained checkpoint: set data.pretrained or pass --pretrained".into()))?;
    let pretrained = Checkpoint::load(&pre_path, LoadMode::Transfer)?;
    cfg.train.phase = Phase::Finetune;
    cfg.train.target = Target::Vs30;
    cfg.model = pretrained.model.spec.clone();
    cfg.model.output_dim = 1;
    cfg.model.dropout_rate = cfg.train.dropout_rate;
    let manifest = load_manifest(cfg.manifest()?)?;
    let plan = load_plan(cfg.folds()?, a.fold)?;
    let train_set = plan.train_stations(a.fold);
    let features = features_for(&cfg, &manifest, &|s| train_set.contains(s), threads)?;
    run_or_resume(&a.run, &cfg, &features, |p| {
        trainer::train_two_phase(&pretrained, &features, &plan, a.fold, &cfg.train, p)
    })
}

pub fn evaluate(a: EvaluateArgs, threads: usize) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint, LoadMode::Inference)?;
    if ckpt.model.spec.output_dim != 1 {
        bail!(UsageError("checkpoint does not predict vs30; evaluate a train or transfer-train checkpoint".into()));
    }
    let plan = match (&a.folds, &ckpt.meta.fold_plan) {
        (Some(p), _) => FoldPlan::load(p)?,
        (None, Some(p)) => p.clone(),
        (None, None) => bail!(UsageError("checkpoint carries no fold plan; pass --folds".into())),
    };
    let fold = a
        .fold
        .or(ckpt.meta.fold)
        .ok_or_else(|| UsageError("checkpoint carries no fold; pass --fold".into()))?;
    plan.check_fold(fold)?;
    let manifest = load_manifest(&a.manifest)?;
    let test = plan.test_stations(fold);
    let spec = &ckpt.model.spec;
    let features = build_features(&manifest, spec.domain, spec.duration_s, &|r| test.contains(r.station_id.as_str()), threads)?;
    let predictor = CheckpointPredictor {
        checkpoint: &ckpt,
        threads,
    };
    let report = score(&predictor, &features, &test, "model", Some(fold))?;
    report.export(&a.out)?;

    // floor: the training stations' mean label, over their records
    let train = plan.train_stations(fold);
    let stations = manifest.station_map();
    let labels: Vec<f64> = manifest
        .records
        .iter()
        .filter(|r| train.contains(r.station_id.as_str()))
        .filter_map(|r| stations.get(r.station_id.as_str()).and_then(|s| s.vs30_mps))
        .collect();
    let baseline = MeanPredictor::fit(&labels)?;
    let base = score(&baseline, &features, &test, "mean-baseline", Some(fold))?;
    base.export(&a.out.join("baseline"))?;
    println!(
        "fold {fold}: {} stations, overall absolute mean error {:.6} % (mean baseline {:.6} %)",
        report.n_stations(),
        report.overall_abs_mean_error,
        base.overall_abs_mean_error
    );
    Ok(())
}

pub fn predict(a: PredictArgs, threads: usize) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint, LoadMode::Inference)?;
    if ckpt.model.spec.output_dim != 1 {
        bail!(UsageError("checkpoint does not predict vs30".into()));
    }
    let raw = sm3c::read(&a.record)?;
    let record_id = a
        .record
        .file_stem()
        .map_or_else(|| a.record.display().to_string(), |s| s.to_string_lossy().into_owned());
    let rec = WaveformRecord {
        record_id: record_id.clone(),
        station_id: String::new(),
        event_id: String::new(),
        sample_rate_hz: raw.sample_rate_hz,
        channels: raw.channels,
    };
    let rec = sigprep::normalize_rate(&rec)?;
    let context = SiteContext {
        label_vs30: None,
        station_lat: a.lat,
        station_lon: a.lon,
        ..SiteContext::default()
    };
    let spec = &ckpt.model.spec;
    let window = sigprep::crop_around_pga(&rec, spec.duration_s, context)?.accepted(spec.duration_s)?;
    let sample = Sample {
        record_id,
        station_id: String::new(),
        event_id: String::new(),
        features: sigprep::features(&window, spec.domain)?,
        context: window.context,
    };
    let vs30 = trainer::predict_vs30(&ckpt, &[&sample], threads)?;
    println!("{:.3}", vs30[0]);
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let load_all = |sub: Option<&str>| -> Result<Vec<EvalReport>> {
        a.runs
            .iter()
            .map(|d| {
                let dir = sub.map_or_else(|| d.clone(), |s| d.join(s));
                EvalReport::load(&dir).with_context(|| format!("loading report from {}", dir.display()))
            })
            .collect()
    };
    let merged = EvalReport::merge("cross-validation", &load_all(None)?)?;
    merged.export(&a.out)?;
    print!("{}", merged.class_summary_csv());
    println!("Std,,{:.6}", merged.std_pct);
    if a.runs.iter().all(|d| d.join("baseline").join("report.json").is_file()) {
        let base = EvalReport::merge("mean-baseline", &load_all(Some("baseline"))?)?;
        base.export(&a.out.join("baseline"))?;
        println!("# mean baseline overall {:.6}", base.overall_abs_mean_error);
    }
    Ok(())
}
