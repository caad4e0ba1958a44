//! Training: single-phase Vs30 regression, epicentre pretraining and
//! transfer-then-fine-tune, with best-validation snapshotting.

pub mod checkpoint;

use std::collections::BTreeSet;
use std::fmt;
use std::thread;

use ndnet::optim::{AdamConfig, AdamState};
use ndnet::{LossKind, Mode, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, CheckpointMeta, LoadMode};

use crate::datapipe::synth::mix_seed;
use crate::datapipe::{FeatureSet, FoldPlan, Sample};
use crate::encoders::{transfer_encoder, CoordinateBox, Model, ModelSpec, TransferManifest};
use crate::error::{CoreError, Result};
use crate::sigprep::ChannelStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Single,
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Vs30,
    Epicenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Mse,
    Mae,
}

impl From<LossName> for LossKind {
    fn from(l: LossName) -> Self {
        match l {
            LossName::Mse => LossKind::Mse,
            LossName::Mae => LossKind::Mae,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossName,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub dropout_rate: f32,
    pub seed: u64,
    pub target: Target,
    /// Share of training stations held out for checkpoint selection.
    pub val_fraction: f64,
    /// Keep encoder parameters fixed while fine-tuning.
    pub freeze_encoder: bool,
    /// Regress `ln(vs30)` instead of vs30 in m/s.
    pub log_target: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Single,
            batch_size: 64,
            epochs: 100,
            loss: LossName::Mse,
            base_lr: 1e-5,
            lr_decay: 0.9,
            decay_epochs: vec![5, 10, 20],
            dropout_rate: 0.1,
            seed: 0,
            target: Target::Vs30,
            val_fraction: 0.1,
            freeze_encoder: false,
            log_target: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2 for batch norm, got {}", self.batch_size));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] > w[1]) {
            return bad("decay_epochs must be sorted".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            base_lr: self.base_lr,
            decay_factor: self.lr_decay,
            decay_epochs: self.decay_epochs.clone(),
            ..AdamConfig::default()
        }
    }
}

/// Seed used to initialise the model of a `phase` run.
pub fn model_seed(seed: u64, phase: Phase) -> u64 {
    mix_seed(seed, 1 + phase as u64, 0)
}

/// SHA-256 over the JSON encoding of the model and training configuration.
/// The epoch count is left out so that a finished run can be extended.
pub fn config_hash(spec: &ModelSpec, cfg: &TrainConfig) -> String {
    let cfg = TrainConfig { epochs: 0, ..cfg.clone() };
    let json = serde_json::to_vec(&(spec, &cfg)).expect("plain data serialises");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub lr: f64,
}

/// Per-epoch losses, serialised as `epoch,split,loss,lr`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,lr\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:e}\n", r.epoch, r.split, r.loss, r.lr));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| CoreError::Format { what: "loss trace", detail: d };
        let mut lines = text.lines();
        if lines.next() != Some("epoch,split,loss,lr") {
            return Err(bad("missing `epoch,split,loss,lr` header".into()));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let [epoch, split, loss, lr] = f[..] else {
                return Err(bad(format!("bad row {line:?}")));
            };
            rows.push(TraceRow {
                epoch: epoch.parse().map_err(|_| bad(format!("bad epoch in {line:?}")))?,
                split: match split {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    other => return Err(bad(format!("unknown split {other:?}"))),
                },
                loss: loss.parse().map_err(|_| bad(format!("bad loss in {line:?}")))?,
                lr: lr.parse().map_err(|_| bad(format!("bad lr in {line:?}")))?,
            });
        }
        Ok(Self { rows })
    }

    pub fn losses(&self, split: Split) -> Vec<f64> {
        self.rows.iter().filter(|r| r.split == split).map(|r| r.loss).collect()
    }

    pub fn lr_at(&self, epoch: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.epoch == epoch).map(|r| r.lr)
    }
}

/// Standardised inputs, normalised coordinates and targets for a sample set.
#[derive(Debug, Clone)]
pub struct PreparedSet {
    pub n: usize,
    pub sample_len: usize,
    pub out_dim: usize,
    pub inputs: Vec<f32>,
    pub coords: Vec<f32>,
    pub targets: Vec<f32>,
    pub station_ids: Vec<String>,
    pub record_ids: Vec<String>,
    /// Samples whose coordinates fell outside the bounding box.
    pub clamped: usize,
}

/// Target vector for one sample.
pub fn target_of(sample: &Sample, target: Target, coord_box: &CoordinateBox, log_target: bool) -> Result<Vec<f32>> {
    let c = &sample.context;
    match target {
        Target::Vs30 => {
            let v = c.label_vs30.ok_or_else(|| {
                CoreError::Config(format!("record {} has no vs30 label", sample.record_id))
            })?;
            Ok(vec![if log_target { v.ln() as f32 } else { v as f32 }])
        }
        Target::Epicenter => Ok(vec![
            ((c.event_lat - c.station_lat) / coord_box.lat_span()) as f32,
            ((c.event_lon - c.station_lon) / coord_box.lon_span()) as f32,
        ]),
    }
}

pub fn prepare(
    samples: &[&Sample],
    stats: &ChannelStats,
    coord_box: &CoordinateBox,
    target: Option<(Target, bool)>,
) -> Result<PreparedSet> {
    let sample_len = samples.first().map_or(0, |s| s.features.len());
    let out_dim = match target {
        Some((Target::Vs30, _)) => 1,
        Some((Target::Epicenter, _)) => 2,
        None => 0,
    };
    let mut p = PreparedSet {
        n: samples.len(),
        sample_len,
        out_dim,
        inputs: Vec::with_capacity(samples.len() * sample_len),
        coords: Vec::with_capacity(samples.len() * 2),
        targets: Vec::with_capacity(samples.len() * out_dim),
        station_ids: Vec::with_capacity(samples.len()),
        record_ids: Vec::with_capacity(samples.len()),
        clamped: 0,
    };
    for s in samples {
        if s.features.len() != sample_len {
            return Err(CoreError::Config(format!("record {} has a different feature size", s.record_id)));
        }
        let start = p.inputs.len();
        p.inputs.extend_from_slice(&s.features);
        stats.apply(&mut p.inputs[start..]);
        let (xy, clamped) = coord_box.normalize(s.context.station_lat, s.context.station_lon);
        p.clamped += clamped as usize;
        p.coords.extend_from_slice(&xy);
        if let Some((t, log)) = target {
            p.targets.extend(target_of(s, t, coord_box, log)?);
        }
        p.station_ids.push(s.station_id.clone());
        p.record_ids.push(s.record_id.clone());
    }
    Ok(p)
}

impl PreparedSet {
    fn gather(&self, idx: &[usize]) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let mut x = Vec::with_capacity(idx.len() * self.sample_len);
        let mut c = Vec::with_capacity(idx.len() * 2);
        let mut t = Vec::with_capacity(idx.len() * self.out_dim);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * self.sample_len..(i + 1) * self.sample_len]);
            c.extend_from_slice(&self.coords[i * 2..i * 2 + 2]);
            t.extend_from_slice(&self.targets[i * self.out_dim..(i + 1) * self.out_dim]);
        }
        (x, c, t)
    }
}

/// Mini-batches of `batch` indices; a trailing batch of one sample is merged
/// into its predecessor because batch norm needs two.
pub fn batches(order: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Eval-mode predictions in fixed chunks of 64 samples. With `threads > 1`
/// chunks are spread over worker threads, each with its own model copy; the
/// output does not depend on the thread count.
pub fn predict_prepared(model: &Model, set: &PreparedSet, threads: usize) -> Result<Vec<f32>> {
    const CHUNK: usize = 64;
    let idx: Vec<usize> = (0..set.n).collect();
    let chunks: Vec<&[usize]> = idx.chunks(CHUNK).collect();
    let run = |model: &mut Model, part: &[&[usize]]| -> Result<Vec<f32>> {
        let mut out = Vec::new();
        for c in part {
            let (x, co, _) = set.gather(c);
            out.extend(model.predict(x, co, c.len())?);
        }
        Ok(out)
    };
    let threads = threads.clamp(1, chunks.len().max(1));
    if threads == 1 {
        return run(&mut model.clone(), &chunks);
    }
    let per = chunks.len().div_ceil(threads);
    let parts: Vec<Result<Vec<f32>>> = thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per)
            .map(|part| {
                let mut m = model.clone();
                s.spawn(move || run(&mut m, part))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("prediction worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(set.n * model.spec.output_dim);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn loss_value(pred: &[f32], target: &[f32], kind: LossName) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let r = p as f64 - t as f64;
            match kind {
                LossName::Mse => r * r,
                LossName::Mae => r.abs(),
            }
        })
        .sum::<f64>()
        / n
}

/// Station-disjoint inner split of `stations` into `(train, val)`.
pub fn split_validation(stations: &BTreeSet<String>, fraction: f64, seed: u64) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut ids: Vec<&String> = stations.iter().collect();
    let mut n_val = (fraction * ids.len() as f64).round() as usize;
    if fraction > 0.0 && ids.len() >= 2 {
        n_val = n_val.clamp(1, ids.len() - 1);
    } else {
        n_val = 0;
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7a1, 0)));
    let val = ids[..n_val].iter().map(|s| s.to_string()).collect();
    let train = ids[n_val..].iter().map(|s| s.to_string()).collect();
    (train, val)
}

/// Everything fitted from training data before the first epoch.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub stats: ChannelStats,
    pub coord_box: CoordinateBox,
    pub train_stations: BTreeSet<String>,
    pub val_stations: BTreeSet<String>,
    pub train: PreparedSet,
    pub val: Option<PreparedSet>,
}

fn setup(
    data: &FeatureSet,
    pool: &BTreeSet<String>,
    target: Target,
    cfg: &TrainConfig,
    fixed: Option<(&ChannelStats, &CoordinateBox)>,
) -> Result<RunSetup> {
    let usable = |s: &Sample| pool.contains(&s.station_id) && (target == Target::Epicenter || s.context.label_vs30.is_some());
    let fold_samples: Vec<&Sample> = data.samples.iter().filter(|s| usable(s)).collect();
    if fold_samples.len() < 2 {
        return Err(CoreError::EmptySet(format!(
            "training set has {} usable windows; at least 2 are needed",
            fold_samples.len()
        )));
    }
    let stations: BTreeSet<String> = fold_samples.iter().map(|s| s.station_id.clone()).collect();
    let (stats, coord_box) = match fixed {
        Some((s, b)) => (s.clone(), *b),
        None => (
            ChannelStats::fit(fold_samples.iter().map(|s| s.features.as_slice()).collect::<Vec<_>>())?,
            CoordinateBox::fit(fold_samples.iter().map(|s| (s.context.station_lat, s.context.station_lon)))?,
        ),
    };
    let (train_stations, val_stations) = split_validation(&stations, cfg.val_fraction, cfg.seed);
    let pick = |set: &BTreeSet<String>| -> Vec<&Sample> {
        fold_samples.iter().copied().filter(|s| set.contains(&s.station_id)).collect()
    };
    let tgt = Some((target, cfg.log_target && target == Target::Vs30));
    let train_samples = pick(&train_stations);
    if train_samples.len() < 2 {
        return Err(CoreError::EmptySet("inner training split has fewer than 2 windows".into()));
    }
    let train = prepare(&train_samples, &stats, &coord_box, tgt)?;
    let val_samples = pick(&val_stations);
    let val = if val_samples.is_empty() {
        None
    } else {
        Some(prepare(&val_samples, &stats, &coord_box, tgt)?)
    };
    Ok(RunSetup {
        stats,
        coord_box,
        train_stations,
        val_stations,
        train,
        val,
    })
}

/// Column means and population standard deviations of the targets.
fn target_scale(set: &PreparedSet) -> (Vec<f32>, Vec<f32>) {
    let d = set.out_dim;
    let n = set.n as f64;
    let mut mean = vec![0.0f64; d];
    for row in set.targets.chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64 / n;
        }
    }
    let mut var = vec![0.0f64; d];
    for row in set.targets.chunks(d) {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v as f64 - m).powi(2) / n;
        }
    }
    let std = var.iter().map(|v| if v.sqrt() > 0.0 { v.sqrt() as f32 } else { 1.0 }).collect();
    (mean.iter().map(|&m| m as f32).collect(), std)
}

/// Progress callback payload, one per finished epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

/// Optimisation state carried between epochs; also what a resumed run
/// restarts from.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub next_epoch: usize,
    pub best: Option<BestSnapshot>,
}

#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub store: ParamStore,
    pub adam: AdamState,
    pub epoch: usize,
    pub val_loss: f64,
}

/// Runs epochs `state.next_epoch .. cfg.epochs`.
pub fn fit(
    state: &mut TrainState,
    setup: &RunSetup,
    cfg: &TrainConfig,
    phase: &'static str,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<LossTrace> {
    let mut trace = LossTrace::default();
    let kind = cfg.loss;
    let train = &setup.train;
    let encoder_names: Vec<String> = if cfg.freeze_encoder {
        state.model.encoder_param_names()
    } else {
        Vec::new()
    };
    while state.next_epoch < cfg.epochs {
        let epoch = state.next_epoch;
        let lr = state.adam.effective_lr(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xe90c, epoch as u64));
        let mut order: Vec<usize> = (0..train.n).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for (b, idx) in batches(&order, cfg.batch_size).iter().enumerate() {
            let (x, c, t) = train.gather(idx);
            let mut tape = Tape::new();
            let mut shape = vec![idx.len()];
            shape.extend(state.model.spec.input_shape());
            let xv = tape.constant(shape, x)?;
            let cv = tape.constant(vec![idx.len(), 2], c)?;
            let y = state.model.forward(&mut tape, xv, cv, Mode::Train, &mut rng)?;
            let loss = tape.loss(y, &t, kind.into())?;
            let lv = tape.value(loss)[0];
            if !lv.is_finite() {
                return Err(CoreError::NonFiniteLoss { phase, epoch, batch: b });
            }
            total += lv as f64 * idx.len() as f64;
            tape.backward(loss)?;
            state.model.store.accumulate_grads(&tape)?;
            for name in &encoder_names {
                state.model.store.by_name_mut(name).expect("encoder name").tensor.clear_grad();
            }
            state.adam.step(&mut state.model.store, epoch)?;
        }
        let train_loss = total / train.n as f64;
        trace.rows.push(TraceRow {
            epoch,
            split: Split::Train,
            loss: train_loss,
            lr,
        });
        let mut val_loss = None;
        if let Some(val) = &setup.val {
            let pred = predict_prepared(&state.model, val, 1)?;
            let v = loss_value(&pred, &val.targets, kind);
            if !v.is_finite() {
                return Err(CoreError::NonFiniteLoss {
                    phase,
                    epoch,
                    batch: usize::MAX,
                });
            }
            trace.rows.push(TraceRow {
                epoch,
                split: Split::Val,
                loss: v,
                lr,
            });
            if state.best.as_ref().is_none_or(|b| v < b.val_loss) {
                state.best = Some(BestSnapshot {
                    store: state.model.store.clone(),
                    adam: state.adam.clone(),
                    epoch,
                    val_loss: v,
                });
            }
            val_loss = Some(v);
        }
        state.next_epoch += 1;
        progress(&EpochReport {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
    }
    Ok(trace)
}

/// Result of a training run: the best-validation and final checkpoints.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub trace: LossTrace,
    pub transfer: Option<TransferManifest>,
    pub setup: RunSetup,
}

struct RunArgs<'a> {
    spec: ModelSpec,
    cfg: &'a TrainConfig,
    fold: Option<usize>,
    plan: Option<&'a FoldPlan>,
    phase: &'static str,
}

fn finish(state: TrainState, setup: RunSetup, trace: LossTrace, args: RunArgs, transfer: Option<TransferManifest>) -> TrainOutcome {
    let meta = |epoch: Option<usize>, best_val: Option<f64>, step_count: u64| CheckpointMeta {
        spec: args.spec.clone(),
        train_config: args.cfg.clone(),
        input_stats: setup.stats.clone(),
        coord_box: setup.coord_box,
        fold: args.fold,
        fold_plan: args.plan.cloned(),
        epoch,
        best_val_loss: best_val,
        config_hash: config_hash(&args.spec, args.cfg),
        adam_step_count: step_count,
        transfer: transfer.clone(),
    };
    let last_epoch = state.next_epoch.checked_sub(1);
    let best_val = state.best.as_ref().map(|b| b.val_loss);
    let last = Checkpoint {
        meta: meta(last_epoch, best_val, state.adam.step_count),
        model: state.model.clone(),
        adam: state.adam.clone(),
    };
    let best = match state.best {
        Some(b) => {
            let mut model = state.model;
            model.store = b.store;
            Checkpoint {
                meta: meta(Some(b.epoch), Some(b.val_loss), b.adam.step_count),
                model,
                adam: b.adam,
            }
        }
        None => last.clone(),
    };
    TrainOutcome {
        best,
        last,
        trace,
        transfer,
        setup,
    }
}

fn fold_pool(plan: &FoldPlan, fold: usize) -> Result<BTreeSet<String>> {
    plan.check_fold(fold)?;
    Ok(plan.train_stations(fold).into_iter().map(str::to_owned).collect())
}

fn run(
    model: Model,
    setup: RunSetup,
    args: RunArgs,
    transfer: Option<TransferManifest>,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    let adam = AdamState::new(args.cfg.adam(), &model.store);
    let mut state = TrainState {
        model,
        adam,
        next_epoch: 0,
        best: None,
    };
    let trace = fit(&mut state, &setup, args.cfg, args.phase, progress)?;
    Ok(finish(state, setup, trace, args, transfer))
}

/// Trains encoder and head together on the vs30 labels of `fold`'s training
/// stations.
pub fn train_single_phase(
    data: &FeatureSet,
    plan: &FoldPlan,
    fold: usize,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = ModelSpec {
        output_dim: 1,
        dropout_rate: cfg.dropout_rate,
        ..spec.clone()
    };
    check_features(data, &spec)?;
    let setup = setup(data, &fold_pool(plan, fold)?, Target::Vs30, cfg, None)?;
    let mut model = Model::new(&spec, model_seed(cfg.seed, Phase::Single))?;
    let (shift, scale) = target_scale(&setup.train);
    model.set_output_scale(&shift, &scale)?;
    let args = RunArgs {
        spec,
        cfg,
        fold: Some(fold),
        plan: Some(plan),
        phase: "single-phase",
    };
    run(model, setup, args, None, progress)
}

/// Trains the encoder to predict the station-to-epicentre offset, normalised
/// by the coordinate box spans. Every record whose station is not in `fold`'s
/// test set takes part, labelled or not.
pub fn pretrain_epicenter(
    data: &FeatureSet,
    fold: Option<(&FoldPlan, usize)>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if spec.output_dim != 2 {
        return Err(CoreError::Config(format!(
            "epicentre pretraining needs output_dim 2, got {}",
            spec.output_dim
        )));
    }
    let spec = ModelSpec {
        dropout_rate: cfg.dropout_rate,
        ..spec.clone()
    };
    check_features(data, &spec)?;
    let excluded: BTreeSet<&str> = match fold {
        Some((plan, f)) => {
            plan.check_fold(f)?;
            plan.test_stations(f)
        }
        None => BTreeSet::new(),
    };
    let pool: BTreeSet<String> = data
        .samples
        .iter()
        .map(|s| s.station_id.as_str())
        .filter(|s| !excluded.contains(s))
        .map(str::to_owned)
        .collect();
    let setup = setup(data, &pool, Target::Epicenter, cfg, None)?;
    let mut model = Model::new(&spec, model_seed(cfg.seed, Phase::Pretrain))?;
    let (shift, scale) = target_scale(&setup.train);
    model.set_output_scale(&shift, &scale)?;
    let args = RunArgs {
        spec,
        cfg,
        fold: fold.map(|f| f.1),
        plan: fold.map(|f| f.0),
        phase: "pretrain",
    };
    run(model, setup, args, None, progress)
}

/// Copies the pretrained encoder into a fresh vs30 model and fine-tunes all
/// parameters (only the head when `freeze_encoder` is set).
pub fn train_two_phase(
    pretrained: &Checkpoint,
    data: &FeatureSet,
    plan: &FoldPlan,
    fold: usize,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = ModelSpec {
        output_dim: 1,
        dropout_rate: cfg.dropout_rate,
        ..pretrained.model.spec.clone()
    };
    check_features(data, &spec)?;
    let setup = setup(data, &fold_pool(plan, fold)?, Target::Vs30, cfg, None)?;
    let (mut model, manifest) = transfer_encoder(&pretrained.model, &spec, model_seed(cfg.seed, Phase::Finetune))?;
    let (shift, scale) = target_scale(&setup.train);
    model.set_output_scale(&shift, &scale)?;
    let args = RunArgs {
        spec,
        cfg,
        fold: Some(fold),
        plan: Some(plan),
        phase: "fine-tune",
    };
    run(model, setup, args, Some(manifest), progress)
}

/// Continues a run from its final checkpoint (and the best one, so that
/// best-validation tracking carries over) up to `last.meta.train_config.epochs`
/// or the epoch count in `cfg` when given.
pub fn resume(
    best: &Checkpoint,
    last: &Checkpoint,
    data: &FeatureSet,
    epochs: usize,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    let meta = &last.meta;
    let cfg = TrainConfig {
        epochs,
        ..meta.train_config.clone()
    };
    let target = if meta.spec.output_dim == 2 { Target::Epicenter } else { Target::Vs30 };
    check_features(data, &meta.spec)?;
    let pool: BTreeSet<String> = match (&meta.fold_plan, meta.fold) {
        (Some(plan), Some(f)) if target == Target::Vs30 => fold_pool(plan, f)?,
        (plan, fold) => {
            let excluded: BTreeSet<&str> = match (plan, fold) {
                (Some(p), Some(f)) => p.test_stations(f),
                _ => BTreeSet::new(),
            };
            data.samples
                .iter()
                .map(|s| s.station_id.as_str())
                .filter(|s| !excluded.contains(s))
                .map(str::to_owned)
                .collect()
        }
    };
    let setup = setup(data, &pool, target, &cfg, Some((&meta.input_stats, &meta.coord_box)))?;
    let mut adam = last.adam.clone();
    adam.config = cfg.adam();
    let mut state = TrainState {
        model: last.model.clone(),
        adam,
        next_epoch: meta.epoch.map_or(0, |e| e + 1),
        best: best.meta.best_val_loss.map(|v| BestSnapshot {
            store: best.model.store.clone(),
            adam: best.adam.clone(),
            epoch: best.meta.epoch.unwrap_or(0),
            val_loss: v,
        }),
    };
    let phase = "resume";
    let trace = fit(&mut state, &setup, &cfg, phase, progress)?;
    let args = RunArgs {
        spec: meta.spec.clone(),
        cfg: &cfg,
        fold: meta.fold,
        plan: meta.fold_plan.as_ref(),
        phase,
    };
    Ok(finish(state, setup, trace, args, meta.transfer.clone()))
}

fn check_features(data: &FeatureSet, spec: &ModelSpec) -> Result<()> {
    if data.domain != spec.domain || data.window != spec.duration_s {
        return Err(CoreError::Config(format!(
            "features are {} {} but the model expects {} {}",
            data.domain, data.window, spec.domain, spec.duration_s
        )));
    }
    Ok(())
}

/// Vs30 predictions in m/s for `samples`, using the checkpoint's stored
/// standardisation and coordinate box.
pub fn predict_vs30(ckpt: &Checkpoint, samples: &[&Sample], threads: usize) -> Result<Vec<f64>> {
    if ckpt.model.spec.output_dim != 1 {
        return Err(CoreError::Config("checkpoint does not predict vs30 (output_dim != 1)".into()));
    }
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let set = prepare(samples, &ckpt.meta.input_stats, &ckpt.meta.coord_box, None)?;
    let raw = predict_prepared(&ckpt.model, &set, threads)?;
    Ok(raw
        .into_iter()
        .map(|v| {
            if ckpt.meta.train_config.log_target {
                (v as f64).exp()
            } else {
                v as f64
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_singleton_batch_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order[..8], 4).len(), 2);
        assert_eq!(batches(&order[..3], 64), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn schedule_values() {
        let a = TrainConfig::default().adam();
        let got: Vec<f64> = [4, 5, 10, 20].iter().map(|&e| a.effective_lr(e)).collect();
        assert_eq!(got, vec![1e-5, 9e-6, 8.1e-6, 7.29e-6]);
    }

    #[test]
    fn trace_csv_roundtrip() {
        let t = LossTrace {
            rows: vec![
                TraceRow {
                    epoch: 0,
                    split: Split::Train,
                    loss: 12345.678,
                    lr: 1e-5,
                },
                TraceRow {
                    epoch: 20,
                    split: Split::Val,
                    loss: 0.1 + 0.2,
                    lr: 7.29e-6,
                },
            ],
        };
        let csv = t.to_csv();
        assert!(csv.contains(",7.29e-6\n"));
        assert_eq!(LossTrace::from_csv(&csv).unwrap(), t);
    }

    #[test]
    fn validation_split_is_station_disjoint() {
        let st: BTreeSet<String> = (0..20).map(|i| format!("s{i}")).collect();
        let (tr, va) = split_validation(&st, 0.1, 3);
        assert_eq!(va.len(), 2);
        assert!(tr.is_disjoint(&va));
        assert_eq!(tr.len() + va.len(), 20);
        let (_, none) = split_validation(&st, 0.0, 3);
        assert!(none.is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
