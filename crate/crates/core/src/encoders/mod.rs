//! Model assembly: a residual or temporal-convolutional encoder followed by a
//! coordinate-fused dense head.
//!
//! Parameter names are rooted at `encoder.` or `head.`; transfer between
//! tasks copies the former and reinitialises the latter.

mod head;
mod resnet;
mod tcn;
mod transfer;

use std::fmt;

use ndnet::{Mode, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use head::Head;
pub use resnet::ResnetEncoder;
pub use tcn::TcnEncoder;
pub use transfer::{transfer_encoder, TransferManifest};

use crate::error::{CoreError, Result};
pub use crate::sigprep::{Domain, WindowLength};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Resnet,
    Tcn,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Resnet => "resnet",
            EncoderKind::Tcn => "tcn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcnSpec {
    pub n_blocks: usize,
    pub kernel: usize,
    pub filters: usize,
    pub dilations: Vec<usize>,
}

impl Default for TcnSpec {
    fn default() -> Self {
        Self {
            n_blocks: 6,
            kernel: 3,
            filters: 32,
            dilations: vec![1, 2, 4, 8, 16, 32],
        }
    }
}

impl TcnSpec {
    /// Receptive field of one causal convolution per dilation:
    /// `1 + (K - 1) · Σ d`.
    pub fn dilation_stack_receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * self.dilations.iter().sum::<usize>()
    }

    /// Receptive field of the full block stack, which applies two causal
    /// convolutions per dilation.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * (self.kernel - 1) * self.dilations.iter().sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResnetSpec {
    pub stem_filters: usize,
    pub stages: Vec<usize>,
    pub blocks_per_stage: usize,
}

impl Default for ResnetSpec {
    fn default() -> Self {
        Self {
            stem_filters: 16,
            stages: vec![16, 32, 64],
            blocks_per_stage: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub encoder_kind: EncoderKind,
    pub domain: Domain,
    pub duration_s: WindowLength,
    pub dropout_rate: f32,
    pub head_widths: [usize; 2],
    pub output_dim: usize,
    pub embed_dim: usize,
    pub tcn: TcnSpec,
    pub resnet: ResnetSpec,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            encoder_kind: EncoderKind::Resnet,
            domain: Domain::Frequency,
            duration_s: WindowLength::S15,
            dropout_rate: 0.1,
            head_widths: [64, 32],
            output_dim: 1,
            embed_dim: 64,
            tcn: TcnSpec::default(),
            resnet: ResnetSpec::default(),
        }
    }
}

impl ModelSpec {
    pub fn new(encoder_kind: EncoderKind, domain: Domain, duration_s: WindowLength) -> Self {
        Self {
            encoder_kind,
            domain,
            duration_s,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !matches!(self.output_dim, 1 | 2) {
            return bad(format!("output_dim must be 1 or 2, got {}", self.output_dim));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.head_widths.contains(&0) || self.embed_dim == 0 {
            return bad("head widths and embed_dim must be positive".into());
        }
        match self.encoder_kind {
            EncoderKind::Tcn => {
                let t = &self.tcn;
                if t.n_blocks == 0 || t.n_blocks != t.dilations.len() {
                    return bad(format!(
                        "tcn needs one dilation per block ({} blocks, {} dilations)",
                        t.n_blocks,
                        t.dilations.len()
                    ));
                }
                if t.kernel == 0 || t.filters == 0 || t.dilations.contains(&0) {
                    return bad("tcn kernel, filters and dilations must be positive".into());
                }
            }
            EncoderKind::Resnet => {
                let r = &self.resnet;
                if r.stages.is_empty() || r.stages.contains(&0) || r.stem_filters == 0 || r.blocks_per_stage == 0 {
                    return bad("resnet stem, stages and blocks must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Unbatched channels-first input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        self.domain.feature_shape(self.duration_s)
    }

    /// Length of the axis the encoder convolves along in time.
    pub fn time_steps(&self) -> usize {
        match self.domain {
            Domain::Time => self.duration_s.samples(),
            Domain::Frequency => self.duration_s.frames(),
        }
    }
}

/// Station coordinate bounding box used to scale coordinates into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordinateBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl CoordinateBox {
    pub fn fit(points: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut b = Self {
            lat_min: f64::INFINITY,
            lat_max: f64::NEG_INFINITY,
            lon_min: f64::INFINITY,
            lon_max: f64::NEG_INFINITY,
        };
        for (lat, lon) in points {
            b.lat_min = b.lat_min.min(lat);
            b.lat_max = b.lat_max.max(lat);
            b.lon_min = b.lon_min.min(lon);
            b.lon_max = b.lon_max.max(lon);
        }
        if !b.lat_min.is_finite() || !b.lon_min.is_finite() {
            return Err(CoreError::EmptySet("no coordinates to fit a bounding box".into()));
        }
        Ok(b)
    }

    /// Latitude span, or 1 when all points share a latitude.
    pub fn lat_span(&self) -> f64 {
        let s = self.lat_max - self.lat_min;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    pub fn lon_span(&self) -> f64 {
        let s = self.lon_max - self.lon_min;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    /// Min-max scaled `(lat, lon)`, clamped to `[0, 1]`; the flag reports
    /// whether clamping happened.
    pub fn normalize(&self, lat: f64, lon: f64) -> ([f32; 2], bool) {
        let a = (lat - self.lat_min) / self.lat_span();
        let b = (lon - self.lon_min) / self.lon_span();
        let clamped = !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b);
        ([a.clamp(0.0, 1.0) as f32, b.clamp(0.0, 1.0) as f32], clamped)
    }
}

/// The encoder half of a model.
#[derive(Debug, Clone)]
pub enum Encoder {
    Resnet(ResnetEncoder),
    Tcn(TcnEncoder),
}

/// A complete network plus its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: Head,
    pub warnings: Vec<String>,
}

impl Model {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut warnings = Vec::new();
        let encoder = match spec.encoder_kind {
            EncoderKind::Resnet => Encoder::Resnet(ResnetEncoder::new(spec, &mut store, &mut rng)?),
            EncoderKind::Tcn => {
                let rf = spec.tcn.receptive_field();
                if rf > spec.time_steps() {
                    warnings.push(format!(
                        "receptive field {rf} exceeds the {} available time steps",
                        spec.time_steps()
                    ));
                }
                Encoder::Tcn(TcnEncoder::new(spec, &mut store, &mut rng)?)
            }
        };
        let head = Head::new(spec, &mut store, &mut rng)?;
        Ok(Self {
            spec: spec.clone(),
            store,
            encoder,
            head,
            warnings,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.store.iter().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum()
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<usize> {
        let shape = tape.shape(x);
        let want = self.spec.input_shape();
        if shape.len() != want.len() + 1 || shape[1..] != want[..] {
            return Err(CoreError::Config(format!(
                "{} {} {} model expects inputs [N, {}], got {:?}",
                self.spec.encoder_kind,
                self.spec.domain,
                self.spec.duration_s,
                want.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "),
                shape
            )));
        }
        Ok(shape[0])
    }

    /// Embeddings `[N, embed_dim]` for a batch `[N, ...input_shape]`.
    pub fn encode(&mut self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        self.encode_at(tape, x, mode, rng, None)
    }

    /// As [`Model::encode`], but a TCN reads features at time step `readout`
    /// instead of the last one. Ignored by the residual encoder.
    pub fn encode_at(
        &mut self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        readout: Option<usize>,
    ) -> Result<Var> {
        self.check_input(tape, x)?;
        match &self.encoder {
            Encoder::Resnet(e) => e.forward(tape, &mut self.store, x, mode),
            Encoder::Tcn(e) => e.forward(tape, &mut self.store, x, mode, rng, readout),
        }
    }

    /// Full forward pass: `x` is `[N, ...input_shape]`, `coords` is `[N, 2]`
    /// normalised station coordinates. Returns `[N, output_dim]`.
    pub fn forward(&mut self, tape: &mut Tape, x: Var, coords: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        let emb = self.encode(tape, x, mode, rng)?;
        self.head.forward(tape, &self.store, emb, coords, mode, rng)
    }

    /// Eval-mode predictions for `n` stacked inputs and coordinates.
    pub fn predict(&mut self, inputs: Vec<f32>, coords: Vec<f32>, n: usize) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let mut shape = vec![n];
        shape.extend(self.spec.input_shape());
        let x = tape.constant(shape, inputs)?;
        let c = tape.constant(vec![n, 2], coords)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = self.forward(&mut tape, x, c, Mode::Eval, &mut rng)?;
        Ok(tape.value(y).to_vec())
    }

    /// Eval-mode embeddings for `n` stacked inputs.
    pub fn embed(&mut self, inputs: Vec<f32>, n: usize) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let mut shape = vec![n];
        shape.extend(self.spec.input_shape());
        let x = tape.constant(shape, inputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = self.encode(&mut tape, x, Mode::Eval, &mut rng)?;
        Ok(tape.value(e).to_vec())
    }

    /// Sets the fixed output de-standardisation `y = shift + scale · raw`.
    pub fn set_output_scale(&mut self, shift: &[f32], scale: &[f32]) -> Result<()> {
        self.head.set_output_scale(&mut self.store, shift, scale)
    }

    pub fn encoder_param_names(&self) -> Vec<String> {
        self.store
            .names()
            .filter(|n| n.starts_with("encoder."))
            .map(str::to_owned)
            .collect()
    }

    pub fn head_param_names(&self) -> Vec<String> {
        self.store.names().filter(|n| n.starts_with("head.")).map(str::to_owned).collect()
    }
}
