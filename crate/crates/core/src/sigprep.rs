//! Accelerogram preparation: resampling to a common rate, PGA-centred
//! windowing, short-time spectra and per-channel standardisation.

use std::fmt;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const TARGET_RATE_HZ: f64 = 100.0;
pub const STFT_WINDOW: usize = 100;
pub const STFT_HOP: usize = 50;
pub const N_BINS: usize = STFT_WINDOW / 2 + 1;
pub const CHANNEL_NAMES: [&str; 3] = ["E-W", "N-S", "Z"];

/// One three-component accelerogram in cm/s², channels ordered E-W, N-S, Z.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformRecord {
    pub record_id: String,
    pub station_id: String,
    pub event_id: String,
    pub sample_rate_hz: f64,
    pub channels: [Vec<f32>; 3],
}

impl WaveformRecord {
    pub fn n_samples(&self) -> usize {
        self.channels[0].len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| CoreError::InvalidRecord {
            record_id: self.record_id.clone(),
            detail,
        };
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(bad(format!("sample rate {} Hz is not positive", self.sample_rate_hz)));
        }
        let n = self.n_samples();
        if n == 0 {
            return Err(bad("record has no samples".into()));
        }
        if self.channels.iter().any(|c| c.len() != n) {
            let lens: Vec<usize> = self.channels.iter().map(Vec::len).collect();
            return Err(bad(format!("channel lengths differ: {lens:?}")));
        }
        if let Some((c, i)) = self
            .channels
            .iter()
            .enumerate()
            .find_map(|(c, ch)| ch.iter().position(|v| !v.is_finite()).map(|i| (c, i)))
        {
            return Err(bad(format!("non-finite sample at {} index {i}", CHANNEL_NAMES[c])));
        }
        Ok(())
    }
}

/// Window lengths supported by the models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum WindowLength {
    S15,
    S30,
    S60,
}

impl WindowLength {
    pub const ALL: [WindowLength; 3] = [WindowLength::S15, WindowLength::S30, WindowLength::S60];

    pub fn seconds(self) -> u32 {
        match self {
            WindowLength::S15 => 15,
            WindowLength::S30 => 30,
            WindowLength::S60 => 60,
        }
    }

    /// Window length in samples at the normalised rate.
    pub fn samples(self) -> usize {
        self.seconds() as usize * TARGET_RATE_HZ as usize
    }

    /// Number of STFT frames for this window.
    pub fn frames(self) -> usize {
        (self.samples() - STFT_WINDOW) / STFT_HOP + 1
    }
}

impl TryFrom<u32> for WindowLength {
    type Error = CoreError;

    fn try_from(s: u32) -> Result<Self> {
        match s {
            15 => Ok(WindowLength::S15),
            30 => Ok(WindowLength::S30),
            60 => Ok(WindowLength::S60),
            other => Err(CoreError::Config(format!("window length must be 15, 30 or 60 s, got {other}"))),
        }
    }
}

impl From<WindowLength> for u32 {
    fn from(w: WindowLength) -> u32 {
        w.seconds()
    }
}

impl fmt::Display for WindowLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} s", self.seconds())
    }
}

/// Input representation fed to an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Time,
    Frequency,
}

impl Domain {
    /// Channels-first feature shape for one window.
    pub fn feature_shape(self, window: WindowLength) -> Vec<usize> {
        match self {
            Domain::Time => vec![3, window.samples()],
            Domain::Frequency => vec![3, window.frames(), N_BINS],
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Time => "time",
            Domain::Frequency => "frequency",
        })
    }
}

/// Station, event and label context carried alongside a window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SiteContext {
    pub label_vs30: Option<f64>,
    pub station_lat: f64,
    pub station_lon: f64,
    pub event_lat: f64,
    pub event_lon: f64,
}

/// A detrended window whose peak absolute value sits at `pga_index == L / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    pub record_id: String,
    pub window: WindowLength,
    pub samples: [Vec<f32>; 3],
    pub pga_value: f32,
    pub pga_channel: usize,
    pub pga_index: usize,
    pub context: SiteContext,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CropOutcome {
    Accepted(WindowedSample),
    Rejected {
        record_id: String,
        pga_index: usize,
        n_samples: usize,
    },
}

impl CropOutcome {
    /// Converts a rejection into [`CoreError::Rejected`].
    pub fn accepted(self, window: WindowLength) -> Result<WindowedSample> {
        match self {
            CropOutcome::Accepted(w) => Ok(w),
            CropOutcome::Rejected {
                record_id,
                pga_index,
                n_samples,
            } => Err(CoreError::Rejected {
                record_id,
                pga_index,
                n_samples,
                half: window.samples() / 2,
                duration_s: window.seconds(),
            }),
        }
    }
}

/// Linear-interpolation resampling to 100 Hz.
///
/// The output has `floor((n - 1) * 100 / rate) + 1` samples, so the first and
/// (when it lands on the grid) last input samples are reproduced exactly.
pub fn normalize_rate(rec: &WaveformRecord) -> Result<WaveformRecord> {
    rec.validate()?;
    if rec.sample_rate_hz < 1.0 {
        return Err(CoreError::InvalidRecord {
            record_id: rec.record_id.clone(),
            detail: format!("sample rate {} Hz is below 1 Hz", rec.sample_rate_hz),
        });
    }
    if rec.sample_rate_hz == TARGET_RATE_HZ {
        return Ok(rec.clone());
    }
    let n = rec.n_samples();
    let ratio = rec.sample_rate_hz / TARGET_RATE_HZ;
    let out_len = (((n - 1) as f64) / ratio + 1e-9).floor() as usize + 1;
    let resample = |x: &Vec<f32>| -> Vec<f32> {
        (0..out_len)
            .map(|j| {
                let t = j as f64 * ratio;
                let i = (t.floor() as usize).min(n - 1);
                let frac = t - i as f64;
                if i + 1 >= n || frac == 0.0 {
                    x[i]
                } else {
                    ((1.0 - frac) * x[i] as f64 + frac * x[i + 1] as f64) as f32
                }
            })
            .collect()
    };
    Ok(WaveformRecord {
        sample_rate_hz: TARGET_RATE_HZ,
        channels: [resample(&rec.channels[0]), resample(&rec.channels[1]), resample(&rec.channels[2])],
        ..rec.clone()
    })
}

/// Removes each channel's mean.
pub fn detrend(channels: &[Vec<f32>; 3]) -> [Vec<f32>; 3] {
    channels.clone().map(|mut c| {
        let mean = c.iter().map(|&v| v as f64).sum::<f64>() / c.len().max(1) as f64;
        c.iter_mut().for_each(|v| *v = (*v as f64 - mean) as f32);
        c
    })
}

/// Joint peak over the three channels: `(index, channel, |value|)`, earliest
/// index first, then channel order.
pub fn find_pga(channels: &[Vec<f32>; 3]) -> (usize, usize, f32) {
    let mut best = (0, 0, f32::NEG_INFINITY);
    for i in 0..channels[0].len() {
        for (c, ch) in channels.iter().enumerate() {
            let a = ch[i].abs();
            if a > best.2 {
                best = (i, c, a);
            }
        }
    }
    best
}

/// Cuts `window` around the detrended PGA so that the peak lands at `L / 2`.
///
/// Records with fewer than `L / 2` samples on either side of the peak are
/// rejected rather than padded.
pub fn crop_around_pga(rec: &WaveformRecord, window: WindowLength, context: SiteContext) -> Result<CropOutcome> {
    rec.validate()?;
    if rec.sample_rate_hz != TARGET_RATE_HZ {
        return Err(CoreError::InvalidRecord {
            record_id: rec.record_id.clone(),
            detail: format!("expected {TARGET_RATE_HZ} Hz, found {} Hz; normalise first", rec.sample_rate_hz),
        });
    }
    let detrended = detrend(&rec.channels);
    let (p, channel, value) = find_pga(&detrended);
    let n = rec.n_samples();
    let half = window.samples() / 2;
    if p < half || n - 1 - p < half {
        return Ok(CropOutcome::Rejected {
            record_id: rec.record_id.clone(),
            pga_index: p,
            n_samples: n,
        });
    }
    let start = p - half;
    let samples = detrended.map(|c| c[start..start + window.samples()].to_vec());
    Ok(CropOutcome::Accepted(WindowedSample {
        record_id: rec.record_id.clone(),
        window,
        samples,
        pga_value: value,
        pga_channel: channel,
        pga_index: half,
        context,
    }))
}

/// Log-magnitude short-time spectrum, stored frame-major as `D × 51 × 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralVolume {
    pub frames: usize,
    pub data: Vec<f32>,
}

impl SpectralVolume {
    pub const BINS: usize = N_BINS;
    pub const CHANNELS: usize = 3;

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, N_BINS, 3]
    }

    pub fn at(&self, frame: usize, bin: usize, channel: usize) -> f32 {
        self.data[(frame * N_BINS + bin) * 3 + channel]
    }

    /// Reorders to channels-first `3 × D × 51`.
    pub fn to_channels_first(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..3 {
            for f in 0..self.frames {
                for b in 0..N_BINS {
                    out.push(self.at(f, b, c));
                }
            }
        }
        out
    }
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// STFT magnitude of one channel: `frames × 51` values of `|X|`, before the
/// log transform.
pub fn stft_magnitudes(x: &[f32]) -> Result<Vec<Vec<f64>>> {
    if x.len() < STFT_WINDOW {
        return Err(CoreError::Config(format!(
            "spectral transform needs at least {STFT_WINDOW} samples, got {}",
            x.len()
        )));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(STFT_WINDOW);
    let win = hann(STFT_WINDOW);
    let frames = (x.len() - STFT_WINDOW) / STFT_HOP + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); STFT_WINDOW];
    Ok((0..frames)
        .map(|f| {
            let seg = &x[f * STFT_HOP..f * STFT_HOP + STFT_WINDOW];
            for ((b, &v), &w) in buf.iter_mut().zip(seg).zip(&win) {
                *b = Complex::new(v as f64 * w, 0.0);
            }
            fft.process(&mut buf);
            buf[..N_BINS].iter().map(|c| c.norm()).collect()
        })
        .collect())
}

/// Hann-100 / hop-50 STFT of each channel followed by `log(1 + |X|)`.
pub fn to_spectral(w: &WindowedSample) -> Result<SpectralVolume> {
    let l = w.samples[0].len();
    if l < STFT_WINDOW || l % STFT_HOP != 0 {
        return Err(CoreError::Config(format!(
            "window of {l} samples cannot be framed (need >= {STFT_WINDOW} and a multiple of {STFT_HOP})"
        )));
    }
    let mags = w.samples.iter().map(|c| stft_magnitudes(c)).collect::<Result<Vec<_>>>()?;
    let frames = mags[0].len();
    let mut data = Vec::with_capacity(frames * N_BINS * 3);
    for f in 0..frames {
        for b in 0..N_BINS {
            for m in &mags {
                data.push(m[f][b].ln_1p() as f32);
            }
        }
    }
    Ok(SpectralVolume { frames, data })
}

/// Channels-first network input for a window in the given domain.
pub fn features(w: &WindowedSample, domain: Domain) -> Result<Vec<f32>> {
    match domain {
        Domain::Time => Ok(w.samples.concat()),
        Domain::Frequency => Ok(to_spectral(w)?.to_channels_first()),
    }
}

/// Per-channel mean and standard deviation of channels-first features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// Fits population statistics over every value of each channel.
    pub fn fit<'a, I>(samples: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f32]> + Clone,
    {
        let mut sum = [0.0f64; 3];
        let mut count = [0usize; 3];
        for s in samples.clone() {
            let plane = s.len() / 3;
            for (c, chunk) in s.chunks(plane.max(1)).take(3).enumerate() {
                sum[c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                count[c] += chunk.len();
            }
        }
        if count.iter().any(|&n| n == 0) {
            return Err(CoreError::EmptySet("no samples to fit channel statistics".into()));
        }
        let mean = [0, 1, 2].map(|c| sum[c] / count[c] as f64);
        let mut sq = [0.0f64; 3];
        for s in samples {
            let plane = s.len() / 3;
            for (c, chunk) in s.chunks(plane.max(1)).take(3).enumerate() {
                sq[c] += chunk.iter().map(|&v| (v as f64 - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = [0, 1, 2].map(|c| (sq[c] / count[c] as f64).sqrt());
        if let Some(c) = std.iter().position(|&s| s == 0.0 || !s.is_finite()) {
            return Err(CoreError::ZeroStd {
                channel: CHANNEL_NAMES[c].into(),
            });
        }
        Ok(Self { mean, std })
    }

    /// `(x - mean) / std` per channel, in place.
    pub fn apply(&self, x: &mut [f32]) {
        let plane = x.len() / 3;
        for (c, chunk) in x.chunks_mut(plane.max(1)).take(3).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            chunk.iter_mut().for_each(|v| *v = ((*v as f64 - m) / s) as f32);
        }
    }
}

/// Standardises a batch, fitting statistics on it when none are supplied.
pub fn standardize(batch: &[Vec<f32>], stats: Option<&ChannelStats>) -> Result<(Vec<Vec<f32>>, ChannelStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => ChannelStats::fit(batch.iter().map(Vec::as_slice))?,
    };
    let out = batch
        .iter()
        .map(|x| {
            let mut y = x.clone();
            stats.apply(&mut y);
            y
        })
        .collect();
    Ok((out, stats))
}
