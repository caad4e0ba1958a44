//! Straightforward `f64` loop implementations of every layer, written without
//! im2col or matrix routines so they share no code path with the library.

/// Padding before/after an axis, mirroring the library's padding modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    Causal,
    Same,
    None,
}

/// Returns `(pad_before, out_len)` for one axis.
pub fn axis_geometry(len: usize, k: usize, dilation: usize, stride: usize, pad: Pad) -> Option<(usize, usize)> {
    let span = (k - 1) * dilation + 1;
    match pad {
        Pad::None => (len >= span).then(|| (0, (len - span) / stride + 1)),
        Pad::Causal => {
            // padded length len + span - 1
            let padded = len + span - 1;
            Some((span - 1, (padded - span) / stride + 1))
        }
        Pad::Same => {
            let out = (len + stride - 1) / stride;
            let need = (out - 1) * stride + span;
            let total = need.saturating_sub(len);
            Some((total / 2, out))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub dil_h: usize,
    pub dil_w: usize,
    pub pad_h: Pad,
    pub pad_w: Pad,
}

impl ConvSpec {
    pub fn out_dims(&self) -> Option<(usize, usize, usize, usize)> {
        let (pt, oh) = axis_geometry(self.h, self.kh, self.dil_h, self.stride_h, self.pad_h)?;
        let (pl, ow) = axis_geometry(self.w, self.kw, self.dil_w, self.stride_w, self.pad_w)?;
        Some((pt, oh, pl, ow))
    }
}

/// Cross-correlation over `[N, Cin, H, W]` with weight `[Cout, Cin, Kh, Kw]`.
pub fn conv(spec: &ConvSpec, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (pt, oh, pl, ow) = spec.out_dims().expect("valid geometry");
    let mut out = vec![0.0; spec.n * spec.cout * oh * ow];
    for n in 0..spec.n {
        for co in 0..spec.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..spec.cin {
                        for a in 0..spec.kh {
                            for b in 0..spec.kw {
                                let iy = (oy * spec.stride_h + a * spec.dil_h) as isize - pt as isize;
                                let ix = (ox * spec.stride_w + b * spec.dil_w) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= spec.h as isize || ix >= spec.w as isize {
                                    continue;
                                }
                                let xi = ((n * spec.cin + ci) * spec.h + iy as usize) * spec.w + ix as usize;
                                let wi = ((co * spec.cin + ci) * spec.kh + a) * spec.kw + b;
                                acc += x[xi] * weight[wi];
                            }
                        }
                    }
                    out[((n * spec.cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Non-overlapping max pool over the two trailing axes of `outer × H × W`.
pub fn max_pool(x: &[f64], outer: usize, h: usize, w: usize, wh: usize, ww: usize) -> Vec<f64> {
    let (oh, ow) = (h / wh, w / ww);
    let mut out = Vec::with_capacity(outer * oh * ow);
    for o in 0..outer {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for a in 0..wh {
                    for b in 0..ww {
                        m = m.max(x[(o * h + oy * wh + a) * w + ox * ww + b]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Train-mode batch norm over `[N, C, inner]` with biased batch variance.
pub fn batch_norm_train(x: &[f64], n: usize, c: usize, inner: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let count = (n * inner) as f64;
    for ch in 0..c {
        let idx = |i: usize, j: usize| (i * c + ch) * inner + j;
        let mut mean = 0.0;
        for i in 0..n {
            for j in 0..inner {
                mean += x[idx(i, j)];
            }
        }
        mean /= count;
        let mut var = 0.0;
        for i in 0..n {
            for j in 0..inner {
                var += (x[idx(i, j)] - mean).powi(2);
            }
        }
        var /= count;
        for i in 0..n {
            for j in 0..inner {
                out[idx(i, j)] = gamma[ch] * (x[idx(i, j)] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn batch_norm_eval(
    x: &[f64],
    c: usize,
    inner: usize,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / inner) % c;
            gamma[ch] * (v - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch]
        })
        .collect()
}

/// `[N, Fin] × [Fout, Fin]ᵀ + b`.
pub fn dense(x: &[f64], n: usize, fin: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let fout = bias.len();
    let mut out = vec![0.0; n * fout];
    for i in 0..n {
        for o in 0..fout {
            let mut acc = bias[o];
            for f in 0..fin {
                acc += x[i * fin + f] * weight[o * fin + f];
            }
            out[i * fout + o] = acc;
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn mean_over_inner(x: &[f64], inner: usize) -> Vec<f64> {
    x.chunks(inner).map(|c| c.iter().sum::<f64>() / inner as f64).collect()
}

pub fn mse(p: &[f64], t: &[f64]) -> f64 {
    p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64
}

pub fn mae(p: &[f64], t: &[f64]) -> f64 {
    p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64
}

/// Central differences of a scalar function at `x` with step `h`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_error(a: &[f32], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// One-sided DFT magnitudes `|X_k|`, `k = 0..=n/2`, by direct summation.
pub fn dft_magnitudes(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
