//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding its
//! output value and the data its backward rule needs. Nodes are appended in
//! evaluation order, so walking them in reverse is a valid topological order
//! for [`Tape::backward`]. A tape is meant to be dropped after one step.

use rand::Rng;

use crate::error::{arg_err, shape_err, NdError, Result};
use crate::gemm;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Train or eval behaviour for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Convolution padding along the time (last) axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Left-pad with `(K-1)·dilation` zeros; output `t` sees inputs `..=t·stride`.
    Causal,
    /// Pad so that `L_out = ceil(L / stride)`, split as evenly as possible.
    Same,
    /// No padding.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Mae,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    dh: usize,
    dw: usize,
    pt: usize,
    pl: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.pt == 0 && self.pl == 0
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let plane = self.out_plane();
        for ci in 0..self.cin {
            let xc = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (ci * self.kh + a) * self.kw + b;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + a * self.dh) as isize - self.pt as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let off = (b * self.dw) as isize - self.pl as isize;
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.sw) as isize + off;
                            *v = if ix >= 0 && ix < self.w as isize { src[ix as usize] } else { 0.0 };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f32], dx: &mut [f32]) {
        let plane = self.out_plane();
        for ci in 0..self.cin {
            let xc = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for a in 0..self.kh {
                for b in 0..self.kw {
                    let row = (ci * self.kh + a) * self.kw + b;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy * self.sh + a * self.dh) as isize - self.pt as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut xc[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let off = (b * self.dw) as isize - self.pl as isize;
                        for (ox, v) in src[oy * self.ow..(oy + 1) * self.ow].iter().enumerate() {
                            let ix = (ox * self.sw) as isize + off;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Padding before the axis and output length for one convolved axis.
fn conv_axis(
    op: &'static str,
    len: usize,
    k: usize,
    dilation: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    let span = (k - 1) * dilation + 1;
    match padding {
        Padding::None => {
            if len < span {
                return Err(shape_err(
                    op,
                    format!("input length {len} shorter than dilated kernel span {span}"),
                ));
            }
            Ok((0, (len - span) / stride + 1))
        }
        Padding::Causal => Ok((span - 1, (len - 1) / stride + 1)),
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + span).saturating_sub(len);
            Ok((total / 2, out))
        }
    }
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Gather {
        x: Var,
        index: Vec<u32>,
    },
    Reshape {
        x: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        channels: usize,
        inner: usize,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f32>,
        mean: Vec<f32>,
        channels: usize,
        inner: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    MulConst {
        x: Var,
        factor: Vec<f32>,
    },
    Add {
        a: Var,
        b: Var,
    },
    MeanSpatial {
        x: Var,
        inner: usize,
    },
    Concat {
        a: Var,
        b: Var,
        fa: usize,
        fb: usize,
    },
    ColumnAffine {
        x: Var,
        scale: Vec<f32>,
    },
    Sum {
        x: Var,
    },
    Loss {
        pred: Var,
        target: Vec<f32>,
        kind: LossKind,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Per-channel batch statistics produced by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, the quantity tracked by running statistics.
    pub var_unbiased: Vec<f32>,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    bindings: Vec<(Var, ParamId)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds a leaf holding a copy of `t`; gradients flow to it when
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Constant leaf (never receives a gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Leaf bound to a stored parameter; [`ParamStore::accumulate_grads`] writes
    /// its gradient back after [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let var = self.push(
            p.tensor.shape().to_vec(),
            p.tensor.data().to_vec(),
            Op::Leaf,
            p.trainable,
        );
        self.bindings.push((var, id));
        var
    }

    pub(crate) fn bindings(&self) -> &[(Var, ParamId)] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are validated on push")
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// 1-D convolution over `[N, C_in, L]` (or unbatched `[C_in, L]`) with
    /// weight `[C_out, C_in, K]` and bias `[C_out]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        const OP: &str = "conv1d";
        let xs = self.shape(x).to_vec();
        let (n, cin, l, batched) = match xs.as_slice() {
            &[c, l] => (1, c, l, false),
            &[n, c, l] => (n, c, l, true),
            other => return Err(shape_err(OP, format!("input must be [C, L] or [N, C, L], got {other:?}"))),
        };
        let ws = self.shape(w).to_vec();
        let &[cout, wcin, k] = ws.as_slice() else {
            return Err(shape_err(OP, format!("weight must be [C_out, C_in, K], got {ws:?}")));
        };
        if wcin != cin {
            return Err(shape_err(OP, format!("input has {cin} channels, weight expects {wcin}")));
        }
        if self.shape(b) != [cout] {
            return Err(shape_err(OP, format!("bias must be [{cout}], got {:?}", self.shape(b))));
        }
        if dilation == 0 || stride == 0 {
            return Err(arg_err(OP, "dilation and stride must be at least 1"));
        }
        let (pl, ow) = conv_axis(OP, l, k, dilation, stride, padding)?;
        let geom = ConvGeom {
            n,
            cin,
            h: 1,
            w: l,
            cout,
            kh: 1,
            kw: k,
            sh: 1,
            sw: stride,
            dh: 1,
            dw: dilation,
            pt: 0,
            pl,
            oh: 1,
            ow,
        };
        let shape = if batched { vec![n, cout, ow] } else { vec![cout, ow] };
        Ok(self.conv_forward(x, w, b, geom, shape))
    }

    /// 2-D cross-correlation over `[N, C_in, H, W]` (or `[C_in, H, W]`) with
    /// weight `[C_out, C_in, Kh, Kw]`; the same stride applies to both axes.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: Padding) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(x).to_vec();
        let (n, cin, h, wd, batched) = match xs.as_slice() {
            &[c, h, w] => (1, c, h, w, false),
            &[n, c, h, w] => (n, c, h, w, true),
            other => return Err(shape_err(OP, format!("input must be [C, H, W] or [N, C, H, W], got {other:?}"))),
        };
        let ws = self.shape(w).to_vec();
        let &[cout, wcin, kh, kw] = ws.as_slice() else {
            return Err(shape_err(OP, format!("weight must be [C_out, C_in, Kh, Kw], got {ws:?}")));
        };
        if wcin != cin {
            return Err(shape_err(OP, format!("input has {cin} channels, weight expects {wcin}")));
        }
        if self.shape(b) != [cout] {
            return Err(shape_err(OP, format!("bias must be [{cout}], got {:?}", self.shape(b))));
        }
        if stride == 0 {
            return Err(arg_err(OP, "stride must be at least 1"));
        }
        if padding == Padding::Causal {
            return Err(arg_err(OP, "causal padding is only defined for conv1d"));
        }
        let (pt, oh) = conv_axis(OP, h, kh, 1, stride, padding)?;
        let (pl, ow) = conv_axis(OP, wd, kw, 1, stride, padding)?;
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            sh: stride,
            sw: stride,
            dh: 1,
            dw: 1,
            pt,
            pl,
            oh,
            ow,
        };
        let shape = if batched { vec![n, cout, oh, ow] } else { vec![cout, oh, ow] };
        Ok(self.conv_forward(x, w, b, geom, shape))
    }

    fn conv_forward(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom, shape: Vec<usize>) -> Var {
        let plane = geom.out_plane();
        let rows = geom.col_rows();
        let in_sample = geom.cin * geom.h * geom.w;
        let mut out = vec![0.0f32; geom.n * geom.cout * plane];
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let bv = &self.nodes[b.0].value;
            let mut cols = vec![0.0f32; if geom.is_pointwise() { 0 } else { rows * plane }];
            for s in 0..geom.n {
                let xs = &xv[s * in_sample..(s + 1) * in_sample];
                let colref: &[f32] = if geom.is_pointwise() {
                    xs
                } else {
                    geom.im2col(xs, &mut cols);
                    &cols
                };
                let os = &mut out[s * geom.cout * plane..(s + 1) * geom.cout * plane];
                gemm::matmul(geom.cout, rows, plane, wv, colref, os, false);
                for (co, chunk) in os.chunks_mut(plane).enumerate() {
                    let bias = bv[co];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(shape, out, Op::Conv { x, w, b, geom }, ng)
    }

    /// Max pooling over the trailing axis of `[.., L]` with non-overlapping
    /// windows; output length `floor(L / window)`. Ties route to the first
    /// maximal index.
    pub fn max_pool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        const OP: &str = "max_pool1d";
        let shape = self.shape(x).to_vec();
        let Some(&l) = shape.last() else {
            return Err(shape_err(OP, "scalar input"));
        };
        if window == 0 || window > l {
            return Err(arg_err(OP, format!("window {window} invalid for axis of length {l}")));
        }
        let ol = l / window;
        let outer: usize = shape[..shape.len() - 1].iter().product();
        let xv = self.value(x);
        let mut index = Vec::with_capacity(outer * ol);
        for o in 0..outer {
            for t in 0..ol {
                let start = o * l + t * window;
                let mut best = start;
                for i in start + 1..start + window {
                    if xv[i] > xv[best] {
                        best = i;
                    }
                }
                index.push(best as u32);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = ol;
        Ok(self.gather(x, index, out_shape))
    }

    /// Max pooling over the two trailing axes with window `(wh, ww)` and equal
    /// stride; first maximal index (row-major within the window) wins ties.
    pub fn max_pool2d(&mut self, x: Var, window: (usize, usize)) -> Result<Var> {
        const OP: &str = "max_pool2d";
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err(OP, format!("need at least 2 axes, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let (wh, ww) = window;
        if wh == 0 || ww == 0 || wh > h || ww > w {
            return Err(arg_err(OP, format!("window {window:?} invalid for {h}x{w} plane")));
        }
        let (oh, ow) = (h / wh, w / ww);
        let outer: usize = shape[..shape.len() - 2].iter().product();
        let xv = self.value(x);
        let mut index = Vec::with_capacity(outer * oh * ow);
        for o in 0..outer {
            let base = o * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * wh * w + ox * ww;
                    for a in 0..wh {
                        for b in 0..ww {
                            let i = base + (oy * wh + a) * w + ox * ww + b;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    index.push(best as u32);
                }
            }
        }
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        Ok(self.gather(x, index, out_shape))
    }

    fn gather(&mut self, x: Var, index: Vec<u32>, shape: Vec<usize>) -> Var {
        let xv = self.value(x);
        let out = index.iter().map(|&i| xv[i as usize]).collect();
        let ng = self.ng(x);
        self.push(shape, out, Op::Gather { x, index }, ng)
    }

    /// Selects time step `t` from `[N, C, L]`, giving `[N, C]`.
    pub fn select_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[n, c, l] = shape.as_slice() else {
            return Err(shape_err("select_time", format!("expected [N, C, L], got {shape:?}")));
        };
        if t >= l {
            return Err(arg_err("select_time", format!("index {t} out of range for length {l}")));
        }
        let index = (0..n * c).map(|r| (r * l + t) as u32).collect();
        Ok(self.gather(x, index, vec![n, c]))
    }

    /// Reorders `[N, A, B, C]` to `[N, A·C, B]`: each (channel, column) pair of
    /// the trailing plane becomes a channel of a sequence over the `B` axis.
    pub fn planes_to_sequence(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[n, a, b, c] = shape.as_slice() else {
            return Err(shape_err("planes_to_sequence", format!("expected [N, A, B, C], got {shape:?}")));
        };
        let mut index = Vec::with_capacity(n * a * b * c);
        for s in 0..n {
            for ch in 0..a {
                for col in 0..c {
                    for row in 0..b {
                        index.push((((s * a + ch) * b + row) * c + col) as u32);
                    }
                }
            }
        }
        Ok(self.gather(x, index, vec![n, a * c, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(shape_err("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape, value, Op::Reshape { x }, ng))
    }

    fn channel_layout(&self, op: &'static str, x: Var, params: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(shape_err(op, format!("input must be [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        if c != params {
            return Err(shape_err(op, format!("input has {c} channels, parameters have {params}")));
        }
        Ok((n, c, shape[2..].iter().product()))
    }

    /// Train-mode batch norm with batch statistics per channel (axis 1).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BatchStats)> {
        const OP: &str = "batch_norm";
        let c_params = self.value(gamma).len();
        let (n, c, inner) = self.channel_layout(OP, x, c_params)?;
        if self.value(beta).len() != c {
            return Err(shape_err(OP, "gamma and beta lengths differ"));
        }
        if n < 2 {
            return Err(arg_err(OP, "train mode needs a batch of at least 2 (variance undefined)"));
        }
        let count = (n * inner) as f64;
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut mean = vec![0f32; c];
        let mut var_unbiased = vec![0f32; c];
        let mut inv_std = vec![0f32; c];
        let mut xhat = vec![0f32; xv.len()];
        let mut out = vec![0f32; xv.len()];
        for ch in 0..c {
            let mut s = 0f64;
            for i in 0..n {
                let base = (i * c + ch) * inner;
                s += xv[base..base + inner].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mu = s / count;
            let mut ss = 0f64;
            for i in 0..n {
                let base = (i * c + ch) * inner;
                ss += xv[base..base + inner].iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
            }
            let var = ss / count;
            let inv = 1.0 / (var + eps as f64).sqrt();
            mean[ch] = mu as f32;
            var_unbiased[ch] = (ss / (count - 1.0)) as f32;
            inv_std[ch] = inv as f32;
            for i in 0..n {
                let base = (i * c + ch) * inner;
                for j in base..base + inner {
                    let h = ((xv[j] as f64 - mu) * inv) as f32;
                    xhat[j] = h;
                    out[j] = gv[ch] * h + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let var = self.push(
            shape,
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels: c,
                inner,
            },
            ng,
        );
        Ok((var, BatchStats { mean, var_unbiased }))
    }

    /// Eval-mode batch norm: `gamma · (x − mean) / sqrt(var + eps) + beta`
    /// with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let c_params = self.value(gamma).len();
        let (_, c, inner) = self.channel_layout(OP, x, c_params)?;
        if running_mean.len() != c || running_var.len() != c || self.value(beta).len() != c {
            return Err(shape_err(OP, "statistics length does not match channel count"));
        }
        let inv_std: Vec<f32> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = vec![0f32; xv.len()];
        for (j, (o, &v)) in out.iter_mut().zip(xv).enumerate() {
            let ch = (j / inner) % c;
            *o = gv[ch] * ((v - running_mean[ch]) * inv_std[ch]) + bv[ch];
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            shape,
            out,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                inv_std,
                mean: running_mean.to_vec(),
                channels: c,
                inner,
            },
            ng,
        ))
    }

    /// `[N, F_in] · [F_out, F_in]ᵀ + [F_out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        const OP: &str = "dense";
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let &[n, fin] = xs.as_slice() else {
            return Err(shape_err(OP, format!("input must be [N, F], got {xs:?}")));
        };
        let &[fout, wfin] = ws.as_slice() else {
            return Err(shape_err(OP, format!("weight must be [F_out, F_in], got {ws:?}")));
        };
        if wfin != fin {
            return Err(shape_err(OP, format!("input has {fin} features, weight expects {wfin}")));
        }
        if self.shape(b) != [fout] {
            return Err(shape_err(OP, format!("bias must be [{fout}], got {:?}", self.shape(b))));
        }
        let mut out = vec![0f32; n * fout];
        gemm::matmul_a_bt(n, fin, fout, self.value(x), self.value(w), &mut out, false);
        let bv = self.value(b);
        for row in out.chunks_mut(fout) {
            row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(vec![n, fout], out, Op::Dense { x, w, b }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        self.push(shape, out, Op::Relu { x }, ng)
    }

    /// Inverted dropout. Eval mode (or rate 0) returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(arg_err("dropout", format!("rate must lie in [0, 1), got {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let factor: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(x, factor)
    }

    /// Elementwise product with a constant of the same length.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f32>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(shape_err("mul_const", "factor length differs from input"));
        }
        let out = self.value(x).iter().zip(&factor).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape, out, Op::MulConst { x, factor }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::Add { a, b }, ng))
    }

    /// Global average over every axis after the channel axis: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(shape_err("global_avg_pool", format!("expected [N, C, ...], got {shape:?}")));
        }
        let inner: usize = shape[2..].iter().product();
        let out = self
            .value(x)
            .chunks(inner)
            .map(|c| (c.iter().map(|&v| v as f64).sum::<f64>() / inner as f64) as f32)
            .collect();
        let ng = self.ng(x);
        Ok(self.push(vec![shape[0], shape[1]], out, Op::MeanSpatial { x, inner }, ng))
    }

    /// Concatenates `[N, Fa]` and `[N, Fb]` along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[n, fa], &[nb, fb]) = (sa.as_slice(), sb.as_slice()) else {
            return Err(shape_err("concat", format!("expected two [N, F] inputs, got {sa:?} and {sb:?}")));
        };
        if n != nb {
            return Err(shape_err("concat", format!("batch sizes differ: {n} vs {nb}")));
        }
        let mut out = Vec::with_capacity(n * (fa + fb));
        for i in 0..n {
            out.extend_from_slice(&self.value(a)[i * fa..(i + 1) * fa]);
            out.extend_from_slice(&self.value(b)[i * fb..(i + 1) * fb]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![n, fa + fb], out, Op::Concat { a, b, fa, fb }, ng))
    }

    /// Fixed per-column affine map on `[N, F]`: `y[:, j] = x[:, j]·scale[j] + shift[j]`.
    pub fn column_affine(&mut self, x: Var, scale: &[f32], shift: &[f32]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let &[_, f] = shape.as_slice() else {
            return Err(shape_err("column_affine", format!("expected [N, F], got {shape:?}")));
        };
        if scale.len() != f || shift.len() != f {
            return Err(shape_err("column_affine", format!("need {f} scale/shift entries")));
        }
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[i % f] + shift[i % f])
            .collect();
        let ng = self.ng(x);
        Ok(self.push(
            shape,
            out,
            Op::ColumnAffine {
                x,
                scale: scale.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|&v| v as f64).sum::<f64>() as f32;
        let ng = self.ng(x);
        self.push(Vec::new(), vec![s], Op::Sum { x }, ng)
    }

    /// Mean squared or mean absolute error between `pred` and a constant target
    /// with the same element count. Returns a scalar.
    pub fn loss(&mut self, pred: Var, target: &[f32], kind: LossKind) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(shape_err(
                "loss",
                format!("prediction has {} elements, target has {}", pv.len(), target.len()),
            ));
        }
        if pv.is_empty() {
            return Err(NdError::EmptyInput { op: "loss" });
        }
        let n = pv.len() as f64;
        let total: f64 = pv
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let r = p as f64 - t as f64;
                match kind {
                    LossKind::Mse => r * r,
                    LossKind::Mae => r.abs(),
                }
            })
            .sum();
        let ng = self.ng(pred);
        Ok(self.push(
            Vec::new(),
            vec![(total / n) as f32],
            Op::Loss {
                pred,
                target: target.to_vec(),
                kind,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`; afterwards [`Tape::grad`] returns
    /// d(loss)/d(node) for every node the loss depends on through
    /// gradient-requiring leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = &self.nodes[loss.0].shape;
        if ls.iter().product::<usize>() != 1 {
            return Err(NdError::NonScalarLoss(ls.clone()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let len_of = |v: Var| nodes[v.0].value.len();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            let g = grads[v.0].get_or_insert_with(|| vec![0.0; len_of(v)]);
            f(g);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let g = *geom;
                let plane = g.out_plane();
                let rows = g.col_rows();
                let in_sample = g.cin * g.h * g.w;
                let out_sample = g.cout * plane;
                if needs(*b) {
                    acc(*b, &mut |db| {
                        for s in 0..g.n {
                            for (co, chunk) in gy[s * out_sample..(s + 1) * out_sample].chunks(plane).enumerate() {
                                db[co] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
                            }
                        }
                    });
                }
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let mut cols = vec![0f32; if g.is_pointwise() { 0 } else { rows * plane }];
                if needs(*w) {
                    acc(*w, &mut |dw| {
                        for s in 0..g.n {
                            let xs = &xv[s * in_sample..(s + 1) * in_sample];
                            let colref: &[f32] = if g.is_pointwise() {
                                xs
                            } else {
                                g.im2col(xs, &mut cols);
                                &cols
                            };
                            let dys = &gy[s * out_sample..(s + 1) * out_sample];
                            gemm::matmul_a_bt(g.cout, plane, rows, dys, colref, dw, true);
                        }
                    });
                }
                if needs(*x) {
                    acc(*x, &mut |dx| {
                        let mut dcols = vec![0f32; rows * plane];
                        for s in 0..g.n {
                            let dys = &gy[s * out_sample..(s + 1) * out_sample];
                            let dxs = &mut dx[s * in_sample..(s + 1) * in_sample];
                            if g.is_pointwise() {
                                gemm::matmul_at_b(rows, g.cout, plane, wv, dys, dxs, true);
                            } else {
                                gemm::matmul_at_b(rows, g.cout, plane, wv, dys, &mut dcols, false);
                                g.col2im_add(&dcols, dxs);
                            }
                        }
                    });
                }
            }
            Op::Gather { x, index } => {
                if needs(*x) {
                    acc(*x, &mut |dx| {
                        for (&j, &v) in index.iter().zip(gy) {
                            dx[j as usize] += v;
                        }
                    });
                }
            }
            Op::Reshape { x } | Op::Sum { x } => {
                if needs(*x) {
                    let sum = matches!(node.op, Op::Sum { .. });
                    acc(*x, &mut |dx| {
                        if sum {
                            dx.iter_mut().for_each(|d| *d += gy[0]);
                        } else {
                            dx.iter_mut().zip(gy).for_each(|(d, &v)| *d += v);
                        }
                    });
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                inner,
            } => {
                let (c, inner) = (*channels, *inner);
                let n = gy.len() / (c * inner);
                let count = (n * inner) as f64;
                let gv = &nodes[gamma.0].value;
                let mut sum_dy = vec![0f64; c];
                let mut sum_dy_xhat = vec![0f64; c];
                for (j, (&d, &h)) in gy.iter().zip(xhat).enumerate() {
                    let ch = (j / inner) % c;
                    sum_dy[ch] += d as f64;
                    sum_dy_xhat[ch] += d as f64 * h as f64;
                }
                if needs(*gamma) {
                    acc(*gamma, &mut |dg| dg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, &b)| *a += b as f32));
                }
                if needs(*beta) {
                    acc(*beta, &mut |db| db.iter_mut().zip(&sum_dy).for_each(|(a, &b)| *a += b as f32));
                }
                if needs(*x) {
                    acc(*x, &mut |dx| {
                        for (j, d) in dx.iter_mut().enumerate() {
                            let ch = (j / inner) % c;
                            let g = gv[ch] as f64;
                            // dxhat = dy·γ; dx = inv/count · (count·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                            let v = inv_std[ch] as f64 / count
                                * (count * gy[j] as f64 * g
                                    - g * sum_dy[ch]
                                    - xhat[j] as f64 * g * sum_dy_xhat[ch]);
                            *d += v as f32;
                        }
                    });
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                inv_std,
                mean,
                channels,
                inner,
            } => {
                let (c, inner) = (*channels, *inner);
                let xv = &nodes[x.0].value;
                let gv = &nodes[gamma.0].value;
                if needs(*gamma) {
                    acc(*gamma, &mut |dg| {
                        for (j, &d) in gy.iter().enumerate() {
                            let ch = (j / inner) % c;
                            dg[ch] += d * (xv[j] - mean[ch]) * inv_std[ch];
                        }
                    });
                }
                if needs(*beta) {
                    acc(*beta, &mut |db| {
                        for (j, &d) in gy.iter().enumerate() {
                            db[(j / inner) % c] += d;
                        }
                    });
                }
                if needs(*x) {
                    acc(*x, &mut |dx| {
                        for (j, d) in dx.iter_mut().enumerate() {
                            let ch = (j / inner) % c;
                            *d += gy[j] * gv[ch] * inv_std[ch];
                        }
                    });
                }
            }
            Op::Dense { x, w, b } => {
                let xs = &nodes[x.0].shape;
                let (n, fin) = (xs[0], xs[1]);
                let fout = nodes[b.0].value.len();
                if needs(*b) {
                    acc(*b, &mut |db| {
                        for row in gy.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                    });
                }
                if needs(*w) {
                    let xv = &nodes[x.0].value;
                    acc(*w, &mut |dw| gemm::matmul_at_b(fout, n, fin, gy, xv, dw, true));
                }
                if needs(*x) {
                    let wv = &nodes[w.0].value;
                    acc(*x, &mut |dx| gemm::matmul(n, fout, fin, gy, wv, dx, true));
                }
            }
            Op::Relu { x } => {
                if needs(*x) {
                    let xv = &nodes[x.0].value;
                    acc(*x, &mut |dx| {
                        for ((d, &v), &g) in dx.iter_mut().zip(xv).zip(gy) {
                            if v > 0.0 {
                                *d += g;
                            }
                        }
                    });
                }
            }
            Op::MulConst { x, factor } => {
                if needs(*x) {
                    acc(*x, &mut |dx| {
                        for ((d, &f), &g) in dx.iter_mut().zip(factor).zip(gy) {
                            *d += f * g;
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if needs(v) {
                        acc(v, &mut |d| d.iter_mut().zip(gy).for_each(|(x, &g)| *x += g));
                    }
                }
            }
            Op::MeanSpatial { x, inner } => {
                if needs(*x) {
                    let scale = 1.0 / *inner as f32;
                    acc(*x, &mut |dx| {
                        for (chunk, &g) in dx.chunks_mut(*inner).zip(gy) {
                            chunk.iter_mut().for_each(|d| *d += g * scale);
                        }
                    });
                }
            }
            Op::Concat { a, b, fa, fb } => {
                let (fa, fb) = (*fa, *fb);
                if needs(*a) {
                    acc(*a, &mut |da| {
                        for (dst, row) in da.chunks_mut(fa).zip(gy.chunks(fa + fb)) {
                            dst.iter_mut().zip(&row[..fa]).for_each(|(d, &g)| *d += g);
                        }
                    });
                }
                if needs(*b) {
                    acc(*b, &mut |db| {
                        for (dst, row) in db.chunks_mut(fb).zip(gy.chunks(fa + fb)) {
                            dst.iter_mut().zip(&row[fa..]).for_each(|(d, &g)| *d += g);
                        }
                    });
                }
            }
            Op::ColumnAffine { x, scale } => {
                if needs(*x) {
                    let f = scale.len();
                    acc(*x, &mut |dx| {
                        for (j, d) in dx.iter_mut().enumerate() {
                            *d += gy[j] * scale[j % f];
                        }
                    });
                }
            }
            Op::Loss { pred, target, kind } => {
                if needs(*pred) {
                    let pv = &nodes[pred.0].value;
                    let n = pv.len() as f32;
                    let kind = *kind;
                    acc(*pred, &mut |dp| {
                        for ((d, &p), &t) in dp.iter_mut().zip(pv).zip(target) {
                            let r = p - t;
                            let local = match kind {
                                LossKind::Mse => 2.0 * r / n,
                                LossKind::Mae => {
                                    if r > 0.0 {
                                        1.0 / n
                                    } else if r < 0.0 {
                                        -1.0 / n
                                    } else {
                                        0.0
                                    }
                                }
                            };
                            *d += gy[0] * local;
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn causal_conv_hand_example() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 3], &[1., 2., 3.]));
        let w = tape.leaf(&t(&[1, 1, 2], &[1., 1.]));
        let b = tape.leaf(&t(&[1], &[0.]));
        let y = tape.conv1d(x, w, b, 1, 1, Padding::Causal).unwrap();
        assert_eq!(tape.value(y), &[1., 3., 5.]);
        assert_eq!(tape.shape(y), &[1, 3]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let data: Vec<f32> = (0..12).map(|i| (i as f32 * 0.7).sin()).collect();
        for padding in [Padding::Causal, Padding::Same, Padding::None] {
            let mut tape = Tape::new();
            let x = tape.leaf(&t(&[2, 1, 6], &data));
            let w = tape.leaf(&t(&[1, 1, 1], &[1.0]));
            let b = tape.leaf(&t(&[1], &[0.0]));
            let y = tape.conv1d(x, w, b, 1, 1, padding).unwrap();
            assert_eq!(tape.value(y), data.as_slice());
        }
    }

    #[test]
    fn dilated_impulse_taps() {
        let mut input = vec![0f32; 16];
        input[5] = 1.0;
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 16], &input));
        let w = tape.leaf(&t(&[1, 1, 3], &[0.5, 2.0, -1.5]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let y = tape.conv1d(x, w, b, 2, 1, Padding::Causal).unwrap();
        let nonzero: Vec<usize> = tape.value(y).iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(nonzero, vec![5, 7, 9]);
    }

    #[test]
    fn conv_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 4], &[0.0; 8]));
        let w = tape.leaf(&t(&[1, 3, 2], &[0.0; 6]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        assert!(matches!(
            tape.conv1d(x, w, b, 1, 1, Padding::Causal),
            Err(NdError::Shape { .. })
        ));
        let w2 = tape.leaf(&t(&[1, 2, 5], &[0.0; 10]));
        assert!(tape.conv1d(x, w2, b, 1, 1, Padding::None).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn conv2d_scalar_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let w = tape.leaf(&t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b, 1, Padding::None).unwrap();
        assert_eq!(tape.value(y), &[2., 4., 6., 8.]);
    }

    #[test]
    fn conv2d_zero_input_gives_bias_and_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 3, 3], &[0.0; 9]));
        let w = tape.leaf(&t(&[2, 1, 2, 2], &[0.3; 8]));
        let b = tape.leaf(&t(&[2], &[0.5, -1.0]));
        let y = tape.conv2d(x, w, b, 1, Padding::None).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 2]);
        assert_eq!(tape.value(y), &[0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn max_pool_values_and_routing() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[1., 3., 2., 5.]).with_requires_grad(true));
        let y = tape.max_pool1d(x, 2).unwrap();
        assert_eq!(tape.value(y), &[3., 5.]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0., 1., 0., 1.]);

        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[5], &[2.; 5]).with_requires_grad(true));
        let y = tape.max_pool1d(x, 2).unwrap();
        assert_eq!(tape.value(y), &[2., 2.]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        // ties go to the first index of each window
        assert_eq!(tape.grad(x).unwrap(), &[1., 0., 1., 0., 0.]);
        assert!(tape.max_pool1d(x, 6).is_err());
    }

    #[test]
    fn batch_norm_two_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 1], &[1., 3.]));
        let g = tape.leaf(&t(&[1], &[1.]));
        let b = tape.leaf(&t(&[1], &[0.]));
        let (y, stats) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((tape.value(y)[0] as f64 + expect).abs() < 1e-6);
        assert!((tape.value(y)[1] as f64 - expect).abs() < 1e-6);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var_unbiased, vec![2.0]);

        let x1 = tape.leaf(&t(&[1, 1], &[1.]));
        assert!(tape.batch_norm_train(x1, g, b, 1e-5).is_err());
    }

    #[test]
    fn losses() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[1], &[3.]));
        let l = tape.loss(p, &[1.], LossKind::Mse).unwrap();
        assert_eq!(tape.value(l), &[4.0]);
        let p = tape.leaf(&t(&[2], &[1., 2.]));
        let l = tape.loss(p, &[0., 0.], LossKind::Mae).unwrap();
        assert_eq!(tape.value(l), &[1.5]);
        for kind in [LossKind::Mse, LossKind::Mae] {
            let l = tape.loss(p, &[1., 2.], kind).unwrap();
            assert_eq!(tape.value(l), &[0.0]);
        }
        assert!(tape.loss(p, &[1.], LossKind::Mse).is_err());
    }

    #[test]
    fn mae_subgradient_is_zero_at_zero_residual() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(&[3], &[1., 2., 3.]).with_requires_grad(true));
        let l = tape.loss(p, &[1., 0., 5.], LossKind::Mae).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(p).unwrap();
        assert_eq!(g, &[0.0, 1.0 / 3.0, -1.0 / 3.0]);
    }

    #[test]
    fn backward_of_sum_is_ones_and_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[0.5; 6]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(NdError::NonScalarLoss(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn scalar_chain_gradient() {
        // loss = (w·x − y)², grad_w = 2x(wx − y)
        let (w0, x0, y0) = (1.5f32, 2.0f32, 1.0f32);
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 1], &[x0]));
        let w = tape.leaf(&t(&[1, 1], &[w0]).with_requires_grad(true));
        let b = tape.leaf(&t(&[1], &[0.0]));
        let p = tape.dense(x, w, b).unwrap();
        let l = tape.loss(p, &[y0], LossKind::Mse).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap()[0], 2.0 * x0 * (w0 * x0 - y0));
    }

    #[test]
    fn dropout_modes() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[1., -2., 3., 4.]));
        let e = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(e), tape.value(x));
        let z = tape.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
        assert!(tape.dropout(x, 1.0, Mode::Train, &mut rng).is_err());
        assert!(tape.dropout(x, -0.1, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[n], 2.0).unwrap());
        let y = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = tape.value(y).iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.05 * 2.0, "mean {mean}");
        assert!(tape.value(y).iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn planes_to_sequence_layout() {
        let mut tape = Tape::new();
        // [1, 2, 3, 2]: channel, row (time), column (bin)
        let data: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let x = tape.leaf(&t(&[1, 2, 3, 2], &data));
        let y = tape.planes_to_sequence(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 3]);
        assert_eq!(tape.value(y), &[0., 2., 4., 1., 3., 5., 6., 8., 10., 7., 9., 11.]);
    }
}
