//! Finite-difference gradient checks of `ndnet` layers against the `f64`
//! reference implementations.
//!
//! Each case contracts the layer output with a fixed random weight vector
//! `R`, so the checked scalar is `Σ out ⊙ R`; the tape gradient of that scalar
//! is compared with central differences (`h = 1e-3`) of the reference.

use ndnet::{LossKind, Padding, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::reference::{self as r, Pad};

pub const FD_STEP: f64 = 1e-3;
pub const GRAD_REL_TOL: f64 = 1e-4;

type BuildFn = Box<dyn Fn(&mut Tape, &[Var]) -> ndnet::Result<Var>>;
type RefFn = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: bool,
}

pub struct Case {
    pub inputs: Vec<Input>,
    pub build: BuildFn,
    pub reference: RefFn,
}

#[derive(Debug, Clone, Copy)]
pub struct CaseResult {
    pub forward_rel: f64,
    pub grad_rel: f64,
}

#[derive(Debug, Clone)]
pub struct LayerReport {
    pub layer: &'static str,
    pub cases: usize,
    pub worst_forward_rel: f64,
    pub worst_grad_rel: f64,
}

impl LayerReport {
    pub fn passed(&self) -> bool {
        self.worst_grad_rel <= GRAD_REL_TOL && self.worst_forward_rel <= 1e-5
    }
}

fn input(shape: &[usize], data: Vec<f32>, grad: bool) -> Input {
    Input {
        shape: shape.to_vec(),
        data,
        grad,
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Values bounded away from zero, so ReLU and |·| kinks stay outside ±h.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05f32..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Distinct values spaced at least 0.02 apart, so no pooling window has a
/// near-tie inside the finite-difference step.
fn well_separated(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - n as f32 * 0.025).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v.iter().map(|x| x + rng.random_range(-0.01f32..0.01)).collect()
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn check(case: &Case, rng: &mut ChaCha8Rng) -> CaseResult {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|i| {
            let t = Tensor::new(i.shape.clone(), i.data.clone()).expect("case shape");
            tape.leaf(&t.with_requires_grad(i.grad))
        })
        .collect();
    let out = (case.build)(&mut tape, &vars).expect("layer forward");
    let n_out = tape.value(out).len();
    let weights: Vec<f32> = uniform(rng, n_out);
    let contracted = tape.mul_const(out, weights.clone()).expect("contract");
    let loss = tape.sum(contracted);
    tape.backward(loss).expect("backward");

    let base: Vec<Vec<f64>> = case.inputs.iter().map(|i| to_f64(&i.data)).collect();
    let ref_out = (case.reference)(&base);
    assert_eq!(ref_out.len(), n_out, "reference output length");
    let forward_rel = r::rel_error(tape.value(out), &ref_out, 1e-6);

    let w64 = to_f64(&weights);
    let mut grad_rel: f64 = 0.0;
    for (k, inp) in case.inputs.iter().enumerate() {
        if !inp.grad {
            continue;
        }
        let mut args = base.clone();
        let fd = r::central_diff(
            |x| {
                args[k].copy_from_slice(x);
                (case.reference)(&args).iter().zip(&w64).map(|(a, b)| a * b).sum()
            },
            &base[k],
            FD_STEP,
        );
        let ad = tape.grad(vars[k]).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; fd.len()]);
        grad_rel = grad_rel.max(r::rel_error(&ad, &fd, 1e-6));
    }
    CaseResult { forward_rel, grad_rel }
}

fn pad_of(p: Pad) -> Padding {
    match p {
        Pad::Causal => Padding::Causal,
        Pad::Same => Padding::Same,
        Pad::None => Padding::None,
    }
}

pub fn conv1d_case(rng: &mut ChaCha8Rng) -> Case {
    loop {
        let n = rng.random_range(1..=2);
        let cin = rng.random_range(1..=3);
        let cout = rng.random_range(1..=3);
        let k = rng.random_range(1..=4);
        let dil = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let l = rng.random_range(3..=12);
        let pad = [Pad::Causal, Pad::Same, Pad::None][rng.random_range(0..3)];
        let spec = r::ConvSpec {
            n,
            cin,
            h: 1,
            w: l,
            cout,
            kh: 1,
            kw: k,
            stride_h: 1,
            stride_w: stride,
            dil_h: 1,
            dil_w: dil,
            pad_h: Pad::None,
            pad_w: pad,
        };
        if spec.out_dims().is_none() {
            continue;
        }
        let inputs = vec![
            input(&[n, cin, l], uniform(rng, n * cin * l), true),
            input(&[cout, cin, k], uniform(rng, cout * cin * k), true),
            input(&[cout], uniform(rng, cout), true),
        ];
        return Case {
            inputs,
            build: Box::new(move |t, v| t.conv1d(v[0], v[1], v[2], dil, stride, pad_of(pad))),
            reference: Box::new(move |a| r::conv(&spec, &a[0], &a[1], &a[2])),
        };
    }
}

pub fn conv2d_case(rng: &mut ChaCha8Rng) -> Case {
    loop {
        let n = rng.random_range(1..=2);
        let cin = rng.random_range(1..=2);
        let cout = rng.random_range(1..=3);
        let kh = rng.random_range(1..=3);
        let kw = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let h = rng.random_range(2..=6);
        let w = rng.random_range(2..=6);
        let pad = [Pad::Same, Pad::None][rng.random_range(0..2)];
        let spec = r::ConvSpec {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride_h: stride,
            stride_w: stride,
            dil_h: 1,
            dil_w: 1,
            pad_h: pad,
            pad_w: pad,
        };
        if spec.out_dims().is_none() {
            continue;
        }
        let inputs = vec![
            input(&[n, cin, h, w], uniform(rng, n * cin * h * w), true),
            input(&[cout, cin, kh, kw], uniform(rng, cout * cin * kh * kw), true),
            input(&[cout], uniform(rng, cout), true),
        ];
        return Case {
            inputs,
            build: Box::new(move |t, v| t.conv2d(v[0], v[1], v[2], stride, pad_of(pad))),
            reference: Box::new(move |a| r::conv(&spec, &a[0], &a[1], &a[2])),
        };
    }
}

pub fn max_pool1d_case(rng: &mut ChaCha8Rng) -> Case {
    let outer = rng.random_range(1..=4);
    let window = rng.random_range(1..=3);
    let l = rng.random_range(window..=10);
    Case {
        inputs: vec![input(&[outer, l], well_separated(rng, outer * l), true)],
        build: Box::new(move |t, v| t.max_pool1d(v[0], window)),
        reference: Box::new(move |a| r::max_pool(&a[0], outer, 1, l, 1, window)),
    }
}

pub fn max_pool2d_case(rng: &mut ChaCha8Rng) -> Case {
    let outer = rng.random_range(1..=3);
    let (wh, ww) = (rng.random_range(1..=2), rng.random_range(1..=3));
    let (h, w) = (rng.random_range(wh..=6), rng.random_range(ww..=6));
    Case {
        inputs: vec![input(&[outer, h, w], well_separated(rng, outer * h * w), true)],
        build: Box::new(move |t, v| t.max_pool2d(v[0], (wh, ww))),
        reference: Box::new(move |a| r::max_pool(&a[0], outer, h, w, wh, ww)),
    }
}

pub fn batch_norm_train_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(2..=4);
    let c = rng.random_range(1..=3);
    // at least four values per channel
    let inner = rng.random_range(4usize.div_ceil(n)..=5);
    Case {
        inputs: vec![
            input(&[n, c, inner], uniform(rng, n * c * inner), true),
            input(&[c], uniform(rng, c), true),
            input(&[c], uniform(rng, c), true),
        ],
        build: Box::new(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
        reference: Box::new(move |a| r::batch_norm_train(&a[0], n, c, inner, &a[1], &a[2], 1e-5)),
    }
}

pub fn batch_norm_eval_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..=3);
    let c = rng.random_range(1..=3);
    let inner = rng.random_range(1..=5);
    let mean = uniform(rng, c);
    let var: Vec<f32> = (0..c).map(|_| rng.random_range(0.2f32..2.0)).collect();
    let (m64, v64) = (to_f64(&mean), to_f64(&var));
    Case {
        inputs: vec![
            input(&[n, c, inner], uniform(rng, n * c * inner), true),
            input(&[c], uniform(rng, c), true),
            input(&[c], uniform(rng, c), true),
        ],
        build: Box::new(move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)),
        reference: Box::new(move |a| r::batch_norm_eval(&a[0], c, inner, &a[1], &a[2], &m64, &v64, 1e-5)),
    }
}

pub fn dense_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..=4);
    let fin = rng.random_range(1..=6);
    let fout = rng.random_range(1..=5);
    Case {
        inputs: vec![
            input(&[n, fin], uniform(rng, n * fin), true),
            input(&[fout, fin], uniform(rng, fout * fin), true),
            input(&[fout], uniform(rng, fout), true),
        ],
        build: Box::new(|t, v| t.dense(v[0], v[1], v[2])),
        reference: Box::new(move |a| r::dense(&a[0], n, fin, &a[1], &a[2])),
    }
}

pub fn relu_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..=30);
    Case {
        inputs: vec![input(&[n], away_from_zero(rng, n), true)],
        build: Box::new(|t, v| Ok(t.relu(v[0]))),
        reference: Box::new(|a| r::relu(&a[0])),
    }
}

/// Dropout with a frozen mask is an elementwise product by a constant.
pub fn dropout_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..=30);
    let rate = rng.random_range(0.0f32..0.9);
    let seed = rng.random::<u64>();
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Vec<f64> = (0..n)
        .map(|_| if mask_rng.random::<f32>() < rate { 0.0 } else { (1.0 / (1.0 - rate)) as f64 })
        .collect();
    Case {
        inputs: vec![input(&[n], uniform(rng, n), true)],
        build: Box::new(move |t, v| {
            let mut mr = ChaCha8Rng::seed_from_u64(seed);
            t.dropout(v[0], rate, ndnet::Mode::Train, &mut mr)
        }),
        reference: Box::new(move |a| a[0].iter().zip(&mask).map(|(x, m)| x * m).collect()),
    }
}

pub fn add_case(rng: &mut ChaCha8Rng) -> Case {
    let n = rng.random_range(1..=20);
    Case {
        inputs: vec![input(&[n], uniform(rng, n), true), input(&[n], uniform(rng, n), true)],
        build: Box::new(|t, v| t.add(v[0], v[1])),
        reference: Box::new(|a| a[0].iter().zip(&a[1]).map(|(x, y)| x + y).collect()),
    }
}

pub fn global_avg_pool_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, c, h, w) = (
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    );
    Case {
        inputs: vec![input(&[n, c, h, w], uniform(rng, n * c * h * w), true)],
        build: Box::new(|t, v| t.global_avg_pool(v[0])),
        reference: Box::new(move |a| r::mean_over_inner(&a[0], h * w)),
    }
}

pub fn select_time_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, c, l) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=8));
    let at = rng.random_range(0..l);
    Case {
        inputs: vec![input(&[n, c, l], uniform(rng, n * c * l), true)],
        build: Box::new(move |t, v| t.select_time(v[0], at)),
        reference: Box::new(move |a| a[0].chunks(l).map(|row| row[at]).collect()),
    }
}

pub fn planes_to_sequence_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, ch, rows, cols) = (
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    );
    Case {
        inputs: vec![input(&[n, ch, rows, cols], uniform(rng, n * ch * rows * cols), true)],
        build: Box::new(|t, v| t.planes_to_sequence(v[0])),
        reference: Box::new(move |a| {
            let mut out = Vec::new();
            for s in 0..n {
                for c in 0..ch {
                    for col in 0..cols {
                        for row in 0..rows {
                            out.push(a[0][((s * ch + c) * rows + row) * cols + col]);
                        }
                    }
                }
            }
            out
        }),
    }
}

pub fn concat_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, fa, fb) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
    Case {
        inputs: vec![
            input(&[n, fa], uniform(rng, n * fa), true),
            input(&[n, fb], uniform(rng, n * fb), true),
        ],
        build: Box::new(|t, v| t.concat(v[0], v[1])),
        reference: Box::new(move |a| {
            let mut out = Vec::new();
            for i in 0..n {
                out.extend_from_slice(&a[0][i * fa..(i + 1) * fa]);
                out.extend_from_slice(&a[1][i * fb..(i + 1) * fb]);
            }
            out
        }),
    }
}

pub fn column_affine_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, f) = (rng.random_range(1..=4), rng.random_range(1..=3));
    let scale = uniform(rng, f);
    let shift = uniform(rng, f);
    let (s64, h64) = (to_f64(&scale), to_f64(&shift));
    Case {
        inputs: vec![input(&[n, f], uniform(rng, n * f), true)],
        build: Box::new(move |t, v| t.column_affine(v[0], &scale, &shift)),
        reference: Box::new(move |a| a[0].iter().enumerate().map(|(i, x)| x * s64[i % f] + h64[i % f]).collect()),
    }
}

pub fn loss_case(rng: &mut ChaCha8Rng, kind: LossKind) -> Case {
    let n = rng.random_range(1..=10);
    let pred = uniform(rng, n);
    // residuals bounded away from zero keep |·| differentiable within ±h
    let resid = away_from_zero(rng, n);
    let target: Vec<f32> = pred.iter().zip(&resid).map(|(p, d)| p - d).collect();
    let t64 = to_f64(&target);
    Case {
        inputs: vec![input(&[n], pred, true)],
        build: Box::new(move |t, v| t.loss(v[0], &target, kind)),
        reference: Box::new(move |a| {
            vec![match kind {
                LossKind::Mse => r::mse(&a[0], &t64),
                LossKind::Mae => r::mae(&a[0], &t64),
            }]
        }),
    }
}

/// conv1d(causal) → relu → dense → MSE, with every tensor trainable.
pub fn composite_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, cin, l, cout, k) = (2, 2, 6, 3, 3);
    let fin = cout * l;
    let spec = r::ConvSpec {
        n,
        cin,
        h: 1,
        w: l,
        cout,
        kh: 1,
        kw: k,
        stride_h: 1,
        stride_w: 1,
        dil_h: 1,
        dil_w: 2,
        pad_h: Pad::None,
        pad_w: Pad::Causal,
    };
    loop {
        let x = uniform(rng, n * cin * l);
        let cw = uniform(rng, cout * cin * k);
        let cb = uniform(rng, cout);
        // reject draws with a pre-activation inside the finite-difference step
        let pre = r::conv(&spec, &to_f64(&x), &to_f64(&cw), &to_f64(&cb));
        if pre.iter().any(|v| v.abs() < 0.02) {
            continue;
        }
        let dw = uniform(rng, fin);
        let db = uniform(rng, 1);
        let target: Vec<f32> = uniform(rng, n);
        let t64 = to_f64(&target);
        let spec2 = spec;
        return Case {
            inputs: vec![
                input(&[n, cin, l], x, true),
                input(&[cout, cin, k], cw, true),
                input(&[cout], cb, true),
                input(&[1, fin], dw, true),
                input(&[1], db, true),
            ],
            build: Box::new(move |t, v| {
                let c = t.conv1d(v[0], v[1], v[2], 2, 1, Padding::Causal)?;
                let a = t.relu(c);
                let flat = t.reshape(a, vec![n, fin])?;
                let p = t.dense(flat, v[3], v[4])?;
                t.loss(p, &target, LossKind::Mse)
            }),
            reference: Box::new(move |a| {
                let c = r::conv(&spec2, &a[0], &a[1], &a[2]);
                let h = r::relu(&c);
                let p = r::dense(&h, n, fin, &a[3], &a[4]);
                vec![r::mse(&p, &t64)]
            }),
        };
    }
}

type CaseGen = fn(&mut ChaCha8Rng) -> Case;

pub fn layer_generators() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("conv1d", conv1d_case),
        ("conv2d", conv2d_case),
        ("max_pool1d", max_pool1d_case),
        ("max_pool2d", max_pool2d_case),
        ("batch_norm_train", batch_norm_train_case),
        ("batch_norm_eval", batch_norm_eval_case),
        ("dense", dense_case),
        ("relu", relu_case),
        ("dropout", dropout_case),
        ("add", add_case),
        ("global_avg_pool", global_avg_pool_case),
        ("select_time", select_time_case),
        ("planes_to_sequence", planes_to_sequence_case),
        ("concat", concat_case),
        ("column_affine", column_affine_case),
        ("mse", |r| loss_case(r, LossKind::Mse)),
        ("mae", |r| loss_case(r, LossKind::Mae)),
        ("conv_relu_dense_mse", composite_case),
    ]
}

/// Runs `cases_per_layer` random cases for every layer type.
pub fn run_suite(cases_per_layer: usize, seed: u64) -> Vec<LayerReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layer_generators()
        .into_iter()
        .map(|(layer, generate)| {
            let mut report = LayerReport {
                layer,
                cases: 0,
                worst_forward_rel: 0.0,
                worst_grad_rel: 0.0,
            };
            for _ in 0..cases_per_layer {
                let case = generate(&mut rng);
                let res = check(&case, &mut rng);
                report.cases += 1;
                report.worst_forward_rel = report.worst_forward_rel.max(res.forward_rel);
                report.worst_grad_rel = report.worst_grad_rel.max(res.grad_rel);
            }
            report
        })
        .collect()
}
