//! Tape gradients against f64 central differences of the shadow ops.

#![allow(dead_code)]

use cloakbench::models::{build_model, ArchitectureDescriptor};
use cloakbench::raster::Image;
use cloakbench::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::shadow::{self, T3};

pub const H: f64 = 1e-3;
pub const OP_TOL: f64 = 1e-4;
pub const CNN_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub points: usize,
    pub max_rel_err: f64,
}

impl OpReport {
    pub fn ok(&self, tol: f64, min_points: usize) -> bool {
        self.points >= min_points && self.max_rel_err < tol
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Values bounded away from zero so a step of `H` never crosses the kink.
fn rand_vec_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05f32..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Distinct values at least `0.01` apart, shuffled, so pooling windows
/// have a clear winner.
fn rand_distinct(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.01 - n as f32 * 0.005).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

fn f64s(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds `L = sum(op(inputs) * r)` on a tape, returns the analytic
/// gradient of every input, flattened and concatenated.
fn tape_grads(inputs: &[(Vec<usize>, Vec<f32>)], r: &[f32], op: impl Fn(&mut Tape, &[Var]) -> Var) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, d)| tape.leaf(Tensor::new(s.clone(), d.clone()).unwrap().with_requires_grad(true)))
        .collect();
    let y = op(&mut tape, &vars);
    let shape = tape.value(y).shape().to_vec();
    let rv = tape.constant(Tensor::new(shape, r.to_vec()).unwrap());
    let prod = tape.mul(y, rv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    vars.iter().flat_map(|&v| f64s(grads.get(v).unwrap().data())).collect()
}

/// Compares every coordinate of the concatenated inputs.
fn compare(
    name: &'static str,
    inputs: &[(Vec<usize>, Vec<f32>)],
    out_len: usize,
    rng: &mut ChaCha8Rng,
    tape_op: impl Fn(&mut Tape, &[Var]) -> Var,
    shadow_op: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    report: &mut OpReport,
) {
    let r = rand_vec(rng, out_len);
    let r64 = f64s(&r);
    let analytic = tape_grads(inputs, &r, tape_op);
    let sizes: Vec<usize> = inputs.iter().map(|(_, d)| d.len()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|(_, d)| f64s(d)).collect();
    let split = |x: &[f64]| {
        let mut parts = Vec::new();
        let mut at = 0;
        for &n in &sizes {
            parts.push(x[at..at + n].to_vec());
            at += n;
        }
        parts
    };
    let f = |x: &[f64]| dot(&shadow_op(&split(x)), &r64);
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = shadow::central_diff(f, &flat, i, H);
        let e = shadow::rel_err(a, numeric, FLOOR);
        report.max_rel_err = report.max_rel_err.max(e);
        report.points += 1;
    }
    debug_assert_eq!(report.op, name);
}

fn new_report(op: &'static str) -> OpReport {
    OpReport {
        op,
        points: 0,
        max_rel_err: 0.0,
    }
}

pub fn check_elementwise(seed: u64) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 60;
    let mut add = new_report("add");
    let mut mul = new_report("mul");
    let mut scale = new_report("scale");
    let mut relu = new_report("relu");
    for _ in 0..2 {
        let a = rand_vec(&mut rng, n);
        let b = rand_vec(&mut rng, n);
        let ins = vec![(vec![n], a.clone()), (vec![n], b.clone())];
        compare(
            "add",
            &ins,
            n,
            &mut rng,
            |t, v| t.add(v[0], v[1]).unwrap(),
            |x| x[0].iter().zip(&x[1]).map(|(p, q)| p + q).collect(),
            &mut add,
        );
        compare(
            "mul",
            &ins,
            n,
            &mut rng,
            |t, v| t.mul(v[0], v[1]).unwrap(),
            |x| x[0].iter().zip(&x[1]).map(|(p, q)| p * q).collect(),
            &mut mul,
        );
        let ins1 = vec![(vec![n], a)];
        compare(
            "scale",
            &ins1,
            n,
            &mut rng,
            |t, v| t.scale(v[0], -2.5).unwrap(),
            |x| x[0].iter().map(|p| p * -2.5).collect(),
            &mut scale,
        );
        let ins2 = vec![(vec![n], rand_vec_off_zero(&mut rng, n))];
        compare(
            "relu",
            &ins2,
            n,
            &mut rng,
            |t, v| t.relu(v[0]).unwrap(),
            |x| shadow::relu(&x[0]),
            &mut relu,
        );
    }
    vec![add, mul, scale, relu]
}

pub fn check_sum_and_reshape(seed: u64) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = new_report("sum");
    let mut reshape = new_report("reshape");
    let ins = vec![(vec![4, 5, 6], rand_vec(&mut rng, 120))];
    compare(
        "sum",
        &ins,
        1,
        &mut rng,
        |t, v| t.sum(v[0]).unwrap(),
        |x| vec![x[0].iter().sum()],
        &mut sum,
    );
    compare(
        "reshape",
        &ins,
        120,
        &mut rng,
        |t, v| t.flatten(v[0]).unwrap(),
        |x| x[0].clone(),
        &mut reshape,
    );
    vec![sum, reshape]
}

pub fn check_matmul_affine(seed: u64) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (5, 7, 4);
    let mut mm = new_report("matmul");
    let ins = vec![
        (vec![m, k], rand_vec(&mut rng, m * k)),
        (vec![k, n], rand_vec(&mut rng, k * n)),
    ];
    for _ in 0..2 {
        compare(
            "matmul",
            &ins,
            m * n,
            &mut rng,
            |t, v| t.matmul(v[0], v[1]).unwrap(),
            |x| shadow::matmul(&x[0], &x[1], m, k, n),
            &mut mm,
        );
    }
    let (inp, out) = (12, 6);
    let mut af = new_report("affine");
    for _ in 0..2 {
        let ins = vec![
            (vec![3, 2, 2], rand_vec(&mut rng, inp)),
            (vec![out, inp], rand_vec(&mut rng, out * inp)),
            (vec![out], rand_vec(&mut rng, out)),
        ];
        compare(
            "affine",
            &ins,
            out,
            &mut rng,
            |t, v| t.affine(v[0], v[1], Some(v[2])).unwrap(),
            |x| shadow::affine(&x[0], &x[1], Some(&x[2]), out),
            &mut af,
        );
    }
    vec![mm, af]
}

pub fn check_conv(seed: u64) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = new_report("conv2d");
    for &(c, h, o, k, stride, pad) in &[
        (2usize, 5usize, 3usize, 3usize, 1usize, 1usize),
        (3, 6, 2, 3, 2, 0),
        (1, 4, 2, 2, 1, 0),
    ] {
        let x = rand_vec(&mut rng, c * h * h);
        let w = rand_vec(&mut rng, o * c * k * k);
        let b = rand_vec(&mut rng, o);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ins = vec![(vec![c, h, h], x), (vec![o, c, k, k], w), (vec![o], b)];
        compare(
            "conv2d",
            &ins,
            o * oh * oh,
            &mut rng,
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap(),
            |x| {
                shadow::conv2d(
                    &T3 {
                        c,
                        h,
                        w: h,
                        v: x[0].clone(),
                    },
                    &x[1],
                    Some(&x[2]),
                    o,
                    k,
                    stride,
                    pad,
                )
                .v
            },
            &mut report,
        );
    }
    vec![report]
}

pub fn check_pool(seed: u64) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = new_report("max_pool2d");
    for &(c, h, k, s) in &[(2usize, 6usize, 2usize, 2usize), (3, 5, 3, 1)] {
        let ins = vec![(vec![c, h, h], rand_distinct(&mut rng, c * h * h))];
        let oh = (h - k) / s + 1;
        compare(
            "max_pool2d",
            &ins,
            c * oh * oh,
            &mut rng,
            |t, v| t.max_pool2d(v[0], k, s).unwrap(),
            |x| {
                shadow::max_pool(
                    &T3 {
                        c,
                        h,
                        w: h,
                        v: x[0].clone(),
                    },
                    k,
                    s,
                )
                .v
            },
            &mut report,
        );
    }
    vec![report]
}

pub fn check_softmax_ce(seed: u64) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sm = new_report("softmax");
    let mut ce = new_report("cross_entropy");
    for _ in 0..10 {
        let n = 12;
        let z: Vec<f32> = rand_vec(&mut rng, n).iter().map(|v| v * 3.0).collect();
        let ins = vec![(vec![n], z)];
        compare(
            "softmax",
            &ins,
            n,
            &mut rng,
            |t, v| t.softmax(v[0]).unwrap(),
            |x| shadow::softmax(&x[0]),
            &mut sm,
        );
        let label = rng.gen_range(0..n);
        compare(
            "cross_entropy",
            &ins,
            1,
            &mut rng,
            |t, v| t.cross_entropy(v[0], label).unwrap(),
            |x| vec![shadow::cross_entropy(&x[0], label)],
            &mut ce,
        );
    }
    vec![sm, ce]
}

pub fn check_all_ops(seed: u64) -> Vec<OpReport> {
    let mut out = Vec::new();
    out.extend(check_elementwise(seed));
    out.extend(check_sum_and_reshape(seed + 1));
    out.extend(check_matmul_affine(seed + 2));
    out.extend(check_conv(seed + 3));
    out.extend(check_pool(seed + 4));
    out.extend(check_softmax_ce(seed + 5));
    out
}

/// Input gradient of a stock CNN at `pixels` random pixels.
pub fn check_cnn(arch: &str, seed: u64, pixels: usize) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let desc = ArchitectureDescriptor::stock(arch, 10).unwrap();
    let model = build_model(&desc, seed).unwrap();
    let side = desc.input_size;
    let data: Vec<f32> = (0..side * side * 3).map(|_| rng.gen_range(0..256) as f32).collect();
    let img = Image::new(side, side, data).unwrap();
    let label = rng.gen_range(0..10);
    let analytic = model.loss_and_input_gradient(&img, label).unwrap().grad;
    let x = shadow::image_f64(&img);
    let f = |p: &[f64]| shadow::model_loss(&model, p, side, label);
    let mut report = new_report("cnn input gradient");
    for _ in 0..pixels {
        let i = rng.gen_range(0..x.len());
        let numeric = shadow::central_diff(f, &x, i, H);
        let a = f64::from(analytic.data()[i]);
        let scale = analytic.data().iter().fold(0.0f64, |m, &g| m.max(f64::from(g).abs()));
        let e = shadow::rel_err(a, numeric, scale * 1e-2);
        report.max_rel_err = report.max_rel_err.max(e);
        report.points += 1;
    }
    report
}
