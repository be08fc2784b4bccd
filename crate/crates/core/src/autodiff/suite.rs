//! Per-operation gradient checks on small random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    finite_difference_check, mixed_precision_check, Element, GradCheckOptions, GradCheckReport, Tape, Tensor, Var,
};
use crate::error::Result;

/// Uniform values in `[lo, hi)`, representable in f32, kept at least `gap`
/// away from each listed kink so that central differences never straddle one.
fn sample(shape: &[usize], lo: f64, hi: f64, kinks: &[f64], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let gap = 0.05;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..hi) as f32;
            if kinks.iter().all(|k| (v as f64 - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape")
}

/// `sum(y * r)` for a fixed random `r` scaled by `1/sqrt(n)`, keeping the loss O(1).
fn project<'t, T: Element>(y: Var<'t, T>, seed: u64) -> Result<Var<'t, T>> {
    let shape = y.shape();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let scale = 1.0 / (n as f64).sqrt();
    let r = sample(&shape, -scale, scale, &[], &mut rng);
    let r = y.tape().constant(r.cast());
    y.mul(r)?.sum_all()
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Relu,
    Sigmoid,
    Add,
    Sub,
    Mul,
    Div,
    Square,
    Sqrt,
    Scale,
    ClampMax,
    SumAll,
    MeanAll,
    Concat,
    Conv { stride: usize, pad: usize },
    ConvTranspose,
}

fn apply<'t, T: Element>(op: Op, p: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    match op {
        Op::Relu => p[0].relu(),
        Op::Sigmoid => p[0].sigmoid(),
        Op::Add => p[0].add(p[1]),
        Op::Sub => p[0].sub(p[1]),
        Op::Mul => p[0].mul(p[1]),
        Op::Div => p[0].div(p[1]),
        Op::Square => p[0].square(),
        Op::Sqrt => p[0].sqrt(),
        Op::Scale => p[0].scale(-1.7),
        Op::ClampMax => p[0].clamp_max(1.0),
        Op::SumAll => p[0].sum_all()?.square(),
        Op::MeanAll => p[0].mean_all()?.square(),
        Op::Concat => p[0].concat_channels(p[1]),
        Op::Conv { stride, pad } => p[0].conv3d(p[1], p[2], stride, pad),
        Op::ConvTranspose => p[0].conv_transpose3d(p[1], p[2], 2, 0),
    }
}

fn cases(seed: u64) -> Vec<(&'static str, Op, Vec<Tensor<f32>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let vol = [1, 2, 5, 5, 5];
    let mut out = vec![
        ("relu", Op::Relu, vec![sample(&vol, -1.0, 1.0, &[0.0], rng)]),
        ("sigmoid", Op::Sigmoid, vec![sample(&vol, -3.0, 3.0, &[], rng)]),
    ];
    for (name, op) in [("add", Op::Add), ("sub", Op::Sub), ("mul", Op::Mul)] {
        out.push((name, op, vec![sample(&vol, -1.0, 1.0, &[], rng), sample(&vol, -1.0, 1.0, &[], rng)]));
    }
    out.push((
        "mul_scalar_broadcast",
        Op::Mul,
        vec![sample(&vol, -1.0, 1.0, &[], rng), sample(&[], 0.5, 1.5, &[], rng)],
    ));
    out.push(("div", Op::Div, vec![sample(&vol, -1.0, 1.0, &[], rng), sample(&vol, 0.5, 2.0, &[], rng)]));
    out.push(("square", Op::Square, vec![sample(&vol, -1.0, 1.0, &[], rng)]));
    out.push(("sqrt", Op::Sqrt, vec![sample(&vol, 0.5, 2.0, &[], rng)]));
    out.push(("scale", Op::Scale, vec![sample(&vol, -1.0, 1.0, &[], rng)]));
    out.push(("clamp_max", Op::ClampMax, vec![sample(&vol, 0.0, 2.0, &[1.0], rng)]));
    out.push(("sum_all", Op::SumAll, vec![sample(&vol, -1.0, 1.0, &[], rng)]));
    out.push(("mean_all", Op::MeanAll, vec![sample(&vol, -1.0, 1.0, &[], rng)]));
    out.push((
        "concat_channels",
        Op::Concat,
        vec![sample(&vol, -1.0, 1.0, &[], rng), sample(&[1, 3, 5, 5, 5], -1.0, 1.0, &[], rng)],
    ));
    for (name, stride) in [("conv3d_s1", 1), ("conv3d_s2", 2)] {
        out.push((
            name,
            Op::Conv { stride, pad: 1 },
            vec![
                sample(&[1, 2, 6, 6, 6], -1.0, 1.0, &[], rng),
                sample(&[3, 2, 3, 3, 3], -0.5, 0.5, &[], rng),
                sample(&[3], -0.5, 0.5, &[], rng),
            ],
        ));
    }
    out.push((
        "conv_transpose3d",
        Op::ConvTranspose,
        vec![
            sample(&[1, 3, 3, 3, 3], -1.0, 1.0, &[], rng),
            sample(&[3, 2, 2, 2, 2], -0.5, 0.5, &[], rng),
            sample(&[2], -0.5, 0.5, &[], rng),
        ],
    ));
    out
}

pub(crate) type OpCheck = (&'static str, GradCheckReport);

/// Runs the check for every differentiable op kind, entirely in `T`.
pub fn op_suite<T: Element>(opts: &GradCheckOptions, seed: u64) -> Result<Vec<OpCheck>> {
    cases(seed)
        .into_iter()
        .map(|(name, op, params)| {
            let params: Vec<Tensor<T>> = params.iter().map(|p| p.cast()).collect();
            let report = finite_difference_check(|_: &Tape<T>, p: &[Var<'_, T>]| project(apply(op, p)?, seed), &params, opts)?;
            Ok((name, report))
        })
        .collect()
}

/// Runs the check for every differentiable op kind with f32 gradients and
/// f64 central differences.
pub fn op_suite_mixed(opts: &GradCheckOptions, seed: u64) -> Result<Vec<OpCheck>> {
    cases(seed)
        .into_iter()
        .map(|(name, op, params)| {
            let report = mixed_precision_check(
                |_: &Tape<f32>, p: &[Var<'_, f32>]| project(apply(op, p)?, seed),
                |_: &Tape<f64>, p: &[Var<'_, f64>]| project(apply(op, p)?, seed),
                &params,
                opts,
            )?;
            Ok((name, report))
        })
        .collect()
}
