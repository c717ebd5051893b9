//! Finite-difference gradient checking for op tests.

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Arr, Tape, Tensor};

pub fn rand_arr(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Arr {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Scalar objective: weighted sum of the op output with fixed weights, so we
/// exercise every output element with distinct sensitivities.
fn weighted_loss<'t>(out: Tensor<'t>, seed: u64) -> Tensor<'t> {
    let w = rand_arr(out.value().shape(), seed, 0.1, 1.0);
    let wt = out.tape.constant(w);
    out.mul(&wt).sum_all()
}

fn max_rel_err(analytic: &Arr, numeric: &Arr) -> f32 {
    let mut worst = 0.0f32;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        // the floor turns the check absolute for tiny entries, where central
        // differences in f32 cannot resolve a relative comparison
        let denom = a.abs().max(n.abs()).max(1e-2);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

fn numeric_grad(
    arrs: &mut [Arr],
    which: usize,
    h: f32,
    f: &dyn Fn(&[Arr]) -> f32,
) -> Arr {
    let mut g = Arr::zeros(arrs[which].raw_dim());
    for i in 0..arrs[which].len() {
        let orig = arrs[which].as_slice().unwrap()[i];
        arrs[which].as_slice_mut().unwrap()[i] = orig + h;
        let fp = f(arrs);
        arrs[which].as_slice_mut().unwrap()[i] = orig - h;
        let fm = f(arrs);
        arrs[which].as_slice_mut().unwrap()[i] = orig;
        g.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

fn check_n(
    inputs: &[Arr],
    build: &dyn for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Tensor<'t>,
    h: f32,
) -> f32 {
    let loss_seed = 997;
    let eval = |arrs: &[Arr]| -> f32 {
        let tape = Tape::new();
        let ts: Vec<Tensor> = arrs.iter().map(|a| tape.leaf(a.clone())).collect();
        let out = build(&tape, &ts);
        weighted_loss(out, loss_seed).scalar()
    };

    let tape = Tape::new();
    let ts: Vec<Tensor> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = build(&tape, &ts);
    let loss = weighted_loss(out, loss_seed);
    let grads = tape.backward(loss);

    let mut arrs: Vec<Arr> = inputs.to_vec();
    let mut worst = 0.0f32;
    for which in 0..inputs.len() {
        let analytic = grads
            .get(ts[which])
            .cloned()
            .unwrap_or_else(|| Arr::zeros(inputs[which].raw_dim()));
        let numeric = numeric_grad(&mut arrs, which, h, &eval);
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

pub fn check_unary(
    a: &Arr,
    f: impl for<'t> Fn(Tensor<'t>) -> Tensor<'t>,
    h: f32,
) -> f32 {
    check_n(&[a.clone()], &|_tape, ts| f(ts[0]), h)
}

pub fn check_binary(
    a: &Arr,
    b: &Arr,
    f: impl for<'t> Fn(Tensor<'t>, Tensor<'t>) -> Tensor<'t>,
    h: f32,
) -> f32 {
    check_n(&[a.clone(), b.clone()], &|_tape, ts| f(ts[0], ts[1]), h)
}

pub fn check_ternary(
    a: &Arr,
    b: &Arr,
    c: &Arr,
    f: impl for<'t> Fn(Tensor<'t>, Tensor<'t>, Tensor<'t>) -> Tensor<'t>,
    h: f32,
) -> f32 {
    check_n(
        &[a.clone(), b.clone(), c.clone()],
        &|_tape, ts| f(ts[0], ts[1], ts[2]),
        h,
    )
}
