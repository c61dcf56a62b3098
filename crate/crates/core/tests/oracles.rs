mod common;

use common::{central_diff, conv, maxpool2, rel_err, ssim_sliding, upsample2, Img};
use nlt_core::metrics::ssim;
use nlt_core::{GradientTape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Distinct values at least 0.05 apart and away from zero, so no
/// perturbation of size 1e-3 crosses a relu or max-pool kink.
fn spaced_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.05 + 0.025).collect();
    v.shuffle(rng);
    v
}

fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.iter().map(|&v| v as f32).collect()).unwrap()
}

/// f32-rounded copy so both sides see identical inputs.
fn round32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

#[test]
fn conv_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..20 {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=4);
        let o = rng.random_range(1..=5);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=k / 2 + 1);
        let h = rng.random_range(k..=11);
        let w = rng.random_range(k..=11);
        let x = round32(&rand_vec(&mut rng, n * c * h * w));
        let wt = round32(&rand_vec(&mut rng, o * c * k * k));
        let b = round32(&rand_vec(&mut rng, o));

        let mut tape = GradientTape::new();
        let xv = tape.leaf(tensor(&[n, c, h, w], &x));
        let wv = tape.leaf(tensor(&[o, c, k, k], &wt));
        let bv = tape.leaf(tensor(&[o], &b));
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        let got = tape.value(y).clone();

        let per = c * h * w;
        let mut want = Vec::new();
        for i in 0..n {
            let img = Img { c, h, w, data: x[i * per..(i + 1) * per].to_vec() };
            let r = conv(&img, &wt, &b, o, k, stride, pad);
            assert_eq!(&got.shape()[1..], &[o, r.h, r.w], "case {case}");
            want.extend(r.data);
        }
        for (j, (&g, &e)) in got.data().iter().zip(&want).enumerate() {
            assert!((g as f64 - e).abs() <= 1e-6 * e.abs().max(1.0), "case {case} elem {j}: {g} vs {e}");
        }
    }
}

#[test]
fn ssim_matches_sliding_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (h, w) in [(11, 11), (16, 20), (24, 17)] {
        let gt: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|&v| (v + rng.random_range(-0.2..0.2f64)).max(0.0)).collect();
        let (gt, pred) = (round32(&gt), round32(&pred));
        let got = ssim(&tensor(&[h, w], &pred), &tensor(&[h, w], &gt)).unwrap();
        let peak = gt.iter().cloned().fold(0.0, f64::max);
        let norm = |v: &[f64]| v.iter().map(|x| x / peak).collect::<Vec<_>>();
        let want = ssim_sliding(&norm(&pred), &norm(&gt), h, w, 1.0);
        assert!((got - want).abs() < 1e-9, "{h}x{w}: {got} vs {want}");
    }
}

/// Checks `d/dx 0.5 ||op(x) + r||^2` against a central difference of the
/// f64 reference.
fn gradcheck_unary(
    shape: [usize; 4],
    seed: u64,
    build: impl Fn(&mut GradientTape, nlt_core::Var) -> nlt_core::Var,
    reference: impl Fn(&Img) -> Img,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [_, c, h, w] = shape;
    let x = round32(&spaced_vec(&mut rng, c * h * w));
    let probe_len = reference(&Img { c, h, w, data: x.clone() }).data.len();
    let r = round32(&rand_vec(&mut rng, probe_len));

    let mut tape = GradientTape::new();
    let xv = tape.leaf(tensor(&shape, &x).with_grad());
    let y = build(&mut tape, xv);
    let out_shape = tape.value(y).shape().to_vec();
    let rv = tape.leaf(tensor(&out_shape, &r));
    let zero = tape.leaf(Tensor::zeros(&out_shape));
    let shifted = tape.add(y, rv).unwrap();
    let loss = tape.mse_loss(shifted, zero, 1).unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(xv).unwrap().to_vec();

    let f = |xs: &[f64]| -> f64 {
        let y = reference(&Img { c, h, w, data: xs.to_vec() });
        y.data.iter().zip(&r).map(|(a, b)| (a + b).powi(2)).sum::<f64>() / 2.0
    };
    for i in 0..x.len() {
        let numeric = central_diff(1e-3, |d| {
            let mut xs = x.clone();
            xs[i] += d;
            f(&xs)
        });
        let e = rel_err(grad[i] as f64, numeric);
        assert!(e <= 1e-3, "elem {i}: analytic {} numeric {numeric} rel {e}", grad[i]);
    }
}

#[test]
fn gradcheck_relu() {
    gradcheck_unary([1, 2, 5, 5], 1, |t, x| t.relu(x), |x| common::relu(x.clone()));
}

#[test]
fn gradcheck_max_pool() {
    gradcheck_unary([1, 2, 6, 4], 2, |t, x| t.max_pool2(x).unwrap(), maxpool2);
}

#[test]
fn gradcheck_upsample() {
    gradcheck_unary([1, 2, 3, 4], 3, |t, x| t.upsample_nearest(x, 2).unwrap(), upsample2);
}

#[test]
fn gradcheck_scale() {
    gradcheck_unary([1, 1, 4, 4], 4, |t, x| t.scale(x, -0.37), |x| Img {
        data: x.data.iter().map(|v| v * -0.37).collect(),
        ..x.clone()
    });
}

#[test]
fn gradcheck_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = round32(&rand_vec(&mut rng, 12));
    let mut tape = GradientTape::new();
    let xv = tape.leaf(tensor(&[1, 3, 2, 2], &x).with_grad());
    let s = tape.sum(xv);
    let sq = tape.scale(s, 3.0);
    tape.backward(sq).unwrap();
    for &g in tape.grad(xv).unwrap() {
        let numeric = central_diff(1e-3, |d| 3.0 * (x.iter().sum::<f64>() + d));
        assert!(rel_err(g as f64, numeric) <= 1e-3);
    }
}

#[test]
fn gradcheck_conv_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (stride, pad, k) in [(1, 1, 3), (2, 0, 3), (1, 0, 1), (2, 2, 3)] {
        let (n, c, h, w, o) = (2, 2, 6, 5, 3);
        let x = round32(&rand_vec(&mut rng, n * c * h * w));
        let wt = round32(&rand_vec(&mut rng, o * c * k * k));
        let b = round32(&rand_vec(&mut rng, o));
        let reference = |x: &[f64], wt: &[f64], b: &[f64]| -> Vec<f64> {
            let per = c * h * w;
            (0..n)
                .flat_map(|i| conv(&Img { c, h, w, data: x[i * per..(i + 1) * per].to_vec() }, wt, b, o, k, stride, pad).data)
                .collect()
        };
        let out_len = reference(&x, &wt, &b).len();
        let r = round32(&rand_vec(&mut rng, out_len));

        let mut tape = GradientTape::new();
        let xv = tape.leaf(tensor(&[n, c, h, w], &x).with_grad());
        let wv = tape.leaf(tensor(&[o, c, k, k], &wt).with_grad());
        let bv = tape.leaf(tensor(&[o], &b).with_grad());
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        let shape = tape.value(y).shape().to_vec();
        let rv = tape.leaf(tensor(&shape, &r));
        let zero = tape.leaf(Tensor::zeros(&shape));
        let shifted = tape.add(y, rv).unwrap();
        let loss = tape.mse_loss(shifted, zero, n).unwrap();
        tape.backward(loss).unwrap();
        // loss = sum((y + r)^2) / (2n); numeric check uses the same function.
        let g = |x: &[f64], wt: &[f64], b: &[f64]| -> f64 {
            reference(x, wt, b).iter().zip(&r).map(|(y, r)| (y + r).powi(2)).sum::<f64>() / (2.0 * n as f64)
        };
        let check = |name: &str, base: &[f64], grad: &[f32], eval: &dyn Fn(&[f64]) -> f64| {
            for i in 0..base.len() {
                let numeric = central_diff(1e-3, |d| {
                    let mut v = base.to_vec();
                    v[i] += d;
                    eval(&v)
                });
                let e = rel_err(grad[i] as f64, numeric);
                assert!(e <= 1e-3, "{name}[{i}] s={stride} p={pad} k={k}: {} vs {numeric}", grad[i]);
            }
        };
        check("input", &x, tape.grad(xv).unwrap(), &|v| g(v, &wt, &b));
        check("weight", &wt, tape.grad(wv).unwrap(), &|v| g(&x, v, &b));
        check("bias", &b, tape.grad(bv).unwrap(), &|v| g(&x, &wt, v));
    }
}
