//! Reverse-mode gradients against central differences for each primitive.

use cogcas_autodiff::{finite_diff_gradient, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POINTS: usize = 100;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

/// Contract `v` with fixed, position-dependent weights so the check covers
/// the full Jacobian rather than just its column sums.
fn weighted_sum(tape: &mut Tape, v: Var) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect();
    let w = tape.input(Tensor::new(shape, w).unwrap());
    let p = tape.mul(v, w).unwrap();
    tape.sum(p).unwrap()
}

fn leaf(tape: &mut Tape, theta: &[f64], offset: usize, shape: &[usize]) -> Var {
    let n: usize = shape.iter().product();
    tape.param(Tensor::new(shape.to_vec(), theta[offset..offset + n].to_vec()).unwrap(), offset)
}

fn gradcheck(
    name: &str,
    seed: u64,
    sample: impl Fn(&mut ChaCha8Rng) -> Vec<f64>,
    build: impl Fn(&mut Tape, &[f64]) -> Var,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let theta = sample(&mut rng);
        let mut tape = Tape::new();
        let out = build(&mut tape, &theta);
        let ad = tape.backward(out, None).unwrap().param_vector(theta.len());
        let fd = finite_diff_gradient(
            |t| {
                let mut tape = Tape::new();
                let out = build(&mut tape, t);
                tape.value(out).item()
            },
            &theta,
            STEP,
        )
        .unwrap();
        let diff: f64 = ad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&ad).max(norm(&fd)).max(1e-8);
        worst = worst.max(diff / scale);
    }
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn uniform(n: usize, lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng) -> Vec<f64> {
    move |rng| (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero, either sign.
fn off_zero(n: usize) -> impl Fn(&mut ChaCha8Rng) -> Vec<f64> {
    move |rng| {
        (0..n)
            .map(|_| {
                let m = rng.gen_range(0.05..2.0);
                if rng.gen_bool(0.5) { m } else { -m }
            })
            .collect()
    }
}

#[test]
fn matmul() {
    gradcheck("matmul", 1, uniform(6 + 12, -1.0, 1.0), |t, th| {
        let a = leaf(t, th, 0, &[2, 3]);
        let b = leaf(t, th, 6, &[3, 4]);
        let c = t.matmul(a, b).unwrap();
        weighted_sum(t, c)
    });
}

#[test]
fn conv2d_dilated() {
    // x: 2×5×5, w: 3×2×3×3, b: 3
    let n = 50 + 54 + 3;
    for dilation in [1, 2] {
        gradcheck("conv2d", 2 + dilation as u64, uniform(n, -1.0, 1.0), move |t, th| {
            let x = leaf(t, th, 0, &[2, 5, 5]);
            let w = leaf(t, th, 50, &[3, 2, 3, 3]);
            let b = leaf(t, th, 104, &[3]);
            let y = t.conv2d(x, w, b, dilation).unwrap();
            weighted_sum(t, y)
        });
    }
}

#[test]
fn conv2d_pointwise() {
    gradcheck("conv2d 1x1", 4, uniform(18 + 6 + 2, -1.0, 1.0), |t, th| {
        let x = leaf(t, th, 0, &[2, 3, 3]);
        let w = leaf(t, th, 18, &[2, 2, 1, 1]);
        let b = leaf(t, th, 22, &[2]);
        let y = t.conv2d(x, w, b, 1).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn add_sub_mul_div() {
    gradcheck("add", 5, uniform(8, -1.0, 1.0), |t, th| {
        let a = leaf(t, th, 0, &[4]);
        let b = leaf(t, th, 4, &[4]);
        let y = t.add(a, b).unwrap();
        weighted_sum(t, y)
    });
    gradcheck("sub", 6, uniform(8, -1.0, 1.0), |t, th| {
        let a = leaf(t, th, 0, &[4]);
        let b = leaf(t, th, 4, &[4]);
        let y = t.sub(a, b).unwrap();
        weighted_sum(t, y)
    });
    gradcheck("mul", 7, uniform(8, -1.0, 1.0), |t, th| {
        let a = leaf(t, th, 0, &[4]);
        let b = leaf(t, th, 4, &[4]);
        let y = t.mul(a, b).unwrap();
        weighted_sum(t, y)
    });
    gradcheck("div", 8, off_zero(8), |t, th| {
        let a = leaf(t, th, 0, &[4]);
        let b = leaf(t, th, 4, &[4]);
        let y = t.div(a, b).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn scalar_affine() {
    gradcheck("scale/shift", 9, uniform(5, -2.0, 2.0), |t, th| {
        let a = leaf(t, th, 0, &[5]);
        let s = t.scale(a, -1.7).unwrap();
        let y = t.rsub(0.3, s).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn relu() {
    gradcheck("relu", 10, off_zero(9), |t, th| {
        let a = leaf(t, th, 0, &[9]);
        let y = t.relu(a).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn leaky_relu() {
    gradcheck("leaky_relu", 30, off_zero(9), |t, th| {
        let a = leaf(t, th, 0, &[9]);
        let y = t.leaky_relu(a, 0.1).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn sigmoid() {
    gradcheck("sigmoid", 11, uniform(9, -6.0, 6.0), |t, th| {
        let a = leaf(t, th, 0, &[9]);
        let y = t.sigmoid(a).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn log() {
    gradcheck("log", 12, uniform(6, 0.05, 3.0), |t, th| {
        let a = leaf(t, th, 0, &[6]);
        let y = t.log(a).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn powf() {
    gradcheck("powf int", 13, uniform(6, -2.0, 2.0), |t, th| {
        let a = leaf(t, th, 0, &[6]);
        let y = t.powf(a, 2.0).unwrap();
        weighted_sum(t, y)
    });
    gradcheck("powf frac", 14, uniform(6, 0.1, 2.0), |t, th| {
        let a = leaf(t, th, 0, &[6]);
        let y = t.powf(a, 1.5).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn clamp_interior() {
    gradcheck("clamp", 15, uniform(6, -0.95, 0.95), |t, th| {
        let a = leaf(t, th, 0, &[6]);
        let y = t.clamp(a, -1.0, 1.0).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn softmax_over_channels() {
    gradcheck("softmax", 16, uniform(3 * 2 * 2, -3.0, 3.0), |t, th| {
        let a = leaf(t, th, 0, &[3, 2, 2]);
        let y = t.softmax(a).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn log_softmax_over_channels() {
    gradcheck("log_softmax", 31, uniform(2 * 3 * 2, -8.0, 8.0), |t, th| {
        let a = leaf(t, th, 0, &[2, 3, 2]);
        let y = t.log_softmax(a).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn reductions() {
    gradcheck("sum", 17, uniform(7, -1.0, 1.0), |t, th| {
        let a = leaf(t, th, 0, &[7]);
        let sq = t.mul(a, a).unwrap();
        t.sum(sq).unwrap()
    });
    gradcheck("mean", 18, uniform(7, -1.0, 1.0), |t, th| {
        let a = leaf(t, th, 0, &[7]);
        let sq = t.mul(a, a).unwrap();
        t.mean(sq).unwrap()
    });
    gradcheck("mean_spatial", 19, uniform(2 * 3 * 4, -1.0, 1.0), |t, th| {
        let a = leaf(t, th, 0, &[2, 3, 4]);
        let y = t.mean_spatial(a).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn upsample_bilinear() {
    for factor in [2, 4] {
        gradcheck("upsample", 20 + factor as u64, uniform(2 * 3 * 3, -1.0, 1.0), move |t, th| {
            let a = leaf(t, th, 0, &[2, 3, 3]);
            let y = t.upsample_bilinear(a, factor).unwrap();
            weighted_sum(t, y)
        });
    }
}

#[test]
fn avg_pool2() {
    gradcheck("avg_pool2", 30, uniform(2 * 4 * 4, -1.0, 1.0), |t, th| {
        let a = leaf(t, th, 0, &[2, 4, 4]);
        let y = t.avg_pool2(a).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn channel_concat_reshape() {
    gradcheck("channel/concat/reshape", 31, uniform(3 * 2 * 2 + 4, -1.0, 1.0), |t, th| {
        let a = leaf(t, th, 0, &[3, 2, 2]);
        let b = leaf(t, th, 12, &[4]);
        let c1 = t.channel(a, 1).unwrap();
        let c1 = t.reshape(c1, &[1, 2, 2]).unwrap();
        let b = t.reshape(b, &[1, 2, 2]).unwrap();
        let cat = t.concat(&[a, c1, b]).unwrap();
        let sq = t.mul(cat, cat).unwrap();
        weighted_sum(t, sq)
    });
}

#[test]
fn shared_leaf_accumulates() {
    // a is used on several paths; adjoints must add.
    gradcheck("fan-out", 32, uniform(4, 0.2, 1.5), |t, th| {
        let a = leaf(t, th, 0, &[4]);
        let s = t.sigmoid(a).unwrap();
        let l = t.log(a).unwrap();
        let m = t.mul(s, l).unwrap();
        let y = t.add(m, a).unwrap();
        weighted_sum(t, y)
    });
}

#[test]
fn head_shaped_composite() {
    // conv → relu → dilated conv → 1×1 → upsample → softmax → log, the
    // shape of a small segmentation head with a cross-entropy style readout.
    let sizes = [2 * 4 * 4, 2 * 2 * 9, 2, 2 * 2 * 9, 2, 2 * 2, 2];
    let total: usize = sizes.iter().sum();
    gradcheck("head", 33, off_zero(total), |t, th| {
        let x = leaf(t, th, 0, &[2, 4, 4]);
        let w1 = leaf(t, th, 32, &[2, 2, 3, 3]);
        let b1 = leaf(t, th, 68, &[2]);
        let w2 = leaf(t, th, 70, &[2, 2, 3, 3]);
        let b2 = leaf(t, th, 106, &[2]);
        let w3 = leaf(t, th, 108, &[2, 2, 1, 1]);
        let b3 = leaf(t, th, 112, &[2]);
        let h = t.conv2d(x, w1, b1, 1).unwrap();
        let h = t.sigmoid(h).unwrap();
        let h = t.conv2d(h, w2, b2, 2).unwrap();
        let h = t.sigmoid(h).unwrap();
        let h = t.conv2d(h, w3, b3, 1).unwrap();
        let h = t.upsample_bilinear(h, 2).unwrap();
        let p = t.softmax(h).unwrap();
        let l = t.log(p).unwrap();
        weighted_sum(t, l)
    });
}
