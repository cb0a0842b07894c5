//! Quadratic task streams with known optima.

#![allow(dead_code)]

use cogcas_core::forgetting::QuadraticTask;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `BᵀB + 0.1 I` on the coordinates in `support`, zero elsewhere.
fn psd_on(rng: &mut ChaCha8Rng, dim: usize, support: &[usize]) -> DMatrix<f64> {
    let k = support.len();
    let b = DMatrix::from_fn(k, k, |_, _| rng.gen_range(-1.0..1.0));
    let local = b.transpose() * &b + DMatrix::identity(k, k) * 0.1;
    let mut a = DMatrix::zeros(dim, dim);
    for (i, &r) in support.iter().enumerate() {
        for (j, &c) in support.iter().enumerate() {
            a[(r, c)] = local[(i, j)];
        }
    }
    a
}

/// Each task owns the coordinates in `supports[t]`. Its optimum keeps the
/// previous optimum and moves only those coordinates to the task's centre,
/// which is an exact minimizer of that task's loss.
pub fn supported_stream(dim: usize, supports: &[Vec<usize>], seed: u64) -> (Vec<QuadraticTask>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = Vec::new();
    let mut optima = Vec::new();
    let mut theta = vec![0.0; dim];
    for support in supports {
        let a = psd_on(&mut rng, dim, support);
        let mut c = DVector::zeros(dim);
        for &i in support {
            c[i] = rng.gen_range(-1.0..1.0);
            theta[i] = c[i];
        }
        tasks.push(QuadraticTask { a, c });
        optima.push(theta.clone());
    }
    (tasks, optima)
}

/// Every task acts on every coordinate.
pub fn dense_stream(dim: usize, tasks: usize, seed: u64) -> (Vec<QuadraticTask>, Vec<Vec<f64>>) {
    let all: Vec<usize> = (0..dim).collect();
    supported_stream(dim, &vec![all; tasks], seed)
}

/// Disjoint supports for all but the last task, which overlaps each of
/// the earlier ones: earlier average forgetting is exactly zero.
pub fn late_overlap_stream(seed: u64) -> (Vec<QuadraticTask>, Vec<Vec<f64>>) {
    supported_stream(6, &[vec![0, 1], vec![2, 3], vec![4, 5], vec![0, 2, 4]], seed)
}

/// Pairwise disjoint supports: every update is invisible to earlier tasks.
pub fn isolated_stream(seed: u64) -> (Vec<QuadraticTask>, Vec<Vec<f64>>) {
    supported_stream(8, &[vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]], seed)
}
