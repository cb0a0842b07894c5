//! Forgetting rates, finite-difference Hessians, the quadratic forgetting
//! term, block structure, Taylor residuals and the average-forgetting
//! recurrence.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Loss closure over the full parameter vector.
pub type LossFn<'a> = dyn Fn(&[f64]) -> Result<f64> + Sync + 'a;
/// Gradient closure over the full parameter vector.
pub type GradFn<'a> = dyn Fn(&[f64]) -> Result<Vec<f64>> + Sync + 'a;

/// Default cap on the number of probed coordinates.
pub const HESSIAN_LIMIT: usize = 2000;
/// Smallest eigenvalue still accepted as positive semi-definite.
pub const PSD_TOLERANCE: f64 = -1e-6;

/// `L(θ) − L(θ_τ*)`.
pub fn forgetting_rate(loss: &LossFn<'_>, theta: &[f64], theta_star: &[f64]) -> Result<f64> {
    Ok(loss(theta)? - loss(theta_star)?)
}

/// Mean of the `t − 1` forgetting rates of earlier tasks.
pub fn average_forgetting(rates: &[f64], t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::Precondition(format!("average forgetting needs t >= 2, got {t}")));
    }
    if rates.len() != t - 1 {
        return Err(Error::Precondition(format!("{} rates for t = {t}", rates.len())));
    }
    Ok(rates.iter().sum::<f64>() / (t - 1) as f64)
}

/// Symmetrized Hessian over a subset of coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Hessian {
    /// Parameter index of each row and column.
    pub indices: Vec<usize>,
    pub matrix: DMatrix<f64>,
    /// Relative probe step.
    pub step: f64,
    /// Largest `|H_ij − H_ji|` before symmetrization.
    pub asymmetry: f64,
}

impl Hessian {
    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.matrix.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(0.0)
    }

    /// Entries restricted to a vector in parameter space.
    pub fn restrict(&self, v: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.indices.iter().map(|&i| v[i]))
    }

    /// Largest `|H_ij|` with `i` or `j` outside `own`.
    pub fn off_block_max(&self, own: &[Range<usize>]) -> f64 {
        let inside: Vec<bool> = self
            .indices
            .iter()
            .map(|i| own.iter().any(|r| r.contains(i)))
            .collect();
        let mut worst: f64 = 0.0;
        for j in 0..self.dim() {
            for i in 0..self.dim() {
                if !(inside[i] && inside[j]) {
                    worst = worst.max(self.matrix[(i, j)].abs());
                }
            }
        }
        worst
    }
}

/// Central differences of `grad` along each coordinate in `indices`, with
/// step `step · max(1, |θ_j|)`, then `(H + Hᵀ)/2`.
pub fn hessian(grad: &GradFn<'_>, theta: &[f64], indices: &[usize], step: f64, limit: usize) -> Result<Hessian> {
    if indices.len() > limit {
        return Err(Error::HessianTooLarge {
            size: indices.len(),
            limit,
        });
    }
    if !(step > 0.0) {
        return Err(Error::Config(format!("Hessian step {step}")));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= theta.len()) {
        return Err(Error::Layout(format!("index {bad} outside {} parameters", theta.len())));
    }
    let n = indices.len();
    let columns: Vec<Vec<f64>> = indices
        .par_iter()
        .map(|&j| {
            let h = step * theta[j].abs().max(1.0);
            let mut p = theta.to_vec();
            p[j] = theta[j] + h;
            let up = grad(&p)?;
            p[j] = theta[j] - h;
            let down = grad(&p)?;
            let span = (theta[j] + h) - (theta[j] - h);
            Ok(indices.iter().map(|&i| (up[i] - down[i]) / span).collect())
        })
        .collect::<Result<_>>()?;
    let raw = DMatrix::from_fn(n, n, |i, j| columns[j][i]);
    let mut asymmetry: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            asymmetry = asymmetry.max((raw[(i, j)] - raw[(j, i)]).abs());
        }
    }
    let matrix = (&raw + raw.transpose()) * 0.5;
    Ok(Hessian {
        indices: indices.to_vec(),
        matrix,
        step,
        asymmetry,
    })
}

/// Asymmetry of the raw estimate for each candidate step.
pub fn step_sweep(grad: &GradFn<'_>, theta: &[f64], indices: &[usize], steps: &[f64]) -> Result<Vec<(f64, f64)>> {
    steps
        .iter()
        .map(|&s| Ok((s, hessian(grad, theta, indices, s, usize::MAX)?.asymmetry)))
        .collect()
}

/// `Δᵀ (Σ H) Δ` with every Hessian on the same coordinate list.
pub fn quadratic_term(delta: &[f64], hessians: &[&Hessian]) -> Result<f64> {
    let Some(first) = hessians.first() else {
        return Ok(0.0);
    };
    if hessians.iter().any(|h| h.indices != first.indices) {
        return Err(Error::Layout("Hessians over different coordinates".into()));
    }
    if let Some(&bad) = first.indices.iter().find(|&&i| i >= delta.len()) {
        return Err(Error::Layout(format!("index {bad} outside a delta of {}", delta.len())));
    }
    let d = first.restrict(delta);
    let mut total = DMatrix::zeros(first.dim(), first.dim());
    for h in hessians {
        total += &h.matrix;
    }
    Ok(d.dot(&(&total * &d)))
}

/// `v_t = Σ_τ H_τ (θ_{t−1}* − θ_τ*)` on the Hessians' coordinates.
pub fn v_vector(hessians: &[&Hessian], previous: &[f64], snapshots: &[&[f64]]) -> Result<DVector<f64>> {
    if hessians.len() != snapshots.len() {
        return Err(Error::Precondition(format!("{} Hessians, {} snapshots", hessians.len(), snapshots.len())));
    }
    let Some(first) = hessians.first() else {
        return Ok(DVector::zeros(0));
    };
    let mut v = DVector::zeros(first.dim());
    for (h, snap) in hessians.iter().zip(snapshots) {
        if h.indices != first.indices {
            return Err(Error::Layout("Hessians over different coordinates".into()));
        }
        let diff: Vec<f64> = previous.iter().zip(snap.iter()).map(|(a, b)| a - b).collect();
        v += &h.matrix * h.restrict(&diff);
    }
    Ok(v)
}

/// Right-hand side of the recurrence
/// `ℰ̄_t = [(t−2) ℰ̄_{t−1} + ½ ΔᵀΣHΔ + vᵀΔ] / (t−1)`.
pub fn recurrence_rhs(t: usize, prev_avg: f64, quad: f64, v_dot_delta: f64) -> Result<f64> {
    if t < 2 {
        return Err(Error::Precondition(format!("recurrence needs t >= 2, got {t}")));
    }
    let prev = if t == 2 { 0.0 } else { (t - 2) as f64 * prev_avg };
    Ok((prev + 0.5 * quad + v_dot_delta) / (t - 1) as f64)
}

/// Residuals `|L(θ+δu) − L(θ) − ½δ² uᵀHu|` and the log-log slope.
#[derive(Clone, Debug, PartialEq)]
pub struct TaylorFit {
    pub deltas: Vec<f64>,
    pub residuals: Vec<f64>,
    /// `uᵀ H u`, from central differences of the gradient along `u`.
    pub curvature: f64,
    /// First-order term `∇L·u`, near zero for a direction chosen
    /// orthogonal to the gradient.
    pub slope_term: f64,
    pub exponent: f64,
}

/// Probe along unit direction `u` at each δ. `curvature_step` is the
/// finite-difference step for `uᵀHu`.
pub fn taylor_residual(
    loss: &LossFn<'_>,
    grad: &GradFn<'_>,
    theta: &[f64],
    u: &[f64],
    deltas: &[f64],
    curvature_step: f64,
) -> Result<TaylorFit> {
    if u.len() != theta.len() {
        return Err(Error::Layout("direction and parameters differ in length".into()));
    }
    let shifted = |s: f64| -> Vec<f64> { theta.iter().zip(u).map(|(t, d)| t + s * d).collect() };
    let g_up = grad(&shifted(curvature_step))?;
    let g_down = grad(&shifted(-curvature_step))?;
    let curvature = g_up
        .iter()
        .zip(&g_down)
        .zip(u)
        .map(|((a, b), d)| (a - b) * d)
        .sum::<f64>()
        / (2.0 * curvature_step);
    let g0 = grad(theta)?;
    let slope_term: f64 = g0.iter().zip(u).map(|(a, b)| a * b).sum();
    let base = loss(theta)?;
    let residuals: Vec<f64> = deltas
        .iter()
        .map(|&d| Ok((loss(&shifted(d))? - base - 0.5 * d * d * curvature).abs()))
        .collect::<Result<_>>()?;
    Ok(TaylorFit {
        exponent: loglog_slope(deltas, &residuals),
        deltas: deltas.to_vec(),
        residuals,
        curvature,
        slope_term,
    })
}

/// Least-squares slope of `ln y` against `ln x`; NaN when fewer than two
/// usable points remain.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Unit vector supported on `coords`, orthogonal to `against`. Built from
/// a fixed pseudo-random pattern so results are reproducible.
pub fn probe_direction(len: usize, coords: &[usize], against: &[f64], seed: u64) -> Result<Vec<f64>> {
    use rand::Rng;
    let mut rng = crate::seed::rng(&[seed, crate::seed::domain::PROBE]);
    let mut u = vec![0.0; len];
    for &i in coords {
        u[i] = rng.gen_range(-1.0..1.0);
    }
    let g: Vec<f64> = (0..len).map(|i| if coords.contains(&i) { against[i] } else { 0.0 }).collect();
    let gg: f64 = g.iter().map(|x| x * x).sum();
    if gg > 0.0 {
        for _ in 0..2 {
            let dot: f64 = u.iter().zip(&g).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(&g).for_each(|(a, b)| *a -= dot / gg * b);
        }
    }
    let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Precondition("empty probe direction".into()));
    }
    u.iter_mut().for_each(|x| *x /= norm);
    Ok(u)
}

/// Convergence evidence at a snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceWitness {
    pub task: usize,
    pub grad_norm: f64,
    pub tolerance: f64,
    pub min_eigenvalue: f64,
    pub gradient_ok: bool,
    pub psd: bool,
}

/// Gradient infinity-norm over `indices` and the smallest Hessian
/// eigenvalue there. Never fails on a bad witness; it only reports.
pub fn verify_convergence(
    task: usize,
    grad: &GradFn<'_>,
    theta: &[f64],
    indices: &[usize],
    tolerance: f64,
    step: f64,
) -> Result<ConvergenceWitness> {
    let g = grad(theta)?;
    let grad_norm = indices.iter().map(|&i| g[i].abs()).fold(0.0, f64::max);
    let min_eigenvalue = hessian(grad, theta, indices, step, HESSIAN_LIMIT)?.min_eigenvalue();
    Ok(ConvergenceWitness {
        task,
        grad_norm,
        tolerance,
        min_eigenvalue,
        gradient_ok: grad_norm <= tolerance,
        psd: min_eigenvalue >= PSD_TOLERANCE,
    })
}

/// One line of the forgetting report.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub tau: usize,
    pub t: usize,
    pub forgetting_rate: f64,
    pub avg_forgetting: f64,
    pub quad_term: f64,
    pub v_dot_delta: f64,
    pub taylor_exponent: f64,
    pub min_eig: f64,
    pub off_block_max: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForgettingReport {
    pub rows: Vec<ReportRow>,
}

impl ForgettingReport {
    pub const HEADER: &'static str =
        "tau,t,forgetting_rate,avg_forgetting,quad_term,v_dot_delta,taylor_exponent,min_eig,off_block_max";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                r.tau, r.t, r.forgetting_rate, r.avg_forgetting, r.quad_term, r.v_dot_delta, r.taylor_exponent, r.min_eig, r.off_block_max
            );
        }
        out
    }
}

/// Closed-form quadratic tasks `L_τ(θ) = ½ (θ − c_τ)ᵀ A_τ (θ − c_τ)` for
/// checking the forgetting identities without a network in the loop.
#[derive(Clone, Debug)]
pub struct QuadraticTask {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl QuadraticTask {
    pub fn loss(&self, theta: &[f64]) -> f64 {
        let d = DVector::from_column_slice(theta) - &self.c;
        0.5 * d.dot(&(&self.a * &d))
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        let d = DVector::from_column_slice(theta) - &self.c;
        (&self.a * d).iter().copied().collect()
    }
}

/// One step of the quadratic harness.
#[derive(Clone, Debug)]
pub struct RecurrenceStep {
    pub t: usize,
    /// `ℰ̄_t(θ_t*)` from the losses.
    pub measured: f64,
    /// The recurrence evaluated with the previous measured average.
    pub predicted: f64,
    /// `Δ_tᵀ(Σ_{τ<t} H_τ)Δ_t`.
    pub quad: f64,
    pub v: DVector<f64>,
    /// `max |(v_t − v_{t−1}) − (Σ_{τ≤t−2} H_τ)Δ_{t−1}|`, with `v_1 = 0`.
    pub v_step_gap: f64,
}

/// Both sides of the recurrence at every `t ≥ 2` for a run whose task-`t`
/// optimum is `optima[t-1]`. Hessians are estimated by finite differences
/// like the neural case.
pub fn quadratic_recurrence(tasks: &[QuadraticTask], optima: &[Vec<f64>]) -> Result<Vec<RecurrenceStep>> {
    if tasks.len() != optima.len() || tasks.is_empty() {
        return Err(Error::Precondition("one optimum per task".into()));
    }
    let dim = optima[0].len();
    let all: Vec<usize> = (0..dim).collect();
    let hessians: Vec<Hessian> = tasks
        .iter()
        .zip(optima)
        .map(|(task, opt)| {
            let g = |p: &[f64]| -> Result<Vec<f64>> { Ok(task.grad(p)) };
            hessian(&g, opt, &all, 1e-4, usize::MAX)
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    let mut prev_avg = 0.0;
    let mut prev_v = DVector::zeros(dim);
    for t in 2..=tasks.len() {
        let rates: Vec<f64> = (0..t - 1)
            .map(|tau| {
                let l = |p: &[f64]| -> Result<f64> { Ok(tasks[tau].loss(p)) };
                forgetting_rate(&l, &optima[t - 1], &optima[tau])
            })
            .collect::<Result<_>>()?;
        let measured = average_forgetting(&rates, t)?;
        let delta: Vec<f64> = optima[t - 1].iter().zip(&optima[t - 2]).map(|(a, b)| a - b).collect();
        let hs: Vec<&Hessian> = hessians[..t - 1].iter().collect();
        let quad = quadratic_term(&delta, &hs)?;
        let snaps: Vec<&[f64]> = optima[..t - 1].iter().map(Vec::as_slice).collect();
        let v = v_vector(&hs, &optima[t - 2], &snaps)?;
        let vd = v.dot(&DVector::from_column_slice(&delta));
        let predicted = recurrence_rhs(t, prev_avg, quad, vd)?;

        let mut step = DVector::zeros(dim);
        if t >= 3 {
            let last: Vec<f64> = optima[t - 2].iter().zip(&optima[t - 3]).map(|(a, b)| a - b).collect();
            let last = DVector::from_column_slice(&last);
            for h in &hessians[..t - 2] {
                step += &h.matrix * &last;
            }
        }
        let v_step_gap = (&v - &prev_v - step).amax();

        out.push(RecurrenceStep {
            t,
            measured,
            predicted,
            quad,
            v: v.clone(),
            v_step_gap,
        });
        prev_avg = measured;
        prev_v = v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(n: usize, seed: u64) -> DMatrix<f64> {
        use rand::Rng;
        let mut rng = crate::seed::rng(&[seed]);
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &m + m.transpose()
    }

    #[test]
    fn hessian_of_quadratic_form() {
        let a = sym(5, 1);
        let g = |p: &[f64]| -> Result<Vec<f64>> { Ok((&a * DVector::from_column_slice(p)).iter().copied().collect()) };
        let theta = [0.3, -1.2, 2.0, 0.0, 5.0];
        let h = hessian(&g, &theta, &[0, 1, 2, 3, 4], 1e-4, 10).unwrap();
        assert!((&h.matrix - &a).amax() < 1e-6);
        assert!(h.asymmetry < 1e-6);
        assert!(matches!(
            hessian(&g, &theta, &[0, 1, 2], 1e-4, 2),
            Err(Error::HessianTooLarge { size: 3, limit: 2 })
        ));
    }

    #[test]
    fn quadratic_term_on_eigenvector() {
        let a = sym(4, 2);
        let h = Hessian {
            indices: vec![0, 1, 2, 3],
            matrix: a.clone(),
            step: 0.0,
            asymmetry: 0.0,
        };
        let eig = SymmetricEigen::new(a);
        let e: Vec<f64> = eig.eigenvectors.column(0).iter().map(|x| 3.0 * x).collect();
        let q = quadratic_term(&e, &[&h]).unwrap();
        assert!((q - 9.0 * eig.eigenvalues[0]).abs() < 1e-12);
        assert_eq!(quadratic_term(&[0.0; 4], &[&h]).unwrap(), 0.0);
        let other = Hessian {
            indices: vec![0, 1, 2, 4],
            ..h.clone()
        };
        assert!(quadratic_term(&e, &[&h, &other]).is_err());
    }

    #[test]
    fn off_block_of_block_diagonal_is_zero() {
        let mut m = DMatrix::zeros(4, 4);
        m[(0, 0)] = 2.0;
        m[(0, 1)] = 1.0;
        m[(1, 0)] = 1.0;
        m[(3, 3)] = 4.0;
        let h = Hessian {
            indices: vec![10, 11, 20, 21],
            matrix: m,
            step: 0.0,
            asymmetry: 0.0,
        };
        assert_eq!(h.off_block_max(&[10..12, 20..22]), 0.0);
        assert_eq!(h.off_block_max(&[10..12]), 4.0);
    }

    #[test]
    fn saddle_is_flagged() {
        let g = |p: &[f64]| -> Result<Vec<f64>> { Ok(vec![2.0 * p[0], -2.0 * p[1]]) };
        let w = verify_convergence(1, &g, &[0.0, 0.0], &[0, 1], 1e-3, 1e-4).unwrap();
        assert!(w.gradient_ok);
        assert!(!w.psd);
        assert!((w.min_eigenvalue + 2.0).abs() < 1e-8);
        let bowl = |p: &[f64]| -> Result<Vec<f64>> { Ok(vec![2.0 * p[0], 6.0 * p[1]]) };
        assert!(verify_convergence(1, &bowl, &[0.0, 0.0], &[0, 1], 1e-3, 1e-4).unwrap().psd);
    }

    #[test]
    fn averages() {
        assert_eq!(average_forgetting(&[0.2, 0.4], 3).unwrap(), 0.30000000000000004);
        assert_eq!(average_forgetting(&[0.0], 2).unwrap(), 0.0);
        assert!(average_forgetting(&[], 1).is_err());
        let l = |p: &[f64]| -> Result<f64> { Ok(p[0] * p[0]) };
        assert_eq!(forgetting_rate(&l, &[0.5], &[0.5]).unwrap(), 0.0);
    }

    #[test]
    fn taylor_on_quadratic_is_exact() {
        let a = sym(3, 3) + DMatrix::identity(3, 3) * 5.0;
        let task = QuadraticTask {
            a,
            c: DVector::from_vec(vec![0.1, 0.2, 0.3]),
        };
        let l = |p: &[f64]| -> Result<f64> { Ok(task.loss(p)) };
        let g = |p: &[f64]| -> Result<Vec<f64>> { Ok(task.grad(p)) };
        let theta = [0.1, 0.2, 0.3];
        let u = probe_direction(3, &[0, 1, 2], &[0.0; 3], 4).unwrap();
        let fit = taylor_residual(&l, &g, &theta, &u, &[0.0, 1e-3, 1e-2], 1e-4).unwrap();
        assert_eq!(fit.residuals[0], 0.0);
        assert!(fit.residuals.iter().all(|r| *r <= 1e-10), "{:?}", fit.residuals);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1e-3, 3e-3, 1e-2];
        let y: Vec<f64> = x.iter().map(|v: &f64| 7.0 * v.powi(3)).collect();
        assert!((loglog_slope(&x, &y) - 3.0).abs() < 1e-12);
    }
}
