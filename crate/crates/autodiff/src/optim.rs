use crate::error::{AdError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum {
        momentum: f64,
        weight_decay: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        OptimizerKind::SgdMomentum {
            momentum,
            weight_decay,
        }
    }

    pub fn adam(weight_decay: f64) -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// First-order optimizer over a flat parameter vector.
///
/// Weight decay is coupled (added to the gradient). Frozen coordinates are
/// skipped entirely: neither the parameter nor its moment buffers change.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, len: usize) -> Self {
        let second = match kind {
            OptimizerKind::Adam { .. } => vec![0.0; len],
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            kind,
            lr,
            first: vec![0.0; len],
            second,
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update. `frozen[i] == true` leaves `theta[i]` bit-identical.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], frozen: &[bool]) -> Result<()> {
        self.step_with(theta, grad, frozen, |_| {})
    }

    /// Like [`step`](Self::step), but `transform` may rewrite the proposed
    /// additive update before it is applied. Frozen coordinates of the
    /// update are zeroed again afterwards.
    pub fn step_with<F>(&mut self, theta: &mut [f64], grad: &[f64], frozen: &[bool], mut transform: F) -> Result<()>
    where
        F: FnMut(&mut [f64]),
    {
        let n = self.first.len();
        if theta.len() != n || grad.len() != n || frozen.len() != n {
            return Err(AdError::LengthMismatch {
                params: theta.len(),
                grad: grad.len(),
                mask: frozen.len(),
            });
        }
        self.steps += 1;
        let mut delta = vec![0.0; n];
        match self.kind {
            OptimizerKind::SgdMomentum {
                momentum,
                weight_decay,
            } => {
                for i in (0..n).filter(|&i| !frozen[i]) {
                    let g = grad[i] + weight_decay * theta[i];
                    self.first[i] = momentum * self.first[i] + g;
                    delta[i] = -self.lr * self.first[i];
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in (0..n).filter(|&i| !frozen[i]) {
                    let g = grad[i] + weight_decay * theta[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m = self.first[i] / c1;
                    let v = self.second[i] / c2;
                    delta[i] = -self.lr * m / (v.sqrt() + eps);
                }
            }
        }
        transform(&mut delta);
        for i in (0..n).filter(|&i| !frozen[i]) {
            theta[i] += delta[i];
        }
        Ok(())
    }
}

/// Half-cosine decay from `base` to zero over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        0.5 * self.base * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_sgd_step() {
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.0, 0.0), 0.1, 2);
        let mut theta = vec![1.0, 1.0];
        opt.step(&mut theta, &[1.0, 0.0], &[false, false]).unwrap();
        assert_eq!(theta, vec![0.9, 1.0]);
    }

    #[test]
    fn sgd_weight_decay_is_added_to_gradient() {
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.9, 1e-4), 0.1, 1);
        let mut theta = vec![2.0];
        opt.step(&mut theta, &[1.0], &[false]).unwrap();
        assert!((theta[0] - (2.0 - 0.1 * (1.0 + 2e-4))).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.9, 0.0), 1.0, 1);
        let mut theta = vec![0.0];
        opt.step(&mut theta, &[1.0], &[false]).unwrap();
        opt.step(&mut theta, &[1.0], &[false]).unwrap();
        // velocities 1 then 1.9
        assert!((theta[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps).
        for g in [1e-3, 0.5, 40.0, -7.0] {
            let mut opt = Optimizer::new(OptimizerKind::adam(0.0), 1e-3, 1);
            let mut theta = vec![0.0];
            opt.step(&mut theta, &[g], &[false]).unwrap();
            let expected = -1e-3 * g / (g.abs() + 1e-8);
            assert!((theta[0] - expected).abs() < 1e-15, "g={g}");
            assert!((theta[0].abs() - 1e-3).abs() < 1e-8);
        }
    }

    #[test]
    fn all_frozen_is_a_no_op() {
        let mut opt = Optimizer::new(OptimizerKind::adam(1e-2), 0.5, 3);
        let mut theta = vec![1.5, -2.0, 0.25];
        let before = theta.clone();
        opt.step(&mut theta, &[3.0, 4.0, 5.0], &[true; 3]).unwrap();
        assert_eq!(
            theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn length_mismatch_errors() {
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.9, 0.0), 0.1, 2);
        let mut theta = vec![0.0; 2];
        assert!(opt.step(&mut theta, &[0.0], &[false, false]).is_err());
        assert!(opt.step(&mut theta, &[0.0; 2], &[false]).is_err());
    }

    #[test]
    fn transform_sees_update() {
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.0, 0.0), 1.0, 2);
        let mut theta = vec![0.0, 0.0];
        opt.step_with(&mut theta, &[1.0, 1.0], &[false, false], |d| d[1] = 0.0)
            .unwrap();
        assert_eq!(theta, vec![-1.0, 0.0]);
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule {
            base: 0.2,
            total_steps: 10,
        };
        assert_eq!(s.lr(0), 0.2);
        assert!((s.lr(5) - 0.1).abs() < 1e-15);
        assert!(s.lr(10).abs() < 1e-15);
    }
}
