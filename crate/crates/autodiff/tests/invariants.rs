use cogcas_autodiff::{Optimizer, OptimizerKind, Tape, Tensor};
use proptest::prelude::*;

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #[test]
    fn masked_coordinates_never_move(
        entries in prop::collection::vec((-10.0f64..10.0, -100.0f64..100.0, any::<bool>()), 1..64),
        use_adam in any::<bool>(),
        steps in 1usize..5,
    ) {
        let mut theta: Vec<f64> = entries.iter().map(|e| e.0).collect();
        let grad: Vec<f64> = entries.iter().map(|e| e.1).collect();
        let frozen: Vec<bool> = entries.iter().map(|e| e.2).collect();
        let kind = if use_adam { OptimizerKind::adam(1e-4) } else { OptimizerKind::sgd(0.9, 1e-4) };
        let mut opt = Optimizer::new(kind, 0.05, theta.len());
        let before = theta.clone();
        for _ in 0..steps {
            opt.step(&mut theta, &grad, &frozen).unwrap();
        }
        for i in 0..theta.len() {
            if frozen[i] {
                prop_assert_eq!(theta[i].to_bits(), before[i].to_bits());
            }
        }
    }

    #[test]
    fn transform_cannot_leak_into_frozen(
        entries in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, any::<bool>()), 1..32),
    ) {
        let mut theta: Vec<f64> = entries.iter().map(|e| e.0).collect();
        let grad: Vec<f64> = entries.iter().map(|e| e.1).collect();
        let frozen: Vec<bool> = entries.iter().map(|e| e.2).collect();
        let before = theta.clone();
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.9, 0.0), 0.1, theta.len());
        opt.step_with(&mut theta, &grad, &frozen, |d| d.iter_mut().for_each(|x| *x += 1.0)).unwrap();
        for i in 0..theta.len() {
            if frozen[i] {
                prop_assert_eq!(theta[i].to_bits(), before[i].to_bits());
            }
        }
    }

    #[test]
    fn forward_is_deterministic(data in prop::collection::vec(-3.0f64..3.0, 2 * 4 * 4)) {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::new(vec![2, 4, 4], data.clone()).unwrap());
            let w = tape.param(Tensor::new(vec![2, 2, 3, 3], (0..36).map(|i| (i as f64).cos()).collect()).unwrap(), 0);
            let b = tape.param(Tensor::vector(vec![0.1, -0.2]), 36);
            let y = tape.conv2d(x, w, b, 2).unwrap();
            let y = tape.upsample_bilinear(y, 2).unwrap();
            let y = tape.softmax(y).unwrap();
            let out = tape.value(y).clone();
            let l = tape.mean(y).unwrap();
            let g = tape.backward(l, None).unwrap().param_vector(38);
            assert!(tape.replay_matches().unwrap());
            (out, g)
        };
        let (a, ga) = run();
        let (b, gb) = run();
        prop_assert_eq!(bits(a.data()), bits(b.data()));
        prop_assert_eq!(bits(&ga), bits(&gb));
        prop_assert!(a.all_finite());
    }
}

#[test]
fn frozen_leaf_gradient_is_observable() {
    // Freezing is an update mask; the gradient itself is still computed.
    let mut tape = Tape::new();
    let a = tape.param(Tensor::scalar(2.0), 0);
    let b = tape.param(Tensor::scalar(3.0), 1);
    let y = tape.mul(a, b).unwrap();
    let g = tape.backward(y, None).unwrap().param_vector(2);
    assert_eq!(g, vec![3.0, 2.0]);
    let mut theta = vec![2.0, 3.0];
    let mut opt = Optimizer::new(OptimizerKind::sgd(0.9, 1e-4), 0.1, 2);
    opt.step(&mut theta, &g, &[true, false]).unwrap();
    assert_eq!(theta[0], 2.0);
    assert_ne!(theta[1], 3.0);
}
