mod common;

use common::{finite_diff, max_rel_err, rng};
use fog_appo::nn::{log_prob, softmax, AdamState, Mlp, MlpCheckpoint};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn golden_forward() {
    let mut m = Mlp::zeros(2, 2, 1);
    // W1 = I, b1 = 0, W2 = [1, 2], b2 = 0.
    m.params_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 2.0, 0.0]);
    let out = m.forward(&[0.5, -0.5]).unwrap();
    assert_eq!(out.hidden, vec![0.5f64.tanh(), -(0.5f64.tanh())]);
    assert!((out.output[0] - -0.46211715726000974).abs() < 1e-15);
}

#[test]
fn backward_matches_finite_differences() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let (i, h, o) = (r.gen_range(1..6), r.gen_range(1..8), r.gen_range(1..4));
        let m = Mlp::init(i, h, o, &mut r);
        let x: Vec<f64> = (0..i).map(|_| r.gen_range(-1.0..1.0)).collect();
        let coef: Vec<f64> = (0..o).map(|_| r.gen_range(-1.0..1.0)).collect();
        // Loss = coef . output.
        let act = m.forward(&x).unwrap();
        let mut g = vec![0.0; m.num_params()];
        m.backward(&x, &act, &coef, &mut g).unwrap();
        let mut probe = m.clone();
        let fd = finite_diff(m.params(), 1e-5, |p| {
            probe.params_mut().copy_from_slice(p);
            let y = probe.forward(&x).unwrap().output;
            y.iter().zip(&coef).map(|(a, b)| a * b).sum()
        });
        let err = max_rel_err(&g, &fd, 1e-7);
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn checkpoint_round_trip_through_json() {
    let m = Mlp::init(7, 5, 3, &mut rng(1));
    let text = serde_json::to_string(&m.to_checkpoint(12)).unwrap();
    let c: MlpCheckpoint = serde_json::from_str(&text).unwrap();
    assert_eq!(c.version, 12);
    assert_eq!(Mlp::from_checkpoint(&c).unwrap(), m);
    let mut bad = c.clone();
    bad.weights.pop();
    assert!(Mlp::from_checkpoint(&bad).is_err());
    let mut nan = c;
    nan.weights[0] = f64::NAN;
    assert!(Mlp::from_checkpoint(&nan).is_err());
}

#[test]
fn first_adam_step_moves_by_lr() {
    let mut params = vec![1.0, -2.0, 0.5];
    let grads = [0.3, -4.0, 1e-3];
    let mut adam = AdamState::new(3, 0.01);
    adam.step(&mut params, &grads).unwrap();
    // Bias-corrected moments equal g and g^2 after one step.
    let expect = [
        1.0 - 0.01 * 0.3 / (0.3 + 1e-8),
        -2.0 + 0.01 * 4.0 / (4.0 + 1e-8),
        0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8),
    ];
    for (a, b) in params.iter().zip(expect) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
    assert!(adam.step(&mut params, &[f64::NAN, 0.0, 0.0]).is_err());
}

#[test]
fn adam_minimises_a_quadratic() {
    let mut x = vec![3.0, -1.5];
    let mut adam = AdamState::new(2, 0.05);
    for _ in 0..2000 {
        let g: Vec<f64> = x.iter().map(|v| 2.0 * (v - 1.0)).collect();
        adam.step(&mut x, &g).unwrap();
    }
    assert!(x.iter().all(|v| (v - 1.0).abs() < 1e-3), "{x:?}");
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-30.0f64..30.0, 1..10), seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut mask: Vec<bool> = logits.iter().map(|_| r.gen_bool(0.6)).collect();
        mask[0] = true;
        let p = softmax(&logits, Some(&mask));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (i, &pi) in p.iter().enumerate() {
            if !mask[i] {
                prop_assert_eq!(pi, 0.0);
            } else {
                prop_assert!((log_prob(&logits, Some(&mask), i) - pi.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width(i in 1usize..6, extra in 1usize..3) {
        let m = Mlp::zeros(i, 3, 2);
        prop_assert!(m.forward(&vec![0.0; i + extra]).is_err());
    }
}
