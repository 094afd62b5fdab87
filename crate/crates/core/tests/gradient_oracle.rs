//! Analytic gradients against central finite differences.

use facesolve_core::demo::demo_rig;
use facesolve_core::neural::{init_network, loss_and_grad, Batch, Mode, Network, NetworkArch};
use facesolve_core::synth::stream;
use ndarray::Array2;
use rand::Rng;

/// Per-entry relative error with an absolute floor of 1e-4 in the
/// denominator, so entries that are numerically zero compare absolutely.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn random_case(seed: u64) -> (Network<f64>, Batch<f64>, f64) {
    let mut rng = stream(seed, "gradcheck");
    let jaw_cond = seed % 2 == 0;
    let arch = NetworkArch {
        input_dim: rng.random_range(2..8),
        rb_dim: rng.random_range(3..10),
        n_rb: rng.random_range(1..4),
        jaw_cond,
        jaw_dim: 3,
        output_dim: rng.random_range(1..5),
        dropout: 0.0,
    };
    let net = init_network(&arch, seed).unwrap();
    let b = rng.random_range(1..6);
    let features = Array2::from_shape_simple_fn((b, arch.input_dim), || rng.random_range(-2.0..2.0));
    let jaw = jaw_cond.then(|| Array2::from_shape_simple_fn((b, 3), || rng.random_range(0.0..1.0)));
    let targets = Array2::from_shape_simple_fn((b, arch.output_dim), || rng.random_range(0.0..1.0));
    let l2 = if seed % 3 == 0 { 0.0 } else { 1e-3 };
    (net, Batch { features, jaw, targets }, l2)
}

fn max_gradient_error(mut net: Network<f64>, batch: &Batch<f64>, l2: f64) -> f64 {
    let (_, _, grads) = loss_and_grad(&net, batch, l2, Mode::Eval).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for li in 0..net.layers.len() {
        for idx in 0..net.layers[li].weight.len() {
            let (r, c) = (idx / net.layers[li].weight.ncols(), idx % net.layers[li].weight.ncols());
            let orig = net.layers[li].weight[[r, c]];
            net.layers[li].weight[[r, c]] = orig + h;
            let (plus, _, _) = loss_and_grad(&net, batch, l2, Mode::Eval).unwrap();
            net.layers[li].weight[[r, c]] = orig - h;
            let (minus, _, _) = loss_and_grad(&net, batch, l2, Mode::Eval).unwrap();
            net.layers[li].weight[[r, c]] = orig;
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(grads[li].weight[[r, c]], fd));
        }
        for k in 0..net.layers[li].bias.len() {
            let orig = net.layers[li].bias[k];
            net.layers[li].bias[k] = orig + h;
            let (plus, _, _) = loss_and_grad(&net, batch, l2, Mode::Eval).unwrap();
            net.layers[li].bias[k] = orig - h;
            let (minus, _, _) = loss_and_grad(&net, batch, l2, Mode::Eval).unwrap();
            net.layers[li].bias[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(grads[li].bias[k], fd));
        }
    }
    worst
}

#[test]
fn tiny_net_matches_finite_differences() {
    let arch = NetworkArch {
        input_dim: 6,
        rb_dim: 8,
        n_rb: 1,
        jaw_cond: false,
        jaw_dim: 3,
        output_dim: 3,
        dropout: 0.0,
    };
    let net: Network<f64> = init_network(&arch, 9).unwrap();
    let mut rng = stream(9, "tiny");
    let batch = Batch {
        features: Array2::from_shape_simple_fn((4, 6), || rng.random_range(-1.0..1.0)),
        jaw: None,
        targets: Array2::from_shape_simple_fn((4, 3), || rng.random_range(0.0..1.0)),
    };
    let err = max_gradient_error(net, &batch, 1e-5);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn twenty_random_nets_match_finite_differences() {
    for seed in 0..20 {
        let (net, batch, l2) = random_case(seed);
        let err = max_gradient_error(net, &batch, l2);
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn demo_rig_jacobian_matches_finite_differences() {
    let rig = demo_rig();
    let all: Vec<usize> = (0..rig.n_channels()).collect();
    let mut rng = stream(3, "rig-fd");
    let h = 1e-5;
    for _ in 0..100 {
        // stay one step away from the bounds and from in-between knots
        let w: Vec<f64> = (0..rig.n_channels())
            .map(|_| loop {
                let v: f64 = rng.random_range(0.01..0.99);
                if (v - 0.5).abs() > 2.0 * h && (v - 0.6).abs() > 2.0 * h {
                    break v;
                }
            })
            .collect();
        let (_, jac) = rig.evaluate_jacobian(&w, &all).unwrap();
        for (c, &k) in all.iter().enumerate() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[k] += h;
            wm[k] -= h;
            let xp = rig.evaluate(&wp).unwrap();
            let xm = rig.evaluate(&wm).unwrap();
            for r in 0..xp.len() {
                let fd = (xp[r] - xm[r]) / (2.0 * h);
                let err = (jac[[r, c]] - fd).abs() / jac[[r, c]].abs().max(fd.abs()).max(1e-4);
                assert!(err < 1e-5, "channel {k} row {r}: {} vs {fd}", jac[[r, c]]);
            }
        }
    }
}
