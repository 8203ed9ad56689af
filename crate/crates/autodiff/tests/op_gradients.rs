//! Every op in the set against the central-difference oracle, 64-bit.

use nfad_autodiff::gradcheck::{self, GradReport};
use nfad_autodiff::{Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// Entries bounded away from zero, for ops with a kink or pole at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| {
        let m = rng.gen_range(0.1..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduce to a scalar through fixed random weights so every output
/// coordinate contributes a distinct amount.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.dims(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn assert_ok(name: &str, report: GradReport) {
    assert!(
        report.max_rel_error < TOL,
        "{name}: rel error {:.3e} (analytic {}, numeric {}) at input {} index {}",
        report.max_rel_error,
        report.analytic,
        report.numeric,
        report.worst_input,
        report.worst_index
    );
}

#[test]
fn elementwise_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = [2, 3, 4];
    let inputs = vec![random(&mut rng, &dims), random(&mut rng, &dims)];
    for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let r = gradcheck::check(&inputs, H, |t, v| {
            let y = match op {
                0 => t.add(v[0], v[1])?,
                1 => t.sub(v[0], v[1])?,
                _ => t.mul(v[0], v[1])?,
            };
            weighted_sum(t, y, 7)
        })
        .unwrap();
        assert_ok(name, r);
    }
}

#[test]
fn scalar_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![random(&mut rng, &[3, 5])];
    let r = gradcheck::check(&inputs, H, |t, v| {
        let a = t.scale(v[0], -1.7)?;
        let b = t.add_scalar(a, 0.3)?;
        weighted_sum(t, b, 3)
    })
    .unwrap();
    assert_ok("scale/add_scalar", r);
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = [4, 2, 3];
    let general = vec![random(&mut rng, &dims)];
    let nonzero = vec![away_from_zero(&mut rng, &dims)];
    let positive = vec![Tensor::from_fn(&dims, |_| rng.gen_range(0.2..2.0))];
    let cases: [(&str, &Vec<Tensor<f64>>); 7] = [
        ("relu", &nonzero),
        ("tanh", &general),
        ("exp", &general),
        ("log", &positive),
        ("log_abs", &nonzero),
        ("sigmoid", &general),
        ("log_sigmoid", &general),
    ];
    for (name, inputs) in cases {
        let r = gradcheck::check(inputs, H, |t, v| {
            let y = match name {
                "relu" => t.relu(v[0])?,
                "tanh" => t.tanh(v[0])?,
                "exp" => t.exp(v[0])?,
                "log" => t.log(v[0])?,
                "log_abs" => t.log_abs(v[0])?,
                "sigmoid" => t.sigmoid(v[0])?,
                _ => t.log_sigmoid(v[0])?,
            };
            weighted_sum(t, y, 11)
        })
        .unwrap();
        assert_ok(name, r);
    }
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![random(&mut rng, &[3, 2, 4])];
    let r = gradcheck::check(&inputs, H, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.sum(sq)
    })
    .unwrap();
    assert_ok("sum", r);
    let r = gradcheck::check(&inputs, H, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.mean(sq)
    })
    .unwrap();
    assert_ok("mean", r);
    let r = gradcheck::check(&inputs, H, |t, v| {
        let rows = t.sum_rows(v[0])?;
        weighted_sum(t, rows, 5)
    })
    .unwrap();
    assert_ok("sum_rows", r);
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![random(&mut rng, &[3, 5]), random(&mut rng, &[5, 4])];
    let r = gradcheck::check(&inputs, H, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 9)
    })
    .unwrap();
    assert_ok("matmul", r);
}

#[test]
fn conv_gradients_both_kernel_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for k in [1, 3] {
        let inputs = vec![
            random(&mut rng, &[2, 3, 8, 8]),
            random(&mut rng, &[4, 3, k, k]),
        ];
        let r = gradcheck::check(&inputs, H, |t, v| {
            let y = t.conv2d(v[0], v[1])?;
            weighted_sum(t, y, 13)
        })
        .unwrap();
        assert_ok(if k == 1 { "conv1x1" } else { "conv3x3" }, r);
    }
}

#[test]
fn structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![random(&mut rng, &[2, 4, 4, 4])];
    let r = gradcheck::check(&inputs, H, |t, v| {
        let a = t.channel_split(v[0], 0, 1)?;
        let b = t.channel_split(v[0], 1, 3)?;
        let b2 = t.tanh(b)?;
        let y = t.channel_concat(&[b2, a])?;
        weighted_sum(t, y, 17)
    })
    .unwrap();
    assert_ok("split/concat", r);

    let r = gradcheck::check(&inputs, H, |t, v| {
        let s = t.squeeze(v[0])?;
        let s = t.tanh(s)?;
        weighted_sum(t, s, 19)
    })
    .unwrap();
    assert_ok("squeeze", r);

    let r = gradcheck::check(&inputs, H, |t, v| {
        let s = t.unsqueeze(v[0])?;
        let s = t.exp(s)?;
        weighted_sum(t, s, 23)
    })
    .unwrap();
    assert_ok("unsqueeze", r);

    let r = gradcheck::check(&inputs, H, |t, v| {
        let s = t.reshape(v[0], &[8, 16])?;
        let s = t.sigmoid(s)?;
        weighted_sum(t, s, 29)
    })
    .unwrap();
    assert_ok("reshape", r);

    let vec_input = vec![random(&mut rng, &[3])];
    let r = gradcheck::check(&vec_input, H, |t, v| {
        let s = t.broadcast(v[0], &[2], &[4, 2])?;
        let s = t.tanh(s)?;
        weighted_sum(t, s, 31)
    })
    .unwrap();
    assert_ok("broadcast", r);
}

#[test]
fn log_abs_det_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in [1, 2, 4, 6] {
        let w = Tensor::from_fn(&[n, n], |i| {
            rng.gen_range(-1.0..1.0) + if i % (n + 1) == 0 { 2.0 } else { 0.0 }
        });
        let r = gradcheck::check(&[w], H, |t, v| t.log_abs_det(v[0], 1e-12)).unwrap();
        assert_ok("log_abs_det", r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Random conv-net shapes up to (4,8,8).
    #[test]
    fn conv_stack_random_shapes(
        seed in any::<u64>(),
        c in 1usize..=4,
        h in 1usize..=8,
        w in 1usize..=8,
        out in 1usize..=4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random(&mut rng, &[1, c, h, w]),
            random(&mut rng, &[out, c, 3, 3]),
            random(&mut rng, &[out]),
        ];
        let r = gradcheck::check(&inputs, H, |t, v| {
            let y = t.conv2d(v[0], v[1])?;
            let b = t.broadcast(v[2], &[1], &[h, w])?;
            let y = t.add(y, b)?;
            let y = t.tanh(y)?;
            weighted_sum(t, y, seed ^ 0x5a5a)
        }).unwrap();
        prop_assert!(r.max_rel_error < TOL, "{:?}", r);
    }

    #[test]
    fn replay_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 2, 4, 4]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let run = || {
            let mut tape = Tape::<f32>::new();
            let xv = tape.param(x.cast());
            let wv = tape.param(w.cast());
            let y = tape.conv2d(xv, wv).unwrap();
            let y = tape.tanh(y).unwrap();
            let s = tape.sum(y).unwrap();
            let g = tape.backward(s).unwrap();
            (tape.value(s).clone(), g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn backward_leaves_forward_values_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::<f64>::new();
    let x = tape.param(random(&mut rng, &[2, 3]));
    let y = tape.exp(x).unwrap();
    let z = tape.mul(y, y).unwrap();
    let s = tape.sum(z).unwrap();
    let before: Vec<Tensor<f64>> = [x, y, z, s]
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect();
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    let after: Vec<Tensor<f64>> = [x, y, z, s]
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn sweep_covers_every_op() {
    let reports = gradcheck::sweep(H).unwrap();
    assert_eq!(reports.len(), 25);
    for (name, r) in reports {
        assert_ok(name, r);
    }
}
