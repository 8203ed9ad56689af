//! Central finite-difference oracle for tape gradients.
//!
//! The oracle only evaluates forward values, so it is independent of the
//! backward rules it checks.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst disagreement found by [`check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a − n| / max(|a|, |n|, 1)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compare backward gradients of `f` against central differences with step `h`.
///
/// `f` receives a fresh tape plus one parameter leaf per input and must
/// return a one-element output.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("every input is a parameter");
        for idx in 0..inputs[which].numel() {
            let orig = inputs[which].data()[idx];
            work[which].data_mut()[idx] = orig + h;
            let up = eval(&work)?;
            work[which].data_mut()[idx] = orig - h;
            let down = eval(&work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[idx];
            let err = rel_error(a, numeric);
            if err > report.max_rel_error {
                report = GradReport {
                    max_rel_error: err,
                    worst_input: which,
                    worst_index: idx,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Deterministic values in `[-1, 1)` from a 64-bit LCG.
fn fill(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    Tensor::from_fn(dims, |_| {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

/// Same as [`fill`] with magnitudes in `[0.1, 1.1)`.
fn fill_away_from_zero(dims: &[usize], seed: u64) -> Tensor<f64> {
    fill(dims, seed).map(|v| if v < 0.0 { v - 0.1 } else { v + 0.1 })
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(fill(tape.dims(y), seed));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Check every tape operation once on fixed pseudo-random inputs.
///
/// Returns one report per operation, named by the op.
pub fn sweep(h: f64) -> Result<Vec<(&'static str, GradReport)>> {
    type Case = (
        &'static str,
        Vec<Tensor<f64>>,
        fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    );
    let d = [2, 3, 4];
    let cases: Vec<Case> = vec![
        ("add", vec![fill(&d, 1), fill(&d, 2)], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 90)
        }),
        ("sub", vec![fill(&d, 3), fill(&d, 4)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y, 91)
        }),
        ("mul", vec![fill(&d, 5), fill(&d, 6)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 92)
        }),
        ("scale", vec![fill(&d, 7)], |t, v| {
            let y = t.scale(v[0], -1.7)?;
            weighted_sum(t, y, 93)
        }),
        ("add_scalar", vec![fill(&d, 8)], |t, v| {
            let y = t.add_scalar(v[0], 0.3)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 94)
        }),
        (
            "matmul",
            vec![fill(&[3, 5], 9), fill(&[5, 4], 10)],
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, 95)
            },
        ),
        (
            "conv2d 1x1",
            vec![fill(&[2, 3, 5, 4], 11), fill(&[4, 3, 1, 1], 12)],
            |t, v| {
                let y = t.conv2d(v[0], v[1])?;
                weighted_sum(t, y, 96)
            },
        ),
        (
            "conv2d 3x3",
            vec![fill(&[2, 3, 5, 4], 13), fill(&[4, 3, 3, 3], 14)],
            |t, v| {
                let y = t.conv2d(v[0], v[1])?;
                weighted_sum(t, y, 97)
            },
        ),
        ("relu", vec![fill_away_from_zero(&d, 15)], |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, 98)
        }),
        ("tanh", vec![fill(&d, 16)], |t, v| {
            let y = t.tanh(v[0])?;
            weighted_sum(t, y, 99)
        }),
        ("exp", vec![fill(&d, 17)], |t, v| {
            let y = t.exp(v[0])?;
            weighted_sum(t, y, 100)
        }),
        ("log", vec![fill(&d, 18).map(|v| v.abs() + 0.2)], |t, v| {
            let y = t.log(v[0])?;
            weighted_sum(t, y, 101)
        }),
        ("log_abs", vec![fill_away_from_zero(&d, 19)], |t, v| {
            let y = t.log_abs(v[0])?;
            weighted_sum(t, y, 102)
        }),
        ("sigmoid", vec![fill(&d, 20).map(|v| 3.0 * v)], |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y, 103)
        }),
        (
            "log_sigmoid",
            vec![fill(&d, 21).map(|v| 3.0 * v)],
            |t, v| {
                let y = t.log_sigmoid(v[0])?;
                weighted_sum(t, y, 104)
            },
        ),
        ("sum", vec![fill(&d, 22)], |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        }),
        ("sum_rows", vec![fill(&d, 23)], |t, v| {
            let y = t.sum_rows(v[0])?;
            weighted_sum(t, y, 105)
        }),
        ("mean", vec![fill(&d, 24)], |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        }),
        ("channel_split", vec![fill(&[2, 4, 2, 2], 25)], |t, v| {
            let y = t.channel_split(v[0], 1, 2)?;
            weighted_sum(t, y, 106)
        }),
        (
            "channel_concat",
            vec![fill(&[2, 1, 2, 2], 26), fill(&[2, 3, 2, 2], 27)],
            |t, v| {
                let y = t.channel_concat(&[v[1], v[0]])?;
                weighted_sum(t, y, 107)
            },
        ),
        ("reshape", vec![fill(&[2, 4, 2, 2], 28)], |t, v| {
            let y = t.reshape(v[0], &[4, 8])?;
            let y = t.tanh(y)?;
            weighted_sum(t, y, 108)
        }),
        ("broadcast", vec![fill(&[3], 29)], |t, v| {
            let y = t.broadcast(v[0], &[2], &[2, 2])?;
            let y = t.tanh(y)?;
            weighted_sum(t, y, 109)
        }),
        ("squeeze", vec![fill(&[2, 2, 4, 4], 30)], |t, v| {
            let y = t.squeeze(v[0])?;
            weighted_sum(t, y, 110)
        }),
        ("unsqueeze", vec![fill(&[2, 8, 2, 2], 31)], |t, v| {
            let y = t.unsqueeze(v[0])?;
            weighted_sum(t, y, 111)
        }),
        (
            "log_abs_det",
            vec![fill(&[4, 4], 32)
                .map(|v| v * 0.5)
                .zip_map(
                    &Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 2.0 } else { 0.0 }),
                    "eye",
                    |a, b| a + b,
                )
                .expect("same dims")],
            |t, v| t.log_abs_det(v[0], 1e-12),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| check(&inputs, h, f).map(|r| (name, r)))
        .collect()
}
