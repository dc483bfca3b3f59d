//! Central-difference gradient checks for every tape primitive (64-bit,
//! step 1e-4, relative tolerance 1e-4).

#![allow(clippy::needless_range_loop)] // coordinate loops mutate while indexing

use tunet_core::rng;
use tunet_core::tape::{Precision, Tape, Var};
use tunet_core::tensor::Tensor;
use tunet_core::Result;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng::seeded(seed, rng::STREAM_GRADCHECK);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng::uniform(&mut r, lo, hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Deterministic non-uniform weights so transposed/permuted outputs cannot
/// cancel in the scalar loss.
fn loss_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 + (i.wrapping_mul(2654435761) % 1000) as f64 / 1000.0)
        .collect()
}

fn loss_of(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> f64 {
    let mut tape = Tape::new(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let w = loss_weights(tape.data(out).len());
    let wv = tape.leaf(tape.shape(out).to_vec(), w, false).unwrap();
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.data(loss)[0]
}

fn check_gradients(
    name: &str,
    mut inputs: Vec<Tensor>,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) {
    // analytic
    let mut tape = Tape::new(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = build(&mut tape, &vars).unwrap();
    let w = loss_weights(tape.data(out).len());
    let wv = tape.leaf(tape.shape(out).to_vec(), w, false).unwrap();
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(tape);

    // central differences against the same computation
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[ei];
            inputs[ti].data_mut()[ei] = orig + STEP;
            let lp = loss_of(&inputs, &build);
            inputs[ti].data_mut()[ei] = orig - STEP;
            let lm = loss_of(&inputs, &build);
            inputs[ti].data_mut()[ei] = orig;
            let numeric = (lp - lm) / (2.0 * STEP);
            let a = analytic[ti][ei];
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < 1e-8 { 0.0 } else { (a - numeric).abs() / denom };
            assert!(
                rel <= TOL,
                "{name}: input {ti} coord {ei}: analytic {a}, numeric {numeric}, rel {rel}"
            );
        }
    }
}

#[test]
fn grad_matmul() {
    check_gradients(
        "matmul",
        vec![
            random_tensor(&[3, 4], 1, -1.0, 1.0),
            random_tensor(&[4, 2], 2, -1.0, 1.0),
        ],
        |t, v| t.matmul(v[0], v[1]),
    );
}

#[test]
fn grad_conv2d_k1() {
    check_gradients(
        "conv2d k=1",
        vec![
            random_tensor(&[3, 4, 4], 3, -1.0, 1.0),
            random_tensor(&[2, 3, 1, 1], 4, -1.0, 1.0),
            random_tensor(&[2], 5, -0.5, 0.5),
        ],
        |t, v| t.conv2d(v[0], v[1], v[2]),
    );
}

#[test]
fn grad_conv2d_k3() {
    check_gradients(
        "conv2d k=3",
        vec![
            random_tensor(&[2, 5, 5], 6, -1.0, 1.0),
            random_tensor(&[3, 2, 3, 3], 7, -1.0, 1.0),
            random_tensor(&[3], 8, -0.5, 0.5),
        ],
        |t, v| t.conv2d(v[0], v[1], v[2]),
    );
}

#[test]
fn grad_maxpool() {
    check_gradients(
        "maxpool2d",
        vec![random_tensor(&[2, 4, 4], 9, -2.0, 2.0)],
        |t, v| t.maxpool2d(v[0]),
    );
}

#[test]
fn grad_bilinear_upsample() {
    check_gradients(
        "bilinear_upsample2x",
        vec![random_tensor(&[2, 3, 3], 10, -2.0, 2.0)],
        |t, v| t.bilinear_upsample2x(v[0]),
    );
}

#[test]
fn grad_layernorm() {
    check_gradients(
        "layernorm",
        vec![
            random_tensor(&[3, 8], 11, -2.0, 2.0),
            random_tensor(&[8], 12, 0.5, 1.5),
            random_tensor(&[8], 13, -0.5, 0.5),
        ],
        |t, v| t.layernorm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn grad_softmax() {
    check_gradients(
        "softmax_lastdim",
        vec![random_tensor(&[3, 5], 14, -3.0, 3.0)],
        |t, v| t.softmax_lastdim(v[0]),
    );
}

#[test]
fn grad_elu() {
    // inputs kept away from the kink at 0 so central differences are valid
    let mut x = random_tensor(&[2, 6], 15, -2.0, 2.0);
    for v in x.data_mut() {
        if v.abs() < 0.01 {
            *v += 0.05;
        }
    }
    check_gradients("elu", vec![x], |t, v| t.elu(v[0], 1.0));
    let mut y = random_tensor(&[6], 16, -2.0, 2.0);
    for v in y.data_mut() {
        if v.abs() < 0.01 {
            *v += 0.05;
        }
    }
    check_gradients("elu alpha=0.7", vec![y], |t, v| t.elu(v[0], 0.7));
}

#[test]
fn grad_sigmoid() {
    check_gradients(
        "sigmoid",
        vec![random_tensor(&[2, 6], 17, -3.0, 3.0)],
        |t, v| t.sigmoid(v[0]),
    );
}

#[test]
fn grad_elementwise() {
    check_gradients(
        "add",
        vec![
            random_tensor(&[2, 3], 18, -1.0, 1.0),
            random_tensor(&[2, 3], 19, -1.0, 1.0),
        ],
        |t, v| t.add(v[0], v[1]),
    );
    check_gradients(
        "mul",
        vec![
            random_tensor(&[2, 3], 20, -1.0, 1.0),
            random_tensor(&[2, 3], 21, -1.0, 1.0),
        ],
        |t, v| t.mul(v[0], v[1]),
    );
    check_gradients("scale", vec![random_tensor(&[5], 22, -1.0, 1.0)], |t, v| {
        t.scale(v[0], -2.5)
    });
    check_gradients(
        "add_row_bias",
        vec![
            random_tensor(&[3, 4], 23, -1.0, 1.0),
            random_tensor(&[4], 24, -1.0, 1.0),
        ],
        |t, v| t.add_row_bias(v[0], v[1]),
    );
}

#[test]
fn grad_concat_and_slice() {
    check_gradients(
        "concat_channels",
        vec![
            random_tensor(&[1, 3, 3], 25, -1.0, 1.0),
            random_tensor(&[2, 3, 3], 26, -1.0, 1.0),
        ],
        |t, v| t.concat_channels(v[0], v[1]),
    );
    check_gradients(
        "slice+concat_cols",
        vec![random_tensor(&[3, 6], 27, -1.0, 1.0)],
        |t, v| {
            let a = t.slice_cols(v[0], 0, 2)?;
            let b = t.slice_cols(v[0], 2, 4)?;
            t.concat_cols(b, a) // swapped on purpose
        },
    );
}

#[test]
fn grad_layout_ops() {
    check_gradients(
        "reshape",
        vec![random_tensor(&[2, 6], 28, -1.0, 1.0)],
        |t, v| t.reshape(v[0], vec![3, 4]),
    );
    check_gradients(
        "transpose_last2",
        vec![random_tensor(&[2, 3, 4], 29, -1.0, 1.0)],
        |t, v| t.transpose_last2(v[0]),
    );
    check_gradients(
        "patchify",
        vec![random_tensor(&[2, 4, 4], 30, -1.0, 1.0)],
        |t, v| t.patchify(v[0], 2),
    );
    check_gradients(
        "unpatchify",
        vec![random_tensor(&[4, 8], 31, -1.0, 1.0)],
        |t, v| t.unpatchify(v[0], 2, 4, 4),
    );
}

#[test]
fn grad_bce() {
    let pred = random_tensor(&[1, 2, 3], 32, 0.05, 0.95);
    check_gradients("bce_loss", vec![pred], |t, v| {
        let target = t
            .leaf(vec![1, 2, 3], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0], false)
            .unwrap();
        t.bce_loss(v[0], target)
    });
}

#[test]
fn bce_pointwise_gradient_formula() {
    // ∂bce/∂p = (p−y)/(p(1−p))/N on the unclamped region, within 1e-6 of FD
    let pred = random_tensor(&[1, 2, 2], 33, 0.1, 0.9);
    let target = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
    let mut tape = Tape::new(Precision::F64);
    let p = tape.param(&pred);
    let t = tape.constant(&target);
    let loss = tape.bce_loss(p, t).unwrap();
    tape.backward(loss).unwrap();
    let grad = tape.grad(p).unwrap();
    let n = 4.0;
    for i in 0..4 {
        let pv = pred.data()[i];
        let yv = target.data()[i];
        let formula = (pv - yv) / (pv * (1.0 - pv)) / n;
        assert!((grad[i] - formula).abs() <= 1e-12);
    }
    let fd = tunet_core::gradcheck::bce_grad_vs_fd(&pred, &target).unwrap();
    assert!(fd <= 1e-6, "max abs FD deviation {fd}");
}
