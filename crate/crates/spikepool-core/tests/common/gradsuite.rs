//! Finite-difference gradient oracle for every differentiable operation,
//! shared between the gradcheck tests and the acceptance suite.
//!
//! The oracle is independent of the backward path: it evaluates the
//! forward twice per coordinate (central differences, step 1e-5, fp64)
//! and compares against the tape's analytic gradients. Each op gets 50
//! random small-tensor cases; the end-to-end soft-mode model graph is
//! checked at a looser 1e-3.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikepool_core::attention::{
    attention_forward, AttentionParams, AttentionVariant,
};
use spikepool_core::layers::{
    avgpool2d, batchnorm, conv2d, linear, maxpool2d, maxpool3d, BatchNormParams, Conv2dParams,
    LinearParams,
};
use spikepool_core::model::{smlp, Model, ModelConfig, SmlpParams};
use spikepool_core::snn::{lif_seq, spike, LifConfig};
use spikepool_core::tensor::{Tape, Tensor};
use spikepool_core::train::cross_entropy;

const FD_STEP: f64 = 1e-5;
const PER_OP_TOL: f64 = 1e-4;
const CASES: usize = 50;
/// Coordinates sampled per input tensor per case.
const COORDS: usize = 4;

/// Central-difference check of `forward` against the tape's gradients.
///
/// `forward` must map the leaf tensors to a scalar loss, rebuilding the
/// graph on every call.
fn check_grads(
    label: &str,
    inputs: &[Tensor],
    tol: f64,
    rng: &mut ChaCha8Rng,
    forward: impl Fn(&Tape, &[Tensor]) -> Tensor,
) {
    // analytic
    let tape = Tape::new();
    let loss = forward(&tape, inputs);
    assert_eq!(loss.numel(), 1, "{label}: loss must be scalar");
    tape.backward(&loss).unwrap();
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| panic!("{label}: missing grad")))
        .collect();
    for t in inputs {
        t.zero_grad();
    }

    // finite differences on sampled coordinates
    let eval = |inputs: &[Tensor]| -> f64 {
        let tape = Tape::inference();
        forward(&tape, inputs).item()
    };
    for (ti, t) in inputs.iter().enumerate() {
        let numel = t.numel();
        let picks: Vec<usize> = if numel <= COORDS {
            (0..numel).collect()
        } else {
            (0..COORDS).map(|_| rng.random_range(0..numel)).collect()
        };
        for &j in &picks {
            let orig = t.data()[j];
            t.apply(|d| d[j] = orig + FD_STEP);
            let up = eval(inputs);
            t.apply(|d| d[j] = orig - FD_STEP);
            let down = eval(inputs);
            t.apply(|d| d[j] = orig);
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = analytic[ti][j];
            let denom = a.abs().max(fd.abs());
            // the absolute escape covers FD roundoff on near-zero slopes
            let ok = (a - fd).abs() < 1e-7 || (a - fd).abs() / denom < tol;
            assert!(
                ok,
                "{label}: input {ti} coord {j}: analytic {a} vs fd {fd}"
            );
        }
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).with_grad()
}

/// Random values bounded away from zero (for kinked or singular ops).
fn rand_away(shape: &[usize], min_abs: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * rng.random_range(min_abs..1.5)
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap().with_grad()
}

fn rand_positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(0.2..2.0)).collect();
    Tensor::from_vec(shape, data).unwrap().with_grad()
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.random_range(1..=3);
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

pub fn elementwise_binary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..CASES {
        let shape = small_shape(&mut rng);
        // alternate same-shape and broadcast cases
        let b_shape: Vec<usize> = if case % 2 == 0 {
            shape.clone()
        } else {
            let keep = rng.random_range(0..=shape.len());
            shape[shape.len() - keep..].to_vec()
        };
        let a = randn(&shape, &mut rng);
        let b = rand_away(&b_shape, 0.5, &mut rng);
        for (name, op) in [
            ("add", 0usize),
            ("sub", 1),
            ("mul", 2),
            ("div", 3),
        ] {
            check_grads(
                &format!("{name} case {case}"),
                &[a.clone(), b.clone()],
                PER_OP_TOL,
                &mut rng,
                move |tape, ins| {
                    let y = match op {
                        0 => tape.add(&ins[0], &ins[1]).unwrap(),
                        1 => tape.sub(&ins[0], &ins[1]).unwrap(),
                        2 => tape.mul(&ins[0], &ins[1]).unwrap(),
                        _ => tape.div(&ins[0], &ins[1]).unwrap(),
                    };
                    // square to exercise nonunit upstream gradients
                    let sq = tape.mul(&y, &y).unwrap();
                    tape.sum(&sq, None).unwrap()
                },
            );
        }
    }
}

pub fn scalar_and_unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for case in 0..CASES {
        let shape = small_shape(&mut rng);
        let c: f64 = rng.random_range(-2.0..2.0);

        let x = randn(&shape, &mut rng);
        check_grads(
            &format!("add_scalar case {case}"),
            &[x],
            PER_OP_TOL,
            &mut rng,
            move |tape, ins| {
                let y = tape.add_scalar(&ins[0], c);
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );

        let x = randn(&shape, &mut rng);
        check_grads(
            &format!("mul_scalar case {case}"),
            &[x],
            PER_OP_TOL,
            &mut rng,
            move |tape, ins| {
                let y = tape.mul_scalar(&ins[0], c);
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );

        let x = rand_away(&shape, 1e-3, &mut rng);
        check_grads(
            &format!("relu case {case}"),
            &[x],
            PER_OP_TOL,
            &mut rng,
            |tape, ins| {
                let y = tape.relu(&ins[0]);
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );

        let x = randn(&shape, &mut rng);
        check_grads(
            &format!("exp case {case}"),
            &[x],
            PER_OP_TOL,
            &mut rng,
            |tape, ins| tape.sum(&tape.exp(&ins[0]), None).unwrap(),
        );

        let x = rand_positive(&shape, &mut rng);
        check_grads(
            &format!("ln case {case}"),
            &[x],
            PER_OP_TOL,
            &mut rng,
            |tape, ins| tape.sum(&tape.ln(&ins[0]), None).unwrap(),
        );

        let x = rand_positive(&shape, &mut rng);
        check_grads(
            &format!("sqrt case {case}"),
            &[x],
            PER_OP_TOL,
            &mut rng,
            |tape, ins| tape.sum(&tape.sqrt(&ins[0]), None).unwrap(),
        );
    }
}

pub fn matmul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for case in 0..CASES {
        let (m, k, n) = (
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        );
        let (a, b) = if case % 3 == 2 {
            // batched with broadcast on the left operand
            let batch = rng.random_range(2..=3);
            (randn(&[batch, m, k], &mut rng), randn(&[k, n], &mut rng))
        } else {
            (randn(&[m, k], &mut rng), randn(&[k, n], &mut rng))
        };
        check_grads(
            &format!("matmul case {case}"),
            &[a, b],
            PER_OP_TOL,
            &mut rng,
            |tape, ins| {
                let y = tape.matmul(&ins[0], &ins[1]).unwrap();
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );
    }
}

pub fn reduce_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for case in 0..CASES {
        let shape = small_shape(&mut rng);
        let axis = rng.random_range(0..shape.len());
        let all = case % 2 == 0;

        let x = randn(&shape, &mut rng);
        check_grads(
            &format!("sum case {case}"),
            &[x],
            PER_OP_TOL,
            &mut rng,
            move |tape, ins| {
                let y = if all {
                    tape.sum(&ins[0], None).unwrap()
                } else {
                    tape.sum(&ins[0], Some(&[axis])).unwrap()
                };
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );

        let x = randn(&shape, &mut rng);
        check_grads(
            &format!("mean case {case}"),
            &[x],
            PER_OP_TOL,
            &mut rng,
            move |tape, ins| {
                let y = if all {
                    tape.mean(&ins[0], None).unwrap()
                } else {
                    tape.mean(&ins[0], Some(&[axis])).unwrap()
                };
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );

        // max: continuous random values make ties measure-zero
        let x = randn(&shape, &mut rng);
        check_grads(
            &format!("max case {case}"),
            &[x],
            PER_OP_TOL,
            &mut rng,
            move |tape, ins| {
                let y = if all {
                    tape.max(&ins[0], None).unwrap()
                } else {
                    tape.max(&ins[0], Some(&[axis])).unwrap()
                };
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );
    }
}

pub fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for case in 0..CASES {
        let (a, b) = (rng.random_range(2..=4), rng.random_range(2..=4));
        let x = randn(&[a, b], &mut rng);
        check_grads(
            &format!("reshape case {case}"),
            &[x],
            PER_OP_TOL,
            &mut rng,
            move |tape, ins| {
                let y = tape.reshape(&ins[0], &[b * a]).unwrap();
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );

        let x = randn(&[a, b, 2], &mut rng);
        check_grads(
            &format!("permute case {case}"),
            &[x],
            PER_OP_TOL,
            &mut rng,
            |tape, ins| {
                let y = tape.permute(&ins[0], &[2, 0, 1]).unwrap();
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );

        let x = randn(&[3, a], &mut rng);
        check_grads(
            &format!("select_stack case {case}"),
            &[x],
            PER_OP_TOL,
            &mut rng,
            |tape, ins| {
                let s0 = tape.select0(&ins[0], 0).unwrap();
                let s2 = tape.select0(&ins[0], 2).unwrap();
                let y = tape.stack0(&[s2.clone(), s0, s2]).unwrap();
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );
    }
}

pub fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for case in 0..CASES {
        let (ci, co) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let k = rng.random_range(1..=3);
        let pad = rng.random_range(0..k);
        let stride = rng.random_range(1..=2);
        let h = rng.random_range(k..=k + 3);
        let w = rng.random_range(k..=k + 3);
        let x = randn(&[2, ci, h, w], &mut rng);
        let weight = randn(&[co, ci, k, k], &mut rng);
        let bias = randn(&[co], &mut rng);
        check_grads(
            &format!("conv2d case {case} (k={k} s={stride} p={pad})"),
            &[x, weight, bias],
            PER_OP_TOL,
            &mut rng,
            move |tape, ins| {
                let p = Conv2dParams::new(ins[1].clone(), Some(ins[2].clone()), stride, pad)
                    .unwrap();
                let y = conv2d(tape, &ins[0], &p).unwrap();
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );
    }
}

pub fn batchnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for case in 0..CASES {
        let c = rng.random_range(1..=3);
        let x = randn(&[2, c, 2, 3], &mut rng);
        let gamma = rand_away(&[c], 0.3, &mut rng);
        let beta = randn(&[c], &mut rng);
        let training = case % 2 == 0;
        check_grads(
            &format!("batchnorm case {case} training={training}"),
            &[x, gamma, beta],
            PER_OP_TOL,
            &mut rng,
            move |tape, ins| {
                let p = BatchNormParams {
                    gamma: ins[1].clone(),
                    beta: ins[2].clone(),
                    running_mean: Tensor::zeros(&[c]),
                    running_var: Tensor::ones(&[c]),
                    momentum: 0.1,
                    eps: 1e-5,
                };
                let y = batchnorm(tape, &ins[0], &p, training).unwrap();
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );
    }
}

pub fn pooling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    for case in 0..CASES {
        let k = rng.random_range(2..=3);
        let pad = rng.random_range(0..k.min(2));
        let stride = rng.random_range(1..=2);
        let h = rng.random_range(k + 1..=k + 3);
        let x = randn(&[1, 2, h, h], &mut rng);
        check_grads(
            &format!("maxpool2d case {case}"),
            std::slice::from_ref(&x),
            PER_OP_TOL,
            &mut rng,
            move |tape, ins| {
                let y = maxpool2d(tape, &ins[0], k, stride, pad).unwrap();
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );
        let x = randn(&[1, 2, h, h], &mut rng);
        check_grads(
            &format!("avgpool2d case {case}"),
            std::slice::from_ref(&x),
            PER_OP_TOL,
            &mut rng,
            move |tape, ins| {
                let y = avgpool2d(tape, &ins[0], k, stride, pad).unwrap();
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );
        let x = randn(&[3, 1, 2, 4, 4], &mut rng);
        check_grads(
            &format!("maxpool3d case {case}"),
            std::slice::from_ref(&x),
            PER_OP_TOL,
            &mut rng,
            |tape, ins| {
                let y = maxpool3d(tape, &ins[0], (2, 3, 3), (1, 1, 1), (0, 1), 1).unwrap();
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );
    }
}

pub fn linear_and_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    for case in 0..CASES {
        let (b, din, dout) = (
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(2..=4),
        );
        let x = randn(&[b, din], &mut rng);
        let w = randn(&[din, dout], &mut rng);
        let bias = randn(&[dout], &mut rng);
        check_grads(
            &format!("linear case {case}"),
            &[x, w, bias],
            PER_OP_TOL,
            &mut rng,
            |tape, ins| {
                let p = LinearParams {
                    weight: ins[1].clone(),
                    bias: ins[2].clone(),
                };
                let y = linear(tape, &ins[0], &p).unwrap();
                let sq = tape.mul(&y, &y).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );

        let logits = randn(&[b, dout], &mut rng);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..dout)).collect();
        check_grads(
            &format!("cross_entropy case {case}"),
            std::slice::from_ref(&logits),
            1e-6,
            &mut rng,
            move |tape, ins| cross_entropy(tape, &ins[0], &labels).unwrap(),
        );
    }
}

pub fn soft_spike_and_lif_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let lif = LifConfig::default().soft();
    for case in 0..CASES {
        let shape = small_shape(&mut rng);
        let u = randn(&shape, &mut rng);
        check_grads(
            &format!("soft spike case {case}"),
            std::slice::from_ref(&u),
            PER_OP_TOL,
            &mut rng,
            move |tape, ins| {
                let s = spike(tape, &ins[0], &lif);
                let sq = tape.mul(&s, &s).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );

        let x = randn(&[3, 2, 2], &mut rng);
        check_grads(
            &format!("soft lif_seq case {case}"),
            std::slice::from_ref(&x),
            PER_OP_TOL,
            &mut rng,
            move |tape, ins| {
                let s = lif_seq(tape, &ins[0], &lif).unwrap();
                let sq = tape.mul(&s, &s).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );
    }
}

pub fn attention_and_smlp_soft_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let lif = LifConfig::default().soft();
    for case in 0..CASES {
        let d = 8;
        let y = randn(&[2, 1, d, 2, 2], &mut rng);
        let variant = if case % 2 == 0 {
            AttentionVariant::pool_max2d()
        } else {
            AttentionVariant::ssa()
        };
        let params = AttentionParams::init(&variant, d, &mut rng);
        check_grads(
            &format!("attention({}) case {case}", variant.kind.as_str()),
            std::slice::from_ref(&y),
            PER_OP_TOL,
            &mut rng,
            move |tape, ins| {
                let out = attention_forward(tape, &ins[0], &variant, &params, &lif, false).unwrap();
                let sq = tape.mul(&out, &out).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );

        let z = randn(&[2, 1, d, 2, 2], &mut rng);
        let mlp = SmlpParams {
            expand: spikepool_core::layers::ConvBn::init(d, 2 * d, 1, 1, 0, &mut rng),
            contract: spikepool_core::layers::ConvBn::init(2 * d, d, 1, 1, 0, &mut rng),
        };
        check_grads(
            &format!("smlp case {case}"),
            std::slice::from_ref(&z),
            PER_OP_TOL,
            &mut rng,
            move |tape, ins| {
                let out = smlp(tape, &ins[0], &mlp, &lif, false).unwrap();
                let sq = tape.mul(&out, &out).unwrap();
                tape.sum(&sq, None).unwrap()
            },
        );
    }
}

/// End-to-end soft-mode gradient check on the tiny model with T=2:
/// sampled parameter coordinates across every tensor plus the input.
pub fn end_to_end_soft_mode_tiny() {
    let mut cfg = ModelConfig::preset("spikepool-tiny").unwrap();
    cfg.timesteps = 2;
    let mut model = Model::new(cfg, 5).unwrap();
    model.set_spike_mode(spikepool_core::snn::SpikeMode::Soft);

    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let numel = 2 * 2 * 2 * 64 * 64;
    let data: Vec<f64> = (0..numel)
        .map(|_| if rng.random::<f64>() < 0.15 { 1.0 } else { 0.0 })
        .collect();
    let x = Tensor::from_vec(&[2, 2, 2, 64, 64], data).unwrap();
    let labels = vec![0usize, 2];

    let forward = |tape: &Tape| -> Tensor {
        let logits = model.forward(tape, &x, true).unwrap();
        cross_entropy(tape, &logits, &labels).unwrap()
    };

    let tape = Tape::new();
    let loss = forward(&tape);
    tape.backward(&loss).unwrap();
    let params = model.parameters();
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad().unwrap()).collect();
    for p in &params {
        p.zero_grad();
    }

    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        // two sampled coordinates per parameter tensor
        for _ in 0..2 {
            let j = rng.random_range(0..p.numel());
            let orig = p.data()[j];
            p.apply(|d| d[j] = orig + FD_STEP);
            let up = forward(&Tape::inference()).item();
            p.apply(|d| d[j] = orig - FD_STEP);
            let down = forward(&Tape::inference()).item();
            p.apply(|d| d[j] = orig);
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = analytic[pi][j];
            let denom = a.abs().max(fd.abs());
            let rel = if denom > 1e-6 {
                (a - fd).abs() / denom
            } else {
                // both effectively zero
                0.0
            };
            worst = worst.max(rel);
            assert!(
                rel < 1e-3,
                "param {pi} coord {j}: analytic {a} vs fd {fd} (rel {rel})"
            );
            checked += 1;
        }
    }
    assert!(checked >= 50, "only {checked} coordinates checked");
    println!("end-to-end soft-mode gradcheck: {checked} coords, worst rel err {worst:.3e}");
}
