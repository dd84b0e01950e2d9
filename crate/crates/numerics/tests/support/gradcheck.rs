//! Central-difference gradient checks for every differentiable tape op.
//!
//! Shared between the numerics integration tests and the acceptance suite.
//! The finite-difference side never touches `Tape::backward`.

use mrgr_numerics::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const CASES_PER_OP: usize = 20;
pub const MAX_REL_ERR: f64 = 1e-4;

type Build = dyn Fn(&Tape, &[Var]) -> Result<Var>;

/// Relative error. Below a magnitude of 1e-4 the denominator is floored, so
/// near-zero gradients are held to an absolute 1e-8 instead; central
/// differences carry ~1e-10 of rounding noise at this step size.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Projects the op output onto fixed random weights so every output
/// component contributes to the scalar being differentiated.
fn scalar_loss(
    tape: &Tape,
    inputs: &[Tensor],
    weights: &Tensor,
    build: &Build,
) -> Result<(Var, Vec<Var>)> {
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(tape, &vars)?;
    let w = tape.leaf(weights.clone());
    let loss = tape.sum(tape.mul(out, w)?)?;
    Ok((loss, vars))
}

fn loss_value(inputs: &[Tensor], weights: &Tensor, build: &Build) -> f64 {
    let tape = Tape::new();
    let (loss, _) = scalar_loss(&tape, inputs, weights, build).expect("forward");
    tape.value(loss).unwrap().item()
}

/// Max relative error over all input elements between tape and central
/// differences. `differentiable` marks which inputs to probe.
pub fn check(
    inputs: &[Tensor],
    differentiable: &[bool],
    build: &Build,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&tape, &vars).expect("forward");
        tape.shape(out).unwrap()
    };
    let n: usize = out_shape.iter().product();
    let weights = Tensor::new(
        out_shape,
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();

    let tape = Tape::new();
    let (loss, vars) = scalar_loss(&tape, inputs, &weights, build).expect("forward");
    let grads = tape.backward(loss).expect("backward");

    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        if !differentiable[k] {
            continue;
        }
        let analytic = grads.wrt(vars[k]).unwrap();
        for j in 0..input.len() {
            let probe = |delta: f64| {
                let mut shifted = inputs.to_vec();
                let mut data = shifted[k].data().to_vec();
                data[j] += delta;
                shifted[k] = Tensor::new(input.shape().to_vec(), data).unwrap();
                loss_value(&shifted, &weights, build)
            };
            let numeric = (probe(STEP) - probe(-STEP)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    Tensor::vector(raw.into_iter().map(|x| x / s).collect()).unwrap()
}

/// One named op under test: draws random inputs, returns the max error.
pub struct OpCase {
    pub name: &'static str,
    pub run: fn(&mut ChaCha8Rng) -> f64,
}

pub fn all_ops() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            run: |rng| {
                let (m, k, n) = (
                    rng.gen_range(1..5),
                    rng.gen_range(1..5),
                    rng.gen_range(1..5),
                );
                let ins = [random_tensor(rng, &[m, k]), random_tensor(rng, &[k, n])];
                check(&ins, &[true, true], &|t, v| t.matmul(v[0], v[1]), rng)
            },
        },
        OpCase {
            name: "transpose",
            run: |rng| {
                let d0 = rng.gen_range(1..5);
                let d1 = rng.gen_range(1..5);
                let ins = [random_tensor(rng, &[d0, d1])];
                check(&ins, &[true], &|t, v| t.transpose(v[0]), rng)
            },
        },
        OpCase {
            name: "add",
            run: |rng| {
                let s = [rng.gen_range(1..4), rng.gen_range(1..5)];
                let ins = [random_tensor(rng, &s), random_tensor(rng, &s)];
                check(&ins, &[true, true], &|t, v| t.add(v[0], v[1]), rng)
            },
        },
        OpCase {
            name: "add_row",
            run: |rng| {
                let (r, c) = (rng.gen_range(1..4), rng.gen_range(1..5));
                let ins = [random_tensor(rng, &[r, c]), random_tensor(rng, &[c])];
                check(&ins, &[true, true], &|t, v| t.add_row(v[0], v[1]), rng)
            },
        },
        OpCase {
            name: "mul",
            run: |rng| {
                let s = [rng.gen_range(1..4), rng.gen_range(1..5)];
                let ins = [random_tensor(rng, &s), random_tensor(rng, &s)];
                check(&ins, &[true, true], &|t, v| t.mul(v[0], v[1]), rng)
            },
        },
        OpCase {
            name: "scale",
            run: |rng| {
                let d0 = rng.gen_range(1..6);
                let ins = [random_tensor(rng, &[d0])];
                check(&ins, &[true], &|t, v| t.scale(v[0], -1.7), rng)
            },
        },
        OpCase {
            name: "relu",
            run: |rng| {
                let d0 = rng.gen_range(1..4);
                let d1 = rng.gen_range(1..5);
                let ins = [random_tensor(rng, &[d0, d1])];
                check(&ins, &[true], &|t, v| t.relu(v[0]), rng)
            },
        },
        OpCase {
            name: "layer_norm",
            run: |rng| {
                let (r, c) = (rng.gen_range(1..4), rng.gen_range(2..6));
                let ins = [
                    random_tensor(rng, &[r, c]),
                    random_tensor(rng, &[c]),
                    random_tensor(rng, &[c]),
                ];
                check(
                    &ins,
                    &[true, true, true],
                    &|t, v| t.layer_norm(v[0], v[1], v[2]),
                    rng,
                )
            },
        },
        OpCase {
            name: "softmax",
            run: |rng| {
                let tau = [0.5, 1.0, 2.0][rng.gen_range(0..3)];
                let d0 = rng.gen_range(1..7);
                let ins = [random_tensor(rng, &[d0])];
                check(&ins, &[true], &move |t, v| t.softmax(v[0], tau), rng)
            },
        },
        OpCase {
            name: "causal_softmax",
            run: |rng| {
                let n = rng.gen_range(1..5);
                let ins = [random_tensor(rng, &[n, n])];
                check(&ins, &[true], &|t, v| t.causal_softmax(v[0]), rng)
            },
        },
        OpCase {
            name: "gather_rows",
            run: |rng| {
                let d0 = rng.gen_range(1..4);
                let ins = [random_tensor(rng, &[4, d0])];
                check(&ins, &[true], &|t, v| t.gather_rows(v[0], &[2, 0, 2]), rng)
            },
        },
        OpCase {
            name: "concat_rows",
            run: |rng| {
                let c = rng.gen_range(1..4);
                let ins = [random_tensor(rng, &[c]), random_tensor(rng, &[2, c])];
                check(
                    &ins,
                    &[true, true],
                    &|t, v| t.concat_rows(&[v[0], v[1]]),
                    rng,
                )
            },
        },
        OpCase {
            name: "select_rows",
            run: |rng| {
                let d0 = rng.gen_range(1..4);
                let ins = [random_tensor(rng, &[3, d0])];
                check(&ins, &[true], &|t, v| t.select_rows(v[0], &[1, 1, 2]), rng)
            },
        },
        OpCase {
            name: "cross_entropy",
            run: |rng| {
                let ins = [random_tensor(rng, &[2, 5])];
                check(&ins, &[true], &|t, v| t.cross_entropy(v[0], &[4, 1]), rng)
            },
        },
        OpCase {
            name: "kl_div",
            run: |rng| {
                let n = rng.gen_range(2..6);
                let p = random_distribution(rng, n);
                let ins = [random_distribution(rng, n)];
                check(&ins, &[true], &move |t, v| t.kl_div(&p, v[0]), rng)
            },
        },
        OpCase {
            name: "sum",
            run: |rng| {
                let d0 = rng.gen_range(1..4);
                let ins = [random_tensor(rng, &[d0, 3])];
                check(&ins, &[true], &|t, v| t.sum(v[0]), rng)
            },
        },
        OpCase {
            name: "softmax_then_nll",
            run: |rng| {
                let ins = [random_tensor(rng, &[1, 6])];
                check(
                    &ins,
                    &[true],
                    &|t, v| {
                        let s = t.softmax(v[0], 1.0)?;
                        t.cross_entropy(s, &[3])
                    },
                    rng,
                )
            },
        },
        OpCase {
            name: "softmax_then_kl",
            run: |rng| {
                let p = random_distribution(rng, 5);
                let ins = [random_tensor(rng, &[5])];
                check(
                    &ins,
                    &[true],
                    &move |t, v| {
                        let s = t.softmax(v[0], 0.7)?;
                        t.kl_div(&p, s)
                    },
                    rng,
                )
            },
        },
    ]
}

/// Runs `CASES_PER_OP` random cases per op and returns `(name, worst error)`.
pub fn run_all(seed: u64) -> Vec<(&'static str, f64)> {
    all_ops()
        .into_iter()
        .map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ case.name.len() as u64);
            let worst = (0..CASES_PER_OP)
                .map(|_| (case.run)(&mut rng))
                .fold(0.0, f64::max);
            (case.name, worst)
        })
        .collect()
}
