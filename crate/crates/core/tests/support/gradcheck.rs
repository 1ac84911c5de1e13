//! Central finite-difference checks for every differentiable graph operation
//! and the training losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volmoe::autodiff::{Graph, Var};
use volmoe::losses;
use volmoe::tensor::Tensor;
use volmoe::Result;

pub const H: f64 = 1e-5;
pub const RTOL: f64 = 1e-4;
pub const ATOL: f64 = 1e-6;
pub const FIXTURES: usize = 20;

/// A differentiable scalar function of some input tensors.
pub struct Fixture {
    pub inputs: Vec<Tensor>,
    pub build: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub fixtures: usize,
    /// Largest `|analytic - numeric| / (atol + rtol |numeric|)`; at most 1 passes.
    pub worst: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.fixtures >= FIXTURES && self.worst <= 1.0
    }
}

fn eval(f: &Fixture, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = (f.build)(&mut g, &vars).expect("forward");
    g.value(out).item()
}

/// Worst normalized error of one fixture.
pub fn check(f: &Fixture) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = f.inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = (f.build)(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; f.inputs[i].len()]);
        for j in 0..f.inputs[i].len() {
            let mut plus = f.inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = f.inputs.clone();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(f, &plus) - eval(f, &minus)) / (2.0 * H);
            let err = (analytic[j] - numeric).abs() / (ATOL + RTOL * numeric.abs());
            worst = worst.max(err);
        }
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect()
}

/// Reduces any output to a scalar with fixed random weights, so every output
/// element contributes to the checked gradient.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.constant(weights.clone().reshaped(&shape)?);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..5)
}

/// Builds one fixture of the named operation; the output is projected to a
/// scalar when it is not one already.
fn fixture(name: &str, rng: &mut ChaCha8Rng) -> Fixture {
    let (p, q, r) = (dim(rng), dim(rng), dim(rng));
    let w_for = |rng: &mut ChaCha8Rng, n: usize| uniform(rng, &[n], -1.0, 1.0);
    macro_rules! projected {
        ($inputs:expr, $out_len:expr, |$g:ident, $v:ident| $body:expr) => {{
            let w = w_for(rng, $out_len);
            Fixture {
                inputs: $inputs,
                build: Box::new(move |$g: &mut Graph, $v: &[Var]| {
                    let out = $body?;
                    project($g, out, &w)
                }),
            }
        }};
    }
    match name {
        "matmul" => projected!(
            vec![uniform(rng, &[p, q], -1.0, 1.0), uniform(rng, &[q, r], -1.0, 1.0)],
            p * r,
            |g, v| g.matmul(v[0], v[1])
        ),
        "transpose" => projected!(vec![uniform(rng, &[p, q], -1.0, 1.0)], p * q, |g, v| g.transpose(v[0])),
        "add" => projected!(
            vec![uniform(rng, &[p, q], -1.0, 1.0), uniform(rng, &[p, q], -1.0, 1.0)],
            p * q,
            |g, v| g.add(v[0], v[1])
        ),
        "sub" => projected!(
            vec![uniform(rng, &[p, q], -1.0, 1.0), uniform(rng, &[p, q], -1.0, 1.0)],
            p * q,
            |g, v| g.sub(v[0], v[1])
        ),
        "mul" => projected!(
            vec![uniform(rng, &[p, q], -1.0, 1.0), uniform(rng, &[p, q], -1.0, 1.0)],
            p * q,
            |g, v| g.mul(v[0], v[1])
        ),
        "add_row" => projected!(
            vec![uniform(rng, &[p, q], -1.0, 1.0), uniform(rng, &[q], -1.0, 1.0)],
            p * q,
            |g, v| g.add_row(v[0], v[1])
        ),
        "mul_row" => projected!(
            vec![uniform(rng, &[p, q], -1.0, 1.0), uniform(rng, &[q], -1.0, 1.0)],
            p * q,
            |g, v| g.mul_row(v[0], v[1])
        ),
        "scale" => {
            let s = rng.random_range(-2.0..2.0);
            projected!(vec![uniform(rng, &[p, q], -1.0, 1.0)], p * q, |g, v| g.scale(v[0], s))
        }
        "softmax" => {
            let c = q + 1;
            projected!(vec![uniform(rng, &[p, c], -2.0, 2.0)], p * c, |g, v| g.softmax(v[0]))
        }
        "layernorm" => {
            let c = q + 1;
            projected!(
                vec![
                    uniform(rng, &[p, c], -2.0, 2.0),
                    uniform(rng, &[c], 0.5, 1.5),
                    uniform(rng, &[c], -0.5, 0.5),
                ],
                p * c,
                |g, v| g.layernorm(v[0], v[1], v[2])
            )
        }
        "gelu" => projected!(vec![uniform(rng, &[p, q], -3.0, 3.0)], p * q, |g, v| g.gelu(v[0])),
        "sigmoid" => projected!(vec![uniform(rng, &[p, q], -4.0, 4.0)], p * q, |g, v| g.sigmoid(v[0])),
        "sum" => projected!(vec![uniform(rng, &[p, q], -1.0, 1.0)], 1, |g, v| g.sum(v[0])),
        "mean" => projected!(vec![uniform(rng, &[p, q], -1.0, 1.0)], 1, |g, v| g.mean(v[0])),
        "mean_rows" => projected!(vec![uniform(rng, &[p, q], -1.0, 1.0)], q, |g, v| g.mean_rows(v[0])),
        "reshape" => projected!(vec![uniform(rng, &[p, q], -1.0, 1.0)], p * q, |g, v| g.reshape(v[0], &[q * p])),
        "upsample3d" => {
            let grid = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3)];
            let f = rng.random_range(1..4);
            let n: usize = grid.iter().product();
            projected!(vec![uniform(rng, &[n], -1.0, 1.0)], n * f * f * f, |g, v| g.upsample3d(v[0], grid, f))
        }
        "bce_with_logits" => {
            let n = p * q;
            let t = binary(rng, n);
            Fixture {
                inputs: vec![uniform(rng, &[n], -4.0, 4.0)],
                build: Box::new(move |g, v| g.bce_with_logits(v[0], &t)),
            }
        }
        "bce_probs" => {
            let n = p * q;
            let t = binary(rng, n);
            Fixture {
                inputs: vec![uniform(rng, &[n], 0.05, 0.95)],
                build: Box::new(move |g, v| g.bce_probs(v[0], &t, 1e-7)),
            }
        }
        "dice" => {
            let n = p * q + 1;
            let t = binary(rng, n);
            Fixture {
                inputs: vec![uniform(rng, &[n], 0.05, 0.95)],
                build: Box::new(move |g, v| g.dice(v[0], &t, 1e-5)),
            }
        }
        "softmax_cross_entropy" => {
            let m = q + 1;
            let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let t: Vec<f64> = raw.iter().map(|x| x / total).collect();
            Fixture {
                inputs: vec![uniform(rng, &[m], -3.0, 3.0)],
                build: Box::new(move |g, v| g.softmax_cross_entropy(v[0], &t)),
            }
        }
        "loss:dicece" => {
            let n = p * q * r + 1;
            let t = binary(rng, n);
            Fixture {
                inputs: vec![uniform(rng, &[n], -3.0, 3.0)],
                build: Box::new(move |g, v| losses::dicece_loss(g, v[0], &t, losses::DICE_SMOOTH)),
            }
        }
        "loss:dicece_on_probs" => {
            let n = p * q * r + 1;
            let t = binary(rng, n);
            Fixture {
                inputs: vec![uniform(rng, &[n], 0.05, 0.95)],
                build: Box::new(move |g, v| losses::dicece_on_probs(g, v[0], &t, losses::DICE_SMOOTH)),
            }
        }
        "loss:gate_ce" => {
            let m = q + 1;
            let target = rng.random_range(0..m);
            Fixture {
                inputs: vec![uniform(rng, &[m], -3.0, 3.0)],
                build: Box::new(move |g, v| losses::gate_ce_loss(g, v[0], target)),
            }
        }
        "loss:gate_uniform" => {
            let m = q + 1;
            Fixture {
                inputs: vec![uniform(rng, &[m], -3.0, 3.0)],
                build: Box::new(move |g, v| losses::gate_uniform_loss(g, v[0])),
            }
        }
        other => panic!("no fixture for {other}"),
    }
}

pub const OPS: [&str; 21] = [
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "add_row",
    "mul_row",
    "scale",
    "softmax",
    "layernorm",
    "gelu",
    "sigmoid",
    "sum",
    "mean",
    "mean_rows",
    "reshape",
    "upsample3d",
    "bce_with_logits",
    "bce_probs",
    "dice",
    "softmax_cross_entropy",
];

pub const LOSSES: [&str; 4] = ["loss:dicece", "loss:dicece_on_probs", "loss:gate_ce", "loss:gate_uniform"];

pub fn run_op(name: &'static str, seed: u64) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..FIXTURES {
        worst = worst.max(check(&fixture(name, &mut rng)));
    }
    OpReport {
        name,
        fixtures: FIXTURES,
        worst,
    }
}

pub fn run_all(seed: u64) -> Vec<OpReport> {
    OPS.iter()
        .chain(LOSSES.iter())
        .enumerate()
        .map(|(i, name)| run_op(name, seed.wrapping_add(i as u64)))
        .collect()
}
