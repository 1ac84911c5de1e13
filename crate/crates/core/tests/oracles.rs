//! Values computed at 50 digits by `fixtures/make_oracles.py` and frozen in
//! `fixtures/oracles.json`.

use serde_json::Value;

use volmoe::autodiff::{log_sum_exp, Graph};
use volmoe::encoders::positional_encoding;
use volmoe::tensor::Tensor;

const TOL: f64 = 1e-12;

fn oracles() -> Value {
    serde_json::from_str(include_str!("fixtures/oracles.json")).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn close(got: f64, want: f64, what: &str) {
    assert!(
        (got - want).abs() <= TOL * want.abs().max(1.0),
        "{what}: got {got:e}, want {want:e}"
    );
}

fn close_all(got: &[f64], want: &[f64], what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        close(*g, *w, &format!("{what}[{i}]"));
    }
}

#[test]
fn softmax_of_one_two_three() {
    let o = oracles();
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
    let s = g.softmax(x).unwrap();
    close_all(g.value(s).data(), &floats(&o["softmax_123"]), "softmax");
}

#[test]
fn log_sum_exp_including_extreme_magnitudes() {
    for case in oracles()["log_sum_exp"].as_array().unwrap() {
        let z = floats(&case["z"]);
        close(log_sum_exp(&z), case["value"].as_f64().unwrap(), &format!("lse {z:?}"));
    }
}

#[test]
fn bce_with_logits_including_saturated_logits() {
    for case in oracles()["bce_with_logits"].as_array().unwrap() {
        let z = floats(&case["logits"]);
        let t = floats(&case["target"]);
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(z.clone()));
        let l = g.bce_with_logits(v, &t).unwrap();
        close(g.value(l).item(), case["loss"].as_f64().unwrap(), &format!("bce {z:?}"));
    }
}

#[test]
fn gelu_tanh_approximation() {
    for case in oracles()["gelu_tanh"].as_array().unwrap() {
        let x = case["x"].as_f64().unwrap();
        let mut g = Graph::new();
        let v = g.constant(Tensor::scalar(x));
        let y = g.gelu(v).unwrap();
        close(g.value(y).item(), case["value"].as_f64().unwrap(), &format!("gelu({x})"));
    }
}

#[test]
fn layernorm_row() {
    let o = &oracles()["layernorm"];
    let row = floats(&o["row"]);
    let n = row.len();
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, n, row).unwrap());
    let gain = g.constant(Tensor::vector(vec![1.0; n]));
    let bias = g.constant(Tensor::vector(vec![0.0; n]));
    let y = g.layernorm(x, gain, bias).unwrap();
    close_all(g.value(y).data(), &floats(&o["value"]), "layernorm");
}

#[test]
fn dice_loss_value() {
    let o = &oracles()["dice_loss"];
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(floats(&o["probs"])));
    let l = g.dice(p, &floats(&o["target"]), o["eps"].as_f64().unwrap()).unwrap();
    close(g.value(l).item(), o["value"].as_f64().unwrap(), "dice");
}

#[test]
fn positional_encoding_at_five_seven_nine() {
    let o = &oracles()["positional_encoding"];
    let c = floats(&o["coord"]);
    let pe = positional_encoding([c[0], c[1], c[2]], o["channels"].as_u64().unwrap() as usize).unwrap();
    close_all(&pe, &floats(&o["value"]), "pe(5,7,9)");
}
