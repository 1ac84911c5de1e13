//! Parameterized layers shared by the encoders, decoders and the gate.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Param, Tensor};

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            w: Param::new(format!("{name}.w"), Tensor::xavier(fan_in, fan_out, rng)),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn zeros(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Param::new(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out])),
            b: Param::new(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn fan_out(&self) -> usize {
        self.w.tensor.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.w);
        let b = g.param(&self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w, &mut self.b]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

impl LayerNorm {
    pub fn new(name: &str, width: usize) -> Self {
        LayerNorm {
            gain: Param::new(format!("{name}.gain"), Tensor::filled(&[width], 1.0)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        g.layernorm(x, gain, bias)
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Single-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new<R: Rng>(name: &str, width: usize, rng: &mut R) -> Self {
        Attention {
            q: Linear::new(&format!("{name}.q"), width, width, rng),
            k: Linear::new(&format!("{name}.k"), width, width, rng),
            v: Linear::new(&format!("{name}.v"), width, width, rng),
            o: Linear::new(&format!("{name}.o"), width, width, rng),
        }
    }

    /// `query: [nq, c]` attends over `context: [nk, c]`; returns `[nq, c]`.
    pub fn forward(&self, g: &mut Graph, query: Var, context: Var) -> Result<Var> {
        let width = self.q.fan_out();
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (width as f64).sqrt())?;
        let weights = g.softmax(scores)?;
        let mixed = g.matmul(weights, v)?;
        self.o.forward(g, mixed)
    }

    pub fn params(&self) -> Vec<&Param> {
        [&self.q, &self.k, &self.v, &self.o]
            .into_iter()
            .flat_map(Linear::params)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
            .into_iter()
            .flat_map(Linear::params_mut)
            .collect()
    }
}

/// Two-layer perceptron `width -> hidden -> width` with GELU.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(name: &str, width: usize, hidden: usize, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(&format!("{name}.fc1"), width, hidden, rng),
            fc2: Linear::new(&format!("{name}.fc2"), hidden, width, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.fc1.params();
        v.extend(self.fc2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.fc1.params_mut();
        v.extend(self.fc2.params_mut());
        v
    }
}

/// `norm(x + f(x))`.
pub(crate) fn residual_norm(g: &mut Graph, x: Var, fx: Var, norm: &LayerNorm) -> Result<Var> {
    let s = g.add(x, fx)?;
    norm.forward(g, s)
}
