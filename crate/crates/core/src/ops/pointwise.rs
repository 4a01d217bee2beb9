use crate::error::Result;
use crate::graph::{Graph, Op, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pointwise {
    Relu,
    Sigmoid,
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn pointwise(&mut self, input: Var, kind: Pointwise) -> Result<Var> {
        match kind {
            Pointwise::Relu => self.relu(input),
            Pointwise::Sigmoid => self.sigmoid(input),
        }
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| v.max(0.0));
        self.push(out, Op::Relu(input), "relu")
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(sigmoid_scalar);
        self.push(out, Op::Sigmoid(input), "sigmoid")
    }
}
