//! Dense layers shared by every trainable component.

use alloc::format;

use crate::error::Result;
use crate::rng::{self, Rng};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Affine map `x·W + b` with `W: [input × output]`, `b: [1 × output]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    /// Uniform `±1/√input` initialization for weights and bias.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt(input.max(1) as f64);
        let w = rng::uniform_tensor(rng, input, output, -bound, bound);
        let b = rng::uniform_tensor(rng, 1, output, -bound, bound);
        Linear {
            weight: store.add(format!("{name}.w"), w),
            bias: store.add(format!("{name}.b"), b),
            input,
            output,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store
            .set_value(self.weight, Tensor::zeros(self.input, self.output))
            .expect("shape preserved");
        store
            .set_value(self.bias, Tensor::zeros(1, self.output))
            .expect("shape preserved");
    }
}

/// `input → hidden (ReLU) → output`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut Rng,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), input, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, output, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        self.out.forward(g, h)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.hidden.zero(store);
        self.out.zero(store);
    }
}
