//! Fully connected layers with a plain forward pass and a taped one.

use rand::Rng;

use crate::error::{Error, Result};
use crate::format::Container;
use crate::numerics::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    fn tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::input(format!("unknown activation {other:?}"))),
        }
    }
}

/// `y = act(x·W + b)` with `W` stored `fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.cols() {
            return Err(Error::dim(format!(
                "linear weight {:?} with bias of {}",
                weight.shape(),
                bias.len()
            )));
        }
        Ok(Linear {
            weight,
            bias: Tensor::from_vec(bias.into_values()),
            activation,
        })
    }

    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::glorot(fan_in, fan_out, rng),
            bias: Tensor::zeros(&[fan_out]),
            activation,
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(&self.weight)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(self.bias.values()) {
                *v = self.activation.apply(*v + b);
            }
        }
        Ok(y)
    }
}

/// A stack of [`Linear`] layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(layers: Vec<Linear>) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::dim(format!(
                    "layer widths do not chain: {} then {}",
                    w[0].fan_out(),
                    w[1].fan_in()
                )));
            }
        }
        Ok(Mlp { layers })
    }

    /// Glorot-initialised stack through `dims`, `hidden` activation on every
    /// layer but the last, which gets `last`.
    pub fn build<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, last: Activation, rng: &mut R) -> Self {
        let n = dims.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { hidden };
                Linear::glorot(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Linear::fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Linear::fan_out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(&h)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Puts every weight and bias on `tape` as a leaf, in [`Mlp::params`] order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Puts every weight and bias on `tape` as a constant.
    pub fn register_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.constant(p.clone())).collect()
    }

    pub fn tape_forward(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Result<Var> {
        debug_assert_eq!(vars.len(), 2 * self.layers.len());
        let mut h = x;
        for (l, pair) in self.layers.iter().zip(vars.chunks(2)) {
            let z = tape.matmul(h, pair[0])?;
            let z = tape.add_row(z, pair[1])?;
            h = l.activation.tape(tape, z);
        }
        Ok(h)
    }

    pub fn collect_grads(vars: &[Var], grads: &mut Gradients) -> Vec<Tensor> {
        vars.iter().map(|&v| grads.take(v)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Store as sections `{prefix}.acts`, `{prefix}.{i}.w`, `{prefix}.{i}.b`.
    pub fn write_to(&self, c: &mut Container, prefix: &str) {
        let acts: Vec<&str> = self.layers.iter().map(|l| l.activation.name()).collect();
        c.push_json(&format!("{prefix}.acts"), &acts);
        for (i, l) in self.layers.iter().enumerate() {
            c.push_tensor(&format!("{prefix}.{i}.w"), &l.weight);
            c.push_tensor(&format!("{prefix}.{i}.b"), &l.bias);
        }
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let acts: Vec<String> = c.json(&format!("{prefix}.acts"))?;
        let mut layers = Vec::with_capacity(acts.len());
        for (i, a) in acts.iter().enumerate() {
            layers.push(Linear::new(
                c.tensor(&format!("{prefix}.{i}.w"))?,
                c.tensor(&format!("{prefix}.{i}.b"))?,
                Activation::from_name(a)?,
            )?);
        }
        Mlp::new(layers)
    }
}
