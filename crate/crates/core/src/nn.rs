//! Layer building blocks and named-parameter traversal.
//!
//! Every module exposes its tensors twice in the same order: through
//! [`Parameters::visit`] (names, for checkpoints and the optimizer) and
//! through its `bind` method (tape handles for one forward pass).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract_err, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named traversal over learnable tensors and non-learnable buffers.
pub trait Parameters<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));
    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(String, &Tensor<T>)) {}
    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Tensor<T>)) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

/// Whether a forward pass tracks gradients for the bound parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Puts a parameter on the tape and records its handle in visit order.
pub(crate) fn bind_tensor<T: Scalar>(tape: &mut Tape<T>, t: &Tensor<T>, trainable: bool, order: &mut Vec<Var>) -> Var {
    let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
    order.push(v);
    v
}

/// Standard normal sample (Box-Muller).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

pub fn normal_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = T::of(std * standard_normal(rng));
    }
    t
}

/// Fully connected layer `y = x W + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Scalar> Linear<T> {
    /// Gaussian weights with standard deviation `gain / sqrt(fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / libm::sqrt(fan_in as f64);
        Self { weight: normal_tensor(&[fan_in, fan_out], std, rng), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Tensor::zeros(&[fan_in, fan_out]), bias: Tensor::zeros(&[fan_out]) }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool, order: &mut Vec<Var>) -> LinearVars {
        LinearVars {
            weight: bind_tensor(tape, &self.weight, trainable, order),
            bias: bind_tensor(tape, &self.bias, trainable, order),
        }
    }
}

impl LinearVars {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row_bias(y, self.bias)
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Two-layer perceptron with a ReLU hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub hidden: LinearVars,
    pub output: LinearVars,
}

impl<T: Scalar> Mlp<T> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, output_gain: f64, rng: &mut R) -> Self {
        Self {
            hidden: Linear::init(input, hidden, libm::sqrt(2.0), rng),
            output: Linear::init(hidden, output, output_gain, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool, order: &mut Vec<Var>) -> MlpVars {
        MlpVars { hidden: self.hidden.bind(tape, trainable, order), output: self.output.bind(tape, trainable, order) }
    }

    /// Plain forward pass on a batch of rows.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut order = Vec::new();
        let vars = self.bind(&mut tape, false, &mut order);
        let xv = tape.constant(x.clone());
        let y = vars.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

impl MlpVars {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h);
        self.output.forward(tape, h)
    }
}

impl<T: Scalar> Parameters<T> for Mlp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}

/// Collects references to every learnable tensor in visit order.
pub fn collect_params<T: Scalar, P: Parameters<T> + ?Sized>(module: &P) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    module.visit("", &mut |name, t| out.push((name, t.clone())));
    out
}

/// Overwrites a module's tensors (learnable then buffers) from named values.
pub fn load_named<T: Scalar, P: Parameters<T> + ?Sized>(module: &mut P, named: &[(String, Tensor<T>)]) -> Result<()> {
    let mut missing: Option<String> = None;
    let mut apply = |name: String, t: &mut Tensor<T>| {
        match named.iter().find(|(n, _)| *n == name) {
            Some((_, v)) if v.shape() == t.shape() => *t = v.clone(),
            Some((_, v)) => {
                missing.get_or_insert(format!("{name}: shape {:?} expected {:?}", v.shape(), t.shape()));
            }
            None => {
                missing.get_or_insert(format!("{name}: not present"));
            }
        }
    };
    module.visit_mut("", &mut apply);
    module.visit_buffers_mut("", &mut apply);
    match missing {
        Some(m) => Err(contract_err!("cannot load parameter {m}")),
        None => Ok(()),
    }
}
