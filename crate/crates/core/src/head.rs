use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Affine map `x·W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Real> LinearHead<T> {
    pub fn init(input: usize, output: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (3.0 / input.max(1) as f64).sqrt();
        Self {
            weight: Tensor::from_fn(&[input, output], |_| {
                T::lit(rng.random_range(-bound..bound))
            }),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            (&[_, o], &[b]) if o == b => Ok(Self { weight, bias }),
            (w, b) => Err(Error::State(format!(
                "head weight {w:?} and bias {b:?} disagree"
            ))),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> HeadVars {
        HeadVars {
            weight: tape.leaf(self.weight.clone().with_requires_grad(trainable)),
            bias: tape.leaf(self.bias.clone().with_requires_grad(trainable)),
        }
    }

    pub fn forward(tape: &mut Tape<T>, vars: HeadVars, x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars.weight)?;
        tape.add(y, vars.bias)
    }

    pub fn cast<U: Real>(&self) -> LinearHead<U> {
        LinearHead {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}
