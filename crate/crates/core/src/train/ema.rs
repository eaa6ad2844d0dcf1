use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Target network `θ_o` refined by `θ_o ← λθ_o + (1−λ)θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T> {
    pub target: EncoderParams<T>,
    pub lambda: f64,
}

impl<T: Real> EmaState<T> {
    pub fn new(target: EncoderParams<T>, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!(
                "EMA coefficient {lambda} outside [0, 1]"
            )));
        }
        Ok(Self { target, lambda })
    }

    /// Averages every parameter and batch-norm buffer of `main` into the target.
    pub fn update(&mut self, main: &EncoderParams<T>) -> Result<()> {
        if self.target.config != main.config {
            return Err(Error::State(
                "EMA target and main network configs differ".into(),
            ));
        }
        let (l, r) = (T::lit(self.lambda), T::lit(1.0 - self.lambda));
        for (tgt, src) in [
            (&mut self.target.params, &main.params),
            (&mut self.target.buffers, &main.buffers),
        ] {
            if tgt.len() != src.len() {
                return Err(Error::State(
                    "EMA target and main network tensors differ".into(),
                ));
            }
            for (name, t) in tgt.iter_mut() {
                let s = src
                    .get(name)
                    .ok_or_else(|| Error::State(format!("main network lacks `{name}`")))?;
                if s.shape() != t.shape() {
                    return Err(Error::State(format!("shape mismatch for `{name}`")));
                }
                *t = Tensor::from_fn(t.shape(), |i| l * t.data()[i] + r * s.data()[i]);
            }
        }
        Ok(())
    }
}
