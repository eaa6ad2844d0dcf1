use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 clipping of the gradient, off when `None`.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

/// Bias-corrected Adam with per-parameter moments keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

/// One parameter and its gradient.
pub struct Update<'a, T> {
    pub name: &'a str,
    pub param: &'a mut Tensor<T>,
    pub grad: &'a Tensor<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every listed parameter; returns the gradient norm before clipping.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, updates: Vec<Update<'_, T>>, lr: f64) -> Result<f64> {
        let mut sq = 0.0;
        for u in &updates {
            if u.param.shape() != u.grad.shape() {
                return Err(Error::State(format!(
                    "gradient of `{}` has shape {:?}, parameter {:?}",
                    u.name,
                    u.grad.shape(),
                    u.param.shape()
                )));
            }
            if !u.grad.is_finite() {
                return Err(Error::Divergence {
                    param: u.name.to_string(),
                });
            }
            sq += u.grad.data().iter().map(|g| g.f64().powi(2)).sum::<f64>();
        }
        let norm = sq.sqrt();
        let clip = match self.config.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for u in updates {
            let shape = u.param.shape().to_vec();
            let m = self
                .m
                .entry(u.name.to_string())
                .or_insert_with(|| Tensor::zeros(&shape));
            let v = self
                .v
                .entry(u.name.to_string())
                .or_insert_with(|| Tensor::zeros(&shape));
            if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                return Err(Error::State(format!(
                    "optimizer moments of `{}` have the wrong shape",
                    u.name
                )));
            }
            let mut md = m.data().to_vec();
            let mut vd = v.data().to_vec();
            let mut pd = u.param.data().to_vec();
            for i in 0..pd.len() {
                let g = u.grad.data()[i].f64() * clip;
                let mi = beta1 * md[i].f64() + (1.0 - beta1) * g;
                let vi = beta2 * vd[i].f64() + (1.0 - beta2) * g * g;
                md[i] = T::lit(mi);
                vd[i] = T::lit(vi);
                let delta = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                pd[i] = T::lit(pd[i].f64() - delta);
            }
            *m = Tensor::new(shape.clone(), md)?;
            *v = Tensor::new(shape.clone(), vd)?;
            *u.param = Tensor::new(shape, pd)?;
        }
        Ok(norm)
    }

    pub fn cast<U: Real>(&self) -> AdamState<U> {
        let cast = |map: &BTreeMap<String, Tensor<T>>| {
            map.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
        };
        AdamState {
            config: self.config.clone(),
            step: self.step,
            m: cast(&self.m),
            v: cast(&self.v),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(state: &mut AdamState<f64>, x: &mut Tensor<f64>, g: f64, lr: f64) -> Result<f64> {
        let grad = Tensor::scalar(g);
        state.step(
            vec![Update {
                name: "x",
                param: x,
                grad: &grad,
            }],
            lr,
        )
    }

    #[test]
    fn zero_gradient_only_advances_the_counter() {
        let mut s = AdamState::new(AdamConfig::default());
        let mut x = Tensor::scalar(0.7);
        single(&mut s, &mut x, 0.0, 0.1).unwrap();
        assert_eq!(x.item(), 0.7);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_has_unit_size() {
        for g in [3.0, -0.02, 1e-3] {
            let mut s = AdamState::new(AdamConfig::default());
            let mut x = Tensor::scalar(1.0);
            single(&mut s, &mut x, g, 0.01).unwrap();
            let expected = 0.01 * g / (g.abs() + 1e-8);
            assert!(((1.0 - x.item()) - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn minimizes_a_quadratic_like_the_reference_rule() {
        let mut s = AdamState::new(AdamConfig::default());
        let mut x = Tensor::scalar(1.0);
        // Independent transcription of the update rule.
        let (mut rx, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for k in 1..=100 {
            let g = 2.0 * x.item();
            single(&mut s, &mut x, g, 0.1).unwrap();
            let rg = 2.0 * rx;
            m = 0.9 * m + 0.1 * rg;
            v = 0.999 * v + 0.001 * rg * rg;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.999f64.powi(k));
            rx -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((x.item() - rx).abs() < 1e-12);
        }
        assert!(x.item().abs() < 0.1, "{}", x.item());
    }

    #[test]
    fn non_finite_gradient_names_the_parameter_and_changes_nothing() {
        let mut s = AdamState::new(AdamConfig::default());
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(2.0);
        let ga = Tensor::scalar(0.5);
        let gb = Tensor::scalar(f64::NAN);
        let err = s
            .step(
                vec![
                    Update {
                        name: "a",
                        param: &mut a,
                        grad: &ga,
                    },
                    Update {
                        name: "b",
                        param: &mut b,
                        grad: &gb,
                    },
                ],
                0.1,
            )
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { ref param } if param == "b"));
        assert_eq!((a.item(), b.item(), s.step), (1.0, 2.0, 0));
    }

    #[test]
    fn clipping_scales_the_gradient() {
        let config = AdamConfig {
            max_grad_norm: Some(1.0),
            ..Default::default()
        };
        let mut clipped = AdamState::new(config);
        let mut plain = AdamState::new(AdamConfig::default());
        let (mut x, mut y) = (Tensor::scalar(0.0), Tensor::scalar(0.0));
        for g in [10.0, -4.0, 0.5] {
            let n = single(&mut clipped, &mut x, g, 0.1).unwrap();
            assert_eq!(n, f64::abs(g));
            single(&mut plain, &mut y, g.clamp(-1.0, 1.0), 0.1).unwrap();
        }
        assert!((x.item() - y.item()).abs() < 1e-12);
    }
}
