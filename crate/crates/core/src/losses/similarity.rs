use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Frames with a smaller L2 norm have no direction.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityLossValue<T> {
    pub total: T,
    /// `2 − 2·cos(z_i, e_i)` for every frame, each in `[0, 4]`.
    pub per_frame: Vec<T>,
}

/// Normalized squared distance between main embeddings `e` and targets `z`.
///
/// Returns the loss and its gradient with respect to `e`; `z` is a constant.
pub fn similarity_loss<T: Real>(
    e: &Tensor<T>,
    z: &Tensor<T>,
    reduction: Reduction,
) -> Result<(SimilarityLossValue<T>, Tensor<T>)> {
    if e.shape() != z.shape() || e.shape().len() != 2 {
        return Err(Error::shape(
            "similarity_loss",
            format!("e {:?} and z {:?} must be equal T×d", e.shape(), z.shape()),
        ));
    }
    let (t, d) = (e.rows(), e.cols());
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / t.max(1) as f64,
    };
    let mut per_frame = Vec::with_capacity(t);
    let mut grad = Vec::with_capacity(t * d);
    for i in 0..t {
        let (ei, zi) = (e.row(i), z.row(i));
        let ne = ei.iter().map(|v| v.f64().powi(2)).sum::<f64>().sqrt();
        let nz = zi.iter().map(|v| v.f64().powi(2)).sum::<f64>().sqrt();
        if ne <= DEGENERATE_NORM || nz <= DEGENERATE_NORM {
            return Err(Error::DegenerateFrame { index: i });
        }
        let dot: f64 = ei.iter().zip(zi).map(|(a, b)| a.f64() * b.f64()).sum();
        let cos = (dot / (ne * nz)).clamp(-1.0, 1.0);
        per_frame.push(2.0 - 2.0 * cos);
        for (a, b) in ei.iter().zip(zi) {
            let g = -2.0 * (b.f64() / (ne * nz) - cos * a.f64() / (ne * ne));
            grad.push(T::lit(scale * g));
        }
    }
    let total = scale * per_frame.iter().sum::<f64>();
    let value = SimilarityLossValue {
        total: T::lit(total),
        per_frame: per_frame.into_iter().map(T::lit).collect(),
    };
    Ok((value, Tensor::new(vec![t, d], grad)?))
}

/// [`similarity_loss`] recorded on the tape against the main-branch frames `e`.
pub fn similarity_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    e: Var,
    z: &Tensor<T>,
    reduction: Reduction,
) -> Result<(Var, SimilarityLossValue<T>)> {
    let (value, grad) = similarity_loss(tape.value(e), z, reduction)?;
    let loss = tape.scalar_fn(e, value.total, grad)?;
    Ok((loss, value))
}
