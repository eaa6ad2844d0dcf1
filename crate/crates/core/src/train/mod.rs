//! Optimization: learning-rate schedule, Adam, the EMA target, balanced
//! multilingual sampling, supervised pretraining and self-training.

mod adam;
mod ema;
mod sampler;
mod schedule;
mod supervised;
mod xlst;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState, Update};
pub use ema::EmaState;
pub use sampler::{BalancedSampler, CorpusEntry, CorpusSet, DEFAULT_TAU};
pub use schedule::TrainSchedule;
pub use supervised::{frame_accuracy, SupervisedConfig, SupervisedModel, SupervisedTrainer};
pub use xlst::{
    centroid_cosine, xlst_step, StepSettings, XlstConfig, XlstStepOutput, XlstTrainer,
    COLLAPSE_THRESHOLD, DEFAULT_LAMBDA,
};

use crate::encoder::{Bound, EncoderParams};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frame_acc: Option<f64>,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub collapse_cosine: Option<f64>,
}

pub fn steps_per_epoch(utterances: usize, batch_size: usize) -> u64 {
    utterances.div_ceil(batch_size.max(1)).max(1) as u64
}

/// Average of scalar tape values.
pub fn mean_of<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::Data("no loss terms".into()))?;
    let mut total = first;
    for &t in rest {
        total = tape.add(total, t)?;
    }
    tape.scale(total, T::lit(1.0 / terms.len() as f64))
}

/// Gradients of every bound encoder parameter, keyed by name.
pub fn encoder_grads<T: Real>(
    grads: &mut Gradients<T>,
    bound: &Bound,
) -> Result<BTreeMap<String, Tensor<T>>> {
    bound
        .iter()
        .map(|(name, &var)| {
            grads
                .take(var)
                .map(|g| (name.clone(), g))
                .ok_or_else(|| Error::State(format!("no gradient for `{name}`")))
        })
        .collect()
}

/// Adam updates for every encoder parameter that has a gradient.
pub fn encoder_updates<'a, T: Real>(
    params: &'a mut EncoderParams<T>,
    grads: &'a BTreeMap<String, Tensor<T>>,
) -> Vec<Update<'a, T>> {
    params
        .params
        .iter_mut()
        .filter_map(|(name, param)| {
            grads.get(name).map(|grad| Update {
                name: name.as_str(),
                param,
                grad,
            })
        })
        .collect()
}
