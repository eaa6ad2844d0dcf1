use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Per-frame class targets for a `T×C` logit matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrameTargets<'a> {
    Labels(&'a [usize]),
    /// A mixup pair. Each label list covers the leading frames of its own,
    /// unpadded source; the two terms are weighted `beta` and `1 − beta`.
    Mixed {
        first: &'a [usize],
        second: &'a [usize],
        beta: f64,
    },
}

/// Mean negative log-likelihood of the targets under `softmax(logits)`.
pub fn frame_cross_entropy<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: FrameTargets<'_>,
) -> Result<Var> {
    let (t, c) = match tape.shape(logits) {
        &[t, c] => (t, c),
        s => {
            return Err(Error::shape(
                "frame_cross_entropy",
                format!("expected T×C, got {s:?}"),
            ))
        }
    };
    let terms: Vec<(&[usize], f64)> = match targets {
        FrameTargets::Labels(labels) => {
            if labels.len() != t {
                return Err(Error::shape(
                    "frame_cross_entropy",
                    format!("{} labels for {t} frames", labels.len()),
                ));
            }
            vec![(labels, 1.0)]
        }
        FrameTargets::Mixed {
            first,
            second,
            beta,
        } => {
            if !(0.0..=1.0).contains(&beta) {
                return Err(Error::Contract(format!(
                    "mixing weight {beta} outside [0, 1]"
                )));
            }
            if first.len().max(second.len()) > t {
                return Err(Error::shape(
                    "frame_cross_entropy",
                    format!(
                        "label lists {} and {} exceed {t} frames",
                        first.len(),
                        second.len()
                    ),
                ));
            }
            vec![(first, beta), (second, 1.0 - beta)]
        }
    };
    let mut picks = Vec::new();
    for (labels, weight) in terms {
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Label(format!("class {bad} outside [0, {c})")));
        }
        if labels.is_empty() || weight == 0.0 {
            continue;
        }
        let w = T::lit(-weight / labels.len() as f64);
        picks.extend(labels.iter().enumerate().map(|(i, &l)| (i * c + l, w)));
    }
    let logp = tape.log_softmax(logits);
    tape.pick_sum(logp, picks)
}

/// Value-only [`frame_cross_entropy`].
pub fn frame_cross_entropy_value<T: Real>(
    logits: &Tensor<T>,
    targets: FrameTargets<'_>,
) -> Result<T> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let loss = frame_cross_entropy(&mut tape, x, targets)?;
    Ok(tape.value(loss).item())
}
