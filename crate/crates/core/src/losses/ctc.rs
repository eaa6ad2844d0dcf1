use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Class index reserved for the CTC blank.
pub const BLANK: usize = 0;

/// Frames needed to emit `labels`: one per label plus a blank between repeats.
pub fn required_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn log_softmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|t| {
            let row: Vec<f64> = logits.row(t).iter().map(|v| v.f64()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter().map(|v| v - lse).collect()
        })
        .collect()
}

fn check_inputs<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let (t, c) = match logits.shape() {
        &[t, c] => (t, c),
        s => {
            return Err(Error::shape(
                "ctc_loss",
                format!("expected T'×(V+1), got {s:?}"),
            ))
        }
    };
    if c < 2 {
        return Err(Error::shape(
            "ctc_loss",
            "need the blank plus at least one label",
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= c) {
        return Err(Error::Label(format!("label {bad} outside [1, {c})")));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric {
            op: "ctc_loss",
            detail: "non-finite logits".into(),
        });
    }
    Ok((t, c))
}

/// Forward and backward tables over the blank-interleaved label sequence.
///
/// `log_alpha[t][s]` includes the emission at `t`; `log_beta[t][s]` covers only
/// frames after `t`, so `alpha·beta` summed over `s` is the total at every `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcLattice {
    pub extended: Vec<usize>,
    pub log_probs: Vec<Vec<f64>>,
    pub log_alpha: Vec<Vec<f64>>,
    pub log_beta: Vec<Vec<f64>>,
}

impl CtcLattice {
    pub fn new<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<Self> {
        let (t_len, _) = check_inputs(logits, labels)?;
        let required = required_frames(labels);
        if t_len < required.max(1) {
            return Err(Error::InfeasibleAlignment {
                frames: t_len,
                labels: labels.len(),
                required: required.max(1),
            });
        }
        let mut extended = vec![BLANK];
        for &l in labels {
            extended.extend([l, BLANK]);
        }
        let s_len = extended.len();
        let log_probs = log_softmax_rows(logits);
        let skip = |s: usize| s >= 2 && extended[s] != BLANK && extended[s] != extended[s - 2];

        let mut log_alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
        log_alpha[0][0] = log_probs[0][extended[0]];
        if s_len > 1 {
            log_alpha[0][1] = log_probs[0][extended[1]];
        }
        for t in 1..t_len {
            for s in 0..s_len {
                let mut a = log_alpha[t - 1][s];
                if s >= 1 {
                    a = log_add(a, log_alpha[t - 1][s - 1]);
                }
                if skip(s) {
                    a = log_add(a, log_alpha[t - 1][s - 2]);
                }
                log_alpha[t][s] = a + log_probs[t][extended[s]];
            }
        }

        let mut log_beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
        log_beta[t_len - 1][s_len - 1] = 0.0;
        if s_len > 1 {
            log_beta[t_len - 1][s_len - 2] = 0.0;
        }
        for t in (0..t_len - 1).rev() {
            for s in 0..s_len {
                let next = |u: usize| log_beta[t + 1][u] + log_probs[t + 1][extended[u]];
                let mut b = next(s);
                if s + 1 < s_len {
                    b = log_add(b, next(s + 1));
                }
                if s + 2 < s_len && skip(s + 2) {
                    b = log_add(b, next(s + 2));
                }
                log_beta[t][s] = b;
            }
        }
        Ok(Self {
            extended,
            log_probs,
            log_alpha,
            log_beta,
        })
    }

    /// `log p(labels)` from the last row of the forward table.
    pub fn forward_log_likelihood(&self) -> f64 {
        let last = &self.log_alpha[self.log_alpha.len() - 1];
        let s = last.len();
        if s == 1 {
            last[0]
        } else {
            log_add(last[s - 1], last[s - 2])
        }
    }

    /// `log p(labels)` from the first row of the backward table.
    pub fn backward_log_likelihood(&self) -> f64 {
        let mut total = f64::NEG_INFINITY;
        for s in 0..self.extended.len().min(2) {
            total = log_add(
                total,
                self.log_probs[0][self.extended[s]] + self.log_beta[0][s],
            );
        }
        total
    }

    /// Gradient of `−log p(labels)` with respect to the logits.
    pub fn logit_gradient(&self) -> Vec<Vec<f64>> {
        let log_p = self.forward_log_likelihood();
        let classes = self.log_probs[0].len();
        (0..self.log_probs.len())
            .map(|t| {
                let mut occupancy = vec![f64::NEG_INFINITY; classes];
                for (s, &k) in self.extended.iter().enumerate() {
                    occupancy[k] =
                        log_add(occupancy[k], self.log_alpha[t][s] + self.log_beta[t][s]);
                }
                (0..classes)
                    .map(|k| self.log_probs[t][k].exp() - (occupancy[k] - log_p).exp())
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtcLoss<T> {
    /// `−log p(labels | logits)`.
    pub loss: T,
    pub grad: Tensor<T>,
}

/// CTC negative log-likelihood and its logit gradient, computed in 64-bit.
pub fn ctc_loss<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<CtcLoss<T>> {
    let lattice = CtcLattice::new(logits, labels)?;
    let loss = -lattice.forward_log_likelihood();
    if !loss.is_finite() {
        return Err(Error::Numeric {
            op: "ctc_loss",
            detail: format!("loss {loss}"),
        });
    }
    let grad: Vec<T> = lattice
        .logit_gradient()
        .into_iter()
        .flatten()
        .map(T::lit)
        .collect();
    Ok(CtcLoss {
        loss: T::lit(loss),
        grad: Tensor::new(logits.shape().to_vec(), grad)?,
    })
}

pub fn ctc_loss_on_tape<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let CtcLoss { loss, grad } = ctc_loss(tape.value(logits), labels)?;
    tape.scalar_fn(logits, loss, grad)
}

const BRUTE_MAX_FRAMES: usize = 8;
const BRUTE_MAX_LABELS: usize = 5;

/// Exhaustive CTC over all `(V+1)^T'` paths, for tiny instances only.
pub fn ctc_brute_force<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (t_len, classes) = check_inputs(logits, labels)?;
    if t_len > BRUTE_MAX_FRAMES || classes - 1 > BRUTE_MAX_LABELS {
        return Err(Error::OracleScale(format!(
            "{t_len} frames and {} labels exceed the {BRUTE_MAX_FRAMES}×{BRUTE_MAX_LABELS} bound",
            classes - 1
        )));
    }
    let log_probs = log_softmax_rows(logits);
    let mut path = vec![0usize; t_len];
    let mut total = f64::NEG_INFINITY;
    let mut any = false;
    loop {
        if ctc_collapse(&path) == labels {
            any = true;
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| log_probs[t][k]).sum();
            total = log_add(total, lp);
        }
        let mut i = 0;
        while i < t_len {
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == t_len {
            break;
        }
    }
    if !any {
        return Err(Error::InfeasibleAlignment {
            frames: t_len,
            labels: labels.len(),
            required: required_frames(labels),
        });
    }
    Ok(-total)
}

fn ctc_collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
pub fn ctc_greedy_decode<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    ctc_collapse(&logits.argmax_rows())
}
