//! The network shared by the target and main branches.
//!
//! `[T, F]` features pass through 3×3 convolution blocks (time pooled by 2 in
//! the last block), a pre-norm Transformer, and a projector
//! `linear → frame batch norm → relu → linear` that emits `floor(T/2)` frame
//! embeddings of dimension d.

mod config;

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::EncoderConfig;

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Running-statistic momentum of the projector batch norm.
pub const BN_MOMENTUM: f64 = 0.99;

pub const BN_RUNNING_MEAN: &str = "projector.bn.running_mean";
pub const BN_RUNNING_VAR: &str = "projector.bn.running_var";

/// Named tensors of one network plus its non-trainable buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

/// Frame embeddings of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence<T> {
    /// `T' × d`
    pub frames: Tensor<T>,
    /// Input frames per output frame.
    pub frame_stride: usize,
}

/// Forward-pass mode. Train mode draws dropout masks and uses batch statistics.
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Tape handles for every parameter of an [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Output of a batched forward pass: all frames stacked row-wise.
pub struct BatchEmbedding<T> {
    pub frames: Var,
    /// Rows of `frames` belonging to each input, in input order.
    pub spans: Vec<Range<usize>>,
    /// Batch mean and biased variance of the projector hidden layer (train mode only).
    pub bn_stats: Option<(Vec<T>, Vec<T>, usize)>,
}

impl<T: Real> EncoderParams<T> {
    /// Fan-in scaled uniform weights `U(−√(3/fan_in), √(3/fan_in))`, zero biases, unit norm gains.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape, fan_in) in config.param_schema() {
            let t = if fan_in > 0 {
                let bound = (3.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..bound)))
            } else if name.ends_with(".gamma") {
                Tensor::full(&shape, T::one())
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        let h = config.projector_hidden_dim;
        let mut buffers = BTreeMap::new();
        buffers.insert(BN_RUNNING_MEAN.to_string(), Tensor::zeros(&[h]));
        buffers.insert(BN_RUNNING_VAR.to_string(), Tensor::full(&[h], T::one()));
        Ok(Self {
            config: config.clone(),
            params,
            buffers,
        })
    }

    /// Checks that the tensors match the config-derived schema exactly.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let schema = self.config.param_schema();
        if schema.len() != self.params.len() {
            return Err(Error::State(format!(
                "expected {} parameters, found {}",
                schema.len(),
                self.params.len()
            )));
        }
        for (name, shape, _) in schema {
            match self.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {
                    if !t.is_finite() {
                        return Err(Error::State(format!("parameter `{name}` is not finite")));
                    }
                }
                Some(t) => {
                    return Err(Error::State(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::State(format!("missing parameter `{name}`"))),
            }
        }
        let h = self.config.projector_hidden_dim;
        for name in [BN_RUNNING_MEAN, BN_RUNNING_VAR] {
            match self.buffers.get(name) {
                Some(t) if t.shape() == [h] => {}
                _ => {
                    return Err(Error::State(format!(
                        "missing or malformed buffer `{name}`"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Puts every parameter on the tape, tracking gradients iff `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    tape.leaf(v.clone().with_requires_grad(trainable)),
                )
            })
            .collect();
        Bound { vars }
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running_stats(&mut self, mean: &[T], var: &[T], frames: usize) {
        let m = T::lit(BN_MOMENTUM);
        let unbias = if frames > 1 {
            T::lit(frames as f64 / (frames as f64 - 1.0))
        } else {
            T::one()
        };
        let rm = self
            .buffers
            .get_mut(BN_RUNNING_MEAN)
            .expect("running mean buffer");
        *rm = Tensor::from_fn(rm.shape(), |i| m * rm.data()[i] + (T::one() - m) * mean[i]);
        let rv = self
            .buffers
            .get_mut(BN_RUNNING_VAR)
            .expect("running var buffer");
        *rv = Tensor::from_fn(rv.shape(), |i| {
            m * rv.data()[i] + (T::one() - m) * var[i] * unbias
        });
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// CNN blocks on one `T×F` input; returns `floor(T/2) × (channels·F)`.
pub fn cnn_forward<T: Real>(
    tape: &mut Tape<T>,
    config: &EncoderConfig,
    p: &Bound,
    x: Var,
) -> Result<Var> {
    let (t, f) = match tape.shape(x) {
        [t, f] => (*t, *f),
        s => {
            return Err(Error::shape(
                "cnn_forward",
                format!("expected T×F, got {s:?}"),
            ))
        }
    };
    if f != config.input_dim {
        return Err(Error::shape(
            "cnn_forward",
            format!("input dim {f}, config expects {}", config.input_dim),
        ));
    }
    if t < 2 {
        return Err(Error::InputTooShort(format!(
            "{t} frames; the CNN needs at least 2"
        )));
    }
    let mut h = tape.reshape(x, &[1, t, f])?;
    let last = config.cnn_channels.len() - 1;
    for b in 0..config.cnn_channels.len() {
        for conv in ["conv1", "conv2"] {
            h = tape.conv3x3(
                h,
                p.get(&format!("cnn.{b}.{conv}.weight")),
                p.get(&format!("cnn.{b}.{conv}.bias")),
            )?;
            h = tape.relu(h);
        }
        if b == last {
            h = tape.max_pool_time(h)?;
        }
    }
    tape.channels_to_frames(h)
}

fn linear<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{name}.weight")))?;
    tape.add(y, p.get(&format!("{name}.bias")))
}

fn sinusoid<T: Real>(frames: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[frames, dim], |i| {
        let (pos, j) = ((i / dim) as f64, i % dim);
        let freq = 10000f64.powf(-((j - j % 2) as f64) / dim as f64);
        T::lit(if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        })
    })
}

fn self_attention<T: Real>(
    tape: &mut Tape<T>,
    config: &EncoderConfig,
    p: &Bound,
    block: usize,
    x: Var,
) -> Result<Var> {
    let pre = format!("transformer.{block}.attn");
    let q = linear(tape, p, &format!("{pre}.q"), x)?;
    let k = linear(tape, p, &format!("{pre}.k"), x)?;
    let v = linear(tape, p, &format!("{pre}.v"), x)?;
    let dh = config.head_dim();
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(config.attention_heads);
    for h in 0..config.attention_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax(scores);
        heads.push(tape.matmul(weights, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    linear(tape, p, &format!("{pre}.o"), cat)
}

/// Input projection, optional positional encoding, pre-norm blocks, final norm.
pub fn transformer_forward<T: Real>(
    tape: &mut Tape<T>,
    config: &EncoderConfig,
    p: &Bound,
    h: Var,
    mode: &mut Mode,
) -> Result<Var> {
    let mut x = linear(tape, p, "transformer.input", h)?;
    if config.positional_encoding {
        let frames = tape.shape(x)[0];
        let pe = tape.constant(sinusoid(frames, config.attention_dim));
        x = tape.add(x, pe)?;
    }
    for b in 0..config.transformer_blocks {
        let n1 = tape.layer_norm(
            x,
            p.get(&format!("transformer.{b}.ln1.gamma")),
            p.get(&format!("transformer.{b}.ln1.beta")),
        )?;
        let att = self_attention(tape, config, p, b, n1)?;
        let att = dropout(tape, att, config.dropout, mode)?;
        x = tape.add(x, att)?;

        let n2 = tape.layer_norm(
            x,
            p.get(&format!("transformer.{b}.ln2.gamma")),
            p.get(&format!("transformer.{b}.ln2.beta")),
        )?;
        let ff = linear(tape, p, &format!("transformer.{b}.ffn.fc1"), n2)?;
        let ff = tape.relu(ff);
        let ff = linear(tape, p, &format!("transformer.{b}.ffn.fc2"), ff)?;
        let ff = dropout(tape, ff, config.dropout, mode)?;
        x = tape.add(x, ff)?;
    }
    tape.layer_norm(
        x,
        p.get("transformer.final_ln.gamma"),
        p.get("transformer.final_ln.beta"),
    )
}

fn dropout<T: Real>(tape: &mut Tape<T>, x: Var, rate: f64, mode: &mut Mode) -> Result<Var> {
    match mode {
        Mode::Train(rng) => tape.dropout(x, rate, *rng),
        Mode::Eval => Ok(x),
    }
}

pub struct ProjectorOutput<T> {
    pub embeddings: Var,
    /// Batch-normalized hidden layer, after the affine and before the relu.
    pub hidden: Var,
    pub bn_stats: Option<(Vec<T>, Vec<T>, usize)>,
}

/// Projector over stacked frames `N × attention_dim`.
///
/// Train mode normalizes with the statistics of these N frames and returns
/// them; eval mode uses the running statistics.
pub fn projector_forward<T: Real>(
    tape: &mut Tape<T>,
    params: &EncoderParams<T>,
    p: &Bound,
    h: Var,
    mode: &Mode,
) -> Result<ProjectorOutput<T>> {
    let hidden = linear(tape, p, "projector.fc1", h)?;
    let gamma = p.get("projector.bn.gamma");
    let beta = p.get("projector.bn.beta");
    let (normed, stats) = if mode.is_train() {
        let n = tape.shape(hidden)[0];
        let (y, mean, var) = tape.batch_norm_train(hidden, gamma, beta)?;
        (y, Some((mean, var, n)))
    } else {
        let y = tape.batch_norm_eval(
            hidden,
            gamma,
            beta,
            params.buffers[BN_RUNNING_MEAN].data(),
            params.buffers[BN_RUNNING_VAR].data(),
        )?;
        (y, None)
    };
    let act = tape.relu(normed);
    Ok(ProjectorOutput {
        embeddings: linear(tape, p, "projector.fc2", act)?,
        hidden: normed,
        bn_stats: stats,
    })
}

/// Encodes a batch of `T_i × F` inputs; the projector sees all frames at once.
pub fn forward_batch<T: Real>(
    tape: &mut Tape<T>,
    params: &EncoderParams<T>,
    p: &Bound,
    inputs: &[Var],
    mode: &mut Mode,
) -> Result<BatchEmbedding<T>> {
    if inputs.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let config = &params.config;
    let mut per_utt = Vec::with_capacity(inputs.len());
    let mut spans = Vec::with_capacity(inputs.len());
    let mut offset = 0;
    for &x in inputs {
        let h = cnn_forward(tape, config, p, x)?;
        let h = transformer_forward(tape, config, p, h, mode)?;
        let n = tape.shape(h)[0];
        spans.push(offset..offset + n);
        offset += n;
        per_utt.push(h);
    }
    let stacked = if per_utt.len() == 1 {
        per_utt[0]
    } else {
        tape.concat_rows(&per_utt)?
    };
    let out = projector_forward(tape, params, p, stacked, mode)?;
    Ok(BatchEmbedding {
        frames: out.embeddings,
        spans,
        bn_stats: out.bn_stats,
    })
}

/// Gradient-free batched encoding; returns stacked frames and per-input row spans.
pub fn embed_batch<T: Real>(
    params: &EncoderParams<T>,
    inputs: &[&Tensor<T>],
    mode: &mut Mode,
) -> Result<(Tensor<T>, Vec<Range<usize>>)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant((*x).clone())).collect();
    let out = forward_batch(&mut tape, params, &p, &vars, mode)?;
    Ok((tape.value(out.frames).clone(), out.spans))
}

/// Encodes a single utterance. Augmentation, if any, is the caller's job.
pub fn encode<T: Real>(
    params: &EncoderParams<T>,
    x: &FeatureSequence<T>,
    mode: &mut Mode,
) -> Result<EmbeddingSequence<T>> {
    let (frames, _) = embed_batch(params, &[&x.features], mode)?;
    Ok(EmbeddingSequence {
        frames,
        frame_stride: params.config.downsample_factor,
    })
}

#[cfg(test)]
mod tests;
