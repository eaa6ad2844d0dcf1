use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    encoder_grads, encoder_updates, steps_per_epoch, AdamConfig, AdamState, BalancedSampler,
    CorpusSet, EmaState, StepMetrics, TrainSchedule, DEFAULT_TAU,
};
use crate::augment::{augment, AugmentSpec, Stage};
use crate::data::FeatureSequence;
use crate::encoder::{embed_batch, forward_batch, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::losses::{similarity_loss_on_tape, Reduction};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const DEFAULT_LAMBDA: f64 = 0.9999;

/// Mean centroid cosine at or above which the embedding is considered collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 0.99;

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XlstConfig {
    pub augment: AugmentSpec,
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    pub batch_size: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub seed: u64,
    /// Runs the main network with running batch-norm statistics and no dropout.
    #[serde(default)]
    pub main_eval_mode: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct XlstStepOutput {
    /// Mean per-frame similarity loss before the update.
    pub loss: f64,
    pub grad_norm: f64,
}

/// Per-step knobs of [`xlst_step`].
#[derive(Clone, Copy, Debug)]
pub struct StepSettings<'a> {
    pub augment: &'a AugmentSpec,
    pub lr: f64,
    pub main_train: bool,
}

/// Target forward on the clean view, main forward on the masked view,
/// similarity loss, backward, Adam, running statistics, then the EMA update.
pub fn xlst_step<T: Real>(
    main: &mut EncoderParams<T>,
    ema: &mut EmaState<T>,
    adam: &mut AdamState<T>,
    batch: &[&Tensor<T>],
    settings: StepSettings<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<XlstStepOutput> {
    let (z, _) = embed_batch(&ema.target, batch, &mut Mode::Eval)?;

    let mut views = Vec::with_capacity(batch.len());
    for x in batch {
        views.push(augment(x, settings.augment, Stage::XlstMain, rng)?.0);
    }
    let mut tape = Tape::new();
    let bound = main.bind(&mut tape, true);
    let inputs: Vec<Var> = views.into_iter().map(|v| tape.constant(v)).collect();
    let out = if settings.main_train {
        forward_batch(&mut tape, main, &bound, &inputs, &mut Mode::Train(rng))?
    } else {
        forward_batch(&mut tape, main, &bound, &inputs, &mut Mode::Eval)?
    };
    let (loss, value) = similarity_loss_on_tape(&mut tape, out.frames, &z, Reduction::Mean)?;

    let mut grads = tape.backward(loss)?;
    let enc_grads = encoder_grads(&mut grads, &bound)?;
    let grad_norm = adam.step(encoder_updates(main, &enc_grads), settings.lr)?;
    if let Some((mean, var, n)) = &out.bn_stats {
        main.update_running_stats(mean, var, *n);
    }
    ema.update(main)?;
    Ok(XlstStepOutput {
        loss: value.total.f64(),
        grad_norm,
    })
}

/// Self-training state: main network, EMA target, optimizer, sampler and RNG.
#[derive(Clone, Debug, PartialEq)]
pub struct XlstTrainer<T> {
    pub config: XlstConfig,
    pub main: EncoderParams<T>,
    pub ema: EmaState<T>,
    pub adam: AdamState<T>,
    pub sampler: BalancedSampler,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub total_steps: u64,
}

impl<T: Real> XlstTrainer<T> {
    /// Main and target both start from `init`, a trained network.
    pub fn new(config: XlstConfig, init: EncoderParams<T>, corpus: CorpusSet) -> Result<Self> {
        config.schedule.validate()?;
        config.augment.validate(init.config.input_dim)?;
        init.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let corpus = CorpusSet::new(corpus.entries, config.tau)?;
        let total_steps = config.schedule.epochs as u64
            * steps_per_epoch(corpus.total_utterances(), config.batch_size);
        Ok(Self {
            ema: EmaState::new(init.clone(), config.lambda)?,
            main: init,
            adam: AdamState::new(config.adam.clone()),
            sampler: BalancedSampler::new(corpus, config.seed),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
            total_steps,
            config,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn steps_per_epoch(&self) -> u64 {
        steps_per_epoch(
            self.sampler.corpus.total_utterances(),
            self.config.batch_size,
        )
    }

    /// One balanced batch. `corpora[k]` holds the utterances of the sampler's k-th entry.
    pub fn train_step(&mut self, corpora: &[Vec<FeatureSequence<T>>]) -> Result<StepMetrics> {
        if corpora.len() != self.sampler.corpus.entries.len() {
            return Err(Error::Data(format!(
                "{} corpora given for {} sampler entries",
                corpora.len(),
                self.sampler.corpus.entries.len()
            )));
        }
        let picks = self.sampler.batch(self.config.batch_size);
        let batch: Vec<&Tensor<T>> = picks
            .iter()
            .map(|&(l, u)| &corpora[l][u].features)
            .collect();
        let lr = self.config.schedule.lr_at(self.step, self.total_steps);
        let settings = StepSettings {
            augment: &self.config.augment,
            lr,
            main_train: !self.config.main_eval_mode,
        };
        let out = xlst_step(
            &mut self.main,
            &mut self.ema,
            &mut self.adam,
            &batch,
            settings,
            &mut self.rng,
        )?;
        let metrics = StepMetrics {
            step: self.step,
            epoch: self.step / self.steps_per_epoch(),
            lr,
            loss: out.loss,
            frame_acc: None,
            grad_norm: out.grad_norm,
            collapse_cosine: None,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Offline refinement: the current main network becomes the new target.
    pub fn reassign_target(&mut self) {
        self.ema.target = self.main.clone();
    }
}

/// Mean pairwise cosine between per-class centroids of eval-mode embeddings.
///
/// Frame labels of `probe` are class ids at the input rate.
pub fn centroid_cosine<T: Real>(
    params: &EncoderParams<T>,
    probe: &[FeatureSequence<T>],
) -> Result<f64> {
    let stride = params.config.downsample_factor;
    let d = params.config.projector_output_dim;
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for chunk in probe.chunks(16) {
        let inputs: Vec<&Tensor<T>> = chunk.iter().map(|u| &u.features).collect();
        let (frames, spans) = embed_batch(params, &inputs, &mut Mode::Eval)?;
        for (u, span) in chunk.iter().zip(spans) {
            let labels = u.frame_labels.as_ref().ok_or_else(|| {
                Error::Data(format!("probe utterance `{}` has no frame labels", u.id))
            })?;
            for (i, row) in span.enumerate() {
                let (sum, n) = sums.entry(labels[i * stride]).or_insert((vec![0.0; d], 0));
                for (s, v) in sum.iter_mut().zip(frames.row(row)) {
                    *s += v.f64();
                }
                *n += 1;
            }
        }
    }
    let centroids: Vec<Vec<f64>> = sums
        .into_values()
        .map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    if centroids.len() < 2 {
        return Err(Error::Data(
            "collapse probe needs at least two classes".into(),
        ));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let (mut total, mut pairs) = (0.0, 0usize);
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            let dot: f64 = centroids[a]
                .iter()
                .zip(&centroids[b])
                .map(|(x, y)| x * y)
                .sum();
            total += dot / (norm(&centroids[a]) * norm(&centroids[b]));
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
