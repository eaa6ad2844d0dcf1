use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    encoder_grads, encoder_updates, mean_of, steps_per_epoch, AdamConfig, AdamState,
    BalancedSampler, CorpusEntry, CorpusSet, StepMetrics, TrainSchedule, Update,
};
use crate::augment::{augment, mix_batch, AugmentSpec, Stage};
use crate::data::FeatureSequence;
use crate::encoder::{embed_batch, forward_batch, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::head::LinearHead;
use crate::losses::{frame_cross_entropy, FrameTargets};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedConfig {
    pub augment: AugmentSpec,
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
}

/// Encoder plus the frame classifier on top of its embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedModel<T> {
    pub encoder: EncoderParams<T>,
    pub classifier: LinearHead<T>,
}

const CLASSIFIER_WEIGHT: &str = "classifier.weight";
const CLASSIFIER_BIAS: &str = "classifier.bias";

/// Frame labels at the encoder rate: output frame `i` takes input frame `2i`.
fn downsampled_labels(labels: &[usize], stride: usize) -> Vec<usize> {
    labels
        .iter()
        .step_by(stride)
        .take(labels.len() / stride)
        .copied()
        .collect()
}

fn labels_of<T>(u: &FeatureSequence<T>) -> Result<&[usize]> {
    u.frame_labels
        .as_deref()
        .ok_or_else(|| Error::Data(format!("utterance `{}` has no frame labels", u.id)))
}

/// Frame-averaged cross entropy training of encoder and classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedTrainer<T> {
    pub config: SupervisedConfig,
    pub model: SupervisedModel<T>,
    pub adam: AdamState<T>,
    pub sampler: BalancedSampler,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub total_steps: u64,
}

impl<T: Real> SupervisedTrainer<T> {
    pub fn new(
        config: SupervisedConfig,
        encoder: EncoderParams<T>,
        classes: usize,
        corpus: &[FeatureSequence<T>],
    ) -> Result<Self> {
        config.schedule.validate()?;
        config.augment.validate(encoder.config.input_dim)?;
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        let mut frames = 0;
        for u in corpus {
            let labels = labels_of(u)?;
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::Label(format!(
                    "class {bad} in `{}` outside [0, {classes})",
                    u.id
                )));
            }
            frames += u.frames();
        }
        let entry = CorpusEntry {
            language: corpus.first().map_or(0, |u| u.language),
            utterances: corpus.len(),
            frames,
        };
        let sampler = BalancedSampler::new(CorpusSet::new(vec![entry], 1.0)?, config.seed);
        let d = encoder.config.projector_output_dim;
        let total_steps =
            config.schedule.epochs as u64 * steps_per_epoch(corpus.len(), config.batch_size);
        Ok(Self {
            model: SupervisedModel {
                classifier: LinearHead::init(d, classes, config.seed ^ 0x5eed),
                encoder,
            },
            adam: AdamState::new(config.adam.clone()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            sampler,
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

    /// Augments, mixes and trains on one batch.
    pub fn train_step(&mut self, corpus: &[FeatureSequence<T>]) -> Result<StepMetrics> {
        let picks = self.sampler.batch(self.config.batch_size);
        let batch: Vec<&FeatureSequence<T>> = picks.iter().map(|&(_, u)| &corpus[u]).collect();
        let spec = &self.config.augment;
        let stride = self.model.encoder.config.downsample_factor;

        let mut views = Vec::with_capacity(batch.len());
        for u in &batch {
            views.push(augment(&u.features, spec, Stage::Supervised, &mut self.rng)?.0);
        }
        let labels: Vec<Vec<usize>> = batch
            .iter()
            .map(|u| Ok(downsampled_labels(labels_of(u)?, stride)))
            .collect::<Result<_>>()?;
        let mixed: Vec<(Tensor<T>, usize, f64)> = if spec.mixup && batch.len() > 1 {
            mix_batch(&views, spec.mixup_alpha, &mut self.rng)?
                .into_iter()
                .map(|m| (m.features, m.partner, m.beta))
                .collect()
        } else {
            views
                .into_iter()
                .enumerate()
                .map(|(i, v)| (v, i, 1.0))
                .collect()
        };

        let mut tape = Tape::new();
        let bound = self.model.encoder.bind(&mut tape, true);
        let head = self.model.classifier.bind(&mut tape, true);
        let inputs: Vec<Var> = mixed
            .iter()
            .map(|(x, _, _)| tape.constant(x.clone()))
            .collect();
        let out = forward_batch(
            &mut tape,
            &self.model.encoder,
            &bound,
            &inputs,
            &mut Mode::Train(&mut self.rng),
        )?;
        let logits = LinearHead::forward(&mut tape, head, out.frames)?;
        let mut losses = Vec::with_capacity(mixed.len());
        let (mut hits, mut seen) = (0usize, 0usize);
        for (i, span) in out.spans.iter().enumerate() {
            let (_, partner, beta) = mixed[i];
            let rows = tape.slice_rows(logits, span.start, span.end)?;
            let targets = FrameTargets::Mixed {
                first: &labels[i],
                second: &labels[partner],
                beta,
            };
            losses.push(frame_cross_entropy(&mut tape, rows, targets)?);
            let dominant = if beta >= 0.5 {
                &labels[i]
            } else {
                &labels[partner]
            };
            let predicted = tape.value(rows).argmax_rows();
            hits += dominant
                .iter()
                .zip(&predicted)
                .filter(|(a, b)| a == b)
                .count();
            seen += dominant.len();
        }
        let loss = mean_of(&mut tape, &losses)?;
        let loss_value = tape.value(loss).item().f64();

        let mut grads = tape.backward(loss)?;
        let enc_grads = encoder_grads(&mut grads, &bound)?;
        let missing = || Error::State("classifier gradient missing".into());
        let gw = grads.take(head.weight).ok_or_else(missing)?;
        let gb = grads.take(head.bias).ok_or_else(missing)?;
        let lr = self.config.schedule.lr_at(self.step, self.total_steps);
        let SupervisedModel {
            encoder,
            classifier,
        } = &mut self.model;
        let mut updates = encoder_updates(encoder, &enc_grads);
        updates.push(Update {
            name: CLASSIFIER_WEIGHT,
            param: &mut classifier.weight,
            grad: &gw,
        });
        updates.push(Update {
            name: CLASSIFIER_BIAS,
            param: &mut classifier.bias,
            grad: &gb,
        });
        let grad_norm = self.adam.step(updates, lr)?;
        if let Some((mean, var, n)) = &out.bn_stats {
            self.model.encoder.update_running_stats(mean, var, *n);
        }

        let metrics = StepMetrics {
            step: self.step,
            epoch: self.step / self.steps_per_epoch(),
            lr,
            loss: loss_value,
            frame_acc: Some(hits as f64 / seen.max(1) as f64),
            grad_norm,
            collapse_cosine: None,
        };
        self.step += 1;
        Ok(metrics)
    }
}

/// Eval-mode frame accuracy of `model` against downsampled frame labels.
pub fn frame_accuracy<T: Real>(
    model: &SupervisedModel<T>,
    corpus: &[FeatureSequence<T>],
) -> Result<f64> {
    let stride = model.encoder.config.downsample_factor;
    let (mut hits, mut seen) = (0usize, 0usize);
    for chunk in corpus.chunks(16) {
        let inputs: Vec<&Tensor<T>> = chunk.iter().map(|u| &u.features).collect();
        let (frames, spans) = embed_batch(&model.encoder, &inputs, &mut Mode::Eval)?;
        let mut tape = Tape::new();
        let head = model.classifier.bind(&mut tape, false);
        let x = tape.constant(frames);
        let logits = LinearHead::forward(&mut tape, head, x)?;
        let predicted = tape.value(logits).argmax_rows();
        for (u, span) in chunk.iter().zip(spans) {
            let labels = downsampled_labels(labels_of(u)?, stride);
            hits += labels
                .iter()
                .zip(&predicted[span])
                .filter(|(a, b)| a == b)
                .count();
            seen += labels.len();
        }
    }
    if seen == 0 {
        return Err(Error::Data("no labelled frames to score".into()));
    }
    Ok(hits as f64 / seen as f64)
}
