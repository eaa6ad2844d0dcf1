//! CTC fine-tuning of a linear head over pairs of embedding frames, greedy
//! decoding, and phone error rate.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::FeatureSequence;
use crate::encoder::{embed_batch, forward_batch, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::head::{HeadVars, LinearHead};
use crate::losses::{ctc_greedy_decode, ctc_loss_on_tape, required_frames};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::train::{
    encoder_grads, encoder_updates, mean_of, steps_per_epoch, AdamConfig, AdamState,
    BalancedSampler, CorpusEntry, CorpusSet, StepMetrics, TrainSchedule, Update,
};

/// Embedding frames concatenated per output frame.
pub const PAIR: usize = 2;

const HEAD_WEIGHT: &str = "downstream.weight";
const HEAD_BIAS: &str = "downstream.bias";

/// Linear map from `2d` concatenated embeddings to `V + 1` logits, blank first.
pub type DownstreamHead<T> = LinearHead<T>;

/// Encoder plus downstream head.
#[derive(Clone, Debug, PartialEq)]
pub struct PhoneModel<T> {
    pub encoder: EncoderParams<T>,
    pub head: DownstreamHead<T>,
}

impl<T: Real> PhoneModel<T> {
    /// Fresh head for `phones` labels on top of `encoder`.
    pub fn new(encoder: EncoderParams<T>, phones: usize, seed: u64) -> Self {
        let d = encoder.config.projector_output_dim;
        Self {
            head: LinearHead::init(PAIR * d, phones + 1, seed),
            encoder,
        }
    }

    pub fn phones(&self) -> usize {
        self.head.output_dim() - 1
    }
}

/// `T'×d` embeddings to `floor(T'/2) × (V+1)` logits over non-overlapping frame pairs.
pub fn head_forward<T: Real>(tape: &mut Tape<T>, head: HeadVars, embeddings: Var) -> Result<Var> {
    let (t, d) = match tape.shape(embeddings) {
        &[t, d] => (t, d),
        s => {
            return Err(Error::shape(
                "head_forward",
                format!("expected T'×d, got {s:?}"),
            ))
        }
    };
    if t < PAIR {
        return Err(Error::InputTooShort(format!(
            "{t} embedding frames, need at least {PAIR}"
        )));
    }
    let k = t / PAIR;
    let even = if k * PAIR == t {
        embeddings
    } else {
        tape.slice_rows(embeddings, 0, k * PAIR)?
    };
    let pairs = tape.reshape(even, &[k, PAIR * d])?;
    LinearHead::forward(tape, head, pairs)
}

/// Output frames of the whole model for `frames` input frames.
pub fn output_frames(frames: usize, stride: usize) -> usize {
    frames / stride / PAIR
}

/// CTC targets for a transcript of phone ids: shifted past the blank.
fn ctc_targets(transcript: &[usize]) -> Vec<usize> {
    transcript.iter().map(|&p| p + 1).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", deny_unknown_fields)]
pub enum EncoderTraining {
    /// Encoder never updated; its batch norm stays in eval mode.
    Frozen,
    /// Head only for the first `head_only_fraction` of steps, then everything.
    Staged { head_only_fraction: f64 },
}

impl Default for EncoderTraining {
    fn default() -> Self {
        EncoderTraining::Staged {
            head_only_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    pub batch_size: usize,
    #[serde(default)]
    pub encoder_training: EncoderTraining,
    pub seed: u64,
}

/// CTC training of a [`PhoneModel`] on transcribed utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneTrainer<T> {
    pub config: FinetuneConfig,
    pub model: PhoneModel<T>,
    pub adam: AdamState<T>,
    pub sampler: BalancedSampler,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub total_steps: u64,
    /// Indices of utterances too short for their transcript.
    pub skipped: Vec<usize>,
    usable: Vec<usize>,
}

impl<T: Real> FinetuneTrainer<T> {
    pub fn new(
        config: FinetuneConfig,
        model: PhoneModel<T>,
        corpus: &[FeatureSequence<T>],
    ) -> Result<Self> {
        config.schedule.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let EncoderTraining::Staged { head_only_fraction } = config.encoder_training {
            if !(0.0..=1.0).contains(&head_only_fraction) {
                return Err(Error::Config(format!(
                    "head_only_fraction {head_only_fraction} outside [0, 1]"
                )));
            }
        }
        let stride = model.encoder.config.downsample_factor;
        let mut usable = Vec::new();
        let mut skipped = Vec::new();
        for (i, u) in corpus.iter().enumerate() {
            let transcript = u
                .transcript
                .as_ref()
                .ok_or_else(|| Error::Data(format!("utterance `{}` has no transcript", u.id)))?;
            if let Some(&bad) = transcript.iter().find(|&&p| p >= model.phones()) {
                return Err(Error::Label(format!(
                    "phone {bad} in `{}` outside [0, {})",
                    u.id,
                    model.phones()
                )));
            }
            let frames = output_frames(u.frames(), stride);
            if frames >= required_frames(transcript).max(1) {
                usable.push(i);
            } else {
                skipped.push(i);
            }
        }
        if !skipped.is_empty() {
            log::warn!(
                "skipping {} utterances too short for their transcripts",
                skipped.len()
            );
        }
        let frames: usize = usable.iter().map(|&i| corpus[i].frames()).sum();
        let entry = CorpusEntry {
            language: corpus.first().map_or(0, |u| u.language),
            utterances: usable.len(),
            frames,
        };
        let sampler = BalancedSampler::new(CorpusSet::new(vec![entry], 1.0)?, config.seed);
        let total_steps =
            config.schedule.epochs as u64 * steps_per_epoch(usable.len(), config.batch_size);
        Ok(Self {
            adam: AdamState::new(config.adam.clone()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            sampler,
            total_steps,
            step: 0,
            skipped,
            usable,
            model,
            config,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn steps_per_epoch(&self) -> u64 {
        steps_per_epoch(self.usable.len(), self.config.batch_size)
    }

    /// Whether the encoder is updated at the current step.
    pub fn encoder_trainable(&self) -> bool {
        match self.config.encoder_training {
            EncoderTraining::Frozen => false,
            EncoderTraining::Staged { head_only_fraction } => {
                self.step as f64 >= head_only_fraction * self.total_steps as f64
            }
        }
    }

    pub fn train_step(&mut self, corpus: &[FeatureSequence<T>]) -> Result<StepMetrics> {
        let picks = self.sampler.batch(self.config.batch_size);
        let batch: Vec<&FeatureSequence<T>> = picks
            .iter()
            .map(|&(_, u)| &corpus[self.usable[u]])
            .collect();
        let train_encoder = self.encoder_trainable();

        let mut tape = Tape::new();
        let bound = self.model.encoder.bind(&mut tape, train_encoder);
        let head = self.model.head.bind(&mut tape, true);
        let inputs: Vec<Var> = batch
            .iter()
            .map(|u| tape.constant(u.features.clone()))
            .collect();
        let out = if train_encoder {
            forward_batch(
                &mut tape,
                &self.model.encoder,
                &bound,
                &inputs,
                &mut Mode::Train(&mut self.rng),
            )?
        } else {
            forward_batch(
                &mut tape,
                &self.model.encoder,
                &bound,
                &inputs,
                &mut Mode::Eval,
            )?
        };
        let mut losses = Vec::with_capacity(batch.len());
        for (u, span) in batch.iter().zip(&out.spans) {
            let rows = tape.slice_rows(out.frames, span.start, span.end)?;
            let logits = head_forward(&mut tape, head, rows)?;
            let transcript = u.transcript.as_deref().unwrap_or_default();
            losses.push(ctc_loss_on_tape(
                &mut tape,
                logits,
                &ctc_targets(transcript),
            )?);
        }
        let loss = mean_of(&mut tape, &losses)?;
        let loss_value = tape.value(loss).item().f64();

        let mut grads = tape.backward(loss)?;
        let missing = || Error::State("head gradient missing".into());
        let gw = grads.take(head.weight).ok_or_else(missing)?;
        let gb = grads.take(head.bias).ok_or_else(missing)?;
        let enc_grads = if train_encoder {
            encoder_grads(&mut grads, &bound)?
        } else {
            Default::default()
        };
        let lr = self.config.schedule.lr_at(self.step, self.total_steps);
        let PhoneModel {
            encoder,
            head: params,
        } = &mut self.model;
        let mut updates = encoder_updates(encoder, &enc_grads);
        updates.push(Update {
            name: HEAD_WEIGHT,
            param: &mut params.weight,
            grad: &gw,
        });
        updates.push(Update {
            name: HEAD_BIAS,
            param: &mut params.bias,
            grad: &gb,
        });
        let grad_norm = self.adam.step(updates, lr)?;
        if let (true, Some((mean, var, n))) = (train_encoder, &out.bn_stats) {
            self.model.encoder.update_running_stats(mean, var, *n);
        }
        let metrics = StepMetrics {
            step: self.step,
            epoch: self.step / self.steps_per_epoch(),
            lr,
            loss: loss_value,
            frame_acc: None,
            grad_norm,
            collapse_cosine: None,
        };
        self.step += 1;
        Ok(metrics)
    }
}

/// Trains to completion; returns the model, per-step metrics and skipped count.
pub fn finetune<T: Real>(
    config: FinetuneConfig,
    model: PhoneModel<T>,
    corpus: &[FeatureSequence<T>],
) -> Result<(PhoneModel<T>, Vec<StepMetrics>, usize)> {
    let mut trainer = FinetuneTrainer::new(config, model, corpus)?;
    let mut metrics = Vec::with_capacity(trainer.total_steps as usize);
    while !trainer.is_done() {
        metrics.push(trainer.train_step(corpus)?);
    }
    Ok((trainer.model, metrics, trainer.skipped.len()))
}

/// Error counts of one alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
///
/// Among optimal alignments the backtrace prefers substitution, then
/// insertion, then deletion.
pub fn edit_distance<A: PartialEq>(reference: &[A], hyp: &[A]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            dp[i][j] = sub.min(dp[i][j - 1] + 1).min(dp[i - 1][j] + 1);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if dp[i][j] == dp[i - 1][j - 1] + usize::from(!same) {
                counts.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && dp[i][j] == dp[i][j - 1] + 1 {
            counts.insertions += 1;
            j -= 1;
        } else {
            counts.deletions += 1;
            i -= 1;
        }
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub counts: EditCounts,
    pub reference_length: usize,
    pub hypothesis: Vec<usize>,
}

impl UtteranceScore {
    /// Error rate of this utterance; `None` for an empty reference.
    pub fn per(&self) -> Option<f64> {
        (self.reference_length > 0)
            .then(|| self.counts.total() as f64 / self.reference_length as f64)
    }
}

/// Counts pooled over a test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_length: usize,
    /// `(S + D + I) / reference_length` over the whole set.
    pub per: f64,
    pub utterances: Vec<UtteranceScore>,
}

impl PerReport {
    pub fn from_scores(utterances: Vec<UtteranceScore>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Data("empty test set".into()));
        }
        let sum = |f: fn(&UtteranceScore) -> usize| utterances.iter().map(f).sum::<usize>();
        let substitutions = sum(|u| u.counts.substitutions);
        let deletions = sum(|u| u.counts.deletions);
        let insertions = sum(|u| u.counts.insertions);
        let reference_length = sum(|u| u.reference_length);
        let errors = substitutions + deletions + insertions;
        let per = if reference_length == 0 {
            if errors == 0 {
                0.0
            } else {
                1.0
            }
        } else {
            errors as f64 / reference_length as f64
        };
        Ok(Self {
            substitutions,
            deletions,
            insertions,
            reference_length,
            per,
            utterances,
        })
    }
}

/// Phone sequence decoded from one utterance's embedding rows.
fn decode_rows<T: Real>(
    head: &DownstreamHead<T>,
    frames: &Tensor<T>,
    span: Range<usize>,
) -> Result<Vec<usize>> {
    if span.len() < PAIR {
        return Ok(Vec::new());
    }
    let mut tape = Tape::new();
    let vars = head.bind(&mut tape, false);
    let x = tape.constant(frames.slice_rows(span.start, span.end)?);
    let logits = head_forward(&mut tape, vars, x)?;
    Ok(ctc_greedy_decode(tape.value(logits))
        .into_iter()
        .map(|k| k - 1)
        .collect())
}

/// Greedy-decodes every utterance and pools edit counts.
pub fn evaluate_per<T: Real>(
    model: &PhoneModel<T>,
    test: &[FeatureSequence<T>],
) -> Result<PerReport> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let mut scores = Vec::with_capacity(test.len());
    for chunk in test.chunks(16) {
        let inputs: Vec<&Tensor<T>> = chunk.iter().map(|u| &u.features).collect();
        let (frames, spans) = embed_batch(&model.encoder, &inputs, &mut Mode::Eval)?;
        for (u, span) in chunk.iter().zip(spans) {
            let reference = u.transcript.as_ref().ok_or_else(|| {
                Error::Data(format!("test utterance `{}` has no transcript", u.id))
            })?;
            let hypothesis = decode_rows(&model.head, &frames, span)?;
            scores.push(UtteranceScore {
                id: u.id.clone(),
                counts: edit_distance(reference, &hypothesis),
                reference_length: reference.len(),
                hypothesis,
            });
        }
    }
    PerReport::from_scores(scores)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synth::{make_benchmark, BenchmarkConfig};

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    /// Plain DP distance, no backtrace.
    fn levenshtein(a: &[u8], b: &[u8]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for (i, x) in a.iter().enumerate() {
            let mut cur = vec![i + 1];
            for (j, y) in b.iter().enumerate() {
                cur.push(
                    (prev[j] + usize::from(x != y))
                        .min(prev[j + 1] + 1)
                        .min(cur[j] + 1),
                );
            }
            prev = cur;
        }
        prev[b.len()]
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(&chars("abc"), &chars("abc")).total(), 0);
        let c = edit_distance(&chars("abc"), &chars("ac"));
        assert_eq!((c.substitutions, c.deletions, c.insertions), (0, 1, 0));
        let c = edit_distance(&chars("kitten"), &chars("sitting"));
        assert_eq!(c.total(), 3);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (2, 0, 1));
        let c = edit_distance(&chars(""), &chars("ab"));
        assert_eq!(c.insertions, 2);
    }

    #[test]
    fn ties_prefer_substitution() {
        let c = edit_distance(&chars("ab"), &chars("ba"));
        assert_eq!((c.substitutions, c.deletions, c.insertions), (2, 0, 0));
        let c = edit_distance(&chars("a"), &chars("b"));
        assert_eq!(c.substitutions, 1);
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(
            a in prop::collection::vec(0u8..4, 0..10),
            b in prop::collection::vec(0u8..4, 0..10),
            c in prop::collection::vec(0u8..4, 0..10),
        ) {
            let d = |x: &[u8], y: &[u8]| edit_distance(x, y).total();
            prop_assert_eq!(d(&a, &a), 0);
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
            prop_assert_eq!(d(&a, &b), levenshtein(&a, &b));
            let counts = edit_distance(&a, &b);
            prop_assert_eq!(a.len() + counts.insertions - counts.deletions, b.len());
        }

        #[test]
        fn head_output_length_law(t in 2usize..40) {
            let head = LinearHead::<f64>::init(8, 5, 0);
            let mut tape = Tape::new();
            let vars = head.bind(&mut tape, false);
            let x = tape.constant(Tensor::from_fn(&[t, 4], |i| i as f64));
            let y = head_forward(&mut tape, vars, x).unwrap();
            prop_assert_eq!(tape.shape(y), &[t / 2, 5]);
        }
    }

    #[test]
    fn head_shapes_and_errors() {
        let head = LinearHead::<f64>::init(32, 10, 0);
        for (t, expect) in [(10, 5), (11, 5)] {
            let mut tape = Tape::new();
            let vars = head.bind(&mut tape, false);
            let x = tape.constant(Tensor::from_fn(&[t, 16], |i| i as f64 * 0.01));
            let y = head_forward(&mut tape, vars, x).unwrap();
            assert_eq!(tape.shape(y), &[expect, 10]);
        }
        let mut tape = Tape::new();
        let vars = head.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 16]));
        assert!(matches!(
            head_forward(&mut tape, vars, x),
            Err(Error::InputTooShort(_))
        ));
    }

    #[test]
    fn head_concatenates_successive_frames() {
        let mut head = LinearHead::<f64>::zeros(4, 3);
        head.weight = Tensor::from_fn(&[4, 3], |i| (i + 1) as f64);
        let mut tape = Tape::new();
        let vars = head.bind(&mut tape, false);
        let x = tape.constant(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![9.0, 9.0]]).unwrap(),
        );
        let y = head_forward(&mut tape, vars, x).unwrap();
        // [1, 0, 0, 1] · W picks rows 0 and 3 of W.
        assert_eq!(tape.value(y).data(), &[1.0 + 10.0, 2.0 + 11.0, 3.0 + 12.0]);
    }

    #[test]
    fn zero_head_gives_uniform_posteriors_and_all_deletions() {
        let bench = make_benchmark(&BenchmarkConfig {
            annotated: 0,
            unannotated: 0,
            finetune: 0,
            test: 5,
            ..Default::default()
        })
        .unwrap();
        let test: Vec<FeatureSequence<f64>> = bench.test[1].clone();
        let mut model = PhoneModel::new(
            EncoderParams::init(&EncoderConfig::desk(16), 0).unwrap(),
            12,
            0,
        );
        model.head = LinearHead::zeros(64, 13);
        let (frames, spans) =
            embed_batch(&model.encoder, &[&test[0].features], &mut Mode::Eval).unwrap();
        let mut tape = Tape::new();
        let vars = model.head.bind(&mut tape, false);
        let x = tape.constant(frames.slice_rows(spans[0].start, spans[0].end).unwrap());
        let logits = head_forward(&mut tape, vars, x).unwrap();
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
        // Ties resolve to the blank, so nothing is emitted.
        let report = evaluate_per(&model, &test).unwrap();
        assert_eq!(report.per, 1.0);
        assert_eq!(report.deletions, report.reference_length);
    }

    #[test]
    fn empty_reference_and_hypothesis_score_zero() {
        let score = UtteranceScore {
            id: "u".into(),
            counts: edit_distance::<usize>(&[], &[]),
            reference_length: 0,
            hypothesis: vec![],
        };
        assert_eq!(score.per(), None);
        let report = PerReport::from_scores(vec![score]).unwrap();
        assert_eq!((report.per, report.reference_length), (0.0, 0));
        assert!(matches!(
            PerReport::from_scores(vec![]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn corpus_per_pools_counts_and_ignores_order() {
        let mk = |id: &str, r: &str, h: &str| UtteranceScore {
            id: id.into(),
            counts: edit_distance(&chars(r), &chars(h)),
            reference_length: r.len(),
            hypothesis: vec![],
        };
        let a = vec![
            mk("1", "abcd", "abd"),
            mk("2", "ab", "ba"),
            mk("3", "abcdefgh", "abcdefgh"),
        ];
        let mut b = a.clone();
        b.reverse();
        let (ra, rb) = (
            PerReport::from_scores(a).unwrap(),
            PerReport::from_scores(b).unwrap(),
        );
        assert_eq!(ra.per, 3.0 / 14.0);
        assert_eq!(ra.per, rb.per);
    }

    fn small_setup() -> (PhoneModel<f32>, Vec<FeatureSequence<f32>>, FinetuneConfig) {
        let bench = make_benchmark(&BenchmarkConfig {
            annotated: 0,
            unannotated: 0,
            finetune: 16,
            test: 0,
            ..Default::default()
        })
        .unwrap();
        let corpus: Vec<FeatureSequence<f32>> =
            bench.finetune[1].iter().map(|u| u.cast()).collect();
        let model = PhoneModel::new(
            EncoderParams::init(&EncoderConfig::desk(16), 3).unwrap(),
            12,
            4,
        );
        let config = FinetuneConfig {
            schedule: TrainSchedule::new(10, 3e-3, 0.0, 1.0, 0.0),
            adam: AdamConfig::default(),
            batch_size: 8,
            encoder_training: EncoderTraining::Frozen,
            seed: 5,
        };
        (model, corpus, config)
    }

    #[test]
    fn zero_epochs_keep_the_initial_model() {
        let (model, corpus, mut config) = small_setup();
        config.schedule.epochs = 0;
        let (trained, metrics, _) = finetune(config, model.clone(), &corpus).unwrap();
        assert!(metrics.is_empty());
        assert_eq!(trained, model);
    }

    #[test]
    fn frozen_encoder_loss_decreases_and_is_deterministic() {
        let (model, corpus, config) = small_setup();
        let (trained, metrics, skipped) = finetune(config.clone(), model.clone(), &corpus).unwrap();
        assert_eq!(skipped, 0);
        assert_eq!(trained.encoder, model.encoder);
        let epoch = |e: usize| (metrics[2 * e].loss + metrics[2 * e + 1].loss) / 2.0;
        for e in 1..10 {
            assert!(
                epoch(e) < epoch(e - 1),
                "epoch {e}: {} >= {}",
                epoch(e),
                epoch(e - 1)
            );
        }
        let (again, _, _) = finetune(config, model, &corpus).unwrap();
        assert_eq!(again, trained);
    }

    #[test]
    fn staged_training_unfreezes_the_encoder() {
        let (model, corpus, mut config) = small_setup();
        config.schedule.epochs = 2;
        config.encoder_training = EncoderTraining::Staged {
            head_only_fraction: 0.5,
        };
        let mut trainer = FinetuneTrainer::new(config, model.clone(), &corpus).unwrap();
        trainer.train_step(&corpus).unwrap();
        trainer.train_step(&corpus).unwrap();
        assert_eq!(trainer.model.encoder, model.encoder);
        assert!(trainer.encoder_trainable());
        trainer.train_step(&corpus).unwrap();
        assert_ne!(trainer.model.encoder, model.encoder);
    }

    #[test]
    fn infeasible_utterances_are_skipped() {
        let (model, mut corpus, config) = small_setup();
        corpus[3].transcript = Some((0..40).map(|i| i % 12).collect());
        let trainer = FinetuneTrainer::new(config, model, &corpus).unwrap();
        assert_eq!(trainer.skipped, vec![3]);
    }
}
