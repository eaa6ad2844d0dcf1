//! Toy multilingual corpora over a shared pool of acoustic prototypes.
//!
//! Every language owns an inventory of phones, each tied to one global
//! prototype vector. An utterance is a Markov walk over the inventory where each
//! phone emits `prototype + N(0, σ²)` frames for a random duration. Languages
//! other than 0 share a fixed fraction of their inventory with language 0.

use rand::distr::weighted::WeightedIndex;
use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{collapse_repeats, FeatureSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilyConfig {
    pub languages: usize,
    pub prototypes: usize,
    pub phones_per_language: usize,
    /// Fraction of each inventory shared with language 0.
    pub overlap: f64,
    pub feature_dim: usize,
    pub noise: f64,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_phones: usize,
    pub max_phones: usize,
    pub seed: u64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            languages: 4,
            prototypes: 40,
            phones_per_language: 12,
            overlap: 0.5,
            feature_dim: 16,
            noise: 0.3,
            min_duration: 4,
            max_duration: 8,
            min_phones: 6,
            max_phones: 12,
            seed: 0,
        }
    }
}

impl FamilyConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.languages == 0 || self.phones_per_language < 2 || self.feature_dim == 0 {
            return fail("need >= 1 language, >= 2 phones and >= 1 feature".into());
        }
        if self.prototypes < self.phones_per_language {
            return fail(format!(
                "pool of {} prototypes cannot fill an inventory of {}",
                self.prototypes, self.phones_per_language
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return fail(format!("overlap {} outside [0, 1]", self.overlap));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise {} must be >= 0", self.noise));
        }
        if self.min_duration < 2 || self.max_duration < self.min_duration {
            return fail(format!(
                "durations {}..={} must be >= 2 and ordered",
                self.min_duration, self.max_duration
            ));
        }
        if self.min_phones == 0 || self.max_phones < self.min_phones {
            return fail(format!(
                "phone counts {}..={} must be >= 1 and ordered",
                self.min_phones, self.max_phones
            ));
        }
        Ok(())
    }

    /// Phones every other language takes from language 0.
    pub fn shared_phones(&self) -> usize {
        (self.overlap * self.phones_per_language as f64 - 1e-9)
            .ceil()
            .max(0.0) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: u32,
    /// Global prototype id of each local phone.
    pub inventory: Vec<usize>,
    /// Mean feature vector of each local phone.
    pub means: Vec<Vec<f64>>,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_phones: usize,
    pub max_phones: usize,
    /// Row-stochastic, zero diagonal.
    pub transitions: Vec<Vec<f64>>,
    pub noise: f64,
}

impl LanguageSpec {
    pub fn phones(&self) -> usize {
        self.inventory.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.means[0].len()
    }

    /// Local phone with the closest mean, the Bayes rule under isotropic noise.
    pub fn nearest_phone(&self, frame: &[f64]) -> usize {
        let dist = |m: &[f64]| {
            m.iter()
                .zip(frame)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        };
        (0..self.phones())
            .min_by(|&a, &b| dist(&self.means[a]).total_cmp(&dist(&self.means[b])))
            .expect("non-empty inventory")
    }
}

/// Draws the prototype pool and all language specs from `config.seed`.
pub fn make_language_family(config: &FamilyConfig) -> Result<Vec<LanguageSpec>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool: Vec<Vec<f64>> = (0..config.prototypes)
        .map(|_| {
            (0..config.feature_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect()
        })
        .collect();
    let n = config.phones_per_language;
    let base: Vec<usize> = index::sample(&mut rng, config.prototypes, n).into_vec();
    let shared = config.shared_phones();
    let mut specs = Vec::with_capacity(config.languages);
    for id in 0..config.languages {
        let inventory = if id == 0 {
            base.clone()
        } else {
            let mut inv: Vec<usize> = base.choose_multiple(&mut rng, shared).copied().collect();
            let mut outside: Vec<usize> = (0..config.prototypes)
                .filter(|p| !base.contains(p))
                .collect();
            outside.shuffle(&mut rng);
            let mut rest: Vec<usize> = base.iter().copied().filter(|p| !inv.contains(p)).collect();
            rest.shuffle(&mut rng);
            inv.extend(outside.into_iter().chain(rest).take(n - shared));
            inv.shuffle(&mut rng);
            inv
        };
        let transitions = (0..n)
            .map(|i| {
                let w: Vec<f64> = (0..n)
                    .map(|j| if i == j { 0.0 } else { Exp1.sample(&mut rng) })
                    .collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|v| v / s).collect()
            })
            .collect();
        specs.push(LanguageSpec {
            id: id as u32,
            means: inventory.iter().map(|&p| pool[p].clone()).collect(),
            inventory,
            min_duration: config.min_duration,
            max_duration: config.max_duration,
            min_phones: config.min_phones,
            max_phones: config.max_phones,
            transitions,
            noise: config.noise,
        });
    }
    Ok(specs)
}

/// One utterance with frame labels and transcript in local phone ids.
pub fn sample_utterance<R: Rng + ?Sized>(
    spec: &LanguageSpec,
    id: impl Into<String>,
    rng: &mut R,
) -> FeatureSequence<f64> {
    let f = spec.feature_dim();
    let count = rng.random_range(spec.min_phones..=spec.max_phones);
    let mut phone = rng.random_range(0..spec.phones());
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for k in 0..count {
        if k > 0 {
            let row =
                WeightedIndex::new(&spec.transitions[phone]).expect("stochastic transition row");
            phone = row.sample(rng);
        }
        let dur = rng.random_range(spec.min_duration..=spec.max_duration);
        for _ in 0..dur {
            labels.push(phone);
            for &m in &spec.means[phone] {
                let e: f64 = rng.sample(StandardNormal);
                data.push(m + spec.noise * e);
            }
        }
    }
    let t = labels.len();
    let features = Tensor::new(vec![t, f], data).expect("frame data matches shape");
    let mut seq = FeatureSequence::new(id, features, spec.id).expect("finite synthetic features");
    seq.transcript = Some(collapse_repeats(&labels));
    seq.frame_labels = Some(labels);
    seq
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub family: FamilyConfig,
    /// Frame-labelled utterances of language 0.
    pub annotated: usize,
    /// Unlabelled utterances per language.
    pub unannotated: usize,
    /// Transcribed utterances per language for fine-tuning.
    pub finetune: usize,
    /// Held-out utterances per language.
    pub test: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            family: FamilyConfig::default(),
            annotated: 400,
            unannotated: 2000,
            finetune: 50,
            test: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub languages: Vec<LanguageSpec>,
    /// Language 0 with frame labels and transcripts.
    pub annotated: Vec<FeatureSequence<f64>>,
    /// Per language, no annotations.
    pub unannotated: Vec<Vec<FeatureSequence<f64>>>,
    /// Per language, transcripts only.
    pub finetune: Vec<Vec<FeatureSequence<f64>>>,
    /// Per language, transcripts and frame labels.
    pub test: Vec<Vec<FeatureSequence<f64>>>,
}

#[derive(Clone, Copy)]
enum Split {
    Annotated = 0,
    Unannotated = 1,
    Finetune = 2,
    Test = 3,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Annotated => "annotated",
            Split::Unannotated => "unannotated",
            Split::Finetune => "finetune",
            Split::Test => "test",
        }
    }
}

fn split_corpus(
    spec: &LanguageSpec,
    seed: u64,
    split: Split,
    count: usize,
) -> Vec<FeatureSequence<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split as u64 * 1024 + spec.id as u64);
    (0..count)
        .map(|i| {
            let id = format!("{}-{}-{i:05}", split.name(), spec.id);
            let mut u = sample_utterance(spec, id, &mut rng);
            match split {
                Split::Unannotated => u = u.unlabeled(),
                Split::Finetune => u.frame_labels = None,
                Split::Annotated | Split::Test => {}
            }
            u
        })
        .collect()
}

/// Builds every split of the benchmark deterministically from the config.
pub fn make_benchmark(config: &BenchmarkConfig) -> Result<Benchmark> {
    let languages = make_language_family(&config.family)?;
    let per_language = |split, count| {
        languages
            .iter()
            .map(|spec| split_corpus(spec, config.seed, split, count))
            .collect::<Vec<_>>()
    };
    Ok(Benchmark {
        annotated: split_corpus(
            &languages[0],
            config.seed,
            Split::Annotated,
            config.annotated,
        ),
        unannotated: per_language(Split::Unannotated, config.unannotated),
        finetune: per_language(Split::Finetune, config.finetune),
        test: per_language(Split::Test, config.test),
        languages,
    })
}

/// Frame accuracy of the nearest-mean rule on labelled utterances.
pub fn nearest_phone_accuracy(spec: &LanguageSpec, corpus: &[FeatureSequence<f64>]) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for u in corpus {
        let labels = u
            .frame_labels
            .as_ref()
            .ok_or_else(|| Error::Data(format!("utterance `{}` has no frame labels", u.id)))?;
        for (t, &l) in labels.iter().enumerate() {
            hits += usize::from(spec.nearest_phone(u.features.row(t)) == l);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("no labelled frames".into()));
    }
    Ok(hits as f64 / total as f64)
}
