use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::container::{sha256_hex, TensorFile};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneTrainer, PhoneModel};
use crate::head::LinearHead;
use crate::tensor::{Precision, Real, Tensor};
use crate::train::{
    AdamConfig, AdamState, BalancedSampler, EmaState, SupervisedModel, SupervisedTrainer,
    XlstTrainer,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Supervised,
    Xlst,
    Finetune,
}

/// Position of a run, enough to continue it bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub total_steps: u64,
    pub rng: ChaCha8Rng,
    pub sampler: BalancedSampler,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    kind: CheckpointKind,
    precision: u32,
    encoder: EncoderConfig,
    config: String,
    config_hash: String,
    has_head: bool,
    adam: Option<(AdamConfig, u64)>,
    state: Option<TrainerState>,
}

/// Everything a run writes: parameters, optimizer and EMA state, run position and config.
///
/// `config` is the JSON of the trainer config that produced it; `config_hash` is its SHA-256.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: CheckpointKind,
    pub encoder: EncoderParams<T>,
    pub head: Option<LinearHead<T>>,
    pub adam: Option<AdamState<T>>,
    pub ema: Option<EmaState<T>>,
    pub state: Option<TrainerState>,
    pub config: String,
}

fn put_map<T: Real>(file: &mut TensorFile, prefix: &str, map: &BTreeMap<String, Tensor<T>>) {
    for (k, v) in map {
        file.insert_tensor(format!("{prefix}{k}"), v);
    }
}

fn take_map<T: Real>(file: &TensorFile, prefix: &str) -> Result<BTreeMap<String, Tensor<T>>> {
    file.entries
        .keys()
        .filter_map(|k| k.strip_prefix(prefix).map(|rest| (k, rest)))
        .map(|(k, rest)| Ok((rest.to_string(), file.tensor(k)?)))
        .collect()
}

fn encoder_from<T: Real>(
    file: &TensorFile,
    prefix: &str,
    config: &EncoderConfig,
) -> Result<EncoderParams<T>> {
    let params = EncoderParams {
        config: config.clone(),
        params: take_map(file, &format!("{prefix}param."))?,
        buffers: take_map(file, &format!("{prefix}buffer."))?,
    };
    params.validate()?;
    Ok(params)
}

impl<T: Real> Checkpoint<T> {
    pub fn config_hash(&self) -> String {
        sha256_hex(self.config.as_bytes())
    }

    pub fn to_file(&self) -> Result<TensorFile> {
        let mut file = TensorFile::new();
        put_map(&mut file, "encoder.param.", &self.encoder.params);
        put_map(&mut file, "encoder.buffer.", &self.encoder.buffers);
        if let Some(head) = &self.head {
            file.insert_tensor("head.weight", &head.weight);
            file.insert_tensor("head.bias", &head.bias);
        }
        if let Some(adam) = &self.adam {
            put_map(&mut file, "adam.m.", &adam.m);
            put_map(&mut file, "adam.v.", &adam.v);
        }
        if let Some(ema) = &self.ema {
            put_map(&mut file, "ema.param.", &ema.target.params);
            put_map(&mut file, "ema.buffer.", &ema.target.buffers);
            file.insert_tensor("ema.lambda", &Tensor::<f64>::scalar(ema.lambda));
        }
        let meta = Meta {
            kind: self.kind,
            precision: T::PRECISION.bits(),
            encoder: self.encoder.config.clone(),
            config: self.config.clone(),
            config_hash: self.config_hash(),
            has_head: self.head.is_some(),
            adam: self.adam.as_ref().map(|a| (a.config.clone(), a.step)),
            state: self.state.clone(),
        };
        file.insert_json("meta", &meta)?;
        Ok(file)
    }

    /// Rebuilds a checkpoint, converting stored tensors to `T` if the precisions differ.
    pub fn from_file(file: &TensorFile) -> Result<Self> {
        let meta: Meta = file.json("meta")?;
        Precision::from_bits(meta.precision)?;
        if sha256_hex(meta.config.as_bytes()) != meta.config_hash {
            return Err(Error::Format(
                "config hash does not match the stored config".into(),
            ));
        }
        let encoder = encoder_from(file, "encoder.", &meta.encoder)?;
        let head = if meta.has_head {
            Some(LinearHead::from_parts(
                file.tensor("head.weight")?,
                file.tensor("head.bias")?,
            )?)
        } else {
            None
        };
        let adam = meta.adam.map(|(config, step)| -> Result<_> {
            Ok(AdamState {
                config,
                step,
                m: take_map(file, "adam.m.")?,
                v: take_map(file, "adam.v.")?,
            })
        });
        let ema = if file.contains("ema.lambda") {
            let lambda = file.tensor::<f64>("ema.lambda")?.item();
            Some(EmaState::new(
                encoder_from(file, "ema.", &meta.encoder)?,
                lambda,
            )?)
        } else {
            None
        };
        Ok(Self {
            kind: meta.kind,
            encoder,
            head,
            adam: adam.transpose()?,
            ema,
            state: meta.state,
            config: meta.config,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_file()?.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_file()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file(&TensorFile::load(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn require_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::State(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )))
        }
    }

    fn require_config<C: Serialize>(&self, config: &C) -> Result<()> {
        if config_json(config)? == self.config {
            Ok(())
        } else {
            Err(Error::State(
                "checkpoint was written under a different config".into(),
            ))
        }
    }

    fn take_state(&self) -> Result<TrainerState> {
        self.state
            .clone()
            .ok_or_else(|| Error::State("checkpoint carries no run state".into()))
    }

    fn take_adam(&self) -> Result<AdamState<T>> {
        self.adam
            .clone()
            .ok_or_else(|| Error::State("checkpoint carries no optimizer state".into()))
    }

    fn take_head(&self) -> Result<LinearHead<T>> {
        self.head
            .clone()
            .ok_or_else(|| Error::State("checkpoint carries no head".into()))
    }
}

pub fn config_json<C: Serialize>(config: &C) -> Result<String> {
    serde_json::to_string(config).map_err(|e| Error::Format(format!("config encode: {e}")))
}

fn state_of(
    step: u64,
    total_steps: u64,
    rng: &ChaCha8Rng,
    sampler: &BalancedSampler,
) -> TrainerState {
    TrainerState {
        step,
        total_steps,
        rng: rng.clone(),
        sampler: sampler.clone(),
    }
}

impl<T: Real> SupervisedTrainer<T> {
    pub fn checkpoint(&self) -> Result<Checkpoint<T>> {
        Ok(Checkpoint {
            kind: CheckpointKind::Supervised,
            encoder: self.model.encoder.clone(),
            head: Some(self.model.classifier.clone()),
            adam: Some(self.adam.clone()),
            ema: None,
            state: Some(state_of(
                self.step,
                self.total_steps,
                &self.rng,
                &self.sampler,
            )),
            config: config_json(&self.config)?,
        })
    }

    /// Overwrites the run state of a freshly built trainer with a checkpoint's.
    pub fn restore(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        ckpt.require_kind(CheckpointKind::Supervised)?;
        ckpt.require_config(&self.config)?;
        let state = ckpt.take_state()?;
        self.model = SupervisedModel {
            encoder: ckpt.encoder.clone(),
            classifier: ckpt.take_head()?,
        };
        self.adam = ckpt.take_adam()?;
        self.step = state.step;
        self.total_steps = state.total_steps;
        self.rng = state.rng;
        self.sampler = state.sampler;
        Ok(())
    }
}

impl<T: Real> XlstTrainer<T> {
    pub fn checkpoint(&self) -> Result<Checkpoint<T>> {
        Ok(Checkpoint {
            kind: CheckpointKind::Xlst,
            encoder: self.main.clone(),
            head: None,
            adam: Some(self.adam.clone()),
            ema: Some(self.ema.clone()),
            state: Some(state_of(
                self.step,
                self.total_steps,
                &self.rng,
                &self.sampler,
            )),
            config: config_json(&self.config)?,
        })
    }

    pub fn restore(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        ckpt.require_kind(CheckpointKind::Xlst)?;
        ckpt.require_config(&self.config)?;
        let state = ckpt.take_state()?;
        self.main = ckpt.encoder.clone();
        self.ema = ckpt
            .ema
            .clone()
            .ok_or_else(|| Error::State("checkpoint carries no EMA state".into()))?;
        self.adam = ckpt.take_adam()?;
        self.step = state.step;
        self.total_steps = state.total_steps;
        self.rng = state.rng;
        self.sampler = state.sampler;
        Ok(())
    }
}

impl<T: Real> FinetuneTrainer<T> {
    pub fn checkpoint(&self) -> Result<Checkpoint<T>> {
        Ok(Checkpoint {
            kind: CheckpointKind::Finetune,
            encoder: self.model.encoder.clone(),
            head: Some(self.model.head.clone()),
            adam: Some(self.adam.clone()),
            ema: None,
            state: Some(state_of(
                self.step,
                self.total_steps,
                &self.rng,
                &self.sampler,
            )),
            config: config_json(&self.config)?,
        })
    }

    pub fn restore(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        ckpt.require_kind(CheckpointKind::Finetune)?;
        ckpt.require_config(&self.config)?;
        let state = ckpt.take_state()?;
        self.model = PhoneModel {
            encoder: ckpt.encoder.clone(),
            head: ckpt.take_head()?,
        };
        self.adam = ckpt.take_adam()?;
        self.step = state.step;
        self.total_steps = state.total_steps;
        self.rng = state.rng;
        self.sampler = state.sampler;
        Ok(())
    }
}

impl<T: Real> PhoneModel<T> {
    /// A fine-tuned model as a stateless checkpoint, for evaluation.
    pub fn checkpoint(&self, config: String) -> Checkpoint<T> {
        Checkpoint {
            kind: CheckpointKind::Finetune,
            encoder: self.encoder.clone(),
            head: Some(self.head.clone()),
            adam: None,
            ema: None,
            state: None,
            config,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        ckpt.require_kind(CheckpointKind::Finetune)?;
        Ok(Self {
            encoder: ckpt.encoder.clone(),
            head: ckpt.take_head()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentSpec;
    use crate::encoder::EncoderConfig;
    use crate::synth::{make_benchmark, BenchmarkConfig, FamilyConfig};
    use crate::train::{CorpusEntry, CorpusSet, SupervisedConfig, TrainSchedule, XlstConfig};

    fn tiny_family() -> BenchmarkConfig {
        BenchmarkConfig {
            family: FamilyConfig {
                languages: 2,
                ..FamilyConfig::default()
            },
            annotated: 6,
            unannotated: 6,
            finetune: 4,
            test: 2,
            seed: 3,
        }
    }

    fn xlst_trainer() -> (
        XlstTrainer<f64>,
        Vec<Vec<crate::data::FeatureSequence<f64>>>,
    ) {
        let bench = make_benchmark(&tiny_family()).unwrap();
        let corpora: Vec<Vec<_>> = bench
            .unannotated
            .iter()
            .map(|c| c.iter().map(|u| u.cast()).collect())
            .collect();
        let entries = corpora
            .iter()
            .enumerate()
            .map(|(l, c)| CorpusEntry {
                language: l as u32,
                utterances: c.len(),
                frames: c.iter().map(|u| u.frames()).sum(),
            })
            .collect();
        let config = XlstConfig {
            augment: AugmentSpec::for_feature_dim(16),
            schedule: TrainSchedule::new(2, 1e-3, 0.0, 0.5, 0.5),
            adam: AdamConfig::default(),
            batch_size: 2,
            lambda: 0.9,
            tau: 0.5,
            seed: 5,
            main_eval_mode: false,
        };
        let init = EncoderParams::init(&EncoderConfig::tiny(16), 1).unwrap();
        let trainer = XlstTrainer::new(
            config.clone(),
            init,
            CorpusSet::new(entries, config.tau).unwrap(),
        )
        .unwrap();
        (trainer, corpora)
    }

    #[test]
    fn xlst_checkpoint_round_trips_bit_exactly() {
        let (mut trainer, corpora) = xlst_trainer();
        trainer.train_step(&corpora).unwrap();
        let ckpt = trainer.checkpoint().unwrap();
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn resumed_xlst_run_matches_uninterrupted() {
        let (mut a, corpora) = xlst_trainer();
        a.train_step(&corpora).unwrap();
        let ckpt = Checkpoint::<f64>::from_file(
            &TensorFile::from_bytes(&a.checkpoint().unwrap().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        let (mut b, _) = xlst_trainer();
        b.restore(&ckpt).unwrap();
        while !a.is_done() {
            assert_eq!(
                a.train_step(&corpora).unwrap(),
                b.train_step(&corpora).unwrap()
            );
        }
        assert!(b.is_done());
        assert_eq!(
            a.checkpoint().unwrap().hash().unwrap(),
            b.checkpoint().unwrap().hash().unwrap()
        );
    }

    #[test]
    fn restore_refuses_other_configs_and_kinds() {
        let (a, _) = xlst_trainer();
        let ckpt = a.checkpoint().unwrap();
        let (mut b, _) = xlst_trainer();
        b.config.lambda = 0.5;
        assert!(matches!(b.restore(&ckpt), Err(Error::State(_))));

        let bench = make_benchmark(&tiny_family()).unwrap();
        let corpus: Vec<crate::data::FeatureSequence<f64>> =
            bench.annotated.iter().map(|u| u.cast()).collect();
        let encoder = EncoderParams::init(&EncoderConfig::tiny(16), 1).unwrap();
        let config = SupervisedConfig {
            augment: AugmentSpec::for_feature_dim(16),
            schedule: TrainSchedule::new(1, 1e-3, 0.0, 1.0, 0.0),
            adam: AdamConfig::default(),
            batch_size: 2,
            seed: 0,
        };
        let mut sup = SupervisedTrainer::new(config, encoder, 24, &corpus).unwrap();
        assert!(matches!(sup.restore(&ckpt), Err(Error::State(_))));
    }

    #[test]
    fn precision_converts_on_load() {
        let (a, _) = xlst_trainer();
        let file = a.checkpoint().unwrap().to_file().unwrap();
        let single = Checkpoint::<f32>::from_file(&file).unwrap();
        let p = &single.encoder.params["projector.fc1.weight"];
        let q = &a.main.params["projector.fc1.weight"];
        assert_eq!(p.data()[0], q.data()[0] as f32);
    }
}
