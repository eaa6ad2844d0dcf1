use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use xlst_core::augment::AugmentSpec;
use xlst_core::encoder::EncoderConfig;
use xlst_core::finetune::EncoderTraining;
use xlst_core::synth::BenchmarkConfig;
use xlst_core::train::{AdamConfig, TrainSchedule, DEFAULT_LAMBDA, DEFAULT_TAU};

/// Everything a run reads. Each command uses its own section plus the shared keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// 32 or 64.
    pub precision: u32,
    /// Root written by `synth-data`; read by the training and eval commands.
    pub data_dir: Option<PathBuf>,
    pub synth: BenchmarkConfig,
    pub encoder: EncoderConfig,
    pub supervised: SupervisedSection,
    pub xlst: XlstSection,
    pub finetune: FinetuneSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: 32,
            data_dir: None,
            synth: BenchmarkConfig::default(),
            encoder: EncoderConfig::desk(16),
            supervised: SupervisedSection::default(),
            xlst: XlstSection::default(),
            finetune: FinetuneSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedSection {
    /// Defaults to the standard policy scaled to the feature dimension.
    pub augment: Option<AugmentSpec>,
    pub schedule: TrainSchedule,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Language whose annotated corpus is used.
    pub language: u32,
    /// Classifier width; defaults to the largest frame label plus one.
    pub classes: Option<usize>,
    /// Steps between checkpoints, 0 for final only.
    pub checkpoint_every: u64,
}

impl Default for SupervisedSection {
    fn default() -> Self {
        Self {
            augment: None,
            schedule: TrainSchedule::new(10, 2e-3, 0.2, 0.0, 0.8),
            adam: AdamConfig::default(),
            batch_size: 8,
            language: 0,
            classes: None,
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XlstMode {
    /// Un-annotated data of `language` only.
    Mono,
    /// Un-annotated data of every language, balanced by `tau`.
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XlstSection {
    pub mode: XlstMode,
    pub language: u32,
    pub augment: Option<AugmentSpec>,
    pub schedule: TrainSchedule,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub lambda: f64,
    pub tau: f64,
    pub main_eval_mode: bool,
    pub checkpoint_every: u64,
    /// Labelled utterances per language used to track embedding collapse each epoch.
    pub probe_utterances: usize,
}

impl Default for XlstSection {
    fn default() -> Self {
        Self {
            mode: XlstMode::Mono,
            language: 1,
            augment: None,
            schedule: TrainSchedule::new(6, 5e-4, 0.0, 0.5, 0.5),
            adam: AdamConfig::default(),
            batch_size: 8,
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            main_eval_mode: false,
            checkpoint_every: 100,
            probe_utterances: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub schedule: TrainSchedule,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub encoder_training: EncoderTraining,
    /// Target languages; all languages of the data dir when absent.
    pub languages: Option<Vec<u32>>,
    /// Phone inventory size; read from the data dir when absent.
    pub phones: Option<usize>,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            schedule: TrainSchedule::new(30, 2e-3, 0.1, 0.4, 0.5),
            adam: AdamConfig::default(),
            batch_size: 8,
            encoder_training: EncoderTraining::default(),
            languages: None,
            phones: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Test corpus manifest; defaults to the test split of `language`.
    pub manifest: Option<PathBuf>,
    pub language: Option<u32>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("parsing {}", p.display()))
            }
            None => Ok(Self::default()),
        }
    }

    /// Fills defaults that depend on other sections and checks cross-section consistency.
    pub fn resolve(&mut self) -> Result<()> {
        if !matches!(self.precision, 32 | 64) {
            bail!("precision must be 32 or 64, got {}", self.precision);
        }
        self.synth.seed = self.seed;
        self.synth.family.seed = self.seed;
        let dim = self.encoder.input_dim;
        for spec in [&mut self.supervised.augment, &mut self.xlst.augment] {
            let s = spec.get_or_insert_with(|| AugmentSpec::for_feature_dim(dim));
            s.validate(dim)?;
        }
        self.encoder.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data_dir
            .as_deref()
            .context("`data_dir` must point at the output of `synth-data`")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        assert!(RunConfig::parse("sede = 1").is_err());
        assert!(RunConfig::parse("[xlst]\nlamda = 0.5").is_err());
        assert!(RunConfig::parse("[xlst.schedule]\nepochs = 1\nlr = 1.0\nwarmup = 0.0\nhold = 1.0\ndecay = 0.0\nextra = 1").is_err());
    }

    #[test]
    fn empty_file_gives_defaults_and_lambda_default() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.xlst.lambda, 0.9999);
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let mut c = RunConfig::parse("seed = 7\n[xlst]\nmode = \"multi\"\ntau = 0.3").unwrap();
        c.resolve().unwrap();
        assert_eq!(c.synth.family.seed, 7);
        assert!(c.xlst.augment.is_some());
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_precision_is_refused() {
        let mut c = RunConfig::parse("precision = 16").unwrap();
        assert!(c.resolve().is_err());
    }
}
