use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;
use xlst_core::data::FeatureSequence;
use xlst_core::encoder::EncoderParams;
use xlst_core::finetune::{evaluate_per, FinetuneConfig, FinetuneTrainer, PerReport, PhoneModel};
use xlst_core::io::{config_json, load_corpus, save_corpus, Checkpoint};
use xlst_core::synth::{make_benchmark, LanguageSpec};
use xlst_core::tensor::Real;
use xlst_core::train::{
    centroid_cosine, CorpusEntry, CorpusSet, SupervisedConfig, SupervisedTrainer, XlstConfig,
    XlstTrainer, COLLAPSE_THRESHOLD,
};

use crate::config::{RunConfig, XlstMode};
use crate::run::{truncate_metrics, MetricsLog, RunDir, METRICS_FILE};

pub const LANGUAGES_FILE: &str = "languages.json";
pub const FINAL_CHECKPOINT: &str = "final.xt";

/// Manifest of one split; the annotated split has a single corpus.
pub fn manifest_path(data: &Path, split: &str, language: u32) -> PathBuf {
    if split == "annotated" {
        data.join("annotated").join("manifest.tsv")
    } else {
        data.join(split)
            .join(format!("lang-{language}"))
            .join("manifest.tsv")
    }
}

fn load_split<T: Real>(data: &Path, split: &str, language: u32) -> Result<Vec<FeatureSequence<T>>> {
    let path = manifest_path(data, split, language);
    load_corpus(&path).with_context(|| format!("loading {}", path.display()))
}

fn load_languages(data: &Path) -> Result<Vec<LanguageSpec>> {
    let path = data.join(LANGUAGES_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn synth_data(config: &RunConfig, out: &RunDir) -> Result<()> {
    let bench = make_benchmark(&config.synth)?;
    let root = out.path("");
    let mut files = save_corpus(root.join("annotated"), &bench.annotated)?.len();
    for (l, spec) in bench.languages.iter().enumerate() {
        for (split, corpus) in [
            ("unannotated", &bench.unannotated[l]),
            ("finetune", &bench.finetune[l]),
            ("test", &bench.test[l]),
        ] {
            let dir = manifest_path(&root, split, spec.id);
            files += save_corpus(dir.parent().expect("split dir"), corpus)?.len();
        }
    }
    out.write_json(LANGUAGES_FILE, &bench.languages)?;
    println!(
        "wrote {files} utterances for {} languages to {}",
        bench.languages.len(),
        root.display()
    );
    Ok(())
}

fn save_periodic<T: Real>(
    out: &RunDir,
    every: u64,
    step: u64,
    ckpt: impl FnOnce() -> xlst_core::Result<Checkpoint<T>>,
) -> Result<()> {
    if every > 0 && step.is_multiple_of(every) {
        ckpt()?.save(out.path("checkpoints").join(format!("step-{step:07}.xt")))?;
    }
    Ok(())
}

fn open_metrics(out: &RunDir, resumed_at: Option<u64>) -> Result<MetricsLog> {
    let path = out.path(METRICS_FILE);
    if let Some(step) = resumed_at {
        truncate_metrics(&path, step)?;
    }
    MetricsLog::open(&path, resumed_at.is_some())
}

pub fn pretrain_sup<T: Real>(
    config: &RunConfig,
    out: &RunDir,
    resume: Option<&Path>,
) -> Result<()> {
    let section = &config.supervised;
    let data = config.data_dir()?;
    let corpus: Vec<FeatureSequence<T>> = load_split::<T>(data, "annotated", 0)?
        .into_iter()
        .filter(|u| u.language == section.language)
        .collect();
    ensure!(
        !corpus.is_empty(),
        "no annotated utterances for language {}",
        section.language
    );
    let classes = match section.classes {
        Some(c) => c,
        None => {
            let max = corpus
                .iter()
                .filter_map(|u| u.frame_labels.as_ref())
                .flat_map(|l| l.iter().copied())
                .max()
                .context("annotated corpus has no frame labels")?;
            max + 1
        }
    };
    let sup = SupervisedConfig {
        augment: section.augment.clone().expect("resolved"),
        schedule: section.schedule.clone(),
        adam: section.adam.clone(),
        batch_size: section.batch_size,
        seed: config.seed,
    };
    let encoder = EncoderParams::init(&config.encoder, config.seed)?;
    let mut trainer = SupervisedTrainer::new(sup, encoder, classes, &corpus)?;
    if let Some(path) = resume {
        trainer.restore(&Checkpoint::load(path)?)?;
        log::info!("resumed at step {}", trainer.step);
    }
    let mut metrics = open_metrics(out, resume.map(|_| trainer.step))?;
    while !trainer.is_done() {
        let m = trainer.train_step(&corpus)?;
        metrics.record(&m)?;
        save_periodic(out, section.checkpoint_every, trainer.step, || {
            trainer.checkpoint()
        })?;
    }
    let ckpt = trainer.checkpoint()?;
    ckpt.save(out.path(FINAL_CHECKPOINT))?;
    println!(
        "{} steps; checkpoint {} ({})",
        trainer.step,
        out.path(FINAL_CHECKPOINT).display(),
        ckpt.hash()?
    );
    Ok(())
}

#[derive(Serialize)]
struct EpochRecord {
    epoch: u64,
    step: u64,
    sampler_draws: Vec<u64>,
    sampler_probabilities: Vec<f64>,
    collapse_cosine: f64,
}

fn with_global_labels<T: Real>(
    spec: &LanguageSpec,
    corpus: Vec<FeatureSequence<T>>,
) -> Vec<FeatureSequence<T>> {
    corpus
        .into_iter()
        .map(|mut u| {
            u.frame_labels = u
                .frame_labels
                .map(|l| l.iter().map(|&p| spec.inventory[p]).collect());
            u
        })
        .collect()
}

pub fn pretrain_xlst<T: Real>(
    config: &RunConfig,
    out: &RunDir,
    init: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    if init.is_none() && resume.is_none() {
        bail!("pretrain-xlst needs --init (a trained checkpoint) or --resume");
    }
    let section = &config.xlst;
    let data = config.data_dir()?;
    let specs = load_languages(data)?;
    let languages: Vec<u32> = match section.mode {
        XlstMode::Mono => vec![section.language],
        XlstMode::Multi => specs.iter().map(|s| s.id).collect(),
    };
    let mut corpora = Vec::new();
    let mut entries = Vec::new();
    let mut probe = Vec::new();
    for &l in &languages {
        let spec = specs
            .iter()
            .find(|s| s.id == l)
            .with_context(|| format!("language {l} not in {}", LANGUAGES_FILE))?;
        let corpus = load_split::<T>(data, "unannotated", l)?;
        entries.push(CorpusEntry {
            language: l,
            utterances: corpus.len(),
            frames: corpus.iter().map(FeatureSequence::frames).sum(),
        });
        corpora.push(corpus);
        let test = load_split::<T>(data, "test", l)?;
        probe.extend(with_global_labels(
            spec,
            test.into_iter().take(section.probe_utterances).collect(),
        ));
    }
    let xc = XlstConfig {
        augment: section.augment.clone().expect("resolved"),
        schedule: section.schedule.clone(),
        adam: section.adam.clone(),
        batch_size: section.batch_size,
        lambda: section.lambda,
        tau: section.tau,
        seed: config.seed,
        main_eval_mode: section.main_eval_mode,
    };
    let resumed = resume.map(Checkpoint::<T>::load).transpose()?;
    let init_encoder = match (&resumed, init) {
        (Some(c), _) => c
            .ema
            .as_ref()
            .map_or_else(|| c.encoder.clone(), |e| e.target.clone()),
        (None, Some(p)) => {
            Checkpoint::<T>::load(p)
                .with_context(|| format!("loading {}", p.display()))?
                .encoder
        }
        (None, None) => unreachable!("checked above"),
    };
    let mut trainer = XlstTrainer::new(xc, init_encoder, CorpusSet::new(entries, section.tau)?)?;
    if let Some(c) = &resumed {
        trainer.restore(c)?;
        log::info!("resumed at step {}", trainer.step);
    }
    let mut metrics = open_metrics(out, resumed.as_ref().map(|_| trainer.step))?;
    let per_epoch = trainer.steps_per_epoch();
    while !trainer.is_done() {
        let m = trainer.train_step(&corpora)?;
        metrics.record(&m)?;
        save_periodic(out, section.checkpoint_every, trainer.step, || {
            trainer.checkpoint()
        })?;
        if trainer.step % per_epoch == 0 || trainer.is_done() {
            let cosine = if probe.is_empty() {
                0.0
            } else {
                centroid_cosine(&trainer.main, &probe)?
            };
            if cosine >= COLLAPSE_THRESHOLD {
                log::warn!(
                    "embeddings collapsing: centroid cosine {cosine:.4} at step {}",
                    trainer.step
                );
            }
            metrics.record(&EpochRecord {
                epoch: (trainer.step - 1) / per_epoch,
                step: trainer.step,
                sampler_draws: trainer.sampler.draws.clone(),
                sampler_probabilities: trainer.sampler.corpus.probabilities(),
                collapse_cosine: cosine,
            })?;
        }
    }
    let ckpt = trainer.checkpoint()?;
    ckpt.save(out.path(FINAL_CHECKPOINT))?;
    println!(
        "{} steps; checkpoint {} ({})",
        trainer.step,
        out.path(FINAL_CHECKPOINT).display(),
        ckpt.hash()?
    );
    Ok(())
}

#[derive(Serialize)]
struct LanguageSummary {
    language: u32,
    per: f64,
    substitutions: usize,
    deletions: usize,
    insertions: usize,
    reference_length: usize,
    skipped_training_utterances: usize,
}

#[derive(Serialize)]
struct FinetuneSummary {
    languages: Vec<LanguageSummary>,
    avg: f64,
}

fn report_text(title: &str, r: &PerReport) -> String {
    format!(
        "{title}: PER {:.2}% (S={} D={} I={} N={}, {} utterances)\n",
        100.0 * r.per,
        r.substitutions,
        r.deletions,
        r.insertions,
        r.reference_length,
        r.utterances.len()
    )
}

pub fn finetune<T: Real>(config: &RunConfig, out: &RunDir, init: Option<&Path>) -> Result<()> {
    let section = &config.finetune;
    let data = config.data_dir()?;
    let specs = load_languages(data)?;
    let init = init.context("finetune needs --init (a pretrained checkpoint)")?;
    let encoder = Checkpoint::<T>::load(init)
        .with_context(|| format!("loading {}", init.display()))?
        .encoder;
    let languages = section
        .languages
        .clone()
        .unwrap_or_else(|| specs.iter().map(|s| s.id).collect());
    ensure!(!languages.is_empty(), "no target languages");
    let fc = FinetuneConfig {
        schedule: section.schedule.clone(),
        adam: section.adam.clone(),
        batch_size: section.batch_size,
        encoder_training: section.encoder_training,
        seed: config.seed,
    };
    let mut summary = Vec::new();
    let mut text = String::new();
    for &l in &languages {
        let spec = specs
            .iter()
            .find(|s| s.id == l)
            .with_context(|| format!("language {l} not in {}", LANGUAGES_FILE))?;
        let phones = section.phones.unwrap_or_else(|| spec.phones());
        let train = load_split::<T>(data, "finetune", l)?;
        let test = load_split::<T>(data, "test", l)?;
        let model = PhoneModel::new(encoder.clone(), phones, config.seed);
        let mut trainer = FinetuneTrainer::new(fc.clone(), model, &train)?;
        let dir = PathBuf::from(format!("lang-{l}"));
        fs::create_dir_all(out.path(&dir))?;
        let mut metrics = MetricsLog::open(&out.path(dir.join(METRICS_FILE)), false)?;
        while !trainer.is_done() {
            metrics.record(&trainer.train_step(&train)?)?;
        }
        trainer
            .model
            .checkpoint(config_json(&fc)?)
            .save(out.path(dir.join("model.xt")))?;
        let report = evaluate_per(&trainer.model, &test)?;
        out.write_json(&dir.join("report.json").to_string_lossy(), &report)?;
        let line = report_text(&format!("language {l}"), &report);
        print!("{line}");
        text.push_str(&line);
        summary.push(LanguageSummary {
            language: l,
            per: report.per,
            substitutions: report.substitutions,
            deletions: report.deletions,
            insertions: report.insertions,
            reference_length: report.reference_length,
            skipped_training_utterances: trainer.skipped.len(),
        });
    }
    let avg = summary.iter().map(|s| s.per).sum::<f64>() / summary.len() as f64;
    let line = format!("avg: PER {:.2}%\n", 100.0 * avg);
    print!("{line}");
    text.push_str(&line);
    fs::write(out.path("summary.txt"), text)?;
    out.write_json(
        "summary.json",
        &FinetuneSummary {
            languages: summary,
            avg,
        },
    )?;
    Ok(())
}

pub fn eval<T: Real>(config: &RunConfig, out: &RunDir, model_path: Option<&Path>) -> Result<()> {
    let model_path = model_path.context("eval needs --init (a fine-tuned model)")?;
    let model = PhoneModel::from_checkpoint(
        &Checkpoint::<T>::load(model_path)
            .with_context(|| format!("loading {}", model_path.display()))?,
    )?;
    let manifest = match (&config.eval.manifest, config.eval.language) {
        (Some(m), _) => m.clone(),
        (None, Some(l)) => manifest_path(config.data_dir()?, "test", l),
        (None, None) => bail!("eval needs `eval.manifest` or `eval.language`"),
    };
    let test: Vec<FeatureSequence<T>> =
        load_corpus(&manifest).with_context(|| format!("loading {}", manifest.display()))?;
    let report = evaluate_per(&model, &test)?;
    out.write_json("report.json", &report)?;
    let text = report_text(&manifest.display().to_string(), &report);
    fs::write(out.path("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
