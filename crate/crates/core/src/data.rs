use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A `T×F` acoustic feature matrix with its language and optional annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<T> {
    pub id: String,
    pub features: Tensor<T>,
    pub language: u32,
    /// One phone id per input frame, present only for frame-aligned corpora.
    pub frame_labels: Option<Vec<usize>>,
    /// Phone sequence without alignment.
    pub transcript: Option<Vec<usize>>,
}

impl<T: Real> FeatureSequence<T> {
    pub fn new(id: impl Into<String>, features: Tensor<T>, language: u32) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::shape("feature_sequence", "features must be T×F"));
        }
        if !features.is_finite() {
            return Err(Error::Data("features contain non-finite values".into()));
        }
        Ok(Self {
            id: id.into(),
            features,
            language,
            frame_labels: None,
            transcript: None,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn cast<U: Real>(&self) -> FeatureSequence<U> {
        FeatureSequence {
            id: self.id.clone(),
            features: self.features.cast(),
            language: self.language,
            frame_labels: self.frame_labels.clone(),
            transcript: self.transcript.clone(),
        }
    }

    /// The same utterance with all annotations removed.
    pub fn unlabeled(&self) -> Self {
        Self {
            frame_labels: None,
            transcript: None,
            ..self.clone()
        }
    }

    pub fn has_labels(&self) -> bool {
        self.frame_labels.is_some() || self.transcript.is_some()
    }
}

/// Collapses consecutive repeats, e.g. frame labels into a transcript.
pub fn collapse_repeats(labels: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &l in labels {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}
