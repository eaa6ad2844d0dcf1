use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size of one language's corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub language: u32,
    pub utterances: usize,
    /// Total frames, the size used for balancing.
    pub frames: usize,
}

/// Corpora `D^1 … D^M` sampled with `p_l ∝ n_l^τ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSet {
    pub entries: Vec<CorpusEntry>,
    pub tau: f64,
}

pub const DEFAULT_TAU: f64 = 0.5;

impl CorpusSet {
    pub fn new(entries: Vec<CorpusEntry>, tau: f64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Data("corpus set has no languages".into()));
        }
        if let Some(e) = entries.iter().find(|e| e.utterances == 0 || e.frames == 0) {
            return Err(Error::Data(format!(
                "language {} has an empty corpus",
                e.language
            )));
        }
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!(
                "balance exponent {tau} must be >= 0"
            )));
        }
        Ok(Self { entries, tau })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let w: Vec<f64> = self
            .entries
            .iter()
            .map(|e| (e.frames as f64).powf(self.tau))
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }

    pub fn total_utterances(&self) -> usize {
        self.entries.iter().map(|e| e.utterances).sum()
    }
}

/// Draws `(corpus index, utterance index)` pairs.
///
/// Languages are chosen independently per draw; within a language, utterances
/// follow a shuffled order that is redrawn once exhausted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedSampler {
    pub corpus: CorpusSet,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    /// Completed passes per language.
    pub epochs: Vec<u64>,
    pub draws: Vec<u64>,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(corpus: CorpusSet, seed: u64) -> Self {
        let n = corpus.entries.len();
        Self {
            orders: corpus
                .entries
                .iter()
                .map(|e| (0..e.utterances).collect())
                .collect(),
            cursors: corpus.entries.iter().map(|e| e.utterances).collect(),
            epochs: vec![0; n],
            draws: vec![0; n],
            corpus,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next(&mut self) -> (usize, usize) {
        let l = if self.corpus.entries.len() == 1 {
            0
        } else {
            let probs = self.corpus.probabilities();
            WeightedIndex::new(&probs)
                .expect("positive weights")
                .sample(&mut self.rng)
        };
        if self.cursors[l] == self.orders[l].len() {
            if self.draws[l] > 0 {
                self.epochs[l] += 1;
            }
            self.orders[l].shuffle(&mut self.rng);
            self.cursors[l] = 0;
        }
        let u = self.orders[l][self.cursors[l]];
        self.cursors[l] += 1;
        self.draws[l] += 1;
        (l, u)
    }

    pub fn batch(&mut self, size: usize) -> Vec<(usize, usize)> {
        (0..size).map(|_| self.next()).collect()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn set(frames: &[usize], tau: f64) -> CorpusSet {
        let entries = frames
            .iter()
            .enumerate()
            .map(|(i, &f)| CorpusEntry {
                language: i as u32,
                utterances: 1 + f / 10,
                frames: f,
            })
            .collect();
        CorpusSet::new(entries, tau).unwrap()
    }

    #[test]
    fn square_root_balancing() {
        let p = set(&[100, 400], 0.5).probabilities();
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-15 && (p[1] - 2.0 / 3.0).abs() < 1e-15);
        let p = set(&[100, 400, 900], 0.0).probabilities();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn empirical_frequencies_match() {
        for tau in [0.0, 0.5, 1.0] {
            let corpus = set(&[100, 400, 2500], tau);
            let p = corpus.probabilities();
            let mut s = BalancedSampler::new(corpus, 7);
            let mut counts = [0usize; 3];
            for _ in 0..20_000 {
                counts[s.next().0] += 1;
            }
            for l in 0..3 {
                assert!((counts[l] as f64 / 20_000.0 - p[l]).abs() < 0.02);
            }
        }
    }

    #[test]
    fn no_repeats_within_a_pass() {
        let mut s = BalancedSampler::new(set(&[200, 300], 1.0), 3);
        let mut seen: Vec<HashSet<usize>> = vec![HashSet::new(); 2];
        for _ in 0..500 {
            let (l, u) = s.next();
            let size = s.corpus.entries[l].utterances;
            if seen[l].len() == size {
                seen[l].clear();
            }
            assert!(seen[l].insert(u), "utterance {u} repeated in language {l}");
        }
        assert!(s.epochs.iter().all(|&e| e > 0));
    }

    #[test]
    fn state_round_trips_through_json() {
        let mut a = BalancedSampler::new(set(&[50, 80], 0.5), 11);
        a.batch(37);
        let json = serde_json::to_string(&a).unwrap();
        let mut b: BalancedSampler = serde_json::from_str(&json).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.batch(100), b.batch(100));
    }

    #[test]
    fn empty_corpora_are_rejected() {
        assert!(matches!(CorpusSet::new(vec![], 0.5), Err(Error::Data(_))));
        let empty = CorpusEntry {
            language: 0,
            utterances: 0,
            frames: 0,
        };
        assert!(matches!(
            CorpusSet::new(vec![empty], 0.5),
            Err(Error::Data(_))
        ));
    }
}
