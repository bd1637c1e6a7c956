use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One label per token.
    TokenTagging,
    /// One label per sequence.
    SequenceClassification,
}

/// Synthetic stand-in for a supervised fine-tuning corpus.
///
/// Token tagging: with `k = n_classes / 2`,
/// `label_i = k * global + (tok_{i-window} + ... + tok_i) mod k`, where
/// `global` is 1 when strictly more than half of the sentence's tokens lie in
/// the lower half of the vocabulary. Solving it needs both the token's own
/// identity and a sentence-level property.
///
/// Sequence classification: `label = (#tokens in the lower half) mod n_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    /// Number of preceding tokens folded into the local part of a tag.
    #[serde(default = "default_window")]
    pub window: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// Tag of token `i` reads tokens `i-1` and `i`.
pub const DEFAULT_WINDOW: usize = 1;

fn default_window() -> usize {
    DEFAULT_WINDOW
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl SyntheticTask {
    pub fn tagging(vocab_size: usize, seq_len: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::TokenTagging,
            vocab_size,
            seq_len,
            n_classes: 4,
            window: DEFAULT_WINDOW,
            n_train: 256,
            n_test: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.vocab_size < 2 {
            problems.push("vocab_size must be >= 2".to_string());
        }
        if self.seq_len < 1 {
            problems.push("seq_len must be >= 1".into());
        }
        match self.kind {
            TaskKind::TokenTagging => {
                if self.n_classes < 2 || !self.n_classes.is_multiple_of(2) {
                    problems.push(format!("tagging needs an even n_classes >= 2, got {}", self.n_classes));
                }
            }
            TaskKind::SequenceClassification => {
                if self.n_classes < 2 {
                    problems.push("n_classes must be >= 2".into());
                }
            }
        }
        let space = (self.vocab_size as f64).powi(self.seq_len as i32);
        if space < (self.n_train + self.n_test) as f64 {
            problems.push(format!(
                "only {space} distinct sentences for {} requested",
                self.n_train + self.n_test
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(problems))
        }
    }

    fn lower_half_count(&self, tokens: &[usize]) -> usize {
        tokens.iter().filter(|t| **t < self.vocab_size / 2).count()
    }

    /// Labels for `tokens` under this task's rule.
    pub fn label(&self, tokens: &[usize]) -> Vec<usize> {
        let low = self.lower_half_count(tokens);
        match self.kind {
            TaskKind::TokenTagging => {
                let k = self.n_classes / 2;
                let global = usize::from(2 * low > tokens.len());
                (0..tokens.len())
                    .map(|i| {
                        let start = i.saturating_sub(self.window);
                        let local = tokens[start..=i].iter().sum::<usize>() % k;
                        k * global + local
                    })
                    .collect()
            }
            TaskKind::SequenceClassification => vec![low % self.n_classes],
        }
    }

    /// `n` distinct labeled sentences, deterministic in `seed`.
    pub fn generate(&self, n: usize) -> Result<Vec<Example>> {
        self.validate_space(n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut seen = HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let tokens: Vec<usize> = (0..self.seq_len)
                .map(|_| rng.random_range(0..self.vocab_size))
                .collect();
            if seen.insert(tokens.clone()) {
                let labels = self.label(&tokens);
                out.push(Example { tokens, labels });
            }
        }
        Ok(out)
    }

    fn validate_space(&self, n: usize) -> Result<()> {
        let space = (self.vocab_size as f64).powi(self.seq_len as i32);
        if (n as f64) > space {
            return Err(LabError::config(format!(
                "cannot draw {n} distinct sentences from {space}"
            )));
        }
        Ok(())
    }

    /// Disjoint `(train, test)` splits of sizes `n_train` and `n_test`.
    pub fn splits(&self) -> Result<(Vec<Example>, Vec<Example>)> {
        self.validate()?;
        let mut all = self.generate(self.n_train + self.n_test)?;
        let test = all.split_off(self.n_train);
        Ok((all, test))
    }

    /// Accuracy of always predicting the most frequent label of `data`.
    pub fn majority_baseline(data: &[Example]) -> f64 {
        let mut counts = std::collections::BTreeMap::new();
        let mut total = 0usize;
        for e in data {
            for l in &e.labels {
                *counts.entry(*l).or_insert(0usize) += 1;
                total += 1;
            }
        }
        counts.values().copied().max().unwrap_or(0) as f64 / total.max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let task = SyntheticTask::tagging(16, 6, 9);
        assert_eq!(task.generate(20).unwrap(), task.generate(20).unwrap());
        let one = task.generate(1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].tokens.len(), 6);
        assert_eq!(one[0].labels.len(), 6);
    }

    #[test]
    fn labels_match_independent_rule() {
        let mut task = SyntheticTask::tagging(10, 7, 3);
        task.window = 1;
        for e in task.generate(50).unwrap() {
            let low = e.tokens.iter().filter(|t| **t < 5).count();
            let global = if low * 2 > 7 { 2 } else { 0 };
            for (i, l) in e.labels.iter().enumerate() {
                let prev = if i == 0 { 0 } else { e.tokens[i - 1] };
                assert_eq!(*l, global + (prev + e.tokens[i]) % 2);
            }
        }
        let cls = SyntheticTask {
            kind: TaskKind::SequenceClassification,
            n_classes: 3,
            ..SyntheticTask::tagging(10, 7, 3)
        };
        for e in cls.generate(30).unwrap() {
            let low = e.tokens.iter().filter(|t| **t < 5).count();
            assert_eq!(e.labels, vec![low % 3]);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let mut task = SyntheticTask::tagging(4, 4, 1);
        task.n_train = 150;
        task.n_test = 50;
        let (train, test) = task.splits().unwrap();
        assert_eq!((train.len(), test.len()), (150, 50));
        let train_set: HashSet<_> = train.iter().map(|e| &e.tokens).collect();
        assert!(test.iter().all(|e| !train_set.contains(&e.tokens)));

        task.n_train = 300;
        assert!(task.splits().is_err());
    }
}
